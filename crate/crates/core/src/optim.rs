//! Parameter updates.

/// One heavy-ball step: `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert!(lr > 0.0 && (0.0..1.0).contains(&momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// SGD with momentum over a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one step; the `i`th call argument always refers to the same parameter.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) {
        for (i, (p, g)) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; p.len()]);
            }
            sgd_momentum_step(p, g, &mut self.velocity[i], self.lr, self.momentum);
        }
    }
}
