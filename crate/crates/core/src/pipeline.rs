//! Training, indexing and evaluation over a dataset split.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::{Mode, Tape};
use crate::data::{self, DataError, Dataset, LabeledImage};
use crate::hash_index::{HashCode, HashIndex, IndexError};
use crate::losses::{self, Distance, LossConfig, LossError, LossMode, LossParts};
use crate::metrics::{self, ApNormalization, ClassMetrics, MetricsError, QueryResult, RankingReport};
use crate::network::{binarize, AthConfig, AthModel, ForwardOutput, ModelError};
use crate::optim::Sgd;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("image id {0} is not in the dataset")]
    UnknownId(u32),
    #[error("{0}")]
    Invalid(String),
    #[error("sweep cell r={r}, k={k} failed: {source}")]
    SweepCell {
        r: f64,
        k: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

/// Epoch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossParts,
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,total,hinge_term,ce_term\n");
    for e in history {
        let _ = writeln!(out, "{},{:.12e},{:.12e},{:.12e}", e.epoch, e.parts.total, e.parts.hinge, e.parts.ce);
    }
    out
}

fn lookup<'a>(by_id: &BTreeMap<u32, &'a LabeledImage>, ids: &[u32]) -> Result<Vec<&'a LabeledImage>, PipelineError> {
    ids.iter().map(|id| by_id.get(id).copied().ok_or(PipelineError::UnknownId(*id))).collect()
}

/// Triplets drawn per epoch: the training-set size rounded down to whole
/// batches, at least one batch.
pub fn triplets_per_epoch(train_len: usize, batch: usize) -> usize {
    (train_len / batch).max(1) * batch
}

/// SGD with momentum on triplets sampled afresh every epoch with seed
/// `config.seed + epoch`. Returns one loss row per epoch.
pub fn train(model: &mut AthModel, dataset: &Dataset, train_ids: &[u32], mode: LossMode, distance: Distance) -> Result<Vec<EpochLoss>, PipelineError> {
    let cfg: AthConfig = model.config().clone();
    let loss_cfg = LossConfig {
        distance,
        ..LossConfig::new(cfg.r, cfg.k, mode)
    };
    loss_cfg.validate()?;
    if dataset.image_size != cfg.input_size {
        return Err(PipelineError::Invalid(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            dataset.image_size, cfg.input_size
        )));
    }
    let by_id = dataset.by_id();
    let pool = lookup(&by_id, train_ids)?;
    if let Some(img) = pool.iter().find(|i| i.label >= cfg.classes) {
        return Err(PipelineError::Invalid(format!("label {} exceeds model class count {}", img.label, cfg.classes)));
    }
    let items: Vec<(u32, usize)> = pool.iter().map(|i| (i.id, i.label)).collect();
    let per_epoch = triplets_per_epoch(items.len(), cfg.batch);
    // fail before any update if sampling is impossible
    data::sample_triplets(&items, 1, cfg.seed)?;

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let triplets = data::sample_triplets(&items, per_epoch, cfg.seed.wrapping_add(epoch as u64))?;
        let mut sum = LossParts::default();
        let mut steps = 0;
        for chunk in triplets.chunks(cfg.batch) {
            let pick = |f: fn(&data::Triplet) -> u32| -> Vec<&LabeledImage> { chunk.iter().map(|t| by_id[&f(t)]).collect() };
            let (qs, ps, ns) = (pick(|t| t.q), pick(|t| t.p), pick(|t| t.n));
            let labels: Vec<[usize; 3]> = (0..chunk.len()).map(|i| [qs[i].label, ps[i].label, ns[i].label]).collect();

            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let q = tape.leaf(data::to_batch(&qs, cfg.input_size));
            let p = tape.leaf(data::to_batch(&ps, cfg.input_size));
            let n = tape.leaf(data::to_batch(&ns, cfg.input_size));
            let outs = model.forward_triplet(&mut tape, &bound, q, p, n, Mode::Train)?;
            let (loss, parts) = losses::combined_loss(&mut tape, &outs, &labels, &loss_cfg)?;
            tape.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<&[f64]> = bound.vars().iter().map(|&v| tape.grad(v).expect("trainable leaf")).collect();
            sgd.step(model.params_mut().tensors_mut().iter_mut().map(|t| t.data_mut()).zip(grads));

            sum.total += parts.total;
            sum.hinge += parts.hinge;
            sum.ce += parts.ce;
            steps += 1;
        }
        let s = steps as f64;
        let parts = LossParts {
            total: sum.total / s,
            hinge: sum.hinge / s,
            ce: sum.ce / s,
        };
        if !parts.total.is_finite() {
            return Err(PipelineError::Invalid(format!("loss diverged at epoch {epoch}")));
        }
        history.push(EpochLoss { epoch, parts });
    }
    Ok(history)
}

const INFER_CHUNK: usize = 32;

/// Eval-mode outputs in input order.
pub fn encode(model: &AthModel, images: &[&LabeledImage]) -> Result<Vec<ForwardOutput>, PipelineError> {
    let size = model.config().input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        if let Some(bad) = chunk.iter().find(|i| i.pixels.len() != size * size) {
            return Err(PipelineError::Invalid(format!("image {} does not match the model input {size}x{size}", bad.id)));
        }
        out.extend(model.infer(&data::to_batch(chunk, size))?);
    }
    Ok(out)
}

pub fn build_index(model: &AthModel, dataset: &Dataset, gallery_ids: &[u32]) -> Result<HashIndex, PipelineError> {
    let by_id = dataset.by_id();
    let gallery = lookup(&by_id, gallery_ids)?;
    let codes: Vec<HashCode> = encode(model, &gallery)?.iter().map(|o| binarize(&o.hash_vec)).collect();
    let labels = gallery
        .iter()
        .map(|i| u16::try_from(i.label).map_err(|_| PipelineError::Invalid(format!("label {} does not fit u16", i.label))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HashIndex::build_with_k(model.config().k, &codes, gallery_ids, &labels)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One ranking report per requested list length, in request order.
    pub rankings: Vec<(usize, RankingReport)>,
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn ranking(&self, topn: usize) -> Option<&RankingReport> {
        self.rankings.iter().find(|(n, _)| *n == topn).map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        metrics::metrics_csv(&self.rankings, Some(&self.classes))
    }
}

/// Every query image is searched against `index`; a query present in the
/// index is removed from its own result list.
pub fn evaluate(model: &AthModel, index: &HashIndex, dataset: &Dataset, query_ids: &[u32], topns: &[usize], norm: ApNormalization) -> Result<EvalReport, PipelineError> {
    if query_ids.is_empty() {
        return Err(PipelineError::Invalid("the query split is empty".into()));
    }
    if topns.is_empty() || topns.contains(&0) {
        return Err(PipelineError::Invalid("topn values must be at least 1".into()));
    }
    if index.k() != model.config().k {
        return Err(PipelineError::Invalid(format!("index has k={}, model has k={}", index.k(), model.config().k)));
    }
    let by_id = dataset.by_id();
    let queries = lookup(&by_id, query_ids)?;
    let outputs = encode(model, &queries)?;
    let mut gallery_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in index.labels() {
        *gallery_counts.entry(l as usize).or_default() += 1;
    }
    let in_index: std::collections::HashSet<u32> = index.ids().iter().copied().collect();
    let max_n = *topns.iter().max().unwrap();
    let classes = model.config().classes;

    let mut full = Vec::with_capacity(queries.len());
    for (img, out) in queries.iter().zip(&outputs) {
        let exclude = in_index.contains(&img.id).then_some(img.id);
        let hits = index.search_excluding(&binarize(&out.hash_vec), max_n, exclude)?;
        let relevant = gallery_counts.get(&img.label).copied().unwrap_or(0) - usize::from(exclude.is_some());
        full.push((img, hits, relevant));
    }
    let rankings = topns
        .iter()
        .map(|&n| {
            let results: Vec<QueryResult> = full
                .iter()
                .map(|(img, hits, relevant)| QueryResult {
                    query_id: img.id,
                    query_label: img.label,
                    returned_labels: hits.iter().take(n).map(|h| h.label as usize).collect(),
                    corpus_relevant: *relevant,
                })
                .collect();
            (n, metrics::aggregate(&results, classes, norm))
        })
        .collect();
    let logits: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.logits).collect();
    let labels: Vec<usize> = queries.iter().map(|i| i.label).collect();
    Ok(EvalReport {
        rankings,
        classes: metrics::classification_metrics(&logits, &labels)?,
    })
}

/// A fresh model trained on `train_ids`, indexed on the same images and
/// scored on `test_ids`.
pub struct RunOutcome {
    pub model: AthModel,
    pub history: Vec<EpochLoss>,
    pub index: HashIndex,
    pub report: EvalReport,
}

pub fn train_and_evaluate(
    config: &AthConfig,
    dataset: &Dataset,
    split: &data::Split,
    mode: LossMode,
    topns: &[usize],
) -> Result<RunOutcome, PipelineError> {
    let mut model = AthModel::new(config.clone())?;
    let history = train(&mut model, dataset, &split.train, mode, Distance::default())?;
    let index = build_index(&model, dataset, &split.train)?;
    let report = evaluate(&model, &index, dataset, &split.test, topns, ApNormalization::default())?;
    Ok(RunOutcome {
        model,
        history,
        index,
        report,
    })
}

/// mAP at `topn` for every `(r, k)` cell, row-major over `r_values`.
/// Cells run on up to `threads` worker threads; results do not depend on
/// the thread count.
pub fn sweep(
    base: &AthConfig,
    dataset: &Dataset,
    split: &data::Split,
    r_values: &[f64],
    k_values: &[usize],
    topn: usize,
    threads: usize,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let cells: Vec<(f64, usize)> = r_values.iter().flat_map(|&r| k_values.iter().map(move |&k| (r, k))).collect();
    let run = |&(r, k): &(f64, usize)| -> Result<f64, PipelineError> {
        let cfg = AthConfig { r, k, ..base.clone() };
        let out = train_and_evaluate(&cfg, dataset, split, LossMode::Combined, &[topn])
            .map_err(|e| PipelineError::SweepCell { r, k, source: Box::new(e) })?;
        Ok(out.report.rankings[0].1.m_ap)
    };
    let results = parallel_map(&cells, threads, run);
    let flat = results.into_iter().collect::<Result<Vec<f64>, _>>()?;
    Ok(flat.chunks(k_values.len().max(1)).map(<[f64]>::to_vec).collect())
}

pub fn sweep_csv(r_values: &[f64], k_values: &[usize], grid: &[Vec<f64>]) -> String {
    let mut out = String::from("r");
    for k in k_values {
        let _ = write!(out, ",k={k}");
    }
    out.push('\n');
    for (r, row) in r_values.iter().zip(grid) {
        let _ = write!(out, "{r}");
        for v in row {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Order-preserving map over `items` on scoped worker threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}
