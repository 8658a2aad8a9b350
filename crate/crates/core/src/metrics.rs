//! Retrieval and classification metrics.
//!
//! Ranking metrics work on the label sequence a query returned. AP divides
//! by the number of relevant items retrieved in the top-n unless
//! [`ApNormalization::CorpusRelevant`] is requested. A query with no
//! relevant item scores AP = RR = 0.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{logits} logit rows but {labels} labels")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("logit row {row} has {found} entries, expected {expected}")]
    RaggedLogits { row: usize, expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no test items")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApNormalization {
    /// Divide by relevant items inside the returned list.
    #[default]
    RetrievedRelevant,
    /// Divide by relevant items in the whole gallery.
    CorpusRelevant,
}

impl ApNormalization {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "retrieved" => Some(Self::RetrievedRelevant),
            "corpus" => Some(Self::CorpusRelevant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query_id: u32,
    pub query_label: usize,
    /// Labels of the returned items in rank order.
    pub returned_labels: Vec<usize>,
    /// Gallery members sharing the query label; needed only for
    /// [`ApNormalization::CorpusRelevant`].
    pub corpus_relevant: usize,
}

impl QueryResult {
    pub fn new(query_id: u32, query_label: usize, returned_labels: Vec<usize>) -> Self {
        let corpus_relevant = returned_labels.iter().filter(|&&l| l == query_label).count();
        QueryResult {
            query_id,
            query_label,
            returned_labels,
            corpus_relevant,
        }
    }

    fn relevance(&self) -> impl Iterator<Item = bool> + '_ {
        self.returned_labels.iter().map(move |&l| l == self.query_label)
    }
}

pub fn hit_ratio(qr: &QueryResult) -> f64 {
    if qr.returned_labels.is_empty() {
        return 0.0;
    }
    qr.relevance().filter(|&r| r).count() as f64 / qr.returned_labels.len() as f64
}

pub fn average_precision(qr: &QueryResult) -> f64 {
    average_precision_with(qr, ApNormalization::RetrievedRelevant)
}

pub fn average_precision_with(qr: &QueryResult, norm: ApNormalization) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in qr.relevance().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = match norm {
        ApNormalization::RetrievedRelevant => hits,
        ApNormalization::CorpusRelevant => qr.corpus_relevant.max(hits),
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn reciprocal_rank(qr: &QueryResult) -> f64 {
    qr.relevance().position(|r| r).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryScores {
    pub query_id: u32,
    pub label: usize,
    pub hr: f64,
    pub ap: f64,
    pub rr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub per_query: Vec<QueryScores>,
    pub m_hr: f64,
    pub m_ap: f64,
    pub m_rr: f64,
    /// Mean AP over queries of each class; `NaN` when a class had no query.
    pub per_class_ap: Vec<f64>,
}

/// Unweighted means over queries. `classes` sizes the per-class table.
pub fn aggregate(results: &[QueryResult], classes: usize, norm: ApNormalization) -> RankingReport {
    let per_query: Vec<QueryScores> = results
        .iter()
        .map(|q| QueryScores {
            query_id: q.query_id,
            label: q.query_label,
            hr: hit_ratio(q),
            ap: average_precision_with(q, norm),
            rr: reciprocal_rank(q),
        })
        .collect();
    let mean = |f: fn(&QueryScores) -> f64| {
        if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(f).sum::<f64>() / per_query.len() as f64
        }
    };
    let classes = classes.max(results.iter().map(|q| q.query_label + 1).max().unwrap_or(0));
    let mut sums = vec![(0.0, 0usize); classes];
    for s in &per_query {
        sums[s.label].0 += s.ap;
        sums[s.label].1 += 1;
    }
    RankingReport {
        m_hr: mean(|s| s.hr),
        m_ap: mean(|s| s.ap),
        m_rr: mean(|s| s.rr),
        per_class_ap: sums
            .into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect(),
        per_query,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    /// `NaN` when the class has no positive test item; see `present`.
    pub sensitivity: f64,
    /// `NaN` when every test item belongs to the class.
    pub specificity: f64,
    /// One-vs-rest ROC-AUC; `NaN` when either side is empty.
    pub auc: f64,
    /// Whether the class occurs among the test labels.
    pub present: bool,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Runs in `O(n log n)`.
pub fn auc_rank(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

/// Argmax predictions scored one-vs-rest per class.
pub fn classification_metrics(logits: &[Vec<f64>], labels: &[usize]) -> Result<Vec<ClassMetrics>, MetricsError> {
    if logits.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            logits: logits.len(),
            labels: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = logits[0].len();
    for (row, l) in logits.iter().enumerate() {
        if l.len() != c {
            return Err(MetricsError::RaggedLogits {
                row,
                expected: c,
                found: l.len(),
            });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(MetricsError::LabelOutOfRange { label, classes: c });
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
    Ok((0..c)
        .map(|k| {
            let (mut tp, mut fp, mut tn, mut fne) = (0, 0, 0, 0);
            for (&y, &p) in labels.iter().zip(&preds) {
                match (y == k, p == k) {
                    (true, true) => tp += 1,
                    (true, false) => fne += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            ClassMetrics {
                sensitivity: ratio(tp, fne),
                specificity: ratio(tn, fp),
                auc: auc_rank(&scores, &pos),
                present: tp + fne > 0,
            }
        })
        .collect())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// Per-query rows followed by one summary block per returned-list length.
pub fn metrics_csv(reports: &[(usize, RankingReport)], classes: Option<&[ClassMetrics]>) -> String {
    let mut out = String::from("topn,query_id,label,hr,ap,rr\n");
    for (topn, r) in reports {
        for q in &r.per_query {
            let _ = writeln!(out, "{topn},{},{},{},{},{}", q.query_id, q.label, fmt(q.hr), fmt(q.ap), fmt(q.rr));
        }
    }
    out.push_str("\ntopn,mHR,mAP,mRR\n");
    for (topn, r) in reports {
        let _ = writeln!(out, "{topn},{},{},{}", fmt(r.m_hr), fmt(r.m_ap), fmt(r.m_rr));
    }
    out.push_str("\ntopn,class,ap\n");
    for (topn, r) in reports {
        for (c, ap) in r.per_class_ap.iter().enumerate() {
            let _ = writeln!(out, "{topn},{c},{}", fmt(*ap));
        }
    }
    if let Some(cm) = classes {
        out.push_str("\nclass,present,sensitivity,specificity,auc\n");
        for (c, m) in cm.iter().enumerate() {
            let _ = writeln!(out, "{c},{},{},{},{}", m.present, fmt(m.sensitivity), fmt(m.specificity), fmt(m.auc));
        }
    }
    out
}
