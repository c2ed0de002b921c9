//! Classification metrics and multi-run aggregation.
//!
//! Averaged metrics are macro averages. Rates are fractions in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{CilmpError, Result};
use crate::prompts::{argmax, Prediction};

/// Labels, class probabilities and argmax predictions of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    y_true: Vec<usize>,
    y_score: Vec<Vec<f64>>,
    y_pred: Vec<usize>,
    classes: usize,
}

impl EvalBatch {
    /// Rows of `y_score` must sum to one within `1e-9`.
    pub fn new(y_true: Vec<usize>, y_score: Vec<Vec<f64>>) -> Result<Self> {
        if y_true.len() != y_score.len() {
            return Err(CilmpError::dim("EvalBatch", &[y_true.len()], &[y_score.len()]));
        }
        let classes = y_score.first().map_or(0, Vec::len);
        for row in &y_score {
            if row.len() != classes {
                return Err(CilmpError::dim("EvalBatch", &[classes], &[row.len()]));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| !v.is_finite()) {
                return Err(CilmpError::Evaluation(format!("score row sums to {s}")));
            }
        }
        if let Some(&y) = y_true.iter().find(|&&y| y >= classes) {
            return Err(CilmpError::Label { label: y, classes });
        }
        let y_pred = y_score.iter().map(|r| argmax(r)).collect();
        Ok(EvalBatch {
            y_true,
            y_score,
            y_pred,
            classes,
        })
    }

    /// Hard predictions as one-hot scores.
    pub fn from_labels(y_true: Vec<usize>, y_pred: &[usize], classes: usize) -> Result<Self> {
        let mut scores = Vec::with_capacity(y_pred.len());
        for &p in y_pred {
            if p >= classes {
                return Err(CilmpError::Label { label: p, classes });
            }
            let mut row = vec![0.0; classes];
            row[p] = 1.0;
            scores.push(row);
        }
        Self::new(y_true, scores)
    }

    pub fn from_predictions(y_true: Vec<usize>, preds: &[Prediction]) -> Result<Self> {
        Self::new(y_true, preds.iter().map(|p| p.probabilities.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn y_true(&self) -> &[usize] {
        &self.y_true
    }

    pub fn y_pred(&self) -> &[usize] {
        &self.y_pred
    }

    pub fn y_score(&self) -> &[Vec<f64>] {
        &self.y_score
    }

    fn require_nonempty(&self, metric: &str) -> Result<()> {
        if self.is_empty() {
            return Err(CilmpError::UndefinedMetric(format!("{metric} of an empty batch")));
        }
        Ok(())
    }
}

pub fn accuracy(b: &EvalBatch) -> Result<f64> {
    b.require_nonempty("accuracy")?;
    let hits = b.y_true.iter().zip(&b.y_pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / b.len() as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean of per-class F1 over classes present in the truth or the
/// predictions.
pub fn macro_f1(b: &EvalBatch) -> Result<f64> {
    b.require_nonempty("macro F1")?;
    let mut total = 0.0;
    let mut counted = 0;
    for k in 0..b.classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&t, &p) in b.y_true.iter().zip(&b.y_pred) {
            match (t == k, p == k) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        total += f1;
        counted += 1;
    }
    Ok(total / counted as f64)
}

/// Macro one-vs-rest AUC and the classes left out for lacking positives or
/// negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct AucResult {
    pub value: f64,
    pub skipped: Vec<usize>,
}

/// Twice the Mann-Whitney statistic of `scores` for the positives in
/// `positive`, computed from midranks.
fn doubled_u(scores: &[f64], positive: &[bool]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled midranks are integers: a tie block over ranks i+1..=j gets i+j+1.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + j + 1) as u64;
        rank_sum2 += mid2 * order[i..j].iter().filter(|&&o| positive[o]).count() as u64;
        i = j;
    }
    let np = positive.iter().filter(|&&p| p).count() as u64;
    rank_sum2 - np * (np + 1)
}

pub fn macro_ovr_auc(b: &EvalBatch) -> Result<AucResult> {
    b.require_nonempty("macro AUC")?;
    let n = b.len();
    let mut total = 0.0;
    let mut counted = 0;
    let mut skipped = Vec::new();
    for k in 0..b.classes {
        let positive: Vec<bool> = b.y_true.iter().map(|&t| t == k).collect();
        let np = positive.iter().filter(|&&p| p).count();
        if np == 0 || np == n {
            skipped.push(k);
            continue;
        }
        let scores: Vec<f64> = b.y_score.iter().map(|r| r[k]).collect();
        let u2 = doubled_u(&scores, &positive);
        total += u2 as f64 / (2 * np * (n - np)) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(CilmpError::UndefinedMetric("no class has both positives and negatives".into()));
    }
    Ok(AucResult {
        value: total / counted as f64,
        skipped,
    })
}

/// Cohen's kappa from the confusion matrix of truth and predictions.
pub fn cohen_kappa(b: &EvalBatch) -> Result<f64> {
    b.require_nonempty("kappa")?;
    let n = b.len() as f64;
    let c = b.classes;
    let mut rows = vec![0usize; c];
    let mut cols = vec![0usize; c];
    let mut agree = 0usize;
    for (&t, &p) in b.y_true.iter().zip(&b.y_pred) {
        rows[t] += 1;
        cols[p] += 1;
        if t == p {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = rows.iter().zip(&cols).map(|(&r, &k)| (r as f64 / n) * (k as f64 / n)).sum();
    if p_e == 1.0 {
        return if p_o == 1.0 {
            Ok(0.0)
        } else {
            Err(CilmpError::UndefinedMetric("kappa with chance agreement 1".into()))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub kappa: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 4] = ["accuracy", "macro_f1", "macro_auc", "kappa"];

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.macro_f1, self.macro_auc, self.kappa]
    }
}

pub fn evaluate(b: &EvalBatch) -> Result<MetricSet> {
    Ok(MetricSet {
        accuracy: accuracy(b)?,
        macro_f1: macro_f1(b)?,
        macro_auc: macro_ovr_auc(b)?.value,
        kappa: cohen_kappa(b)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n − 1`.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Zero for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64], kind: StdKind) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(CilmpError::UndefinedMetric("summary of no runs".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Summary { mean, std: 0.0, n });
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let den = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample => (n - 1) as f64,
    };
    Ok(Summary {
        mean,
        std: (ss / den).sqrt(),
        n,
    })
}

/// Mean and spread of every metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub macro_auc: Summary,
    pub kappa: Summary,
}

impl AggregateMetrics {
    pub fn summaries(&self) -> [Summary; 4] {
        [self.accuracy, self.macro_f1, self.macro_auc, self.kappa]
    }
}

pub fn aggregate(runs: &[MetricSet], kind: StdKind) -> Result<AggregateMetrics> {
    let column = |f: fn(&MetricSet) -> f64| -> Result<Summary> {
        summarize(&runs.iter().map(f).collect::<Vec<_>>(), kind)
    };
    Ok(AggregateMetrics {
        accuracy: column(|m| m.accuracy)?,
        macro_f1: column(|m| m.macro_f1)?,
        macro_auc: column(|m| m.macro_auc)?,
        kappa: column(|m| m.kappa)?,
    })
}
