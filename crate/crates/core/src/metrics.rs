//! Confusion-matrix metrics, agreement coefficients and confidence
//! statistics, plus the [`EvalReport`] that bundles them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract(format!("confusion matrix rows must all have length {k}")));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Row sums (true-class support).
    pub fn support(&self) -> Vec<u64> {
        (0..self.k).map(|t| (0..self.k).map(|p| self.get(t, p)).sum()).collect()
    }

    /// Column sums (predicted counts).
    pub fn predicted(&self) -> Vec<u64> {
        (0..self.k).map(|p| (0..self.k).map(|t| self.get(t, p)).sum()).collect()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    /// Adds another matrix of the same size; accumulation over shards is
    /// associative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Contract(format!("cannot merge {0}×{0} and {1}×{1} matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Relabels classes: class `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.k);
        for t in 0..self.k {
            for p in 0..self.k {
                out.counts[perm[t] * self.k + perm[p]] = self.get(t, p);
            }
        }
        out
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for n in class_names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (t, row) in self.rows().iter().enumerate() {
            out += class_names.get(t).map_or("", String::as_str);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Contract(format!("class index {} out of range for k = {k}", p.max(t))));
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    /// Per-class accuracy of a single-label classifier; equals `recall`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No true samples: recall and F1 are reported as 0.
    pub zero_support: bool,
    /// Never predicted: precision is reported as 0.
    pub zero_predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<PerClassMetrics> {
    if cm.k == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let (support, predicted) = (cm.support(), cm.predicted());
    let classes: Vec<ClassMetrics> = (0..cm.k)
        .map(|i| {
            let tp = cm.get(i, i);
            let recall = ratio(tp, support[i]);
            let precision = ratio(tp, predicted[i]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                support: support[i],
                predicted: predicted[i],
                accuracy: recall,
                precision,
                recall,
                f1,
                zero_support: support[i] == 0,
                zero_predicted: predicted[i] == 0,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / cm.k as f64;
    Ok(PerClassMetrics {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
    })
}

fn check_samples(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n < 2 {
        return Err(Error::Undefined(format!("agreement needs at least 2 samples, got {n}")));
    }
    Ok(n as f64)
}

/// Cohen's kappa, `(p_o − p_e) / (1 − p_e)`.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = check_samples(cm)?;
    let po = cm.trace() as f64 / n;
    let pe = cm
        .support()
        .iter()
        .zip(cm.predicted())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return Err(Error::Undefined("kappa: chance agreement is 1 (single-class marginals)".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Multiclass Matthews correlation in covariance form:
/// `(c·s − Σ pₖtₖ) / √((s² − Σ pₖ²)(s² − Σ tₖ²))` with `c` the trace, `s` the
/// total, `tₖ` the row sums and `pₖ` the column sums.
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64> {
    let s = check_samples(cm)?;
    let c = cm.trace() as f64;
    let t: Vec<f64> = cm.support().into_iter().map(|v| v as f64).collect();
    let p: Vec<f64> = cm.predicted().into_iter().map(|v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        return Err(Error::Undefined("mcc: predictions or labels use a single class".into()));
    }
    Ok((c * s - pt) / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
    /// `mean_correct − mean_incorrect`; absent when either side is empty.
    pub gap: Option<f64>,
}

/// Confidence is the largest softmax probability of each row; the
/// prediction is its argmax.
pub fn confidence_gap(probs: &[Vec<f64>], labels: &[usize]) -> Result<ConfidenceStats> {
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for (i, (row, &y)) in probs.iter().zip(labels).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("probability row {i} sums to {sum}")));
        }
        let (arg, conf) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        if arg == y {
            correct.push(conf);
        } else {
            incorrect.push(conf);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let (mc, mi) = (mean(&correct), mean(&incorrect));
    Ok(ConfidenceStats {
        mean_correct: mc,
        mean_incorrect: mi,
        gap: mc.zip(mi).map(|(a, b)| a - b),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_class: usize,
    pub pred_class: usize,
    pub count: u64,
}

/// Non-zero off-diagonal cells, largest first; ties in `(true, pred)` order.
pub fn top_confusions(cm: &ConfusionMatrix, n: usize) -> Vec<Confusion> {
    let mut cells: Vec<Confusion> = (0..cm.k)
        .flat_map(|t| (0..cm.k).map(move |p| (t, p)))
        .filter(|&(t, p)| t != p && cm.get(t, p) > 0)
        .map(|(t, p)| Confusion {
            true_class: t,
            pred_class: p,
            count: cm.get(t, p),
        })
        .collect();
    cells.sort_by(|a, b| b.count.cmp(&a.count).then((a.true_class, a.pred_class).cmp(&(b.true_class, b.pred_class))));
    cells.truncate(n);
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

/// Everything `eval` reports. Field names are the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub num_samples: u64,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Absent when undefined for the evaluated set.
    pub kappa: Option<f64>,
    pub mcc: Option<f64>,
    pub top_confusions: Vec<Confusion>,
    pub mean_confidence_correct: Option<f64>,
    pub mean_confidence_incorrect: Option<f64>,
    pub confidence_gap: Option<f64>,
    pub confusion_matrix: Vec<Vec<u64>>,
    /// `σ(α)` per residual block, for models with fusion weights.
    pub alphas: Option<Vec<f64>>,
    pub alpha_mean: Option<f64>,
    /// Free-form provenance lines (split method, checkpoint, ...).
    pub notes: Vec<String>,
}

pub const DEFAULT_TOP_CONFUSIONS: usize = 5;

impl EvalReport {
    pub fn build(
        class_names: &[String],
        preds: &[usize],
        labels: &[usize],
        probs: &[Vec<f64>],
        alphas: Option<Vec<f64>>,
        notes: Vec<String>,
    ) -> Result<Self> {
        let cm = confusion(preds, labels, class_names.len())?;
        let pc = per_class_metrics(&cm)?;
        let conf = confidence_gap(probs, labels)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            num_samples: cm.total(),
            overall_accuracy: cm.accuracy().unwrap_or(0.0),
            per_class: class_names
                .iter()
                .zip(pc.classes)
                .map(|(n, m)| ClassReport {
                    name: n.clone(),
                    metrics: m,
                })
                .collect(),
            macro_precision: pc.macro_precision,
            macro_recall: pc.macro_recall,
            macro_f1: pc.macro_f1,
            kappa: defined(kappa(&cm))?,
            mcc: defined(mcc(&cm))?,
            top_confusions: top_confusions(&cm, DEFAULT_TOP_CONFUSIONS),
            mean_confidence_correct: conf.mean_correct,
            mean_confidence_incorrect: conf.mean_incorrect,
            confidence_gap: conf.gap,
            confusion_matrix: cm.rows(),
            alpha_mean: alphas.as_deref().and_then(crate::models::mean),
            alphas,
            notes,
        })
    }

    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_rows(&self.confusion_matrix)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render_text(&self) -> String {
        let pct = |v: f64| format!("{:.2}%", 100.0 * v);
        let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or_else(|| "undefined".to_string(), f);
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "samples: {}", self.num_samples);
        let _ = writeln!(s, "overall accuracy: {}", pct(self.overall_accuracy));
        let w = self.class_names.iter().map(String::len).max().unwrap_or(5).max(9);
        let _ = writeln!(
            s,
            "\n{:<w$}  {:>9}  {:>9}  {:>26}  {:>9}  flags",
            "class", "support", "precision", "recall (per-class accuracy)", "F1"
        );
        for c in &self.per_class {
            let m = &c.metrics;
            let mut flags = Vec::new();
            if m.zero_support {
                flags.push("no-support");
            }
            if m.zero_predicted {
                flags.push("never-predicted");
            }
            let _ = writeln!(
                s,
                "{:<w$}  {:>9}  {:>9}  {:>26}  {:>9}  {}",
                c.name,
                m.support,
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                flags.join(",")
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>9}  {:>9}  {:>26}  {:>9}",
            "macro avg",
            self.num_samples,
            pct(self.macro_precision),
            pct(self.macro_recall),
            pct(self.macro_f1)
        );
        let four = |v: f64| format!("{v:.4}");
        let _ = writeln!(s, "\nCohen's kappa: {}", opt(self.kappa, &four));
        let _ = writeln!(s, "MCC: {}", opt(self.mcc, &four));
        let _ = writeln!(s, "mean confidence (correct): {}", opt(self.mean_confidence_correct, &pct));
        let _ = writeln!(s, "mean confidence (incorrect): {}", opt(self.mean_confidence_incorrect, &pct));
        let _ = writeln!(s, "confidence gap: {}", opt(self.confidence_gap, &pct));
        let _ = writeln!(s, "\ntop confusions:");
        if self.top_confusions.is_empty() {
            let _ = writeln!(s, "  none");
        }
        let name = |i: usize| self.class_names.get(i).map_or("?", String::as_str);
        for c in &self.top_confusions {
            let _ = writeln!(s, "  {} -> {}: {}", name(c.true_class), name(c.pred_class), c.count);
        }
        if let Some(a) = &self.alphas {
            let vals: Vec<String> = a.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "\nfusion weights sigma(alpha): {}", vals.join(" "));
            let _ = writeln!(s, "fusion weight mean: {}", opt(self.alpha_mean, &four));
        }
        s
    }
}
