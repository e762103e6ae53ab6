//! Exact-match precision, recall and F1 with per-attribute macro averaging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::error::Result;
use crate::exec::Mode;
use crate::model::{Model, Predictor};

/// Attributes with at least this many training examples count as high-resource.
pub const DEFAULT_THRESHOLD: usize = 1000;

/// Predicted and gold value strings of one `(example, attribute)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub id: String,
    pub attribute: String,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn of(gold: &BTreeSet<String>, predicted: &BTreeSet<String>) -> Counts {
        let tp = predicted.intersection(gold).count();
        Counts {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// P is 1 with no predictions, R is 1 with no gold, F1 is 0 when both are 0.
    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(gold: &BTreeSet<String>, predicted: &BTreeSet<String>) -> Prf {
    Counts::of(gold, predicted).prf()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub attribute: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold values over all examples.
    pub support: usize,
    pub counts: Counts,
}

/// Counts pooled over every value of each attribute, sorted by attribute.
pub fn per_attribute(results: &[ExtractionResult]) -> Vec<AttributeMetrics> {
    let mut pooled: BTreeMap<&str, Counts> = BTreeMap::new();
    for r in results {
        pooled
            .entry(&r.attribute)
            .or_default()
            .add(Counts::of(&r.gold, &r.predicted));
    }
    pooled
        .into_iter()
        .map(|(a, c)| {
            let p = c.prf();
            AttributeMetrics {
                attribute: a.to_string(),
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                support: c.tp + c.fn_,
                counts: c,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub attributes: usize,
}

/// Order-independent mean: values are sorted before summing.
fn mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted mean over attributes with support; `None` if there are none.
pub fn macro_average(metrics: &[AttributeMetrics]) -> Option<MacroMetrics> {
    let used: Vec<&AttributeMetrics> = metrics.iter().filter(|m| m.support > 0).collect();
    if used.is_empty() {
        return None;
    }
    Some(MacroMetrics {
        precision: mean(used.iter().map(|m| m.precision).collect()),
        recall: mean(used.iter().map(|m| m.recall).collect()),
        f1: mean(used.iter().map(|m| m.f1).collect()),
        attributes: used.len(),
    })
}

/// Macro average from bare per-attribute F1 scores.
pub fn macro_f1(f1s: &[f64]) -> Option<f64> {
    (!f1s.is_empty()).then(|| mean(f1s.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub attributes: Vec<String>,
    /// `None` when the stratum is empty or has no support.
    pub metrics: Option<MacroMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub threshold: usize,
    pub high: Stratum,
    pub low: Stratum,
}

/// Splits attributes by training count (`>= threshold` is high-resource;
/// attributes without a count are low-resource).
pub fn stratify(
    metrics: &[AttributeMetrics],
    train_counts: &BTreeMap<String, usize>,
    threshold: usize,
) -> Stratified {
    let (high, low): (Vec<AttributeMetrics>, Vec<AttributeMetrics>) = metrics
        .iter()
        .cloned()
        .partition(|m| train_counts.get(&m.attribute).copied().unwrap_or(0) >= threshold);
    let stratum = |ms: Vec<AttributeMetrics>| Stratum {
        attributes: ms.iter().map(|m| m.attribute.clone()).collect(),
        metrics: macro_average(&ms),
    };
    Stratified {
        threshold,
        high: stratum(high),
        low: stratum(low),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_attribute: Vec<AttributeMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Option<MacroMetrics>,
    /// Attributes left out of the macro average for lack of gold values.
    pub excluded: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stratified: Option<Stratified>,
}

impl MetricsReport {
    pub fn new(results: &[ExtractionResult]) -> Self {
        let per_attribute = per_attribute(results);
        let excluded: Vec<String> = per_attribute
            .iter()
            .filter(|m| m.support == 0)
            .map(|m| m.attribute.clone())
            .collect();
        for a in &excluded {
            log::warn!("attribute `{a}` has no gold values; excluded from macro averages");
        }
        MetricsReport {
            macro_avg: macro_average(&per_attribute),
            per_attribute,
            excluded,
            stratified: None,
        }
    }

    pub fn with_strata(mut self, train_counts: &BTreeMap<String, usize>, threshold: usize) -> Self {
        self.stratified = Some(stratify(&self.per_attribute, train_counts, threshold));
        self
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_avg.map_or(0.0, |m| m.f1)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let width = self
            .per_attribute
            .iter()
            .map(|m| m.attribute.len())
            .chain([13])
            .max()
            .unwrap_or(13);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "attribute", "precision", "recall", "f1", "support"
        );
        for m in &self.per_attribute {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                m.attribute, m.precision, m.recall, m.f1, m.support
            );
        }
        let row = |out: &mut String, label: &str, m: &Option<MacroMetrics>| {
            let _ = match m {
                Some(m) => writeln!(
                    out,
                    "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                    label, m.precision, m.recall, m.f1, m.attributes
                ),
                None => writeln!(
                    out,
                    "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
                    label, "n/a", "n/a", "n/a", 0
                ),
            };
        };
        out.push('\n');
        row(&mut out, "macro", &self.macro_avg);
        if let Some(s) = &self.stratified {
            row(
                &mut out,
                &format!("high (>={})", s.threshold),
                &s.high.metrics,
            );
            row(&mut out, &format!("low (<{})", s.threshold), &s.low.metrics);
        }
        out
    }
}

/// Runs the predictor over every example.
pub fn extract_all(
    predictor: &Predictor<'_>,
    examples: &[LabeledExample],
    mode: Mode,
) -> Result<Vec<ExtractionResult>> {
    mode.map(examples, |ex| {
        Ok(ExtractionResult {
            id: ex.id.clone(),
            attribute: ex.attribute.clone(),
            predicted: predictor.extract(&ex.attribute, &ex.tokens)?,
            gold: ex.values(),
        })
    })
    .into_iter()
    .collect()
}

/// Extraction results and the metrics report of a model on labeled examples.
pub fn evaluate(
    model: &Model,
    examples: &[LabeledExample],
    mode: Mode,
) -> Result<(Vec<ExtractionResult>, MetricsReport)> {
    let predictor = model.predictor()?;
    let results = extract_all(&predictor, examples, mode)?;
    let report = MetricsReport::new(&results);
    Ok((results, report))
}
