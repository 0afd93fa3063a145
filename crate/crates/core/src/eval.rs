//! Batch evaluation of prediction files.
//!
//! Records arrive as JSONL with `id`, `kind`, `pred` and `gold`. The payload
//! shape depends on the kind:
//!
//! | kind | pred / gold |
//! |---|---|
//! | `binary`, `single`, `multiple` | answer strings |
//! | `open` | arrays of disease names |
//! | `text` | strings |
//! | `localization` | `[x_min, y_min, x_max, y_max]` |
//! | `ranking` | ranked array of disease names / gold array of disease names |

use crate::metrics::{bleu, iou, jaccard, recall_at_k, rouge_l, rouge_n, tokenize, BBox, Disease, LabelSet};
use crate::rewards::normalize_answer;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("record {id}: {reason}")]
    Schema { id: String, reason: String },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Single,
    Multiple,
    Open,
    Text,
    Localization,
    Ranking,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Single => "single",
            TaskKind::Multiple => "multiple",
            TaskKind::Open => "open",
            TaskKind::Text => "text",
            TaskKind::Localization => "localization",
            TaskKind::Ranking => "ranking",
        }
    }
}

/// One prediction as read from a file; payloads are typed per kind by
/// [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub kind: TaskKind,
    pub pred: Value,
    pub gold: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub jaccard_threshold: f64,
    pub iou_threshold: f64,
    pub recall_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            jaccard_threshold: 0.5,
            iou_threshold: 0.5,
            recall_ks: vec![1, 3, 5],
        }
    }
}

/// Metric values keyed by task kind, then metric name.
pub type Report = BTreeMap<String, BTreeMap<String, f64>>;

/// Reads predictions JSONL, skipping blank lines.
pub fn read_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Line { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

fn typed<T: serde::de::DeserializeOwned>(r: &PredictionRecord, v: &Value, what: &str) -> Result<T, EvalError> {
    serde_json::from_value(v.clone()).map_err(|e| EvalError::Schema {
        id: r.id.clone(),
        reason: format!("{what} does not fit kind {}: {e}", r.kind.as_str()),
    })
}

fn bbox(r: &PredictionRecord, v: &Value, what: &str) -> Result<BBox, EvalError> {
    let [a, b, c, d]: [f64; 4] = typed(r, v, what)?;
    BBox::new(a, b, c, d).map_err(|e| EvalError::Schema { id: r.id.clone(), reason: format!("{what}: {e}") })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Computes per-kind metrics. Kinds with no records are absent.
pub fn evaluate(records: &[PredictionRecord], config: &EvalConfig) -> Result<Report, EvalError> {
    let mut by_kind: BTreeMap<TaskKind, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_kind.entry(r.kind).or_default().push(r);
    }
    let mut report = Report::new();
    for (kind, recs) in by_kind {
        let n = recs.len() as f64;
        let mut m = BTreeMap::new();
        m.insert("n".to_string(), n);
        match kind {
            TaskKind::Binary | TaskKind::Single | TaskKind::Multiple => {
                let mut correct = 0usize;
                for r in &recs {
                    let p: String = typed(r, &r.pred, "pred")?;
                    let g: String = typed(r, &r.gold, "gold")?;
                    correct += (normalize_answer(&p) == normalize_answer(&g)) as usize;
                }
                m.insert("accuracy".into(), correct as f64 / n);
            }
            TaskKind::Open => {
                let (mut tp, mut fp, mut fneg, mut hits) = (0usize, 0usize, 0usize, 0usize);
                let mut jac = Vec::new();
                for r in &recs {
                    let p: LabelSet = typed(r, &r.pred, "pred")?;
                    let g: LabelSet = typed(r, &r.gold, "gold")?;
                    let j = jaccard(&p, &g);
                    hits += (j > config.jaccard_threshold) as usize;
                    jac.push(j);
                    let i = p.intersection_len(&g);
                    tp += i;
                    fp += p.len() - i;
                    fneg += g.len() - i;
                }
                let denom = 2 * tp + fp + fneg;
                m.insert("jaccard_mean".into(), mean(&jac));
                m.insert("accuracy".into(), hits as f64 / n);
                m.insert("micro_f1".into(), if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 });
            }
            TaskKind::Text => {
                let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for r in &recs {
                    let p: String = typed(r, &r.pred, "pred")?;
                    let g: String = typed(r, &r.gold, "gold")?;
                    let (pt, gt) = (tokenize(&p), tokenize(&g));
                    let r1 = rouge_n(&pt, &gt, 1).expect("n = 1 is supported");
                    let r2 = rouge_n(&pt, &gt, 2).expect("n = 2 is supported");
                    for (name, v) in [
                        ("bleu1", bleu(&pt, &gt, 1)),
                        ("bleu4", bleu(&pt, &gt, 4)),
                        ("rouge1", r1),
                        ("rouge2", r2),
                        ("rougeL", rouge_l(&pt, &gt)),
                    ] {
                        cols.entry(name).or_default().push(v);
                    }
                }
                for (name, v) in cols {
                    m.insert(name.into(), mean(&v));
                }
            }
            TaskKind::Localization => {
                let mut ious = Vec::new();
                let mut hits = 0usize;
                for r in &recs {
                    let v = iou(&bbox(r, &r.pred, "pred")?, &bbox(r, &r.gold, "gold")?);
                    hits += (v > config.iou_threshold) as usize;
                    ious.push(v);
                }
                m.insert("iou_mean".into(), mean(&ious));
                m.insert("accuracy".into(), hits as f64 / n);
            }
            TaskKind::Ranking => {
                let mut cols: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for r in &recs {
                    let ranked: Vec<Disease> = typed(r, &r.pred, "pred")?;
                    let gold: LabelSet = typed(r, &r.gold, "gold")?;
                    for &k in &config.recall_ks {
                        let v = recall_at_k(&ranked, &gold, k)
                            .map_err(|e| EvalError::Schema { id: r.id.clone(), reason: e.to_string() })?;
                        cols.entry(k).or_default().push(v);
                    }
                }
                for (k, v) in cols {
                    m.insert(format!("recall@{k}"), mean(&v));
                }
            }
        }
        report.insert(kind.as_str().to_string(), m);
    }
    Ok(report)
}

/// Aligned text table (4 decimals) and a full-precision JSON document.
pub fn render_report(report: &Report) -> (String, String) {
    let rows: Vec<(String, String, String)> = report
        .iter()
        .flat_map(|(kind, metrics)| {
            metrics.iter().map(move |(name, v)| (kind.clone(), name.clone(), format!("{v:.4}")))
        })
        .collect();
    let w0 = rows.iter().map(|r| r.0.len()).chain([4]).max().unwrap_or(4);
    let w1 = rows.iter().map(|r| r.1.len()).chain([6]).max().unwrap_or(6);
    let mut table = String::new();
    let _ = writeln!(table, "{:<w0$}  {:<w1$}  value", "kind", "metric");
    for (k, m, v) in &rows {
        let _ = writeln!(table, "{k:<w0$}  {m:<w1$}  {v}");
    }
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    (table, json)
}
