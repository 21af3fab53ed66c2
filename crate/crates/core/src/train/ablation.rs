use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalConfig, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::net::ModelConfig;
use crate::scalar::Real;
use crate::scene::Scene;

/// One (variant, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub instance_iou: f64,
    pub semantic_iou: f64,
    pub grasp_accuracy: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub features: Vec<String>,
    pub ious: Vec<f64>,
    pub median: f64,
    pub reference: f64,
}

/// Difference of median instance IoU, `to - from`, in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub from: Variant,
    pub to: Variant,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<Delta>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn delta(&self, from: Variant, to: Variant) -> Option<f64> {
        let (a, b) = (self.row(from)?, self.row(to)?);
        Some(b.median - a.median)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Train every variant with every seed on `train_set`, evaluate on
/// `test_set` and tabulate the median instance IoU per variant. Runs are
/// independent and execute in parallel on the current rayon pool.
pub fn run_ablation<T: Real>(
    train_set: &[Scene<T>],
    test_set: &[Scene<T>],
    base: &ModelConfig,
    variants: &[Variant],
    seeds: &[u64],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("variants", "need at least one variant and one seed"));
    }
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let run_cfg = TrainConfig { seed, variant, ..cfg.clone() };
            let model_cfg = base.clone().with_variants(variant.features());
            let (model, logs) = train(train_set, &model_cfg, &run_cfg, |_| {})?;
            let report = evaluate(&model, test_set, eval)?;
            log::info!("ablation {variant} seed {seed}: instance IoU {:.2}", report.instance_iou);
            Ok(AblationCell {
                variant,
                seed,
                instance_iou: report.instance_iou,
                semantic_iou: report.semantic_iou,
                grasp_accuracy: report.grasp.percent,
                final_loss: logs.last().map_or(f64::NAN, |l| l.total),
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|&v| {
            let ious: Vec<f64> = cells.iter().filter(|c| c.variant == v).map(|c| c.instance_iou).collect();
            AblationRow {
                variant: v,
                features: v.features().iter().map(|f| f.name().to_string()).collect(),
                median: median(&ious),
                ious,
                reference: v.reference_iou(),
            }
        })
        .collect();
    let mut deltas = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            deltas.push(Delta { from: a.variant, to: b.variant, delta: b.median - a.median });
        }
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows, deltas, cells })
}

/// Aligned plain-text rendering of an ablation table.
pub fn render_table(t: &AblationTable) -> String {
    let mut header = vec!["variant".to_string(), "features".to_string()];
    header.extend(t.seeds.iter().map(|s| format!("seed {s}")));
    header.extend(["median".to_string(), "reference".to_string()]);
    let mut lines = vec![header];
    for r in &t.rows {
        let mut l = vec![r.variant.to_string(), if r.features.is_empty() { "-".into() } else { r.features.join("+") }];
        l.extend(r.ious.iter().map(|v| format!("{v:.2}")));
        l.extend([format!("{:.2}", r.median), format!("{:.2}", r.reference)]);
        lines.push(l);
    }
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| lines.iter().filter_map(|l| l.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1))).unwrap();
        }
    }
    if !t.deltas.is_empty() {
        writeln!(out, "\nmedian deltas (percentage points):").unwrap();
        for d in &t.deltas {
            writeln!(out, "  {} - {}: {:+.2}", d.to, d.from, d.delta).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn table_renders_aligned() {
        let t = AblationTable {
            seeds: vec![1, 2],
            rows: vec![
                AblationRow { variant: Variant::None, features: vec![], ious: vec![50.0, 52.0], median: 51.0, reference: 83.01 },
                AblationRow {
                    variant: Variant::Depthcc,
                    features: vec!["rel".into(), "depth_dist".into()],
                    ious: vec![60.0, 61.5],
                    median: 60.75,
                    reference: 91.27,
                },
            ],
            deltas: vec![Delta { from: Variant::None, to: Variant::Depthcc, delta: 9.75 }],
            cells: vec![],
        };
        let s = render_table(&t);
        let lines: Vec<&str> = s.lines().collect();
        assert!(lines[0].starts_with("variant"));
        assert_eq!(lines[2].find("50.00"), lines[3].find("60.00"));
        assert!(s.contains("depthcc - none: +9.75"));
        assert_eq!(t.delta(Variant::None, Variant::Depthcc), Some(9.75));
    }
}
