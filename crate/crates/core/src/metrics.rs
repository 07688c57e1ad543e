//! Bits per character, macro-F1, halting statistics, and report emission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::act::HaltingRecord;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-log2 p` over every predicted character.
pub fn bpc(probs_of_correct: &[f64]) -> f64 {
    if probs_of_correct.is_empty() {
        return 0.0;
    }
    let total: f64 = probs_of_correct
        .iter()
        .map(|&p| -p.max(PROB_FLOOR).log2())
        .sum();
    total / probs_of_correct.len() as f64
}

/// Unweighted mean over classes of per-class F1. A class with no true
/// positives scores 0, including classes absent from both inputs.
pub fn macro_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions but {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::InvalidInput("n_classes must be positive".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::InvalidInput(format!(
                "class {} out of range",
                p.max(t)
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

/// Macro-F1 per head, averaged over heads. `predictions[i][k]` is sample
/// `i`'s class for head `k`.
pub fn macro_f1_heads(
    predictions: &[Vec<usize>],
    truths: &[Vec<usize>],
    n_classes: usize,
) -> Result<f64> {
    let heads = truths.first().map_or(0, Vec::len);
    if heads == 0 {
        return Err(Error::InvalidInput("no heads to score".into()));
    }
    let mut total = 0.0;
    for k in 0..heads {
        let p: Vec<usize> = predictions.iter().map(|v| v[k]).collect();
        let t: Vec<usize> = truths.iter().map(|v| v[k]).collect();
        total += macro_f1(&p, &t, n_classes)?;
    }
    Ok(total / heads as f64)
}

/// Halting statistics over a set of sequences of equal length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtStats {
    pub mean_per_step: Vec<f64>,
    pub max_per_step: Vec<usize>,
    pub max_nt: usize,
    /// `histogram[t][n - 1]` counts samples with `n_t = n` at step `t`.
    pub histogram: Vec<Vec<usize>>,
    /// Fraction of sequences with any step using more than one round.
    pub multi_round_fraction: f64,
}

/// `records[i][t]` is sample `i`'s record at step `t`.
pub fn nt_stats(records: &[Vec<HaltingRecord>], max_layers: usize) -> Result<NtStats> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidInput("no records".into()));
    };
    let steps = first.len();
    if records.iter().any(|r| r.len() != steps) {
        return Err(Error::InvalidInput("sequences differ in length".into()));
    }
    let mut histogram = vec![vec![0usize; max_layers]; steps];
    let mut multi = 0usize;
    for seq in records {
        for (t, r) in seq.iter().enumerate() {
            if r.n_t == 0 || r.n_t > max_layers {
                return Err(Error::LayerRange {
                    layer: r.n_t,
                    max: max_layers,
                });
            }
            histogram[t][r.n_t - 1] += 1;
        }
        if seq.iter().any(|r| r.n_t > 1) {
            multi += 1;
        }
    }
    let n = records.len() as f64;
    let mean_per_step = histogram
        .iter()
        .map(|h| {
            h.iter()
                .enumerate()
                .map(|(i, &c)| (i + 1) as f64 * c as f64)
                .sum::<f64>()
                / n
        })
        .collect();
    let max_per_step: Vec<usize> = histogram
        .iter()
        .map(|h| h.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1))
        .collect();
    Ok(NtStats {
        mean_per_step,
        max_nt: max_per_step.iter().copied().max().unwrap_or(0),
        max_per_step,
        histogram,
        multi_round_fraction: multi as f64 / n,
    })
}

impl NtStats {
    /// `step,mean_nt,max_nt,count_1..count_L` with 1-based steps.
    pub fn to_csv(&self) -> String {
        let l = self.histogram.first().map_or(0, Vec::len);
        let mut out = String::from("step,mean_nt,max_nt");
        for n in 1..=l {
            out.push_str(&format!(",count_{n}"));
        }
        out.push('\n');
        for (t, h) in self.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}",
                t + 1,
                self.mean_per_step[t],
                self.max_per_step[t]
            ));
            for c in h {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Whether a larger value of the metric is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Relative change over `baseline`, signed so that positive means better.
pub fn relative_improvement(metric: f64, baseline: f64, direction: Direction) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::InvalidInput("baseline is zero".into()));
    }
    let r = (metric - baseline) / baseline;
    Ok(match direction {
        Direction::HigherIsBetter => r,
        Direction::LowerIsBetter => -r,
    })
}

/// One evaluation, serialized as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epoch: Option<usize>,
    pub split: String,
    pub model: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_step: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// `step,value` rows for one per-step series.
    pub fn series_csv(&self, key: &str) -> Option<String> {
        let series = self.per_step.get(key)?;
        let mut out = String::from("step,value\n");
        for (t, v) in series.iter().enumerate() {
            out.push_str(&format!("{},{v}\n", t + 1));
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize) -> HaltingRecord {
        HaltingRecord {
            h_values: vec![0.1; n],
            n_t: n,
            p: vec![1.0 / n as f64; n],
            remainder: 1.0 / n as f64,
        }
    }

    #[test]
    fn bpc_examples() {
        assert_eq!(bpc(&[1.0 / 256.0; 10]), 8.0);
        assert_eq!(bpc(&[1.0; 4]), 0.0);
        assert_eq!(bpc(&[0.5; 7]), 1.0);
        assert_eq!(bpc(&[0.0]), -PROB_FLOOR.log2());
    }

    #[test]
    fn bpc_ignores_order() {
        let a = [0.1, 0.7, 0.3, 0.9];
        let b = [0.9, 0.3, 0.1, 0.7];
        assert!((bpc(&a) - bpc(&b)).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let v = macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert!((v - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[1, 0, 1], &[0, 1, 0], 2).unwrap(), 0.0);
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn f1_over_heads_is_mean() {
        let p = vec![vec![0, 1], vec![1, 1]];
        let t = vec![vec![0, 0], vec![1, 1]];
        let a = macro_f1(&[0, 1], &[0, 1], 2).unwrap();
        let b = macro_f1(&[1, 1], &[0, 1], 2).unwrap();
        assert_eq!(macro_f1_heads(&p, &t, 2).unwrap(), (a + b) / 2.0);
    }

    #[test]
    fn nt_examples() {
        let s = nt_stats(&[vec![rec(1), rec(1)], vec![rec(1), rec(1)]], 3).unwrap();
        assert_eq!(s.mean_per_step, vec![1.0, 1.0]);
        assert_eq!(s.multi_round_fraction, 0.0);
        let s = nt_stats(&[vec![rec(1)], vec![rec(3)]], 3).unwrap();
        assert_eq!(s.mean_per_step, vec![2.0]);
        assert_eq!(s.max_nt, 3);
        assert_eq!(s.histogram, vec![vec![1, 0, 1]]);
        assert_eq!(s.multi_round_fraction, 0.5);
        assert!(nt_stats(&[], 3).is_err());
    }

    #[test]
    fn nt_csv_schema() {
        let s = nt_stats(&[vec![rec(1), rec(2)], vec![rec(2), rec(2)]], 3).unwrap();
        let csv = s.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,mean_nt,max_nt,count_1,count_2,count_3")
        );
        assert_eq!(lines.next(), Some("1,1.5,2,1,1,0"));
        assert_eq!(lines.next(), Some("2,2,2,0,2,0"));
    }

    #[test]
    fn relative_improvement_signs() {
        let up = relative_improvement(0.542, 0.475, Direction::HigherIsBetter).unwrap();
        assert!((up - 0.141).abs() < 1e-3);
        assert_eq!(
            relative_improvement(1.0, 1.0, Direction::HigherIsBetter).unwrap(),
            0.0
        );
        let down = relative_improvement(1.8, 2.0, Direction::LowerIsBetter).unwrap();
        assert!((down - 0.1).abs() < 1e-12);
        assert!(relative_improvement(1.0, 0.0, Direction::LowerIsBetter).is_err());
    }

    #[test]
    fn report_json_schema() {
        let mut r = MetricReport {
            epoch: Some(2),
            split: "val".into(),
            model: "lfact".into(),
            metrics: BTreeMap::new(),
            per_step: BTreeMap::new(),
        };
        r.metrics.insert("bpc".into(), 1.5);
        r.per_step.insert("mean_nt".into(), vec![1.0, 2.0]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["epoch", "split", "model", "metrics", "per_step"] {
            assert!(v.get(key).is_some());
        }
        assert_eq!(r.series_csv("mean_nt").unwrap(), "step,value\n1,1\n2,2\n");
    }
}
