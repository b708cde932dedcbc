//! Edit-distance error rates and CSV exports of posteriors and attention.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParameterStore, Tensor};
use crate::ctc::{greedy_decode, PosteriorGrid, Vocab};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::Model;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_sample_cer: Vec<f64>,
    /// Total edits over total reference length.
    pub corpus_cer: f64,
    /// Exact-match rate.
    pub accuracy: f64,
    pub samples: usize,
    pub total_edits: usize,
    pub total_reference: usize,
}

impl EvalReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let mut per_sample = Vec::new();
        let (mut edits, mut reference, mut exact) = (0, 0, 0);
        for (hyp, truth) in pairs {
            let e = edit_distance(hyp, truth);
            per_sample.push(if truth.is_empty() {
                if e == 0 { 0.0 } else { 1.0 }
            } else {
                e as f64 / truth.len() as f64
            });
            edits += e;
            reference += truth.len();
            exact += usize::from(e == 0);
        }
        let n = per_sample.len();
        EvalReport {
            corpus_cer: if reference == 0 { 0.0 } else { edits as f64 / reference as f64 },
            accuracy: if n == 0 { 0.0 } else { exact as f64 / n as f64 },
            samples: n,
            total_edits: edits,
            total_reference: reference,
            per_sample_cer: per_sample,
        }
    }

    /// `key=value` summary on one line.
    pub fn summary(&self) -> String {
        format!(
            "samples={} cer={:.6} accuracy={:.6} edits={} reference_len={}",
            self.samples, self.corpus_cer, self.accuracy, self.total_edits, self.total_reference
        )
    }
}

/// Fails when the samples cannot be fed to the model.
pub fn check_compatible(model: &Model, samples: &[Sample]) -> Result<()> {
    for s in samples {
        if s.x.rank() != 2 || s.x.shape()[1] != model.feat_dim() {
            return Err(Error::config(format!(
                "sample {} has features {:?}, model expects width {}",
                s.id,
                s.x.shape(),
                model.feat_dim()
            )));
        }
        if let Some(t) = s.y.iter().find(|&&t| t >= model.num_labels()) {
            return Err(Error::config(format!(
                "sample {} uses label {t}, model vocabulary has {} labels",
                s.id,
                model.num_labels()
            )));
        }
    }
    Ok(())
}

/// Greedy-decodes every sample and scores the result against its labels.
/// Teachers that read the target receive each sample's own labels.
pub fn evaluate(model: &Model, params: &ParameterStore, samples: &[Sample]) -> Result<EvalReport> {
    check_compatible(model, samples)?;
    let vocab = model.vocab();
    let hyps = samples
        .iter()
        .map(|s| {
            let inf = model.infer(params, &s.x, &s.y)?;
            Ok(greedy_decode(&inf.grid, &vocab))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(
        hyps.iter().zip(samples).map(|(h, s)| (h.as_slice(), s.y.as_slice())),
    ))
}

/// Fraction of frames whose argmax is the blank.
pub fn blank_fraction(grid: &PosteriorGrid, vocab: &Vocab) -> f64 {
    let path = grid.argmax_path();
    if path.is_empty() {
        return 0.0;
    }
    path.iter().filter(|&&c| c == vocab.blank()).count() as f64 / path.len() as f64
}

/// Header `frame,class_0,...,class_{K-1},blank`, one row per frame with
/// probabilities to six decimals.
pub fn posterior_csv(grid: &PosteriorGrid, vocab: &Vocab) -> Result<String> {
    if grid.classes() != vocab.num_classes() {
        return Err(Error::Dimension {
            op: "posterior_csv",
            lhs: vec![grid.frames(), grid.classes()],
            rhs: vec![vocab.num_classes()],
        });
    }
    let mut out = String::from("frame");
    for l in 0..vocab.num_labels() {
        write!(out, ",class_{l}").expect("string write");
    }
    out.push_str(",blank\n");
    let probs = grid.probs();
    // columns run over labels first, then the blank
    let order: Vec<usize> = (0..vocab.num_labels())
        .map(|l| vocab.class_of(l))
        .chain(std::iter::once(vocab.blank()))
        .collect();
    for t in 0..grid.frames() {
        let row = probs.row(t);
        write!(out, "{t}").expect("string write");
        for &c in &order {
            write!(out, ",{:.6}", row[c]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_posterior_heatmap(grid: &PosteriorGrid, vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, posterior_csv(grid, vocab)?)?;
    Ok(())
}

/// Header `query,key_0,...`, one row per query frame.
pub fn attention_csv(weights: &Tensor) -> Result<String> {
    if weights.rank() != 2 {
        return Err(Error::Dimension {
            op: "attention_csv",
            lhs: weights.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    let mut out = String::from("query");
    for k in 0..cols {
        write!(out, ",key_{k}").expect("string write");
    }
    out.push('\n');
    for t in 0..rows {
        write!(out, "{t}").expect("string write");
        for v in weights.row(t) {
            write!(out, ",{v:.6}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_attention(weights: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, attention_csv(weights)?)?;
    Ok(())
}

/// Attention-weighted key position for each query row, `sum_k w[t,k] * k`.
pub fn weighted_key_positions(weights: &Tensor) -> Vec<f64> {
    weights
        .rows()
        .take(weights.shape()[0])
        .map(|row| row.iter().enumerate().map(|(k, w)| k as f64 * w).sum())
        .collect()
}

/// Averages per-sample weighted-key-position curves on a common grid:
/// query index and key position are both rescaled to `[0, 1]` and the
/// query axis is split into `bins` equal bins.
pub fn mean_key_position_curve(maps: &[Tensor], bins: usize) -> Vec<f64> {
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for w in maps {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        if rows == 0 || cols < 2 {
            continue;
        }
        for (t, pos) in weighted_key_positions(w).into_iter().enumerate() {
            let rel_q = (t as f64 + 0.5) / rows as f64;
            let bin = ((rel_q * bins as f64) as usize).min(bins - 1);
            sums[bin] += pos / (cols - 1) as f64;
            counts[bin] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

pub fn is_non_decreasing(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[1] >= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance::<u8>(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2], &[]), 2);
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&k, &s), 3);
    }

    #[test]
    fn report_aggregates_corpus_level() {
        let truth = [vec![0, 1, 2, 3], vec![4]];
        let hyp = [vec![0, 1, 2, 3], vec![]];
        let r = EvalReport::from_pairs(hyp.iter().zip(&truth).map(|(h, t)| (h.as_slice(), t.as_slice())));
        assert_eq!(r.total_edits, 1);
        assert!((r.corpus_cer - 0.2).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_sample_cer, vec![0.0, 1.0]);
    }

    fn grid(rows: &[Vec<f64>]) -> PosteriorGrid {
        let t = Tensor::from_rows(rows, rows[0].len()).unwrap().map(f64::ln);
        PosteriorGrid::from_log_probs(t).unwrap()
    }

    #[test]
    fn posterior_csv_layout() {
        let v = Vocab::new(1).unwrap();
        let g = grid(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        let csv = posterior_csv(&g, &v).unwrap();
        assert_eq!(csv, "frame,class_0,blank\n0,0.250000,0.750000\n1,0.500000,0.500000\n");
        assert_eq!(blank_fraction(&g, &v), 0.5);
    }

    #[test]
    fn attention_csv_layout() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let csv = attention_csv(&w).unwrap();
        assert_eq!(csv, "query,key_0,key_1\n0,1.000000,0.000000\n1,0.250000,0.750000\n");
        assert_eq!(weighted_key_positions(&w), vec![0.0, 0.75]);
    }

    #[test]
    fn diagonal_maps_give_increasing_curve() {
        let diag = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
            t
        };
        let curve = mean_key_position_curve(&[diag(6), diag(9)], 4);
        assert!(is_non_decreasing(&curve));
        assert!(curve[0] < curve[3]);
        let flipped = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(!is_non_decreasing(&mean_key_position_curve(&[flipped], 2)));
    }
}
