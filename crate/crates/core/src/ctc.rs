//! CTC alignment algebra: the collapse map, exhaustive inverse enumeration,
//! the log-domain forward-backward loss and greedy decoding.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Where the blank symbol sits among the output classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlankPosition {
    First,
    Last,
}

/// Label set `I` plus the blank. Labels are `0..num_labels`; output classes
/// are `0..num_labels + 1` with the blank at [`Vocab::blank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    num_labels: usize,
    blank: BlankPosition,
}

impl Vocab {
    /// Blank at the last class index.
    pub fn new(num_labels: usize) -> Result<Self> {
        Self::with_blank(num_labels, BlankPosition::Last)
    }

    pub fn with_blank(num_labels: usize, blank: BlankPosition) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::config("vocabulary needs at least one label"));
        }
        Ok(Vocab { num_labels, blank })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_labels + 1
    }

    pub fn blank(&self) -> usize {
        match self.blank {
            BlankPosition::First => 0,
            BlankPosition::Last => self.num_labels,
        }
    }

    pub fn blank_position(&self) -> BlankPosition {
        self.blank
    }

    pub fn class_of(&self, label: usize) -> usize {
        match self.blank {
            BlankPosition::First => label + 1,
            BlankPosition::Last => label,
        }
    }

    pub fn label_of(&self, class: usize) -> Option<usize> {
        match self.blank {
            _ if class == self.blank() => None,
            BlankPosition::First => Some(class - 1),
            BlankPosition::Last => Some(class),
        }
    }

    pub fn check_labels(&self, y: &[usize]) -> Result<()> {
        match y.iter().find(|&&t| t >= self.num_labels) {
            Some(t) => Err(Error::usage(format!(
                "label {t} outside vocabulary of {} labels",
                self.num_labels
            ))),
            None => Ok(()),
        }
    }
}

/// Per-frame log-probabilities over the output classes, `[frames, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Tensor,
}

/// Rows of a posterior grid must log-sum-exp to zero within this tolerance.
pub const GRID_NORMALIZATION_TOL: f64 = 1e-9;

impl PosteriorGrid {
    pub fn from_log_probs(log_probs: Tensor) -> Result<Self> {
        if log_probs.rank() != 2 {
            return Err(Error::Dimension {
                op: "posterior_grid",
                lhs: log_probs.shape().to_vec(),
                rhs: vec![],
            });
        }
        for (t, row) in log_probs.rows().enumerate().take(log_probs.shape()[0]) {
            let lse = log_sum_exp(row);
            if (lse.abs() > GRID_NORMALIZATION_TOL) || !lse.is_finite() {
                return Err(Error::usage(format!(
                    "frame {t} is not normalized (log-sum-exp {lse})"
                )));
            }
        }
        Ok(PosteriorGrid { log_probs })
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn probs(&self) -> Tensor {
        self.log_probs.map(f64::exp)
    }

    /// Per-frame argmax, ties going to the lowest class index.
    pub fn argmax_path(&self) -> Vec<usize> {
        argmax_path(&self.log_probs)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Merge consecutive repeats, then drop blanks. Input is in class space,
/// output in label space.
pub fn collapse(alignment: &[usize], vocab: &Vocab) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in alignment {
        if prev != Some(c) {
            if let Some(label) = vocab.label_of(c) {
                out.push(label);
            }
        }
        prev = Some(c);
    }
    out
}

pub fn adjacent_repeats(y: &[usize]) -> usize {
    y.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Fewest frames able to emit `y`: one per label plus a separating blank
/// between equal neighbours.
pub fn min_frames(y: &[usize]) -> usize {
    y.len() + adjacent_repeats(y)
}

pub fn check_feasible(frames: usize, y: &[usize]) -> Result<()> {
    if frames < min_frames(y) {
        return Err(Error::Infeasible {
            frames,
            labels: y.len(),
            repeats: adjacent_repeats(y),
        });
    }
    Ok(())
}

/// Every length-`frames` alignment that collapses to `y`, found by walking
/// all `num_classes^frames` strings in lexicographic order. Exponential:
/// meant for small oracle checks only.
pub fn enumerate_inverse(y: &[usize], frames: usize, vocab: &Vocab) -> Vec<Vec<usize>> {
    let k = vocab.num_classes();
    let mut out = Vec::new();
    let mut current = vec![0usize; frames];
    loop {
        if collapse(&current, vocab) == y {
            out.push(current.clone());
        }
        // odometer increment, last position fastest
        let mut pos = frames;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < k {
                break;
            }
            current[pos] = 0;
        }
    }
}

fn check_grid(log_probs: &Tensor, y: &[usize], vocab: &Vocab) -> Result<(usize, usize)> {
    let s = log_probs.shape();
    if s.len() != 2 || s[1] != vocab.num_classes() {
        return Err(Error::Dimension {
            op: "ctc_loss",
            lhs: s.to_vec(),
            rhs: vec![vocab.num_classes()],
        });
    }
    vocab.check_labels(y)?;
    Ok((s[0], s[1]))
}

/// Negative log-likelihood of `y` under per-frame scores `log_probs` and the
/// gradient of that value with respect to every score. Rows need not be
/// normalized; the gradient treats each entry as an independent input.
pub fn ctc_loss(log_probs: &Tensor, y: &[usize], vocab: &Vocab) -> Result<(f64, Tensor)> {
    let (frames, classes) = check_grid(log_probs, y, vocab)?;
    check_feasible(frames, y)?;
    if frames == 0 {
        return Ok((0.0, Tensor::zeros(&[0, classes])));
    }
    let blank = vocab.blank();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(y.iter().flat_map(|&l| [vocab.class_of(l), blank]))
        .collect();
    let states = ext.len();
    let lp = |t: usize, c: usize| log_probs.data()[t * classes + c];
    // a skip from s-2 to s is allowed when s is a label differing from s-2
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, ext[0]);
    if states > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + lp(t, ext[s]) };
        }
    }

    let last = (frames - 1) * states;
    let mut log_likelihood = alpha[last + states - 1];
    if states > 1 {
        log_likelihood = lse2(log_likelihood, alpha[last + states - 2]);
    }
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    // beta[t][s]: log mass of completing the alignment from state s at frame
    // t, excluding the emission at t itself
    let mut beta = vec![neg; frames * states];
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = (t + 1) * states;
            let mut acc = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < states {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * states + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let a = alpha[t * states + s] + beta[t * states + s];
            if a > neg {
                grad[t * classes + ext[s]] -= (a - log_likelihood).exp();
            }
        }
    }
    Ok((-log_likelihood, Tensor::new(vec![frames, classes], grad)?))
}

/// Largest grid the brute-force loss accepts.
pub const BRUTEFORCE_MAX_FRAMES: usize = 8;
pub const BRUTEFORCE_MAX_LABELS: usize = 4;

/// Same quantity as [`ctc_loss`], summed path by path over
/// [`enumerate_inverse`].
pub fn ctc_loss_bruteforce(log_probs: &Tensor, y: &[usize], vocab: &Vocab) -> Result<f64> {
    let (frames, classes) = check_grid(log_probs, y, vocab)?;
    if frames > BRUTEFORCE_MAX_FRAMES || vocab.num_labels() > BRUTEFORCE_MAX_LABELS {
        return Err(Error::usage(format!(
            "brute-force CTC limited to {BRUTEFORCE_MAX_FRAMES} frames and \
             {BRUTEFORCE_MAX_LABELS} labels, got {frames} frames and {} labels",
            vocab.num_labels()
        )));
    }
    check_feasible(frames, y)?;
    let path_scores: Vec<f64> = enumerate_inverse(y, frames, vocab)
        .iter()
        .map(|path| {
            path.iter()
                .enumerate()
                .map(|(t, &c)| log_probs.data()[t * classes + c])
                .sum()
        })
        .collect();
    Ok(-log_sum_exp(&path_scores))
}

/// Records the CTC loss of `grid` (a `[frames, classes]` log-probability
/// node) on the tape.
pub fn ctc_loss_on_tape(tape: &mut Tape, grid: Var, y: &[usize], vocab: &Vocab) -> Result<Var> {
    let (loss, grad) = ctc_loss(tape.value(grid), y, vocab)?;
    tape.custom_scalar("ctc_loss", grid, loss, grad)
}

pub fn argmax_path(scores: &Tensor) -> Vec<usize> {
    scores
        .rows()
        .take(scores.shape().first().copied().unwrap_or(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-frame argmax followed by [`collapse`].
pub fn greedy_decode(grid: &PosteriorGrid, vocab: &Vocab) -> Vec<usize> {
    collapse(&grid.argmax_path(), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 0;
    const B: usize = 1;

    fn vocab2() -> Vocab {
        Vocab::new(2).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let v = vocab2();
        let blank = v.blank();
        assert_eq!(collapse(&[A, A, blank, B], &v), vec![A, B]);
        assert_eq!(collapse(&[blank, blank, blank], &v), Vec::<usize>::new());
        assert_eq!(collapse(&[A, blank, A], &v), vec![A, A]);
    }

    #[test]
    fn blank_first_maps_classes() {
        let v = Vocab::with_blank(2, BlankPosition::First).unwrap();
        assert_eq!(v.blank(), 0);
        assert_eq!(v.class_of(A), 1);
        assert_eq!(collapse(&[1, 1, 0, 2], &v), vec![A, B]);
    }

    #[test]
    fn enumerate_counted_cases() {
        let v = vocab2();
        let x = v.blank();
        let got = enumerate_inverse(&[A, B], 3, &v);
        let mut want = vec![
            vec![A, A, B],
            vec![A, B, B],
            vec![A, B, x],
            vec![A, x, B],
            vec![x, A, B],
        ];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(enumerate_inverse(&[A, A], 3, &v), vec![vec![A, x, A]]);
        assert_eq!(enumerate_inverse(&[A], 1, &v), vec![vec![A]]);
        assert!(enumerate_inverse(&[A, A], 2, &v).is_empty());
    }

    #[test]
    fn uniform_two_frame_loss() {
        let v = Vocab::new(1).unwrap();
        let grid = Tensor::full(&[2, 2], 0.5f64.ln());
        let (loss, _) = ctc_loss(&grid, &[0], &v).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.287682).abs() < 1e-6);
        let brute = ctc_loss_bruteforce(&grid, &[0], &v).unwrap();
        assert!((brute - loss).abs() < 1e-12);
    }

    #[test]
    fn certain_single_path_has_zero_loss() {
        let v = Vocab::new(1).unwrap();
        let grid = Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        let (loss, _) = ctc_loss(&grid, &[0], &v).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn repeated_label_in_one_frame_is_infeasible() {
        let v = Vocab::new(1).unwrap();
        let grid = Tensor::full(&[1, 2], 0.5f64.ln());
        match ctc_loss(&grid, &[0, 0], &v) {
            Err(Error::Infeasible {
                frames: 1,
                labels: 2,
                repeats: 1,
            }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn empty_target_scores_the_all_blank_path() {
        let v = vocab2();
        let grid = Tensor::new(vec![2, 3], vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.8f64.ln()]).unwrap();
        let want = -(0.5f64.ln() + 0.8f64.ln());
        let brute = ctc_loss_bruteforce(&grid, &[], &v).unwrap();
        let (dp, grad) = ctc_loss(&grid, &[], &v).unwrap();
        assert!((brute - want).abs() < 1e-12);
        assert!((dp - want).abs() < 1e-12);
        assert_eq!(grad.data()[2], -1.0);
        assert_eq!(grad.data()[5], -1.0);
    }

    #[test]
    fn bruteforce_size_guard() {
        let v = vocab2();
        let grid = Tensor::full(&[9, 3], (1.0f64 / 3.0).ln());
        assert!(matches!(
            ctc_loss_bruteforce(&grid, &[A], &v),
            Err(Error::Usage(_))
        ));
        let wide = Vocab::new(5).unwrap();
        let grid = Tensor::full(&[2, 6], (1.0f64 / 6.0).ln());
        assert!(matches!(
            ctc_loss_bruteforce(&grid, &[A], &wide),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn greedy_examples() {
        let v = vocab2();
        let x = v.blank();
        let onehot = |path: &[usize]| {
            let rows: Vec<Vec<f64>> = path
                .iter()
                .map(|&c| (0..3).map(|k| if k == c { 0.9f64.ln() } else { 0.05f64.ln() }).collect())
                .collect();
            PosteriorGrid::from_log_probs(Tensor::from_rows(&rows, 3).unwrap()).unwrap()
        };
        assert_eq!(greedy_decode(&onehot(&[A, A, x, B]), &v), vec![A, B]);
        assert!(greedy_decode(&onehot(&[x, x, x]), &v).is_empty());
        assert_eq!(greedy_decode(&onehot(&[A, x, A, A]), &v), vec![A, A]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let t = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_path(&t), vec![0]);
    }

    #[test]
    fn grid_rejects_unnormalized_rows() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(PosteriorGrid::from_log_probs(t).is_err());
    }
}
