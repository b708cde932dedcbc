#![allow(dead_code)]

pub mod grad_cases;

use otkd_core::autodiff::gradcheck::{check_gradients, FD_STEP};
use otkd_core::autodiff::{Bindings, ParameterStore, Tape, Tensor, Var};
use otkd_core::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const CASES: u64 = 50;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Fixed, shape-dependent weights so `weighted_sum` probes every output entry
/// with a different coefficient.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() * 1.3).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * W)` with `W` from [`probe_weights`].
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(probe_weights(tape.shape(y)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn store(entries: Vec<(&str, Tensor)>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

/// Replaces every parameter by a uniform draw on `[-scale, scale]`.
pub fn randomize(params: &ParameterStore, scale: f64, rng: &mut ChaCha8Rng) -> ParameterStore {
    let mut out = ParameterStore::new();
    for (n, t) in params.iter() {
        out.insert(n.clone(), Tensor::uniform(t.shape(), -scale, scale, rng)).unwrap();
    }
    out
}

/// Asserts the backward pass of `weighted_sum(build(..))` matches central
/// differences.
pub fn assert_grad<F>(what: &str, case: u64, params: &ParameterStore, build: F)
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let report = check_gradients(params, FD_STEP, |tape, b| {
        let y = build(tape, b)?;
        weighted_sum(tape, y)
    })
    .unwrap_or_else(|e| panic!("{what} case {case}: {e}"));
    assert!(
        report.max_rel_err <= GRAD_TOL,
        "{what} case {case}: rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// Number of length-`frames` class paths collapsing to `y`, counted by a
/// dynamic program over (frame, extended-label state) independent of the
/// enumerator.
pub fn path_count(y: &[usize], frames: usize, blank: usize) -> u128 {
    let mut ext = vec![blank];
    for &l in y {
        ext.push(l);
        ext.push(blank);
    }
    let s = ext.len();
    if frames == 0 {
        return u128::from(y.is_empty());
    }
    let mut count = vec![0u128; s];
    count[0] = 1;
    if s > 1 {
        count[1] = 1;
    }
    for _ in 1..frames {
        let mut next = vec![0u128; s];
        for j in 0..s {
            let mut c = count[j];
            if j >= 1 {
                c += count[j - 1];
            }
            if j >= 2 && ext[j] != blank && ext[j] != ext[j - 2] {
                c += count[j - 2];
            }
            next[j] = c;
        }
        count = next;
    }
    count[s - 1] + if s >= 2 { count[s - 2] } else { 0 }
}

/// Random row-normalized log-probability grid.
pub fn random_log_grid(frames: usize, classes: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![frames, classes], data).unwrap()
}
