//! Finite-difference checks of every tape op, nn module and loss.

use super::*;
use otkd_core::autodiff::gradcheck::{check_gradients, FD_STEP};
use otkd_core::autodiff::{ParameterStore, Tape, Tensor};
use otkd_core::ctc::{ctc_loss, ctc_loss_on_tape, Vocab};
use otkd_core::distill::{fitnets_loss, frame_kl_loss, softmax_l2_loss, Projection};
use otkd_core::nn::{
    attention, embed, ConvBlock, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
use rand::Rng;

fn dims(rng: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn matmul() {
    for case in 0..CASES {
        let mut r = rng(case);
        let (m, k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let p = store(vec![("a", uniform(&[m, k], &mut r)), ("b", uniform(&[k, n], &mut r))]);
        assert_grad("matmul", case, &p, |t, b| t.matmul(b.get("a")?, b.get("b")?));
    }
}

pub fn elementwise_binary_with_broadcasting() {
    for case in 0..CASES {
        let mut r = rng(100 + case);
        let (m, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let rhs_shape: Vec<usize> = match case % 3 {
            0 => vec![m, n],
            1 => vec![n],
            _ => vec![1],
        };
        let p = store(vec![("a", uniform(&[m, n], &mut r)), ("b", uniform(&rhs_shape, &mut r))]);
        assert_grad("add", case, &p, |t, b| t.add(b.get("a")?, b.get("b")?));
        assert_grad("sub", case, &p, |t, b| t.sub(b.get("a")?, b.get("b")?));
        assert_grad("mul", case, &p, |t, b| t.mul(b.get("a")?, b.get("b")?));
    }
}

pub fn unary_ops() {
    for case in 0..CASES {
        let mut r = rng(200 + case);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 4)];
        let x = uniform(&shape, &mut r);
        // keep relu away from its kink and log on its domain
        let kinkless = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let positive = x.map(|v| v.abs() + 0.1);
        let c = r.gen_range(0.5..3.0);
        let p = store(vec![("x", x)]);
        assert_grad("div_scalar", case, &p, |t, b| t.div_scalar(b.get("x")?, c));
        assert_grad("exp", case, &p, |t, b| t.exp(b.get("x")?));
        assert_grad("tanh", case, &p, |t, b| t.tanh(b.get("x")?));
        assert_grad("relu", case, &store(vec![("x", kinkless)]), |t, b| t.relu(b.get("x")?));
        assert_grad("log", case, &store(vec![("x", positive)]), |t, b| t.log(b.get("x")?));
    }
}

pub fn normalizers() {
    for case in 0..CASES {
        let mut r = rng(300 + case);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 2, 5)];
        let p = store(vec![("x", uniform(&shape, &mut r))]);
        assert_grad("softmax", case, &p, |t, b| t.softmax(b.get("x")?));
        assert_grad("log_softmax", case, &p, |t, b| t.log_softmax(b.get("x")?));
        assert_grad("layer_norm", case, &p, |t, b| t.layer_norm(b.get("x")?, 1e-5));
    }
}

pub fn reductions_and_shape_ops() {
    for case in 0..CASES {
        let mut r = rng(400 + case);
        let (m, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let p = store(vec![("x", uniform(&[m, n], &mut r)), ("y", uniform(&[m, n], &mut r))]);
        assert_grad("sum", case, &p, |t, b| t.sum(b.get("x")?));
        assert_grad("mean", case, &p, |t, b| t.mean(b.get("x")?));
        assert_grad("transpose", case, &p, |t, b| t.transpose(b.get("x")?));
        assert_grad("reshape", case, &p, |t, b| t.reshape(b.get("x")?, &[n, m]));
        let axis = (case % 2) as usize;
        assert_grad("concat", case, &p, |t, b| t.concat(&[b.get("x")?, b.get("y")?], axis));
        let len = [m, n][axis];
        let start = r.gen_range(0..len);
        let end = r.gen_range(start + 1..=len);
        assert_grad("slice", case, &p, |t, b| t.slice(b.get("x")?, axis, start, end));
        let mask: Vec<bool> = (0..m * n).map(|_| r.gen_bool(0.4)).collect();
        assert_grad("masked_fill", case, &p, |t, b| t.masked_fill(b.get("x")?, &mask, -3.0));
    }
}

pub fn gather_and_embed() {
    for case in 0..CASES {
        let mut r = rng(500 + case);
        let (rows, width) = (dims(&mut r, 1, 5), dims(&mut r, 1, 4));
        let idx: Vec<usize> = (0..dims(&mut r, 0, 6)).map(|_| r.gen_range(0..rows)).collect();
        let p = store(vec![("table", uniform(&[rows, width], &mut r))]);
        assert_grad("gather", case, &p, |t, b| t.gather(b.get("table")?, &idx));
        assert_grad("embed", case, &p, |t, b| embed(t, b.get("table")?, &idx));
    }
}

pub fn conv1d() {
    for case in 0..CASES {
        let mut r = rng(600 + case);
        let groups = [1, 2][(case % 2) as usize];
        let c_in = groups * dims(&mut r, 1, 2);
        let c_out = groups * dims(&mut r, 1, 2);
        let k = [1, 2, 3, 5][(case % 4) as usize];
        let stride = dims(&mut r, 1, 3);
        let frames = dims(&mut r, 1, 9);
        let p = store(vec![
            ("x", uniform(&[frames, c_in], &mut r)),
            ("w", uniform(&[c_out, c_in / groups, k], &mut r)),
        ]);
        assert_grad("conv1d", case, &p, |t, b| t.conv1d(b.get("x")?, b.get("w")?, stride, groups));
    }
}

pub fn three_layer_mlp() {
    for case in 0..CASES {
        let mut r = rng(700 + case);
        let layers = [Linear::new("l0", 3, 5), Linear::new("l1", 5, 4), Linear::new("l2", 4, 2)];
        let mut p = ParameterStore::new();
        for l in &layers {
            l.init(&mut p, &mut r).unwrap();
        }
        p.insert("x", uniform(&[2, 3], &mut r)).unwrap();
        let p = randomize(&p, 1.0, &mut r);
        assert_grad("mlp", case, &p, |t, b| {
            let mut h = b.get("x")?;
            for (i, l) in layers.iter().enumerate() {
                h = l.forward(t, b, h)?;
                if i < 2 {
                    h = t.tanh(h)?;
                }
            }
            Ok(h)
        });
    }
}

pub fn linear_and_layer_norm_modules() {
    for case in 0..CASES {
        let mut r = rng(800 + case);
        let lin = Linear::new("lin", 3, 4);
        let ln = LayerNorm::new("ln", 4);
        let mut p = ParameterStore::new();
        lin.init(&mut p, &mut r).unwrap();
        ln.init(&mut p).unwrap();
        p.insert("x", uniform(&[3, 3], &mut r)).unwrap();
        let p = randomize(&p, 2.0, &mut r);
        assert_grad("linear+layer_norm", case, &p, |t, b| {
            let h = lin.forward(t, b, b.get("x")?)?;
            ln.forward(t, b, h)
        });
    }
}

pub fn scaled_dot_product_attention() {
    for case in 0..CASES {
        let mut r = rng(900 + case);
        let heads = [1, 2][(case % 2) as usize];
        let width = heads * dims(&mut r, 1, 2);
        let (tq, tk) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let p = store(vec![
            ("q", uniform(&[tq, width], &mut r)),
            ("k", uniform(&[tk, width], &mut r)),
            ("v", uniform(&[tk, width], &mut r)),
        ]);
        // mask some keys but never a whole row
        let mut mask = vec![false; tq * tk];
        for q in 0..tq {
            for k in 1..tk {
                mask[q * tk + k] = r.gen_bool(0.3);
            }
        }
        let m = if case % 3 == 0 { None } else { Some(mask.as_slice()) };
        assert_grad("attention", case, &p, |t, b| {
            Ok(attention(t, b.get("q")?, b.get("k")?, b.get("v")?, heads, m)?.output)
        });
    }
}

pub fn attention_and_feed_forward_modules() {
    for case in 0..CASES {
        let mut r = rng(1000 + case);
        let mha = MultiHeadAttention::new("mha", 4, 2);
        let ff = FeedForward::new("ff", 4, 6);
        let mut p = ParameterStore::new();
        mha.init(&mut p, &mut r).unwrap();
        ff.init(&mut p, &mut r).unwrap();
        p.insert("x", uniform(&[3, 4], &mut r)).unwrap();
        p.insert("m", uniform(&[2, 4], &mut r)).unwrap();
        let p = randomize(&p, 1.0, &mut r);
        assert_grad("mha+ff", case, &p, |t, b| {
            let (a, _) = mha.forward(t, b, b.get("x")?, b.get("m")?, None)?;
            ff.forward(t, b, a)
        });
    }
}

pub fn conv_blocks() {
    for case in 0..CASES {
        let mut r = rng(1100 + case);
        let separable = case % 2 == 1;
        let blk = ConvBlock::new("conv", 3, 1 + (case % 2) as usize, 2, 4, separable);
        let mut p = ParameterStore::new();
        blk.init(&mut p, &mut r).unwrap();
        p.insert("x", uniform(&[dims(&mut r, 2, 7), 2], &mut r)).unwrap();
        let p = randomize(&p, 1.0, &mut r);
        assert_grad("conv block", case, &p, |t, b| blk.forward(t, b, b.get("x")?));
    }
}

pub fn transformer_layers() {
    for case in 0..CASES {
        let mut r = rng(1200 + case);
        let enc = EncoderLayer::new("enc", 4, 2, 6);
        let dec = DecoderLayer::new("dec", 4, 2, 6);
        let mut p = ParameterStore::new();
        enc.init(&mut p, &mut r).unwrap();
        dec.init(&mut p, &mut r).unwrap();
        p.insert("src", uniform(&[3, 4], &mut r)).unwrap();
        p.insert("tgt", uniform(&[2, 4], &mut r)).unwrap();
        let p = randomize(&p, 1.0, &mut r);
        assert_grad("encoder+decoder", case, &p, |t, b| {
            let memory = enc.forward(t, b, b.get("tgt")?)?;
            Ok(dec.forward(t, b, b.get("src")?, memory)?.0)
        });
    }
}

pub fn ctc_gradient_on_random_grids() {
    let vocab = Vocab::new(3).unwrap();
    let mut done = 0;
    for case in 0.. {
        if done == CASES {
            break;
        }
        let mut r = rng(1300 + case);
        let len = r.gen_range(1..=3);
        let y: Vec<usize> = (0..len).map(|_| r.gen_range(0..3)).collect();
        if otkd_core::ctc::check_feasible(5, &y).is_err() {
            continue;
        }
        let p = store(vec![("logits", uniform(&[5, 4], &mut r))]);
        let report = check_gradients(&p, FD_STEP, |t, b| {
            let lp = t.log_softmax(b.get("logits")?)?;
            ctc_loss_on_tape(t, lp, &y, &vocab)
        })
        .unwrap();
        assert!(report.max_rel_err <= GRAD_TOL, "ctc case {case}: {report:?}");
        done += 1;
    }
}

pub fn ctc_gradient_with_respect_to_grid_entries() {
    // derivative of the loss in each log-probability entry, the grid taken
    // as free coordinates
    let vocab = Vocab::new(3).unwrap();
    for case in 0..CASES {
        let mut r = rng(1400 + case);
        let grid = random_log_grid(5, 4, &mut r);
        let y = [case as usize % 3, (case as usize + 1) % 3];
        let (_, grad) = ctc_loss(&grid, &y, &vocab).unwrap();
        for i in 0..grid.numel() {
            let mut up = grid.clone();
            up.data_mut()[i] += FD_STEP;
            let mut down = grid.clone();
            down.data_mut()[i] -= FD_STEP;
            let numeric = (ctc_free(&up, &y, &vocab) - ctc_free(&down, &y, &vocab)) / (2.0 * FD_STEP);
            let err = otkd_core::autodiff::gradcheck::relative_error(grad.data()[i], numeric);
            assert!(err <= GRAD_TOL, "case {case} entry {i}: {} vs {numeric}", grad.data()[i]);
        }
    }
}

fn ctc_free(grid: &Tensor, y: &[usize], vocab: &Vocab) -> f64 {
    ctc_loss(grid, y, vocab).unwrap().0
}

pub fn distillation_losses() {
    for case in 0..CASES {
        let mut r = rng(1500 + case);
        let frames = dims(&mut r, 1, 4);
        let proj = Projection::new(3, 4);
        let mut p = proj.init(&mut r).unwrap();
        p.insert("w_stu", uniform(&[frames, 3], &mut r)).unwrap();
        p.insert("logits", uniform(&[frames, 4], &mut r)).unwrap();
        let p = randomize(&p, 1.0, &mut r);
        let w_tea = uniform(&[frames, 4], &mut r);
        let teacher = random_log_grid(frames, 4, &mut r);
        let per_frame = case % 2 == 0;
        let report = check_gradients(&p, FD_STEP, |t, b| {
            fitnets_loss(t, b, b.get("w_stu")?, &w_tea, &proj, per_frame)
        })
        .unwrap();
        assert!(report.max_rel_err <= GRAD_TOL, "fitnets case {case}: {report:?}");
        for (name, f) in [
            ("kl", frame_kl_loss as fn(&mut Tape, _, &Tensor) -> _),
            ("l2", softmax_l2_loss),
        ] {
            let report = check_gradients(&p, FD_STEP, |t, b| {
                let lp = t.log_softmax(b.get("logits")?)?;
                f(t, lp, &teacher)
            })
            .unwrap();
            assert!(report.max_rel_err <= GRAD_TOL, "{name} case {case}: {report:?}");
        }
    }
}

/// Every gradient case, by name.
pub const ALL: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("elementwise_binary_with_broadcasting", elementwise_binary_with_broadcasting),
    ("unary_ops", unary_ops),
    ("normalizers", normalizers),
    ("reductions_and_shape_ops", reductions_and_shape_ops),
    ("gather_and_embed", gather_and_embed),
    ("conv1d", conv1d),
    ("three_layer_mlp", three_layer_mlp),
    ("linear_and_layer_norm_modules", linear_and_layer_norm_modules),
    ("scaled_dot_product_attention", scaled_dot_product_attention),
    ("attention_and_feed_forward_modules", attention_and_feed_forward_modules),
    ("conv_blocks", conv_blocks),
    ("transformer_layers", transformer_layers),
    ("ctc_gradient_on_random_grids", ctc_gradient_on_random_grids),
    ("ctc_gradient_with_respect_to_grid_entries", ctc_gradient_with_respect_to_grid_entries),
    ("distillation_losses", distillation_losses),
];
