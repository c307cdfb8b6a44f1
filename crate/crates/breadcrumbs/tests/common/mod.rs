//! Shared helpers for integration tests: finite-difference gradient checks
//! and the masked-forward vs. evicting-generation comparison.

#![allow(dead_code)] // each integration test binary uses a subset

use std::sync::Arc;

use breadcrumbs::compression::{self, Limits};
use breadcrumbs::model::{ModelConfig, PolicyModel, PositionEncoding, Role};
use breadcrumbs::tensor::{Tape, Tensor};
use breadcrumbs::training::{kl_distill_loss, Trajectory};
use breadcrumbs::vocab::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model for equivalence tests; vocab matches the core vocabulary so
/// real prompts fit.
pub fn small_model(vocab_size: usize, pe: PositionEncoding, seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_positions: 512,
        position_encoding: pe,
        rope_base: 10000.0,
        rms_eps: 1e-5,
        init_std: 0.02,
    };
    PolicyModel::new(cfg, Role::Teacher, seed).unwrap()
}

/// Run a beacon-compressed episode with real eviction, then replay it as a
/// masked full forward.  Returns the max abs logit difference across every
/// sampled token's distribution.
pub fn mask_vs_eviction_max_diff(
    model: &PolicyModel,
    prompt: &[TokenId],
    ratio_c: usize,
    gen_len: usize,
    seed: u64,
) -> f32 {
    let limits = Limits { max_cache_entries: 1_000_000, max_new_tokens: gen_len };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live_logits: Vec<Vec<f32>> = Vec::new();
    let mut obs = |_i: usize, logits: &[f32], _tok: TokenId| {
        live_logits.push(logits.to_vec());
    };
    let result = compression::breadcrumbs_generate(
        model,
        prompt,
        ratio_c,
        &limits,
        1.0, // sampled, so trajectories vary across seeds
        &mut rng,
        Some(&mut obs),
    )
    .unwrap();

    let gen = &result.tokens;
    assert_eq!(live_logits.len(), gen.len());
    if gen.is_empty() {
        return 0.0;
    }

    let (layout, mask) = compression::build_breadcrumbs_mask(prompt.len(), gen.len(), ratio_c);
    let tokens = layout.tokens(prompt, gen, breadcrumbs::vocab::BEACON).unwrap();
    let mut tape = Tape::new();
    let full = model.forward_full(&mut tape, &tokens, &mask).unwrap();
    let logits = tape.data(full.logits);
    let v = model.config.vocab_size;

    let mut max_diff = 0.0f32;
    for (i, live) in live_logits.iter().enumerate() {
        let row = layout.prediction_row[i];
        let replay = &logits[row * v..(row + 1) * v];
        for (a, b) in live.iter().zip(replay.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    max_diff
}

/// Finite-difference gradient check at f64.  `build` constructs a scalar
/// loss from leaves created with the provided data; returns the worst
/// relative error across all leaf gradients.
pub fn fd_check<F>(param_shapes: &[Vec<usize>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec<f64>> = param_shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Tensor> = data
            .iter()
            .zip(param_shapes.iter())
            .map(|(d, s)| tape.leaf(d.clone(), s, true).unwrap())
            .collect();
        let loss = build(&mut tape, &leaves);
        tape.item(loss).unwrap()
    };

    // analytic grads
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = base
        .iter()
        .zip(param_shapes.iter())
        .map(|(d, s)| tape.leaf(d.clone(), s, true).unwrap())
        .collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| tape.grad(l).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, shape) in param_shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        for j in 0..n {
            let mut plus = base.clone();
            plus[pi][j] += h;
            let mut minus = base.clone();
            minus[pi][j] -= h;
            let fp = eval(&plus);
            let fm = eval(&minus);
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi].get(j).copied().unwrap_or(0.0);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

/// Finite-difference check of a loss over a model's own parameters, at the
/// model's native f32.  Central differences at `h` and `h/2` are combined by
/// Richardson extrapolation, cancelling the h² truncation term that f32
/// cannot outrun by shrinking h alone.  Pure relative error is meaningless
/// near the f32 noise floor, so the denominator is clamped at `denom_floor`
/// (errors on small gradients are judged absolutely, as in standard autograd
/// checks).  `analytic` must be parallel to `params_mut()`.
pub fn fd_check_model<F>(
    model: &mut PolicyModel,
    analytic: &[Vec<f32>],
    h: f32,
    denom_floor: f32,
    eval_loss: F,
) -> f32
where
    F: Fn(&PolicyModel) -> f32,
{
    let sizes: Vec<usize> = model.params_mut().unwrap().iter().map(|p| p.len()).collect();
    assert_eq!(analytic.len(), sizes.len());

    let mut worst = 0.0f32;
    for pi in 0..sizes.len() {
        for j in 0..sizes[pi] {
            let orig = model.params_mut().unwrap()[pi][j];
            let mut central = |delta: f32| {
                model.params_mut().unwrap()[pi][j] = orig + delta;
                let fp = eval_loss(model);
                model.params_mut().unwrap()[pi][j] = orig - delta;
                let fm = eval_loss(model);
                (fp - fm) / (2.0 * delta)
            };
            let coarse = central(h);
            let fine = central(h / 2.0);
            model.params_mut().unwrap()[pi][j] = orig;
            let fd = (4.0 * fine - coarse) / 3.0;
            let an = analytic[pi][j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(denom_floor);
            worst = worst.max(rel);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// finite-difference case table, shared by the per-op and acceptance suites

pub type OpBuild = fn(&mut Tape<f64>, &[Tensor], u64) -> Tensor;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: OpBuild,
}

/// Contract a tensor of any shape to a scalar against a fixed pseudo-random
/// cotangent, so an op's backward is exercised with non-uniform upstream
/// gradients.
pub fn wsum(tape: &mut Tape<f64>, t: Tensor, seed: u64) -> Tensor {
    let shape = tape.shape(t).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51AB);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let wl = tape.leaf(w, &shape, false).unwrap();
    let p = tape.mul(t, wl).unwrap();
    tape.sum_all(p)
}

/// One FD case per differentiable tape operation, plus a composite chain.
pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: OpBuild) -> OpCase {
        OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, l, s| {
            let o = t.add(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, l, s| {
            let o = t.sub(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, l, s| {
            let o = t.mul(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("scale", &[&[3, 4]], |t, l, s| {
            let o = t.scale(l[0], -1.7);
            wsum(t, o, s)
        }),
        case("min_ew", &[&[3, 4], &[3, 4]], |t, l, s| {
            let o = t.min_ew(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("max_ew", &[&[3, 4], &[3, 4]], |t, l, s| {
            let o = t.max_ew(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        // non-smooth only exactly at the cut points, which uniform data
        // never lands on at FD precision
        case("clamp", &[&[3, 4]], |t, l, s| {
            let o = t.clamp(l[0], -0.6, 0.6);
            wsum(t, o, s)
        }),
        case("add_row_broadcast", &[&[3, 4], &[4]], |t, l, s| {
            let o = t.add_row_broadcast(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("add_const_mat", &[&[3, 4]], |t, l, s| {
            let c: Vec<f64> = (0..12).map(|i| 0.3 * i as f64).collect();
            let o = t.add_const_mat(l[0], Arc::new(c)).unwrap();
            wsum(t, o, s)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, l, s| {
            let o = t.matmul(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("matmul_nt", &[&[3, 4], &[2, 4]], |t, l, s| {
            let o = t.matmul_nt(l[0], l[1]).unwrap();
            wsum(t, o, s)
        }),
        case("concat_cols", &[&[3, 2], &[3, 3], &[3, 1]], |t, l, s| {
            let o = t.concat_cols(&[l[0], l[1], l[2]]).unwrap();
            wsum(t, o, s)
        }),
        case("slice_cols", &[&[3, 6]], |t, l, s| {
            let o = t.slice_cols(l[0], 1, 3).unwrap();
            wsum(t, o, s)
        }),
        // repeated row: gradients must accumulate, not overwrite
        case("index_rows", &[&[4, 3]], |t, l, s| {
            let o = t.index_rows(l[0], &[2, 0, 2]).unwrap();
            wsum(t, o, s)
        }),
        case("take_per_row", &[&[3, 5]], |t, l, s| {
            let o = t.take_per_row(l[0], &[4, 0, 2]).unwrap();
            wsum(t, o, s)
        }),
        case("gather_row_cols", &[&[3, 5]], |t, l, s| {
            let o = t.gather_row_cols(l[0], 1, &[0, 4, 2]).unwrap();
            wsum(t, o, s)
        }),
        case("softmax_rows", &[&[3, 5]], |t, l, s| {
            let o = t.softmax_rows(l[0]);
            wsum(t, o, s)
        }),
        case("log_softmax_rows", &[&[3, 5]], |t, l, s| {
            let o = t.log_softmax_rows(l[0]);
            wsum(t, o, s)
        }),
        case("entropy_rows", &[&[3, 5]], |t, l, s| {
            let o = t.entropy_rows(l[0]);
            wsum(t, o, s)
        }),
        case("exp", &[&[3, 4]], |t, l, s| {
            let o = t.exp(l[0]);
            wsum(t, o, s)
        }),
        case("ln", &[&[3, 4]], |t, l, s| {
            // shift the argument into (1.5, 3.5) so ln is well away from 0
            let pos = t.add_const_mat(l[0], Arc::new(vec![2.5; 12])).unwrap();
            let o = t.ln(pos);
            wsum(t, o, s)
        }),
        case("silu", &[&[3, 4]], |t, l, s| {
            let o = t.silu(l[0]);
            wsum(t, o, s)
        }),
        case("sum_rows", &[&[3, 4]], |t, l, s| {
            let o = t.sum_rows(l[0]);
            wsum(t, o, s)
        }),
        case("mean_rows", &[&[3, 4]], |t, l, s| {
            let o = t.mean_rows(l[0]);
            wsum(t, o, s)
        }),
        case("sum_all", &[&[3, 4]], |t, l, _| t.sum_all(l[0])),
        case("mean_all", &[&[3, 4]], |t, l, _| {
            let o = t.mean_all(l[0]);
            t.scale(o, 2.0)
        }),
        case("rms_norm", &[&[3, 8], &[8]], |t, l, s| {
            let o = t.rms_norm(l[0], l[1], 1e-5).unwrap();
            wsum(t, o, s)
        }),
        case("rope", &[&[3, 8]], |t, l, s| {
            let inv_freq = Arc::new(vec![1.0, 0.01]); // two heads of width 4
            let o = t.rope(l[0], &[0, 1, 5], 2, inv_freq).unwrap();
            wsum(t, o, s)
        }),
        // attention-shaped composition: projections, softmax mixing, norm,
        // activation
        case("composite", &[&[3, 4], &[4, 4], &[4, 4], &[4]], |t, l, s| {
            let q = t.matmul(l[0], l[1]).unwrap();
            let k = t.matmul(l[0], l[2]).unwrap();
            let scores = t.matmul_nt(q, k).unwrap();
            let w = t.softmax_rows(scores);
            let mixed = t.matmul(w, l[0]).unwrap();
            let normed = t.rms_norm(mixed, l[3], 1e-5).unwrap();
            let act = t.silu(normed);
            wsum(t, act, s)
        }),
    ]
}

pub fn tiny_distill_model(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_positions: 32,
        position_encoding: PositionEncoding::Rotary,
        rope_base: 10000.0,
        rms_eps: 1e-5,
        init_std: 0.08,
    };
    PolicyModel::new(cfg, Role::Student, seed).unwrap()
}

pub fn random_trajectory(vocab_size: usize, q: usize, g: usize, k: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7217);
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(5..vocab_size as TokenId);
    let topk = (0..g)
        .map(|_| {
            let mut ids: Vec<TokenId> = (5..vocab_size as TokenId).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.gen_range(0..=i));
            }
            ids.truncate(k);
            ids.iter().map(|&id| (id, rng.gen_range(-3.0f32..-0.2))).collect()
        })
        .collect();
    Trajectory {
        prompt_ids: (0..q).map(|_| tok(&mut rng)).collect(),
        gen_ids: (0..g).map(|_| tok(&mut rng)).collect(),
        topk,
        reward_level: breadcrumbs::tasks::RewardLevel::Correct,
        reward: 1.0,
        checkpoint_tag: "fd".into(),
    }
}

/// Worst mixed FD error of the distillation loss over every model parameter,
/// on a fresh tiny model and random trajectory derived from `seed`.
pub fn distill_fd_worst(seed: u64) -> f32 {
    let mut model = tiny_distill_model(seed);
    let traj = random_trajectory(12, 3, 4, 3, seed);
    let (ratio_c, top_k) = (2, 3);

    let mut tape = Tape::<f32>::new();
    let (loss, handles) = kl_distill_loss(&mut tape, &model, &traj, ratio_c, top_k).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = handles
        .iter()
        .map(|&h| {
            tape.grad(h).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(h).len()])
        })
        .collect();
    drop(tape);

    fd_check_model(&mut model, &analytic, 1e-2, 0.5, |m| {
        let mut tape = Tape::<f32>::new();
        let (loss, _) = kl_distill_loss(&mut tape, m, &traj, ratio_c, top_k).unwrap();
        tape.item(loss).unwrap()
    })
}
