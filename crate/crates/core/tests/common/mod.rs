#![allow(dead_code)]

use mgimn_core::encoder::{EncodedSeq, EncoderConfig};
use mgimn_core::matching::{self, AblationFlags, MatchingParams, SupportContext};
use mgimn_core::model::{Architecture, ModelConfig};
use mgimn_core::params::ParamSet;
use mgimn_core::{Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Encoded supports `[n][k]` of random lengths and `r` queries.
pub fn random_episode(rng: &mut ChaCha8Rng, n: usize, k: usize, r: usize, d: usize) -> (Vec<Vec<Tensor>>, Vec<Tensor>) {
    let seq = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(2..6);
        random_tensor(rng, len, d)
    };
    let supports = (0..n).map(|_| (0..k).map(|_| seq(rng)).collect()).collect();
    let queries = (0..r).map(|_| seq(rng)).collect();
    (supports, queries)
}

pub fn tiny_model(arch: Architecture, d: usize, flags: AblationFlags, seed: u64) -> (ModelConfig, ParamSet) {
    let model = ModelConfig {
        arch,
        encoder: EncoderConfig {
            layers: 1,
            hidden: d,
            heads: 2,
            max_seq_len: 16,
            vocab_size: 20,
        },
        flags,
        dropout: 0.0,
    };
    let params = model.init_params(seed).unwrap();
    (model, params)
}

fn relu_proj(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (rows, din) = (x.rows(), x.cols());
    let dout = w.cols();
    (0..rows)
        .map(|i| {
            (0..dout)
                .map(|j| {
                    let s: f64 = (0..din).map(|c| x.get(i, c) * w.get(c, j)).sum::<f64>() + b.data()[j];
                    s.max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Plain-loop alignment of `a` against `b` under `F(x) = relu(xW + b)`.
pub fn naive_align(a: &Tensor, b: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let fa = relu_proj(a, w, bias);
    let fb = relu_proj(b, w, bias);
    let d = a.cols();
    let mut out = Vec::with_capacity(a.rows() * d);
    for fa_i in &fa {
        let e: Vec<f64> = fb.iter().map(|fb_j| fa_i.iter().zip(fb_j).map(|(x, y)| x * y).sum()).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        for c in 0..d {
            out.push((0..b.rows()).map(|j| ex[j] / z * b.get(j, c)).sum());
        }
    }
    Tensor::new(vec![a.rows(), d], out).unwrap()
}

pub fn vstack(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / cols, cols], data).unwrap()
}

/// Six views per `(n, k)` for one query, as plain tensors.
pub type Views = Vec<Vec<[Tensor; 6]>>;

pub struct AlignRun {
    pub views: Views,
    pub weights: Vec<Tensor>,
}

pub fn align_values(params: &ParamSet, supports: &[Vec<Tensor>], q: &Tensor) -> AlignRun {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mp = MatchingParams::from_bound(&bound, AblationFlags::all()).unwrap();
    let enc = |t: &Tensor| EncodedSeq {
        hidden: tape.constant(t.clone()),
    };
    let s: Vec<Vec<EncodedSeq<'_>>> = supports.iter().map(|c| c.iter().map(&enc).collect()).collect();
    let mut ctx = SupportContext::build(&s, mp, &mut Mode::Eval).unwrap();
    let views = ctx.align_query(enc(q), &mut Mode::Eval).unwrap();
    let out = views
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| {
                    [v.q_inst, v.q_class, v.q_epi, v.s_inst, v.s_class, v.s_epi].map(|x| x.expect("all levels on").value())
                })
                .collect()
        })
        .collect();
    AlignRun {
        views: out,
        weights: ctx.weight_log.weights.iter().map(|w| w.value()).collect(),
    }
}

#[derive(Debug, Default)]
pub struct AlignmentStats {
    pub max_row_sum_error: f64,
    pub max_permutation_drift: f64,
    pub max_oracle_error: f64,
    pub cache_mismatches: usize,
}

/// Checks one random episode against the plain-loop oracle, a permuted
/// copy of itself, and uncached recomputation of the query-side contexts.
pub fn alignment_episode(rng: &mut ChaCha8Rng, params: &ParamSet, n: usize, k: usize, d: usize, stats: &mut AlignmentStats) {
    let (supports, queries) = random_episode(rng, n, k, 1, d);
    let q = &queries[0];
    let run = align_values(params, &supports, q);

    for w in &run.weights {
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            stats.max_row_sum_error = stats.max_row_sum_error.max((s - 1.0).abs());
        }
    }

    let fw = params.value("match.F.w").unwrap();
    let fb = params.value("match.F.b").unwrap();
    let all: Vec<&Tensor> = supports.iter().flatten().collect();
    let episode_ctx = vstack(&all);
    for (ni, class) in supports.iter().enumerate() {
        let class_ctx = vstack(&class.iter().collect::<Vec<_>>());
        for (ki, s) in class.iter().enumerate() {
            let expect = [
                naive_align(q, s, fw, fb),
                naive_align(q, &class_ctx, fw, fb),
                naive_align(q, &episode_ctx, fw, fb),
                naive_align(s, q, fw, fb),
                naive_align(s, &class_ctx, fw, fb),
                naive_align(s, &episode_ctx, fw, fb),
            ];
            for (got, want) in run.views[ni][ki].iter().zip(&expect) {
                stats.max_oracle_error = stats.max_oracle_error.max(got.max_abs_diff(want));
            }
        }
    }

    // uncached: the query's class and episode views recomputed by a fresh bi_align
    {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let f = bound.linear("match.F").unwrap();
        let qv = tape.constant(q.clone());
        let (q_epi, _) = matching::bi_align(qv, tape.constant(episode_ctx.clone()), Some(&f), &mut Mode::Eval).unwrap();
        for (ni, class) in supports.iter().enumerate() {
            let ctx = tape.constant(vstack(&class.iter().collect::<Vec<_>>()));
            let (q_class, _) = matching::bi_align(qv, ctx, Some(&f), &mut Mode::Eval).unwrap();
            for ki in 0..class.len() {
                if run.views[ni][ki][1] != q_class.value() {
                    stats.cache_mismatches += 1;
                }
                if run.views[ni][ki][2] != q_epi.value() {
                    stats.cache_mismatches += 1;
                }
            }
        }
    }

    // permute classes and the members of each class
    let mut class_order: Vec<usize> = (0..n).collect();
    class_order.shuffle(rng);
    let member_orders: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut o: Vec<usize> = (0..k).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let permuted: Vec<Vec<Tensor>> = class_order
        .iter()
        .map(|&c| member_orders[c].iter().map(|&m| supports[c][m].clone()).collect())
        .collect();
    let prun = align_values(params, &permuted, q);
    for (pn, &c) in class_order.iter().enumerate() {
        for (pk, &m) in member_orders[c].iter().enumerate() {
            for (a, b) in prun.views[pn][pk].iter().zip(&run.views[c][m]) {
                stats.max_permutation_drift = stats.max_permutation_drift.max(a.max_abs_diff(b));
            }
        }
    }
}

pub fn log_probs(model: &ModelConfig, params: &ParamSet, supports: &[Vec<Tensor>], queries: &[Tensor]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let enc = |t: &Tensor| EncodedSeq {
        hidden: tape.constant(t.clone()),
    };
    let s: Vec<Vec<EncodedSeq<'_>>> = supports.iter().map(|c| c.iter().map(&enc).collect()).collect();
    let q: Vec<EncodedSeq<'_>> = queries.iter().map(&enc).collect();
    model
        .forward_encoded(&bound, &s, &q, &mut Mode::Eval)
        .unwrap()
        .iter()
        .map(|v| v.value().data().to_vec())
        .collect()
}

#[derive(Debug, Default)]
pub struct SymmetryStats {
    pub support_perm_drift: f64,
    pub class_perm_drift: f64,
    pub uniform_error: f64,
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn symmetry_episode(rng: &mut ChaCha8Rng, model: &ModelConfig, params: &ParamSet, n: usize, k: usize, stats: &mut SymmetryStats) {
    let d = model.encoder.hidden;
    let (supports, queries) = random_episode(rng, n, k, 2, d);
    let base = log_probs(model, params, &supports, &queries);

    let within: Vec<Vec<Tensor>> = supports
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.shuffle(rng);
            c
        })
        .collect();
    for (a, b) in log_probs(model, params, &within, &queries).iter().zip(&base) {
        stats.support_perm_drift = stats.support_perm_drift.max(max_diff(a, b));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let by_class: Vec<Vec<Tensor>> = order.iter().map(|&c| supports[c].clone()).collect();
    for (a, b) in log_probs(model, params, &by_class, &queries).iter().zip(&base) {
        let back: Vec<f64> = order.iter().map(|&c| b[c]).collect();
        stats.class_perm_drift = stats.class_perm_drift.max(max_diff(a, &back));
    }

    let same: Vec<Vec<Tensor>> = (0..n).map(|_| supports[0].clone()).collect();
    for row in log_probs(model, params, &same, &queries) {
        for lp in row {
            stats.uniform_error = stats.uniform_error.max((lp.exp() - 1.0 / n as f64).abs());
        }
    }
}
