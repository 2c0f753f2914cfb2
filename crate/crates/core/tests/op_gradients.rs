use mgimn_core::gradcheck::{grad_check, GradCheckOptions};
use mgimn_core::params::{Bound, ParamSet};
use mgimn_core::tape::{self, Var};
use mgimn_core::{Result, Tape, Tensor};
use proptest::prelude::*;

type OpFn = for<'t> fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>;

/// Fixed, uneven weights so reductions of the output keep every gradient
/// component distinct.
fn weighted<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) as f64).sin()).collect();
    Ok(x.mul(tape.constant(Tensor::new(shape, w)?))?.sum())
}

fn p<'t>(b: &Bound<'t>, name: &str) -> Var<'t> {
    b.get(name).unwrap()
}

fn op_matmul<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").matmul(p(b, "bt").transpose()?)?)
}
fn op_matmul_bt<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").matmul_bt(p(b, "c"))?)
}
fn op_add_row<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").add_row(p(b, "v"))?)
}
fn op_sub_mul_abs<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    let (a, c) = (p(b, "a"), p(b, "c"));
    weighted(t, a.sub(c)?.abs().add(a.mul(c)?)?)
}
fn op_relu<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").relu())
}
fn op_gelu<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").scale(2.0).gelu())
}
fn op_softmax<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").scale(3.0).softmax_rows()?)
}
fn op_masked_softmax<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").masked_softmax_rows(2)?)
}
fn op_log_softmax<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").log_softmax_rows()?)
}
fn op_layer_norm<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").layer_norm(p(b, "v"), p(b, "u"), 1e-12)?)
}
fn op_pool<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "a").pool_max_avg()?)
}
fn op_concat_slice<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    let rows = tape::concat_rows(&[p(b, "a"), p(b, "c")])?.slice_rows(1, 4)?;
    let cols = tape::concat_cols(&[rows, rows.slice_cols(1, 2)?])?;
    weighted(t, cols)
}
fn op_gather<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, tape::gather(p(b, "a"), &[2, 0, 2, 1])?)
}
fn op_ln<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    // keep the input well away from zero
    weighted(t, p(b, "a").mul(p(b, "a"))?.add(p(b, "c").mul(p(b, "c"))?)?.scale(2.0).add(t.constant(Tensor::filled(&[3, 4], 0.5)))?.ln())
}
fn op_cosine<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "v").cosine_rows(p(b, "a"))?)
}
fn op_sq_dist<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    weighted(t, p(b, "v").sq_dist_rows(p(b, "c"))?)
}
fn op_mean_pick<'t>(t: &'t Tape, b: &Bound<'t>) -> Result<Var<'t>> {
    let m = p(b, "a").mean_rows()?;
    let picked = m.pick(&[3])?.add(m.pick(&[0])?.scale(-0.5))?;
    picked.sum().add(weighted(t, m)?)
}

const OPS: &[(&str, OpFn)] = &[
    ("matmul", op_matmul),
    ("matmul_bt", op_matmul_bt),
    ("add_row", op_add_row),
    ("sub_mul_abs", op_sub_mul_abs),
    ("relu", op_relu),
    ("gelu", op_gelu),
    ("softmax", op_softmax),
    ("masked_softmax", op_masked_softmax),
    ("log_softmax", op_log_softmax),
    ("layer_norm", op_layer_norm),
    ("pool_max_avg", op_pool),
    ("concat_slice", op_concat_slice),
    ("gather", op_gather),
    ("ln", op_ln),
    ("cosine", op_cosine),
    ("sq_dist", op_sq_dist),
    ("mean_pick", op_mean_pick),
];

fn params_from(values: &[f64]) -> ParamSet {
    let mut ps = ParamSet::new();
    let mut it = values.iter().copied();
    let mut take = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, it.by_ref().take(n).collect()).unwrap()
    };
    ps.insert("a", take(vec![3, 4])).unwrap();
    ps.insert("bt", take(vec![2, 4])).unwrap();
    ps.insert("c", take(vec![3, 4])).unwrap();
    ps.insert("v", take(vec![1, 4])).unwrap();
    ps.insert("u", take(vec![1, 4])).unwrap();
    ps
}

const N_VALUES: usize = 12 + 8 + 12 + 4 + 4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_central_differences(values in prop::collection::vec(-2.0f64..2.0, N_VALUES)) {
        // kinks (abs, relu, max) are measure-zero; keep inputs off them
        prop_assume!(values.iter().all(|v| v.abs() > 1e-2));
        let ps = params_from(&values);
        let opts = GradCheckOptions::default();
        for (name, f) in OPS {
            let report = grad_check(*f, &ps, &opts).unwrap();
            prop_assert!(report.passed(), "{name}: {report}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12), shift in -100.0f64..100.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values.clone()).unwrap());
        let y = x.softmax_rows().unwrap().value();
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        let shifted = tape.constant(Tensor::new(vec![3, 4], values.iter().map(|v| v + shift).collect()).unwrap());
        let ys = shifted.softmax_rows().unwrap().value();
        prop_assert!(ys.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn masked_softmax_ignores_masked_columns(values in prop::collection::vec(-5.0f64..5.0, 8), noise in -50.0f64..50.0) {
        let tape = Tape::new();
        let mut other = values.clone();
        other[3] += noise;
        other[7] -= noise;
        let a = tape.constant(Tensor::new(vec![2, 4], values).unwrap()).masked_softmax_rows(3).unwrap().value();
        let b = tape.constant(Tensor::new(vec![2, 4], other).unwrap()).masked_softmax_rows(3).unwrap().value();
        prop_assert_eq!(a.get(0, 3), 0.0);
        prop_assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn pool_bounds(values in prop::collection::vec(-5.0f64..5.0, 12)) {
        let tape = Tape::new();
        let t = Tensor::new(vec![4, 3], values).unwrap();
        let pooled = tape.constant(t.clone()).pool_max_avg().unwrap().value();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| t.get(r, c)).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(pooled.data()[c], max);
            prop_assert!(pooled.data()[3 + c] <= max + 1e-12);
        }
    }
}

#[test]
fn layer_norm_output_is_standardised() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 10.0]]).unwrap());
    let g = tape.constant(Tensor::filled(&[1, 4], 1.0));
    let b = tape.constant(Tensor::zeros(&[1, 4]));
    let y = x.layer_norm(g, b, 1e-12).unwrap().value();
    let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
    let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-9);
}
