//! Prototypical and Matching Network heads over mean-pooled encodings.

use crate::encoder::EncodedSeq;
use crate::error::{Error, Result};
use crate::tape::{self, Var};
use crate::tensor::Tensor;

/// Mean over token hidden states: `l×D → 1×D`.
pub fn pooled<'t>(seq: EncodedSeq<'t>) -> Result<Var<'t>> {
    seq.hidden.mean_rows()
}

fn check_supports<T>(supports: &[Vec<T>]) -> Result<()> {
    if supports.len() < 2 || supports.iter().any(Vec::is_empty) {
        return Err(Error::Data(
            "baseline needs at least two classes with one support each".into(),
        ));
    }
    Ok(())
}

/// Class probabilities `Σ_k exp(cos(q, s_nk)) / Σ_n Σ_k exp(cos(q, s_nk))`,
/// returned as log-probabilities (`1×N`).
pub fn matching_forward<'t>(query: Var<'t>, supports: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    check_supports(supports)?;
    let flat: Vec<Var<'t>> = supports.iter().flatten().copied().collect();
    let sims = query.cosine_rows(tape::concat_rows(&flat)?)?;
    let weights = sims.softmax_rows()?;
    // sum the weights of each class's supports
    let n = supports.len();
    let mut group = vec![0.0; flat.len() * n];
    let mut row = 0;
    for (c, class) in supports.iter().enumerate() {
        for _ in class {
            group[row * n + c] = 1.0;
            row += 1;
        }
    }
    let group = query.tape().constant(Tensor::new(vec![flat.len(), n], group)?);
    Ok(weights.matmul(group)?.ln())
}

/// Log-softmax over negative squared distances to the class means.
pub fn proto_forward<'t>(query: Var<'t>, supports: &[Vec<Var<'t>>]) -> Result<Var<'t>> {
    check_supports(supports)?;
    let prototypes = supports
        .iter()
        .map(|class| tape::concat_rows(class)?.mean_rows())
        .collect::<Result<Vec<_>>>()?;
    let dists = query.sq_dist_rows(tape::concat_rows(&prototypes)?)?;
    dists.scale(-1.0).log_softmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn row<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.constant(Tensor::row_vector(v.to_vec()).unwrap())
    }

    fn probs(v: Var<'_>) -> Vec<f64> {
        v.value().data().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn matching_identical_supports_uniform() {
        let tape = Tape::new();
        let q = row(&tape, &[0.3, -1.0, 2.0]);
        let s = row(&tape, &[1.0, 1.0, 0.5]);
        let p = probs(matching_forward(q, &[vec![s, s], vec![s, s], vec![s, s]]).unwrap());
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_one_shot_orthogonal() {
        let tape = Tape::new();
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            row(&tape, &v)
        };
        let q = e(0);
        let p = probs(matching_forward(q, &[vec![e(1)], vec![e(0)], vec![e(2)], vec![e(3)]]).unwrap());
        let expect = std::f64::consts::E / (std::f64::consts::E + 3.0);
        assert!((p[1] - expect).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_zero_norm_is_zero_similarity() {
        let tape = Tape::new();
        let q = row(&tape, &[0.0, 0.0]);
        let p = probs(matching_forward(q, &[vec![row(&tape, &[1.0, 0.0])], vec![row(&tape, &[0.0, 1.0])]]).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn proto_hand_computed() {
        let tape = Tape::new();
        let q = row(&tape, &[1.0, 0.0]);
        let supports = vec![
            vec![row(&tape, &[0.0, 0.0]), row(&tape, &[2.0, 0.0])], // mean (1, 0): d = 0
            vec![row(&tape, &[0.0, 1.0]), row(&tape, &[0.0, 3.0])], // mean (0, 2): d = 5
        ];
        let lp = proto_forward(q, &supports).unwrap().value();
        let z = 1.0 + (-5f64).exp();
        assert!((lp.data()[0] - (1.0 / z).ln()).abs() < 1e-12);
        assert!((lp.data()[1] - ((-5f64).exp() / z).ln()).abs() < 1e-12);
    }

    #[test]
    fn proto_identical_prototypes_uniform() {
        let tape = Tape::new();
        let q = row(&tape, &[4.0, 1.0]);
        let s = row(&tape, &[1.0, 1.0]);
        let p = probs(proto_forward(q, &[vec![s], vec![s]]).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
