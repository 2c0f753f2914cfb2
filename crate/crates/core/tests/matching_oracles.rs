mod common;

use common::*;
use mgimn_core::encoder::EncodedSeq;
use mgimn_core::matching::{self, AblationFlags, MatchingParams};
use mgimn_core::model::Architecture;
use mgimn_core::{Error, Mode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn alignment_matches_plain_loops_and_is_order_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (_, params) = tiny_model(Architecture::Mgimn, 8, AblationFlags::all(), 3);
    let mut stats = AlignmentStats::default();
    for _ in 0..20 {
        alignment_episode(&mut rng, &params, 3, 2, 8, &mut stats);
    }
    assert!(stats.max_row_sum_error < 1e-12, "{stats:?}");
    assert!(stats.max_oracle_error < 1e-12, "{stats:?}");
    assert!(stats.max_permutation_drift < 1e-9, "{stats:?}");
    assert_eq!(stats.cache_mismatches, 0);
}

#[test]
fn single_support_views_coincide() {
    // with N = K = 1 the query's instance, class and episode contexts are the same sequence
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, params) = tiny_model(Architecture::Mgimn, 8, AblationFlags::all(), 9);
    let (supports, queries) = random_episode(&mut rng, 1, 1, 1, 8);
    let run = align_values(&params, &supports, &queries[0]);
    let v = &run.views[0][0];
    assert!(v[0].max_abs_diff(&v[1]) < 1e-12);
    assert!(v[0].max_abs_diff(&v[2]) < 1e-12);
    // the support's instance view is aligned to the query, the other two to itself
    assert!(v[4].max_abs_diff(&v[5]) < 1e-12);
}

#[test]
fn identical_sequences_align_to_weighted_self() {
    // aligning a one-row sequence against itself returns that row
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
    let (ab, ba) = matching::bi_align(a, a, None, &mut Mode::Eval).unwrap();
    assert_eq!(ab.value(), a.value());
    assert_eq!(ba.value(), a.value());
}

#[test]
fn bi_align_rejects_width_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(matching::bi_align(a, b, None, &mut Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn disabled_levels_leave_views_empty_and_fuse_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let flags = AblationFlags::none();
    let (_, params) = tiny_model(Architecture::Mgimn, 8, flags, 1);
    assert!(params.get("match.F.w").is_none());
    assert!(params.get("match.H.w").is_none());
    let (supports, queries) = random_episode(&mut rng, 2, 1, 1, 8);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mp = MatchingParams::from_bound(&bound, flags).unwrap();
    let enc = |t: &Tensor| EncodedSeq {
        hidden: tape.constant(t.clone()),
    };
    let s: Vec<Vec<EncodedSeq<'_>>> = supports.iter().map(|c| c.iter().map(&enc).collect()).collect();
    let q = enc(&queries[0]);
    let views = matching::multi_grained_align(q, &s, mp, &mut Mode::Eval).unwrap();
    assert!(views[0][0].q_inst.is_none() && views[0][0].s_epi.is_none());
    let (qf, sf) = matching::fuse(q, s[0][0], &views[0][0], &mp, &mut Mode::Eval).unwrap();
    assert_eq!(qf.value(), queries[0]);
    assert_eq!(sf.value(), supports[0][0]);
}

#[test]
fn fuse_rejects_views_that_disagree_with_flags() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, params) = tiny_model(Architecture::Mgimn, 8, AblationFlags::all(), 1);
    let (supports, queries) = random_episode(&mut rng, 2, 1, 1, 8);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mp = MatchingParams::from_bound(&bound, AblationFlags::all()).unwrap();
    let q = EncodedSeq {
        hidden: tape.constant(queries[0].clone()),
    };
    let s = EncodedSeq {
        hidden: tape.constant(supports[0][0].clone()),
    };
    let empty = matching::AlignedViews::default();
    assert!(matches!(matching::fuse(q, s, &empty, &mp, &mut Mode::Eval), Err(Error::State(_))));
}

#[test]
fn instance_match_against_hand_pooling() {
    // with G = identity-like weights the pooled comparison vector is visible directly
    let d = 2;
    let tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![3.0, 1.0]]).unwrap());
    let s = tape.constant(Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap());
    let mut w = vec![0.0; 8 * d * 8 * d];
    for i in 0..8 * d {
        w[i * 8 * d + i] = 1.0;
    }
    let g = mgimn_core::params::Linear {
        w: tape.constant(Tensor::new(vec![8 * d, 8 * d], w).unwrap()),
        b: tape.constant(Tensor::zeros(&[8 * d])),
    };
    let m = matching::instance_match(q, s, &g, &mut Mode::Eval).unwrap().value();
    // q̄ = [3, 1, 2, 0], s̄ = [0, 2, 0, 2]
    let expect = [3.0, 1.0, 2.0, 0.0, 0.0, 2.0, 0.0, 2.0, 3.0, 1.0, 2.0, 2.0, 0.0, 2.0, 0.0, 0.0];
    // relu clips nothing here except negatives, of which there are none
    assert_eq!(m.data(), &expect);
    let bad = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(matching::instance_match(q, bad, &g, &mut Mode::Eval), Err(Error::Shape(_))));
}
