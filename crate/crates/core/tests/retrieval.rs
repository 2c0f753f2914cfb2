mod common;

use common::*;
use mgimn_core::encoder::EncodedSeq;
use mgimn_core::matching::AblationFlags;
use mgimn_core::model::Architecture;
use mgimn_core::rtc::{reduce, rtc_classify, RetrievalIndex, RtcConfig};
use mgimn_core::{Mode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn retrieving_every_class_reproduces_full_classification() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (model, params) = tiny_model(Architecture::Mgimn, 8, AblationFlags::all(), 2);
    let c = 7;
    let (supports, queries) = random_episode(&mut rng, c, 2, 6, 8);
    let ids: Vec<usize> = (0..c).map(|i| i * 3 + 1).collect();
    let index = RetrievalIndex::from_encodings(&ids, &supports).unwrap();
    let cfg = RtcConfig {
        retrieve_n: c,
        shots_k: 2,
        ..RtcConfig::default()
    };
    let s_refs: Vec<Vec<&Tensor>> = supports.iter().map(|s| s.iter().collect()).collect();
    for q in &queries {
        let full = model.classify_encoded(&params, &s_refs, &[q]).unwrap()[0];
        let out = rtc_classify(&model, &params, &index, &cfg, &ids, &supports, "", q).unwrap();
        assert_eq!(out.predicted, ids[full]);
        assert_eq!(out.retrieved.len(), c);
    }
}

#[test]
fn single_retrieval_is_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (model, params) = tiny_model(Architecture::Mgimn, 8, AblationFlags::all(), 2);
    let (supports, queries) = random_episode(&mut rng, 5, 2, 4, 8);
    let ids: Vec<usize> = (0..5).collect();
    let index = RetrievalIndex::from_encodings(&ids, &supports).unwrap();
    let cfg = RtcConfig {
        retrieve_n: 1,
        shots_k: 2,
        ..RtcConfig::default()
    };
    for q in &queries {
        let out = rtc_classify(&model, &params, &index, &cfg, &ids, &supports, "", q).unwrap();
        assert_eq!(out.retrieved, vec![out.predicted]);
    }
}

fn reduced_op_count(c: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, params) = tiny_model(Architecture::Mgimn, 4, AblationFlags::all(), 2);
    // fixed-length sequences so only the number of classes varies
    let seq = |rng: &mut ChaCha8Rng| random_tensor(rng, 3, 4);
    let supports: Vec<Vec<Tensor>> = (0..c).map(|_| (0..2).map(|_| seq(&mut rng)).collect()).collect();
    let q = seq(&mut rng);
    let ids: Vec<usize> = (0..c).collect();
    let index = RetrievalIndex::from_encodings(&ids, &supports).unwrap();
    let cfg = RtcConfig {
        retrieve_n: 4,
        shots_k: 2,
        ..RtcConfig::default()
    };
    let red = reduce(&index, &cfg, &ids, "", &q).unwrap();
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let enc = |t: &Tensor| EncodedSeq {
        hidden: tape.constant(t.clone()),
    };
    let sub: Vec<Vec<EncodedSeq<'_>>> = red.positions.iter().map(|&p| supports[p].iter().map(&enc).collect()).collect();
    let before = tape.op_count();
    model.forward_encoded(&bound, &sub, &[enc(&q)], &mut Mode::Eval).unwrap();
    tape.op_count() - before
}

#[test]
fn reduced_forward_cost_does_not_depend_on_class_count() {
    assert_eq!(reduced_op_count(50, 1), reduced_op_count(300, 2));
}

#[test]
fn recall_grows_with_retrieve_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (supports, queries) = random_episode(&mut rng, 12, 3, 40, 6);
    let ids: Vec<usize> = (0..12).collect();
    let index = RetrievalIndex::from_encodings(&ids, &supports).unwrap();
    let gold: Vec<usize> = (0..queries.len()).map(|i| i % 12).collect();
    let mut last = 0;
    for n in 1..=12 {
        let hits = queries
            .iter()
            .zip(&gold)
            .filter(|(q, g)| index.retrieve("", Some(q), n).unwrap().contains(g))
            .count();
        assert!(hits >= last);
        last = hits;
    }
    assert_eq!(last, queries.len());
}

#[test]
fn bm25_unique_token_ranks_first_and_ties_are_stable() {
    let texts = [vec!["book a flight", "flight to paris"], vec!["play some music", "music please"], vec!["set alarm", "alarm at six"]];
    let refs: Vec<Vec<&str>> = texts.iter().map(|c| c.to_vec()).collect();
    let index = RetrievalIndex::from_texts(&[0, 1, 2], &refs, 1.2, 0.75).unwrap();
    assert_eq!(index.retrieve("paris please", None, 1).unwrap().len(), 1);
    assert_eq!(index.retrieve("wake me with an alarm", None, 3).unwrap()[0], 2);
    let a = index.retrieve("zebra", None, 3).unwrap();
    assert_eq!(a, vec![0, 1, 2]);
    assert_eq!(a, index.retrieve("zebra", None, 3).unwrap());
    let stats = index.bm25.as_ref().unwrap();
    assert!(stats.df.values().all(|&d| d <= 3));
}
