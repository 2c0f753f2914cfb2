mod common;

use common::*;
use mgimn_core::matching::AblationFlags;
use mgimn_core::model::Architecture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(arch: Architecture, flags: AblationFlags) -> SymmetryStats {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (model, params) = tiny_model(arch, 8, flags, 4);
    let mut stats = SymmetryStats::default();
    for _ in 0..15 {
        symmetry_episode(&mut rng, &model, &params, 3, 3, &mut stats);
    }
    stats
}

#[test]
fn mgimn_symmetries() {
    let s = run(Architecture::Mgimn, AblationFlags::all());
    assert!(s.support_perm_drift <= 1e-9, "{s:?}");
    assert!(s.class_perm_drift <= 1e-9, "{s:?}");
    assert!(s.uniform_error <= 1e-6, "{s:?}");
}

#[test]
fn ablated_mgimn_symmetries() {
    for flags in [
        AblationFlags { use_instance: false, ..AblationFlags::all() },
        AblationFlags { use_episode: false, ..AblationFlags::all() },
        AblationFlags::none(),
    ] {
        let s = run(Architecture::Mgimn, flags);
        assert!(s.support_perm_drift <= 1e-9 && s.class_perm_drift <= 1e-9 && s.uniform_error <= 1e-6, "{flags:?}: {s:?}");
    }
}

#[test]
fn baseline_symmetries() {
    for arch in [Architecture::Proto, Architecture::Matching] {
        let s = run(arch, AblationFlags::all());
        assert!(s.support_perm_drift <= 1e-9 && s.class_perm_drift <= 1e-9 && s.uniform_error <= 1e-6, "{arch}: {s:?}");
    }
}
