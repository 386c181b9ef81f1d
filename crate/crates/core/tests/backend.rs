mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::Ix3;
use unifyedit::array_io;
use unifyedit::backend::{
    AlphaSchedule, CaptureConfig, ConstraintDescriptor, DiffusionBackend, LatentGrid, Pass, ToyBackend, ToyConfig,
    ZeroNoise,
};
use unifyedit::mask::BinaryMask;
use unifyedit::sampler::invert_trajectory;
use unifyedit::Error;

use common::{finite_difference_check, random_latent, square_mask};

fn golden_config() -> ToyConfig {
    ToyConfig {
        seed: 7,
        channels: 4,
        spatial: 8,
        sa_resolutions: vec![8, 4],
        ca_resolutions: vec![8],
        semantic_resolution: 8,
        layers: 2,
        ..ToyConfig::default()
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden/toy_seed7_eps_t25.uear")
}

#[test]
fn golden_noise_prediction() {
    let b = ToyBackend::new(golden_config()).unwrap();
    let prompt = b.encode_prompt("a red car").unwrap();
    assert_eq!(prompt.token_count(), 4);
    let z = LatentGrid::zeros(4, 8, 8, 25);
    let (eps, _) = b.predict_noise(&z, 25, &prompt, &CaptureConfig::none()).unwrap();
    let path = golden_path();
    if std::env::var_os("UNIFYEDIT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        array_io::write(&path, &eps.clone().into_dyn()).unwrap();
    }
    let golden = array_io::read(&path).unwrap().into_dimensionality::<Ix3>().unwrap();
    assert_eq!(eps, golden);
}

#[test]
fn toy_config_round_trips_through_toml() {
    let c = golden_config();
    assert_eq!(ToyConfig::from_toml(&c.to_toml()).unwrap(), c);
    let text = "seed = 3\nL = 4\n";
    let parsed = ToyConfig::from_toml(text).unwrap();
    assert_eq!((parsed.seed, parsed.layers), (3, 4));
    assert!(ToyConfig::from_toml("seed = 1\nunknown = 2\n").is_err());
}

#[test]
fn same_seed_is_bit_identical() {
    let a = ToyBackend::new(ToyConfig::default()).unwrap();
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let z = random_latent(3, (4, 16, 16), 10);
    let p = a.encode_prompt("a photo of a cat").unwrap();
    let cap = CaptureConfig::all(a.info());
    assert_eq!(
        a.predict_noise(&z, 10, &p, &cap).unwrap(),
        b.predict_noise(&z, 10, &p, &cap).unwrap()
    );
}

#[test]
fn different_seeds_differ() {
    let a = ToyBackend::new(ToyConfig::default()).unwrap();
    let b = ToyBackend::new(ToyConfig { seed: 1, ..ToyConfig::default() }).unwrap();
    let z = random_latent(3, (4, 16, 16), 10);
    let none = CaptureConfig::none();
    let ea = a.predict_noise(&z, 10, &a.encode_prompt("a cat").unwrap(), &none).unwrap().0;
    let eb = b.predict_noise(&z, 10, &b.encode_prompt("a cat").unwrap(), &none).unwrap().0;
    assert_ne!(ea, eb);
}

#[test]
fn bundles_are_normalized_and_report_their_pass() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let cap = CaptureConfig::all(b.info());
    for seed in 0..5 {
        let z = random_latent(seed, (4, 16, 16), 40);
        let p = b.encode_prompt("a small wooden boat").unwrap();
        let (_, bundle) = b.predict_noise(&z, 40, &p, &cap).unwrap();
        bundle.check_normalized(1e-5).unwrap();
        assert_eq!(bundle.source_pass, Pass::Conditional);
        let ids: BTreeSet<usize> = bundle.ca_at(16).map(|m| m.layer_id).collect();
        assert_eq!(ids.len(), 5);
        assert_eq!(bundle.ca_at(16).count(), 5);
    }
}

#[test]
fn capture_outside_backend_resolutions_is_rejected() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let z = random_latent(0, (4, 16, 16), 1);
    let p = b.encode_prompt("a cat").unwrap();
    let cap = CaptureConfig {
        sa_resolutions: BTreeSet::from([32]),
        ..CaptureConfig::none()
    };
    assert!(matches!(b.predict_noise(&z, 1, &p, &cap), Err(Error::Config(_))));
}

#[test]
fn sap_gradient_vanishes_at_its_reference() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let z = random_latent(9, (4, 16, 16), 20);
    let p = b.encode_prompt("a photo of a dog").unwrap();
    let (_, bundle) = b.predict_noise(&z, 20, &p, &CaptureConfig::all(b.info())).unwrap();
    let g = b
        .latent_gradient(&z, 20, &p, &ConstraintDescriptor::sap(bundle.sa_layers, None))
        .unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.gradient.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn region_sap_with_empty_mask_is_exactly_zero() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let z = random_latent(9, (4, 16, 16), 20);
    let other = random_latent(10, (4, 16, 16), 20);
    let p = b.encode_prompt("a photo of a dog").unwrap();
    let (_, bundle) = b.predict_noise(&other, 20, &p, &CaptureConfig::all(b.info())).unwrap();
    let c = ConstraintDescriptor::region_sap(bundle.sa_layers, BinaryMask::zeros(16, 16), None);
    let g = b.latent_gradient(&z, 20, &p, &c).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.gradient.iter().all(|&v| v == 0.0));
}

#[test]
fn malformed_constraint_is_a_validation_error() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let z = random_latent(9, (4, 16, 16), 20);
    let p = b.encode_prompt("a dog").unwrap();
    let mut c = ConstraintDescriptor::caa(vec![vec![1]], square_mask(16, 2, 6));
    c.token_indices = None;
    assert!(matches!(b.latent_gradient(&z, 20, &p, &c), Err(Error::Validation(_))));
}

/// Twenty probes per constraint kind against central differences.
#[test]
fn gradients_match_finite_differences() {
    let b = ToyBackend::new(ToyConfig::default()).unwrap();
    let p = b.encode_prompt("a photo of a blue car").unwrap();
    let mask = square_mask(16, 4, 12);
    for probe in 0..20u64 {
        let t = 1 + (probe as usize * 7) % 50;
        let z = random_latent(100 + probe, (4, 16, 16), t);
        let z_ref = random_latent(200 + probe, (4, 16, 16), t);
        let (_, bundle) = b.predict_noise(&z_ref, t, &p, &CaptureConfig::all(b.info())).unwrap();
        for c in [
            ConstraintDescriptor::sap(bundle.sa_layers.clone(), None),
            ConstraintDescriptor::region_sap(bundle.sa_layers.clone(), mask.clone(), Some(BTreeSet::from([16, 8]))),
            ConstraintDescriptor::caa(vec![vec![5], vec![4, 6]], mask.clone()),
        ] {
            let r = finite_difference_check(&b, &z, t, &p, &c, 1e-4, 6, probe);
            assert!(
                r.max_rel_coord < 1e-4 && r.rel_directional < 1e-4,
                "{:?} probe {probe}: {:e} / {:e}",
                c.kind,
                r.max_rel_coord,
                r.rel_directional
            );
        }
    }
}

#[test]
fn zero_noise_inversion_is_closed_form() {
    let b = ZeroNoise(ToyBackend::new(ToyConfig::default()).unwrap());
    let s = AlphaSchedule::scaled_linear(50).unwrap();
    let z0 = random_latent(4, (4, 16, 16), 0);
    let p = b.encode_prompt("a cat").unwrap();
    let traj = invert_trajectory(&z0, &p, &s, &b, None).unwrap();
    for t in 0..=50 {
        let expected = &z0.values * (s.alpha(t) / s.alpha(0)).sqrt();
        let err = (&traj.at(t).values - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "t={t}: {err}");
        assert_eq!(traj.at(t).timestep, t);
    }
}

#[test]
fn schedule_file_round_trip() {
    let s = AlphaSchedule::scaled_linear(50).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alphas.txt");
    std::fs::write(&path, format!("# alphas\n{}", s.to_text())).unwrap();
    assert_eq!(AlphaSchedule::load(&path).unwrap(), s);
    assert!(matches!(AlphaSchedule::from_text("0.999\nabc\n"), Err(Error::Parse { line: 2, .. })));
}
