use std::process::Command;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dpgp::cloaking::CloakingOptions;
use dpgp::harness::bench::{run_experiment, RunSpec};
use dpgp::harness::data::{clip_and_center, Dataset, Synthetic};
use dpgp::harness::ExperimentConfig;
use dpgp::{KernelSpec, Mechanism};

fn run(mechanism: Mechanism, epsilon: f64) -> RunSpec {
    RunSpec {
        mechanism,
        kernel: KernelSpec::isotropic(1.0, 0.3, 2, 0.01).unwrap(),
        epsilon,
        delta: 0.01,
        clip: (-1.25, 1.75),
        bins_per_dim: 5,
        bounds: Some(vec![(0.0, 1.0), (0.0, 1.0)]),
        normalize: false,
        cloaking: CloakingOptions::default(),
        noise_multiplier: 1.0,
    }
}

#[test]
fn huge_epsilon_matches_non_private_rmse() {
    let data = Synthetic::Smooth2d { n: 150, noise_sd: 0.05 }.generate(6).unwrap();
    let clean = run_experiment("a", &run(Mechanism::Cloaking, f64::INFINITY), &data, 5, Some(120), 10, 3).unwrap();
    let huge = run_experiment("b", &run(Mechanism::Cloaking, 1e6), &data, 5, Some(120), 10, 3).unwrap();
    assert!((huge.mean_rmse - clean.mean_rmse).abs() <= 0.05 * clean.mean_rmse);
    assert!(clean.privacy.unwrap().not_private);
    assert!(!huge.privacy.unwrap().not_private);
}

#[test]
fn bench_report_is_bit_identical_on_repeat() {
    let data = Synthetic::Smooth2d { n: 120, noise_sd: 0.05 }.generate(1).unwrap();
    for m in [Mechanism::Cloaking, Mechanism::IntegralBinning] {
        let a = run_experiment("r", &run(m, 1.0), &data, 4, Some(100), 10, 5).unwrap();
        let b = run_experiment("r", &run(m, 1.0), &data, 4, Some(100), 10, 5).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn noise_multiplier_zero_is_flagged() {
    let data = Synthetic::Smooth2d { n: 100, noise_sd: 0.05 }.generate(2).unwrap();
    let mut r = run(Mechanism::Rkhs, 1.0);
    r.noise_multiplier = 0.0;
    let res = run_experiment("z", &r, &data, 2, Some(80), 10, 1).unwrap();
    assert!(res.privacy.unwrap().not_private);
}

proptest! {
    #[test]
    fn clipping_bounds_outputs_and_centring_round_trips(
        ys in proptest::collection::vec(-100.0f64..100.0, 1..30),
        lo in -50.0f64..0.0,
        width in 1.0f64..80.0,
    ) {
        let n = ys.len();
        let ds = Dataset::new(DMatrix::from_fn(n, 1, |i, _| i as f64), DVector::from_vec(ys.clone()), "p").unwrap();
        let c = clip_and_center(&ds, lo, lo + width).unwrap();
        prop_assert!(c.y.mean().abs() <= 1e-9 * (1.0 + width));
        for (orig, centred) in ys.iter().zip(c.y.iter()) {
            let restored = centred + c.offset;
            prop_assert!(restored >= lo - 1e-9 && restored <= lo + width + 1e-9);
            prop_assert!((restored - orig.clamp(lo, lo + width)).abs() <= 1e-9 * (1.0 + orig.abs()));
        }
    }
}

const CONFIG: &str = r#"
seed = 3
mechanism = "cloaking"
bins_per_dim = 4

[data]
clip_low = -1.0
clip_high = 1.0
[data.source.csv]
path = "data.csv"
inputs = ["x"]
output = "y"

[kernel]
variance = 1.0
lengthscales = [0.3]
noise_variance = 0.05

[privacy]
epsilon = 1.0
delta = 0.01

[cv]
folds = 3
test_size = 4

[test_points.grid]
low = [0.0]
high = [1.0]
points_per_dim = 5

[hyperparam]
lengthscales = [0.1, 0.5]
noise_variances = [0.05]
folds = 3
select_epsilon = 1.0
regression_epsilons = [1.0]

[bench]
epsilons = [inf, 1.0]
variants = [
  { label = "cloak", mechanism = "cloaking" },
  { label = "bins", mechanism = "simple_binning" },
]
"#;

#[test]
fn cli_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,y\n");
    for i in 0..24 {
        let x = i as f64 / 23.0;
        csv.push_str(&format!("{x},{}\n", (6.0 * x).sin() * 0.8));
    }
    csv.push_str("0.5,\n");
    std::fs::write(dir.path().join("data.csv"), csv).unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    ExperimentConfig::load(&cfg_path).unwrap();

    let out = dir.path().join("out");
    for (cmd, files) in [
        ("ingest", vec!["ingest.json", "clean.csv"]),
        ("fit", vec!["fit.json"]),
        ("release", vec!["release.csv", "privacy.json"]),
        ("hpselect", vec!["hpselect.json", "probabilities.csv"]),
        ("bench", vec!["bench.json", "bench.csv"]),
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_dpgp"))
            .arg(cmd)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success(), "{cmd} failed");
        for f in files {
            assert!(out.join(f).exists(), "{cmd} did not write {f}");
        }
    }
    let ingest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ingest.json")).unwrap()).unwrap();
    assert_eq!(ingest["n"], 24);
    assert_eq!(ingest["rejected_rows"], 1);
    let release = std::fs::read_to_string(out.join("release.csv")).unwrap();
    assert_eq!(release.lines().count(), 6);
    let privacy: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("privacy.json")).unwrap()).unwrap();
    assert_eq!(privacy["mechanism"], "cloaking");
    assert!(privacy["delta_achieved"].as_f64().unwrap() <= 1.001);

    let missing = Command::new(env!("CARGO_BIN_EXE_dpgp"))
        .args(["fit", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert!(!missing.status.success());
}
