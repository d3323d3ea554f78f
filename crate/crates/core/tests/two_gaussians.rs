//! Small end-to-end run on the two-Gaussian mixture: train, save, reload,
//! sample and compare with direct draws.

use fpdiff::diffusion::ReverseConfig;
use fpdiff::energy_model::{MlpSpec, TimeInterval};
use fpdiff::fokker_planck::FpConfig;
use fpdiff::io::{load_checkpoint, save_checkpoint};
use fpdiff::metrics::{js_distance, Extent, Histogram2D};
use fpdiff::systems::{ToySystem, MIXTURE_WEIGHTS};
use fpdiff::trainer::{train, TrainConfig};
use fpdiff::Tensor;

fn left_fraction(xs: &[f64]) -> f64 {
    xs.iter().filter(|&&x| x < 0.0).count() as f64 / xs.len() as f64
}

#[test]
fn trained_model_recovers_mode_weights() {
    let data = ToySystem::GaussianMixture2.sample_direct(4000, 7).unwrap();
    let mut cfg = TrainConfig::new(MlpSpec::new(2, vec![32, 32], true), TimeInterval::full(), 200, 0.0, 11);
    cfg.learning_rate = 3e-3;
    let outcome = train(&data, &cfg, &FpConfig::default()).unwrap();
    let run = &outcome.runs[0];
    assert!(run.trailing(50).dsm < run.leading(50).dsm);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.fpck");
    save_checkpoint(&path, &outcome.checkpoint).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck, outcome.checkpoint);

    let rc = ReverseConfig {
        n: 4000,
        steps: 300,
        seed: 3,
        ..ReverseConfig::default()
    };
    let samples = ck.sample(&rc).unwrap();
    assert_eq!(samples, outcome.checkpoint.sample(&rc).unwrap());
    let left = left_fraction(&samples.column(0));
    assert!((left - MIXTURE_WEIGHTS[0]).abs() < 0.1, "left mode holds {left}");

    let extent = Extent::new(-2.0, 2.0, -1.0, 1.0).unwrap();
    let hs = Histogram2D::from_samples(&samples, extent, 8, 8).unwrap();
    let hd = Histogram2D::from_samples(&data, extent, 8, 8).unwrap();
    let js = js_distance(&hs, &hd).unwrap();
    assert!(js < 0.2, "js {js}");

    // The heavier mode sits lower in free energy.
    let pts = Tensor::new(vec![3, 2], vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.8]).unwrap();
    let f = ck.free_energy(&pts, fpdiff::T_EPS).unwrap();
    assert!(f[0] < f[1] && f[1] < f[2], "{f:?}");
}
