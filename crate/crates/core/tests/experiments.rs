use dcd_core::datasets::{encode_idx, IdxArray};
use dcd_core::experiments::{
    denoise_sweep, export_grid, load_dataset, mean_row_rmse, run_eval, run_train, train_model, Adam,
    ExperimentConfig, LossKind,
};
use dcd_core::model::{Checkpoint, EnergyModel, HiddenActivation, MlpEbm, TimeEbm, TimeFeature};
use dcd_core::Tensor;
use proptest::prelude::*;

fn gaussian_cfg(kind: LossKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.name = "gaussian".into();
    c.dataset.dim = 1;
    c.dataset.n_train = 20_000;
    c.model.hidden = vec![16, 16];
    c.loss.kind = kind;
    c.optimizer.batch_size = 500;
    c.optimizer.iterations = 1500;
    c.optimizer.lr = 0.005;
    c.eval.n_eval = Some(20_000);
    c
}

#[test]
fn dcd_learns_a_standard_normal() {
    let out = run_train(&gaussian_cfg(LossKind::DcdVe)).unwrap();
    let r = &out.record;
    assert!(!r.diverged);
    assert!((r.final_sm_loss + 0.5).abs() < 0.05, "{}", r.final_sm_loss);
    assert!(r.final_sm_loss < r.initial_sm_loss);
}

#[test]
fn analytic_checkpoint_scores_minus_one_in_two_dims() {
    let mut c = ExperimentConfig::default();
    c.dataset.name = "gaussian".into();
    c.dataset.dim = 2;
    c.dataset.n_train = 100_000;
    let m = Checkpoint::Mlp(MlpEbm::standard_gaussian(2).unwrap());
    let e = run_eval(&m, &c).unwrap();
    assert_eq!(e.n_rows, 100_000);
    // per-row loss has unit variance
    assert!((e.sm_loss + 1.0).abs() < 0.01, "{}", e.sm_loss);
    assert!(e.denoise.is_empty());
}

#[test]
fn config_round_trips_through_toml() {
    let text = r#"
        [dataset]
        name = "rings"
        n_train = 500
        [model]
        hidden = [32, 32]
        activation = "silu"
        [loss]
        kind = "pcd"
        [sampler]
        step_size = 0.002
        [run]
        seed = 9
    "#;
    let c = ExperimentConfig::from_toml_str(text).unwrap();
    assert_eq!(c.loss.kind, LossKind::Pcd);
    assert_eq!(c.model.activation, HiddenActivation::Silu);
    assert_eq!(c.n_steps(), 20);
    assert_eq!(c.buffer_capacity(), 10_000);
    assert_eq!(c.optimizer.batch_size, 1000);
    assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
}

#[test]
fn config_rejects_unknown_and_invalid_fields() {
    assert!(ExperimentConfig::from_toml_str("[loss]\nkind = \"dcd_ve\"\nbogus = 1\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[loss]\nkind = \"score\"\n").is_err());
    for bad in [
        "[optimizer]\nbatch_size = 0\n",
        "[optimizer]\nlr = -1.0\n",
        "[loss]\nt = 0.0\n",
        "[sampler]\nreinit_fraction = 1.5\n",
        "[sampler]\nstep_size = 0.0\n",
        "[dataset]\nname = \"idx\"\n",
    ] {
        let c = ExperimentConfig::from_toml_str(bad);
        assert!(c.is_err() || c.unwrap().validate().is_err(), "{bad}");
    }
}

#[test]
fn exploding_sampler_is_recorded_as_divergence() {
    let mut c = gaussian_cfg(LossKind::Cd);
    c.dataset.dim = 2;
    c.model.activation = HiddenActivation::Square;
    c.sampler.step_size = 1e200;
    c.optimizer.iterations = 20;
    c.eval.n_eval = Some(100);
    let dir = tempfile::tempdir().unwrap();
    c.run.out_dir = Some(dir.path().to_path_buf());
    let out = run_train(&c).unwrap();
    let r = &out.record;
    assert!(r.diverged, "{r:?}");
    assert!(r.divergence.is_some());
    assert_eq!(r.final_sm_loss, f64::INFINITY);
    assert_eq!(r.rows.last().unwrap().loss, f64::INFINITY);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["final_sm_loss"], "+inf");
    assert_eq!(json["diverged"], true);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().last().unwrap().contains("+inf"));
}

#[test]
fn time_model_trains_on_its_grid() {
    let mut c = gaussian_cfg(LossKind::DcdVeTime);
    c.optimizer.iterations = 30;
    c.diffusion.t_min = 0.01;
    c.diffusion.t_max = 2.0;
    c.diffusion.levels = 4;
    let out = run_train(&c).unwrap();
    assert!(matches!(out.model, Checkpoint::Time(_)));
    assert!(!out.record.diverged);
    assert_eq!(out.record.iterations, 30);
}

#[test]
fn datasets_are_seeded_by_the_run() {
    let mut c = ExperimentConfig::default();
    c.dataset.n_train = 50;
    let a = load_dataset(&c).unwrap().train;
    c.run.seed += 1;
    let b = load_dataset(&c).unwrap().train;
    assert_ne!(a, b);
    c.run.seed -= 1;
    assert_eq!(load_dataset(&c).unwrap().train, a);
}

#[test]
fn training_is_deterministic_given_data_and_model() {
    let mut c = gaussian_cfg(LossKind::Pcd);
    c.optimizer.iterations = 10;
    c.optimizer.batch_size = 50;
    c.sampler.buffer_capacity = Some(200);
    let data = load_dataset(&c).unwrap().train;
    let m = Checkpoint::Mlp(MlpEbm::init(&[1, 8, 1], HiddenActivation::Gelu, 3).unwrap());
    let a = train_model(&c, &data, m.clone()).unwrap();
    let b = train_model(&c, &data, m).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.record.final_sm_loss, b.record.final_sm_loss);
}

#[test]
fn image_pipeline_denoises_with_a_gaussian_prior() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imgs.idx");
    // constant mid-gray images: the clean value is 0 after scaling
    let n = 40;
    let arr = IdxArray {
        dims: vec![n, 4, 4],
        data: vec![127; n * 16],
    };
    std::fs::write(&path, encode_idx(&arr)).unwrap();
    let mut c = ExperimentConfig::default();
    c.dataset.name = "idx".into();
    c.dataset.path = Some(path);
    c.dataset.preprocess_sigma = 0.0;
    c.eval.denoise_sigmas = vec![0.3, 0.9];
    c.eval.denoise_steps = 200;
    c.eval.denoise_step_size = 0.05;
    let data = load_dataset(&c).unwrap();
    let clean = data.clean.unwrap();
    assert_eq!(clean.shape(), &[n, 16]);
    // a sharp prior at the clean image pulls the noise out
    let center = clean.row(0).to_vec();
    let model = Checkpoint::Mlp(MlpEbm::quadratic(&center, &vec![20.0; 16], 0.0).unwrap());
    let pts = denoise_sweep(&model, &clean, &c).unwrap();
    assert_eq!(pts.len(), 2);
    for p in &pts {
        assert!(p.rmse < 0.01 * p.sigma, "{p:?}");
    }
    let flat = Checkpoint::Mlp(MlpEbm::constant(16, 0.0).unwrap());
    let none = denoise_sweep(&flat, &clean, &c).unwrap();
    for p in &none {
        assert!((p.rmse - p.sigma).abs() < 0.1 * p.sigma, "{p:?}");
    }
}

#[test]
fn grid_of_a_time_slice_peaks_at_the_mode() {
    let spatial = MlpEbm::quadratic(&[1.0, -0.5], &[2.0, 2.0], 0.0).unwrap();
    let tm = TimeEbm::from_spatial(&spatial, TimeFeature::Scalar, 1.0).unwrap();
    let g = export_grid(&tm.at(0.5), (-2.0, 2.0), (-2.0, 2.0), 40).unwrap();
    let (i, j) = g.argmax();
    let (a, b) = g.point(i, j);
    assert!((a - 1.0).abs() <= 0.051 && (b + 0.5).abs() <= 0.051, "({a}, {b})");
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut p = vec![Tensor::vector(vec![5.0, -3.0])];
    let mut opt = Adam::new(&p, 0.1, 0.9, 0.99, 1e-8);
    for _ in 0..500 {
        let g = vec![p[0].map(|v| 2.0 * v)];
        opt.step(&mut p, &g);
    }
    assert!(p[0].data().iter().all(|v| v.abs() < 1e-2), "{:?}", p[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_rmse_is_scale_equivariant(vals in prop::collection::vec(-5.0f64..5.0, 12), k in 0.0f64..10.0) {
        let a = Tensor::new(vec![3, 4], vals.clone()).unwrap();
        let z = Tensor::zeros(&[3, 4]);
        let b = a.map(|v| k * v);
        prop_assert!((mean_row_rmse(&b, &z) - k * mean_row_rmse(&a, &z)).abs() <= 1e-9 * (1.0 + k));
        prop_assert_eq!(mean_row_rmse(&a, &a), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr(g in -1e3f64..1e3, lr in 1e-4f64..1e-1) {
        prop_assume!(g.abs() > 1e-3);
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut opt = Adam::new(&p, lr, 0.9, 0.99, 1e-8);
        opt.step(&mut p, &[Tensor::vector(vec![g])]);
        prop_assert!((p[0].data()[0] + lr * g.signum()).abs() <= 1e-6 * lr);
    }
}

#[test]
fn model_params_survive_training_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = gaussian_cfg(LossKind::DcdVe);
    c.optimizer.iterations = 5;
    c.run.out_dir = Some(dir.path().to_path_buf());
    let out = run_train(&c).unwrap();
    let back = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(back.params(), out.model.params());
    let cfg_back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg_back, c);
    assert_eq!(out.model.mlp().input_dim(), 1);
}
