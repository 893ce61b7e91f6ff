use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dcd_autodiff::{AutodiffError, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use super::config::{ExperimentConfig, LossKind};
use super::optim::Adam;
use crate::datasets::{load_idx, Dataset2D, ImageSet};
use crate::diffusion::{add_noise, VeSchedule};
use crate::error::{CoreError, Result};
use crate::model::{Checkpoint, EnergyModel, MlpEbm, TimeEbm};
use crate::objectives::{time_level_coefficients, time_level_pair, LaplacianMode, LossProgram, TimeGrid};
use crate::sampler::{denoise, pcd_negatives_with, run_program, LangevinConfig, ReplayBuffer, ScoreProgram};

const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Training rows plus, for image data, the noise-free images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Tensor,
    pub clean: Option<Tensor>,
}

/// Materializes the training set named by `cfg.dataset`, seeded by `cfg.run.seed`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut rng = stream(cfg.run.seed, DATA_STREAM);
    let d = &cfg.dataset;
    match d.name.as_str() {
        "idx" => {
            let path = d.path.as_ref().ok_or_else(|| CoreError::Config("dataset.path missing".into()))?;
            let mut set: ImageSet = load_idx(path, None, &mut rng)?;
            if let Some(n) = d.limit {
                set.truncate(n);
            }
            let clean = set.images.clone();
            let train = if d.preprocess_sigma > 0.0 {
                set.with_noise(d.preprocess_sigma, &mut rng).images
            } else {
                clean.clone()
            };
            Ok(Dataset {
                train,
                clean: Some(clean),
            })
        }
        "gaussian" => {
            let zeros = Tensor::zeros(&[d.n_train, d.dim]);
            Ok(Dataset {
                train: add_noise(&zeros, 1.0, &mut rng),
                clean: None,
            })
        }
        name => Ok(Dataset {
            train: name.parse::<Dataset2D>()?.sample(d.n_train, &mut rng),
            clean: None,
        }),
    }
}

/// Fresh model for `cfg`, seeded by `cfg.run.seed`.
pub fn init_model(cfg: &ExperimentConfig, dim: usize) -> Result<Checkpoint> {
    let m = &cfg.model;
    let seed = cfg.run.seed;
    Ok(match cfg.loss.kind {
        LossKind::DcdVeTime => Checkpoint::Time(TimeEbm::init(
            dim,
            &m.hidden,
            m.time_feature(),
            m.activation,
            cfg.diffusion.t_max,
            seed,
        )?),
        _ => {
            let mut dims = vec![dim];
            dims.extend_from_slice(&m.hidden);
            dims.push(1);
            Checkpoint::Mlp(MlpEbm::init(&dims, m.activation, seed)?)
        }
    })
}

fn ser_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn ser_opt_f64<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => ser_f64(x, s),
        None => s.serialize_none(),
    }
}

fn csv_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else if v > 0.0 {
        "+inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    #[serde(serialize_with = "ser_f64")]
    pub loss: f64,
    #[serde(serialize_with = "ser_opt_f64")]
    pub sm_loss: Option<f64>,
    pub wall_ms: f64,
    pub n_score_evals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub loss_kind: String,
    pub dataset: String,
    pub seed: u64,
    /// Iterations completed before stopping.
    pub iterations: usize,
    #[serde(skip)]
    pub rows: Vec<IterRecord>,
    #[serde(serialize_with = "ser_f64")]
    pub initial_sm_loss: f64,
    /// `+inf` when the run diverged.
    #[serde(serialize_with = "ser_f64")]
    pub final_sm_loss: f64,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub score_evals_per_iter: usize,
    pub total_wall_ms: f64,
    pub mean_iter_ms: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iter,loss,sm_loss,wall_ms,n_score_evals\n");
        for r in &self.rows {
            let sm = r.sm_loss.map(csv_f64).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.4},{}\n",
                r.iter,
                csv_f64(r.loss),
                sm,
                r.wall_ms,
                r.n_score_evals
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Checkpoint,
}

/// Score-matching loss over many rows, evaluated in fixed-size chunks.
pub struct SmEvaluator {
    chunk: usize,
    full: Option<LossProgram>,
    rest: Option<LossProgram>,
    rows: usize,
}

impl SmEvaluator {
    pub fn new(model: &impl EnergyModel, rows: usize, chunk: usize, mode: LaplacianMode) -> Result<Self> {
        let chunk = chunk.max(1).min(rows.max(1));
        let full = if rows >= chunk && rows > 0 {
            Some(LossProgram::score_matching(model, chunk, mode, false)?)
        } else {
            None
        };
        let rem = if rows > 0 { rows % chunk } else { 0 };
        let rest = if rem > 0 {
            Some(LossProgram::score_matching(model, rem, mode, false)?)
        } else {
            None
        };
        Ok(Self { chunk, full, rest, rows })
    }

    pub fn eval<R: Rng + ?Sized>(&self, params: &[Tensor], x: &Tensor, rng: &mut R) -> Result<f64> {
        if x.rows() != self.rows {
            return Err(CoreError::Invalid(format!(
                "evaluator built for {} rows, got {}",
                self.rows,
                x.rows()
            )));
        }
        let mut total = 0.0;
        let mut start = 0;
        while start < self.rows {
            let len = self.chunk.min(self.rows - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let part = x.select_rows(&idx);
            let program = if len == self.chunk {
                self.full.as_ref()
            } else {
                self.rest.as_ref()
            }
            .expect("program for chunk size");
            total += program.evaluate(params, &[&part], rng)?.value * len as f64;
            start += len;
        }
        Ok(total / self.rows as f64)
    }
}

/// Rows used for score-matching evaluation.
pub fn eval_rows(cfg: &ExperimentConfig, train: &Tensor) -> Tensor {
    match cfg.eval.n_eval {
        Some(n) if n < train.rows() => train.select_rows(&(0..n).collect::<Vec<_>>()),
        _ => train.clone(),
    }
}

/// The energy slice used for evaluation: the model itself, or a
/// time-conditioned model at its smallest grid time.
fn eval_time(cfg: &ExperimentConfig) -> Result<f64> {
    Ok(cfg.time_grid()?.levels()[0])
}

fn build_evaluator(cfg: &ExperimentConfig, model: &Checkpoint, x: &Tensor) -> Result<SmEvaluator> {
    let mode = cfg.eval_mode(model.dim());
    match model {
        Checkpoint::Mlp(m) => SmEvaluator::new(m, x.rows(), cfg.eval.chunk, mode),
        Checkpoint::Time(t) => SmEvaluator::new(&t.at(eval_time(cfg)?), x.rows(), cfg.eval.chunk, mode),
    }
}

fn is_divergence(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::ChainDiverged { .. }
            | CoreError::NonFiniteLoss(_)
            | CoreError::Graph(AutodiffError::NonFinite { .. })
    )
}

enum Method {
    Dcd {
        program: LossProgram,
        t: f64,
        sched: VeSchedule,
    },
    Contrastive {
        program: LossProgram,
        score: ScoreProgram,
        langevin: LangevinConfig,
        buffer: Option<ReplayBuffer>,
    },
    Time {
        programs: Vec<LossProgram>,
        grid: TimeGrid,
        sched: VeSchedule,
    },
}

impl Method {
    fn new(cfg: &ExperimentConfig, model: &Checkpoint, data: &Tensor, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = cfg.optimizer.batch_size;
        let mode = cfg.loss.laplacian_mode();
        Ok(match (cfg.loss.kind, model) {
            (LossKind::DcdVe, Checkpoint::Mlp(m)) => {
                let sched = cfg.schedule()?;
                let t = cfg.loss.t;
                let g_sq = crate::objectives::mean_g_sq(&sched, 0.0, t)?;
                Method::Dcd {
                    program: LossProgram::dcd(m, b, 0.5 * g_sq, 1.0 / t, mode, true)?,
                    t,
                    sched,
                }
            }
            (LossKind::Cd | LossKind::Pcd, Checkpoint::Mlp(m)) => {
                let buffer = if cfg.loss.kind == LossKind::Pcd {
                    let mut buf = ReplayBuffer::from_data_bounds(
                        cfg.buffer_capacity(),
                        cfg.sampler.reinit_fraction,
                        data,
                    )?;
                    buf.fill_uniform(rng)?;
                    Some(buf)
                } else {
                    None
                };
                Method::Contrastive {
                    program: LossProgram::contrastive(m, b, true)?,
                    score: ScoreProgram::new(m, b)?,
                    langevin: cfg.langevin()?,
                    buffer,
                }
            }
            (LossKind::DcdVeTime, Checkpoint::Time(tm)) => {
                let grid = cfg.time_grid()?;
                let sched = cfg.schedule()?;
                let programs = (0..grid.len())
                    .map(|i| {
                        let (c1, c2) = time_level_coefficients(&grid, &sched, i)?;
                        LossProgram::dcd(&tm.at(grid.levels()[i]), b, c1, c2, mode, true)
                    })
                    .collect::<Result<_>>()?;
                Method::Time { programs, grid, sched }
            }
            (kind, _) => {
                return Err(CoreError::Config(format!(
                    "loss `{}` does not match the model kind",
                    kind.name()
                )))
            }
        })
    }

    fn loss_and_grads(
        &mut self,
        params: &[Tensor],
        batch: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let lv = match self {
            Method::Dcd { program, t, sched } => {
                let xt = sched.perturb(batch, *t, rng)?;
                program.evaluate(params, &[batch, &xt], rng)?
            }
            Method::Contrastive {
                program,
                score,
                langevin,
                buffer,
            } => {
                let neg = match buffer {
                    None => run_program(score, params, batch, langevin, rng)?,
                    Some(buf) => pcd_negatives_with(score, params, buf, batch.rows(), langevin, rng)?,
                };
                program.evaluate(params, &[batch, &neg], rng)?
            }
            Method::Time { programs, grid, sched } => {
                let level = rng.gen_range(0..grid.len());
                let (base, pert) = time_level_pair(batch, grid, sched, level, rng)?;
                programs[level].evaluate(params, &[&base, &pert], rng)?
            }
        };
        let grads = lv.grads.expect("training programs carry gradients");
        Ok((lv.value, grads))
    }
}

/// Trains the model described by `cfg` on its configured dataset and, when
/// `run.out_dir` is set, writes `metrics.csv`, `summary.json`, `model.ckpt`
/// and `config.toml` there.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let model = init_model(cfg, data.train.cols())?;
    let mut outcome = train_model(cfg, &data.train, model)?;
    if let Some(dir) = &cfg.run.out_dir {
        write_outputs(dir, cfg, &mut outcome)?;
    }
    Ok(outcome)
}

/// The training loop proper, on caller-supplied data and initial model.
pub fn train_model(cfg: &ExperimentConfig, data: &Tensor, mut model: Checkpoint) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.rank() != 2 || data.cols() != model.dim() || data.rows() == 0 {
        return Err(CoreError::DimMismatch {
            expected: model.dim(),
            got: data.cols(),
        });
    }
    let dim = model.dim();
    let mut rng = stream(cfg.run.seed, TRAIN_STREAM);
    let eval_x = eval_rows(cfg, data);
    let evaluator = build_evaluator(cfg, &model, &eval_x)?;
    let evaluate = |params: &[Tensor]| -> Result<f64> {
        let mut erng = stream(cfg.run.seed, EVAL_STREAM);
        match evaluator.eval(params, &eval_x, &mut erng) {
            Err(e) if is_divergence(&e) => Ok(f64::INFINITY),
            other => other,
        }
    };
    let initial_sm = evaluate(model.params())?;
    let mut method = Method::new(cfg, &model, data, &mut rng)?;
    let mut opt = Adam::new(
        model.params(),
        cfg.optimizer.lr,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
    );
    let evals = cfg.score_evals_per_iter(dim);
    let b = cfg.optimizer.batch_size;
    let n = data.rows();
    let mut rows = Vec::with_capacity(cfg.optimizer.iterations);
    let mut divergence: Option<String> = None;
    let mut last_sm = initial_sm;
    let start = Instant::now();

    for iter in 1..=cfg.optimizer.iterations {
        let t0 = Instant::now();
        let idx: Vec<usize> = if b <= n {
            index::sample(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.gen_range(0..n)).collect()
        };
        let batch = data.select_rows(&idx);
        let step = method.loss_and_grads(model.params(), &batch, &mut rng);
        let (loss, grads) = match step {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                rows.push(IterRecord {
                    iter,
                    loss: f64::INFINITY,
                    sm_loss: None,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    n_score_evals: evals,
                });
                divergence = Some(format!("iteration {iter}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        opt.step(model.params_mut(), &grads);
        if model.params().iter().any(|p| !p.is_finite()) {
            divergence = Some(format!("iteration {iter}: non-finite parameters"));
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let due = cfg.eval.every > 0 && iter % cfg.eval.every == 0;
        let sm_loss = if due && divergence.is_none() {
            last_sm = evaluate(model.params())?;
            Some(last_sm)
        } else {
            None
        };
        rows.push(IterRecord {
            iter,
            loss,
            sm_loss,
            wall_ms,
            n_score_evals: evals,
        });
        if divergence.is_none() && !last_sm.is_finite() {
            divergence = Some(format!("iteration {iter}: non-finite score-matching loss"));
        }
        if divergence.is_some() {
            break;
        }
    }

    let completed = rows.last().map_or(0, |r| r.iter);
    let final_sm = if divergence.is_some() {
        f64::INFINITY
    } else if rows.last().and_then(|r| r.sm_loss).is_some() {
        last_sm
    } else if completed == 0 {
        initial_sm
    } else {
        evaluate(model.params())?
    };
    let diverged = divergence.is_some() || !final_sm.is_finite();
    if diverged && divergence.is_none() {
        divergence = Some("non-finite final score-matching loss".into());
    }
    let total_wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mean_iter_ms = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.wall_ms).sum::<f64>() / rows.len() as f64
    };
    let record = RunRecord {
        name: cfg
            .run
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-{}-s{}", cfg.dataset.name, cfg.loss.kind.name(), cfg.run.seed)),
        loss_kind: cfg.loss.kind.name().into(),
        dataset: cfg.dataset.name.clone(),
        seed: cfg.run.seed,
        iterations: completed,
        rows,
        initial_sm_loss: initial_sm,
        final_sm_loss: if diverged { f64::INFINITY } else { final_sm },
        diverged,
        divergence,
        score_evals_per_iter: evals,
        total_wall_ms,
        mean_iter_ms,
        checkpoint: None,
    };
    Ok(TrainOutcome { record, model })
}

pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &mut TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let ckpt = dir.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    outcome.record.checkpoint = Some(ckpt);
    let write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).map_err(|e| CoreError::io(&p, e))?;
        f.write_all(text.as_bytes()).map_err(|e| CoreError::io(&p, e))
    };
    write("metrics.csv", &outcome.record.metrics_csv())?;
    let summary = serde_json::to_string_pretty(&outcome.record)
        .map_err(|e| CoreError::Invalid(format!("summary serialization: {e}")))?;
    write("summary.json", &summary)?;
    write("config.toml", &cfg.to_toml_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenoisePoint {
    pub sigma: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    #[serde(serialize_with = "ser_f64")]
    pub sm_loss: f64,
    pub n_rows: usize,
    pub denoise: Vec<DenoisePoint>,
}

/// Mean over rows of the per-row RMSE between `a` and `b`.
pub fn mean_row_rmse(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.cols() as f64;
    (0..a.rows())
        .map(|r| {
            let se: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y) * (x - y)).sum();
            (se / d).sqrt()
        })
        .sum::<f64>()
        / a.rows() as f64
}

/// Noises `clean` at level `sigma`, reconstructs by noiseless ascent and
/// returns the mean per-image RMSE against `clean`.
pub fn denoise_rmse<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    clean: &Tensor,
    sigma: f64,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<f64> {
    let noisy = add_noise(clean, sigma * sigma, rng);
    let recon = denoise(model, &noisy, cfg)?;
    Ok(mean_row_rmse(&recon, clean))
}

/// Score-matching loss of `model` on the configured training data and, for
/// image data, the denoising RMSE sweep.
pub fn run_eval(model: &Checkpoint, cfg: &ExperimentConfig) -> Result<EvalMetrics> {
    let data = load_dataset(cfg)?;
    if data.train.cols() != model.dim() {
        return Err(CoreError::DimMismatch {
            expected: model.dim(),
            got: data.train.cols(),
        });
    }
    let eval_x = eval_rows(cfg, &data.train);
    let evaluator = build_evaluator(cfg, model, &eval_x)?;
    let mut erng = stream(cfg.run.seed, EVAL_STREAM);
    let sm_loss = match evaluator.eval(model.params(), &eval_x, &mut erng) {
        Err(e) if is_divergence(&e) => f64::INFINITY,
        other => other?,
    };
    let denoise = match &data.clean {
        Some(clean) => denoise_sweep(model, clean, cfg)?,
        None => Vec::new(),
    };
    Ok(EvalMetrics {
        sm_loss,
        n_rows: eval_x.rows(),
        denoise,
    })
}

/// RMSE at each configured noise level on the first `eval.n_denoise` images.
pub fn denoise_sweep(model: &Checkpoint, clean: &Tensor, cfg: &ExperimentConfig) -> Result<Vec<DenoisePoint>> {
    let n = cfg.eval.n_denoise.min(clean.rows());
    let subset = clean.select_rows(&(0..n).collect::<Vec<_>>());
    let lcfg = LangevinConfig::new(cfg.eval.denoise_step_size, cfg.eval.denoise_steps, false)?;
    let mut rng = stream(cfg.run.seed, EVAL_STREAM);
    cfg.eval
        .denoise_sigmas
        .iter()
        .map(|&sigma| {
            let rmse = match model {
                Checkpoint::Mlp(m) => denoise_rmse(m, &subset, sigma, &lcfg, &mut rng),
                Checkpoint::Time(t) => denoise_rmse(&t.at(eval_time(cfg)?), &subset, sigma, &lcfg, &mut rng),
            };
            let rmse = match rmse {
                Err(e) if is_divergence(&e) => f64::INFINITY,
                other => other?,
            };
            Ok(DenoisePoint { sigma, rmse })
        })
        .collect()
}
