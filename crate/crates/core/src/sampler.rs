//! Langevin chains, the persistent replay buffer and noiseless ascent.

use dcd_autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{bind_params, check_input, param_inputs, score_nodes, EnergyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub n_steps: usize,
    /// `false` drops the injected noise, leaving plain gradient ascent.
    pub noise_on: bool,
}

impl LangevinConfig {
    pub fn new(step_size: f64, n_steps: usize, noise_on: bool) -> Result<Self> {
        let cfg = Self {
            step_size,
            n_steps,
            noise_on,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(CoreError::Invalid(format!(
                "Langevin step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// A score graph built once for a fixed batch shape.
pub struct ScoreProgram {
    graph: Graph,
    x: NodeId,
    params: Vec<NodeId>,
    score: NodeId,
    shape: Vec<usize>,
}

impl ScoreProgram {
    pub fn new(model: &impl EnergyModel, rows: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let shape = vec![rows, model.input_dim()];
        let x = graph.input("x", &shape);
        let params = param_inputs(&mut graph, model.params());
        let (_, score) = score_nodes(&mut graph, model, x, &params)?;
        Ok(Self {
            graph,
            x,
            params,
            score,
            shape,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn eval(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let mut b = Bindings::new().with(self.x, x);
        bind_params(&mut b, &self.params, params);
        Ok(self.graph.eval(self.score, &b)?)
    }
}

/// Runs `x ← x + (ε/2)·∇ₓf(x) + √ε·ξ` for `cfg.n_steps` steps.
///
/// The result is a plain tensor: nothing downstream can differentiate through
/// the chain.
pub fn langevin_run<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x_init: &Tensor,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    check_input(model, x_init)?;
    cfg.validate()?;
    if !x_init.is_finite() {
        return Err(CoreError::ChainDiverged { step: 0 });
    }
    if cfg.n_steps == 0 {
        return Ok(x_init.clone());
    }
    let program = ScoreProgram::new(model, x_init.rows())?;
    run_program(&program, model.params(), x_init, cfg, rng)
}

pub(crate) fn run_program<R: Rng + ?Sized>(
    program: &ScoreProgram,
    params: &[Tensor],
    x_init: &Tensor,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let drift = 0.5 * cfg.step_size;
    let sd = cfg.step_size.sqrt();
    let mut x = x_init.clone();
    for step in 1..=cfg.n_steps {
        let s = match program.eval(params, &x) {
            Ok(s) => s,
            Err(CoreError::Graph(AutodiffError::NonFinite { .. })) => {
                return Err(CoreError::ChainDiverged { step })
            }
            Err(e) => return Err(e),
        };
        for (xi, si) in x.data_mut().iter_mut().zip(s.data()) {
            *xi += drift * si;
            if cfg.noise_on {
                *xi += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !x.is_finite() {
            return Err(CoreError::ChainDiverged { step });
        }
    }
    Ok(x)
}

/// Noiseless ascent on `f` starting from `x_noisy`.
pub fn denoise(model: &impl EnergyModel, x_noisy: &Tensor, cfg: &LangevinConfig) -> Result<Tensor> {
    let cfg = LangevinConfig {
        noise_on: false,
        ..*cfg
    };
    // never sampled from with the noise switched off
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    langevin_run(model, x_noisy, &cfg, &mut rng)
}

/// Persistent negative samples for PCD.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    reinit_fraction: f64,
    low: Vec<f64>,
    high: Vec<f64>,
    rows: Vec<Vec<f64>>,
    /// Next slot to overwrite once full.
    cursor: usize,
    inserted: usize,
}

impl ReplayBuffer {
    /// An empty buffer whose reinitialization law is uniform on `[low, high]`.
    pub fn new(capacity: usize, reinit_fraction: f64, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Invalid("buffer capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&reinit_fraction) {
            return Err(CoreError::Invalid(format!(
                "reinit fraction {reinit_fraction} outside [0, 1]"
            )));
        }
        if low.len() != high.len() || low.is_empty() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(CoreError::Invalid("bad reinitialization box".into()));
        }
        Ok(Self {
            capacity,
            reinit_fraction,
            low,
            high,
            rows: Vec::new(),
            cursor: 0,
            inserted: 0,
        })
    }

    /// Box = bounding box of `data`, each side widened by 10% of its length.
    pub fn from_data_bounds(capacity: usize, reinit_fraction: f64, data: &Tensor) -> Result<Self> {
        if data.rank() != 2 || data.rows() == 0 {
            return Err(CoreError::Invalid("need at least one data row for the box".into()));
        }
        let d = data.cols();
        let mut low = vec![f64::INFINITY; d];
        let mut high = vec![f64::NEG_INFINITY; d];
        for r in 0..data.rows() {
            for (j, v) in data.row(r).iter().enumerate() {
                low[j] = low[j].min(*v);
                high[j] = high[j].max(*v);
            }
        }
        for j in 0..d {
            let pad = 0.1 * (high[j] - low[j]).max(1e-6);
            low[j] -= pad;
            high[j] += pad;
        }
        Self::new(capacity, reinit_fraction, low, high)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn reinit_fraction(&self) -> f64 {
        self.reinit_fraction
    }

    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn samples(&self) -> Tensor {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::new(vec![self.rows.len(), self.dim()], data).expect("buffer rows are uniform")
    }

    pub fn uniform_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.low
                    .iter()
                    .zip(&self.high)
                    .map(|(l, h)| rng.gen_range(*l..*h))
                    .collect()
            })
            .collect()
    }

    /// Appends rows, overwriting the oldest once at capacity.
    pub fn push(&mut self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(CoreError::DimMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        for r in 0..x.rows() {
            let row = x.row(r).to_vec();
            if self.rows.len() < self.capacity {
                self.rows.push(row);
            } else {
                self.rows[self.cursor] = row;
                self.cursor = (self.cursor + 1) % self.capacity;
            }
            self.inserted += 1;
        }
        Ok(())
    }

    /// Fills the buffer to capacity from the uniform box.
    pub fn fill_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let n = self.capacity - self.rows.len();
        let rows = self.uniform_rows(n, rng);
        let data = rows.into_iter().flatten().collect();
        self.push(&Tensor::new(vec![n, self.dim()], data)?)
    }
}

/// Draws a batch of persistent chains, restarts a fraction from the uniform
/// box, advances them and writes them back to their slots.
pub fn pcd_negatives<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    buffer: &mut ReplayBuffer,
    batch_size: usize,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let program = ScoreProgram::new(model, batch_size)?;
    pcd_negatives_with(&program, model.params(), buffer, batch_size, cfg, rng)
}

pub(crate) fn pcd_negatives_with<R: Rng + ?Sized>(
    program: &ScoreProgram,
    params: &[Tensor],
    buffer: &mut ReplayBuffer,
    batch_size: usize,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if buffer.is_empty() {
        return Err(CoreError::EmptyBuffer);
    }
    if program.shape()[1] != buffer.dim() {
        return Err(CoreError::DimMismatch {
            expected: program.shape()[1],
            got: buffer.dim(),
        });
    }
    let slots: Vec<usize> = if batch_size <= buffer.len() {
        index::sample(rng, buffer.len(), batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..buffer.len())).collect()
    };
    let n_reinit = (buffer.reinit_fraction * batch_size as f64).round() as usize;
    let fresh = buffer.uniform_rows(n_reinit, rng);
    let mut data = Vec::with_capacity(batch_size * buffer.dim());
    for (k, &slot) in slots.iter().enumerate() {
        if k < n_reinit {
            data.extend_from_slice(&fresh[k]);
        } else {
            data.extend_from_slice(&buffer.rows[slot]);
        }
    }
    let x0 = Tensor::new(vec![batch_size, buffer.dim()], data)?;
    let x = if cfg.n_steps == 0 {
        x0
    } else {
        cfg.validate()?;
        run_program(program, params, &x0, cfg, rng)?
    };
    for (k, &slot) in slots.iter().enumerate() {
        buffer.rows[slot].copy_from_slice(x.row(k));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpEbm;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = MlpEbm::standard_gaussian(2).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let cfg = LangevinConfig::new(0.001, 0, true).unwrap();
        assert_eq!(langevin_run(&m, &x, &cfg, &mut rng()).unwrap(), x);
        assert_eq!(denoise(&m, &x, &cfg).unwrap(), x);
    }

    #[test]
    fn noiseless_contraction_is_geometric() {
        let mu = [0.5, -1.5];
        let m = MlpEbm::quadratic(&mu, &[1.0, 1.0], 0.0).unwrap();
        let x = Tensor::from_rows(&[vec![4.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        let eps = 0.01;
        let n = 50;
        let out = denoise(&m, &x, &LangevinConfig::new(eps, n, false).unwrap()).unwrap();
        let factor = (1.0 - eps / 2.0f64).powi(n as i32);
        for r in 0..2 {
            for j in 0..2 {
                let want = mu[j] + factor * (x.row(r)[j] - mu[j]);
                assert!((out.row(r)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_model_denoise_is_identity() {
        let m = MlpEbm::constant(3, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let out = denoise(&m, &x, &LangevinConfig::new(0.1, 20, false).unwrap()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn divergence_reports_step() {
        // f = +½x², an unstable repeller: x grows by (1 + ε/2) per step
        let m = MlpEbm::quadratic(&[0.0], &[-1.0], 0.0).unwrap();
        let x = Tensor::from_rows(&[vec![1e300]]).unwrap();
        let err = langevin_run(&m, &x, &LangevinConfig::new(1.0, 100, false).unwrap(), &mut rng()).unwrap_err();
        assert!(matches!(err, CoreError::ChainDiverged { step } if (45..50).contains(&step)), "{err:?}");
    }

    #[test]
    fn bad_config() {
        assert!(LangevinConfig::new(0.0, 3, true).is_err());
        assert!(LangevinConfig::new(f64::NAN, 3, true).is_err());
    }

    #[test]
    fn buffer_validation_and_box() {
        assert!(ReplayBuffer::new(0, 0.05, vec![0.0], vec![1.0]).is_err());
        assert!(ReplayBuffer::new(4, 1.5, vec![0.0], vec![1.0]).is_err());
        assert!(ReplayBuffer::new(4, 0.5, vec![1.0], vec![0.0]).is_err());
        let data = Tensor::from_rows(&[vec![0.0, -1.0], vec![2.0, 1.0]]).unwrap();
        let mut b = ReplayBuffer::from_data_bounds(8, 0.05, &data).unwrap();
        assert_eq!(b.low, vec![-0.2, -1.2]);
        assert_eq!(b.high, vec![2.2, 1.2]);
        b.fill_uniform(&mut rng()).unwrap();
        assert_eq!(b.len(), 8);
        let s = b.samples();
        for r in 0..8 {
            assert!(s.row(r)[0] >= -0.2 && s.row(r)[0] < 2.2);
        }
    }

    #[test]
    fn empty_buffer_errors() {
        let m = MlpEbm::standard_gaussian(1).unwrap();
        let mut b = ReplayBuffer::new(4, 0.0, vec![-1.0], vec![1.0]).unwrap();
        let cfg = LangevinConfig::new(0.01, 1, true).unwrap();
        assert!(matches!(
            pcd_negatives(&m, &mut b, 2, &cfg, &mut rng()),
            Err(CoreError::EmptyBuffer)
        ));
    }

    #[test]
    fn identity_path_returns_drawn_rows() {
        let m = MlpEbm::standard_gaussian(1).unwrap();
        let mut b = ReplayBuffer::new(5, 0.0, vec![-1.0], vec![1.0]).unwrap();
        let rows = Tensor::from_rows(&[vec![10.0], vec![20.0], vec![30.0], vec![40.0], vec![50.0]]).unwrap();
        b.push(&rows).unwrap();
        let cfg = LangevinConfig::new(0.01, 0, true).unwrap();
        let out = pcd_negatives(&m, &mut b, 3, &cfg, &mut rng()).unwrap();
        for v in out.data() {
            assert!(rows.data().contains(v));
        }
        assert_eq!(b.samples(), rows);
    }

    #[test]
    fn full_reinit_draws_from_box() {
        let m = MlpEbm::standard_gaussian(1).unwrap();
        let mut b = ReplayBuffer::new(4, 1.0, vec![-1.0], vec![1.0]).unwrap();
        b.push(&Tensor::from_rows(&vec![vec![100.0]; 4]).unwrap()).unwrap();
        let cfg = LangevinConfig::new(0.01, 0, true).unwrap();
        let out = pcd_negatives(&m, &mut b, 4, &cfg, &mut rng()).unwrap();
        assert!(out.data().iter().all(|v| (-1.0..1.0).contains(v)));
        assert!(b.samples().data().iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
