//! Training and evaluation losses.
//!
//! Every loss is compiled once into a [`LossProgram`] for a fixed batch shape
//! and then evaluated with fresh data, parameters and probes. None of them
//! involves the normalizer `Z_θ`.

use dcd_autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, VeSchedule};
use crate::error::{CoreError, Result};
use crate::model::{
    bind_params, check_input, exact_laplacian_node, hutchinson_node, param_inputs, score_nodes,
    EnergyModel, TimeEbm,
};
use crate::sampler::{langevin_run, pcd_negatives, LangevinConfig, ReplayBuffer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDist {
    #[default]
    Rademacher,
    Gaussian,
}

impl ProbeDist {
    pub fn sample<R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| match self {
                ProbeDist::Rademacher => {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
                ProbeDist::Gaussian => rng.sample(StandardNormal),
            })
            .collect();
        Tensor::new(vec![rows, cols], data).expect("probe shape")
    }
}

/// How `Δₓf` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LaplacianMode {
    /// One backward pass per coordinate.
    Exact,
    /// Mean of `vᵀ∇ₓ(s·v)` over `n_probes` random probes per row.
    Hutchinson { n_probes: usize, dist: ProbeDist },
}

impl LaplacianMode {
    /// Score evaluations charged for one Laplacian in `dim` dimensions.
    pub fn score_evals(self, dim: usize) -> usize {
        match self {
            LaplacianMode::Exact => dim,
            LaplacianMode::Hutchinson { n_probes, .. } => n_probes,
        }
    }
}

/// Per-row nodes for `f`, `‖∇ₓf‖²` and `Δₓf` at some input.
pub struct SmParts {
    pub energy: NodeId,
    pub sq_norm: NodeId,
    pub laplacian: NodeId,
    /// Probe input, `(n_probes · batch) × dim`, in Hutchinson mode.
    pub probes: Option<NodeId>,
    mode: LaplacianMode,
}

impl SmParts {
    pub fn sample_probes<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Option<Tensor> {
        match self.mode {
            LaplacianMode::Exact => None,
            LaplacianMode::Hutchinson { n_probes, dist } => Some(dist.sample(n_probes * rows, cols, rng)),
        }
    }
}

pub fn build_sm_parts(
    g: &mut Graph,
    model: &impl EnergyModel,
    x: NodeId,
    params: &[NodeId],
    mode: LaplacianMode,
) -> Result<SmParts> {
    match mode {
        LaplacianMode::Exact => {
            let (energy, score) = score_nodes(g, model, x, params)?;
            let sq_norm = g.dot(score, score)?;
            let laplacian = exact_laplacian_node(g, x, score)?;
            Ok(SmParts {
                energy,
                sq_norm,
                laplacian,
                probes: None,
                mode,
            })
        }
        LaplacianMode::Hutchinson { n_probes, .. } => {
            if n_probes == 0 {
                return Err(CoreError::Invalid("Hutchinson needs at least one probe".into()));
            }
            let shape = g.shape(x).to_vec();
            let inv = 1.0 / n_probes as f64;
            // Copy k of every row sits in block k, paired with probe block k.
            let xt = g.tile_rows(x, n_probes)?;
            let (energy_t, score_t) = score_nodes(g, model, xt, params)?;
            let probes = g.input("probes", &[n_probes * shape[0], shape[1]]);
            let quad = hutchinson_node(g, xt, score_t, probes)?;
            let quad = g.fold_rows(quad, n_probes)?;
            let laplacian = g.scale(quad, inv);
            let sq_t = g.dot(score_t, score_t)?;
            let sq = g.fold_rows(sq_t, n_probes)?;
            let sq_norm = g.scale(sq, inv);
            let e = g.fold_rows(energy_t, n_probes)?;
            let energy = g.scale(e, inv);
            Ok(SmParts {
                energy,
                sq_norm,
                laplacian,
                probes: Some(probes),
                mode,
            })
        }
    }
}

/// An evaluated loss: value, named components and, on request, the
/// parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub node: NodeId,
    pub value: f64,
    pub parts: Vec<(&'static str, f64)>,
    pub grads: Option<Vec<Tensor>>,
}

impl LossValue {
    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// A compiled loss graph for a fixed batch size.
pub struct LossProgram {
    graph: Graph,
    params: Vec<NodeId>,
    inputs: Vec<NodeId>,
    probes: Option<(NodeId, LaplacianMode)>,
    loss: NodeId,
    parts: Vec<(&'static str, NodeId)>,
    grads: Vec<NodeId>,
}

impl LossProgram {
    fn finish(
        mut graph: Graph,
        params: Vec<NodeId>,
        inputs: Vec<NodeId>,
        probes: Option<(NodeId, LaplacianMode)>,
        loss: NodeId,
        parts: Vec<(&'static str, NodeId)>,
        with_grad: bool,
    ) -> Result<Self> {
        let grads = if with_grad {
            graph.grad(loss, &params)?
        } else {
            Vec::new()
        };
        Ok(Self {
            graph,
            params,
            inputs,
            probes,
            loss,
            parts,
            grads,
        })
    }

    /// `c1 · mean(‖∇f‖² + Δf)(x_pert) + c2 · (mean f(x_pert) − mean f(x_base))`.
    ///
    /// Data inputs: `[x_base, x_pert]`, same shape, row `i` of `x_pert` being
    /// the perturbation of row `i` of `x_base`.
    pub fn dcd(
        model: &impl EnergyModel,
        rows: usize,
        c1: f64,
        c2: f64,
        mode: LaplacianMode,
        with_grad: bool,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let d = model.input_dim();
        let x0 = g.input("x0", &[rows, d]);
        let xt = g.input("xt", &[rows, d]);
        let params = param_inputs(&mut g, model.params());
        let sm = build_sm_parts(&mut g, model, xt, &params, mode)?;
        let e0 = model.build_energy(&mut g, x0, &params)?;
        let inner = g.add(sm.sq_norm, sm.laplacian)?;
        let inner = g.mean(inner);
        let term1 = g.scale(inner, c1);
        let me_t = g.mean(sm.energy);
        let me_0 = g.mean(e0);
        let diff = g.sub(me_t, me_0)?;
        let term2 = g.scale(diff, c2);
        let loss = g.add(term1, term2)?;
        let parts = vec![
            ("term1", term1),
            ("term2", term2),
            ("energy_data", me_0),
            ("energy_perturbed", me_t),
        ];
        let probes = sm.probes.map(|p| (p, mode));
        Self::finish(g, params, vec![x0, xt], probes, loss, parts, with_grad)
    }

    /// `mean f(neg) − mean f(pos)`. Data inputs: `[pos, neg]`.
    pub fn contrastive(model: &impl EnergyModel, rows: usize, with_grad: bool) -> Result<Self> {
        let mut g = Graph::new();
        let d = model.input_dim();
        let pos = g.input("pos", &[rows, d]);
        let neg = g.input("neg", &[rows, d]);
        let params = param_inputs(&mut g, model.params());
        let ep = model.build_energy(&mut g, pos, &params)?;
        let en = model.build_energy(&mut g, neg, &params)?;
        let mp = g.mean(ep);
        let mn = g.mean(en);
        let loss = g.sub(mn, mp)?;
        let parts = vec![("energy_pos", mp), ("energy_neg", mn)];
        Self::finish(g, params, vec![pos, neg], None, loss, parts, with_grad)
    }

    /// `mean(½‖∇f‖² + Δf)`. Data inputs: `[x]`.
    pub fn score_matching(
        model: &impl EnergyModel,
        rows: usize,
        mode: LaplacianMode,
        with_grad: bool,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.input("x", &[rows, model.input_dim()]);
        let params = param_inputs(&mut g, model.params());
        let sm = build_sm_parts(&mut g, model, x, &params, mode)?;
        let half = g.scale(sm.sq_norm, 0.5);
        let per_row = g.add(half, sm.laplacian)?;
        let loss = g.mean(per_row);
        let msq = g.mean(sm.sq_norm);
        let mlap = g.mean(sm.laplacian);
        let parts = vec![("grad_sq", msq), ("laplacian", mlap)];
        let probes = sm.probes.map(|p| (p, mode));
        Self::finish(g, params, vec![x], probes, loss, parts, with_grad)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    pub fn input_nodes(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn grad_nodes(&self) -> &[NodeId] {
        &self.grads
    }

    /// Evaluates with the given parameters and data. Hutchinson probes, if
    /// any, are drawn from `rng`.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        params: &[Tensor],
        inputs: &[&Tensor],
        rng: &mut R,
    ) -> Result<LossValue> {
        if inputs.len() != self.inputs.len() || params.len() != self.params.len() {
            return Err(CoreError::Invalid(format!(
                "loss program expects {} inputs and {} parameters",
                self.inputs.len(),
                self.params.len()
            )));
        }
        let probe_tensor = self.probes.map(|(_, mode)| match mode {
            LaplacianMode::Hutchinson { n_probes, dist } => {
                dist.sample(n_probes * inputs[0].rows(), inputs[0].cols(), rng)
            }
            LaplacianMode::Exact => unreachable!("exact mode has no probes"),
        });
        let mut b = Bindings::new();
        for (n, t) in self.inputs.iter().zip(inputs) {
            b.bind(*n, t);
        }
        bind_params(&mut b, &self.params, params);
        if let (Some((node, _)), Some(p)) = (self.probes, probe_tensor.as_ref()) {
            b.bind(node, p);
        }
        let mut outputs = vec![self.loss];
        outputs.extend(self.parts.iter().map(|(_, n)| *n));
        outputs.extend(&self.grads);
        let values = self.graph.eval_many(&outputs, &b).map_err(|e| match e {
            AutodiffError::NonFinite { node, op } => CoreError::NonFiniteLoss(format!(
                "node {} ({op}) evaluated to a non-finite value",
                node.index()
            )),
            other => other.into(),
        })?;
        let mut it = values.into_iter();
        let value = it.next().expect("loss value").item();
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss(format!("loss = {value}")));
        }
        let parts = self
            .parts
            .iter()
            .map(|(name, _)| (*name, it.next().expect("part value").item()))
            .collect();
        let grads: Vec<Tensor> = it.collect();
        Ok(LossValue {
            node: self.loss,
            value,
            parts,
            grads: if self.grads.is_empty() { None } else { Some(grads) },
        })
    }
}

/// Step-averaged `G²` over `[t0, t1]`: `(Σ(t1) − Σ(t0)) / (t1 − t0)`.
pub fn mean_g_sq(sched: &VeSchedule, t0: f64, t1: f64) -> Result<f64> {
    if !(t1 > t0) {
        return Err(CoreError::Invalid(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    Ok((sched.sigma2(t1)? - sched.sigma2(t0)?) / (t1 - t0))
}

/// One-step DCD under the VE diffusion:
/// `½G²·E[‖∇f(x_t)‖² + Δf(x_t)] + (E f(x_t) − E f(x_0)) / t`.
///
/// `G²` is averaged over `[0, t]`, which is `g0²` for a constant coefficient.
/// Row `i` of `x_t` is the perturbation of row `i` of `x0`.
pub fn dcd_ve_loss<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x0: &Tensor,
    t: f64,
    sched: &VeSchedule,
    mode: LaplacianMode,
    rng: &mut R,
) -> Result<LossValue> {
    check_input(model, x0)?;
    if !(t > 0.0) {
        return Err(CoreError::Invalid(format!("DCD time must be positive, got {t}")));
    }
    let g_sq = mean_g_sq(sched, 0.0, t)?;
    let xt = sched.perturb(x0, t, rng)?;
    let program = LossProgram::dcd(model, x0.rows(), 0.5 * g_sq, 1.0 / t, mode, true)?;
    program.evaluate(model.params(), &[x0, &xt], rng)
}

/// Data-initialized CD with detached negatives: `E f(neg) − E f(x0)`.
pub fn cd_loss<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x0: &Tensor,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<LossValue> {
    let neg = langevin_run(model, x0, cfg, rng)?;
    let program = LossProgram::contrastive(model, x0.rows(), true)?;
    program.evaluate(model.params(), &[x0, &neg], rng)
}

/// CD with negatives from persistent chains.
pub fn pcd_loss<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x0: &Tensor,
    buffer: &mut ReplayBuffer,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<LossValue> {
    check_input(model, x0)?;
    let neg = pcd_negatives(model, buffer, x0.rows(), cfg, rng)?;
    let program = LossProgram::contrastive(model, x0.rows(), true)?;
    program.evaluate(model.params(), &[x0, &neg], rng)
}

/// `E[½‖∇ₓf‖² + Δₓf]` over the rows of `x`.
pub fn sm_eval_loss<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x: &Tensor,
    mode: LaplacianMode,
    rng: &mut R,
) -> Result<f64> {
    check_input(model, x)?;
    let program = LossProgram::score_matching(model, x.rows(), mode, false)?;
    Ok(program.evaluate(model.params(), &[x], rng)?.value)
}

/// Per-row Hutchinson estimate of `Δₓf`.
pub fn hutchinson_laplacian<R: Rng + ?Sized>(
    model: &impl EnergyModel,
    x: &Tensor,
    n_probes: usize,
    dist: ProbeDist,
    rng: &mut R,
) -> Result<Tensor> {
    check_input(model, x)?;
    let mut g = Graph::new();
    let xn = g.input("x", x.shape());
    let pn = param_inputs(&mut g, model.params());
    let mode = LaplacianMode::Hutchinson { n_probes, dist };
    let parts = build_sm_parts(&mut g, model, xn, &pn, mode)?;
    let probes = parts.sample_probes(x.rows(), x.cols(), rng).expect("Hutchinson probes");
    let mut b = Bindings::new().with(xn, x);
    bind_params(&mut b, &pn, model.params());
    b.bind(parts.probes.expect("probe node"), &probes);
    Ok(g.eval(parts.laplacian, &b)?)
}

/// Increasing diffusion times `0 < t_1 < … < t_K`, with `t_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    levels: Vec<f64>,
}

impl TimeGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        let ok = !levels.is_empty()
            && levels[0] > 0.0
            && levels.windows(2).all(|w| w[1] > w[0])
            && levels.iter().all(|t| t.is_finite());
        if !ok {
            return Err(CoreError::Invalid(format!(
                "time grid must be positive and strictly increasing, got {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// `K` levels spaced geometrically from `t_min` to `t_max`.
    pub fn geometric(t_min: f64, t_max: f64, k: usize) -> Result<Self> {
        if k == 0 || !(t_min > 0.0) || (k > 1 && !(t_max > t_min)) {
            return Err(CoreError::Invalid(format!(
                "bad geometric grid ({t_min}, {t_max}, {k})"
            )));
        }
        if k == 1 {
            return Self::new(vec![t_min]);
        }
        let ratio = (t_max / t_min).ln() / (k - 1) as f64;
        let mut levels: Vec<f64> = (0..k).map(|i| t_min * (ratio * i as f64).exp()).collect();
        levels[k - 1] = t_max;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `t_{i−1}`, with `t_0 = 0`.
    pub fn previous(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.levels[i - 1]
        }
    }

    /// `δ_i = t_i − t_{i−1}`.
    pub fn delta(&self, i: usize) -> f64 {
        self.levels[i] - self.previous(i)
    }
}

/// Coefficients `(½Ḡ², 1/δ)` of the one-step loss at level `i`.
pub fn time_level_coefficients(grid: &TimeGrid, sched: &VeSchedule, level: usize) -> Result<(f64, f64)> {
    let (t0, t1) = (grid.previous(level), grid.levels()[level]);
    Ok((0.5 * mean_g_sq(sched, t0, t1)?, 1.0 / (t1 - t0)))
}

/// Draws the base and perturbed batches for level `i`: `x0` diffused to
/// `t_{i−1}`, then the extra variance `Σ(t_i) − Σ(t_{i−1})` on top.
pub fn time_level_pair<R: Rng + ?Sized>(
    x0: &Tensor,
    grid: &TimeGrid,
    sched: &VeSchedule,
    level: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (t0, t1) = (grid.previous(level), grid.levels()[level]);
    let base = sched.perturb(x0, t0, rng)?;
    let extra = sched.sigma2(t1)? - sched.sigma2(t0)?;
    let pert = add_noise(&base, extra, rng);
    Ok((base, pert))
}

/// The one-step DCD loss on the slice `f_θ(·, t_i)` for a given level.
pub fn dcd_ve_time_level_loss<R: Rng + ?Sized>(
    model: &TimeEbm,
    x0: &Tensor,
    grid: &TimeGrid,
    level: usize,
    sched: &VeSchedule,
    mode: LaplacianMode,
    rng: &mut R,
) -> Result<LossValue> {
    if level >= grid.len() {
        return Err(CoreError::Invalid(format!("level {level} outside grid of {}", grid.len())));
    }
    let slice = model.at(grid.levels()[level]);
    check_input(&slice, x0)?;
    let (c1, c2) = time_level_coefficients(grid, sched, level)?;
    let (base, pert) = time_level_pair(x0, grid, sched, level, rng)?;
    let program = LossProgram::dcd(&slice, x0.rows(), c1, c2, mode, true)?;
    program.evaluate(model.net().params(), &[&base, &pert], rng)
}

/// Picks a level uniformly and applies [`dcd_ve_time_level_loss`].
pub fn dcd_ve_time_loss<R: Rng + ?Sized>(
    model: &TimeEbm,
    x0: &Tensor,
    grid: &TimeGrid,
    sched: &VeSchedule,
    mode: LaplacianMode,
    rng: &mut R,
) -> Result<(usize, LossValue)> {
    let level = rng.gen_range(0..grid.len());
    let loss = dcd_ve_time_level_loss(model, x0, grid, level, sched, mode, rng)?;
    Ok((level, loss))
}
