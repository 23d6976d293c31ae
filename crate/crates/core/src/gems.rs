//! The multi-subspace controller.
//!
//! Per step and per 2-D layer:
//!
//! ```text
//! G_src, G_rec        task gradients (mean loss over each task's samples)
//! G_shared            G_src + G_rec
//! Δ_shared, Δ_src, Δ_rec   three subspace Adam steps (ranks r, ⌈r/2⌉, ⌈r/2⌉)
//! α = softmax(MLP(z) / τ)  z = [s_loss, s_grad, s_sample]
//! Δ_fused  = Δ_shared + α_src Δ_src + α_rec Δ_rec
//! Δ_final  = Δ_fused · P          (when a knowledge projector is configured)
//! W       += Δ_final
//! ```
//!
//! The ablation variants swap pieces of this pipeline out; see [`Variant`].

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GemsError, Result};
use crate::linalg::{flat_cosine, Matrix};
use crate::nullspace::{project_update, KnowledgeProjector};
use crate::rng::{SeedStreams, StreamRng};
use crate::subspace::{AdamHyper, DenseAdam, SubspaceConfig, SubspaceKind, SubspaceState};

/// Guards the ratios in the gate features.
pub const GATE_EPS: f64 = 1e-12;

/// A model whose 2-D weights can be tuned by the controller.
pub trait TunableModel: Clone {
    type Sample;
    fn weights(&self) -> &[Matrix];
    fn weights_mut(&mut self) -> &mut [Matrix];
    fn layer_names(&self) -> &[String];
    /// Summed loss and summed gradients over `samples`.
    fn loss_and_grad_sum(&self, samples: &[Self::Sample]) -> Result<(f64, Vec<Matrix>)>;
    /// Summed loss over `samples`.
    fn loss_sum(&self, samples: &[Self::Sample]) -> Result<f64>;
}

/// A mixed mini-batch, already partitioned by task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub src: Vec<S>,
    pub rec: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskBatchStats {
    pub loss_src: f64,
    pub loss_rec: f64,
    pub gradnorm_src: f64,
    pub gradnorm_rec: f64,
    pub count_src: usize,
    pub count_rec: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub src: Vec<Matrix>,
    pub rec: Vec<Matrix>,
    pub stats: TaskBatchStats,
}

fn mean_loss_and_grads<M: TunableModel>(model: &M, samples: &[M::Sample]) -> Result<(f64, Vec<Matrix>)> {
    if samples.is_empty() {
        let zeros = model
            .weights()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        return Ok((0.0, zeros));
    }
    let (loss, mut grads) = model.loss_and_grad_sum(samples)?;
    let inv = 1.0 / samples.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    Ok((loss * inv, grads))
}

fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Two backward passes: one over each task's samples. An absent task gets
/// zero loss and zero gradients.
pub fn task_gradients<M: TunableModel>(model: &M, batch: &Batch<M::Sample>) -> Result<TaskGradients> {
    if batch.src.is_empty() && batch.rec.is_empty() {
        return Err(GemsError::Empty("training batch".into()));
    }
    let (loss_src, src) = mean_loss_and_grads(model, &batch.src)?;
    let (loss_rec, rec) = mean_loss_and_grads(model, &batch.rec)?;
    for (i, (a, b)) in src.iter().zip(&rec).enumerate() {
        a.check_finite(&format!("src gradient of {}", model.layer_names()[i]))?;
        b.check_finite(&format!("rec gradient of {}", model.layer_names()[i]))?;
    }
    if !loss_src.is_finite() || !loss_rec.is_finite() {
        return Err(GemsError::Numeric(format!("non-finite task loss ({loss_src}, {loss_rec})")));
    }
    let stats = TaskBatchStats {
        loss_src,
        loss_rec,
        gradnorm_src: global_norm(&src),
        gradnorm_rec: global_norm(&rec),
        count_src: batch.src.len(),
        count_rec: batch.rec.len(),
    };
    Ok(TaskGradients { src, rec, stats })
}

/// Gradient of the summed loss, by linearity.
pub fn shared_gradient(g_src: &[Matrix], g_rec: &[Matrix]) -> Result<Vec<Matrix>> {
    if g_src.len() != g_rec.len() {
        return Err(GemsError::InvalidArgument("task gradients cover different layer counts".into()));
    }
    g_src.iter().zip(g_rec).map(|(a, b)| a.add(b)).collect()
}

/// `z = [s_loss, s_grad, s_sample]`.
pub fn gate_features(stats: &TaskBatchStats) -> [f64; 3] {
    let total = (stats.count_src + stats.count_rec).max(1) as f64;
    [
        stats.loss_src / (stats.loss_src + stats.loss_rec + GATE_EPS),
        stats.gradnorm_src / (stats.gradnorm_src + stats.gradnorm_rec + GATE_EPS),
        stats.count_src as f64 / total,
    ]
}

fn softmax2(o: [f64; 2], temperature: f64) -> [f64; 2] {
    let a = o[0] / temperature;
    let b = o[1] / temperature;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    [ea / s, eb / s]
}

/// `α = softmax((W2 ReLU(W1 z + b1) + b2) / τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub temperature: f64,
}

/// Intermediate values of one gate evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutput {
    pub logits: [f64; 2],
    pub alpha: [f64; 2],
}

impl GatingNet {
    pub fn zeros(hidden: usize, temperature: f64) -> Result<Self> {
        if hidden == 0 {
            return Err(GemsError::Config("gate hidden width must be positive".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(GemsError::Config(format!("gate temperature must be positive, got {temperature}")));
        }
        Ok(GatingNet {
            w1: Matrix::zeros(hidden, 3),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(2, hidden),
            b2: vec![0.0; 2],
            temperature,
        })
    }

    /// Gaussian weights (fan-in scaled), zero biases.
    pub fn random(hidden: usize, temperature: f64, rng: &mut StreamRng) -> Result<Self> {
        let mut net = GatingNet::zeros(hidden, temperature)?;
        let n1 = Normal::new(0.0, 1.0 / 3f64.sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("positive std");
        net.w1.as_mut_slice().iter_mut().for_each(|x| *x = n1.sample(rng));
        net.w2.as_mut_slice().iter_mut().for_each(|x| *x = n2.sample(rng));
        Ok(net)
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn hidden_pre(&self, z: &[f64; 3]) -> Vec<f64> {
        (0..self.hidden())
            .map(|i| self.b1[i] + self.w1.row(i).iter().zip(z).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn forward(&self, z: &[f64; 3]) -> GateOutput {
        let h: Vec<f64> = self.hidden_pre(z).into_iter().map(|v| v.max(0.0)).collect();
        let mut logits = [0.0; 2];
        for (k, o) in logits.iter_mut().enumerate() {
            *o = self.b2[k] + self.w2.row(k).iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
        }
        GateOutput {
            logits,
            alpha: softmax2(logits, self.temperature),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Convenience wrapper returning `(α_src, α_rec)`.
pub fn gate_forward(net: &GatingNet, z: &[f64; 3]) -> (f64, f64) {
    let a = net.forward(z).alpha;
    (a[0], a[1])
}

/// `Δ_shared + α_src Δ_src + α_rec Δ_rec`.
pub fn fuse(delta_shared: &Matrix, delta_src: &Matrix, delta_rec: &Matrix, alpha_src: f64, alpha_rec: f64) -> Result<Matrix> {
    if alpha_src < 0.0 || alpha_rec < 0.0 || (alpha_src + alpha_rec - 1.0).abs() > 1e-9 {
        return Err(GemsError::InvalidArgument(format!(
            "gate weights ({alpha_src}, {alpha_rec}) are not on the simplex"
        )));
    }
    let mut out = delta_shared.clone();
    out.axpy(alpha_src, delta_src)?;
    out.axpy(alpha_rec, delta_rec)?;
    Ok(out)
}

/// One SPSA update of the gate parameters. `trial(α)` returns the combined
/// loss after a step fused with weights `α`; the two trials use the logits
/// perturbed by `±delta · direction`, and the resulting estimate of `dL/do`
/// is pushed back through the network for one SGD step.
pub fn gate_update(
    net: &GatingNet,
    z: &[f64; 3],
    direction: [f64; 2],
    delta: f64,
    lr: f64,
    mut trial: impl FnMut([f64; 2]) -> Result<f64>,
) -> Result<GatingNet> {
    let out = net.forward(z);
    let plus = [out.logits[0] + delta * direction[0], out.logits[1] + delta * direction[1]];
    let minus = [out.logits[0] - delta * direction[0], out.logits[1] - delta * direction[1]];
    let lp = trial(softmax2(plus, net.temperature))?;
    let lm = trial(softmax2(minus, net.temperature))?;
    let diff = lp - lm;
    if diff == 0.0 {
        return Ok(net.clone());
    }
    let coef = diff / (2.0 * delta);
    // direction entries are ±1, so 1/Δ_i = Δ_i
    let g_o = [coef * direction[0], coef * direction[1]];
    let pre = net.hidden_pre(z);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let mut next = net.clone();
    for k in 0..2 {
        next.b2[k] -= lr * g_o[k];
        for (j, &hj) in h.iter().enumerate() {
            let w = next.w2.get(k, j);
            next.w2.set(k, j, w - lr * g_o[k] * hj);
        }
    }
    for j in 0..net.hidden() {
        if pre[j] <= 0.0 {
            continue;
        }
        let dh = g_o[0] * net.w2.get(0, j) + g_o[1] * net.w2.get(1, j);
        next.b1[j] -= lr * dh;
        for (i, &zi) in z.iter().enumerate() {
            let w = next.w1.get(j, i);
            next.w1.set(j, i, w - lr * dh * zi);
        }
    }
    if !next.is_finite() {
        return Err(GemsError::Numeric("gate update produced non-finite parameters".into()));
    }
    Ok(next)
}

/// Which parts of the pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Shared + task subspaces, gate, knowledge projection.
    Full,
    /// Shared subspace with knowledge projection; no task subspaces.
    SharedOnly,
    /// Full without knowledge projection.
    NoNullspace,
    /// A single shared subspace and nothing else.
    SubspaceOnly,
    /// Full-rank Adam on the summed gradient.
    DenseJoint,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SharedOnly,
        Variant::NoNullspace,
        Variant::SubspaceOnly,
        Variant::DenseJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SharedOnly => "shared-only",
            Variant::NoNullspace => "no-nullspace",
            Variant::SubspaceOnly => "subspace-only",
            Variant::DenseJoint => "dense-joint",
        }
    }

    pub fn task_subspaces(self) -> bool {
        matches!(self, Variant::Full | Variant::NoNullspace)
    }

    pub fn uses_projection(self) -> bool {
        matches!(self, Variant::Full | Variant::SharedOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = GemsError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| GemsError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemsConfig {
    pub variant: Variant,
    pub rank: usize,
    /// Task-subspace rank; `⌈rank/2⌉` when absent.
    pub task_rank: Option<usize>,
    pub refresh_every: u64,
    pub scale: f64,
    pub adam: AdamHyper,
    pub reset_moments_on_refresh: bool,
    pub temperature: f64,
    pub gate_hidden: usize,
    pub gate_training: bool,
    pub gate_lr: f64,
    pub gate_perturbation: f64,
}

impl Default for GemsConfig {
    fn default() -> Self {
        GemsConfig {
            variant: Variant::Full,
            rank: 8,
            task_rank: None,
            refresh_every: 50,
            scale: 2.0,
            adam: AdamHyper::default(),
            reset_moments_on_refresh: false,
            temperature: 1.0,
            gate_hidden: 8,
            gate_training: false,
            gate_lr: 0.05,
            gate_perturbation: 0.1,
        }
    }
}

impl GemsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 2 {
            return Err(GemsError::Config(format!("rank must be >= 2, got {}", self.rank)));
        }
        if self.task_rank == Some(0) {
            return Err(GemsError::Config("task_rank must be positive".into()));
        }
        if self.refresh_every == 0 {
            return Err(GemsError::Config("refresh_every must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(GemsError::Config("scale must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GemsError::Config("temperature must be positive".into()));
        }
        if self.gate_hidden == 0 {
            return Err(GemsError::Config("gate_hidden must be positive".into()));
        }
        if self.gate_training && !(self.gate_lr > 0.0 && self.gate_perturbation > 0.0) {
            return Err(GemsError::Config("gate_lr and gate_perturbation must be positive".into()));
        }
        self.adam.validate()
    }

    pub fn task_rank(&self) -> usize {
        self.task_rank.unwrap_or(self.rank.div_ceil(2))
    }

    pub(crate) fn subspace(&self, rank: usize) -> SubspaceConfig {
        SubspaceConfig {
            rank,
            refresh_every: self.refresh_every,
            scale: self.scale,
            adam: self.adam,
            reset_moments_on_refresh: self.reset_moments_on_refresh,
        }
    }
}

/// Optimizer behind the shared (or only) update of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum SharedOptimizer {
    Subspace(SubspaceState),
    Dense(DenseAdam),
}

/// Per-layer optimizer state plus the per-task split of the shared first
/// moment, which attributes each applied update to the two tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTuner {
    pub name: String,
    pub shape: (usize, usize),
    pub shared: SharedOptimizer,
    pub src: Option<SubspaceState>,
    pub rec: Option<SubspaceState>,
    pub attr_src: Matrix,
    pub attr_rec: Matrix,
}

/// What one layer did in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    pub delta_shared: Matrix,
    pub delta_src: Option<Matrix>,
    pub delta_rec: Option<Matrix>,
    pub delta_final: Matrix,
    /// Task components of the applied update; they sum to `delta_final`.
    pub component_src: Matrix,
    pub component_rec: Matrix,
}

impl LayerTuner {
    pub fn new(name: &str, shape: (usize, usize), config: &GemsConfig) -> Result<Self> {
        let (m, n) = shape;
        let cap = m.min(n);
        let rank = config.rank.min(cap);
        let shared = match config.variant {
            Variant::DenseJoint => SharedOptimizer::Dense(DenseAdam::new(m, n, config.adam)?),
            _ => SharedOptimizer::Subspace(SubspaceState::new(SubspaceKind::Shared, m, n, config.subspace(rank))?),
        };
        let (src, rec) = if config.variant.task_subspaces() {
            let tr = config.task_rank().min(cap);
            (
                Some(SubspaceState::new(SubspaceKind::Src, m, n, config.subspace(tr))?),
                Some(SubspaceState::new(SubspaceKind::Rec, m, n, config.subspace(tr))?),
            )
        } else {
            (None, None)
        };
        let attr_shape = match &shared {
            SharedOptimizer::Subspace(s) => s.first_moment().shape(),
            SharedOptimizer::Dense(d) => d.first_moment().shape(),
        };
        Ok(LayerTuner {
            name: name.to_string(),
            shape,
            shared,
            src,
            rec,
            attr_src: Matrix::zeros(attr_shape.0, attr_shape.1),
            attr_rec: Matrix::zeros(attr_shape.0, attr_shape.1),
        })
    }

    /// Runs the three optimizers, fuses, projects. Mutates only `self`.
    pub fn step(
        &mut self,
        g_src: &Matrix,
        g_rec: &Matrix,
        g_shared: &Matrix,
        alpha: [f64; 2],
        projector: Option<&KnowledgeProjector>,
    ) -> Result<LayerStep> {
        let b1 = match &self.shared {
            SharedOptimizer::Subspace(s) => s.config().adam.beta1,
            SharedOptimizer::Dense(d) => d.hyper().beta1,
        };
        let (delta_shared, shared_src, shared_rec) = match &mut self.shared {
            SharedOptimizer::Subspace(s) => {
                let refreshed = s.maybe_refresh_basis(g_shared)?;
                if refreshed && s.config().reset_moments_on_refresh {
                    self.attr_src.fill(0.0);
                    self.attr_rec.fill(0.0);
                }
                let proj = s.project(g_shared)?;
                let dr = s.adam_step(&proj)?;
                let delta = s.project_back(&dr)?.delta;
                accumulate_moment(&mut self.attr_src, b1, &s.project(g_src)?);
                accumulate_moment(&mut self.attr_rec, b1, &s.project(g_rec)?);
                (delta, s.map_partial_moment(&self.attr_src)?, s.map_partial_moment(&self.attr_rec)?)
            }
            SharedOptimizer::Dense(d) => {
                let delta = d.step(g_shared)?;
                accumulate_moment(&mut self.attr_src, b1, g_src);
                accumulate_moment(&mut self.attr_rec, b1, g_rec);
                (delta, d.map_partial_moment(&self.attr_src)?, d.map_partial_moment(&self.attr_rec)?)
            }
        };
        let delta_src = self.src.as_mut().map(|s| s.step(g_src)).transpose()?.map(|u| u.delta);
        let delta_rec = self.rec.as_mut().map(|s| s.step(g_rec)).transpose()?.map(|u| u.delta);

        let (fused, mut comp_src, mut comp_rec) = match (&delta_src, &delta_rec) {
            (Some(ds), Some(dr)) => {
                let fused = fuse(&delta_shared, ds, dr, alpha[0], alpha[1])?;
                let mut cs = shared_src;
                cs.axpy(alpha[0], ds)?;
                let mut cr = shared_rec;
                cr.axpy(alpha[1], dr)?;
                (fused, cs, cr)
            }
            _ => (delta_shared.clone(), shared_src, shared_rec),
        };
        let delta_final = match projector {
            Some(p) => {
                comp_src = project_update(p, &comp_src)?;
                comp_rec = project_update(p, &comp_rec)?;
                project_update(p, &fused)?
            }
            None => fused,
        };
        delta_final.check_finite(&format!("update of layer {}", self.name))?;
        Ok(LayerStep {
            delta_shared,
            delta_src,
            delta_rec,
            delta_final,
            component_src: comp_src,
            component_rec: comp_rec,
        })
    }

    /// Live `(basis, moment)` element counts across all of this layer's subspaces.
    pub fn allocation_counts(&self) -> (usize, usize) {
        let mut basis = 0;
        let mut moments = 0;
        match &self.shared {
            SharedOptimizer::Subspace(s) => {
                let (b, m) = s.allocation_counts();
                basis += b;
                moments += m;
            }
            SharedOptimizer::Dense(d) => moments += d.first_moment().len() + d.second_moment().len(),
        }
        for s in self.src.iter().chain(self.rec.iter()) {
            let (b, m) = s.allocation_counts();
            basis += b;
            moments += m;
        }
        (basis, moments)
    }
}

fn accumulate_moment(m: &mut Matrix, beta1: f64, g: &Matrix) {
    for (a, &b) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a = beta1 * *a + (1.0 - beta1) * b;
    }
}

/// `ρ = 1 - cos(a, b)`; `None` when either operand is zero.
pub fn rho(a: &Matrix, b: &Matrix) -> Result<Option<f64>> {
    match flat_cosine(a, b) {
        Ok(c) => Ok(Some(1.0 - c)),
        Err(GemsError::DegenerateGradient(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    /// Conflict between the raw task gradients.
    pub raw_rho: Option<f64>,
    /// Conflict between the task components of the applied update.
    pub component_rho: Option<f64>,
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_src: f64,
    pub loss_rec: f64,
    pub alpha_src: f64,
    pub alpha_rec: f64,
    pub layers: Vec<LayerReport>,
    pub wall_ms: f64,
}

fn mean_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, max))
}

impl StepReport {
    pub fn raw_rho_summary(&self) -> Option<(f64, f64)> {
        mean_max(self.layers.iter().filter_map(|l| l.raw_rho))
    }

    pub fn component_rho_summary(&self) -> Option<(f64, f64)> {
        mean_max(self.layers.iter().filter_map(|l| l.component_rho))
    }

    pub const CSV_HEADER: &'static str = "step,loss_src,loss_rec,alpha_src,alpha_rec,mean_rho,max_rho,wall_ms";

    pub fn csv_row(&self) -> String {
        let (mean, max) = match self.raw_rho_summary() {
            Some((a, b)) => (format!("{a:.12e}"), format!("{b:.12e}")),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{:.3}",
            self.step, self.loss_src, self.loss_rec, self.alpha_src, self.alpha_rec, mean, max, self.wall_ms
        )
    }
}

/// Everything the controller carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GemsOptimizer {
    pub config: GemsConfig,
    pub layers: Vec<LayerTuner>,
    pub gate: GatingNet,
    pub projectors: Option<Vec<KnowledgeProjector>>,
    pub step: u64,
    /// Root seed for per-step SPSA directions.
    pub gate_seed: u64,
    /// When false, reports carry `wall_ms = 0` so logs stay byte-stable.
    pub record_wall_time: bool,
}

impl GemsOptimizer {
    pub fn new(
        config: GemsConfig,
        names: &[String],
        shapes: &[(usize, usize)],
        projectors: Option<Vec<KnowledgeProjector>>,
        seeds: &SeedStreams,
    ) -> Result<Self> {
        config.validate()?;
        if names.len() != shapes.len() {
            return Err(GemsError::InvalidArgument("layer names and shapes differ in length".into()));
        }
        let layers = names
            .iter()
            .zip(shapes)
            .map(|(n, &s)| LayerTuner::new(n, s, &config))
            .collect::<Result<Vec<_>>>()?;
        let projectors = if config.variant.uses_projection() { projectors } else { None };
        if let Some(ps) = &projectors {
            if ps.len() != layers.len() {
                return Err(GemsError::InvalidArgument(format!(
                    "{} projectors for {} layers",
                    ps.len(),
                    layers.len()
                )));
            }
            for (p, l) in ps.iter().zip(&layers) {
                if p.dim() != l.shape.1 {
                    return Err(GemsError::shape(format!("projector for {}", l.name), (l.shape.1, l.shape.1), (p.dim(), p.dim())));
                }
            }
        }
        let mut gate_rng = seeds.stream(SeedStreams::GATE);
        let gate = GatingNet::random(config.gate_hidden, config.temperature, &mut gate_rng)?;
        Ok(GemsOptimizer {
            config,
            layers,
            gate,
            projectors,
            step: 0,
            gate_seed: seeds.root(),
            record_wall_time: false,
        })
    }

    fn spsa_direction(&self) -> [f64; 2] {
        let mut rng = SeedStreams::new(self.gate_seed).stream(&format!("gate-spsa/{}", self.step));
        let mut d = [0.0; 2];
        d.iter_mut().for_each(|x| *x = if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        d
    }
}

/// One controller step. On error neither the model nor the optimizer changes.
pub fn train_step<M: TunableModel>(model: &mut M, batch: &Batch<M::Sample>, opt: &mut GemsOptimizer) -> Result<StepReport> {
    let started = Instant::now();
    if model.weights().len() != opt.layers.len() {
        return Err(GemsError::InvalidArgument("model and optimizer disagree on layer count".into()));
    }
    for (w, l) in model.weights().iter().zip(&opt.layers) {
        if w.shape() != l.shape {
            return Err(GemsError::shape(format!("layer {}", l.name), l.shape, w.shape()));
        }
    }
    let grads = task_gradients(model, batch)?;
    let g_shared = shared_gradient(&grads.src, &grads.rec)?;
    let z = gate_features(&grads.stats);
    let gate = opt.gate.forward(&z);
    let alpha = gate.alpha;

    let mut layers = opt.layers.clone();
    let mut steps = Vec::with_capacity(layers.len());
    for (i, tuner) in layers.iter_mut().enumerate() {
        let p = opt.projectors.as_ref().map(|ps| &ps[i]);
        steps.push(tuner.step(&grads.src[i], &grads.rec[i], &g_shared[i], alpha, p)?);
    }

    let mut reports = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        reports.push(LayerReport {
            raw_rho: rho(&grads.src[i], &grads.rec[i])?,
            component_rho: rho(&s.component_src, &s.component_rec)?,
            update_norm: s.delta_final.frobenius_norm(),
        });
    }

    let next_gate = if opt.config.gate_training {
        let base = model.clone();
        let projectors = opt.projectors.clone();
        let trial = |a: [f64; 2]| -> Result<f64> {
            let mut m = base.clone();
            for (i, s) in steps.iter().enumerate() {
                let fused = match (&s.delta_src, &s.delta_rec) {
                    (Some(ds), Some(dr)) => fuse(&s.delta_shared, ds, dr, a[0], a[1])?,
                    _ => s.delta_shared.clone(),
                };
                let d = match &projectors {
                    Some(ps) => project_update(&ps[i], &fused)?,
                    None => fused,
                };
                m.weights_mut()[i].axpy(1.0, &d)?;
            }
            let ls = if batch.src.is_empty() { 0.0 } else { m.loss_sum(&batch.src)? / batch.src.len() as f64 };
            let lr = if batch.rec.is_empty() { 0.0 } else { m.loss_sum(&batch.rec)? / batch.rec.len() as f64 };
            Ok(ls + lr)
        };
        Some(gate_update(
            &opt.gate,
            &z,
            opt.spsa_direction(),
            opt.config.gate_perturbation,
            opt.config.gate_lr,
            trial,
        )?)
    } else {
        None
    };

    // commit
    for (w, s) in model.weights_mut().iter_mut().zip(&steps) {
        w.axpy(1.0, &s.delta_final)?;
    }
    opt.layers = layers;
    if let Some(g) = next_gate {
        opt.gate = g;
    }
    let report = StepReport {
        step: opt.step,
        loss_src: grads.stats.loss_src,
        loss_rec: grads.stats.loss_rec,
        alpha_src: alpha[0],
        alpha_rec: alpha[1],
        layers: reports,
        wall_ms: if opt.record_wall_time {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    };
    opt.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nullspace::{build_projector, ProjectionMode, RankSelect};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two linear layers, squared loss: `L = ½‖W2 W1 x − y‖²`.
    #[derive(Debug, Clone)]
    struct Linear2 {
        w: Vec<Matrix>,
        names: Vec<String>,
    }

    type Pair = (Vec<f64>, Vec<f64>);

    impl Linear2 {
        fn new(seed: u64, d: usize) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = || Matrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
            Linear2 {
                w: vec![m(), m()],
                names: vec!["l0".into(), "l1".into()],
            }
        }
        fn loss_grad(&self, (x, y): &Pair) -> (f64, Vec<Matrix>) {
            let xm = Matrix::column_vector(x).unwrap();
            let h = self.w[0].matmul(&xm).unwrap();
            let out = self.w[1].matmul(&h).unwrap();
            let r = out.sub(&Matrix::column_vector(y).unwrap()).unwrap();
            let loss = 0.5 * r.frobenius_norm().powi(2);
            let g1 = r.matmul_t(&h).unwrap();
            let dh = self.w[1].t_matmul(&r).unwrap();
            let g0 = dh.matmul_t(&xm).unwrap();
            (loss, vec![g0, g1])
        }
    }

    impl TunableModel for Linear2 {
        type Sample = Pair;
        fn weights(&self) -> &[Matrix] {
            &self.w
        }
        fn weights_mut(&mut self) -> &mut [Matrix] {
            &mut self.w
        }
        fn layer_names(&self) -> &[String] {
            &self.names
        }
        fn loss_and_grad_sum(&self, samples: &[Pair]) -> Result<(f64, Vec<Matrix>)> {
            let mut total = 0.0;
            let mut acc: Vec<Matrix> = self.w.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
            for s in samples {
                let (l, g) = self.loss_grad(s);
                total += l;
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.axpy(1.0, b).unwrap();
                }
            }
            Ok((total, acc))
        }
        fn loss_sum(&self, samples: &[Pair]) -> Result<f64> {
            Ok(samples.iter().map(|s| self.loss_grad(s).0).sum())
        }
    }

    fn sample(seed: u64, d: usize) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn optimizer(model: &Linear2, config: GemsConfig, projectors: Option<Vec<KnowledgeProjector>>) -> GemsOptimizer {
        let shapes: Vec<_> = model.w.iter().map(|w| w.shape()).collect();
        GemsOptimizer::new(config, &model.names, &shapes, projectors, &SeedStreams::new(1)).unwrap()
    }

    #[test]
    fn gate_feature_closed_forms() {
        let eq = TaskBatchStats {
            loss_src: 1.0,
            loss_rec: 1.0,
            gradnorm_src: 2.0,
            gradnorm_rec: 2.0,
            count_src: 3,
            count_rec: 3,
        };
        assert!(gate_features(&eq).iter().all(|v| (v - 0.5).abs() < 1e-9));
        let rec_only = TaskBatchStats {
            loss_rec: 1.3,
            gradnorm_rec: 0.4,
            count_rec: 4,
            ..Default::default()
        };
        assert_eq!(gate_features(&rec_only), [0.0, 0.0, 0.0]);
        let z = gate_features(&TaskBatchStats {
            loss_src: 2.0,
            loss_rec: 1.0,
            gradnorm_src: 3.0,
            gradnorm_rec: 1.0,
            count_src: 1,
            count_rec: 3,
        });
        assert!((z[0] - 2.0 / 3.0).abs() < 1e-12 && (z[1] - 0.75).abs() < 1e-12 && z[2] == 0.25);
    }

    #[test]
    fn gate_forward_closed_forms() {
        for tau in [0.1, 0.5, 1.0, 2.0, 3.0] {
            let net = GatingNet::zeros(8, tau).unwrap();
            assert_eq!(gate_forward(&net, &[0.3, 0.9, 0.1]), (0.5, 0.5));
        }
        let mut net = GatingNet::zeros(8, 1.0).unwrap();
        net.b2 = vec![2f64.ln(), 0.0];
        let (a, b) = gate_forward(&net, &[0.2, 0.2, 0.2]);
        assert!((a - 2.0 / 3.0).abs() < 1e-12 && (b - 1.0 / 3.0).abs() < 1e-12);
        let hot = GatingNet::random(8, 100.0, &mut SeedStreams::new(4).stream("g")).unwrap();
        let (a, b) = gate_forward(&hot, &[1.0, 0.0, 0.5]);
        assert!((a - 0.5).abs() < 0.01 && (b - 0.5).abs() < 0.01);
        assert!(GatingNet::zeros(8, 0.0).is_err());
    }

    #[test]
    fn fuse_linearity_and_shared_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = || Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let (a, b, c) = (r(), r(), r());
        let z = Matrix::zeros(3, 4);
        assert_eq!(fuse(&a, &b, &c, 1.0, 0.0).unwrap(), a.add(&b).unwrap());
        assert_eq!(fuse(&z, &z, &z, 0.3, 0.7).unwrap(), z);
        let f = fuse(&a, &b, &c, 0.5, 0.5).unwrap();
        for i in 0..12 {
            let e = a.as_slice()[i] + 0.5 * b.as_slice()[i] + 0.5 * c.as_slice()[i];
            assert!((f.as_slice()[i] - e).abs() < 1e-15);
        }
        assert_eq!(fuse(&a, &z, &z, 0.37, 0.63).unwrap(), a);
        assert!(fuse(&a, &b, &c, 0.7, 0.7).is_err());
    }

    #[test]
    fn absent_task_and_shared_gradient() {
        let m = Linear2::new(1, 4);
        let batch = Batch {
            src: vec![],
            rec: vec![sample(2, 4)],
        };
        let g = task_gradients(&m, &batch).unwrap();
        assert_eq!(g.stats.count_src, 0);
        assert!(g.src.iter().all(|x| x.max_abs() == 0.0));
        let shared = shared_gradient(&g.src, &g.rec).unwrap();
        assert_eq!(shared, g.rec);
        let neg: Vec<Matrix> = g.rec.iter().map(|x| x.scale(-1.0)).collect();
        assert!(shared_gradient(&neg, &g.rec).unwrap().iter().all(|x| x.max_abs() == 0.0));
        assert!(task_gradients(&m, &Batch { src: vec![], rec: vec![] }).is_err());
    }

    #[test]
    fn identical_tasks_collapse() {
        let m = Linear2::new(5, 4);
        let s = sample(6, 4);
        let g = task_gradients(
            &m,
            &Batch {
                src: vec![s.clone()],
                rec: vec![s.clone()],
            },
        )
        .unwrap();
        assert_eq!(g.src, g.rec);
        let shared = shared_gradient(&g.src, &g.rec).unwrap();
        for (a, b) in shared.iter().zip(&g.src) {
            assert!(a.sub(&b.scale(2.0)).unwrap().frobenius_norm() < 1e-10);
        }
        let (one_pass_loss, one_pass) = m.loss_and_grad_sum(&[s.clone(), s]).unwrap();
        assert!((one_pass_loss - 2.0 * g.stats.loss_src).abs() < 1e-12);
        for (a, b) in shared.iter().zip(&one_pass) {
            assert!(a.sub(b).unwrap().frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn symmetric_batches_give_symmetric_updates() {
        let mut m = Linear2::new(7, 4);
        let s = sample(8, 4);
        let mut config = GemsConfig {
            rank: 2,
            ..GemsConfig::default()
        };
        config.variant = Variant::NoNullspace;
        let mut opt = optimizer(&m, config, None);
        opt.gate = GatingNet::zeros(8, 1.0).unwrap();
        let batch = Batch {
            src: vec![s.clone()],
            rec: vec![s],
        };
        let before = opt.clone();
        let r = train_step(&mut m, &batch, &mut opt).unwrap();
        assert_eq!((r.alpha_src, r.alpha_rec), (0.5, 0.5));
        let mut probe = before.layers[0].clone();
        let g = task_gradients(&Linear2::new(7, 4), &batch).unwrap();
        let shared = shared_gradient(&g.src, &g.rec).unwrap();
        let st = probe.step(&g.src[0], &g.rec[0], &shared[0], [0.5, 0.5], None).unwrap();
        assert_eq!(st.delta_src, st.delta_rec);
    }

    #[test]
    fn full_complement_projector_freezes_weights() {
        let mut m = Linear2::new(9, 4);
        let f = Matrix::identity(4);
        let ps: Vec<_> = (0..2)
            .map(|_| build_projector(&f, RankSelect::Explicit(4), ProjectionMode::Complement, "l").unwrap())
            .collect();
        let mut opt = optimizer(&m, GemsConfig { rank: 2, ..GemsConfig::default() }, Some(ps));
        let before = m.w.clone();
        let batch = Batch {
            src: vec![sample(10, 4)],
            rec: vec![sample(11, 4)],
        };
        for _ in 0..3 {
            train_step(&mut m, &batch, &mut opt).unwrap();
        }
        for (a, b) in m.w.iter().zip(&before) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn components_sum_to_applied_update() {
        for variant in Variant::ALL {
            let mut m = Linear2::new(12, 4);
            let mut opt = optimizer(
                &m,
                GemsConfig {
                    rank: 2,
                    refresh_every: 3,
                    variant,
                    ..GemsConfig::default()
                },
                None,
            );
            for step in 0..7 {
                let batch = Batch {
                    src: vec![sample(100 + step, 4)],
                    rec: vec![sample(200 + step, 4)],
                };
                let mut probe = opt.layers.clone();
                let g = task_gradients(&m, &batch).unwrap();
                let shared = shared_gradient(&g.src, &g.rec).unwrap();
                let alpha = opt.gate.forward(&gate_features(&g.stats)).alpha;
                let st = probe[1].step(&g.src[1], &g.rec[1], &shared[1], alpha, None).unwrap();
                let sum = st.component_src.add(&st.component_rec).unwrap();
                assert!(
                    sum.sub(&st.delta_final).unwrap().frobenius_norm() <= 1e-12 * st.delta_final.frobenius_norm().max(1e-30) + 1e-18,
                    "{variant:?}"
                );
                train_step(&mut m, &batch, &mut opt).unwrap();
            }
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut m = Linear2::new(13, 4);
        let mut opt = optimizer(&m, GemsConfig { rank: 2, ..GemsConfig::default() }, None);
        let bad = (vec![1e300; 4], vec![0.0; 4]);
        let (w0, o0) = (m.w.clone(), opt.clone());
        let r = train_step(
            &mut m,
            &Batch {
                src: vec![bad],
                rec: vec![],
            },
            &mut opt,
        );
        assert!(r.is_err());
        assert_eq!(m.w.len(), w0.len());
        for (a, b) in m.w.iter().zip(&w0) {
            assert_eq!(a, b);
        }
        assert_eq!(opt, o0);
    }

    #[test]
    fn spsa_moves_alpha_toward_lower_loss() {
        let mut net = GatingNet::random(8, 1.0, &mut SeedStreams::new(2).stream("g")).unwrap();
        let z = [0.4, 0.6, 0.5];
        // two-quadratic problem: loss falls as α_src grows
        let trial = |a: [f64; 2]| Ok((a[0] - 1.0).powi(2) + 0.5 * a[1].powi(2));
        let start = gate_forward(&net, &z).0;
        let mut prev = start;
        for step in 0..50u64 {
            let mut rng = SeedStreams::new(3).stream(&format!("d{step}"));
            let d = [if rng.random_bool(0.5) { 1.0 } else { -1.0 }, if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
            net = gate_update(&net, &z, d, 0.05, 0.5, trial).unwrap();
            let a = gate_forward(&net, &z).0;
            assert!(a >= prev - 1e-12);
            prev = a;
        }
        assert!(prev > start);
        let same = gate_update(&net, &z, [1.0, -1.0], 0.1, 1.0, |_| Ok(3.0)).unwrap();
        assert_eq!(same, net);
    }

    #[test]
    fn frozen_gate_is_bit_identical() {
        let mut m = Linear2::new(14, 4);
        let mut opt = optimizer(&m, GemsConfig { rank: 2, ..GemsConfig::default() }, None);
        let g0 = opt.gate.clone();
        for step in 0..5 {
            let batch = Batch {
                src: vec![sample(300 + step, 4)],
                rec: vec![sample(400 + step, 4)],
            };
            let r = train_step(&mut m, &batch, &mut opt).unwrap();
            assert!((r.alpha_src + r.alpha_rec - 1.0).abs() <= 1e-9);
        }
        assert_eq!(opt.gate, g0);
    }
}
