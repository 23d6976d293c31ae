//! Low-rank Adam on a single weight matrix.
//!
//! A [`SubspaceState`] owns an orthonormal basis `U_r` (refreshed from the
//! gradient's top-`r` left singular vectors every `refresh_every` steps) and
//! Adam moments kept in subspace coordinates. One call to
//! [`SubspaceState::step`] turns a raw loss gradient into a full-space update:
//!
//! ```text
//! refresh?  U_r <- top-r left singular vectors of G
//! project   R   = U_rᵀ G
//! adam      M   = b1 M + (1-b1) R ;  V = b2 V + (1-b2) R⊙R
//!           D_r = -lr * (M / (1-b1^t)) / (sqrt(V / (1-b2^t)) + eps)
//! map back  D   = scale * U_r D_r
//! ```
//!
//! Gradients enter as `∇L` (not `-∇L`); the single negation lives in the
//! Adam step, so returned updates descend the loss.
//!
//! Layers taller than they are wide (`m > n`) are handled in transposed
//! orientation, so the basis always lives on the smaller side and the state
//! size is `min(m,n)·r` for the basis plus `2·r·max(m,n)` for the moments.

use serde::{Deserialize, Serialize};

use crate::error::{GemsError, Result};
use crate::linalg::{truncated_basis, Matrix};

/// Which of the three subspaces a state or update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceKind {
    Shared,
    Src,
    Rec,
}

impl SubspaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubspaceKind::Shared => "shared",
            SubspaceKind::Src => "src",
            SubspaceKind::Rec => "rec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GemsError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GemsError::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(GemsError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Preconditioned, bias-corrected Adam direction for step count `t >= 1`:
    /// `-lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
    #[inline]
    pub fn direction(&self, m: f64, v: f64, t: u64) -> f64 {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        -self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps)
    }
}

/// Per-subspace hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceConfig {
    pub rank: usize,
    pub refresh_every: u64,
    pub scale: f64,
    pub adam: AdamHyper,
    pub reset_moments_on_refresh: bool,
}

/// A full-space update produced by one subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceUpdate {
    pub delta: Matrix,
    pub source: SubspaceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceState {
    kind: SubspaceKind,
    layer_shape: (usize, usize),
    transposed: bool,
    basis: Matrix,
    m1: Matrix,
    m2: Matrix,
    step: u64,
    config: SubspaceConfig,
    basis_frozen: bool,
}

impl SubspaceState {
    /// Fresh state for a `rows x cols` layer. The basis is a placeholder until
    /// the first refresh at step 0.
    pub fn new(kind: SubspaceKind, rows: usize, cols: usize, config: SubspaceConfig) -> Result<Self> {
        let max = rows.min(cols);
        if config.rank == 0 || config.rank > max {
            return Err(GemsError::RankOutOfRange { rank: config.rank, max });
        }
        if config.refresh_every == 0 {
            return Err(GemsError::Config("refresh_every must be positive".into()));
        }
        if !(config.scale > 0.0 && config.scale.is_finite()) {
            return Err(GemsError::Config(format!("scale must be positive, got {}", config.scale)));
        }
        config.adam.validate()?;
        let transposed = rows > cols;
        let (m, n) = if transposed { (cols, rows) } else { (rows, cols) };
        let r = config.rank;
        Ok(SubspaceState {
            kind,
            layer_shape: (rows, cols),
            transposed,
            basis: Matrix::eye_columns(m, r),
            m1: Matrix::zeros(r, n),
            m2: Matrix::zeros(r, n),
            step: 0,
            config,
            basis_frozen: false,
        })
    }

    /// Reassembles a state from serialized parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: SubspaceKind,
        layer_shape: (usize, usize),
        basis: Matrix,
        m1: Matrix,
        m2: Matrix,
        step: u64,
        config: SubspaceConfig,
        basis_frozen: bool,
    ) -> Result<Self> {
        let mut s = SubspaceState::new(kind, layer_shape.0, layer_shape.1, config)?;
        if basis.shape() != s.basis.shape() {
            return Err(GemsError::shape("subspace basis", s.basis.shape(), basis.shape()));
        }
        if m1.shape() != s.m1.shape() || m2.shape() != s.m2.shape() {
            return Err(GemsError::shape("subspace moments", s.m1.shape(), m1.shape()));
        }
        if m2.as_slice().iter().any(|&v| v < 0.0) {
            return Err(GemsError::Format("negative second moment".into()));
        }
        s.basis = basis;
        s.m1 = m1;
        s.m2 = m2;
        s.step = step;
        s.basis_frozen = basis_frozen;
        Ok(s)
    }

    /// Pins the basis (e.g. to identity columns) and disables refreshes.
    pub fn with_fixed_basis(mut self, basis: Matrix) -> Result<Self> {
        if basis.shape() != self.basis.shape() {
            return Err(GemsError::shape("fixed basis", self.basis.shape(), basis.shape()));
        }
        let gram = basis.t_matmul(&basis)?;
        if gram.sub(&Matrix::identity(basis.cols()))?.frobenius_norm() > 1e-8 {
            return Err(GemsError::InvalidArgument("fixed basis is not orthonormal".into()));
        }
        self.basis = basis;
        self.basis_frozen = true;
        Ok(self)
    }

    pub fn kind(&self) -> SubspaceKind {
        self.kind
    }
    pub fn layer_shape(&self) -> (usize, usize) {
        self.layer_shape
    }
    pub fn is_transposed(&self) -> bool {
        self.transposed
    }
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }
    pub fn first_moment(&self) -> &Matrix {
        &self.m1
    }
    pub fn second_moment(&self) -> &Matrix {
        &self.m2
    }
    pub fn step_count(&self) -> u64 {
        self.step
    }
    pub fn config(&self) -> &SubspaceConfig {
        &self.config
    }
    pub fn rank(&self) -> usize {
        self.config.rank
    }
    pub fn basis_frozen(&self) -> bool {
        self.basis_frozen
    }

    /// Element counts of the live allocations: `(basis, moments)`.
    pub fn allocation_counts(&self) -> (usize, usize) {
        (self.basis.len(), self.m1.len() + self.m2.len())
    }

    fn oriented(&self, g: &Matrix) -> Result<Matrix> {
        if g.shape() != self.layer_shape {
            return Err(GemsError::shape(
                format!("{} subspace gradient", self.kind.as_str()),
                self.layer_shape,
                g.shape(),
            ));
        }
        Ok(if self.transposed { g.transpose() } else { g.clone() })
    }

    /// True when the next adam step will be preceded by a basis refresh.
    pub fn refresh_due(&self) -> bool {
        !self.basis_frozen && self.step % self.config.refresh_every == 0
    }

    /// Replaces the basis with the gradient's top-`r` left singular vectors
    /// when `step ≡ 0 (mod refresh_every)`. Returns whether it refreshed.
    pub fn maybe_refresh_basis(&mut self, g: &Matrix) -> Result<bool> {
        let oriented = self.oriented(g)?;
        if !self.refresh_due() {
            return Ok(false);
        }
        self.basis = truncated_basis(&oriented, self.config.rank)?;
        if self.config.reset_moments_on_refresh {
            self.m1.fill(0.0);
            self.m2.fill(0.0);
        }
        Ok(true)
    }

    /// `U_rᵀ G` (in the state's orientation).
    pub fn project(&self, g: &Matrix) -> Result<Matrix> {
        let oriented = self.oriented(g)?;
        self.basis.t_matmul(&oriented)
    }

    /// One Adam update in subspace coordinates; increments the step counter.
    pub fn adam_step(&mut self, g_proj: &Matrix) -> Result<Matrix> {
        if g_proj.shape() != self.m1.shape() {
            return Err(GemsError::shape("adam_step", self.m1.shape(), g_proj.shape()));
        }
        let h = self.config.adam;
        let t = self.step + 1;
        let mut out = Matrix::zeros(g_proj.rows(), g_proj.cols());
        let m1 = self.m1.as_mut_slice();
        let m2 = self.m2.as_mut_slice();
        for (i, (&g, o)) in g_proj.as_slice().iter().zip(out.as_mut_slice()).enumerate() {
            m1[i] = h.beta1 * m1[i] + (1.0 - h.beta1) * g;
            m2[i] = h.beta2 * m2[i] + (1.0 - h.beta2) * (g * g);
            *o = h.direction(m1[i], m2[i], t);
        }
        self.step = t;
        Ok(out)
    }

    /// `scale * U_r * delta_r`, returned in the layer's own orientation.
    pub fn project_back(&self, delta_r: &Matrix) -> Result<SubspaceUpdate> {
        let mut delta = self.basis.matmul(delta_r)?;
        delta.scale_in_place(self.config.scale);
        if self.transposed {
            delta = delta.transpose();
        }
        Ok(SubspaceUpdate {
            delta,
            source: self.kind,
        })
    }

    /// Refresh, project, Adam, map back.
    pub fn step(&mut self, g: &Matrix) -> Result<SubspaceUpdate> {
        self.maybe_refresh_basis(g)?;
        let proj = self.project(g)?;
        let delta_r = self.adam_step(&proj)?;
        self.project_back(&delta_r)
    }

    /// Maps a partial first moment through the current preconditioner and
    /// basis: `scale * U_r * direction(m_part, V, step)`. Summing this over a
    /// partition of the first moment reproduces the last update exactly, up
    /// to rounding; used to attribute updates to tasks.
    pub fn map_partial_moment(&self, m_part: &Matrix) -> Result<Matrix> {
        if m_part.shape() != self.m1.shape() {
            return Err(GemsError::shape("partial moment", self.m1.shape(), m_part.shape()));
        }
        if self.step == 0 {
            return Ok(Matrix::zeros(self.layer_shape.0, self.layer_shape.1));
        }
        let h = self.config.adam;
        let dir = Matrix::from_vec_unchecked(
            m_part.rows(),
            m_part.cols(),
            m_part
                .as_slice()
                .iter()
                .zip(self.m2.as_slice())
                .map(|(&m, &v)| h.direction(m, v, self.step))
                .collect(),
        );
        Ok(self.project_back(&dir)?.delta)
    }
}

/// Plain full-matrix Adam with the same update rule, for the dense-joint
/// baseline and for parameters that do not go through a subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdam {
    m1: Matrix,
    m2: Matrix,
    step: u64,
    hyper: AdamHyper,
}

impl DenseAdam {
    pub fn new(rows: usize, cols: usize, hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(DenseAdam {
            m1: Matrix::zeros(rows, cols),
            m2: Matrix::zeros(rows, cols),
            step: 0,
            hyper,
        })
    }

    pub fn from_parts(m1: Matrix, m2: Matrix, step: u64, hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        if m1.shape() != m2.shape() {
            return Err(GemsError::shape("dense adam moments", m1.shape(), m2.shape()));
        }
        Ok(DenseAdam { m1, m2, step, hyper })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
    pub fn first_moment(&self) -> &Matrix {
        &self.m1
    }
    pub fn second_moment(&self) -> &Matrix {
        &self.m2
    }
    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    /// Returns the update to add to the weights.
    pub fn step(&mut self, g: &Matrix) -> Result<Matrix> {
        if g.shape() != self.m1.shape() {
            return Err(GemsError::shape("dense adam", self.m1.shape(), g.shape()));
        }
        let h = self.hyper;
        let t = self.step + 1;
        let mut out = Matrix::zeros(g.rows(), g.cols());
        let m1 = self.m1.as_mut_slice();
        let m2 = self.m2.as_mut_slice();
        for (i, (&gi, o)) in g.as_slice().iter().zip(out.as_mut_slice()).enumerate() {
            m1[i] = h.beta1 * m1[i] + (1.0 - h.beta1) * gi;
            m2[i] = h.beta2 * m2[i] + (1.0 - h.beta2) * (gi * gi);
            *o = h.direction(m1[i], m2[i], t);
        }
        self.step = t;
        Ok(out)
    }

    /// Same attribution hook as [`SubspaceState::map_partial_moment`].
    pub fn map_partial_moment(&self, m_part: &Matrix) -> Result<Matrix> {
        if m_part.shape() != self.m1.shape() {
            return Err(GemsError::shape("partial moment", self.m1.shape(), m_part.shape()));
        }
        if self.step == 0 {
            return Ok(Matrix::zeros(m_part.rows(), m_part.cols()));
        }
        let h = self.hyper;
        Ok(Matrix::from_vec_unchecked(
            m_part.rows(),
            m_part.cols(),
            m_part
                .as_slice()
                .iter()
                .zip(self.m2.as_slice())
                .map(|(&m, &v)| h.direction(m, v, self.step))
                .collect(),
        ))
    }
}
