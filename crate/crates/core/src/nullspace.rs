//! Knowledge-preserving projection of updates.
//!
//! Hidden states from a probe corpus form a feature matrix `F` (`n x C`, one
//! column per probe instance) for each layer's input. The top-`k` left
//! singular vectors of `F Fᵀ` span the dominant pre-trained input directions
//! `U_k`, and updates are right-multiplied by a projector built from them:
//!
//! * `complement`: `P = I - U_k U_kᵀ`, so `Δ P U_k = 0` and protected input
//!   directions see unchanged layer outputs;
//! * `literal`: `P = U_k U_kᵀ`, kept for comparison.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GemsError, Result};
use crate::harness::model::ToyModel;
use crate::linalg::{covariance, dot, read_matrix, svd, write_matrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Complement,
    Literal,
}

/// How many principal directions to protect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSelect {
    Explicit(usize),
    /// Smallest `k` whose leading eigenvalues of `F Fᵀ` reach this share of the total.
    Energy(f64),
}

impl Default for RankSelect {
    fn default() -> Self {
        RankSelect::Energy(0.9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeProjector {
    layer: String,
    basis_k: Matrix,
    mode: ProjectionMode,
    projector: Matrix,
    energy_fraction: Option<f64>,
}

/// JSON sidecar written next to the persisted basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSidecar {
    pub mode: ProjectionMode,
    pub k: usize,
    pub energy_fraction: Option<f64>,
    pub layer: String,
}

impl KnowledgeProjector {
    /// Builds the cached projector from an orthonormal `n x k` basis.
    pub fn from_basis(layer: impl Into<String>, basis_k: Matrix, mode: ProjectionMode, energy_fraction: Option<f64>) -> Self {
        let n = basis_k.rows();
        let onto = if basis_k.cols() == 0 {
            Matrix::zeros(n, n)
        } else {
            basis_k.outer_projector()
        };
        let projector = match mode {
            ProjectionMode::Literal => onto,
            ProjectionMode::Complement => Matrix::identity(n).sub(&onto).expect("square projector"),
        };
        KnowledgeProjector {
            layer: layer.into(),
            basis_k,
            mode,
            projector,
            energy_fraction,
        }
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }
    pub fn basis(&self) -> &Matrix {
        &self.basis_k
    }
    pub fn k(&self) -> usize {
        self.basis_k.cols()
    }
    pub fn dim(&self) -> usize {
        self.basis_k.rows()
    }
    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }
    pub fn matrix(&self) -> &Matrix {
        &self.projector
    }
    pub fn energy_fraction(&self) -> Option<f64> {
        self.energy_fraction
    }

    pub fn sidecar(&self) -> ProjectorSidecar {
        ProjectorSidecar {
            mode: self.mode,
            k: self.k(),
            energy_fraction: self.energy_fraction,
            layer: self.layer.clone(),
        }
    }
}

/// Eigen-decomposes `F Fᵀ` and keeps the leading directions.
pub fn build_projector(f: &Matrix, select: RankSelect, mode: ProjectionMode, layer: &str) -> Result<KnowledgeProjector> {
    let n = f.rows();
    let cov = covariance(f)?;
    let dec = svd(&cov)?;
    let (k, fraction) = match select {
        RankSelect::Explicit(k) => {
            if k > n {
                return Err(GemsError::RankOutOfRange { rank: k, max: n });
            }
            (k, None)
        }
        RankSelect::Energy(frac) => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(GemsError::Config(format!("energy fraction {frac} not in (0, 1]")));
            }
            (energy_rank(&dec.sigma, frac), Some(frac))
        }
    };
    if f.cols() < n {
        log::warn!("layer {layer}: {} probe columns for a {n}-dimensional input", f.cols());
    }
    Ok(KnowledgeProjector::from_basis(layer, dec.u.leading_columns(k), mode, fraction))
}

/// Smallest `k` with `sum(sigma[..k]) >= frac * sum(sigma)`; 0 for a zero spectrum.
pub fn energy_rank(sigma: &[f64], frac: f64) -> usize {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        acc += s;
        if acc >= frac * total {
            return i + 1;
        }
    }
    sigma.len()
}

/// `Δ · P`.
pub fn project_update(p: &KnowledgeProjector, delta: &Matrix) -> Result<Matrix> {
    if delta.cols() != p.dim() {
        return Err(GemsError::shape(
            format!("projector for layer {}", p.layer),
            (delta.rows(), p.dim()),
            delta.shape(),
        ));
    }
    delta.matmul(&p.projector)
}

/// Token sequences used to probe the pre-trained model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCorpus {
    inputs: Vec<Vec<u32>>,
}

impl ProbeCorpus {
    pub fn new(inputs: Vec<Vec<u32>>) -> Result<Self> {
        if inputs.is_empty() || inputs.iter().any(|s| s.is_empty()) {
            return Err(GemsError::Empty("probe corpus".into()));
        }
        Ok(ProbeCorpus { inputs })
    }
    pub fn inputs(&self) -> &[Vec<u32>] {
        &self.inputs
    }
    pub fn len(&self) -> usize {
        self.inputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Feature matrices for every layer at once, one forward pass per instance.
pub fn collect_all_features(model: &ToyModel, corpus: &ProbeCorpus) -> Result<Vec<Matrix>> {
    let per_instance: Vec<Vec<Vec<f64>>> = corpus
        .inputs
        .iter()
        .map(|s| model.layer_inputs(s))
        .collect::<Result<_>>()?;
    let c = per_instance.len();
    Ok((0..model.num_layers())
        .map(|layer| {
            let n = per_instance[0][layer].len();
            Matrix::from_fn(n, c, |i, j| per_instance[j][layer][i])
        })
        .collect())
}

/// `n x C` matrix of one layer's input at the final token of each probe.
pub fn collect_features(model: &ToyModel, corpus: &ProbeCorpus, layer: usize) -> Result<Matrix> {
    if layer >= model.num_layers() {
        return Err(GemsError::InvalidArgument(format!("layer index {layer} out of range")));
    }
    let cols: Vec<Vec<f64>> = corpus
        .inputs
        .iter()
        .map(|s| model.layer_inputs(s).map(|mut v| v.swap_remove(layer)))
        .collect::<Result<_>>()?;
    let n = cols[0].len();
    Ok(Matrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

/// Projectors for every layer of `model`.
pub fn build_all_projectors(model: &ToyModel, corpus: &ProbeCorpus, select: RankSelect, mode: ProjectionMode) -> Result<Vec<KnowledgeProjector>> {
    let feats = collect_all_features(model, corpus)?;
    feats
        .iter()
        .zip(model.layer_names())
        .map(|(f, name)| build_projector(f, select, mode, name))
        .collect()
}

/// Mean over probe instances and captured hidden layers of the Frobenius
/// distance between the two models' hidden states.
pub fn drift_probe(before: &ToyModel, after: &ToyModel, corpus: &ProbeCorpus) -> Result<f64> {
    if before.config() != after.config() {
        return Err(GemsError::InvalidArgument("drift_probe needs models of one architecture".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &corpus.inputs {
        let a = before.hidden_states(s)?;
        let b = after.hidden_states(s)?;
        for (x, y) in a.iter().zip(&b) {
            total += x.sub(y)?.frobenius_norm();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn file_stem(layer: &str) -> String {
    layer.replace('.', "_")
}

/// Writes `<layer>.basis` (matrix format) and `<layer>.json` into `dir`.
pub fn write_projector(dir: &Path, p: &KnowledgeProjector) -> Result<PathBuf> {
    let stem = file_stem(&p.layer);
    let basis_path = dir.join(format!("{stem}.basis"));
    write_matrix(BufWriter::new(fs::File::create(&basis_path)?), &p.basis_k)?;
    let side = serde_json::to_string_pretty(&p.sidecar())?;
    fs::write(dir.join(format!("{stem}.json")), side + "\n")?;
    Ok(basis_path)
}

/// Reads a projector written by [`write_projector`]. The stored basis is
/// f32, so it is re-orthonormalized before the projector is rebuilt.
pub fn read_projector(dir: &Path, layer: &str) -> Result<KnowledgeProjector> {
    let stem = file_stem(layer);
    let side: ProjectorSidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if side.layer != layer {
        return Err(GemsError::Format(format!("sidecar names layer {}, expected {layer}", side.layer)));
    }
    let basis = read_matrix(BufReader::new(fs::File::open(dir.join(format!("{stem}.basis")))?))?;
    if basis.cols() != side.k {
        return Err(GemsError::Format(format!("basis has {} columns, sidecar says k = {}", basis.cols(), side.k)));
    }
    Ok(KnowledgeProjector::from_basis(
        layer,
        orthonormalize_columns(&basis)?,
        side.mode,
        side.energy_fraction,
    ))
}

/// Two passes of modified Gram–Schmidt.
fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    let (n, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let c = dot(&done[i], &rest[0]);
                for (x, y) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= c * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm < 1e-6 {
            return Err(GemsError::Numeric(format!("stored basis column {j} is degenerate")));
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(Matrix::from_fn(n, k, |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::ModelConfig;
    use crate::harness::vocab::Vocab;
    use crate::rng::SeedStreams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn k_zero_is_identity_and_k_n_annihilates() {
        let f = random(4, 10, 1);
        let d = random(3, 4, 2);
        let p0 = build_projector(&f, RankSelect::Explicit(0), ProjectionMode::Complement, "l").unwrap();
        assert_eq!(project_update(&p0, &d).unwrap(), d);
        let pn = build_projector(&f, RankSelect::Explicit(4), ProjectionMode::Complement, "l").unwrap();
        assert!(project_update(&pn, &d).unwrap().max_abs() < 1e-12);
        assert!(build_projector(&f, RankSelect::Explicit(5), ProjectionMode::Complement, "l").is_err());
    }

    #[test]
    fn single_basis_vector_zeroes_first_coordinate() {
        let f = Matrix::column_vector(&[1.0, 0.0, 0.0]).unwrap();
        let p = build_projector(&f, RankSelect::Explicit(1), ProjectionMode::Complement, "l").unwrap();
        let d = random(2, 3, 3);
        let out = project_update(&p, &d).unwrap();
        for i in 0..2 {
            assert!(out.get(i, 0).abs() < 1e-15);
            assert!((out.get(i, 1) - d.get(i, 1)).abs() < 1e-15);
            assert!((out.get(i, 2) - d.get(i, 2)).abs() < 1e-15);
        }
    }

    #[test]
    fn annihilation_idempotency_and_linearity() {
        let f = random(6, 20, 4);
        let p = build_projector(&f, RankSelect::Explicit(3), ProjectionMode::Complement, "l").unwrap();
        let uk = p.basis().clone();
        assert!(uk.t_matmul(&uk).unwrap().sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-8);
        let pm = p.matrix();
        assert!(pm.matmul(pm).unwrap().sub(pm).unwrap().frobenius_norm() < 1e-8);
        let x = random(5, 3, 5);
        let on_span = x.matmul_t(&uk).unwrap();
        assert!(project_update(&p, &on_span).unwrap().frobenius_norm() <= 1e-8);
        let d1 = random(5, 6, 6);
        let d2 = random(5, 6, 7);
        let once = project_update(&p, &d1).unwrap();
        let twice = project_update(&p, &once).unwrap();
        assert!(twice.sub(&once).unwrap().frobenius_norm() < 1e-10);
        let mut comb = d1.scale(2.0);
        comb.axpy(-0.5, &d2).unwrap();
        let mut expect = project_update(&p, &d1).unwrap().scale(2.0);
        expect.axpy(-0.5, &project_update(&p, &d2).unwrap()).unwrap();
        assert!(project_update(&p, &comb).unwrap().sub(&expect).unwrap().frobenius_norm() < 1e-10);
        assert!(project_update(&p, &Matrix::zeros(2, 6)).unwrap().max_abs() == 0.0);
        let out = project_update(&p, &d1).unwrap();
        assert!(out.matmul(&uk).unwrap().frobenius_norm() <= 1e-8 * out.frobenius_norm().max(1.0));
    }

    #[test]
    fn literal_mode_is_onto_projector() {
        let f = random(4, 8, 8);
        let c = build_projector(&f, RankSelect::Explicit(2), ProjectionMode::Complement, "l").unwrap();
        let l = build_projector(&f, RankSelect::Explicit(2), ProjectionMode::Literal, "l").unwrap();
        let sum = c.matrix().add(l.matrix()).unwrap();
        assert!(sum.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn energy_rank_selection() {
        assert_eq!(energy_rank(&[5.0, 4.0, 1.0], 0.9), 2);
        assert_eq!(energy_rank(&[5.0, 4.0, 1.0], 1.0), 3);
        assert_eq!(energy_rank(&[0.0, 0.0], 0.9), 0);
        let f = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        // eigenvalues 9 and 1
        let p = build_projector(&f, RankSelect::Energy(0.9), ProjectionMode::Complement, "l").unwrap();
        assert_eq!(p.k(), 1);
        assert!(build_projector(&f, RankSelect::Energy(0.0), ProjectionMode::Complement, "l").is_err());
    }

    fn toy() -> ToyModel {
        let v = Vocab {
            id_levels: 2,
            alphabet: 4,
            clusters: 2,
            general_tokens: 4,
        };
        let cfg = ModelConfig {
            d_model: 8,
            n_blocks: 1,
            ffn_width: 8,
            ctx_len: 12,
        };
        ToyModel::new(cfg, v, &mut SeedStreams::new(9).stream(SeedStreams::INIT)).unwrap()
    }

    #[test]
    fn features_match_per_instance_forward() {
        let m = toy();
        let corpus = ProbeCorpus::new((0..8).map(|i| vec![0, 16 + (i % 4), 6]).collect()).unwrap();
        let all = collect_all_features(&m, &corpus).unwrap();
        for layer in 0..m.num_layers() {
            let f = collect_features(&m, &corpus, layer).unwrap();
            assert_eq!(f, all[layer]);
            for (c, s) in corpus.inputs().iter().enumerate() {
                let x = &m.layer_inputs(s).unwrap()[layer];
                for (i, v) in x.iter().enumerate() {
                    assert!((f.get(i, c) - v).abs() <= 1e-10);
                }
            }
        }
        let one = ProbeCorpus::new(vec![vec![1, 17, 6]]).unwrap();
        assert_eq!(collect_features(&m, &one, 0).unwrap().cols(), 1);
        let dup = ProbeCorpus::new(vec![vec![1, 17, 6], vec![1, 17, 6]]).unwrap();
        let f = collect_features(&m, &dup, 2).unwrap();
        assert_eq!(f.column(0), f.column(1));
        assert!(ProbeCorpus::new(vec![]).is_err());
    }

    #[test]
    fn drift_zero_for_identical_and_positive_after_perturbation() {
        let m = toy();
        let corpus = ProbeCorpus::new(vec![vec![0, 16, 6], vec![1, 17, 18, 6]]).unwrap();
        assert_eq!(drift_probe(&m, &m, &corpus).unwrap(), 0.0);
        let mut m2 = m.clone();
        let v = m2.weights()[1].get(0, 0);
        m2.weights_mut()[1].set(0, 0, v + 1e-3);
        assert!(drift_probe(&m, &m2, &corpus).unwrap() > 0.0);
    }

    #[test]
    fn projector_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = random(5, 9, 10);
        let p = build_projector(&f, RankSelect::Energy(0.9), ProjectionMode::Complement, "blocks.0.ffn.up").unwrap();
        write_projector(dir.path(), &p).unwrap();
        let back = read_projector(dir.path(), "blocks.0.ffn.up").unwrap();
        assert_eq!(back.sidecar(), p.sidecar());
        assert!(back.matrix().sub(p.matrix()).unwrap().max_abs() < 1e-6);
        let pm = back.matrix();
        assert!(pm.matmul(pm).unwrap().sub(pm).unwrap().frobenius_norm() < 1e-12);
    }
}
