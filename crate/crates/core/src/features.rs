//! Gaussian random Fourier features and data-dependent selection.
//!
//! Two real-valued maps are supported:
//!
//! * [`MappingKind::PairedCosSin`]: `(1/√D)·[cos(ωᵢᵀx); sin(ωᵢᵀx)]` for each
//!   frequency, giving a `2D`-dimensional feature vector (entries `2i` and
//!   `2i+1` belong to `ωᵢ`);
//! * [`MappingKind::CosWithPhase`]: `√(2/D)·cos(ωᵢᵀx + bᵢ)`, a `D`-vector.
//!
//! Frequencies are drawn from `N(0, σ⁻² I)`, which approximates the kernel
//! `exp(−‖x−x′‖²/(2σ²))`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    PairedCosSin,
    CosWithPhase,
}

impl std::str::FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired_cos_sin" => Ok(MappingKind::PairedCosSin),
            "cos_with_phase" => Ok(MappingKind::CosWithPhase),
            other => Err(Error::invalid(format!("unknown mapping kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for MappingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MappingKind::PairedCosSin => "paired_cos_sin",
            MappingKind::CosWithPhase => "cos_with_phase",
        })
    }
}

/// A node's random feature set. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    frequencies: Array2<f64>,
    phases: Option<Array1<f64>>,
    kind: MappingKind,
    sigma: f64,
}

const SPEC_MAGIC: &[u8; 4] = b"RFFS";

impl FeatureSpec {
    pub fn new(
        frequencies: Array2<f64>,
        phases: Option<Array1<f64>>,
        kind: MappingKind,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
        }
        if frequencies.nrows() == 0 {
            return Err(Error::invalid("a feature spec needs at least one frequency"));
        }
        match (kind, &phases) {
            (MappingKind::CosWithPhase, Some(b)) => {
                if b.len() != frequencies.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: frequencies.nrows(),
                        got: b.len(),
                    });
                }
                if b.iter().any(|v| !(0.0..=2.0 * PI).contains(v)) {
                    return Err(Error::invalid("phases must lie in [0, 2π]"));
                }
            }
            (MappingKind::CosWithPhase, None) => {
                return Err(Error::invalid("cos_with_phase mapping needs phases"))
            }
            (MappingKind::PairedCosSin, Some(_)) => {
                return Err(Error::invalid("paired_cos_sin mapping takes no phases"))
            }
            (MappingKind::PairedCosSin, None) => {}
        }
        Ok(FeatureSpec {
            frequencies,
            phases,
            kind,
            sigma,
        })
    }

    /// Number of frequencies `D`.
    pub fn count(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    /// Length of the feature vector: `2D` for the paired map, `D` otherwise.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            MappingKind::PairedCosSin => 2 * self.count(),
            MappingKind::CosWithPhase => self.count(),
        }
    }

    pub fn kind(&self) -> MappingKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn frequencies(&self) -> ArrayView2<'_, f64> {
        self.frequencies.view()
    }

    pub fn phases(&self) -> Option<ArrayView1<'_, f64>> {
        self.phases.as_ref().map(|p| p.view())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    pub fn map(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(x.len())?;
        let proj = self.frequencies.dot(&x);
        Ok(self.finish(proj.insert_axis(Axis(1))).remove_axis(Axis(1)))
    }

    /// Feature matrix `Z` of shape `feature_dim × M` for samples given as the
    /// rows of `x` (`M × d`). Column `m` equals `map(x.row(m))`.
    pub fn matrix(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::Empty("feature matrix of zero samples".into()));
        }
        Ok(self.finish(self.frequencies.dot(&x.t())))
    }

    /// Applies the trigonometric map to projections `ΩX` (`D × M`).
    fn finish(&self, mut proj: Array2<f64>) -> Array2<f64> {
        let d = self.count() as f64;
        match self.kind {
            MappingKind::CosWithPhase => {
                let scale = (2.0 / d).sqrt();
                let phases = self.phases.as_ref().expect("validated on construction");
                for (mut row, &b) in proj.rows_mut().into_iter().zip(phases.iter()) {
                    row.mapv_inplace(|v| scale * (v + b).cos());
                }
                proj
            }
            MappingKind::PairedCosSin => {
                let scale = 1.0 / d.sqrt();
                let (rows, cols) = proj.dim();
                let mut z = Array2::<f64>::zeros((2 * rows, cols));
                for (i, row) in proj.rows().into_iter().enumerate() {
                    for (m, &v) in row.iter().enumerate() {
                        let (s, c) = v.sin_cos();
                        z[[2 * i, m]] = scale * c;
                        z[[2 * i + 1, m]] = scale * s;
                    }
                }
                z
            }
        }
    }

    /// Keeps the frequencies (and phases) at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> FeatureSpec {
        FeatureSpec {
            frequencies: self.frequencies.select(Axis(0), idx),
            phases: self.phases.as_ref().map(|p| p.select(Axis(0), idx)),
            kind: self.kind,
            sigma: self.sigma,
        }
    }

    /// Flat little-endian encoding: magic, kind byte, `D` and `d` as u32,
    /// `σ`, row-major `Ω`, then the phases when present.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 1 + 8 + 8 + 8 * (self.frequencies.len() + self.count()));
        out.extend_from_slice(SPEC_MAGIC);
        out.push(match self.kind {
            MappingKind::PairedCosSin => 0,
            MappingKind::CosWithPhase => 1,
        });
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.sigma.to_le_bytes());
        for v in self.frequencies.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(b) = &self.phases {
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("feature spec bytes: {m}"));
        if bytes.len() < 21 || &bytes[..4] != SPEC_MAGIC {
            return Err(bad("missing header"));
        }
        let kind = match bytes[4] {
            0 => MappingKind::PairedCosSin,
            1 => MappingKind::CosWithPhase,
            k => return Err(bad(&format!("unknown kind tag {k}"))),
        };
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let sigma = f64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let n_phase = if kind == MappingKind::CosWithPhase { count } else { 0 };
        let body = &bytes[21..];
        if body.len() != 8 * (count * dim + n_phase) {
            return Err(bad("length does not match header"));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let freq: Vec<f64> = values.by_ref().take(count * dim).collect();
        let phases: Vec<f64> = values.collect();
        let frequencies =
            Array2::from_shape_vec((count, dim), freq).map_err(|e| bad(&e.to_string()))?;
        let phases = (kind == MappingKind::CosWithPhase).then(|| Array1::from(phases));
        FeatureSpec::new(frequencies, phases, kind, sigma)
    }
}

/// Draws `count` frequencies from `N(0, σ⁻² I_d)` and, for the phase map,
/// phases from `U[0, 2π]`.
pub fn sample_gaussian_features(
    dim: usize,
    count: usize,
    sigma: f64,
    seed: u64,
    kind: MappingKind,
) -> Result<FeatureSpec> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
    }
    if count == 0 || dim == 0 {
        return Err(Error::invalid("feature count and input dimension must be positive"));
    }
    let mut rng = rng_for(seed, 0x4652_4551);
    let normal = Normal::new(0.0, 1.0 / sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let frequencies = Array2::from_shape_simple_fn((count, dim), || normal.sample(&mut rng));
    let phases = match kind {
        MappingKind::CosWithPhase => {
            let uniform = Uniform::new_inclusive(0.0, 2.0 * PI).expect("valid range");
            Some(Array1::from_shape_simple_fn(count, || uniform.sample(&mut rng)))
        }
        MappingKind::PairedCosSin => None,
    };
    FeatureSpec::new(frequencies, phases, kind, sigma)
}

/// Scores one candidate frequency against labelled data.
pub trait ScoreFunction: Sync {
    fn score(&self, projections: ArrayView1<f64>, phase: Option<f64>, y: ArrayView1<f64>) -> f64;
}

/// Label-alignment energy of a candidate:
/// `((1/N)Σ yᵢ cos(ωᵀxᵢ))² + ((1/N)Σ yᵢ sin(ωᵀxᵢ))²`, or
/// `((1/N)Σ yᵢ cos(ωᵀxᵢ + b))²` when the candidate carries a phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelAlignment;

impl ScoreFunction for LabelAlignment {
    fn score(&self, projections: ArrayView1<f64>, phase: Option<f64>, y: ArrayView1<f64>) -> f64 {
        let n = y.len() as f64;
        match phase {
            Some(b) => {
                let c: f64 = projections.iter().zip(y).map(|(p, yi)| yi * (p + b).cos()).sum();
                (c / n).powi(2)
            }
            None => {
                let (mut c, mut s) = (0.0, 0.0);
                for (p, yi) in projections.iter().zip(y) {
                    let (sn, cs) = p.sin_cos();
                    c += yi * cs;
                    s += yi * sn;
                }
                (c / n).powi(2) + (s / n).powi(2)
            }
        }
    }
}

/// `D₀` sampled candidates, optionally scored.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub candidates: FeatureSpec,
    pub scores: Option<Vec<f64>>,
}

impl CandidatePool {
    pub fn sample(dim: usize, count: usize, sigma: f64, seed: u64, kind: MappingKind) -> Result<Self> {
        Ok(CandidatePool {
            candidates: sample_gaussian_features(dim, count, sigma, seed, kind)?,
            scores: None,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scores every candidate with `scorer`. Parallel over candidates; the
    /// result does not depend on scheduling.
    pub fn scored_with(mut self, x: ArrayView2<f64>, y: ArrayView1<f64>, scorer: &dyn ScoreFunction) -> Result<Self> {
        self.candidates.check_dim(x.ncols())?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if y.is_empty() {
            return Err(Error::Empty("cannot score features on zero samples".into()));
        }
        let proj = self.candidates.frequencies.dot(&x.t());
        let phases = self.candidates.phases.as_ref();
        let scores: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| scorer.score(proj.row(i), phases.map(|b| b[i]), y))
            .collect();
        self.scores = Some(scores);
        Ok(self)
    }
}

pub fn score_features(pool: CandidatePool, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<CandidatePool> {
    pool.scored_with(x, y, &LabelAlignment)
}

/// The `count` highest-scoring candidates, best first; ties go to the smaller
/// sampling index.
pub fn select_top(pool: &CandidatePool, count: usize) -> Result<FeatureSpec> {
    let scores = pool
        .scores
        .as_ref()
        .ok_or_else(|| Error::invalid("candidate pool has not been scored"))?;
    if count == 0 || count > pool.len() {
        return Err(Error::invalid(format!(
            "cannot select {count} features from a pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(pool.candidates.subset(&order))
}

/// Samples `ratio·count` candidates, scores them on `(x, y)` and keeps the
/// best `count`.
pub fn select_data_dependent(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    count: usize,
    ratio: usize,
    sigma: f64,
    seed: u64,
    kind: MappingKind,
) -> Result<FeatureSpec> {
    let pool = CandidatePool::sample(x.ncols(), count * ratio.max(1), sigma, seed, kind)?;
    select_top(&score_features(pool, x, y)?, count)
}

/// Exact Gaussian kernel `exp(−‖x−x′‖²/(2σ²))`.
pub fn gaussian_kernel(x: ArrayView1<f64>, xp: ArrayView1<f64>, sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(xp).map(|(a, b)| (a - b).powi(2)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn shape_and_determinism() {
        let a = sample_gaussian_features(3, 5, 1.0, 7, MappingKind::CosWithPhase).unwrap();
        assert_eq!(a.frequencies().dim(), (5, 3));
        assert_eq!(a.phases().unwrap().len(), 5);
        let b = sample_gaussian_features(3, 5, 1.0, 7, MappingKind::CosWithPhase).unwrap();
        assert_eq!(a, b);
        let p = sample_gaussian_features(3, 5, 1.0, 7, MappingKind::PairedCosSin).unwrap();
        assert!(p.phases().is_none());
        assert_eq!(p.feature_dim(), 10);
        assert!(sample_gaussian_features(3, 5, 0.0, 7, MappingKind::PairedCosSin).is_err());
        assert!(sample_gaussian_features(3, 5, -1.0, 7, MappingKind::PairedCosSin).is_err());
    }

    #[test]
    fn frequency_variance_matches_bandwidth() {
        let s = sample_gaussian_features(1, 100_000, 2.0, 11, MappingKind::PairedCosSin).unwrap();
        let w = s.frequencies();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.24..=0.26).contains(&var), "variance {var}");
    }

    #[test]
    fn phase_map_with_zero_frequency() {
        let s = FeatureSpec::new(array![[0.0, 0.0]], Some(array![0.0]), MappingKind::CosWithPhase, 1.0).unwrap();
        let z = s.map(array![0.3, -4.0].view()).unwrap();
        assert!((z[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let s = sample_gaussian_features(3, 4, 1.0, 0, MappingKind::PairedCosSin).unwrap();
        assert!(matches!(
            s.map(array![1.0, 2.0].view()),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(s.matrix(Array2::zeros((4, 2)).view()).is_err());
    }

    #[test]
    fn spec_invariants_enforced() {
        let w = array![[1.0]];
        assert!(FeatureSpec::new(w.clone(), None, MappingKind::CosWithPhase, 1.0).is_err());
        assert!(FeatureSpec::new(w.clone(), Some(array![0.5]), MappingKind::PairedCosSin, 1.0).is_err());
        assert!(FeatureSpec::new(w.clone(), Some(array![7.0]), MappingKind::CosWithPhase, 1.0).is_err());
        assert!(FeatureSpec::new(Array2::zeros((0, 1)), None, MappingKind::PairedCosSin, 1.0).is_err());
    }

    #[test]
    fn matrix_columns_equal_map() {
        let s = sample_gaussian_features(2, 6, 0.7, 3, MappingKind::PairedCosSin).unwrap();
        let x = array![[0.1, 0.2], [0.9, -0.3], [0.0, 0.5]];
        let z = s.matrix(x.view()).unwrap();
        assert_eq!(z.dim(), (12, 3));
        for m in 0..3 {
            let col = s.map(x.row(m)).unwrap();
            assert!(col.iter().zip(z.column(m)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let permuted = x.select(Axis(0), &[2, 0, 1]);
        let zp = s.matrix(permuted.view()).unwrap();
        assert_eq!(zp.column(0), z.column(2));
        assert_eq!(zp.column(1), z.column(0));
    }

    #[test]
    fn cross_node_block_shape() {
        let mine = sample_gaussian_features(4, 7, 1.0, 1, MappingKind::CosWithPhase).unwrap();
        let their_data = Array2::<f64>::zeros((13, 4));
        assert_eq!(mine.matrix(their_data.view()).unwrap().dim(), (7, 13));
    }

    #[test]
    fn scores_for_zero_frequency() {
        let pool = CandidatePool {
            candidates: FeatureSpec::new(array![[0.0, 0.0]], None, MappingKind::PairedCosSin, 1.0).unwrap(),
            scores: None,
        };
        let x = array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]];
        let centered = score_features(pool.clone(), x.view(), array![1.0, -2.0, 1.0].view()).unwrap();
        assert_eq!(centered.scores.unwrap()[0], 0.0);
        let ones = score_features(pool, x.view(), array![1.0, 1.0, 1.0].view()).unwrap();
        assert!((ones.scores.unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scores_match_two_loop_oracle() {
        let mut rng = rng_for(5, 0);
        let x = Array2::from_shape_simple_fn((5, 2), || rng.random::<f64>());
        let y = Array1::from_shape_simple_fn(5, || rng.random::<f64>() * 2.0 - 1.0);
        for kind in [MappingKind::PairedCosSin, MappingKind::CosWithPhase] {
            let pool = CandidatePool::sample(2, 9, 0.8, 2, kind).unwrap();
            let scored = score_features(pool.clone(), x.view(), y.view()).unwrap();
            let w = pool.candidates.frequencies();
            for (k, got) in scored.scores.unwrap().iter().enumerate() {
                let (mut c, mut s) = (0.0, 0.0);
                for i in 0..5 {
                    let mut dotp = 0.0;
                    for t in 0..2 {
                        dotp += w[[k, t]] * x[[i, t]];
                    }
                    match pool.candidates.phases() {
                        Some(b) => c += y[i] * (dotp + b[k]).cos(),
                        None => {
                            c += y[i] * dotp.cos();
                            s += y[i] * dotp.sin();
                        }
                    }
                }
                let want = (c / 5.0).powi(2) + (s / 5.0).powi(2);
                assert!((got - want).abs() < 1e-14, "{got} vs {want}");
            }
        }
    }

    fn pool_with_scores(scores: Vec<f64>) -> CandidatePool {
        let n = scores.len();
        CandidatePool {
            candidates: FeatureSpec::new(
                Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
                None,
                MappingKind::PairedCosSin,
                1.0,
            )
            .unwrap(),
            scores: Some(scores),
        }
    }

    #[test]
    fn select_top_order_and_ties() {
        let picked = select_top(&pool_with_scores(vec![0.1, 0.9, 0.5]), 2).unwrap();
        assert_eq!(picked.frequencies().column(0).to_vec(), vec![1.0, 2.0]);
        let tied = select_top(&pool_with_scores(vec![0.3, 0.3, 0.3]), 2).unwrap();
        assert_eq!(tied.frequencies().column(0).to_vec(), vec![0.0, 1.0]);
        let all = select_top(&pool_with_scores(vec![0.1, 0.9, 0.5]), 3).unwrap();
        assert_eq!(all.frequencies().column(0).to_vec(), vec![1.0, 2.0, 0.0]);
        assert!(select_top(&pool_with_scores(vec![0.1]), 2).is_err());
        let unscored = CandidatePool { scores: None, ..pool_with_scores(vec![1.0]) };
        assert!(select_top(&unscored, 1).is_err());
    }

    #[test]
    fn bytes_and_json_round_trip() {
        for kind in [MappingKind::PairedCosSin, MappingKind::CosWithPhase] {
            let s = sample_gaussian_features(3, 4, 1.5, 9, kind).unwrap();
            assert_eq!(FeatureSpec::from_bytes(&s.to_bytes()).unwrap(), s);
            let back: FeatureSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
        assert!(FeatureSpec::from_bytes(b"RFFS").is_err());
    }
}
