//! Covariance kernel and the small dense linear-algebra kit used by every
//! other module.
//!
//! The kernel is the isotropic Gaussian kernel `(1/eta) * rho^{|x - x'|^2}`,
//! evaluated as `exp(ln(rho) * |x - x'|^2) / eta` so that correlation bases as
//! small as `1e-50` never underflow at short distances. A kernel is always
//! paired with a support box: outside the box it is identically zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SagpError};

/// Default ceiling on the number of points accepted by the dense GP routines.
pub const DENSE_CEILING: usize = 500;

/// Row-major set of points in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    coords: Vec<f64>,
    dim: usize,
}

impl Points {
    pub fn new(dim: usize) -> Self {
        Points {
            coords: Vec::new(),
            dim,
        }
    }

    pub fn from_flat(coords: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(SagpError::InvalidInput("point dimension must be positive".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(SagpError::DimensionMismatch {
                expected: dim,
                got: coords.len() % dim,
            });
        }
        Ok(Points { coords, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(1, |r| r.as_ref().len());
        let mut points = Points::new(dim);
        for row in rows {
            points.push(row.as_ref())?;
        }
        Ok(points)
    }

    /// One-dimensional point set from scalars.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Points {
            coords: xs.to_vec(),
            dim: 1,
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(SagpError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.coords.extend_from_slice(x);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn select(&self, idx: &[usize]) -> Points {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            coords.extend_from_slice(self.row(i));
        }
        Points {
            coords,
            dim: self.dim,
        }
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }
}

/// Axis-aligned box. Each lower face is either closed or open; upper faces
/// are always closed. Partition cells use an open lower face except on the
/// domain boundary, which assigns shared faces to the lower-index sibling.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    low_closed: Vec<bool>,
}

impl HyperBox {
    /// Closed box `[lo, hi]`.
    pub fn closed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let n = lo.len();
        Self::with_faces(lo, hi, vec![true; n])
    }

    pub fn with_faces(lo: Vec<f64>, hi: Vec<f64>, low_closed: Vec<bool>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != low_closed.len() {
            return Err(SagpError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(SagpError::InvalidInput("box lower corner exceeds upper corner".into()));
        }
        Ok(HyperBox { lo, hi, low_closed })
    }

    /// The closed unit hyper-cube `[0,1]^d`.
    pub fn unit(dim: usize) -> Self {
        HyperBox {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
            low_closed: vec![true; dim],
        }
    }

    /// All of `R^d`.
    pub fn unbounded(dim: usize) -> Self {
        HyperBox {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
            low_closed: vec![true; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn low_closed(&self) -> &[bool] {
        &self.low_closed
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.lo.len());
        x.iter().enumerate().all(|(l, &v)| {
            let above = if self.low_closed[l] {
                v >= self.lo[l]
            } else {
                v > self.lo[l]
            };
            above && v <= self.hi[l]
        })
    }
}

/// Parameters of one component's kernel. `ln_rho` is kept instead of `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    ln_rho: f64,
    eta: f64,
}

impl KernelParams {
    pub fn new(rho: f64, eta: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(SagpError::InvalidInput(format!("rho must lie in (0,1), got {rho}")));
        }
        Self::from_ln_rho(rho.ln(), eta)
    }

    pub fn from_log10_rho(log10_rho: f64, eta: f64) -> Result<Self> {
        Self::from_ln_rho(log10_rho * std::f64::consts::LN_10, eta)
    }

    pub fn from_ln_rho(ln_rho: f64, eta: f64) -> Result<Self> {
        if !(ln_rho < 0.0 && ln_rho.is_finite()) {
            return Err(SagpError::InvalidInput(format!(
                "ln(rho) must be finite and negative, got {ln_rho}"
            )));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(SagpError::InvalidInput(format!("eta must be positive, got {eta}")));
        }
        Ok(KernelParams { ln_rho, eta })
    }

    pub fn ln_rho(&self) -> f64 {
        self.ln_rho
    }

    pub fn rho(&self) -> f64 {
        self.ln_rho.exp()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(self, eta: f64) -> Result<Self> {
        Self::from_ln_rho(self.ln_rho, eta)
    }

    /// Unit-amplitude correlation `rho^{|x - x'|^2}` without support restriction.
    #[inline]
    pub fn correlation(&self, x: &[f64], x2: &[f64]) -> f64 {
        (self.ln_rho * squared_distance(x, x2)).exp()
    }
}

#[inline]
pub fn squared_distance(x: &[f64], x2: &[f64]) -> f64 {
    x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_point(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(SagpError::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SagpError::InvalidInput(format!("non-finite coordinate in {x:?}")));
    }
    Ok(())
}

/// Supported Gaussian kernel: zero unless both points lie in `support`.
pub fn kernel_eval(x: &[f64], x2: &[f64], params: &KernelParams, support: &HyperBox) -> Result<f64> {
    check_point(x, support.dim())?;
    check_point(x2, support.dim())?;
    if !support.contains(x) || !support.contains(x2) {
        return Ok(0.0);
    }
    Ok(params.correlation(x, x2) / params.eta)
}

pub fn cov_matrix(
    a: &Points,
    b: &Points,
    params: &KernelParams,
    support: &HyperBox,
) -> Result<DMatrix<f64>> {
    if a.dim() != support.dim() {
        return Err(SagpError::DimensionMismatch {
            expected: support.dim(),
            got: a.dim(),
        });
    }
    if b.dim() != support.dim() {
        return Err(SagpError::DimensionMismatch {
            expected: support.dim(),
            got: b.dim(),
        });
    }
    for x in a.iter().chain(b.iter()) {
        check_point(x, support.dim())?;
    }
    let in_a: Vec<bool> = a.iter().map(|x| support.contains(x)).collect();
    let in_b: Vec<bool> = b.iter().map(|x| support.contains(x)).collect();
    let amp = 1.0 / params.eta;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, k| {
        if in_a[i] && in_b[k] {
            params.correlation(a.row(i), b.row(k)) * amp
        } else {
            0.0
        }
    }))
}

/// Lower Cholesky factor of `m + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    pub lower: DMatrix<f64>,
    pub jitter_used: f64,
}

impl PsdFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L^{-1} b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `(L L^T)^{-1} b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self.solve_lower(b);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.solve_lower_mat(b);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_CEILING: f64 = 1e-4;

/// Cholesky factorization with escalating diagonal perturbation.
///
/// An unperturbed factorization is tried first; after that the jitter runs
/// from `1e-10 * mean(diag)` up to `1e-4 * mean(diag)` in factors of ten.
pub fn chol_jitter(m: &DMatrix<f64>) -> Result<PsdFactor> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(SagpError::DimensionMismatch {
            expected: n,
            got: m.ncols(),
        });
    }
    if n == 0 {
        return Ok(PsdFactor {
            lower: DMatrix::zeros(0, 0),
            jitter_used: 0.0,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SagpError::InvalidInput("matrix has non-finite entries".into()));
    }
    let scale = m.amax();
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(SagpError::InvalidInput(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(PsdFactor {
            lower: chol.unpack(),
            jitter_used: 0.0,
        });
    }
    let mean_diag = m.diagonal().mean();
    if !(mean_diag > 0.0) {
        return Err(SagpError::NotPositiveDefinite { jitter: 0.0 });
    }
    let ceiling = JITTER_CEILING * mean_diag;
    let mut jitter = JITTER_START * mean_diag;
    loop {
        let mut perturbed = m.clone();
        for i in 0..n {
            perturbed[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(perturbed) {
            return Ok(PsdFactor {
                lower: chol.unpack(),
                jitter_used: jitter,
            });
        }
        if jitter >= ceiling * (1.0 - 1e-12) {
            return Err(SagpError::NotPositiveDefinite { jitter });
        }
        jitter = (jitter * 10.0).min(ceiling);
    }
}

/// Dense GP posterior of the latent values at the training inputs:
/// `f | y ~ N(K (K + s2 I)^{-1} y, K - K (K + s2 I)^{-1} K)`.
pub fn full_gp_posterior(
    x: &Points,
    y: &DVector<f64>,
    params: &KernelParams,
    sigma2_eps: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (k, chol) = dense_setup(x, y, params, sigma2_eps)?;
    let alpha = chol.solve(y);
    let mean = &k * alpha;
    let v = chol.solve_lower_mat(&k);
    let mut cov = &k - v.transpose() * v;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Dense GP predictive moments of the latent function at `x_star`
/// (add `sigma2_eps` to the variance for a new observation).
pub fn full_gp_predict(
    x: &Points,
    y: &DVector<f64>,
    params: &KernelParams,
    sigma2_eps: f64,
    x_star: &Points,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (_, chol) = dense_setup(x, y, params, sigma2_eps)?;
    let support = HyperBox::unbounded(x.dim());
    let k_star = cov_matrix(x, x_star, params, &support)?;
    let alpha = chol.solve(y);
    let mean = k_star.transpose() * alpha;
    let v = chol.solve_lower_mat(&k_star);
    let amp = 1.0 / params.eta();
    let var = DVector::from_fn(x_star.len(), |s, _| {
        (amp - v.column(s).norm_squared()).max(0.0)
    });
    Ok((mean, var))
}

fn dense_setup(
    x: &Points,
    y: &DVector<f64>,
    params: &KernelParams,
    sigma2_eps: f64,
) -> Result<(DMatrix<f64>, PsdFactor)> {
    if x.len() > DENSE_CEILING {
        return Err(SagpError::InvalidInput(format!(
            "dense GP limited to {DENSE_CEILING} points, got {}",
            x.len()
        )));
    }
    if x.len() != y.len() {
        return Err(SagpError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !(sigma2_eps > 0.0) {
        return Err(SagpError::InvalidInput("noise variance must be positive".into()));
    }
    let support = HyperBox::unbounded(x.dim());
    let k = cov_matrix(x, x, params, &support)?;
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2_eps;
    }
    let chol = chol_jitter(&a)?;
    Ok((k, chol))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Log density of `N(x | mean, cov)` for a dense covariance.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = chol_jitter(cov)?;
    let z = chol.solve_lower(&(x - mean));
    let n = x.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + z.norm_squared()))
}
