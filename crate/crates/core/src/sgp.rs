//! Closed-form sparse-GP algebra for one additive component.
//!
//! Everything is stored at unit amplitude: with `K = C / eta`, the projection
//! `K_nm K_m^{-1} = C_nm C_m^{-1}` does not depend on `eta`, and the FITC
//! diagonal scales as `Lambda = unit_lambda / eta`. An `eta` update therefore
//! never refactorizes anything.
//!
//! A component only sees the training points inside its box; rows for points
//! outside are implicitly zero (cross-covariance, contribution and `Lambda`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SagpError};
use crate::linalg::{chol_jitter, symmetrize, KernelParams, Points, PsdFactor};
use crate::partition::ComponentId;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentState {
    pub component_id: ComponentId,
    /// Sorted indices into the training set.
    pub pseudo_inputs: Vec<usize>,
    pub pseudo_targets: DVector<f64>,
    pub kernel: KernelParams,
}

impl ComponentState {
    pub fn eta(&self) -> f64 {
        self.kernel.eta()
    }
}

/// Factorized unit-amplitude Gram matrix of a set of pseudo-inputs. This is
/// all that is needed to evaluate a component at new locations.
#[derive(Debug, Clone)]
pub struct PseudoBasis {
    points: Points,
    ln_rho: f64,
    /// `C_m + jitter I`
    gram: DMatrix<f64>,
    chol: PsdFactor,
}

impl PseudoBasis {
    pub fn new(points: Points, ln_rho: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(SagpError::Empty("pseudo-input set"));
        }
        let m = points.len();
        let mut gram = DMatrix::from_fn(m, m, |a, b| {
            corr(ln_rho, points.row(a), points.row(b))
        });
        let chol = chol_jitter(&gram)?;
        for i in 0..m {
            gram[(i, i)] += chol.jitter_used;
        }
        Ok(PseudoBasis {
            points,
            ln_rho,
            gram,
            chol,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn jitter(&self) -> f64 {
        self.chol.jitter_used
    }

    /// Unit-amplitude Gram matrix (jitter included).
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn chol(&self) -> &PsdFactor {
        &self.chol
    }

    /// Unit correlations between `x` and each pseudo-input.
    pub fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.len(), |k, _| corr(self.ln_rho, self.points.row(k), x))
    }

    /// Conditional mean and variance of the component at `x` given its
    /// pseudo-targets: `k^T K_m^{-1} f`, `K(x,x) - k^T K_m^{-1} k`.
    pub fn predict(&self, x: &[f64], pseudo_targets: &DVector<f64>, eta: f64) -> (f64, f64) {
        let c = self.cross(x);
        let z = self.chol.solve_lower(&c);
        let w = self.chol.solve_lower(pseudo_targets);
        let mean = z.dot(&w);
        let var = (1.0 - z.norm_squared()).max(0.0) / eta;
        (mean, var)
    }

    /// `log N(f | 0, C_m / eta)`
    pub fn log_prior(&self, pseudo_targets: &DVector<f64>, eta: f64) -> f64 {
        let m = self.len() as f64;
        let z = self.chol.solve_lower(pseudo_targets);
        -0.5 * (m * LN_2PI + self.chol.log_det() - m * eta.ln() + eta * z.norm_squared())
    }
}

#[inline]
fn corr(ln_rho: f64, a: &[f64], b: &[f64]) -> f64 {
    (ln_rho * crate::linalg::squared_distance(a, b)).exp()
}

/// Per-component quantities that only change when the pseudo-inputs do.
#[derive(Debug, Clone)]
pub struct ComponentCache {
    n: usize,
    members: Vec<usize>,
    basis: PseudoBasis,
    /// Unit correlations `C_{members, m}`.
    cross: DMatrix<f64>,
    /// `C_{members,m} C_m^{-1}`
    proj: DMatrix<f64>,
    /// `1 - c_i^T C_m^{-1} c_i` per member, clamped at zero.
    unit_lambda: DVector<f64>,
    /// `K_nm K_m^{-1} f` over all n training points.
    contribution: DVector<f64>,
}

impl ComponentCache {
    /// `members` lists the training points inside the component's box; the
    /// pseudo-inputs of `state` must be among them.
    pub fn build(state: &ComponentState, x: &Points, members: &[usize]) -> Result<Self> {
        if state.pseudo_inputs.len() != state.pseudo_targets.len() {
            return Err(SagpError::DimensionMismatch {
                expected: state.pseudo_inputs.len(),
                got: state.pseudo_targets.len(),
            });
        }
        let pseudo = x.select(&state.pseudo_inputs);
        let basis = PseudoBasis::new(pseudo, state.kernel.ln_rho())?;
        Self::with_basis(state, x, members, basis)
    }

    pub fn with_basis(
        state: &ComponentState,
        x: &Points,
        members: &[usize],
        basis: PseudoBasis,
    ) -> Result<Self> {
        let m = basis.len();
        let ln_rho = state.kernel.ln_rho();
        let cross = DMatrix::from_fn(members.len(), m, |r, k| {
            corr(ln_rho, x.row(members[r]), basis.points.row(k))
        });
        // proj^T = C_m^{-1} C_mn
        let proj = basis.chol.solve_mat(&cross.transpose()).transpose();
        let half = basis.chol.solve_lower_mat(&cross.transpose());
        let unit_lambda = DVector::from_fn(members.len(), |r, _| {
            (1.0 - half.column(r).norm_squared()).max(0.0)
        });
        let mut cache = ComponentCache {
            n: x.len(),
            members: members.to_vec(),
            basis,
            cross,
            proj,
            unit_lambda,
            contribution: DVector::zeros(x.len()),
        };
        cache.set_pseudo_targets(&state.pseudo_targets);
        Ok(cache)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn basis(&self) -> &PseudoBasis {
        &self.basis
    }

    pub fn set_pseudo_targets(&mut self, pseudo_targets: &DVector<f64>) {
        let local = &self.proj * pseudo_targets;
        self.contribution.fill(0.0);
        for (r, &i) in self.members.iter().enumerate() {
            self.contribution[i] = local[r];
        }
    }

    /// `K_nm K_m^{-1} f` for the pseudo-targets last set.
    pub fn contribution(&self) -> &DVector<f64> {
        &self.contribution
    }

    /// Cross-covariance `K_nm` over all training points (zero rows outside the box).
    pub fn cross_cov(&self, eta: f64) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n, self.basis.len());
        for (r, &i) in self.members.iter().enumerate() {
            k.row_mut(i).copy_from(&(self.cross.row(r) / eta));
        }
        k
    }

    pub fn lambda_member(&self, eta: f64) -> DVector<f64> {
        &self.unit_lambda / eta
    }

    /// FITC diagonal over all training points.
    pub fn lambda_diag(&self, eta: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (r, &i) in self.members.iter().enumerate() {
            out[i] = self.unit_lambda[r] / eta;
        }
        out
    }

    pub fn unit_lambda(&self) -> &DVector<f64> {
        &self.unit_lambda
    }

    pub fn log_prior(&self, pseudo_targets: &DVector<f64>, eta: f64) -> f64 {
        self.basis.log_prior(pseudo_targets, eta)
    }
}

/// Log density of `N(y | sum_j contribution_j, sigma2 I + sum_j Lambda_j)`.
pub fn model_log_likelihood(
    y: &DVector<f64>,
    states: &[ComponentState],
    caches: &[ComponentCache],
    sigma2_eps: f64,
) -> Result<f64> {
    let mut mean = DVector::zeros(y.len());
    let mut var = DVector::from_element(y.len(), sigma2_eps);
    for (s, c) in states.iter().zip(caches) {
        mean += c.contribution();
        for (r, &i) in c.members.iter().enumerate() {
            var[i] += c.unit_lambda[r] / s.eta();
        }
    }
    diagonal_gaussian_log_density(y, &mean, &var)
}

pub fn diagonal_gaussian_log_density(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    var: &DVector<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        let v = var[i];
        if !(v > 0.0) {
            return Err(SagpError::Invariant(format!("nonpositive variance {v} at point {i}")));
        }
        let r = y[i] - mean[i];
        total += -0.5 * (LN_2PI + v.ln() + r * r / v);
    }
    Ok(total)
}

/// Gaussian full conditional of a component's pseudo-targets.
#[derive(Debug, Clone)]
pub struct FullConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `B` with `cov = B^T B`.
    pub cov_root: DMatrix<f64>,
}

impl FullConditional {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        draw_gaussian(&self.mean, &self.cov_root, rng)
    }
}

/// `mean + B^T z` with `z ~ N(0, I)`.
pub fn draw_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov_root: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(cov_root.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + cov_root.tr_mul(&z)
}

/// Moments of `f_j | r_j`:
/// `Mean = K_m Q^{-1} K_mn D^{-1} r`, `Var = K_m Q^{-1} K_m`,
/// `Q = K_m + K_mn D^{-1} K_nm`, `D = Lambda + sigma2 I`.
pub fn pseudo_target_full_conditional(
    cache: &ComponentCache,
    eta: f64,
    residual: &DVector<f64>,
    sigma2_eps: f64,
) -> Result<FullConditional> {
    let (q_chol, rhs) = q_system(cache, eta, residual, sigma2_eps)?;
    let k_m = cache.basis.gram() / eta;
    let b = q_chol.solve_lower_mat(&k_m);
    let mean = b.tr_mul(&q_chol.solve_lower(&rhs));
    let mut cov = b.tr_mul(&b);
    symmetrize(&mut cov);
    Ok(FullConditional {
        mean,
        cov,
        cov_root: b,
    })
}

/// Cholesky of `Q` and `K_mn D^{-1} r`.
fn q_system(
    cache: &ComponentCache,
    eta: f64,
    residual: &DVector<f64>,
    sigma2_eps: f64,
) -> Result<(PsdFactor, DVector<f64>)> {
    if residual.len() != cache.n {
        return Err(SagpError::DimensionMismatch {
            expected: cache.n,
            got: residual.len(),
        });
    }
    let m = cache.basis.len();
    let inv_d = DVector::from_fn(cache.members.len(), |r, _| {
        1.0 / (cache.unit_lambda[r] / eta + sigma2_eps)
    });
    // K_nm = C_nm / eta; fold the 1/eta factors in after the products.
    let scaled = DMatrix::from_fn(cache.members.len(), m, |r, k| cache.cross[(r, k)] * inv_d[r]);
    let mut q = cache.basis.gram() / eta + cache.cross.tr_mul(&scaled) / (eta * eta);
    symmetrize(&mut q);
    let r_members = DVector::from_fn(cache.members.len(), |r, _| residual[cache.members[r]]);
    let rhs = scaled.tr_mul(&r_members) / eta;
    Ok((chol_jitter(&q)?, rhs))
}

/// Per-component mean and conditional variance at `x_star` given the current
/// pseudo-targets; `(0, 0)` when the point lies outside the component's box.
pub fn component_predict(
    state: &ComponentState,
    cache: &ComponentCache,
    x_star: &[f64],
    inside: bool,
) -> (f64, f64) {
    if !inside {
        return (0.0, 0.0);
    }
    cache.basis.predict(x_star, &state.pseudo_targets, state.eta())
}

/// Predictive distribution of a new observation under a single sparse GP with
/// the pseudo-targets integrated out:
/// `N(k^T Q^{-1} K_mn D^{-1} r, sigma2 + K** - k^T K_m^{-1} k + k^T Q^{-1} k)`.
pub fn sgp_marginal_predict(
    cache: &ComponentCache,
    eta: f64,
    residual: &DVector<f64>,
    sigma2_eps: f64,
    x_star: &[f64],
) -> Result<(f64, f64)> {
    let (q_chol, rhs) = q_system(cache, eta, residual, sigma2_eps)?;
    let k_star = cache.basis.cross(x_star) / eta;
    let zq = q_chol.solve_lower(&k_star);
    let mean = zq.dot(&q_chol.solve_lower(&rhs));
    let zk = cache.basis.chol.solve_lower(&cache.basis.cross(x_star));
    let cond = (1.0 - zk.norm_squared()).max(0.0) / eta;
    Ok((mean, sigma2_eps + cond + zq.norm_squared()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cov_matrix, full_gp_posterior, HyperBox};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn state(id: usize, idx: Vec<usize>, f: Vec<f64>, log10_rho: f64, eta: f64) -> ComponentState {
        ComponentState {
            component_id: id,
            pseudo_inputs: idx,
            pseudo_targets: DVector::from_vec(f),
            kernel: KernelParams::from_log10_rho(log10_rho, eta).unwrap(),
        }
    }

    fn spread_points(rng: &mut ChaCha8Rng, n: usize) -> Points {
        let xs: Vec<f64> = (0..n)
            .map(|i| (i as f64 + rng.random_range(0.1..0.9)) / n as f64)
            .collect();
        Points::from_scalars(&xs)
    }

    fn dense_k(x: &Points, p: &KernelParams) -> DMatrix<f64> {
        cov_matrix(x, x, p, &HyperBox::unbounded(x.dim())).unwrap()
    }

    #[test]
    fn lambda_vanishes_when_every_point_is_a_pseudo_input() {
        let x = Points::from_scalars(&[0.1, 0.4, 0.8]);
        let s = state(0, vec![0, 1, 2], vec![0.0; 3], -1.0, 2.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        assert!(c.lambda_diag(2.0).amax() < 1e-12);
    }

    #[test]
    fn lambda_single_pseudo_input_formula() {
        let x = Points::from_scalars(&[0.2, 0.5, 0.9]);
        let eta = 1.5;
        let s = state(0, vec![0], vec![0.0], -1.0, eta);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        let lam = c.lambda_diag(eta);
        for i in 0..3 {
            let k = kernel_value(&s.kernel, x.row(0), x.row(i));
            let expected = 1.0 / eta - eta * k * k;
            assert!((lam[i] - expected).abs() < 1e-14);
        }
        assert_eq!(lam[0], 0.0);
    }

    fn kernel_value(p: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
        p.correlation(a, b) / p.eta()
    }

    #[test]
    fn lambda_is_zero_outside_the_box() {
        let x = Points::from_scalars(&[0.1, 0.3, 0.7, 0.9]);
        let s = state(0, vec![0], vec![1.0], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1]).unwrap();
        let lam = c.lambda_diag(1.0);
        assert_eq!(lam[2], 0.0);
        assert_eq!(lam[3], 0.0);
        assert_eq!(c.contribution()[2], 0.0);
    }

    #[test]
    fn lambda_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = spread_points(&mut rng, 8);
        let s = state(0, vec![1, 4, 6], vec![0.0; 3], -1.5, 0.8);
        let c = ComponentCache::build(&s, &x, &(0..8).collect::<Vec<_>>()).unwrap();
        let k = dense_k(&x, &s.kernel);
        let idx = [1, 4, 6];
        let k_nm = DMatrix::from_fn(8, 3, |i, a| k[(i, idx[a])]);
        let k_m = DMatrix::from_fn(3, 3, |a, b| k[(idx[a], idx[b])]);
        let oracle = &k - &k_nm * k_m.try_inverse().unwrap() * k_nm.transpose();
        let lam = c.lambda_diag(0.8);
        for i in 0..8 {
            assert!((lam[i] - oracle[(i, i)].max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_pseudo_targets_contribute_nothing() {
        let x = Points::from_scalars(&[0.1, 0.4, 0.8]);
        let s = state(0, vec![1], vec![0.0], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        assert_eq!(c.contribution(), &DVector::zeros(3));
    }

    #[test]
    fn contribution_at_pseudo_input_is_its_target() {
        let x = Points::from_scalars(&[0.1, 0.4, 0.8]);
        let s = state(0, vec![1], vec![2.5], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        assert!((c.contribution()[1] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn contribution_matches_dense_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = spread_points(&mut rng, 9);
        let f = vec![0.3, -1.2, 0.7];
        let s = state(0, vec![0, 4, 8], f.clone(), -2.0, 0.5);
        let c = ComponentCache::build(&s, &x, &(0..9).collect::<Vec<_>>()).unwrap();
        let k = dense_k(&x, &s.kernel);
        let idx = [0, 4, 8];
        let k_nm = DMatrix::from_fn(9, 3, |i, a| k[(i, idx[a])]);
        let k_m = DMatrix::from_fn(3, 3, |a, b| k[(idx[a], idx[b])]);
        let oracle = k_nm * k_m.try_inverse().unwrap() * DVector::from_vec(f);
        assert!((c.contribution() - oracle).amax() < 1e-10);
    }

    #[test]
    fn single_component_log_likelihood_reduces_to_noise_only() {
        let x = Points::from_scalars(&[0.1, 0.5, 0.9]);
        let y = DVector::from_vec(vec![0.3, -0.2, 1.1]);
        let s = state(0, vec![0, 1, 2], vec![0.0; 3], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        let ll = model_log_likelihood(&y, &[s], &[c], 0.7).unwrap();
        let oracle: f64 = y
            .iter()
            .map(|v| -0.5 * ((2.0 * std::f64::consts::PI * 0.7).ln() + v * v / 0.7))
            .sum();
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_matches_dense_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = spread_points(&mut rng, 6);
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let s1 = state(0, vec![1, 3], vec![0.4, -0.3], -1.0, 1.2);
        let s2 = state(1, vec![4], vec![0.9], -20.0, 3.0);
        let c1 = ComponentCache::build(&s1, &x, &[0, 1, 2, 3, 4, 5]).unwrap();
        let c2 = ComponentCache::build(&s2, &x, &[3, 4, 5]).unwrap();
        let ll = model_log_likelihood(&y, &[s1.clone(), s2.clone()], &[c1.clone(), c2.clone()], 0.4)
            .unwrap();

        let mut mean = DVector::zeros(6);
        let mut cov = DMatrix::identity(6, 6) * 0.4;
        for (s, c) in [(&s1, &c1), (&s2, &c2)] {
            let k_nm = c.cross_cov(s.eta());
            let k_m = c.basis().gram() / s.eta();
            let k_m_inv = k_m.clone().try_inverse().unwrap();
            mean += &k_nm * &k_m_inv * &s.pseudo_targets;
            for &i in c.members() {
                let ki = k_nm.row(i).transpose();
                cov[(i, i)] += 1.0 / s.eta() - (ki.transpose() * &k_m_inv * &ki)[(0, 0)];
            }
        }
        let oracle = crate::linalg::mvn_log_density(&y, &mean, &cov).unwrap();
        assert!((ll - oracle).abs() < 1e-10, "{ll} vs {oracle}");
    }

    #[test]
    fn log_likelihood_translation_invariant() {
        let x = Points::from_scalars(&[0.1, 0.5, 0.9]);
        let y = DVector::from_vec(vec![0.3, -0.2, 1.1]);
        let s = state(0, vec![0, 1, 2], vec![0.1, 0.2, -0.1], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        let a = model_log_likelihood(&y, std::slice::from_ref(&s), &[c], 0.5).unwrap();
        let shift = 4.0;
        let s2 = ComponentState {
            pseudo_targets: s.pseudo_targets.add_scalar(shift),
            ..s.clone()
        };
        // m = n, so the contribution is the pseudo-targets themselves
        let c2 = ComponentCache::build(&s2, &x, &[0, 1, 2]).unwrap();
        let b = model_log_likelihood(&y.add_scalar(shift), &[s2], &[c2], 0.5).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn inflating_lambda_lowers_density_at_the_mean() {
        let x = Points::from_scalars(&[0.1, 0.5, 0.9]);
        let s = state(0, vec![1], vec![0.5], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        let y = c.contribution().clone();
        let base = model_log_likelihood(&y, std::slice::from_ref(&s), std::slice::from_ref(&c), 0.3).unwrap();
        let mut inflated = c.clone();
        inflated.unit_lambda[0] += 0.5;
        let worse = model_log_likelihood(&y, &[s], &[inflated], 0.3).unwrap();
        assert!(worse < base);
    }

    #[test]
    fn zero_residual_gives_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = spread_points(&mut rng, 6);
        let s = state(0, vec![0, 3], vec![0.0; 2], -1.0, 1.0);
        let c = ComponentCache::build(&s, &x, &(0..6).collect::<Vec<_>>()).unwrap();
        let fc = pseudo_target_full_conditional(&c, 1.0, &DVector::zeros(6), 0.2).unwrap();
        assert_eq!(fc.mean, DVector::zeros(2));
    }

    #[test]
    fn full_conditional_with_all_points_is_dense_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = spread_points(&mut rng, 6);
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let s = state(0, (0..6).collect(), vec![0.0; 6], -2.0, 0.7);
        let c = ComponentCache::build(&s, &x, &(0..6).collect::<Vec<_>>()).unwrap();
        let fc = pseudo_target_full_conditional(&c, 0.7, &y, 0.25).unwrap();
        let (mean, cov) = full_gp_posterior(&x, &y, &s.kernel, 0.25).unwrap();
        assert!((fc.mean - mean).amax() < 1e-8);
        assert!((fc.cov - cov).amax() < 1e-8);
    }

    #[test]
    fn predict_at_pseudo_input_and_outside() {
        let x = Points::from_scalars(&[0.1, 0.3, 0.45]);
        let s = state(0, vec![0, 2], vec![1.5, -0.5], -1.0, 2.0);
        let c = ComponentCache::build(&s, &x, &[0, 1, 2]).unwrap();
        let (m, v) = component_predict(&s, &c, &[0.45], true);
        assert!((m + 0.5).abs() < 1e-12);
        assert!(v.abs() < 1e-12);
        assert_eq!(component_predict(&s, &c, &[0.8], false), (0.0, 0.0));
    }

    #[test]
    fn predict_matches_conditional_gaussian_lemma() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = spread_points(&mut rng, 7);
        let s = state(0, vec![1, 3, 5], vec![0.2, 0.9, -0.4], -1.7, 1.3);
        let c = ComponentCache::build(&s, &x, &(0..7).collect::<Vec<_>>()).unwrap();
        let x_star = [0.57];
        // joint of (f(x*), f_bar) conditioned on f_bar via a generic inverse
        let pts = Points::from_scalars(&[0.57, x.row(1)[0], x.row(3)[0], x.row(5)[0]]);
        let joint = dense_k(&pts, &s.kernel);
        let c_ab = joint.view((0, 1), (1, 3)).into_owned();
        let c_bb = joint.view((1, 1), (3, 3)).into_owned();
        let inv = c_bb.try_inverse().unwrap();
        let mean_o = (&c_ab * &inv * &s.pseudo_targets)[(0, 0)];
        let var_o = joint[(0, 0)] - (&c_ab * &inv * c_ab.transpose())[(0, 0)];
        let (mean, var) = component_predict(&s, &c, &x_star, true);
        assert!((mean - mean_o).abs() < 1e-10);
        assert!((var - var_o).abs() < 1e-10);
    }

    #[test]
    fn degenerate_root_returns_the_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_gaussian(&mean, &DMatrix::zeros(2, 2), &mut rng), mean);
    }

    proptest! {
        #[test]
        fn lambda_bounded_and_posterior_contracts(seed in any::<u64>(), n in 3usize..15, m in 1usize..4, eta in 0.1f64..10.0, s2 in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = spread_points(&mut rng, n);
            let m = m.min(n);
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            let s = state(0, idx, vec![0.0; m], -1.5, eta);
            let c = ComponentCache::build(&s, &x, &(0..n).collect::<Vec<_>>()).unwrap();
            let lam = c.lambda_diag(eta);
            for v in lam.iter() {
                prop_assert!(*v >= 0.0 && *v <= 1.0 / eta + 1e-12);
            }
            let r = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let fc = pseudo_target_full_conditional(&c, eta, &r, s2).unwrap();
            let k_m = c.basis().gram() / eta;
            let eig_post = fc.cov.clone().symmetric_eigen().eigenvalues;
            let eig_gap = (k_m - &fc.cov).symmetric_eigen().eigenvalues;
            let scale = 1.0 / eta;
            prop_assert!(eig_post.min() >= -1e-10 * scale);
            prop_assert!(eig_gap.min() >= -1e-9 * scale);
        }
    }
}
