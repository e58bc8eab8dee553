//! Posterior prediction, scoring rules and cross-validated choice of depth.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{Dataset, Transform};
use crate::error::{Result, SagpError};
use crate::linalg::Points;
use crate::model::{Fit, ModelSpec};
use crate::partition::RpScheme;
use crate::rng::seeded;
use crate::sampler::PosteriorSamples;
use crate::sgp::PseudoBasis;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub locations: Points,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Posterior mean of each active component (rows, in id order) at each location.
    pub per_component_mean: Option<DMatrix<f64>>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Map a standardized-scale result back to original units. Component means
    /// are rescaled only; the response mean is a separate additive offset.
    pub fn back_transform(mut self, t: &Transform) -> Self {
        for v in self.mean.iter_mut().chain(&mut self.lower).chain(&mut self.upper) {
            *v = t.invert_y(*v);
        }
        if let Some(c) = self.per_component_mean.as_mut() {
            *c *= t.y_sd;
        }
        self
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman and Fan type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct DrawPrediction {
    mean: Vec<f64>,
    y: Vec<f64>,
    components: DMatrix<f64>,
}

/// Monte Carlo posterior predictive at standardized locations. Each draw
/// contributes the conditional mean of every component whose box holds the
/// location plus one noisy response draw; intervals are empirical
/// `(alpha/2, 1 - alpha/2)` quantiles of the response draws.
pub fn predict(
    samples: &PosteriorSamples,
    scheme: &RpScheme,
    x_train: &Points,
    x_star: &Points,
    alpha: f64,
    seed: u64,
) -> Result<PredictionResult> {
    if samples.is_empty() {
        return Err(SagpError::Empty("posterior samples"));
    }
    if x_star.is_empty() {
        return Err(SagpError::Empty("prediction locations"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SagpError::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if x_star.dim() != scheme.dim() {
        return Err(SagpError::DimensionMismatch {
            expected: scheme.dim(),
            got: x_star.dim(),
        });
    }
    let n_comp = samples.n_components();
    let mut at: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for s in 0..x_star.len() {
        for id in scheme.locate(x_star.row(s))? {
            let k = samples
                .component_ids
                .iter()
                .position(|&c| c == id)
                .ok_or_else(|| SagpError::Invariant(format!("component {id} has no samples")))?;
            at[k].push(s);
        }
    }
    let n_star = x_star.len();
    let per_draw: Vec<DrawPrediction> = samples
        .draws
        .par_iter()
        .enumerate()
        .map(|(d, draw)| {
            let mut mean = vec![0.0; n_star];
            let mut var = vec![draw.sigma2_eps; n_star];
            let mut components = DMatrix::zeros(n_comp, n_star);
            for k in 0..n_comp {
                if at[k].is_empty() {
                    continue;
                }
                let basis = PseudoBasis::new(x_train.select(&draw.pseudo_inputs[k]), samples.ln_rho[k])?;
                for &s in &at[k] {
                    let (mu, v) = basis.predict(x_star.row(s), &draw.pseudo_targets[k], draw.eta[k]);
                    mean[s] += mu;
                    var[s] += v;
                    components[(k, s)] = mu;
                }
            }
            let mut rng = seeded(seed, d as u64 + 1);
            let y = mean
                .iter()
                .zip(&var)
                .map(|(mu, v)| mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(DrawPrediction { mean, y, components })
        })
        .collect::<Result<_>>()?;

    let n_draws = per_draw.len() as f64;
    let mut mean = vec![0.0; n_star];
    let mut comp = DMatrix::zeros(n_comp, n_star);
    for p in &per_draw {
        mean.iter_mut().zip(&p.mean).for_each(|(acc, v)| *acc += v);
        comp += &p.components;
    }
    mean.iter_mut().for_each(|v| *v /= n_draws);
    comp /= n_draws;

    let mut lower = Vec::with_capacity(n_star);
    let mut upper = Vec::with_capacity(n_star);
    let mut ys = Vec::with_capacity(per_draw.len());
    for s in 0..n_star {
        ys.clear();
        ys.extend(per_draw.iter().map(|p| p.y[s]));
        ys.sort_by(f64::total_cmp);
        lower.push(quantile(&ys, alpha / 2.0));
        upper.push(quantile(&ys, 1.0 - alpha / 2.0));
    }
    Ok(PredictionResult {
        locations: x_star.clone(),
        mean,
        lower,
        upper,
        per_component_mean: Some(comp),
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(SagpError::Empty("metric input"));
    }
    if a != b {
        return Err(SagpError::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    Ok(y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y_true.len() as f64)
}

/// Interval score of a central `1 - alpha` interval: its width plus `2/alpha`
/// times the distance by which `y` falls outside.
pub fn interval_score(lower: f64, upper: f64, y: f64, alpha: f64) -> Result<f64> {
    if lower > upper {
        return Err(SagpError::InvalidInput(format!("interval lower {lower} exceeds upper {upper}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SagpError::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let below = if y < lower { lower - y } else { 0.0 };
    let above = if y > upper { y - upper } else { 0.0 };
    Ok((upper - lower) + 2.0 / alpha * (below + above))
}

pub fn mean_interval_score(lower: &[f64], upper: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(y.len(), lower.len())?;
    check_lengths(y.len(), upper.len())?;
    let mut total = 0.0;
    for i in 0..y.len() {
        total += interval_score(lower[i], upper[i], y[i], alpha)?;
    }
    Ok(total / y.len() as f64)
}

pub fn coverage(lower: &[f64], upper: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(y.len(), lower.len())?;
    check_lengths(y.len(), upper.len())?;
    let inside = (0..y.len()).filter(|&i| lower[i] <= y[i] && y[i] <= upper[i]).count();
    Ok(inside as f64 / y.len() as f64)
}

/// Shuffle `0..n` and deal it into `k` folds whose sizes differ by at most one.
pub fn kfold_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(SagpError::InvalidInput(format!("cannot split {n} points into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (p, i) in idx.into_iter().enumerate() {
        folds[p % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub n_layers: usize,
    pub fold_mse: Vec<f64>,
    pub mean: f64,
    /// Standard error of `mean` across folds.
    pub se: f64,
}

impl CvRow {
    pub fn from_folds(n_layers: usize, fold_mse: Vec<f64>) -> Self {
        let k = fold_mse.len() as f64;
        let mean = fold_mse.iter().sum::<f64>() / k;
        let se = if fold_mse.len() > 1 {
            (fold_mse.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        CvRow { n_layers, fold_mse, mean, se }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    pub selected: usize,
    pub one_se: bool,
}

impl CvReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("layers,mse_mean,mse_se,selected\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.n_layers, r.mean, r.se, r.n_layers == self.selected);
        }
        s
    }
}

/// Depth with the smallest mean CV error, ties going to fewer layers. With the
/// one-standard-error rule, the shallowest depth within one standard error of
/// the best is chosen instead.
pub fn select_layers(rows: &[CvRow], one_se: bool) -> Result<usize> {
    let mut sorted: Vec<&CvRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.n_layers);
    let best = sorted
        .iter()
        .copied()
        .reduce(|a, b| if b.mean < a.mean { b } else { a })
        .ok_or(SagpError::Empty("CV results"))?;
    if !one_se {
        return Ok(best.n_layers);
    }
    let threshold = best.mean + best.se;
    Ok(sorted
        .iter()
        .find(|r| r.mean <= threshold)
        .map_or(best.n_layers, |r| r.n_layers))
}

const FOLD_STREAM: u64 = u64::MAX;

/// `k`-fold cross-validation over candidate depths. Every (depth, fold) fit
/// owns an RNG stream derived from the spec's seed, so results do not depend
/// on `jobs`.
pub fn cv_select_layers(
    data: &Dataset,
    spec: &ModelSpec,
    candidates: &[usize],
    k: usize,
    one_se: bool,
    jobs: usize,
) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(SagpError::Empty("layer candidates"));
    }
    let seed = spec.mcmc.seed;
    let folds = kfold_indices(data.n(), k, &mut seeded(seed, FOLD_STREAM))?;
    let tasks: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..k).map(move |f| (c, f)))
        .collect();
    let run = |&(c, f): &(usize, usize)| -> Result<f64> {
        let held = &folds[f];
        let mut is_held = vec![false; data.n()];
        held.iter().for_each(|&i| is_held[i] = true);
        let train: Vec<usize> = (0..data.n()).filter(|&i| !is_held[i]).collect();
        let spec_l = ModelSpec {
            n_layers: candidates[c],
            ..spec.clone()
        };
        let x_train = data.x.select(&train);
        let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| data.y[i]));
        let stream = (c * k + f) as u64 + 1;
        let fit = Fit::with_rng(&x_train, &y_train, &spec_l, seeded(seed, stream)).map_err(|e| match e {
            SagpError::DatasetTooSmall { n, required } => SagpError::FoldInfeasible {
                fold: f,
                reason: format!("{n} training points cannot support the root component (m = {required})"),
            },
            other => other,
        })?;
        let pred = fit.predict(&data.x.select(held), 0.05, seed ^ stream)?;
        let truth: Vec<f64> = held.iter().map(|&i| data.transform.invert_y(data.y[i])).collect();
        let pm: Vec<f64> = pred.mean.iter().map(|&v| data.transform.invert_y(v)).collect();
        mse(&truth, &pm)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SagpError::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<f64> = pool.install(|| tasks.par_iter().map(run).collect::<Result<_>>())?;
    let rows: Vec<CvRow> = candidates
        .iter()
        .enumerate()
        .map(|(c, &l)| CvRow::from_folds(l, results[c * k..(c + 1) * k].to_vec()))
        .collect();
    let selected = select_layers(&rows, one_se)?;
    Ok(CvReport { rows, selected, one_se })
}

/// `sum_{l=1}^{L} prod_i b_i^(l-1) * n * m^2`, saturating at `u64::MAX`.
pub fn complexity_estimate(d: usize, branching: &[usize], n_layers: usize, n: usize, m: usize) -> Result<u64> {
    let b: Vec<usize> = match branching.len() {
        1 => vec![branching[0]; d],
        len if len == d => branching.to_vec(),
        len => return Err(SagpError::DimensionMismatch { expected: d, got: len }),
    };
    if n_layers == 0 || b.iter().any(|&v| v < 2) {
        return Err(SagpError::InvalidInput("need at least one layer and branching of at least 2".into()));
    }
    let per_layer: u64 = b.iter().fold(1u64, |acc, &v| acc.saturating_mul(v as u64));
    let unit = (n as u64).saturating_mul((m as u64).saturating_mul(m as u64));
    let mut cells = 1u64;
    let mut total = 0u64;
    for _ in 0..n_layers {
        total = total.saturating_add(cells.saturating_mul(unit));
        cells = cells.saturating_mul(per_layer);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{full_gp_posterior, KernelParams};
    use crate::partition::build_full_rp;
    use crate::sampler::{run_mcmc, Draw, McmcConfig, PriorPreset, Priors};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_score_branches() {
        assert_eq!(interval_score(0.0, 1.0, 0.5, 0.05).unwrap(), 1.0);
        assert!((interval_score(0.0, 1.0, -0.1, 0.05).unwrap() - 5.0).abs() < 1e-12);
        assert!((interval_score(0.0, 1.0, 1.2, 0.10).unwrap() - 5.0).abs() < 1e-12);
        assert!(interval_score(1.0, 0.0, 0.5, 0.05).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let mut acc = 0.0;
        for i in 0..50 {
            let d = a[i] - b[i];
            acc += d * d;
        }
        assert_eq!(mse(&a, &b).unwrap(), acc / 50.0);
    }

    #[test]
    fn coverage_examples() {
        let (l, u) = (vec![0.0; 4], vec![1.0; 4]);
        assert_eq!(coverage(&l, &u, &[0.1, 0.2, 0.3, 1.0]).unwrap(), 1.0);
        assert_eq!(coverage(&l, &u, &[-1.0, 2.0, 3.0, -0.1]).unwrap(), 0.0);
        assert_eq!(coverage(&l, &u, &[0.5, 2.0, 0.0, -3.0]).unwrap(), 0.5);
        assert!(coverage(&[], &[], &[]).is_err());
    }

    #[test]
    fn quantile_type_seven() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn ten_folds_of_150() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let folds = kfold_indices(150, 10, &mut rng).unwrap();
        assert!(folds.iter().all(|f| f.len() == 15));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
    }

    #[test]
    fn equal_errors_choose_the_shallowest() {
        let rows: Vec<CvRow> = (1..=4).rev().map(|l| CvRow::from_folds(l, vec![1.0, 1.0])).collect();
        assert_eq!(select_layers(&rows, false).unwrap(), 1);
        assert_eq!(select_layers(&rows, true).unwrap(), 1);
    }

    #[test]
    fn one_se_rule_picks_the_elbow() {
        let rows = vec![
            CvRow { n_layers: 1, fold_mse: vec![], mean: 1.0, se: 0.05 },
            CvRow { n_layers: 2, fold_mse: vec![], mean: 0.5, se: 0.05 },
            CvRow { n_layers: 3, fold_mse: vec![], mean: 0.47, se: 0.05 },
            CvRow { n_layers: 4, fold_mse: vec![], mean: 0.46, se: 0.05 },
        ];
        assert_eq!(select_layers(&rows, false).unwrap(), 4);
        assert_eq!(select_layers(&rows, true).unwrap(), 2);
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity_estimate(1, &[2], 3, 200, 10).unwrap(), 140_000);
        assert_eq!(complexity_estimate(1, &[2], 1, 200, 10).unwrap(), 200 * 100);
        assert_eq!(complexity_estimate(2, &[2, 3], 2, 100, 5).unwrap(), 17_500);
        assert_eq!(complexity_estimate(3, &[1000], 20, usize::MAX, 1000).unwrap(), u64::MAX);
    }

    fn single_draw_fixture() -> (PosteriorSamples, RpScheme, Points) {
        let x = Points::from_scalars(&[0.1, 0.2, 0.3, 0.3, 0.6, 0.7, 0.8]);
        let scheme = build_full_rp(1, &[2], 2, 2).unwrap().prune(&x).unwrap();
        assert_eq!(scheme.active_ids(), vec![0, 1, 2]);
        let draw = Draw {
            iteration: 0,
            sigma2_eps: 0.0,
            eta: vec![1.0, 10.0, 10.0],
            pseudo_targets: vec![
                DVector::from_vec(vec![0.5, -1.0]),
                DVector::from_vec(vec![0.2, 0.7]),
                DVector::from_vec(vec![-0.3, 0.4]),
            ],
            pseudo_inputs: vec![vec![3, 5], vec![0, 2], vec![4, 6]],
        };
        let samples = PosteriorSamples {
            component_ids: vec![0, 1, 2],
            layers: vec![1, 2, 2],
            ln_rho: vec![-2.0, -100.0, -100.0],
            m: 2,
            draws: vec![draw],
        };
        (samples, scheme, x)
    }

    #[test]
    fn exact_at_shared_pseudo_input() {
        let (samples, scheme, x) = single_draw_fixture();
        // x = 0.3 is duplicated: one copy anchors the root (entry 0), the other the left child (entry 1)
        let p = predict(&samples, &scheme, &x, &Points::from_scalars(&[0.3]), 0.05, 0).unwrap();
        assert!((p.mean[0] - (0.5 + 0.7)).abs() < 1e-10);
        assert!((p.lower[0] - p.mean[0]).abs() < 1e-6);
    }

    #[test]
    fn alpha_one_collapses_to_the_median() {
        let (mut samples, scheme, x) = single_draw_fixture();
        let base = samples.draws[0].clone();
        samples.draws = (0..7).map(|i| Draw { sigma2_eps: 0.1 * (i + 1) as f64, ..base.clone() }).collect();
        let p = predict(&samples, &scheme, &x, &Points::from_scalars(&[0.45, 0.9]), 1.0, 3).unwrap();
        assert_eq!(p.lower, p.upper);
    }

    #[test]
    fn component_means_add_up() {
        let (samples, scheme, x) = single_draw_fixture();
        let grid = Points::from_scalars(&[0.0, 0.2, 0.5, 0.51, 0.77, 1.0]);
        let p = predict(&samples, &scheme, &x, &grid, 0.05, 0).unwrap();
        let c = p.per_component_mean.unwrap();
        for s in 0..grid.len() {
            assert!((c.column(s).sum() - p.mean[s]).abs() < 1e-12);
        }
        // outside a box a component contributes nothing
        assert_eq!(c[(2, 1)], 0.0);
        assert_eq!(c[(1, 4)], 0.0);
    }

    #[test]
    fn empty_samples_rejected() {
        let (mut samples, scheme, x) = single_draw_fixture();
        samples.draws.clear();
        assert!(matches!(
            predict(&samples, &scheme, &x, &Points::from_scalars(&[0.5]), 0.05, 0),
            Err(SagpError::Empty(_))
        ));
    }

    #[test]
    fn predictive_mean_tracks_dense_gp() {
        let x = Points::from_scalars(&[0.1, 0.35, 0.6, 0.9]);
        let y = DVector::from_vec(vec![0.5, -0.2, 0.9, 0.1]);
        let scheme = build_full_rp(1, &[2], 1, 4).unwrap().prune(&x).unwrap();
        let priors = Priors::preset(PriorPreset::AmplitudeDecay, 1).unwrap();
        let cfg = McmcConfig {
            n_iter: 4000,
            burn_in: 500,
            seed: 9,
            update_eta: false,
            update_sigma2: false,
            init_sigma2: 0.2,
            ..McmcConfig::default()
        };
        let samples = run_mcmc(&x, &y, &scheme, &priors, &cfg).unwrap();
        let grid = Points::from_scalars(&[0.2, 0.5, 0.75]);
        let p = predict(&samples, &scheme, &x, &grid, 0.05, 1).unwrap();
        let kp = KernelParams::from_ln_rho(priors.ln_rho(1), priors.eta_initial(1)).unwrap();
        let (mean, var) = crate::linalg::full_gp_predict(&x, &y, &kp, 0.2, &grid).unwrap();
        let (_, post) = full_gp_posterior(&x, &y, &kp, 0.2).unwrap();
        let n = samples.len() as f64;
        for s in 0..3 {
            // per-draw means are linear in the pseudo-targets, so their spread is below var_f
            let se = (var[s] / n).sqrt().max(1e-12);
            assert!((p.mean[s] - mean[s]).abs() < 3.0 * se, "{} vs {} (se {se}, post {})", p.mean[s], mean[s], post[(0, 0)]);
        }
    }

    proptest! {
        #[test]
        fn empirical_quantiles_minimize_mean_score(ys in prop::collection::vec(-3.0f64..3.0, 5..40), alpha in 0.05f64..0.6) {
            let mut sorted = ys.clone();
            sorted.sort_by(f64::total_cmp);
            let n = ys.len();
            let score = |l: f64, u: f64| {
                mean_interval_score(&vec![l; n], &vec![u; n], &ys, alpha).unwrap()
            };
            // the score is piecewise linear in (l, u) with kinks at the data
            let mut best = f64::INFINITY;
            for a in 0..n {
                for b in a..n {
                    best = best.min(score(sorted[a], sorted[b]));
                }
            }
            let k = ((n as f64 * alpha / 2.0).ceil() as usize).max(1);
            let at_quantiles = score(sorted[k - 1], sorted[n - k]);
            prop_assert!((at_quantiles - best).abs() < 1e-9 * (1.0 + best), "{at_quantiles} vs {best}");
        }
    }
}
