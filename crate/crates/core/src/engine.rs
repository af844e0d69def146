//! The optimization loop, the gradient-variance probe and the sensitivity
//! sweep.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::combiner::{self, MomentAverages};
use crate::cv::{self, CvMatrix, CvSet};
use crate::error::{Error, Result};
use crate::estimators::{self, PairedSample};
use crate::model::Dataset;
use crate::par::Execution;
use crate::rng::{stream, Purpose, Rng};
use crate::stats::mean_stderr;
use crate::varfam::{self, FlatGradient, Gaussian, VariationalParams};

/// A run is flagged divergent once its ELBO drops below this multiple of the
/// initial ELBO.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Warm-up used to pick the point where gradient variance is probed.
pub const PROBE_WARMUP_ITERS: usize = 25;
pub const PROBE_WARMUP_LR: f64 = 0.08;
pub const PROBE_WARMUP_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub momentum: f64,
    pub gamma: f64,
    pub v0: f64,
    pub cvs: CvSet,
    pub seed: u64,
    pub local_reparam: bool,
    pub elbo_samples: usize,
    pub projection: Projection,
    /// Record wall-clock time per iteration. Off by default so traces are
    /// byte-identical across repeats.
    pub timing: bool,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 0.1,
            iterations: 500,
            batch: 10,
            momentum: 0.9,
            gamma: 0.02,
            v0: 1e-3,
            cvs: CvSet::empty(),
            seed: 0,
            local_reparam: false,
            elbo_samples: 32,
            projection: Projection::default(),
            timing: false,
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::BadGamma(self.gamma));
        }
        if !(self.v0 >= 0.0 && self.v0.is_finite()) {
            return bad(format!("v0 must be non-negative, got {}", self.v0));
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.elbo_samples == 0 {
            return bad("elbo_samples must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: VariationalParams,
    pub velocity: FlatGradient,
    pub moments: MomentAverages,
    pub t: usize,
}

impl OptimizerState {
    pub fn new(params: VariationalParams, num_cvs: usize) -> Self {
        OptimizerState {
            velocity: FlatGradient::zeros(params.dim()),
            params,
            moments: MomentAverages::empty(num_cvs),
            t: 0,
        }
    }
}

/// How a step that leaves the positive-diagonal region is mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// Clamp each diagonal entry of `L` at the floor.
    Floor,
    /// Negate any column whose diagonal went negative (together with the
    /// matching velocity entries), then clamp. `q` is unchanged by the
    /// negation, so an overshoot past zero does not land next to the
    /// entropy singularity.
    #[default]
    Reflect,
}

/// `v ← βv + ĝ`, `w ← w + lr·v` (ascent), with the diagonal floor on `L`.
/// The state is left untouched if the update is not finite.
pub fn sgd_momentum_step(
    state: &mut OptimizerState,
    ghat: &FlatGradient,
    lr: f64,
    beta: f64,
) -> Result<()> {
    sgd_momentum_step_with(state, ghat, lr, beta, Projection::Floor)
}

pub fn sgd_momentum_step_with(
    state: &mut OptimizerState,
    ghat: &FlatGradient,
    lr: f64,
    beta: f64,
    projection: Projection,
) -> Result<()> {
    if ghat.len() != state.velocity.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has length {}, parameters {}",
            ghat.len(),
            state.velocity.len()
        )));
    }
    let velocity = FlatGradient(&state.velocity.0 * beta + &ghat.0);
    if !velocity.is_finite() || !(lr * velocity.norm()).is_finite() {
        return Err(Error::NonFinite(format!(
            "update at iteration {} is not finite",
            state.t + 1
        )));
    }
    let mut velocity = velocity;
    match projection {
        Projection::Floor => state.params.add_scaled(&velocity, lr),
        Projection::Reflect => {
            let d = state.params.dim();
            for j in state.params.add_scaled_reflecting(&velocity, lr) {
                for i in j..d {
                    let k = varfam::tri_index(d, i, j);
                    velocity[k] = -velocity[k];
                }
            }
        }
    }
    state.velocity = velocity;
    state.t += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// ELBO estimate on the unnormalized scale.
    pub elbo: f64,
    pub grad_sq_norm: f64,
    pub weight_norm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub initial_elbo: f64,
    pub records: Vec<IterationRecord>,
    pub diverged: bool,
    /// Set when a numerical failure stopped the run early.
    pub abort: Option<String>,
    pub final_params: VariationalParams,
}

impl RunOutcome {
    pub fn final_elbo(&self) -> f64 {
        self.records.last().map_or(self.initial_elbo, |r| r.elbo)
    }
}

/// Base gradient and CV matrix for every pair, in pair order.
pub fn evaluate_pairs(
    g: &Gaussian,
    pairs: &[PairedSample],
    ds: &Dataset,
    cvs: &CvSet,
    local_reparam: bool,
    exec: Execution,
) -> Result<(Vec<FlatGradient>, Vec<CvMatrix>)> {
    if cvs.needs_sqrt() {
        // surface a failed square root once instead of per pair
        g.sqrt()?;
    }
    let evals = exec.map_slice(pairs, |pair| -> Result<(FlatGradient, CvMatrix)> {
        let h = estimators::base_gradient(g, pair, ds, local_reparam);
        let c = cv::evaluate_cv_set(cvs, g, pair, ds)?;
        Ok((h, c))
    });
    let mut hs = Vec::with_capacity(pairs.len());
    let mut cs = Vec::with_capacity(pairs.len());
    for e in evals {
        let (h, c) = e?;
        hs.push(h);
        cs.push(c);
    }
    Ok((hs, cs))
}

/// `mean_b (h_b + C_b a)`.
pub fn combined_mean(hs: &[FlatGradient], cs: &[CvMatrix], a: &DVector<f64>) -> Result<FlatGradient> {
    let mut total = FlatGradient::zeros(hs.first().map_or(0, |h| h.dim()));
    for (h, c) in hs.iter().zip(cs) {
        total += &combiner::combine(h, c, a)?;
    }
    Ok(total * (1.0 / hs.len().max(1) as f64))
}

/// Weights from the previous averages; zero before any batch has been seen.
pub fn lagged_weights(mom: &MomentAverages, v0: f64, dim: usize) -> Result<DVector<f64>> {
    if mom.t == 0 {
        Ok(DVector::zeros(mom.num_cvs()))
    } else {
        combiner::bayes_weights(mom, v0, dim)
    }
}

fn elbo_scaled(w: &VariationalParams, ds: &Dataset, samples: usize, rng: &mut Rng) -> f64 {
    varfam::elbo_estimate(w, ds, samples, rng) * ds.len() as f64
}

/// Runs SGD with momentum from the standard normal initialization.
///
/// Per iteration: draw pairs, evaluate `h_b` and `C_b`, weights from the
/// previous averages, `ĝ = mean_b(h_b + C_b a)`, fold the batch into the
/// averages, step, then estimate the ELBO with fresh noise on the full data.
pub fn run_inference(ds: &Dataset, cfg: &RunConfig) -> Result<RunOutcome> {
    run_inference_from(ds, cfg, VariationalParams::standard(ds.dim()))
}

pub fn run_inference_from(
    ds: &Dataset,
    cfg: &RunConfig,
    init: VariationalParams,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.batch > ds.len() {
        return Err(Error::BadBatchSize { batch: cfg.batch, n: ds.len() });
    }
    if init.dim() != ds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameters have dimension {}, data {}",
            init.dim(),
            ds.dim()
        )));
    }
    let d = init.flat_len();
    let initial_elbo = elbo_scaled(
        &init,
        ds,
        cfg.elbo_samples,
        &mut stream(cfg.seed, Purpose::InitialElbo, 0),
    );
    let mut state = OptimizerState::new(init, cfg.cvs.len());
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut diverged = false;
    let mut abort = None;

    for t in 1..=cfg.iterations {
        let started = cfg.timing.then(Instant::now);
        let step = (|| -> Result<(f64, f64)> {
            let g = Gaussian::new(state.params.clone());
            let pairs = estimators::draw_pairs(
                &mut stream(cfg.seed, Purpose::Pairs, t as u64),
                ds.len(),
                cfg.batch,
                ds.dim(),
            )?;
            let (hs, cs) = evaluate_pairs(&g, &pairs, ds, &cfg.cvs, cfg.local_reparam, cfg.execution)?;
            let a = lagged_weights(&state.moments, cfg.v0, d)?;
            let ghat = combined_mean(&hs, &cs, &a)?;
            if !ghat.is_finite() {
                return Err(Error::NonFinite(format!("gradient at iteration {t} is not finite")));
            }
            if !cfg.cvs.is_empty() {
                let (bcc, bch) = combiner::batch_moments(&hs, &cs);
                state.moments =
                    combiner::update_moment_averages(&state.moments, &bcc, &bch, cfg.gamma, cfg.batch)?;
            }
            sgd_momentum_step_with(&mut state, &ghat, cfg.lr, cfg.momentum, cfg.projection)?;
            Ok((ghat.norm_squared(), a.norm()))
        })();
        let (grad_sq_norm, weight_norm) = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::SingularMoments { .. } | Error::Linalg(_))) => {
                abort = Some(format!("iteration {t}: {e}"));
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let elbo = elbo_scaled(
            &state.params,
            ds,
            cfg.elbo_samples,
            &mut stream(cfg.seed, Purpose::Elbo, t as u64),
        );
        let ms = started.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
        records.push(IterationRecord { iter: t, elbo, grad_sq_norm, weight_norm, ms });
        if !elbo.is_finite() {
            abort = Some(format!("iteration {t}: ELBO is not finite"));
            diverged = true;
            break;
        }
        if elbo < DIVERGENCE_FACTOR * initial_elbo.min(0.0) {
            diverged = true;
        }
    }
    Ok(RunOutcome {
        initial_elbo,
        records,
        diverged,
        abort,
        final_params: state.params,
    })
}

/// Settings for [`variance_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub cvs: CvSet,
    pub v0: f64,
    /// Pairs used to estimate the moments.
    pub m: usize,
    /// Fresh pairs used to estimate `E‖ĝ‖²` for each repetition.
    pub n_outer: usize,
    pub reps: usize,
    pub batch: usize,
    pub seed: u64,
    pub local_reparam: bool,
    pub execution: Execution,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            cvs: CvSet::empty(),
            v0: 1e-3,
            m: 100,
            n_outer: 100,
            reps: 100,
            batch: 10,
            seed: 0,
            local_reparam: false,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub mean: f64,
    pub stderr: f64,
    /// One value per repetition, in repetition order.
    pub values: Vec<f64>,
}

/// `count` pairs drawn as consecutive minibatches of at most `batch` examples.
pub fn draw_pair_sequence(
    rng: &mut Rng,
    n: usize,
    count: usize,
    batch: usize,
    dim: usize,
) -> Result<Vec<PairedSample>> {
    let batch = batch.min(n).max(1);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let b = batch.min(count - out.len());
        out.extend(estimators::draw_pairs(rng, n, b, dim)?);
    }
    Ok(out)
}

/// Estimates `E‖h + C a‖²` at fixed `w`, where `a` comes from the Bayesian
/// rule applied to moments estimated from `m` pairs at `moment_params`.
///
/// Each repetition uses independent streams for the two stages. Streams are
/// keyed by repetition only, so cells with different `v0` or `m` share
/// randomness and compare as paired samples; a smaller `m` uses a prefix of
/// the pairs of a larger one.
pub fn variance_probe(
    ds: &Dataset,
    w: &VariationalParams,
    moment_params: &VariationalParams,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if cfg.reps == 0 || cfg.n_outer == 0 {
        return Err(Error::Config("probe needs at least one repetition and one outer pair".into()));
    }
    let g = Gaussian::new(w.clone());
    let gm = Gaussian::new(moment_params.clone());
    let d = w.flat_len();
    let values = cfg.execution.map(cfg.reps, |r| -> Result<f64> {
        let a = if cfg.cvs.is_empty() {
            DVector::zeros(0)
        } else if cfg.m == 0 {
            // no moment samples: the prior pins the weights at zero
            DVector::zeros(cfg.cvs.len())
        } else {
            let pairs = draw_pair_sequence(
                &mut stream(cfg.seed, Purpose::ProbeMoments, r as u64),
                ds.len(),
                cfg.m,
                cfg.batch,
                ds.dim(),
            )?;
            let (hs, cs) = evaluate_pairs(&gm, &pairs, ds, &cfg.cvs, cfg.local_reparam, Execution::Sequential)?;
            let (cc, ch) = combiner::batch_moments(&hs, &cs);
            combiner::bayes_weights(&MomentAverages::from_batch(cc, ch, cfg.m as f64), cfg.v0, d)?
        };
        probe_at_weights(ds, &g, cfg, &a, r)
    });
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(ProbeResult { mean, stderr, values })
}

/// Stage two of the probe for given weights.
pub fn probe_at_weights(
    ds: &Dataset,
    g: &Gaussian,
    cfg: &ProbeConfig,
    a: &DVector<f64>,
    rep: usize,
) -> Result<f64> {
    let pairs = draw_pair_sequence(
        &mut stream(cfg.seed, Purpose::ProbeOuter, rep as u64),
        ds.len(),
        cfg.n_outer,
        cfg.batch,
        ds.dim(),
    )?;
    let (hs, cs) = evaluate_pairs(g, &pairs, ds, &cfg.cvs, cfg.local_reparam, Execution::Sequential)?;
    let mut total = 0.0;
    for (h, c) in hs.iter().zip(&cs) {
        total += combiner::combine(h, c, a)?.norm_squared();
    }
    Ok(total / hs.len() as f64)
}

/// Runs SGD from the standard initialization with `samples`-pair base
/// gradients and returns the parameters after every iteration, starting
/// with the initial ones.
pub fn warmup_path(
    ds: &Dataset,
    iterations: usize,
    lr: f64,
    momentum: f64,
    samples: usize,
    batch: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<VariationalParams>> {
    let mut state = OptimizerState::new(VariationalParams::standard(ds.dim()), 0);
    let mut path = vec![state.params.clone()];
    for t in 1..=iterations {
        let g = Gaussian::new(state.params.clone());
        let pairs = draw_pair_sequence(
            &mut stream(seed, Purpose::ProbeWarmup, t as u64),
            ds.len(),
            samples,
            batch,
            ds.dim(),
        )?;
        let (hs, cs) = evaluate_pairs(&g, &pairs, ds, &CvSet::empty(), false, exec)?;
        let ghat = combined_mean(&hs, &cs, &DVector::zeros(0))?;
        sgd_momentum_step_with(&mut state, &ghat, lr, momentum, Projection::Reflect)?;
        path.push(state.params.clone());
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityConfig {
    pub probe: ProbeConfig,
    pub v0_grid: Vec<f64>,
    pub m_grid: Vec<usize>,
    pub lags: Vec<usize>,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub v0: f64,
    pub m: usize,
    pub lag: usize,
    pub grad_sq_norm_mean: f64,
    pub stderr: f64,
}

/// Probe value for every `(lag, v0, M)` cell at the point reached by the
/// warm-up run. With `lag > 0` the moments are estimated at the parameters
/// from `lag` warm-up iterations earlier.
pub fn sensitivity_sweep(ds: &Dataset, cfg: &SensitivityConfig) -> Result<Vec<SensitivityRow>> {
    Ok(sensitivity_cells(ds, cfg)?.into_iter().map(|(row, _)| row).collect())
}

/// Like [`sensitivity_sweep`], also returning each cell's per-repetition
/// values. Cells share repetition streams, so values at the same index are
/// paired.
pub fn sensitivity_cells(ds: &Dataset, cfg: &SensitivityConfig) -> Result<Vec<(SensitivityRow, Vec<f64>)>> {
    if cfg.v0_grid.is_empty() || cfg.m_grid.is_empty() || cfg.lags.is_empty() {
        return Err(Error::Config("sensitivity grids must be nonempty".into()));
    }
    if let Some(&lag) = cfg.lags.iter().find(|&&l| l > PROBE_WARMUP_ITERS) {
        return Err(Error::Config(format!(
            "lag {lag} exceeds the {PROBE_WARMUP_ITERS} warm-up iterations"
        )));
    }
    if let Some(v0) = cfg.v0_grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("v0 must be non-negative, got {v0}")));
    }
    let path = warmup_path(
        ds,
        PROBE_WARMUP_ITERS,
        PROBE_WARMUP_LR,
        cfg.momentum,
        PROBE_WARMUP_SAMPLES,
        PROBE_WARMUP_SAMPLES,
        cfg.probe.seed,
        cfg.probe.execution,
    )?;
    let w = &path[PROBE_WARMUP_ITERS];
    let mut cells = Vec::new();
    for &lag in &cfg.lags {
        let wm = &path[PROBE_WARMUP_ITERS - lag];
        for &v0 in &cfg.v0_grid {
            for &m in &cfg.m_grid {
                let probe = ProbeConfig { v0, m, ..cfg.probe.clone() };
                let res = variance_probe(ds, w, wm, &probe)?;
                let row = SensitivityRow {
                    v0,
                    m,
                    lag,
                    grad_sq_norm_mean: res.mean,
                    stderr: res.stderr,
                };
                cells.push((row, res.values));
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn unit(dim: usize, k: usize) -> FlatGradient {
        let mut g = FlatGradient::zeros(dim);
        g[k] = 1.0;
        g
    }

    #[test]
    fn plain_step_moves_one_coordinate() {
        let w = VariationalParams::standard(2);
        let mut s = OptimizerState::new(w.clone(), 0);
        sgd_momentum_step(&mut s, &unit(2, 0), 0.1, 0.0).unwrap();
        let diff = s.params.to_flat() - w.to_flat();
        assert!((diff[0] - 0.1).abs() < 1e-15);
        assert_eq!(diff.rows(1, 4).norm(), 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = OptimizerState::new(VariationalParams::standard(2), 0);
        let g = unit(2, 1);
        sgd_momentum_step(&mut s, &g, 0.1, 0.9).unwrap();
        let first = s.params.to_flat();
        sgd_momentum_step(&mut s, &g, 0.1, 0.9).unwrap();
        let second = s.params.to_flat() - first;
        assert!((second[1] - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let w = VariationalParams::standard(3);
        let mut s = OptimizerState::new(w.clone(), 0);
        sgd_momentum_step(&mut s, &FlatGradient::zeros(3), 0.5, 0.9).unwrap();
        assert_eq!(s.params, w);
    }

    #[test]
    fn non_finite_step_is_rejected() {
        let w = VariationalParams::standard(2);
        let mut s = OptimizerState::new(w.clone(), 0);
        let mut g = FlatGradient::zeros(2);
        g[2] = f64::NAN;
        assert!(matches!(sgd_momentum_step(&mut s, &g, 0.1, 0.9), Err(Error::NonFinite(_))));
        assert_eq!(s.params, w);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for cfg in [
            RunConfig { lr: 0.0, ..Default::default() },
            RunConfig { momentum: 1.0, ..Default::default() },
            RunConfig { gamma: 0.0, ..Default::default() },
            RunConfig { v0: -1.0, ..Default::default() },
            RunConfig { batch: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn runs_are_deterministic_and_schedule_independent() {
        let ds = synthetic::gaussian_blobs(60, 1);
        let cfg = RunConfig {
            iterations: 20,
            cvs: CvSet::parse("S7").unwrap(),
            ..Default::default()
        };
        let a = run_inference(&ds, &cfg).unwrap();
        let b = run_inference(&ds, &RunConfig { execution: Execution::Sequential, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 20);
        assert!(a.records.iter().all(|r| r.ms == 0.0));
        assert_eq!(a.records[0].weight_norm, 0.0);
        assert!(a.records[1].weight_norm > 0.0);
    }

    #[test]
    fn empty_set_matches_base_run() {
        let ds = synthetic::gaussian_blobs(60, 2);
        let cfg = RunConfig { iterations: 15, ..Default::default() };
        let a = run_inference(&ds, &cfg).unwrap();
        let set = CvSet::new("empty", vec![]).unwrap();
        let b = run_inference(&ds, &RunConfig { cvs: set, ..cfg }).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn probe_without_cvs_is_mean_squared_base_gradient() {
        let ds = synthetic::gaussian_blobs(40, 3);
        let w = synthetic::random_params(ds.dim(), 1);
        let cfg = ProbeConfig { reps: 3, n_outer: 20, ..Default::default() };
        let res = variance_probe(&ds, &w, &w, &cfg).unwrap();
        let g = Gaussian::new(w.clone());
        let pairs = draw_pair_sequence(&mut stream(0, Purpose::ProbeOuter, 1), 40, 20, 10, 3).unwrap();
        let direct: f64 = pairs
            .iter()
            .map(|p| estimators::base_gradient(&g, p, &ds, false).norm_squared())
            .sum::<f64>()
            / 20.0;
        assert!((res.values[1] - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn sweep_shape_and_errors() {
        let ds = synthetic::gaussian_blobs(40, 4);
        let cfg = SensitivityConfig {
            probe: ProbeConfig {
                cvs: CvSet::parse("S4").unwrap(),
                reps: 2,
                n_outer: 5,
                ..Default::default()
            },
            v0_grid: vec![1e-5, 1e-3, 1e-1],
            m_grid: vec![10, 100],
            lags: vec![0, 10],
            momentum: 0.9,
        };
        let rows = sensitivity_sweep(&ds, &cfg).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(sensitivity_sweep(&ds, &SensitivityConfig { v0_grid: vec![], ..cfg.clone() }).is_err());
        assert!(sensitivity_sweep(&ds, &SensitivityConfig { lags: vec![30], ..cfg }).is_err());
    }
}
