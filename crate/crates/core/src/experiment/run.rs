use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{Algorithm, ExperimentConfig, KernelKind, Problem};
use super::report::{DivergenceCounts, MetricRow, RdaBiasEntry, Report, RepTrajectory, Summary};
use crate::dynamics::{lr_mean_trajectory, ospca_mean_ode, rda_limit_bias, sign_stable_intervals, uniform_grid, MeanTrajectory};
use crate::error::{Error, Result};
use crate::models::{
    build_ar_covariance, lsq_gradient_into, random_sparse_coefficients, random_unit_vector, LinearModel, PcaState,
    ProblemModel, SpcaModel,
};
use crate::numerics::{rng_split, RngStream};
use crate::optimizer::{AverageAccumulator, OptimizerState, Penalty, TuningSchedule};
use crate::sde::{band_from_quantiles, sde_coefficients, simulate_v, Band, KernelSpec};

/// Largest tolerated share of diverged repetitions or band paths, in percent.
pub const MAX_DIVERGED_PCT: f64 = 5.0;

/// Stream of the base RNG; repetitions and SDE paths are split from it.
const BASE_STREAM: u64 = 0;
const COEF_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

/// Iterates of one repetition at the grid times.
#[derive(Debug, Clone)]
struct RepOutcome {
    snapshots: Vec<Vec<f64>>,
    risk: Vec<Option<f64>>,
}

/// Model, schedule and mean path shared by every run of one config.
struct Setup {
    model: ProblemModel,
    schedule: TuningSchedule,
    traj: MeanTrajectory,
    truth: Vec<f64>,
    steps: Vec<u64>,
    u0: Option<DMatrix<f64>>,
}

/// Step index of grid time `t`, `⌊t/γ⌋`.
pub fn step_index(t: f64, gamma: f64) -> u64 {
    (t / gamma + 1e-9).floor() as u64
}

/// `f₀(w̄) − f₀(w*) = ½(w̄ − w*)ᵀH(w̄ − w*)`.
pub fn excess_risk_of_average(model: &LinearModel, avg: &[f64]) -> Result<f64> {
    if avg.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: avg.len(),
        });
    }
    Ok(model.excess_risk(avg))
}

/// `(|{w=0, w*=0}|/|{w*=0}|, |{w=0, w*≠0}|/|{w*≠0}|)`; `None` for an empty set.
pub fn support_proportions(w: &[f64], truth: &[f64]) -> (Option<f64>, Option<f64>) {
    let (mut tz, mut nz, mut fz, mut na) = (0usize, 0usize, 0usize, 0usize);
    for (x, s) in w.iter().zip(truth) {
        if *s == 0.0 {
            nz += 1;
            tz += (*x == 0.0) as usize;
        } else {
            na += 1;
            fz += (*x == 0.0) as usize;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    (ratio(tz, nz), ratio(fz, na))
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(f)
}

fn build_lr_model(cfg: &ExperimentConfig) -> Result<LinearModel> {
    let h = match &cfg.h_diag {
        Some(diag) => DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        None => build_ar_covariance(cfg.d, cfg.rho)?,
    };
    let w_star = match &cfg.w_star {
        Some(w) => w.clone(),
        None => {
            let mut rng = RngStream::new(cfg.coef_seed.unwrap_or(cfg.seed), COEF_STREAM);
            random_sparse_coefficients(cfg.d, cfg.support, cfg.min_active_magnitude, &mut rng)?
        }
    };
    LinearModel::new(h, DVector::from_vec(w_star), cfg.sigma_eps)
}

fn build_pca_model(cfg: &ExperimentConfig) -> Result<SpcaModel> {
    let mut model = SpcaModel::spiked(cfg.d, cfg.pca_support, &cfg.pca_spikes)?;
    model.u_star = model.u_star.columns(0, cfg.k).into_owned();
    model.eigvals.truncate(cfg.k);
    Ok(model)
}

fn pca_start(cfg: &ExperimentConfig) -> DMatrix<f64> {
    let mut rng = RngStream::new(cfg.seed, INIT_STREAM);
    let cols: Vec<f64> = (0..cfg.k).flat_map(|_| random_unit_vector(cfg.d, &mut rng)).collect();
    DMatrix::from_column_slice(cfg.d, cfg.k, &cols)
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let grid = uniform_grid(cfg.horizon, cfg.dt)?;
    let steps = grid.iter().map(|&t| step_index(t, cfg.gamma)).collect();
    match cfg.problem {
        Problem::Lr => {
            let model = build_lr_model(cfg)?;
            let truth = model.w_star.as_slice().to_vec();
            let traj = lr_mean_trajectory(&model.h, &vec![0.0; cfg.d], &truth, &grid)?;
            Ok(Setup {
                model: ProblemModel::Linear(model),
                schedule,
                traj,
                truth,
                steps,
                u0: None,
            })
        }
        Problem::Pca => {
            let model = build_pca_model(cfg)?;
            let u0 = pca_start(cfg);
            let traj = ospca_mean_ode(&model.c, &model.u_star, &u0, &grid)?;
            let truth = model.u_star.as_slice().to_vec();
            Ok(Setup {
                model: ProblemModel::Spca(model),
                schedule,
                traj,
                truth,
                steps,
                u0: Some(u0),
            })
        }
    }
}

fn lr_rep(model: &LinearModel, schedule: &TuningSchedule, gamma: f64, steps: &[u64], rng: &mut RngStream) -> Result<RepOutcome> {
    let d = model.dim();
    let mut state = OptimizerState::new(vec![0.0; d], gamma)?;
    let mut acc = AverageAccumulator::new(d);
    let (mut z, mut x, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut out = RepOutcome {
        snapshots: Vec::with_capacity(steps.len()),
        risk: Vec::with_capacity(steps.len()),
    };
    let record = |state: &OptimizerState, acc: &AverageAccumulator, out: &mut RepOutcome| {
        let risk = match acc.mean() {
            Some(avg) => model.excess_risk(&avg),
            None => model.excess_risk(&state.w),
        };
        out.snapshots.push(state.w.clone());
        out.risk.push(Some(risk));
    };
    let mut next = 0;
    while next < steps.len() && steps[next] == 0 {
        record(&state, &acc, &mut out);
        next += 1;
    }
    let last = *steps.last().unwrap_or(&0);
    for _ in 0..last {
        let y = model.sample_into(rng, &mut z, &mut x);
        lsq_gradient_into(&state.w, &x, y, &mut grad);
        state.step(&grad, schedule, &Penalty::L1)?;
        acc.push(&state.w);
        while next < steps.len() && steps[next] == state.n {
            record(&state, &acc, &mut out);
            next += 1;
        }
    }
    Ok(out)
}

fn pca_rep(model: &SpcaModel, u0: &DMatrix<f64>, schedule: &TuningSchedule, gamma: f64, steps: &[u64], rng: &mut RngStream) -> Result<RepOutcome> {
    let d = model.dim();
    let mut state = PcaState::new(u0.clone(), gamma)?;
    let (mut z, mut x) = (vec![0.0; d], vec![0.0; d]);
    let mut out = RepOutcome {
        snapshots: Vec::with_capacity(steps.len()),
        risk: vec![None; steps.len()],
    };
    let mut next = 0;
    while next < steps.len() && steps[next] == 0 {
        out.snapshots.push(state.u.as_slice().to_vec());
        next += 1;
    }
    let last = *steps.last().unwrap_or(&0);
    for _ in 0..last {
        model.factor.sample_into(rng, &mut z, &mut x);
        state.step(&x, schedule)?;
        while next < steps.len() && steps[next] == state.n {
            out.snapshots.push(state.u.as_slice().to_vec());
            next += 1;
        }
    }
    Ok(out)
}

fn check_divergence(diverged: usize, total: usize) -> Result<()> {
    if diverged as f64 > total as f64 * MAX_DIVERGED_PCT / 100.0 {
        return Err(Error::TooManyDiverged {
            diverged,
            total,
            limit_pct: MAX_DIVERGED_PCT,
        });
    }
    Ok(())
}

/// Runs all repetitions in index order; diverged ones are dropped and counted.
fn run_reps(cfg: &ExperimentConfig, s: &Setup, base: &RngStream) -> Result<(Vec<(usize, RepOutcome)>, usize)> {
    let results: Vec<Result<RepOutcome>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_split(base, r as u64);
            match &s.model {
                ProblemModel::Linear(m) => lr_rep(m, &s.schedule, cfg.gamma, &s.steps, &mut rng),
                ProblemModel::Spca(m) => pca_rep(m, s.u0.as_ref().unwrap(), &s.schedule, cfg.gamma, &s.steps, &mut rng),
            }
        })
        .collect();
    let mut kept = Vec::with_capacity(cfg.reps);
    let mut diverged = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(out) => kept.push((r, out)),
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    check_divergence(diverged, cfg.reps)?;
    Ok((kept, diverged))
}

/// Flips each PCA column of a repetition whose terminal value points away
/// from the terminal mean path, so it is compared against `−U_j(t)`.
fn align_signs(reps: &mut [(usize, RepOutcome)], traj: &MeanTrajectory, d: usize, k: usize) {
    let target = traj.values.last().unwrap();
    for (_, out) in reps.iter_mut() {
        let Some(last) = out.snapshots.last() else { continue };
        let flips: Vec<bool> = (0..k)
            .map(|j| {
                let col = j * d..(j + 1) * d;
                last[col.clone()].iter().zip(&target[col]).map(|(a, b)| a * b).sum::<f64>() < 0.0
            })
            .collect();
        for snap in &mut out.snapshots {
            for (j, _) in flips.iter().enumerate().filter(|(_, f)| **f) {
                snap[j * d..(j + 1) * d].iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
}

fn build_band(cfg: &ExperimentConfig, s: &Setup, base: &RngStream) -> Result<(Band, usize)> {
    let factor = match &s.model {
        ProblemModel::Linear(m) => &m.factor,
        ProblemModel::Spca(m) => &m.factor,
    };
    let spec = match cfg.kernel {
        KernelKind::Exact => KernelSpec::Exact,
        KernelKind::Empirical => {
            let mut rng = rng_split(base, (cfg.reps + cfg.band_paths) as u64);
            KernelSpec::empirical(factor, cfg.kernel_samples, &mut rng)?
        }
    };
    let coefs = sde_coefficients(&s.model, &s.traj, &s.schedule, &spec)?;
    let ens = simulate_v(&coefs, cfg.band_paths, base, cfg.reps as u64)?;
    check_divergence(ens.diverged, cfg.band_paths)?;
    Ok((band_from_quantiles(&ens, cfg.alpha, &s.traj, cfg.gamma)?, ens.diverged))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn metrics(s: &Setup, band: Option<&Band>, reps: &[(usize, RepOutcome)]) -> Vec<MetricRow> {
    let active: Vec<usize> = (0..s.truth.len()).filter(|&j| s.truth[j] != 0.0).collect();
    let n_reps = reps.len();
    s.traj
        .grid
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            let (coverage, coverage_se) = match band {
                Some(b) if !active.is_empty() && n_reps > 0 => {
                    let hits = reps
                        .iter()
                        .flat_map(|(_, o)| active.iter().map(move |&j| b.contains(m, j, o.snapshots[m][j])))
                        .filter(|h| *h)
                        .count();
                    let p = hits as f64 / (n_reps * active.len()) as f64;
                    (Some(p), Some((p * (1.0 - p) / n_reps as f64).sqrt()))
                }
                _ => (None, None),
            };
            let avg_bias = if n_reps > 0 {
                mean(active.iter().map(|&j| {
                    let emp = reps.iter().map(|(_, o)| o.snapshots[m][j]).sum::<f64>() / n_reps as f64;
                    (emp - s.traj.values[m][j]).abs()
                }))
            } else {
                None
            };
            let props: Vec<(Option<f64>, Option<f64>)> =
                reps.iter().map(|(_, o)| support_proportions(&o.snapshots[m], &s.truth)).collect();
            MetricRow {
                t,
                coverage,
                coverage_se,
                avg_bias,
                true_zero_prop: mean(props.iter().filter_map(|p| p.0)),
                false_zero_prop: mean(props.iter().filter_map(|p| p.1)),
                excess_risk_of_average: mean(reps.iter().filter_map(|(_, o)| o.risk[m])),
            }
        })
        .collect()
}

/// Pooled coverage over grid times farther than `2·dt` from a sign change
/// of the mean path on the same coordinate.
fn coverage_excluding_sign_changes(s: &Setup, band: &Band, reps: &[(usize, RepOutcome)], dt: f64) -> Result<Option<f64>> {
    let pattern = sign_stable_intervals(&s.traj)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for j in (0..s.truth.len()).filter(|&j| s.truth[j] != 0.0) {
        let changes = pattern.change_times(j);
        for (m, &t) in s.traj.grid.iter().enumerate() {
            if changes.iter().any(|c| (t - c).abs() <= 2.0 * dt + 1e-12) {
                continue;
            }
            for (_, o) in reps {
                total += 1;
                hits += band.contains(m, j, o.snapshots[m][j]) as usize;
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn rda_bias_entries(cfg: &ExperimentConfig, s: &Setup, reps: &[(usize, RepOutcome)]) -> Result<Option<Vec<RdaBiasEntry>>> {
    let (ProblemModel::Linear(model), Algorithm::Rda) = (&s.model, cfg.algorithm) else {
        return Ok(None);
    };
    if !model.is_diagonal() || reps.is_empty() {
        return Ok(None);
    }
    let c0 = cfg.c0.unwrap_or(0.0);
    let mut entries = Vec::new();
    for (j, &ws) in s.truth.iter().enumerate().filter(|(_, w)| **w != 0.0) {
        let sigma_sq = model.h[(j, j)];
        let shift = rda_limit_bias(c0, sigma_sq)?;
        let thresholded = ws.abs() <= shift;
        let predicted = if thresholded { ws.abs() } else { shift };
        let emp = reps.iter().map(|(_, o)| o.snapshots.last().unwrap()[j]).sum::<f64>() / reps.len() as f64;
        let signed_bias = emp - ws;
        let measured = signed_bias.abs();
        entries.push(RdaBiasEntry {
            coord: j,
            w_star: ws,
            sigma_sq,
            predicted,
            signed_bias,
            measured,
            rel_error: (predicted > 0.0).then(|| (measured - predicted).abs() / predicted),
            thresholded,
            direction_ok: c0 == 0.0 || signed_bias * ws.signum() < 0.0,
        });
    }
    Ok(Some(entries))
}

fn assemble(cfg: &ExperimentConfig, s: Setup, reps: Vec<(usize, RepOutcome)>, band: Option<(Band, usize)>, diverged: usize) -> Result<Report> {
    let band_paths_total = if band.is_some() { cfg.band_paths } else { 0 };
    let (band, band_div) = match band {
        Some((b, n)) => (Some(b), n),
        None => (None, 0),
    };
    let rows = metrics(&s, band.as_ref(), &reps);
    let n_active = s.truth.iter().filter(|w| **w != 0.0).count();
    let last = rows.last();
    let summary = Summary {
        n_active,
        n_inactive: s.truth.len() - n_active,
        terminal_bias: last.and_then(|r| r.avg_bias),
        terminal_coverage: last.and_then(|r| r.coverage),
        mean_coverage: mean(rows.iter().filter_map(|r| r.coverage)),
        coverage_excluding_sign_changes: match &band {
            Some(b) if !reps.is_empty() => coverage_excluding_sign_changes(&s, b, &reps, cfg.dt)?,
            _ => None,
        },
        terminal_true_zero_prop: last.and_then(|r| r.true_zero_prop),
        terminal_false_zero_prop: last.and_then(|r| r.false_zero_prop),
        terminal_excess_risk_of_average: last.and_then(|r| r.excess_risk_of_average),
    };
    let rda_bias = rda_bias_entries(cfg, &s, &reps)?;
    let keep = cfg.trajectory_reps.unwrap_or(usize::MAX);
    let trajectories = reps
        .into_iter()
        .filter(|(r, _)| *r < keep)
        .map(|(rep, o)| RepTrajectory { rep, values: o.snapshots })
        .collect();
    Ok(Report {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        grid: s.traj.grid.clone(),
        truth: s.truth.clone(),
        mean_path: s.traj.values.clone(),
        metrics: rows,
        band,
        trajectories,
        divergence: DivergenceCounts {
            reps_total: cfg.reps,
            reps_diverged: diverged,
            band_paths_total,
            band_paths_diverged: band_div,
        },
        summary,
        rda_bias,
    })
}

fn run_full(cfg: &ExperimentConfig) -> Result<Report> {
    with_pool(cfg.workers, || {
        let s = setup(cfg)?;
        let base = RngStream::new(cfg.seed, BASE_STREAM);
        let (mut reps, diverged) = run_reps(cfg, &s, &base)?;
        if let ProblemModel::Spca(m) = &s.model {
            align_signs(&mut reps, &s.traj, m.dim(), m.k());
        }
        let band = if cfg.band_enabled() { Some(build_band(cfg, &s, &base)?) } else { None };
        assemble(cfg, s, reps, band, diverged)
    })
}

fn require_problem(cfg: &ExperimentConfig, problem: Problem) -> Result<()> {
    if cfg.problem != problem {
        return Err(Error::Config(format!("expected problem {problem:?}, config has {:?}", cfg.problem)));
    }
    Ok(())
}

/// Linear-regression Monte Carlo: repetitions, mean path, band and metrics.
pub fn run_lr_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    require_problem(cfg, Problem::Lr)?;
    run_full(cfg)
}

/// Online sparse PCA Monte Carlo from a shared random start; repetitions are
/// sign-aligned with the mean path before metrics are taken.
pub fn run_pca_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    require_problem(cfg, Problem::Pca)?;
    run_full(cfg)
}

/// RDA on a diagonal design; `Report::rda_bias` compares the terminal mean
/// with `c0/σ_j²` on every active coordinate.
pub fn run_rda_bias_check(cfg: &ExperimentConfig) -> Result<Report> {
    require_problem(cfg, Problem::Lr)?;
    if cfg.algorithm != Algorithm::Rda {
        return Err(Error::Config("rda bias check needs algorithm rda".into()));
    }
    if cfg.h_diag.is_none() {
        return Err(Error::Config("rda bias check needs a diagonal design (h_diag)".into()));
    }
    run_full(cfg)
}

/// Band only: mean path, kernel grid and SDE quantiles without repetitions.
pub fn run_band_only(cfg: &ExperimentConfig) -> Result<Report> {
    if !cfg.band_enabled() {
        return Err(Error::Config("band run needs band_paths > 0 and a non-rda schedule".into()));
    }
    with_pool(cfg.workers, || {
        let s = setup(cfg)?;
        let base = RngStream::new(cfg.seed, BASE_STREAM);
        let band = build_band(cfg, &s, &base)?;
        let mut report = assemble(cfg, s, Vec::new(), Some(band), 0)?;
        report.metrics.clear();
        report.divergence.reps_total = 0;
        Ok(report)
    })
}

/// Dispatches on `cfg.problem`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.problem {
        Problem::Lr => run_lr_experiment(cfg),
        Problem::Pca => run_pca_experiment(cfg),
    }
}
