//! Fluctuation SDE around the mean path: covariance kernels, drift
//! Jacobians, Euler–Maruyama paths of `V`, the soft-threshold image `W`, and
//! quantile bands.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics::{sgn, MeanTrajectory};
use crate::error::{Error, Result};
use crate::models::{GaussianFactor, LinearModel, ProblemModel, SpcaModel};
use crate::numerics::{eig::max_asymmetry, sym_eig, RngStream};
use crate::optimizer::{soft_threshold, TuningSchedule};

/// Eigenvalues below this fraction of the largest are clamped to zero.
pub const PSD_CLAMP: f64 = 1e-12;
/// Negative eigenvalues beyond this fraction of the largest are an error.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// How the gradient covariance `Σ(w)` is evaluated.
#[derive(Debug, Clone)]
pub enum KernelSpec {
    /// Gaussian fourth-moment closed form.
    Exact,
    /// Sample average over a fixed set of design draws (row-major, `m × d`).
    Empirical { samples: Vec<f64>, m: usize, d: usize },
}

impl KernelSpec {
    pub fn empirical(factor: &GaussianFactor, m: usize, rng: &mut RngStream) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("kernel sample size must be positive".into()));
        }
        let d = factor.dim();
        let mut samples = vec![0.0; m * d];
        let mut z = vec![0.0; d];
        for row in samples.chunks_mut(d) {
            factor.sample_into(rng, &mut z, row);
        }
        Ok(KernelSpec::Empirical { samples, m, d })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self {
            KernelSpec::Empirical { d: sd, .. } if *sd != d => Err(Error::DimensionMismatch { expected: d, got: *sd }),
            _ => Ok(()),
        }
    }
}

fn gram_over_rows(b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.nrows() as f64;
    let g = b.transpose() * b / m;
    (&g + g.transpose()) * 0.5
}

/// `E[(XXᵀ − H) a aᵀ (XXᵀ − H)] + σ_ε² H` with `a = w − w*`.
pub fn sigma_lr(model: &LinearModel, w: &[f64], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if w.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w.len() });
    }
    spec.check_dim(d)?;
    let a = nalgebra::DVector::from_column_slice(w) - &model.w_star;
    let noise = &model.h * (model.sigma_eps * model.sigma_eps);
    if a.iter().all(|x| *x == 0.0) {
        return Ok(noise);
    }
    let ha = &model.h * &a;
    let first = match spec {
        KernelSpec::Exact => &ha * ha.transpose() + &model.h * a.dot(&ha),
        KernelSpec::Empirical { samples, m, .. } => {
            // row i: x_i (x_iᵀ a) − H a
            let mut b = DMatrix::zeros(*m, d);
            for (i, x) in samples.chunks(d).enumerate() {
                let xa: f64 = x.iter().zip(a.iter()).map(|(p, q)| p * q).sum();
                for j in 0..d {
                    b[(i, j)] = x[j] * xa - ha[j];
                }
            }
            gram_over_rows(&b)
        }
    };
    Ok(first + noise)
}

/// `A_j y` for the deflation matrix built from `u`.
fn apply_deflation(u: &DMatrix<f64>, j: usize, y: &mut [f64]) {
    let d = u.nrows();
    for i in 0..=j {
        let ui = u.column(i);
        let dot: f64 = ui.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
        let scale = if i == j { dot } else { 2.0 * dot };
        for r in 0..d {
            y[r] -= scale * ui[r];
        }
    }
}

/// Block matrix `Σ_jl = A_j E[(XXᵀ − C) U_j U_lᵀ (XXᵀ − C)] A_l`, of size `dk × dk`.
pub fn sigma_pca(model: &SpcaModel, u: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let (d, k) = (model.dim(), u.ncols());
    if u.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, got: u.nrows() });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Kernel("non-finite loading matrix".into()));
    }
    spec.check_dim(d)?;
    let c = &model.c;
    let cu = c * u;
    let mut sigma = DMatrix::zeros(d * k, d * k);
    match spec {
        KernelSpec::Exact => {
            let defl: Vec<DMatrix<f64>> = (0..k).map(|j| crate::models::deflation_matrix(u, j)).collect();
            for j in 0..k {
                for l in 0..=j {
                    let inner = u.column(j).dot(&cu.column(l));
                    let mid = cu.column(l) * cu.column(j).transpose() + c * inner;
                    let block = &defl[j] * mid * &defl[l];
                    sigma.view_mut((j * d, l * d), (d, d)).copy_from(&block);
                    if l != j {
                        sigma.view_mut((l * d, j * d), (d, d)).copy_from(&block.transpose());
                    }
                }
            }
        }
        KernelSpec::Empirical { samples, m, .. } => {
            let mut b = DMatrix::zeros(*m, d * k);
            let mut y = vec![0.0; d];
            for (i, x) in samples.chunks(d).enumerate() {
                for j in 0..k {
                    let xu: f64 = x.iter().zip(u.column(j).iter()).map(|(p, q)| p * q).sum();
                    for r in 0..d {
                        y[r] = x[r] * xu - cu[(r, j)];
                    }
                    apply_deflation(u, j, &mut y);
                    for r in 0..d {
                        b[(i, j * d + r)] = y[r];
                    }
                }
            }
            sigma = gram_over_rows(&b);
        }
    }
    Ok(sigma)
}

/// Jacobian of the drift `G`. Linear regression: `H`. PCA: the block
/// lower-triangular matrix with diagonal blocks
/// `−C + (U_jᵀCU_j) I + 2 Σ_{i≤j} U_i U_iᵀ C` and, for `l < j`,
/// blocks `2((U_lᵀCU_j) I + U_l U_jᵀ C)`.
pub fn grad_g(model: &ProblemModel, point: &[f64]) -> Result<DMatrix<f64>> {
    match model {
        ProblemModel::Linear(m) => {
            if point.len() != m.dim() {
                return Err(Error::DimensionMismatch {
                    expected: m.dim(),
                    got: point.len(),
                });
            }
            Ok(m.h.clone())
        }
        ProblemModel::Spca(m) => {
            let (d, k) = (m.dim(), m.k());
            if point.len() != d * k {
                return Err(Error::DimensionMismatch {
                    expected: d * k,
                    got: point.len(),
                });
            }
            Ok(grad_g_pca(&m.c, &DMatrix::from_column_slice(d, k, point)))
        }
    }
}

pub fn grad_g_pca(c: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = u.shape();
    let id = DMatrix::<f64>::identity(d, d);
    let cu = c * u;
    let mut out = DMatrix::zeros(d * k, d * k);
    for j in 0..k {
        let mut diag = -c + &id * u.column(j).dot(&cu.column(j));
        for i in 0..=j {
            diag += 2.0 * u.column(i) * cu.column(i).transpose();
        }
        out.view_mut((j * d, j * d), (d, d)).copy_from(&diag);
        for l in 0..j {
            let block = (&id * u.column(l).dot(&cu.column(j)) + u.column(l) * cu.column(j).transpose()) * 2.0;
            out.view_mut((j * d, l * d), (d, d)).copy_from(&block);
        }
    }
    out
}

/// Symmetric square root of a PSD matrix, clamping eigenvalues below
/// `1e-12·λ_max` to zero.
pub fn matrix_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            got: s.ncols(),
        });
    }
    let asym = max_asymmetry(s);
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    if scale == 0.0 {
        return Ok(DMatrix::zeros(s.nrows(), s.ncols()));
    }
    let eig = sym_eig(s)?;
    let top = eig.values.iter().fold(0.0f64, |m, v| m.max(*v));
    let lowest = eig.values[0];
    if lowest < -PSD_TOLERANCE * top.max(scale) {
        return Err(Error::Kernel(format!(
            "matrix is not positive semi-definite (eigenvalue {lowest:e}, largest {top:e})"
        )));
    }
    let floor = PSD_CLAMP * top;
    let r = eig.map_spectrum(|x| if x > floor { x.sqrt() } else { 0.0 });
    Ok((&r + r.transpose()) * 0.5)
}

/// `g‡(t) = lim g(⌊t/γ⌋, γ)/√γ`.
pub fn g_ddagger(schedule: &TuningSchedule, t: f64) -> Result<f64> {
    match *schedule {
        TuningSchedule::Zero => Ok(0.0),
        TuningSchedule::PowerLaw { c, mu, t0 } => {
            let excess = t - t0;
            Ok(if excess <= 0.0 { 0.0 } else { c * excess.powf(mu) })
        }
        TuningSchedule::SimPowerLaw { mu } => Ok(t.max(0.0).powf(mu)),
        TuningSchedule::Rda { .. } => Err(Error::InvalidArgument(
            "the RDA schedule has no sqrt(gamma)-scaled limit".into(),
        )),
    }
}

/// Per coordinate: `V − level` where the mean path is positive, `V + level`
/// where it is negative, and `sgn(V)(|V| − level)₊` where it is zero.
pub fn soft_threshold_limit(v: &[f64], signs: &[i8], level: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    soft_threshold_limit_into(v, signs, level, &mut out);
    out
}

pub fn soft_threshold_limit_into(v: &[f64], signs: &[i8], level: f64, out: &mut [f64]) {
    for ((o, &x), &s) in out.iter_mut().zip(v).zip(signs) {
        *o = match s {
            1 => x - level,
            -1 => x + level,
            _ => soft_threshold(x, level),
        };
    }
}

/// Grid-sampled coefficients of the SDE
/// `dV = −∇G(w(t)) W dt + Σ^{1/2}(w(t)) dB`, `W = soft_threshold_limit(V)`.
#[derive(Debug, Clone)]
pub struct SdeCoefficients {
    pub grid: Vec<f64>,
    pub drift: Vec<DMatrix<f64>>,
    pub diffusion: Vec<DMatrix<f64>>,
    pub levels: Vec<f64>,
    pub signs: Vec<Vec<i8>>,
}

impl SdeCoefficients {
    pub fn new(
        grid: Vec<f64>,
        drift: Vec<DMatrix<f64>>,
        diffusion: Vec<DMatrix<f64>>,
        levels: Vec<f64>,
        signs: Vec<Vec<i8>>,
    ) -> Result<Self> {
        let n = grid.len();
        if n < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("SDE grid needs >= 2 increasing points".into()));
        }
        if drift.len() != n || diffusion.len() != n || levels.len() != n || signs.len() != n {
            return Err(Error::InvalidArgument("SDE coefficient lengths differ from the grid".into()));
        }
        let dim = drift[0].nrows();
        for m in 0..n {
            if drift[m].shape() != (dim, dim) || diffusion[m].nrows() != dim || signs[m].len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: drift[m].nrows(),
                });
            }
        }
        Ok(Self {
            grid,
            drift,
            diffusion,
            levels,
            signs,
        })
    }

    /// Coefficients that do not change along the grid.
    pub fn constant(grid: Vec<f64>, drift: DMatrix<f64>, diffusion: DMatrix<f64>, level: impl Fn(f64) -> f64, signs: Vec<i8>) -> Result<Self> {
        let n = grid.len();
        let levels = grid.iter().map(|&t| level(t)).collect();
        Self::new(grid, vec![drift; n], vec![diffusion; n], levels, vec![signs; n])
    }

    pub fn dim(&self) -> usize {
        self.drift[0].nrows()
    }

    /// Number of Brownian components per step.
    pub fn noise_dim(&self) -> usize {
        self.diffusion[0].ncols()
    }
}

/// Coefficients along a mean trajectory. `kernel_sqrt` maps a grid point
/// to `Σ^{1/2}(w(t))`.
pub fn sde_coefficients(
    model: &ProblemModel,
    traj: &MeanTrajectory,
    schedule: &TuningSchedule,
    spec: &KernelSpec,
) -> Result<SdeCoefficients> {
    let dim = model.param_dim();
    if traj.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: traj.dim(),
        });
    }
    let per_point: Vec<(DMatrix<f64>, DMatrix<f64>)> = traj
        .values
        .par_iter()
        .map(|w| -> Result<_> {
            let sigma = match model {
                ProblemModel::Linear(m) => sigma_lr(m, w, spec)?,
                ProblemModel::Spca(m) => sigma_pca(m, &DMatrix::from_column_slice(m.dim(), m.k(), w), spec)?,
            };
            Ok((grad_g(model, w)?, matrix_sqrt(&sigma)?))
        })
        .collect::<Result<_>>()?;
    let (drift, diffusion) = per_point.into_iter().unzip();
    let levels = traj.grid.iter().map(|&t| g_ddagger(schedule, t)).collect::<Result<_>>()?;
    let signs = traj.values.iter().map(|v| v.iter().map(|x| sgn(*x)).collect()).collect();
    SdeCoefficients::new(traj.grid.clone(), drift, diffusion, levels, signs)
}

/// One Euler–Maruyama step from grid index `m` to `m + 1` driven by the
/// Brownian increment `db` (already scaled by `√dt`). Writes `W_m` into `w`.
pub fn em_step(coefs: &SdeCoefficients, m: usize, v: &mut [f64], db: &[f64], w: &mut [f64]) {
    let dt = coefs.grid[m + 1] - coefs.grid[m];
    soft_threshold_limit_into(v, &coefs.signs[m], coefs.levels[m], w);
    let drift = &coefs.drift[m];
    let diff = &coefs.diffusion[m];
    let dim = v.len();
    for i in 0..dim {
        let mut acc = 0.0;
        for j in 0..dim {
            acc -= drift[(i, j)] * w[j] * dt;
        }
        for (j, b) in db.iter().enumerate() {
            acc += diff[(i, j)] * b;
        }
        v[i] += acc;
    }
}

/// Simulated `V` and `W` paths, each stored as `[path][grid][coordinate]`.
#[derive(Debug, Clone)]
pub struct BandEnsemble {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub v_paths: Vec<Vec<f64>>,
    pub w_paths: Vec<Vec<f64>>,
    /// Paths dropped for producing non-finite values.
    pub diverged: usize,
}

impl BandEnsemble {
    pub fn n_paths(&self) -> usize {
        self.w_paths.len()
    }

    pub fn w_at(&self, path: usize, m: usize, j: usize) -> f64 {
        self.w_paths[path][m * self.dim + j]
    }

    pub fn v_at(&self, path: usize, m: usize, j: usize) -> f64 {
        self.v_paths[path][m * self.dim + j]
    }
}

/// Simulates one path from `V(0) = 0` with the given Brownian stream.
pub fn simulate_path(coefs: &SdeCoefficients, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let (n, dim, q) = (coefs.grid.len(), coefs.dim(), coefs.noise_dim());
    let mut vs = vec![0.0; n * dim];
    let mut ws = vec![0.0; n * dim];
    let mut v = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut db = vec![0.0; q];
    for m in 0..n - 1 {
        let sq = (coefs.grid[m + 1] - coefs.grid[m]).sqrt();
        rng.fill_normal(&mut db);
        db.iter_mut().for_each(|x| *x *= sq);
        vs[m * dim..(m + 1) * dim].copy_from_slice(&v);
        em_step(coefs, m, &mut v, &db, &mut w);
        ws[m * dim..(m + 1) * dim].copy_from_slice(&w);
    }
    let last = n - 1;
    vs[last * dim..].copy_from_slice(&v);
    soft_threshold_limit_into(&v, &coefs.signs[last], coefs.levels[last], &mut w);
    ws[last * dim..].copy_from_slice(&w);
    (vs, ws)
}

/// `n_paths` Euler–Maruyama paths; path `p` draws from `base.split(label_offset + p)`.
pub fn simulate_v(coefs: &SdeCoefficients, n_paths: usize, base: &RngStream, label_offset: u64) -> Result<BandEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one SDE path".into()));
    }
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path(coefs, &mut base.split(label_offset + p as u64)))
        .collect();
    let mut ens = BandEnsemble {
        grid: coefs.grid.clone(),
        dim: coefs.dim(),
        v_paths: Vec::with_capacity(n_paths),
        w_paths: Vec::with_capacity(n_paths),
        diverged: 0,
    };
    for (v, w) in paths {
        if v.iter().chain(&w).all(|x| x.is_finite()) {
            ens.v_paths.push(v);
            ens.w_paths.push(w);
        } else {
            ens.diverged += 1;
        }
    }
    if ens.w_paths.is_empty() {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(ens)
}

/// Linear-interpolation (type 7) sample quantile of sorted data.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `w_j(t) + √γ·[Q_{α/2}, Q_{1−α/2}]` of the simulated `W_j(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub grid: Vec<f64>,
    pub center: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl Band {
    pub fn contains(&self, m: usize, j: usize, x: f64) -> bool {
        self.lower[m][j] <= x && x <= self.upper[m][j]
    }
}

/// Minimum number of paths for a band.
pub const MIN_BAND_PATHS: usize = 100;

pub fn band_from_quantiles(ens: &BandEnsemble, alpha: f64, traj: &MeanTrajectory, gamma: f64) -> Result<Band> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if ens.n_paths() < MIN_BAND_PATHS {
        return Err(Error::InvalidArgument(format!(
            "band needs at least {MIN_BAND_PATHS} paths, got {}",
            ens.n_paths()
        )));
    }
    if traj.grid.len() != ens.grid.len() || traj.dim() != ens.dim {
        return Err(Error::DimensionMismatch {
            expected: ens.grid.len(),
            got: traj.grid.len(),
        });
    }
    let scale = gamma.sqrt();
    let (n, dim) = (ens.grid.len(), ens.dim);
    let mut lower = vec![vec![0.0; dim]; n];
    let mut upper = vec![vec![0.0; dim]; n];
    let mut column = vec![0.0; ens.n_paths()];
    for m in 0..n {
        for j in 0..dim {
            for (p, c) in column.iter_mut().enumerate() {
                *c = ens.w_at(p, m, j);
            }
            column.sort_by(f64::total_cmp);
            let base = traj.values[m][j];
            lower[m][j] = base + scale * quantile_type7(&column, alpha / 2.0);
            upper[m][j] = base + scale * quantile_type7(&column, 1.0 - alpha / 2.0);
        }
    }
    Ok(Band {
        grid: ens.grid.clone(),
        center: traj.values.clone(),
        lower,
        upper,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{lr_mean_trajectory, uniform_grid};
    use crate::models::{build_ar_covariance, pca_g, SpcaModel};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn lr_model(h: DMatrix<f64>, w_star: Vec<f64>, sigma: f64) -> LinearModel {
        LinearModel::new(h, DVector::from_vec(w_star), sigma).unwrap()
    }

    #[test]
    fn lr_kernel_at_target_is_noise_only() {
        let m = lr_model(build_ar_covariance(3, -0.5).unwrap(), vec![1.0, 0.0, -1.0], 0.7);
        let s = sigma_lr(&m, &[1.0, 0.0, -1.0], &KernelSpec::Exact).unwrap();
        assert!((s - &m.h * 0.49).amax() < 1e-15);
    }

    #[test]
    fn lr_kernel_one_dim_fourth_moment() {
        let m = lr_model(DMatrix::identity(1, 1), vec![0.5], 0.3);
        let w = [1.7];
        let exact = 2.0 * 1.2f64.powi(2) + 0.09;
        let s = sigma_lr(&m, &w, &KernelSpec::Exact).unwrap();
        assert!((s[(0, 0)] - exact).abs() < 1e-12);
        let mut rng = RngStream::new(30, 0);
        let spec = KernelSpec::empirical(&m.factor, 100_000, &mut rng).unwrap();
        let e = sigma_lr(&m, &w, &spec).unwrap();
        assert!((e[(0, 0)] / exact - 1.0).abs() <= 0.03, "{}", e[(0, 0)]);
    }

    #[test]
    fn lr_kernel_empirical_matches_closed_form() {
        let m = lr_model(build_ar_covariance(4, -0.5).unwrap(), vec![1.0, 0.0, -0.5, 0.0], 1.0);
        let w = [0.2, 0.3, 0.1, -0.4];
        let exact = sigma_lr(&m, &w, &KernelSpec::Exact).unwrap();
        let mut rng = RngStream::new(31, 0);
        let spec = KernelSpec::empirical(&m.factor, 200_000, &mut rng).unwrap();
        let emp = sigma_lr(&m, &w, &spec).unwrap();
        assert!((&emp - &exact).amax() <= 0.03 * exact.amax(), "{emp} vs {exact}");
    }

    #[test]
    fn pca_kernel_examples() {
        let m = SpcaModel::spiked(4, 2, &[2.0]).unwrap();
        let zero = DMatrix::zeros(4, 1);
        assert_eq!(sigma_pca(&m, &zero, &KernelSpec::Exact).unwrap().amax(), 0.0);
        let mut rng = RngStream::new(32, 0);
        let spec = KernelSpec::empirical(&m.factor, 1000, &mut rng).unwrap();
        let u = DMatrix::from_fn(4, 1, |i, _| 0.3 + 0.1 * i as f64);
        let s = sigma_pca(&m, &u, &spec).unwrap();
        assert!((&s - s.transpose()).amax() <= 1e-12);
    }

    /// Brute-force Gaussian fourth moments via Isserlis:
    /// `E[x_a x_b x_c x_e] = C_ab C_ce + C_ac C_be + C_ae C_bc`.
    fn isserlis_block(c: &DMatrix<f64>, u: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = c.nrows();
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            for e in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    for cc in 0..d {
                        let m4 = c[(a, b)] * c[(cc, e)] + c[(a, cc)] * c[(b, e)] + c[(a, e)] * c[(b, cc)];
                        s += m4 * u[b] * v[cc];
                    }
                }
                let cu: f64 = (0..d).map(|b| c[(a, b)] * u[b]).sum();
                let cv: f64 = (0..d).map(|b| c[(e, b)] * v[b]).sum();
                out[(a, e)] = s - cu * cv;
            }
        }
        out
    }

    #[test]
    fn pca_kernel_matches_isserlis() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = SpcaModel::new(c.clone(), 1).unwrap();
        let u = DMatrix::from_row_slice(2, 1, &[0.8, 0.5]);
        let a = crate::models::deflation_matrix(&u, 0);
        let brute = &a * isserlis_block(&c, &[0.8, 0.5], &[0.8, 0.5]) * &a;
        let exact = sigma_pca(&m, &u, &KernelSpec::Exact).unwrap();
        assert!((&exact - &brute).amax() <= 1e-12);
        let mut rng = RngStream::new(33, 0);
        let spec = KernelSpec::empirical(&m.factor, 100_000, &mut rng).unwrap();
        let emp = sigma_pca(&m, &u, &spec).unwrap();
        assert!((&emp - &brute).amax() <= 0.05 * brute.amax(), "{emp} vs {brute}");
    }

    #[test]
    fn pca_exact_kernel_cross_blocks_match_isserlis() {
        let m = SpcaModel::spiked(4, 2, &[2.0, 1.0]).unwrap();
        let u = DMatrix::from_fn(4, 2, |i, j| 0.2 * (i as f64 + 1.0) - 0.3 * j as f64);
        let s = sigma_pca(&m, &u, &KernelSpec::Exact).unwrap();
        let a0 = crate::models::deflation_matrix(&u, 0);
        let a1 = crate::models::deflation_matrix(&u, 1);
        let u0: Vec<f64> = u.column(0).iter().copied().collect();
        let u1: Vec<f64> = u.column(1).iter().copied().collect();
        let b10 = &a1 * isserlis_block(&m.c, &u1, &u0) * &a0;
        assert!((s.view((4, 0), (4, 4)) - &b10).amax() <= 1e-12);
        assert!((&s - s.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn grad_g_lr_is_h() {
        let m = lr_model(build_ar_covariance(3, -0.5).unwrap(), vec![0.0; 3], 1.0);
        let g = grad_g(&ProblemModel::Linear(m.clone()), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, m.h);
    }

    #[test]
    fn grad_g_pca_by_hand() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let u = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let g = grad_g_pca(&c, &u);
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])));
    }

    fn finite_difference_jacobian(c: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, k) = u.shape();
        let n = d * k;
        let mut jac = DMatrix::zeros(n, n);
        let h = 1e-6;
        for col in 0..n {
            let mut plus = u.clone();
            let mut minus = u.clone();
            plus.as_mut_slice()[col] += h;
            minus.as_mut_slice()[col] -= h;
            let diff = (pca_g(c, &plus) - pca_g(c, &minus)) / (2.0 * h);
            jac.set_column(col, &DVector::from_column_slice(diff.as_slice()));
        }
        jac
    }

    #[test]
    fn grad_g_pca_matches_finite_differences() {
        let m = SpcaModel::spiked(6, 2, &[2.0, 1.0]).unwrap();
        let mut rng = RngStream::new(34, 0);
        for _ in 0..5 {
            let u = DMatrix::from_fn(6, 2, |_, _| rng.next_normal() * 0.5);
            let g = grad_g_pca(&m.c, &u);
            let fd = finite_difference_jacobian(&m.c, &u);
            assert!((&g - &fd).amax() <= 1e-4 * fd.amax(), "{}", (&g - &fd).amax());
            assert_eq!(g.view((0, 6), (6, 6)).amax(), 0.0);
        }
    }

    #[test]
    fn matrix_sqrt_examples() {
        assert_eq!(matrix_sqrt(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let r = matrix_sqrt(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        assert!(matrix_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(matrix_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn matrix_sqrt_reconstructs_random_psd() {
        let mut rng = RngStream::new(35, 0);
        let a = DMatrix::from_fn(6, 4, |_, _| rng.next_normal());
        let s = &a * a.transpose();
        let r = matrix_sqrt(&s).unwrap();
        assert!((&r * &r - &s).norm() <= 1e-8);
    }

    #[test]
    fn g_ddagger_examples() {
        assert_eq!(g_ddagger(&TuningSchedule::Zero, 3.0).unwrap(), 0.0);
        let pl = TuningSchedule::PowerLaw { c: 2.0, mu: 0.7, t0: 1.0 };
        assert_eq!(g_ddagger(&pl, 2.0).unwrap(), 2.0);
        assert!(g_ddagger(&TuningSchedule::Rda { c0: 0.1 }, 1.0).is_err());
    }

    #[test]
    fn g_ddagger_is_scaled_limit() {
        let sched = TuningSchedule::PowerLaw { c: 1.5, mu: 0.7, t0: 0.5 };
        let t = 3.305_37;
        let limit = g_ddagger(&sched, t).unwrap();
        let mut errs = Vec::new();
        for gamma in [1e-2, 1e-3, 1e-4] {
            let n = (t / gamma + 1e-9).floor() as u64;
            errs.push((sched.value(n, gamma) / gamma.sqrt() - limit).abs());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
        assert!(errs[2] < 1e-3);
        let sim = TuningSchedule::SimPowerLaw { mu: 0.7 };
        let n = (t / 1e-4 + 1e-9).floor() as u64;
        assert!((sim.value(n, 1e-4) / 1e-2 - g_ddagger(&sim, t).unwrap()).abs() < 1e-3);
    }

    #[test]
    fn soft_threshold_limit_examples() {
        assert_eq!(soft_threshold_limit(&[1.0, -2.0, 0.5], &[1, -1, 0], 0.0), vec![1.0, -2.0, 0.5]);
        assert!((soft_threshold_limit(&[1.0], &[1], 0.3)[0] - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold_limit(&[0.2], &[0], 0.3), vec![0.0]);
        assert!((soft_threshold_limit(&[0.2], &[-1], 0.3)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_zero_level_stays_at_origin() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let grid = uniform_grid(5.0, 0.1).unwrap();
        let coefs = SdeCoefficients::constant(grid, h, DMatrix::zeros(2, 2), |_| 0.0, vec![1, -1]).unwrap();
        let ens = simulate_v(&coefs, 10, &RngStream::new(1, 0), 0).unwrap();
        assert!(ens.v_paths.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn ou_stationary_variance() {
        // dV = −V dt + σ dB: Var V(t) = σ²/2 (1 − e^{−2t})
        let sigma = 1.3;
        let grid = uniform_grid(10.0, 0.05).unwrap();
        let coefs = SdeCoefficients::constant(
            grid,
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, sigma),
            |_| 0.0,
            vec![1],
        )
        .unwrap();
        let ens = simulate_v(&coefs, 2000, &RngStream::new(2, 0), 0).unwrap();
        let last = coefs.grid.len() - 1;
        let xs: Vec<f64> = (0..2000).map(|p| ens.v_at(p, last, 0)).collect();
        let mean = xs.iter().sum::<f64>() / 2000.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1999.0;
        let exact = sigma * sigma / 2.0 * (1.0 - (-20.0f64).exp());
        assert!((var / exact - 1.0).abs() <= 0.1, "{var} vs {exact}");
    }

    #[test]
    fn active_coordinate_mean_tracks_bias() {
        // diagonal H = 1, positive active coordinate, SimPowerLaw μ=0.7
        let mu = 0.7;
        let grid = uniform_grid(8.0, 0.01).unwrap();
        let coefs = SdeCoefficients::constant(
            grid,
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            |t| t.powf(mu),
            vec![1],
        )
        .unwrap();
        let n = 2000;
        let ens = simulate_v(&coefs, n, &RngStream::new(3, 0), 0).unwrap();
        let last = coefs.grid.len() - 1;
        let ws: Vec<f64> = (0..n).map(|p| ens.w_at(p, last, 0)).collect();
        let mean = ws.iter().sum::<f64>() / n as f64;
        let sd = (ws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let h = crate::dynamics::bias_h(8.0, 1.0, mu, 0.0, 1.0, 1.0).unwrap();
        assert!((mean - h).abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean} h {h}");
    }

    #[test]
    fn paths_are_reproducible_and_parallel_invariant() {
        let grid = uniform_grid(2.0, 0.1).unwrap();
        let coefs = SdeCoefficients::constant(grid, DMatrix::identity(2, 2), DMatrix::identity(2, 2), |t| t, vec![1, 0]).unwrap();
        let base = RngStream::new(4, 0);
        let a = simulate_v(&coefs, 50, &base, 7).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_v(&coefs, 50, &base, 7).unwrap());
        assert_eq!(a.w_paths, b.w_paths);
        let single = simulate_path(&coefs, &mut base.split(7 + 3));
        assert_eq!(single.1, a.w_paths[3]);
    }

    #[test]
    fn quantile_type7_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&x, 0.0), 1.0);
        assert_eq!(quantile_type7(&x, 1.0), 4.0);
        assert!((quantile_type7(&x, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_type7(&x, 0.25) - 1.75).abs() < 1e-15);
    }

    fn ensemble_from(values: Vec<f64>) -> BandEnsemble {
        BandEnsemble {
            grid: vec![0.0, 1.0],
            dim: 1,
            v_paths: values.iter().map(|v| vec![*v, *v]).collect(),
            w_paths: values.iter().map(|v| vec![*v, *v]).collect(),
            diverged: 0,
        }
    }

    #[test]
    fn band_degenerate_and_two_point() {
        let traj = MeanTrajectory {
            grid: vec![0.0, 1.0],
            values: vec![vec![0.5], vec![0.5]],
            label: String::new(),
        };
        let ens = ensemble_from(vec![0.3; 120]);
        let band = band_from_quantiles(&ens, 0.05, &traj, 0.04).unwrap();
        assert!((band.lower[1][0] - 0.56).abs() < 1e-15);
        assert_eq!(band.lower, band.upper);

        let vals: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let ens = ensemble_from(vals.clone());
        let band = band_from_quantiles(&ens, 0.5, &traj, 0.04).unwrap();
        let mut sorted = vals;
        sorted.sort_by(f64::total_cmp);
        let q = quantile_type7(&sorted, 0.75);
        assert!((band.upper[0][0] - (0.5 + 0.2 * q)).abs() < 1e-15);
        assert!((band.lower[0][0] - (0.5 - 0.2 * q)).abs() < 1e-15);
        assert!(band_from_quantiles(&ensemble_from(vec![0.0; 50]), 0.05, &traj, 0.04).is_err());
    }

    #[test]
    fn band_covers_fresh_paths() {
        let h = build_ar_covariance(3, -0.5).unwrap();
        let m = lr_model(h.clone(), vec![1.0, 0.0, -0.6], 1.0);
        let grid = uniform_grid(5.0, 0.1).unwrap();
        let traj = lr_mean_trajectory(&h, &[0.0; 3], &[1.0, 0.0, -0.6], &grid).unwrap();
        let model = ProblemModel::Linear(m);
        let coefs = sde_coefficients(&model, &traj, &TuningSchedule::SimPowerLaw { mu: 0.7 }, &KernelSpec::Exact).unwrap();
        let base = RngStream::new(5, 0);
        let gamma = 1e-3;
        let ens = simulate_v(&coefs, 500, &base, 0).unwrap();
        let band = band_from_quantiles(&ens, 0.05, &traj, gamma).unwrap();
        let fresh = simulate_v(&coefs, 500, &base, 10_000).unwrap();
        let mut hit = 0usize;
        let mut total = 0usize;
        for p in 0..500 {
            for m in 1..grid.len() {
                for j in 0..3 {
                    let x = traj.values[m][j] + gamma.sqrt() * fresh.w_at(p, m, j);
                    hit += band.contains(m, j, x) as usize;
                    total += 1;
                }
            }
        }
        let cov = hit as f64 / total as f64;
        assert!(cov >= 0.93, "coverage {cov}");
    }

    proptest! {
        #[test]
        fn band_lower_never_exceeds_upper(seed in any::<u64>(), alpha in 0.01f64..0.99) {
            let mut rng = RngStream::new(seed, 0);
            let vals: Vec<f64> = (0..150).map(|_| rng.next_normal()).collect();
            let traj = MeanTrajectory { grid: vec![0.0, 1.0], values: vec![vec![0.0], vec![1.0]], label: String::new() };
            let band = band_from_quantiles(&ensemble_from(vals), alpha, &traj, 0.01).unwrap();
            for m in 0..2 {
                prop_assert!(band.lower[m][0] <= band.upper[m][0]);
            }
        }

        #[test]
        fn soft_threshold_limit_is_identity_at_zero_level(v in prop::collection::vec(-5.0f64..5.0, 4), s in prop::collection::vec(-1i8..=1, 4)) {
            prop_assert_eq!(soft_threshold_limit(&v, &s, 0.0), v);
        }
    }
}
