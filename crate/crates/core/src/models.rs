//! Data models: online sparse linear regression with Gaussian design and
//! spiked-covariance streaming PCA.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, EigenPair, RngStream};
use crate::optimizer::{Penalty, TuningSchedule, DIVERGENCE_LIMIT};

/// Largest admissible condition number of a design covariance.
pub const MAX_CONDITION: f64 = 1e8;

/// `H_ij = ρ^{|i−j|}`.
pub fn build_ar_covariance(d: usize, rho: f64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("need |rho| < 1, got {rho}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

/// Gaussian sampler `x = S^{1/2} z` built from the eigendecomposition of `S`.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    pub eig: EigenPair,
    /// Row-major symmetric square root.
    root: Vec<f64>,
    d: usize,
}

impl GaussianFactor {
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        let eig = sym_eig(s)?;
        let top = eig.values.iter().fold(0.0f64, |m, v| m.max(*v));
        let floor = -1e-10 * top.max(1.0);
        if let Some(bad) = eig.values.iter().find(|v| **v < floor) {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semi-definite (eigenvalue {bad:e})"
            )));
        }
        let r = eig.map_spectrum(|x| x.max(0.0).sqrt());
        let d = s.nrows();
        let root = (0..d * d).map(|k| r[(k / d, k % d)]).collect();
        Ok(Self { eig, root, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Draws `x ~ N(0, S)` into `x`, using `z` as scratch.
    pub fn sample_into(&self, rng: &mut RngStream, z: &mut [f64], x: &mut [f64]) {
        rng.fill_normal(z);
        for (i, xi) in x.iter_mut().enumerate() {
            let row = &self.root[i * self.d..(i + 1) * self.d];
            *xi = row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut z = vec![0.0; self.d];
        let mut x = vec![0.0; self.d];
        self.sample_into(rng, &mut z, &mut x);
        x
    }
}

/// `Y = Xᵀw* + σ_ε ε`, `X ~ N(0, H)`, `ε ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub h: DMatrix<f64>,
    pub factor: GaussianFactor,
    pub w_star: DVector<f64>,
    pub sigma_eps: f64,
}

impl LinearModel {
    pub fn new(h: DMatrix<f64>, w_star: DVector<f64>, sigma_eps: f64) -> Result<Self> {
        if h.nrows() != w_star.len() {
            return Err(Error::DimensionMismatch {
                expected: h.nrows(),
                got: w_star.len(),
            });
        }
        if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_eps must be >= 0, got {sigma_eps}")));
        }
        let factor = GaussianFactor::new(&h)?;
        let lo = factor.eig.values[0];
        let hi = factor.eig.values[h.nrows() - 1];
        if !(lo > 0.0 && hi / lo <= MAX_CONDITION) {
            return Err(Error::InvalidArgument(format!(
                "design covariance must be positive definite with bounded condition; spectrum [{lo:e}, {hi:e}]"
            )));
        }
        Ok(Self {
            h,
            factor,
            w_star,
            sigma_eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.h[(i, j)] == 0.0))
    }

    /// Draws `(x, y)` in place; `z` is scratch of length `d`.
    pub fn sample_into(&self, rng: &mut RngStream, z: &mut [f64], x: &mut [f64]) -> f64 {
        self.factor.sample_into(rng, z, x);
        let signal: f64 = x.iter().zip(self.w_star.iter()).map(|(a, b)| a * b).sum();
        signal + self.sigma_eps * rng.next_normal()
    }

    /// `(f₀(w) − f₀(w*)) = ½(w − w*)ᵀH(w − w*)`.
    pub fn excess_risk(&self, w: &[f64]) -> f64 {
        let a = DVector::from_column_slice(w) - &self.w_star;
        0.5 * a.dot(&(&self.h * &a))
    }
}

pub fn sample_lr(model: &LinearModel, rng: &mut RngStream) -> (Vec<f64>, f64) {
    let d = model.dim();
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    let y = model.sample_into(rng, &mut z, &mut x);
    (x, y)
}

/// Sparse coefficient vector with `support` nonzero entries at uniformly
/// chosen positions. Active values are standard normal, redrawn until their
/// magnitude reaches `min_magnitude`.
pub fn random_sparse_coefficients(d: usize, support: usize, min_magnitude: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if support > d {
        return Err(Error::InvalidArgument(format!("support {support} exceeds d = {d}")));
    }
    if !(0.0..3.0).contains(&min_magnitude) {
        return Err(Error::InvalidArgument(format!(
            "min magnitude must lie in [0, 3), got {min_magnitude}"
        )));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..support {
        let j = i + rng.next_below((d - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut w = vec![0.0; d];
    for &j in &idx[..support] {
        let mut x = rng.next_normal();
        while x.abs() < min_magnitude || x == 0.0 {
            x = rng.next_normal();
        }
        w[j] = x;
    }
    Ok(w)
}

/// Stochastic least-squares gradient `−x(y − xᵀw)`.
pub fn lsq_gradient(w: &[f64], x: &[f64], y: f64) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    lsq_gradient_into(w, x, y, &mut g);
    g
}

pub fn lsq_gradient_into(w: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
    let resid = y - x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    for (o, xi) in out.iter_mut().zip(x) {
        *o = -xi * resid;
    }
}

/// Spiked covariance model `C` with leading eigenvectors `U*`.
#[derive(Debug, Clone)]
pub struct SpcaModel {
    pub c: DMatrix<f64>,
    pub factor: GaussianFactor,
    pub u_star: DMatrix<f64>,
    /// Leading eigenvalues, descending.
    pub eigvals: Vec<f64>,
}

impl SpcaModel {
    /// Top-`k` eigenpairs of `C`, which must be distinct and strictly above the rest.
    pub fn new(c: DMatrix<f64>, k: usize) -> Result<Self> {
        let d = c.nrows();
        if k == 0 || k >= d {
            return Err(Error::InvalidArgument(format!("need 1 <= k < d, got k={k}, d={d}")));
        }
        let factor = GaussianFactor::new(&c)?;
        let vals = &factor.eig.values;
        let scale = vals[d - 1].abs().max(1.0);
        for i in 0..k {
            let upper = vals[d - 1 - i];
            let lower = vals[d - 2 - i];
            if !(upper - lower > 1e-8 * scale) {
                return Err(Error::InvalidArgument(format!(
                    "leading eigenvalue {upper} is not separated from {lower}"
                )));
            }
        }
        let mut u_star = DMatrix::zeros(d, k);
        let mut eigvals = Vec::with_capacity(k);
        for j in 0..k {
            let col = factor.eig.vectors.column(d - 1 - j).into_owned();
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let col = if pivot < 0.0 { -col } else { col };
            u_star.set_column(j, &col);
            eigvals.push(vals[d - 1 - j]);
        }
        Ok(Self {
            c,
            factor,
            u_star,
            eigvals,
        })
    }

    /// `C = Σ_j spike_j U_j Uⱼᵀ + I` with `U_j = support^{-1/2}` on the `j`-th
    /// block of `support` consecutive coordinates.
    pub fn spiked(d: usize, support: usize, spikes: &[f64]) -> Result<Self> {
        let k = spikes.len();
        if support == 0 || k * support > d {
            return Err(Error::InvalidArgument(format!(
                "{k} components of support {support} do not fit in d = {d}"
            )));
        }
        if spikes.windows(2).any(|w| !(w[0] > w[1])) || spikes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(
                "spikes must be positive and strictly decreasing".into(),
            ));
        }
        let mut u = DMatrix::zeros(d, k);
        let val = 1.0 / (support as f64).sqrt();
        for j in 0..k {
            for i in j * support..(j + 1) * support {
                u[(i, j)] = val;
            }
        }
        let mut c = DMatrix::identity(d, d);
        for (j, s) in spikes.iter().enumerate() {
            let col = u.column(j);
            c += *s * &col * col.transpose();
        }
        let factor = GaussianFactor::new(&c)?;
        Ok(Self {
            c,
            factor,
            u_star: u,
            eigvals: spikes.iter().map(|s| s + 1.0).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn k(&self) -> usize {
        self.u_star.ncols()
    }
}

/// `A_j = I − U_j U_jᵀ − 2 Σ_{i<j} U_i U_iᵀ` for zero-based column `j`.
pub fn deflation_matrix(u: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let d = u.nrows();
    let mut a = DMatrix::identity(d, d);
    let cj = u.column(j);
    a -= &cj * cj.transpose();
    for i in 0..j {
        let ci = u.column(i);
        a -= 2.0 * &ci * ci.transpose();
    }
    a
}

/// Mean field `A_j C U_j` for every column; `G(U)` is its negative.
pub fn pca_drift(c: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let cu = c * u;
    let mut out = cu.clone();
    for j in 0..u.ncols() {
        let v = cu.column(j);
        let mut col = v.into_owned();
        let uj = u.column(j);
        col -= uj * uj.dot(&v);
        for i in 0..j {
            let ui = u.column(i);
            col -= 2.0 * ui * ui.dot(&v);
        }
        out.set_column(j, &col);
    }
    out
}

/// `G(U) = −(A_j C U_j)_j`, stacked column by column.
pub fn pca_g(c: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    -pca_drift(c, u)
}

/// Dual matrix, primal matrix, step count and step size of OSPCA.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaState {
    pub u_tilde: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub n: u64,
    pub gamma: f64,
}

impl PcaState {
    pub fn new(u0: DMatrix<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {gamma}")));
        }
        Ok(Self {
            u_tilde: u0.clone(),
            u: u0,
            n: 0,
            gamma,
        })
    }

    /// `Ũ_j ← Ũ_j + γ A_j x xᵀ U_j` with `A_j` from the current primal `U`,
    /// then `U ← prox_l1(Ũ, g(n+1, γ))`.
    pub fn step(&mut self, x: &[f64], schedule: &TuningSchedule) -> Result<()> {
        let d = self.u.nrows();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: self.n + 1 });
        }
        let k = self.u.ncols();
        let proj: Vec<f64> = (0..k)
            .map(|j| self.u.column(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        for j in 0..k {
            let s = self.gamma * proj[j];
            if s == 0.0 {
                continue;
            }
            for r in 0..d {
                let mut ax = x[r] - self.u[(r, j)] * proj[j];
                for i in 0..j {
                    ax -= 2.0 * self.u[(r, i)] * proj[i];
                }
                self.u_tilde[(r, j)] += s * ax;
            }
        }
        self.n += 1;
        let lambda = schedule.value(self.n, self.gamma);
        Penalty::L1.prox_into(self.u_tilde.as_slice(), lambda, self.u.as_mut_slice());
        if self.u.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::Diverged {
                step: self.n,
                limit: DIVERGENCE_LIMIT,
            });
        }
        Ok(())
    }
}

pub fn ospca_step(mut state: PcaState, x: &[f64], schedule: &TuningSchedule) -> Result<PcaState> {
    state.step(x, schedule)?;
    Ok(state)
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn random_unit_vector(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let mut z = vec![0.0; d];
        rng.fill_normal(&mut z);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            z.iter_mut().for_each(|v| *v /= norm);
            return z;
        }
    }
}

/// Either driver behind one type, for code shared between the two.
#[derive(Debug, Clone)]
pub enum ProblemModel {
    Linear(LinearModel),
    Spca(SpcaModel),
}

impl ProblemModel {
    /// Length of the stacked parameter vector (`d` or `d·k`).
    pub fn param_dim(&self) -> usize {
        match self {
            ProblemModel::Linear(m) => m.dim(),
            ProblemModel::Spca(m) => m.dim() * m.k(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            ProblemModel::Linear(m) => m.dim(),
            ProblemModel::Spca(m) => m.dim(),
        }
    }
}
