//! Deterministic limits: mean trajectories, RDA bias, the bias function
//! `h(t)` of power-law tuning, and sign-stability intervals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::pca_drift;
use crate::numerics::{adaptive_quad, rk45, sym_eig, Rk45Options};

/// Deterministic trajectory sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTrajectory {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub label: String,
}

impl MeanTrajectory {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Coordinate `j` over the whole grid.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }
}

/// `t_m = m·dt` for `m = 0..=round(horizon/dt)`.
pub fn uniform_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && dt > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "grid needs horizon > 0 and dt > 0, got ({horizon}, {dt})"
        )));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 {
        return Err(Error::InvalidArgument(format!("dt {dt} exceeds horizon {horizon}")));
    }
    Ok((0..=steps).map(|m| m as f64 * dt).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] < 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "grid must be non-empty, non-negative and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `w(t) = e^{−Ht} w0 + (I − e^{−Ht}) w*`, the solution of `ẇ = −H(w − w*)`.
pub fn lr_mean_trajectory(h: &DMatrix<f64>, w0: &[f64], w_star: &[f64], grid: &[f64]) -> Result<MeanTrajectory> {
    check_grid(grid)?;
    let d = h.nrows();
    for len in [w0.len(), w_star.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    let eig = sym_eig(h)?;
    let p = &eig.vectors;
    let ws = DVector::from_column_slice(w_star);
    // coordinates of w0 − w* in the eigenbasis
    let a0 = p.transpose() * (DVector::from_column_slice(w0) - &ws);
    let values = grid
        .iter()
        .map(|&t| {
            let decayed = DVector::from_fn(d, |i, _| a0[i] * (-eig.values[i] * t).exp());
            (&ws + p * decayed).iter().copied().collect()
        })
        .collect();
    Ok(MeanTrajectory {
        grid: grid.to_vec(),
        values,
        label: "lr".into(),
    })
}

/// Snapping threshold on `‖A_j C U_j‖₂`.
pub const PCA_SNAP_DRIFT: f64 = 1e-6;
/// A converged column is snapped only if it lies this close to `±U*_j`.
pub const PCA_SNAP_DISTANCE: f64 = 1e-3;

/// Mean ODE `U̇_j = A_j C U_j` for all columns, integrated by RK45.
///
/// Once every column satisfies `‖A_j C U_j‖₂ < 1e-6` the rest of the
/// trajectory is replaced by the nearest signed true component `±U*_j`.
/// Values are stacked column by column (`d·k` entries per time).
pub fn ospca_mean_ode(c: &DMatrix<f64>, u_star: &DMatrix<f64>, u0: &DMatrix<f64>, grid: &[f64]) -> Result<MeanTrajectory> {
    check_grid(grid)?;
    let (d, k) = (u0.nrows(), u0.ncols());
    if c.nrows() != d || u_star.shape() != (d, k) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: c.nrows(),
        });
    }
    for j in 0..k {
        if u0.column(j).norm() == 0.0 {
            return Err(Error::InvalidArgument(format!("initial column {j} is zero")));
        }
    }
    let field = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let u = DMatrix::from_column_slice(d, k, y);
        dy.copy_from_slice(pca_drift(c, &u).as_slice());
    };
    let t_end = *grid.last().unwrap();
    let start = if grid[0] > 0.0 {
        rk45(field, u0.as_slice(), (0.0, grid[0]), Rk45Options::default())?
            .final_state()
            .to_vec()
    } else {
        u0.as_slice().to_vec()
    };
    let values: Vec<Vec<f64>> = if t_end > grid[0] {
        let sol = rk45(field, &start, (grid[0], t_end), Rk45Options::default())?;
        grid.iter().map(|&t| sol.eval(t)).collect()
    } else {
        vec![start]
    };

    let mut values = values;
    if let Some((m, target)) = values.iter().enumerate().find_map(|(m, v)| snap_target(c, u_star, v).map(|s| (m, s))) {
        for v in &mut values[m..] {
            v.copy_from_slice(&target);
        }
    }
    Ok(MeanTrajectory {
        grid: grid.to_vec(),
        values,
        label: "pca".into(),
    })
}

fn snap_target(c: &DMatrix<f64>, u_star: &DMatrix<f64>, y: &[f64]) -> Option<Vec<f64>> {
    let (d, k) = u_star.shape();
    let u = DMatrix::from_column_slice(d, k, y);
    let drift = pca_drift(c, &u);
    let mut target = DMatrix::zeros(d, k);
    for j in 0..k {
        if drift.column(j).norm() >= PCA_SNAP_DRIFT {
            return None;
        }
        let col = u.column(j);
        let star = u_star.column(j);
        let plus = (col - star).norm();
        let minus = (col + star).norm();
        let (dist, sign) = if plus <= minus { (plus, 1.0) } else { (minus, -1.0) };
        if dist > PCA_SNAP_DISTANCE {
            return None;
        }
        target.set_column(j, &(star * sign));
    }
    Some(target.as_slice().to_vec())
}

/// Long-run absolute RDA bias `c0/σ²` of an active coordinate under diagonal `H`.
pub fn rda_limit_bias(c0: f64, sigma_sq: f64) -> Result<f64> {
    if !(c0 >= 0.0 && sigma_sq > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need c0 >= 0 and sigma^2 > 0, got ({c0}, {sigma_sq})"
        )));
    }
    Ok(c0 / sigma_sq)
}

/// Relative tolerance of the `h(t)` quadrature.
pub const BIAS_QUAD_TOL: f64 = 1e-8;

/// `h(t) = −sign·c·μ·e^{−σ²t} ∫_{t0}^{t} (s − t0)^{μ−1} e^{σ²s} ds`.
///
/// The integral is taken in `u = (s − t0)^μ`, which removes the endpoint
/// singularity for `μ < 1` and keeps the integrand bounded by 1. The integrand is truncated where it falls below
/// `e^{−40}`.
pub fn bias_h(t: f64, c: f64, mu: f64, t0: f64, sigma_sq: f64, sign: f64) -> Result<f64> {
    if !(c > 0.0 && mu > 0.0 && sigma_sq > 0.0 && t0 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bias_h needs c > 0, mu > 0, sigma^2 > 0, t0 >= 0; got ({c}, {mu}, {sigma_sq}, {t0})"
        )));
    }
    if !(t >= t0) {
        return Err(Error::InvalidArgument(format!("bias_h needs t >= t0, got t={t}, t0={t0}")));
    }
    if !(sign == 1.0 || sign == -1.0) {
        return Err(Error::InvalidArgument(format!("sign must be +1 or -1, got {sign}")));
    }
    let tau = t - t0;
    if tau == 0.0 {
        return Ok(0.0);
    }
    let cut = (tau - 40.0 / sigma_sq).max(0.0);
    let inv = 1.0 / mu;
    let integral = adaptive_quad(
        |u: f64| (sigma_sq * (u.powf(inv) - tau)).exp(),
        cut.powf(mu),
        tau.powf(mu),
        BIAS_QUAD_TOL,
    )?;
    Ok(-sign * c * integral)
}

/// `sgn` with `sgn(0) = 0`.
pub fn sgn(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Maximal run of constant sign, as inclusive grid indices and times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignInterval {
    pub first: usize,
    pub last: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub sign: i8,
}

/// Per-coordinate sign intervals of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SignPattern {
    pub grid: Vec<f64>,
    pub intervals: Vec<Vec<SignInterval>>,
    signs: Vec<Vec<i8>>,
}

impl SignPattern {
    /// Sign of coordinate `j` at grid index `m`.
    pub fn sign_at(&self, m: usize, j: usize) -> i8 {
        self.signs[m][j]
    }

    pub fn signs_at(&self, m: usize) -> &[i8] {
        &self.signs[m]
    }

    pub fn is_globally_stable(&self, j: usize) -> bool {
        self.intervals[j].len() == 1
    }

    /// Grid times where coordinate `j` changes sign (start of each new interval).
    pub fn change_times(&self, j: usize) -> Vec<f64> {
        self.intervals[j].iter().skip(1).map(|iv| iv.t_start).collect()
    }
}

pub fn sign_stable_intervals(traj: &MeanTrajectory) -> Result<SignPattern> {
    if traj.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("trajectory has non-finite values".into()));
    }
    let signs: Vec<Vec<i8>> = traj.values.iter().map(|v| v.iter().map(|x| sgn(*x)).collect()).collect();
    let d = traj.dim();
    let mut intervals = vec![Vec::new(); d];
    for (j, ivs) in intervals.iter_mut().enumerate() {
        let mut first = 0;
        for m in 1..=signs.len() {
            if m == signs.len() || signs[m][j] != signs[first][j] {
                ivs.push(SignInterval {
                    first,
                    last: m - 1,
                    t_start: traj.grid[first],
                    t_end: traj.grid[m - 1],
                    sign: signs[first][j],
                });
                first = m;
            }
        }
    }
    Ok(SignPattern {
        grid: traj.grid.clone(),
        intervals,
        signs,
    })
}
