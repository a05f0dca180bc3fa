use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::TuningSchedule;
use crate::sde::MIN_BAND_PATHS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Lr,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Rda,
    Grda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Exact,
    #[default]
    Empirical,
}

fn default_d() -> usize {
    20
}
fn default_k() -> usize {
    1
}
fn default_rho() -> f64 {
    -0.5
}
fn default_sigma_eps() -> f64 {
    1.0
}
fn default_support() -> usize {
    6
}
fn default_pca_support() -> usize {
    10
}
fn default_pca_spikes() -> Vec<f64> {
    vec![2.0, 1.0]
}
fn default_reps() -> usize {
    100
}
fn default_band_paths() -> usize {
    500
}
fn default_dt() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.05
}
fn default_kernel_samples() -> usize {
    5000
}

/// Experiment description, read from JSON with snake_case keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Number of principal components (PCA only).
    #[serde(default = "default_k")]
    pub k: usize,
    /// AR correlation of the design, `H_ij = ρ^{|i−j|}`.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Diagonal design covariance; overrides `rho` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_diag: Option<Vec<f64>>,
    #[serde(default = "default_sigma_eps")]
    pub sigma_eps: f64,
    /// Number of nonzero true coefficients (LR).
    #[serde(default = "default_support")]
    pub support: usize,
    /// Explicit true coefficients; overrides the random draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_star: Option<Vec<f64>>,
    /// Seed of the coefficient draw; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coef_seed: Option<u64>,
    #[serde(default)]
    pub min_active_magnitude: f64,
    /// Nonzero loadings per principal component (PCA).
    #[serde(default = "default_pca_support")]
    pub pca_support: usize,
    /// Spike strengths, `C = Σ_j spike_j U_j U_jᵀ + I`. The first `k` components are tracked.
    #[serde(default = "default_pca_spikes")]
    pub pca_spikes: Vec<f64>,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    /// Power-law constant; absent means the simplified `γ^{1/2+μ} n^μ` form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default)]
    pub t0: f64,
    pub gamma: f64,
    pub horizon: f64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// SDE paths for the band; 0 disables the band.
    #[serde(default = "default_band_paths")]
    pub band_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kernel_samples")]
    pub kernel_samples: usize,
    #[serde(default)]
    pub kernel: KernelKind,
    /// Repetitions written to `trajectories.csv`; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_reps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn schedule(&self) -> Result<TuningSchedule> {
        let s = match self.algorithm {
            Algorithm::Sgd => TuningSchedule::Zero,
            Algorithm::Rda => TuningSchedule::Rda {
                c0: self.c0.ok_or_else(|| Error::Config("algorithm rda needs c0".into()))?,
            },
            Algorithm::Grda => {
                let mu = self.mu.ok_or_else(|| Error::Config("algorithm grda needs mu".into()))?;
                match self.c {
                    None if self.t0 == 0.0 => TuningSchedule::SimPowerLaw { mu },
                    c => TuningSchedule::PowerLaw {
                        c: c.unwrap_or(1.0),
                        mu,
                        t0: self.t0,
                    },
                }
            }
        };
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }

    /// Whether a band can be built: requested and the schedule has a scaled limit.
    pub fn band_enabled(&self) -> bool {
        self.band_paths > 0 && self.algorithm != Algorithm::Rda
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return fail(format!("horizon must be > 0, got {}", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return fail(format!("dt must lie in (0, horizon], got {}", self.dt));
        }
        if self.reps == 0 {
            return fail("reps must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.band_paths != 0 && self.band_paths < MIN_BAND_PATHS {
            return fail(format!("band_paths must be 0 or >= {MIN_BAND_PATHS}, got {}", self.band_paths));
        }
        if self.kernel == KernelKind::Empirical && self.kernel_samples == 0 {
            return fail("kernel_samples must be positive".into());
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return fail(format!("sigma_eps must be >= 0, got {}", self.sigma_eps));
        }
        if self.workers == Some(0) {
            return fail("workers must be positive".into());
        }
        match self.problem {
            Problem::Lr => {
                if let Some(h) = &self.h_diag {
                    if h.len() != self.d || h.iter().any(|x| !(*x > 0.0)) {
                        return fail(format!("h_diag needs {} positive entries", self.d));
                    }
                }
                if let Some(w) = &self.w_star {
                    if w.len() != self.d {
                        return fail(format!("w_star needs {} entries, got {}", self.d, w.len()));
                    }
                } else if self.support > self.d {
                    return fail(format!("support {} exceeds d = {}", self.support, self.d));
                }
            }
            Problem::Pca => {
                if !(1..=2).contains(&self.k) {
                    return fail(format!("pca supports k in 1..=2, got {}", self.k));
                }
                if self.pca_spikes.len() < self.k {
                    return fail(format!("pca_spikes needs at least k = {} entries", self.k));
                }
                if self.pca_support == 0 || self.pca_spikes.len() * self.pca_support > self.d {
                    return fail(format!(
                        "{} spikes of support {} do not fit in d = {}",
                        self.pca_spikes.len(),
                        self.pca_support,
                        self.d
                    ));
                }
            }
        }
        self.schedule()?;
        Ok(())
    }
}
