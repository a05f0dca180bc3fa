//! Generalized regularized dual averaging in mirror-descent form.
//!
//! The dual accumulator collects negative scaled gradients,
//! `v ← v − γ·∇f`, and the primal iterate is the proximal image of the
//! accumulator at penalty level `g(n, γ)`: `w = prox(v, g(n, γ))`. With the
//! zero schedule and no penalty the iteration is plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iterates with any coordinate beyond this magnitude are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Penalty-strength schedule `g(n, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuningSchedule {
    /// `g ≡ 0` (SGD).
    Zero,
    /// `g = c0·n·γ` (classical RDA).
    Rda { c0: f64 },
    /// `g = c·√γ·(nγ − t0)₊^μ`.
    PowerLaw { c: f64, mu: f64, t0: f64 },
    /// `g = γ^{1/2+μ}·n^μ`, the power law with `c = 1`, `t0 = 0`.
    SimPowerLaw { mu: f64 },
}

impl TuningSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            TuningSchedule::Zero => Ok(()),
            TuningSchedule::Rda { c0 } if !(c0 >= 0.0 && c0.is_finite()) => {
                bad(format!("rda c0 must be >= 0, got {c0}"))
            }
            TuningSchedule::PowerLaw { c, mu, t0 }
                if !(c > 0.0 && mu >= 0.0 && t0 >= 0.0 && c.is_finite() && mu.is_finite() && t0.is_finite()) =>
            {
                bad(format!("power law needs c > 0, mu >= 0, t0 >= 0; got c={c}, mu={mu}, t0={t0}"))
            }
            TuningSchedule::SimPowerLaw { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                bad(format!("power law needs mu >= 0, got {mu}"))
            }
            _ => Ok(()),
        }
    }

    /// `g(n, γ)`. Always non-negative for valid schedules and `γ > 0`.
    pub fn value(&self, n: u64, gamma: f64) -> f64 {
        match *self {
            TuningSchedule::Zero => 0.0,
            TuningSchedule::Rda { c0 } => c0 * n as f64 * gamma,
            TuningSchedule::PowerLaw { c, mu, t0 } => {
                let excess = n as f64 * gamma - t0;
                if excess <= 0.0 {
                    0.0
                } else {
                    c * gamma.sqrt() * excess.powf(mu)
                }
            }
            TuningSchedule::SimPowerLaw { mu } => gamma.powf(0.5 + mu) * (n as f64).powf(mu),
        }
    }
}

/// Free-function form of [`TuningSchedule::value`].
pub fn tuning_value(schedule: &TuningSchedule, n: u64, gamma: f64) -> f64 {
    schedule.value(n, gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    None,
    L1,
    ElasticNet { kappa: f64 },
    /// Disjoint groups of zero-based coordinate indices covering `0..d`.
    GroupLasso { groups: Vec<Vec<usize>> },
}

impl Penalty {
    pub fn group_lasso(groups: Vec<Vec<usize>>, d: usize) -> Result<Self> {
        let p = Penalty::GroupLasso { groups };
        p.validate(d)?;
        Ok(p)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Penalty::ElasticNet { kappa } if !(*kappa > 0.0 && kappa.is_finite()) => Err(
                Error::InvalidArgument(format!("elastic net kappa must be > 0, got {kappa}")),
            ),
            Penalty::GroupLasso { groups } => {
                let mut seen = vec![false; d];
                for &j in groups.iter().flatten() {
                    if j >= d {
                        return Err(Error::InvalidArgument(format!(
                            "group index {j} out of range for d = {d}"
                        )));
                    }
                    if std::mem::replace(&mut seen[j], true) {
                        return Err(Error::InvalidArgument(format!(
                            "coordinate {j} appears in more than one group"
                        )));
                    }
                }
                if let Some(j) = seen.iter().position(|s| !s) {
                    return Err(Error::InvalidArgument(format!(
                        "coordinate {j} is not covered by any group"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Writes `argmin_w ½‖w − v‖² + λ·P(w)` into `out`.
    pub fn prox_into(&self, v: &[f64], lambda: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), out.len());
        match self {
            Penalty::None => out.copy_from_slice(v),
            Penalty::L1 => soft_threshold_into(v, lambda, out),
            Penalty::ElasticNet { kappa } => {
                soft_threshold_into(v, lambda, out);
                let scale = 1.0 / (1.0 + kappa * lambda);
                out.iter_mut().for_each(|x| *x *= scale);
            }
            Penalty::GroupLasso { groups } => group_shrink_into(v, lambda, groups, out),
        }
    }

    pub fn prox(&self, v: &[f64], lambda: f64) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.prox_into(v, lambda, &mut out);
        out
    }
}

#[inline]
pub(crate) fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

fn soft_threshold_into(v: &[f64], lambda: f64, out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(v) {
        *o = soft_threshold(x, lambda);
    }
}

fn group_shrink_into(v: &[f64], lambda: f64, groups: &[Vec<usize>], out: &mut [f64]) {
    for group in groups {
        let norm = group.iter().map(|&j| v[j] * v[j]).sum::<f64>().sqrt();
        // (1 − λ/‖v_a‖)₊; the clamp also sends the zero group to zero
        let scale = if norm > lambda { 1.0 - lambda / norm } else { 0.0 };
        for &j in group {
            out[j] = scale * v[j];
        }
    }
}

/// `sgn(v_j)(|v_j| − λ)₊` per coordinate.
pub fn prox_l1(v: &[f64], lambda: f64) -> Vec<f64> {
    Penalty::L1.prox(v, lambda)
}

/// `(1 + κλ)⁻¹ sgn(v_j)(|v_j| − λ)₊` per coordinate.
pub fn prox_elastic_net(v: &[f64], lambda: f64, kappa: f64) -> Vec<f64> {
    Penalty::ElasticNet { kappa }.prox(v, lambda)
}

/// `(1 − λ/‖v_a‖₂)₊ v_a` per group.
pub fn prox_group_lasso(v: &[f64], lambda: f64, groups: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    group_shrink_into(v, lambda, groups, &mut out);
    out
}

/// Dual accumulator, primal iterate, step count and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub n: u64,
    pub gamma: f64,
}

impl OptimizerState {
    pub fn new(w0: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {gamma}")));
        }
        Ok(Self {
            v: w0.clone(),
            w: w0,
            n: 0,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// One mirror-descent step: `v ← v − γ·grad`, `n ← n + 1`,
    /// `w ← prox(v, g(n, γ))`.
    ///
    /// A non-finite gradient leaves the state untouched. An iterate beyond
    /// [`DIVERGENCE_LIMIT`] is kept but reported as [`Error::Diverged`].
    pub fn step(&mut self, gradient: &[f64], schedule: &TuningSchedule, penalty: &Penalty) -> Result<()> {
        if gradient.len() != self.v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.v.len(),
                got: gradient.len(),
            });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step: self.n + 1 });
        }
        for (v, g) in self.v.iter_mut().zip(gradient) {
            *v -= self.gamma * g;
        }
        self.n += 1;
        let lambda = schedule.value(self.n, self.gamma);
        penalty.prox_into(&self.v, lambda, &mut self.w);
        if self.w.iter().any(|x| !(x.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::Diverged {
                step: self.n,
                limit: DIVERGENCE_LIMIT,
            });
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn grda_step(
    mut state: OptimizerState,
    gradient: &[f64],
    schedule: &TuningSchedule,
    penalty: &Penalty,
) -> Result<OptimizerState> {
    state.step(gradient, schedule, penalty)?;
    Ok(state)
}

/// Running arithmetic mean of iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageAccumulator {
    pub sum: Vec<f64>,
    pub count: u64,
}

impl AverageAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            sum: vec![0.0; d],
            count: 0,
        }
    }

    pub fn push(&mut self, w: &[f64]) {
        debug_assert_eq!(w.len(), self.sum.len());
        for (s, x) in self.sum.iter_mut().zip(w) {
            *s += x;
        }
        self.count += 1;
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

pub fn update_average(mut acc: AverageAccumulator, w: &[f64]) -> AverageAccumulator {
    acc.push(w);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    /// Minimizer of a convex scalar function given its right derivative:
    /// the smallest `w` in `[a, b]` where the right derivative is non-negative.
    fn convex_argmin(right_deriv: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if right_deriv(m) >= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        b
    }

    #[test]
    fn schedule_values() {
        assert!((TuningSchedule::Rda { c0: 0.005 }.value(100, 0.005) - 0.0025).abs() < 1e-15);
        let pl = TuningSchedule::PowerLaw { c: 0.005, mu: 0.7, t0: 0.0 };
        let expect = 0.005 * 0.005f64.sqrt() * 5f64.powf(0.7);
        assert!((pl.value(1000, 0.005) - expect).abs() < 1e-15);
        assert!((pl.value(1000, 0.005) - 1.0908e-3).abs() < 1e-7);
        let shifted = TuningSchedule::PowerLaw { c: 1.0, mu: 1.0, t0: 10.0 };
        assert_eq!(shifted.value(5, 1.0), 0.0);
        assert_eq!(TuningSchedule::Zero.value(12345, 0.3), 0.0);
        let sim = TuningSchedule::SimPowerLaw { mu: 0.7 };
        let pl1 = TuningSchedule::PowerLaw { c: 1.0, mu: 0.7, t0: 0.0 };
        assert!((sim.value(777, 1e-3) - pl1.value(777, 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(TuningSchedule::PowerLaw { c: 0.0, mu: 1.0, t0: 0.0 }.validate().is_err());
        assert!(TuningSchedule::SimPowerLaw { mu: -0.1 }.validate().is_err());
        assert!(TuningSchedule::Rda { c0: 0.1 }.validate().is_ok());
    }

    #[test]
    fn l1_prox_examples() {
        assert_eq!(prox_l1(&[2.0, -0.5], 1.0), vec![1.0, 0.0]);
        let v = [0.3, -1.2, 4.0];
        assert_eq!(prox_l1(&v, 0.0), v.to_vec());
        // tie at the threshold maps to exactly zero
        assert_eq!(prox_l1(&[1.0, -1.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn elastic_net_examples() {
        assert_eq!(prox_elastic_net(&[2.0], 1.0, 1.0), vec![0.5]);
        assert_eq!(prox_elastic_net(&[2.0, -3.0], 0.0, 4.0), vec![2.0, -3.0]);
    }

    #[test]
    fn group_lasso_examples() {
        let g = vec![vec![0, 1]];
        assert_eq!(prox_group_lasso(&[3.0, 4.0], 5.0, &g), vec![0.0, 0.0]);
        assert_eq!(prox_group_lasso(&[3.0, 4.0], 0.0, &g), vec![3.0, 4.0]);
        assert_eq!(prox_group_lasso(&[3.0, 4.0], 2.5, &g), vec![1.5, 2.0]);
        assert_eq!(prox_group_lasso(&[0.0, 0.0], 0.0, &g), vec![0.0, 0.0]);
        // below-threshold groups are clamped, never sign-flipped
        assert_eq!(prox_group_lasso(&[0.3, -0.4], 1.0, &g), vec![0.0, 0.0]);
    }

    #[test]
    fn group_partition_validation() {
        assert!(Penalty::group_lasso(vec![vec![0, 1], vec![2]], 3).is_ok());
        assert!(Penalty::group_lasso(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Penalty::group_lasso(vec![vec![0]], 2).is_err());
        assert!(Penalty::group_lasso(vec![vec![0, 5]], 2).is_err());
    }

    #[test]
    fn scalar_prox_matches_bisection_argmin() {
        let mut rng = RngStream::new(31, 0);
        for _ in 0..50 {
            let v: Vec<f64> = (0..3).map(|_| 2.0 * rng.next_normal()).collect();
            let lambda = rng.next_f64() * 1.5;
            let kappa = 0.1 + rng.next_f64() * 2.0;
            let l1 = prox_l1(&v, lambda);
            let en = prox_elastic_net(&v, lambda, kappa);
            for j in 0..3 {
                let vj = v[j];
                let lo = -vj.abs() - 1.0;
                let hi = vj.abs() + 1.0;
                let sgn_right = |w: f64| if w >= 0.0 { 1.0 } else { -1.0 };
                let m1 = convex_argmin(|w| w - vj + lambda * sgn_right(w), lo, hi);
                let m2 = convex_argmin(|w| w - vj + lambda * (kappa * w + sgn_right(w)), lo, hi);
                assert!((l1[j] - m1).abs() <= 1e-8, "l1 {} vs {}", l1[j], m1);
                assert!((en[j] - m2).abs() <= 1e-8, "en {} vs {}", en[j], m2);
            }
        }
    }

    #[test]
    fn sgd_reduction_example() {
        let s = OptimizerState::new(vec![1.0], 0.1).unwrap();
        let s = grda_step(s, &[2.0], &TuningSchedule::Zero, &Penalty::None).unwrap();
        assert_eq!(s.v, vec![0.8]);
        assert_eq!(s.w, vec![0.8]);
        assert_eq!(s.n, 1);
    }

    #[test]
    fn rda_one_step_example() {
        let s = OptimizerState::new(vec![0.0], 1.0).unwrap();
        let s = grda_step(s, &[-3.0], &TuningSchedule::Rda { c0: 1.0 }, &Penalty::L1).unwrap();
        assert_eq!(s.v, vec![3.0]);
        assert_eq!(s.w, vec![2.0]);
    }

    #[test]
    fn replay_matches_prox_of_dual() {
        let mut rng = RngStream::new(77, 0);
        let sched = TuningSchedule::SimPowerLaw { mu: 0.7 };
        let gamma = 0.05;
        let mut s = OptimizerState::new(vec![0.0; 4], gamma).unwrap();
        let mut v_replay = vec![0.0; 4];
        for n in 1..=10u64 {
            let g: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
            s.step(&g, &sched, &Penalty::L1).unwrap();
            for j in 0..4 {
                v_replay[j] -= gamma * g[j];
            }
            let lambda = gamma.powf(1.2) * (n as f64).powf(0.7);
            let w_replay: Vec<f64> = v_replay
                .iter()
                .map(|&x| x.signum() * (x.abs() - lambda).max(0.0))
                .collect();
            assert_eq!(s.w, w_replay);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_with_step() {
        let mut s = OptimizerState::new(vec![0.0; 2], 0.1).unwrap();
        s.step(&[1.0, 1.0], &TuningSchedule::Zero, &Penalty::None).unwrap();
        let err = s.step(&[f64::NAN, 0.0], &TuningSchedule::Zero, &Penalty::None);
        assert!(matches!(err, Err(Error::NonFinite { step: 2 })));
        assert_eq!(s.n, 1);
    }

    #[test]
    fn divergence_flagged() {
        let mut s = OptimizerState::new(vec![0.0], 1.0).unwrap();
        let err = s.step(&[-2e12], &TuningSchedule::Zero, &Penalty::None);
        assert!(matches!(err, Err(Error::Diverged { step: 1, .. })));
    }

    #[test]
    fn average_examples() {
        let mut acc = AverageAccumulator::new(2);
        assert!(acc.mean().is_none());
        acc.push(&[1.0, 1.0]);
        assert_eq!(acc.mean().unwrap(), vec![1.0, 1.0]);
        let acc = update_average(acc, &[3.0, 3.0]);
        assert_eq!(acc.mean().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn average_matches_batch_mean() {
        let mut rng = RngStream::new(3, 3);
        let pts: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.next_normal()).collect()).collect();
        let mut acc = AverageAccumulator::new(3);
        for p in &pts {
            acc.push(p);
        }
        let mean = acc.mean().unwrap();
        for j in 0..3 {
            let batch: f64 = pts.iter().map(|p| p[j]).sum::<f64>() / 100.0;
            assert!((mean[j] - batch).abs() <= 1e-12);
        }
    }

    fn penalty_strategy() -> impl Strategy<Value = Penalty> {
        prop_oneof![
            Just(Penalty::None),
            Just(Penalty::L1),
            (0.01f64..5.0).prop_map(|kappa| Penalty::ElasticNet { kappa }),
            Just(Penalty::GroupLasso {
                groups: vec![vec![0, 2], vec![1], vec![3]]
            }),
        ]
    }

    proptest! {
        #[test]
        fn prox_is_non_expansive(
            v in prop::collection::vec(-10.0f64..10.0, 4),
            u in prop::collection::vec(-10.0f64..10.0, 4),
            lambda in 0.0f64..5.0,
            penalty in penalty_strategy(),
        ) {
            let pv = penalty.prox(&v, lambda);
            let pu = penalty.prox(&u, lambda);
            let lhs: f64 = pv.iter().zip(&pu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rhs: f64 = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn l1_sparsity_monotone_in_lambda(
            v in prop::collection::vec(-5.0f64..5.0, 6),
            l1 in 0.0f64..3.0,
            dl in 0.0f64..3.0,
        ) {
            let nnz = |lam: f64| prox_l1(&v, lam).iter().filter(|x| **x != 0.0).count();
            prop_assert!(nnz(l1 + dl) <= nnz(l1));
        }

        #[test]
        fn schedules_are_non_negative(n in 0u64..1_000_000, gamma in 1e-6f64..1.0, mu in 0.0f64..2.0) {
            for s in [
                TuningSchedule::Zero,
                TuningSchedule::Rda { c0: 0.3 },
                TuningSchedule::PowerLaw { c: 0.5, mu, t0: 1.0 },
                TuningSchedule::SimPowerLaw { mu },
            ] {
                prop_assert!(s.value(n, gamma) >= 0.0);
            }
        }

        #[test]
        fn sgd_reduction_bit_exact(
            w0 in prop::collection::vec(-3.0f64..3.0, 3),
            grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..20),
            gamma in 1e-4f64..0.5,
        ) {
            let mut s = OptimizerState::new(w0.clone(), gamma).unwrap();
            let mut w = w0;
            for g in &grads {
                s.step(g, &TuningSchedule::Zero, &Penalty::None).unwrap();
                for j in 0..3 {
                    w[j] -= gamma * g[j];
                }
                prop_assert_eq!(&s.w, &w);
            }
        }
    }
}
