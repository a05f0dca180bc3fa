use crate::error::{Error, Result};

/// Accepted steps of an adaptive integration, with cubic Hermite dense output.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub fs: Vec<Vec<f64>>,
}

impl OdeSolution {
    /// State at `t`, interpolated between the bracketing accepted steps.
    /// `t` outside the integrated span is clamped to the nearest end.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let last = self.ts.len() - 1;
        if t <= self.ts[0] {
            return self.ys[0].clone();
        }
        if t >= self.ts[last] {
            return self.ys[last].clone();
        }
        let i = match self.ts.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => return self.ys[i].clone(),
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        (0..self.ys[i].len())
            .map(|k| {
                h00 * self.ys[i][k]
                    + h10 * h * self.fs[i][k]
                    + h01 * self.ys[i + 1][k]
                    + h11 * h * self.fs[i + 1][k]
            })
            .collect()
    }

    pub fn final_state(&self) -> &[f64] {
        self.ys.last().expect("solution has at least one point")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Rk45Options {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_step: Option<f64>,
    pub max_step: f64,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            initial_step: None,
            max_step: f64::INFINITY,
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b* (fifth minus fourth order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

/// Adaptive Dormand–Prince integration of `y' = f(t, y)` over `t_span`.
///
/// `f` writes the derivative into its third argument.
pub fn rk45<F>(mut f: F, y0: &[f64], t_span: (f64, f64), opts: Rk45Options) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let (t0, t_end) = t_span;
    if !(t_end > t0) {
        return Err(Error::InvalidArgument(format!(
            "rk45 needs t_end > t0, got ({t0}, {t_end})"
        )));
    }
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t, &y, &mut k1);

    let mut sol = OdeSolution {
        ts: vec![t],
        ys: vec![y.clone()],
        fs: vec![k1.clone()],
    };

    let span = t_end - t0;
    let mut h = opts.initial_step.unwrap_or_else(|| {
        let y_norm = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let f_norm = k1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if f_norm > 0.0 {
            (0.01 * (y_norm.max(opts.abs_tol)) / f_norm).min(span * 0.1)
        } else {
            span * 0.1
        }
    });
    h = h.min(opts.max_step).max(1e-12 * span);

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t });
        }
        axpy_into(&mut tmp, &y, h, &[(A21, &k1)]);
        f(t + C2 * h, &tmp, &mut k2);
        axpy_into(&mut tmp, &y, h, &[(A31, &k1), (A32, &k2)]);
        f(t + C3 * h, &tmp, &mut k3);
        axpy_into(&mut tmp, &y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        f(t + C4 * h, &tmp, &mut k4);
        axpy_into(&mut tmp, &y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        f(t + C5 * h, &tmp, &mut k5);
        axpy_into(
            &mut tmp,
            &y,
            h,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        );
        f(t + h, &tmp, &mut k6);
        axpy_into(
            &mut y_new,
            &y,
            h,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        f(t + h, &y_new, &mut k7);

        let mut err = 0.0;
        let mut finite = true;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
            finite &= y_new[i].is_finite();
        }
        let err = if n > 0 { (err / n as f64).sqrt() } else { 0.0 };

        if finite && err <= 1.0 {
            t += h;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            sol.ts.push(t);
            sol.ys.push(y.clone());
            sol.fs.push(k1.clone());
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h * factor).min(opts.max_step);
        } else {
            let factor = if finite {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.25
            };
            h *= factor;
        }
    }
    Ok(sol)
}
