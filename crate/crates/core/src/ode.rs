//! Adaptive Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! The stepper works on plain `f64` slices so that the same code drives the
//! phase-space flow, the flow together with its variational equations, and
//! the classical spin precession.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64, state: Vec<f64> },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize),
}

impl OdeError {
    /// Last state that was accepted before the failure, if any.
    pub fn last_state(&self) -> Option<&[f64]> {
        match self {
            OdeError::StepUnderflow { state, .. } | OdeError::NonFinite { state, .. } => {
                Some(state)
            }
            OdeError::TooManySteps(_) => None,
        }
    }
}

/// Right-hand side of `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
    pub dense: bool,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_init: None,
            h_max: None,
            max_steps: 2_000_000,
            dense: true,
        }
    }
}

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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Hairer's continuous extension of order 4.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with the coefficients of its interpolating polynomial.
#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    h: f64,
    /// 5 blocks of `dim` coefficients.
    coef: Vec<f64>,
}

/// Piecewise polynomial interpolant over all accepted steps.
#[derive(Debug, Clone, Default)]
pub struct DenseOutput {
    dim: usize,
    segments: Vec<Segment>,
}

impl DenseOutput {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.segments.first().map(|s| s.t0).unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map(|s| s.t0 + s.h).unwrap_or(0.0)
    }

    fn locate(&self, t: f64) -> &Segment {
        let forward = self.segments[0].h >= 0.0;
        // segments are ordered along the direction of integration
        let idx = self.segments.partition_point(|s| {
            let end = s.t0 + s.h;
            if forward {
                end < t
            } else {
                end > t
            }
        });
        &self.segments[idx.min(self.segments.len() - 1)]
    }

    /// Evaluates the interpolant at `t` (clamped to the covered interval).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let seg = self.locate(t);
        let theta = if seg.h == 0.0 { 0.0 } else { ((t - seg.t0) / seg.h).clamp(0.0, 1.0) };
        let th1 = 1.0 - theta;
        let n = self.dim;
        let c = &seg.coef;
        for i in 0..n {
            out[i] = c[i]
                + theta
                    * (c[n + i]
                        + th1 * (c[2 * n + i] + theta * (c[3 * n + i] + th1 * c[4 * n + i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

/// Result of an integration: accepted step endpoints and optional dense output.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub dense: DenseOutput,
    pub n_rhs: usize,
}

impl OdeSolution {
    pub fn final_state(&self) -> &[f64] {
        self.ys.last().expect("solution has at least the initial point")
    }
}

fn error_norm(y0: &[f64], y1: &[f64], err: &[f64], opts: &OdeOptions) -> f64 {
    let n = y0.len() as f64;
    let mut acc = 0.0;
    for i in 0..y0.len() {
        let sc = opts.atol + opts.rtol * y0[i].abs().max(y1[i].abs());
        let r = err[i] / sc;
        acc += r * r;
    }
    (acc / n).sqrt()
}

/// Integrates `sys` from `(t0, y0)` to `t1` (either direction).
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
) -> Result<OdeSolution, OdeError> {
    let n = sys.dim();
    assert_eq!(y0.len(), n, "state dimension mismatch");
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();

    let mut ts = vec![t0];
    let mut ys = vec![y0.to_vec()];
    let mut dense = DenseOutput { dim: n, segments: Vec::new() };
    if span == 0.0 {
        if opts.dense {
            let mut coef = vec![0.0; 5 * n];
            coef[..n].copy_from_slice(y0);
            dense.segments.push(Segment { t0, h: 0.0, coef });
        }
        return Ok(OdeSolution { ts, ys, dense, n_rhs: 0 });
    }

    let mut k = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut n_rhs = 0usize;

    sys.rhs(t, &y, &mut k[0]);
    n_rhs += 1;

    let h_max = opts.h_max.unwrap_or(span).min(span);
    let mut h = match opts.h_init {
        Some(h) => h.abs().min(h_max),
        None => {
            // Hairer's starting step heuristic (first-order version)
            let mut d0 = 0.0;
            let mut d1 = 0.0;
            for i in 0..n {
                let sc = opts.atol + opts.rtol * y[i].abs();
                d0 += (y[i] / sc).powi(2);
                d1 += (k[0][i] / sc).powi(2);
            }
            let d0 = (d0 / n as f64).sqrt();
            let d1 = (d1 / n as f64).sqrt();
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            (h0 * 0.1).min(h_max).max(1e-12 * span)
        }
    };

    let mut steps = 0usize;
    let mut reject_prev = false;
    loop {
        if steps >= opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps));
        }
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        if h < 1e-14 * (t.abs() + span) {
            return Err(OdeError::StepUnderflow { t, h, state: y.clone() });
        }
        let hs = h * dir;

        for i in 0..n {
            ytmp[i] = y[i] + hs * A21 * k[0][i];
        }
        sys.rhs(t + C2 * hs, &ytmp, &mut k[1]);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A31 * k[0][i] + A32 * k[1][i]);
        }
        sys.rhs(t + C3 * hs, &ytmp, &mut k[2]);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        sys.rhs(t + C4 * hs, &ytmp, &mut k[3]);
        for i in 0..n {
            ytmp[i] = y[i]
                + hs * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        sys.rhs(t + C5 * hs, &ytmp, &mut k[4]);
        for i in 0..n {
            ytmp[i] = y[i]
                + hs * (A61 * k[0][i]
                    + A62 * k[1][i]
                    + A63 * k[2][i]
                    + A64 * k[3][i]
                    + A65 * k[4][i]);
        }
        sys.rhs(t + hs, &ytmp, &mut k[5]);
        for i in 0..n {
            y1[i] = y[i]
                + hs * (A71 * k[0][i]
                    + A73 * k[2][i]
                    + A74 * k[3][i]
                    + A75 * k[4][i]
                    + A76 * k[5][i]);
        }
        let (head, tail) = k.split_at_mut(6);
        sys.rhs(t + hs, &y1, &mut tail[0]);
        n_rhs += 6;
        let k7 = &tail[0];
        for i in 0..n {
            err[i] = hs
                * (E1 * head[0][i]
                    + E3 * head[2][i]
                    + E4 * head[3][i]
                    + E5 * head[4][i]
                    + E6 * head[5][i]
                    + E7 * k7[i]);
        }
        if y1.iter().any(|v| !v.is_finite()) {
            if h > 1e-10 * span {
                h *= 0.25;
                reject_prev = true;
                continue;
            }
            return Err(OdeError::NonFinite { t, state: y.clone() });
        }
        let en = error_norm(&y, &y1, &err, opts);
        steps += 1;
        if en <= 1.0 {
            if opts.dense {
                let mut coef = vec![0.0; 5 * n];
                for i in 0..n {
                    let ydiff = y1[i] - y[i];
                    let bspl = hs * head[0][i] - ydiff;
                    coef[i] = y[i];
                    coef[n + i] = ydiff;
                    coef[2 * n + i] = bspl;
                    coef[3 * n + i] = ydiff - hs * k7[i] - bspl;
                    coef[4 * n + i] = hs
                        * (D1 * head[0][i]
                            + D3 * head[2][i]
                            + D4 * head[3][i]
                            + D5 * head[4][i]
                            + D6 * head[5][i]
                            + D7 * k7[i]);
                }
                dense.segments.push(Segment { t0: t, h: hs, coef });
            }
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&y1);
            ts.push(t);
            ys.push(y.clone());
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            let mut fac = 0.9 * en.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 5.0);
            if reject_prev {
                fac = fac.min(1.0);
            }
            reject_prev = false;
            if last {
                break;
            }
            h = (h * fac).min(h_max);
        } else {
            let fac = (0.9 * en.powf(-0.2)).clamp(0.1, 0.9);
            h *= fac;
            reject_prev = true;
        }
    }
    Ok(OdeSolution { ts, ys, dense, n_rhs })
}
