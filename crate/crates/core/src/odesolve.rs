//! Initial-value-problem solver over flat state vectors.
//!
//! Integration runs forward or backward in time (`t_end < t_start`); the
//! direction is folded into the sign of the step, so the same vector field
//! serves both passes. Only the current state and the stage buffers are
//! ever alive: no per-step history is kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNorm {
    /// RMS over the whole state.
    Full,
    /// RMS over a caller-declared prefix of the state.
    Semi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
    /// Step size for euler/rk4; an upper bound on the step for dopri5.
    #[serde(default)]
    pub fixed_step: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_norm")]
    pub error_norm: ErrorNorm,
}

fn default_tol() -> f64 {
    1e-3
}
fn default_max_steps() -> usize {
    100_000
}
fn default_norm() -> ErrorNorm {
    ErrorNorm::Semi
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::dopri5(1e-3, 1e-3)
    }
}

impl SolverConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4,
            rtol: default_tol(),
            atol: default_tol(),
            fixed_step: Some(step),
            max_steps: default_max_steps(),
            error_norm: ErrorNorm::Semi,
        }
    }

    pub fn euler(step: f64) -> Self {
        Self {
            method: Method::Euler,
            ..Self::rk4(step)
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            fixed_step: None,
            max_steps: default_max_steps(),
            error_norm: ErrorNorm::Semi,
        }
    }

    pub fn with_error_norm(mut self, norm: ErrorNorm) -> Self {
        self.error_norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        match (self.method, self.fixed_step) {
            (_, Some(h)) if !(h > 0.0) => {
                Err(Error::Config("fixed_step must be positive".into()))
            }
            (Method::Euler | Method::Rk4, None) => Err(Error::Config(
                "fixed_step is required for euler and rk4".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub terminal_state: Vec<f64>,
    /// Vector-field evaluations.
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Length of the integrated state (every stage buffer has this length).
    pub state_len: usize,
}

impl SolveReport {
    /// Folds the accounting of a follow-up solve into `self`.
    pub fn absorb(&mut self, next: SolveReport) {
        self.nfe += next.nfe;
        self.accepted_steps += next.accepted_steps;
        self.rejected_steps += next.rejected_steps;
        self.state_len = self.state_len.max(next.state_len);
        self.terminal_state = next.terminal_state;
    }
}

pub fn nfe_of(report: &SolveReport) -> usize {
    report.nfe
}

/// Solves `dy/dt = field(t, y)` from `t_start` to `t_end`, measuring the
/// adaptive error over the whole state.
pub fn odesolve<F>(
    y0: &[f64],
    t_start: f64,
    t_end: f64,
    field: F,
    cfg: &SolverConfig,
) -> Result<SolveReport>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    odesolve_with_prefix(y0, t_start, t_end, field, cfg, y0.len())
}

/// Like [`odesolve`], but under [`ErrorNorm::Semi`] the step-size controller
/// only looks at `y[..norm_prefix]`.
pub fn odesolve_with_prefix<F>(
    y0: &[f64],
    t_start: f64,
    t_end: f64,
    mut field: F,
    cfg: &SolverConfig,
    norm_prefix: usize,
) -> Result<SolveReport>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    if !(t_start.is_finite() && t_end.is_finite()) {
        return Err(Error::BadInterval(format!("[{t_start}, {t_end}]")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t: t_start });
    }
    if t_start == t_end {
        return Ok(SolveReport {
            terminal_state: y0.to_vec(),
            nfe: 0,
            accepted_steps: 0,
            rejected_steps: 0,
            state_len: y0.len(),
        });
    }
    let prefix = match cfg.error_norm {
        ErrorNorm::Full => y0.len(),
        ErrorNorm::Semi => norm_prefix.min(y0.len()),
    };
    match cfg.method {
        Method::Euler => fixed_step(y0, t_start, t_end, &mut field, cfg, FixedScheme::Euler),
        Method::Rk4 => fixed_step(y0, t_start, t_end, &mut field, cfg, FixedScheme::Rk4),
        Method::Dopri5 => dopri5(y0, t_start, t_end, &mut field, cfg, prefix),
    }
}

#[derive(Clone, Copy)]
enum FixedScheme {
    Euler,
    Rk4,
}

/// Number of uniform steps of size at most `h` covering `span`.
pub fn fixed_step_count(span: f64, h: f64) -> usize {
    ((span.abs() / h) - 1e-9).ceil().max(1.0) as usize
}

fn fixed_step<F>(
    y0: &[f64],
    t_start: f64,
    t_end: f64,
    field: &mut F,
    cfg: &SolverConfig,
    scheme: FixedScheme,
) -> Result<SolveReport>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let h_max = cfg.fixed_step.expect("validated");
    let span = t_end - t_start;
    let steps = fixed_step_count(span, h_max);
    if steps > cfg.max_steps {
        return Err(Error::MaxStepsExceeded {
            max_steps: cfg.max_steps,
            t: t_start,
        });
    }
    let h = span / steps as f64;
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut nfe = 0;

    for i in 0..steps {
        let t = t_start + i as f64 * h;
        match scheme {
            FixedScheme::Euler => {
                field(t, &y, &mut k1);
                nfe += 1;
                for (yi, ki) in y.iter_mut().zip(&k1) {
                    *yi += h * ki;
                }
            }
            FixedScheme::Rk4 => {
                field(t, &y, &mut k1);
                combine(&mut tmp, &y, &[(0.5 * h, &k1)]);
                field(t + 0.5 * h, &tmp, &mut k2);
                combine(&mut tmp, &y, &[(0.5 * h, &k2)]);
                field(t + 0.5 * h, &tmp, &mut k3);
                combine(&mut tmp, &y, &[(h, &k3)]);
                field(t + h, &tmp, &mut k4);
                nfe += 4;
                let w = h / 6.0;
                for j in 0..n {
                    y[j] += w * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t + h });
        }
    }
    Ok(SolveReport {
        terminal_state: y,
        nfe,
        accepted_steps: steps,
        rejected_steps: 0,
        state_len: n,
    })
}

#[inline]
fn combine(out: &mut [f64], y: &[f64], terms: &[(f64, &Vec<f64>)]) {
    out.copy_from_slice(y);
    for (c, k) in terms {
        if *c == 0.0 {
            continue;
        }
        for (o, kv) in out.iter_mut().zip(k.iter()) {
            *o += c * kv;
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
// 5th minus embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_ALPHA: f64 = 0.7 / 5.0;
const PI_BETA: f64 = 0.4 / 5.0;

fn rms_scaled(v: &[f64], y: &[f64], cfg: &SolverConfig) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(vi, yi)| {
            let r = vi / (cfg.atol + cfg.rtol * yi.abs());
            r * r
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn dopri5<F>(
    y0: &[f64],
    t_start: f64,
    t_end: f64,
    field: &mut F,
    cfg: &SolverConfig,
    prefix: usize,
) -> Result<SolveReport>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let span = t_end - t_start;
    let dir = span.signum();
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut nfe = 0;
    let (mut accepted, mut rejected) = (0usize, 0usize);

    let mut t = t_start;
    field(t, &y, &mut k[0]);
    nfe += 1;

    // Initial step from the field magnitude at t_start; no extra evaluation.
    let d0 = rms_scaled(&y[..prefix], &y[..prefix], cfg);
    let d1 = rms_scaled(&k[0][..prefix], &y[..prefix], cfg);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(span.abs() / 100.0);
    if let Some(cap) = cfg.fixed_step {
        h = h.min(cap);
    }
    let h_cap = cfg.fixed_step.unwrap_or(f64::INFINITY);

    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        let remaining = (t_end - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let mut hs = h.min(remaining);
        // Avoid leaving a sliver that would need a microscopic final step.
        if remaining - hs < 1e-12 * remaining.max(1.0) {
            hs = remaining;
        }
        let hd = hs * dir;

        {
            let (k1, rest) = k.split_at_mut(1);
            let k1 = &k1[0];
            combine(&mut tmp, &y, &[(hd * A21, k1)]);
            field(t + C2 * hd, &tmp, &mut rest[0]);
            combine(&mut tmp, &y, &[(hd * A31, k1), (hd * A32, &rest[0])]);
            field(t + C3 * hd, &tmp, &mut rest[1]);
            combine(
                &mut tmp,
                &y,
                &[(hd * A41, k1), (hd * A42, &rest[0]), (hd * A43, &rest[1])],
            );
            field(t + C4 * hd, &tmp, &mut rest[2]);
            combine(
                &mut tmp,
                &y,
                &[
                    (hd * A51, k1),
                    (hd * A52, &rest[0]),
                    (hd * A53, &rest[1]),
                    (hd * A54, &rest[2]),
                ],
            );
            field(t + C5 * hd, &tmp, &mut rest[3]);
            combine(
                &mut tmp,
                &y,
                &[
                    (hd * A61, k1),
                    (hd * A62, &rest[0]),
                    (hd * A63, &rest[1]),
                    (hd * A64, &rest[2]),
                    (hd * A65, &rest[3]),
                ],
            );
            field(t + hd, &tmp, &mut rest[4]);
            combine(
                &mut y_new,
                &y,
                &[
                    (hd * B1, k1),
                    (hd * B3, &rest[1]),
                    (hd * B4, &rest[2]),
                    (hd * B5, &rest[3]),
                    (hd * B6, &rest[4]),
                ],
            );
            field(t + hd, &y_new, &mut rest[5]);
        }
        nfe += 6;

        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t + hd });
        }

        let mut acc = 0.0;
        for i in 0..prefix {
            let e = hd
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            acc += (e / sc) * (e / sc);
        }
        let err = if prefix == 0 {
            0.0
        } else {
            (acc / prefix as f64).sqrt()
        };

        if err <= 1.0 {
            accepted += 1;
            t = if hs == remaining { t_end } else { t + hd };
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                SAFETY * err.powf(-PI_ALPHA) * err_prev.powf(PI_BETA)
            };
            factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
            if last_rejected {
                factor = factor.min(1.0);
            }
            h = (hs * factor).min(h_cap);
            err_prev = err.max(1e-4);
            last_rejected = false;
        } else {
            rejected += 1;
            let factor = (SAFETY * err.powf(-1.0 / 5.0)).clamp(MIN_FACTOR, 1.0);
            h = hs * factor;
            last_rejected = true;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
    }

    Ok(SolveReport {
        terminal_state: y,
        nfe,
        accepted_steps: accepted,
        rejected_steps: rejected,
        state_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2};

    fn exp_field(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy.copy_from_slice(y);
    }

    #[test]
    fn zero_field_keeps_state() {
        for cfg in [
            SolverConfig::euler(0.1),
            SolverConfig::rk4(0.1),
            SolverConfig::dopri5(1e-6, 1e-6),
        ] {
            let r = odesolve(&[1.0, 2.0], 0.0, 3.0, |_, _, d| d.fill(0.0), &cfg).unwrap();
            assert_eq!(r.terminal_state, vec![1.0, 2.0]);
            let r = odesolve(&[1.0, 2.0], 3.0, -1.0, |_, _, d| d.fill(0.0), &cfg).unwrap();
            assert_eq!(r.terminal_state, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn exponential_growth_dopri5() {
        let r = odesolve(&[1.0], 0.0, 1.0, exp_field, &SolverConfig::dopri5(1e-8, 1e-8)).unwrap();
        assert!((r.terminal_state[0] - E).abs() < 1e-6);
    }

    #[test]
    fn sine_quadrature_dopri5() {
        let r = odesolve(
            &[0.0],
            0.0,
            FRAC_PI_2,
            |t, _, d| d[0] = t.cos(),
            &SolverConfig::dopri5(1e-8, 1e-8),
        )
        .unwrap();
        assert!((r.terminal_state[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nfe_accounting() {
        let mut cfg = SolverConfig::rk4(0.1);
        let r = odesolve(&[1.0], 0.0, 1.0, exp_field, &cfg).unwrap();
        assert_eq!((nfe_of(&r), r.accepted_steps, r.rejected_steps), (40, 10, 0));
        cfg.method = Method::Euler;
        let r = odesolve(&[1.0], 0.0, 1.0, exp_field, &cfg).unwrap();
        assert_eq!(nfe_of(&r), 10);

        let mut calls = 0;
        let r = odesolve(
            &[1.0, 0.0],
            0.0,
            5.0,
            |t, y, d| {
                calls += 1;
                d[0] = -2.0 * y[0];
                d[1] = (3.0 * t).sin();
            },
            &SolverConfig::dopri5(1e-7, 1e-9),
        )
        .unwrap();
        assert!(r.rejected_steps + r.accepted_steps > 1);
        assert_eq!(r.nfe, calls);
        assert_eq!(r.nfe, 1 + 6 * (r.accepted_steps + r.rejected_steps));
        assert!(r.nfe >= r.accepted_steps);
    }

    #[test]
    fn rejections_happen_on_tight_tolerance() {
        // A sharp transient with a crude first guess forces at least one rejection.
        let r = odesolve(
            &[1.0],
            0.0,
            1.0,
            |t, y, d| d[0] = -50.0 * (y[0] - (10.0 * t).cos()),
            &SolverConfig::dopri5(1e-10, 1e-10),
        )
        .unwrap();
        assert_eq!(r.nfe, 1 + 6 * (r.accepted_steps + r.rejected_steps));
    }

    #[test]
    fn rk4_time_reversal() {
        let cfg = SolverConfig::rk4(1e-2);
        let decay = |_: f64, y: &[f64], d: &mut [f64]| d[0] = -y[0];
        let fwd = odesolve(&[1.0], 0.0, 1.0, decay, &cfg).unwrap();
        let back = odesolve(&fwd.terminal_state, 1.0, 0.0, decay, &cfg).unwrap();
        assert!((back.terminal_state[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dopri5_order_under_forced_step() {
        let err_with_cap = |cap: f64| {
            let mut cfg = SolverConfig::dopri5(1.0, 1.0);
            cfg.fixed_step = Some(cap);
            let r = odesolve(&[1.0], 0.0, 1.0, exp_field, &cfg).unwrap();
            (r.terminal_state[0] - E).abs()
        };
        let coarse = err_with_cap(0.1);
        let fine = err_with_cap(0.05);
        assert!(coarse / fine >= 16.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn semi_norm_ignores_suffix() {
        // The suffix component oscillates wildly; the prefix is trivial.
        let field = |t: f64, _: &[f64], d: &mut [f64]| {
            d[0] = 1.0;
            d[1] = (200.0 * t).cos() * 200.0;
        };
        let full = odesolve_with_prefix(
            &[0.0, 0.0],
            0.0,
            1.0,
            field,
            &SolverConfig::dopri5(1e-6, 1e-6).with_error_norm(ErrorNorm::Full),
            1,
        )
        .unwrap();
        let semi = odesolve_with_prefix(
            &[0.0, 0.0],
            0.0,
            1.0,
            field,
            &SolverConfig::dopri5(1e-6, 1e-6),
            1,
        )
        .unwrap();
        assert!(semi.nfe < full.nfe);
        assert!((semi.terminal_state[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let r = odesolve(&[1.0], 0.0, 10.0, exp_field, &{
            let mut c = SolverConfig::rk4(0.1);
            c.max_steps = 5;
            c
        });
        assert!(matches!(r, Err(Error::MaxStepsExceeded { .. })));
        let r = odesolve(
            &[1.0],
            0.0,
            1.0,
            |_, y, d| d[0] = y[0] * y[0],
            &SolverConfig::rk4(0.5),
        );
        assert!(r.is_ok());
        let r = odesolve(&[1.0], 0.0, 2.0, |_, y, d| d[0] = 1e300 * y[0], &SolverConfig::rk4(0.5));
        assert!(matches!(r, Err(Error::NonFiniteState { .. })));
        assert!(SolverConfig { fixed_step: None, ..SolverConfig::rk4(0.1) }
            .validate()
            .is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = SolverConfig::dopri5(1e-6, 1e-6);
        let f = |t: f64, y: &[f64], d: &mut [f64]| d[0] = (t * y[0]).sin();
        let a = odesolve(&[0.3], 0.0, 4.0, f, &cfg).unwrap();
        let b = odesolve(&[0.3], 0.0, 4.0, f, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
