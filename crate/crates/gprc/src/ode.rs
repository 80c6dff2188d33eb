//! Classical fourth-order Runge-Kutta for `u'' = a(t, u, u')` with Hermite dense output.

use crate::error::{Error, Result};

/// Right-hand side of a second-order scalar ODE, `u'' = accel(t, u, u')`.
pub trait SecondOrderOde {
    fn accel(&self, t: f64, u: f64, v: f64) -> f64;
}

impl<F: Fn(f64, f64, f64) -> f64> SecondOrderOde for F {
    fn accel(&self, t: f64, u: f64, v: f64) -> f64 {
        self(t, u, v)
    }
}

/// Stored trajectory; evaluates `(u, u', u'')` anywhere on the integration span.
pub struct DenseSolution<O> {
    ode: O,
    t0: f64,
    step: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
}

impl<O: SecondOrderOde> DenseSolution<O> {
    pub fn span(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.step * (self.u.len() - 1) as f64)
    }

    /// `(u, u', u'')` at `t`; `u` and `u'` are cubic Hermite interpolants, `u''` comes
    /// from the equation. Times outside the span are clamped.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let last = self.u.len() - 1;
        let pos = ((t - self.t0) / self.step).clamp(0.0, last as f64);
        let k = (pos.floor() as usize).min(last.saturating_sub(1));
        if last == 0 {
            return (self.u[0], self.v[0], self.a[0]);
        }
        let s = pos - k as f64;
        let h = self.step;
        let (h00, h10, h01, h11) = (
            2.0 * s * s * s - 3.0 * s * s + 1.0,
            s * s * s - 2.0 * s * s + s,
            -2.0 * s * s * s + 3.0 * s * s,
            s * s * s - s * s,
        );
        let u = h00 * self.u[k] + h10 * h * self.v[k] + h01 * self.u[k + 1] + h11 * h * self.v[k + 1];
        let v = h00 * self.v[k] + h10 * h * self.a[k] + h01 * self.v[k + 1] + h11 * h * self.a[k + 1];
        let tt = self.t0 + pos * h;
        (u, v, self.ode.accel(tt, u, v))
    }
}

/// Integrates from `t_span.0` with state `(u, u')` = `ic` until `t_span.1` (rounded up
/// to a whole number of steps).
pub fn ode_integrate<O: SecondOrderOde>(ode: O, ic: (f64, f64), t_span: (f64, f64), step: f64) -> Result<DenseSolution<O>> {
    if !(step > 0.0) || !(t_span.1 >= t_span.0) {
        return Err(Error::Format("ODE step must be positive and the span nondecreasing".into()));
    }
    let steps = ((t_span.1 - t_span.0) / step - 1e-9).ceil().max(0.0) as usize;
    let (mut u, mut v) = ic;
    let mut t = t_span.0;
    let mut us = Vec::with_capacity(steps + 1);
    let mut vs = Vec::with_capacity(steps + 1);
    let mut accs = Vec::with_capacity(steps + 1);
    let f = |t: f64, u: f64, v: f64| (v, ode.accel(t, u, v));
    us.push(u);
    vs.push(v);
    accs.push(ode.accel(t, u, v));
    for i in 0..steps {
        let (k1u, k1v) = f(t, u, v);
        let (k2u, k2v) = f(t + 0.5 * step, u + 0.5 * step * k1u, v + 0.5 * step * k1v);
        let (k3u, k3v) = f(t + 0.5 * step, u + 0.5 * step * k2u, v + 0.5 * step * k2v);
        let (k4u, k4v) = f(t + step, u + step * k3u, v + step * k3v);
        u += step / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
        v += step / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        t = t_span.0 + (i + 1) as f64 * step;
        let a = ode.accel(t, u, v);
        if !(u.is_finite() && v.is_finite() && a.is_finite()) {
            return Err(Error::BlowUp { t });
        }
        us.push(u);
        vs.push(v);
        accs.push(a);
    }
    Ok(DenseSolution { ode, t0: t_span.0, step, u: us, v: vs, a: accs })
}
