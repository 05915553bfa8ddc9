//! Poincaré-ball operations anchored at the origin, with learnable curvature.
//!
//! Every map comes in two forms: a forward function on a single row and a
//! `*_vjp` function returning the vector-Jacobian product with respect to
//! each input, including the curvature `c`. The autodiff tape applies these
//! row by row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, Mat};

/// Offset keeping `c = softplus(raw) + eps` strictly positive.
pub const CURVATURE_EPS: f64 = 1e-5;
/// Points are kept within `(1 - BALL_MARGIN) / sqrt(c)` of the origin.
pub const BALL_MARGIN: f64 = 1e-5;
/// Upper bound on the `artanh` argument.
pub const ARTANH_MAX: f64 = 1.0 - 1e-12;
/// Floor on the Möbius-addition denominator.
pub const MOBIUS_DENOM_EPS: f64 = 1e-15;

// Below this value of sqrt(c)·‖v‖ the ratio functions use their Taylor series.
const SERIES_CUTOFF: f64 = 1e-2;

/// Trainable curvature parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub raw: f64,
}

impl Curvature {
    /// Raw value whose effective curvature is `c` (for `c > CURVATURE_EPS`).
    pub fn from_effective(c: f64) -> Self {
        Curvature { raw: softplus_inv(c - CURVATURE_EPS) }
    }

    pub fn value(&self) -> f64 {
        softplus(self.raw) + CURVATURE_EPS
    }

    /// d c / d raw
    pub fn grad_raw(&self) -> f64 {
        sigmoid(self.raw)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest admissible norm for curvature `c`.
pub fn max_radius(c: f64) -> f64 {
    (1.0 - BALL_MARGIN) / c.sqrt()
}

/// Conformal factor `2 / (1 - c‖x‖²)`. Not used by the network itself.
pub fn conformal_factor(x: &[f64], c: f64) -> f64 {
    2.0 / (1.0 - c * norm_sq(x))
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} input contains non-finite values")))
    }
}

/// tanh(t)/t and its derivative.
fn tanh_ratio(t: f64) -> (f64, f64) {
    if t < SERIES_CUTOFF {
        let t2 = t * t;
        let f = 1.0 - t2 / 3.0 + 2.0 * t2 * t2 / 15.0 - 17.0 * t2 * t2 * t2 / 315.0;
        let df = t * (-2.0 / 3.0 + 8.0 * t2 / 15.0 - 102.0 * t2 * t2 / 315.0);
        (f, df)
    } else {
        let th = t.tanh();
        (th / t, (1.0 - th * th) / t - th / (t * t))
    }
}

/// artanh(t)/t and its derivative, with the argument clamped to `ARTANH_MAX`.
fn artanh_ratio(t: f64) -> (f64, f64) {
    if t < SERIES_CUTOFF {
        let t2 = t * t;
        let f = 1.0 + t2 / 3.0 + t2 * t2 / 5.0 + t2 * t2 * t2 / 7.0 + t2 * t2 * t2 * t2 / 9.0;
        let df = t
            * (2.0 / 3.0 + 4.0 * t2 / 5.0 + 6.0 * t2 * t2 / 7.0 + 8.0 * t2 * t2 * t2 / 9.0);
        (f, df)
    } else if t >= ARTANH_MAX {
        let a = ARTANH_MAX.atanh();
        (a / t, -a / (t * t))
    } else {
        let at = t.atanh();
        (at / t, 1.0 / ((1.0 - t * t) * t) - at / (t * t))
    }
}

/// Radially clamp `x` into the ball in place. Returns the scale applied
/// (1.0 when untouched).
pub fn project_in_place(x: &mut [f64], c: f64) -> f64 {
    let r = max_radius(c);
    let n = norm_sq(x).sqrt();
    if n > r {
        let k = r / n;
        x.iter_mut().for_each(|v| *v *= k);
        k
    } else {
        1.0
    }
}

/// VJP of the radial clamp. `x` is the pre-projection input. Accumulates
/// into `gx` and returns the contribution to dL/dc.
fn project_vjp(x: &[f64], c: f64, g: &[f64], gx: &mut [f64]) -> f64 {
    let r = max_radius(c);
    let n = norm_sq(x).sqrt();
    if n > r {
        let gu = dot(g, x) / n; // g · x̂
        let k = r / n;
        for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(x) {
            *o += k * (gi - gu * xi / n);
        }
        // y = R x̂, dR/dc = -R / (2c)
        gu * (-r / (2.0 * c))
    } else {
        for (o, &gi) in gx.iter_mut().zip(g) {
            *o += gi;
        }
        0.0
    }
}

fn exp0_raw(v: &[f64], c: f64, out: &mut [f64]) {
    let s = c.sqrt();
    let n = norm_sq(v).sqrt();
    let (f, _) = tanh_ratio(s * n);
    for (o, &vi) in out.iter_mut().zip(v) {
        *o = f * vi;
    }
}

/// Exponential map at the origin, written into `out`.
pub fn exp0_into(v: &[f64], c: f64, out: &mut [f64]) {
    exp0_raw(v, c, out);
    project_in_place(out, c);
}

pub fn exp0(v: &[f64], c: f64) -> Result<Vec<f64>> {
    check_finite(v, "exp0")?;
    let mut out = vec![0.0; v.len()];
    exp0_into(v, c, &mut out);
    Ok(out)
}

/// VJP of [`exp0_into`]: accumulates dL/dv into `gv`, returns dL/dc.
pub fn exp0_vjp(v: &[f64], c: f64, g: &[f64], gv: &mut [f64]) -> f64 {
    let mut raw = vec![0.0; v.len()];
    exp0_raw(v, c, &mut raw);
    let mut g_raw = vec![0.0; v.len()];
    let mut gc = project_vjp(&raw, c, g, &mut g_raw);

    let s = c.sqrt();
    let n = norm_sq(v).sqrt();
    let t = s * n;
    let (f, df) = tanh_ratio(t);
    let gdotv = dot(&g_raw, v);
    // out = f(s n) v
    // d/dv: f I + v (s f'(t)) vᵀ / n  -> s f'(t)/n = c f'(t)/t, finite as t -> 0
    let coef = if t > 0.0 { c * df / t } else { -2.0 * c / 3.0 };
    for ((o, &gi), &vi) in gv.iter_mut().zip(&g_raw).zip(v) {
        *o += f * gi + coef * gdotv * vi;
    }
    // d/dc: v n f'(t) / (2 s)
    gc += gdotv * n * df / (2.0 * s);
    gc
}

/// Logarithmic map at the origin, written into `out`. The input is clamped
/// into the ball first.
pub fn log0_into(x: &[f64], c: f64, out: &mut [f64]) {
    out.copy_from_slice(x);
    project_in_place(out, c);
    let s = c.sqrt();
    let n = norm_sq(out).sqrt();
    let (h, _) = artanh_ratio(s * n);
    out.iter_mut().for_each(|o| *o *= h);
}

pub fn log0(x: &[f64], c: f64) -> Result<Vec<f64>> {
    check_finite(x, "log0")?;
    let mut out = vec![0.0; x.len()];
    log0_into(x, c, &mut out);
    Ok(out)
}

/// VJP of [`log0_into`]: accumulates dL/dx into `gx`, returns dL/dc.
pub fn log0_vjp(x: &[f64], c: f64, g: &[f64], gx: &mut [f64]) -> f64 {
    let mut xp = x.to_vec();
    project_in_place(&mut xp, c);
    let s = c.sqrt();
    let n = norm_sq(&xp).sqrt();
    let t = s * n;
    let (h, dh) = artanh_ratio(t);
    let gdotx = dot(g, &xp);
    let coef = if t > 0.0 { c * dh / t } else { 2.0 * c / 3.0 };
    let mut g_xp = vec![0.0; x.len()];
    for ((o, &gi), &xi) in g_xp.iter_mut().zip(g).zip(&xp) {
        *o = h * gi + coef * gdotx * xi;
    }
    let mut gc = gdotx * n * dh / (2.0 * s);
    gc += project_vjp(x, c, &g_xp, gx);
    gc
}

fn mobius_terms(x: &[f64], y: &[f64], c: f64) -> (f64, f64, f64, f64, f64, f64) {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let d = (1.0 + 2.0 * c * xy + c * c * x2 * y2).max(MOBIUS_DENOM_EPS);
    (xy, x2, y2, a, b, d)
}

/// Möbius addition `x ⊕_c y`, written into `out`.
pub fn mobius_add_into(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) {
    let (_, _, _, a, b, d) = mobius_terms(x, y, c);
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = (a * xi + b * yi) / d;
    }
    project_in_place(out, c);
}

pub fn mobius_add(x: &[f64], y: &[f64], c: f64) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mobius_add widths {} and {}", x.len(), y.len())));
    }
    let mut out = vec![0.0; x.len()];
    mobius_add_into(x, y, c, &mut out);
    Ok(out)
}

/// VJP of [`mobius_add_into`]: accumulates into `gx`, `gy`, returns dL/dc.
pub fn mobius_add_vjp(
    x: &[f64],
    y: &[f64],
    c: f64,
    g: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) -> f64 {
    let (xy, x2, y2, a, b, d) = mobius_terms(x, y, c);
    let num: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| a * xi + b * yi).collect();
    let raw: Vec<f64> = num.iter().map(|v| v / d).collect();
    let mut g_raw = vec![0.0; x.len()];
    let mut gc = project_vjp(&raw, c, g, &mut g_raw);

    // raw = num / D
    let gp: Vec<f64> = g_raw.iter().map(|v| v / d).collect(); // dL/dnum
    let g_d = -dot(&g_raw, &num) / (d * d); // dL/dD
    let gpx = dot(&gp, x);
    let gpy = dot(&gp, y);
    for i in 0..x.len() {
        // num = A x + B y, A = 1 + 2c<x,y> + c|y|², B = 1 - c|x|²
        gx[i] += a * gp[i] + gpx * 2.0 * c * y[i] - gpy * 2.0 * c * x[i];
        gy[i] += b * gp[i] + gpx * (2.0 * c * x[i] + 2.0 * c * y[i]);
        // D = 1 + 2c<x,y> + c²|x|²|y|²
        gx[i] += g_d * (2.0 * c * y[i] + 2.0 * c * c * y2 * x[i]);
        gy[i] += g_d * (2.0 * c * x[i] + 2.0 * c * c * x2 * y[i]);
    }
    gc += gpx * (2.0 * xy + y2) - gpy * x2;
    gc += g_d * (2.0 * xy + 2.0 * c * x2 * y2);
    gc
}

/// Möbius matrix-vector product `W ⊗_c x = exp0(W log0(x))`, with `W` of
/// shape `out_dim × in_dim`.
pub fn mobius_matvec(w: &Mat, x: &[f64], c: f64) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::Shape(format!(
            "mobius_matvec: W is {}x{}, x has width {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    check_finite(&w.data, "mobius_matvec")?;
    let tangent = log0(x, c)?;
    let wv: Vec<f64> = (0..w.rows).map(|i| dot(w.row(i), &tangent)).collect();
    exp0(&wv, c)
}

/// Wrapped activation `exp0(σ(log0(x)))`.
pub fn wrapped_activation(x: &[f64], c: f64, sigma: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let mut t = log0(x, c)?;
    t.iter_mut().for_each(|v| *v = sigma(*v));
    exp0(&t, c)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
