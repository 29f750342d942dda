//! Spectral abscissa evaluation and global maximization of
//! `p ↦ α(A(p), E(p))` over the parameter box.
//!
//! For one-dimensional boxes the maximizer builds an adaptive Chebyshev
//! interpolant (degree doubling 16 → 4096 until the coefficient tail
//! decays), locates interior extrema as roots of the derivative series
//! via colleague-matrix eigenvalues, and evaluates the abscissa exactly
//! at the candidates plus the endpoints. The spectral abscissa is only
//! piecewise smooth (eigenvalue crossings), so a non-decaying tail is
//! expected on some inputs; in that case a 1024-point dense scan with
//! golden-section refinement supplies the reported maximum and the
//! report is marked not converged.
//!
//! Boxes with d > 1 use a tensor Chebyshev grid (33 points per axis)
//! with compass-search refinement from the best grid points.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mateq::{self, MatEqError};
use crate::psys::{ParamBox, ParametricSystem, PsysError};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error(transparent)]
    MatEq(#[from] MatEqError),
    #[error(transparent)]
    Psys(#[from] PsysError),
    #[error("abscissa evaluation failed at p = {point:?}: {message}")]
    EvalFailure { point: Vec<f64>, message: String },
}

/// Result of maximizing the spectral abscissa over the box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub max_alpha: f64,
    pub argmax_p: Vec<f64>,
    pub interpolant_degree: usize,
    pub converged: bool,
}

/// Maximum real part of the eigenvalues of the pencil `λE − A`.
pub fn spectral_abscissa(a: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<f64, MatEqError> {
    let ev = mateq::gen_eigvals(a, e)?;
    Ok(ev
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Global maximum of `α(A(p), E(p))` over the system's parameter box.
pub fn max_abscissa_over_box(sys: &ParametricSystem) -> Result<StabilityReport, StabilityError> {
    let alpha = |p: &[f64]| -> Result<f64, String> {
        spectral_abscissa(&sys.a().eval(p), &sys.e().eval(p)).map_err(|e| e.to_string())
    };
    let domain = sys.domain();

    // parameter-independent pencil: one evaluation suffices
    if sys.a().is_constant() && sys.e().is_constant() {
        let p = domain.midpoint();
        let v = alpha(&p).map_err(|message| StabilityError::EvalFailure {
            point: p.clone(),
            message,
        })?;
        return Ok(StabilityReport {
            max_alpha: v,
            argmax_p: p,
            interpolant_degree: 0,
            converged: true,
        });
    }

    if domain.dim() == 1 {
        let lo = domain.lower()[0];
        let hi = domain.upper()[0];
        let f = |x: f64| alpha(&[x]);
        let m = max_scalar_over_interval(&f, lo, hi).map_err(|(x, message)| {
            StabilityError::EvalFailure {
                point: vec![x],
                message,
            }
        })?;
        Ok(StabilityReport {
            max_alpha: m.max_value,
            argmax_p: vec![m.argmax],
            interpolant_degree: m.degree,
            converged: m.converged,
        })
    } else {
        grid_max(&alpha, domain)
    }
}

/// `true` iff the reported global abscissa maximum is strictly negative.
pub fn is_stable(sys: &ParametricSystem) -> Result<bool, StabilityError> {
    Ok(max_abscissa_over_box(sys)?.max_alpha < 0.0)
}

/// Outcome of the generic one-dimensional maximizer.
#[derive(Debug, Clone)]
pub struct ScalarMax {
    pub max_value: f64,
    pub argmax: f64,
    pub degree: usize,
    pub converged: bool,
}

const DEGREE_START: usize = 16;
const DEGREE_MAX: usize = 4096;
const TAIL_REL_TOL: f64 = 1e-10;
const FALLBACK_SAMPLES: usize = 1024;

/// Maximize a scalar function on `[lo, hi]` by adaptive Chebyshev
/// interpolation; falls back to dense sampling plus golden-section
/// refinement when the coefficient tail never decays.
///
/// Errors carry the offending abscissa and the evaluation failure text.
pub fn max_scalar_over_interval<F>(f: &F, lo: f64, hi: f64) -> Result<ScalarMax, (f64, String)>
where
    F: Fn(f64) -> Result<f64, String> + Sync,
{
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let to_x = |t: f64| c + h * t;

    // values at Chebyshev points of the second kind, reused across
    // doublings (the degree-2N grid contains the degree-N grid)
    let mut n = DEGREE_START;
    let mut values = eval_batch(f, &(0..=n).map(|j| cheb_point(j, n)).collect::<Vec<_>>(), to_x)?;
    loop {
        let coeffs = cheb_coeffs(&values);
        if tail_converged(&coeffs) {
            let mut candidates = interior_extrema(&coeffs);
            candidates.push(-1.0);
            candidates.push(1.0);
            let cand_vals = eval_batch(f, &candidates, to_x)?;
            let (argmax_t, max_value) = candidates
                .iter()
                .zip(cand_vals.iter())
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(&t, &v)| (t, v))
                .unwrap();
            return Ok(ScalarMax {
                max_value,
                argmax: to_x(argmax_t),
                degree: n,
                converged: true,
            });
        }
        if n >= DEGREE_MAX {
            break;
        }
        // double: old values land on the even indices
        let n2 = 2 * n;
        let mut new_values = vec![0.0; n2 + 1];
        for j in 0..=n {
            new_values[2 * j] = values[j];
        }
        let odd_points: Vec<f64> = (0..n2 + 1)
            .filter(|j| j % 2 == 1)
            .map(|j| cheb_point(j, n2))
            .collect();
        let odd_vals = eval_batch(f, &odd_points, to_x)?;
        for (slot, v) in (0..n2 + 1).filter(|j| j % 2 == 1).zip(odd_vals) {
            new_values[slot] = v;
        }
        values = new_values;
        n = n2;
    }

    // dense fallback for non-smooth functions
    let ts: Vec<f64> = (0..=FALLBACK_SAMPLES)
        .map(|j| -1.0 + 2.0 * j as f64 / FALLBACK_SAMPLES as f64)
        .collect();
    let vals = eval_batch(f, &ts, to_x)?;
    let jbest = (0..vals.len())
        .max_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap())
        .unwrap();
    let a = ts[jbest.saturating_sub(1)];
    let b = ts[(jbest + 1).min(ts.len() - 1)];
    let (argmax_t, max_value) = golden_section_max(f, a, b, to_x)?;
    let (argmax_t, max_value) = if vals[jbest] > max_value {
        (ts[jbest], vals[jbest])
    } else {
        (argmax_t, max_value)
    };
    Ok(ScalarMax {
        max_value,
        argmax: to_x(argmax_t),
        degree: DEGREE_MAX,
        converged: false,
    })
}

fn cheb_point(j: usize, n: usize) -> f64 {
    (std::f64::consts::PI * j as f64 / n as f64).cos()
}

fn eval_batch<F>(f: &F, ts: &[f64], to_x: impl Fn(f64) -> f64) -> Result<Vec<f64>, (f64, String)>
where
    F: Fn(f64) -> Result<f64, String> + Sync,
{
    let xs: Vec<f64> = ts.iter().map(|&t| to_x(t)).collect();
    let results: Vec<Result<f64, String>> = xs.par_iter().map(|&x| f(x)).collect();
    let mut out = Vec::with_capacity(ts.len());
    for (x, r) in xs.into_iter().zip(results) {
        match r {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => return Err((x, "non-finite value".into())),
            Err(m) => return Err((x, m)),
        }
    }
    Ok(out)
}

/// Chebyshev coefficients of the degree-N interpolant through values at
/// second-kind points `cos(jπ/N)`, j = 0..N.
fn cheb_coeffs(values: &[f64]) -> Vec<f64> {
    let n = values.len() - 1;
    // cos(jkπ/N) looked up as cos((jk mod 2N)·π/N)
    let table: Vec<f64> = (0..2 * n)
        .map(|i| (std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let mut coeffs = vec![0.0; n + 1];
    for (k, ck) in coeffs.iter_mut().enumerate() {
        let mut acc = 0.5 * (values[0] + values[n] * if k % 2 == 0 { 1.0 } else { -1.0 });
        for (j, &vj) in values.iter().enumerate().take(n).skip(1) {
            acc += vj * table[(j * k) % (2 * n)];
        }
        let scale = if k == 0 || k == n { 1.0 } else { 2.0 };
        *ck = scale * acc / n as f64;
    }
    coeffs
}

fn tail_converged(coeffs: &[f64]) -> bool {
    let n = coeffs.len() - 1;
    let scale = coeffs.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    if scale == 0.0 {
        return true;
    }
    let tail_len = (n / 8).max(2);
    let tail = coeffs[coeffs.len() - tail_len..]
        .iter()
        .fold(0.0f64, |m, &c| m.max(c.abs()));
    tail <= TAIL_REL_TOL * scale
}

/// Interior extrema of the interpolant on [-1, 1]: real roots of the
/// derivative Chebyshev series, found as colleague-matrix eigenvalues.
fn interior_extrema(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len() - 1;
    if n < 1 {
        return vec![];
    }
    // derivative series: b_{k-1} = b_{k+1} + 2k a_k, b halved at k = 0
    let mut deriv = vec![0.0; n + 2];
    for k in (1..=n).rev() {
        deriv[k - 1] = deriv[k + 1] + 2.0 * k as f64 * coeffs[k];
    }
    deriv[0] *= 0.5;
    deriv.truncate(n);
    // trim negligible leading-degree coefficients
    let scale = deriv.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    if scale == 0.0 {
        return vec![0.0];
    }
    let mut m = deriv.len() - 1;
    while m > 0 && deriv[m].abs() <= 1e-13 * scale {
        m -= 1;
    }
    if m == 0 {
        return vec![0.0];
    }
    // colleague matrix of Σ_{k≤m} b_k T_k
    let mut cm = DMatrix::zeros(m, m);
    if m == 1 {
        cm[(0, 0)] = -deriv[0] / deriv[1];
    } else {
        cm[(0, 1)] = 1.0;
        for i in 1..m - 1 {
            cm[(i, i - 1)] = 0.5;
            cm[(i, i + 1)] = 0.5;
        }
        for j in 0..m {
            cm[(m - 1, j)] = -deriv[j] / (2.0 * deriv[m]);
        }
        cm[(m - 1, m - 2)] += 0.5;
    }
    let mut out = Vec::new();
    if let Ok(eigs) = mateq::eigvals(&cm) {
        for l in eigs {
            if l.im.abs() <= 1e-8 && l.re >= -1.0 - 1e-8 && l.re <= 1.0 + 1e-8 {
                out.push(l.re.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

fn golden_section_max<F>(
    f: &F,
    mut a: f64,
    mut b: f64,
    to_x: impl Fn(f64) -> f64 + Copy,
) -> Result<(f64, f64), (f64, String)>
where
    F: Fn(f64) -> Result<f64, String> + Sync,
{
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let eval = |t: f64| -> Result<f64, (f64, String)> {
        let x = to_x(t);
        f(x).map_err(|m| (x, m))
    };
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    let t = 0.5 * (a + b);
    let v = eval(t)?;
    Ok(if fc > v && fc > fd {
        (c, fc)
    } else if fd > v {
        (d, fd)
    } else {
        (t, v)
    })
}

/// d > 1 fallback: tensor Chebyshev grid plus compass-search refinement
/// from the best grid points.
fn grid_max<F>(alpha: &F, domain: &ParamBox) -> Result<StabilityReport, StabilityError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    const PER_AXIS: usize = 33;
    let d = domain.dim();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let c = 0.5 * (domain.lower()[k] + domain.upper()[k]);
            let h = 0.5 * (domain.upper()[k] - domain.lower()[k]);
            (0..PER_AXIS)
                .map(|j| c + h * cheb_point(j, PER_AXIS - 1))
                .collect()
        })
        .collect();
    let mut points = Vec::new();
    let mut index = vec![0usize; d];
    'outer: loop {
        points.push((0..d).map(|k| axes[k][index[k]]).collect::<Vec<f64>>());
        let mut k = 0;
        loop {
            if k == d {
                break 'outer;
            }
            index[k] += 1;
            if index[k] < PER_AXIS {
                break;
            }
            index[k] = 0;
            k += 1;
        }
    }
    let vals: Vec<Result<f64, String>> = points.par_iter().map(|p| alpha(p)).collect();
    let mut scored = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(vals) {
        let v = r.map_err(|message| StabilityError::EvalFailure {
            point: p.clone(),
            message,
        })?;
        scored.push((p.clone(), v));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut best = scored[0].clone();
    for (start, v0) in scored.into_iter().take(5) {
        let (p, v) = compass_refine(alpha, domain, start, v0)?;
        if v > best.1 {
            best = (p, v);
        }
    }
    Ok(StabilityReport {
        max_alpha: best.1,
        argmax_p: best.0,
        interpolant_degree: PER_AXIS - 1,
        converged: true,
    })
}

fn compass_refine<F>(
    alpha: &F,
    domain: &ParamBox,
    mut p: Vec<f64>,
    mut val: f64,
) -> Result<(Vec<f64>, f64), StabilityError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    let d = domain.dim();
    let mut steps: Vec<f64> = (0..d)
        .map(|k| (domain.upper()[k] - domain.lower()[k]) / 32.0)
        .collect();
    for _ in 0..200 {
        let mut improved = false;
        for k in 0..d {
            for dir in [-1.0, 1.0] {
                let mut q = p.clone();
                q[k] = (q[k] + dir * steps[k]).clamp(domain.lower()[k], domain.upper()[k]);
                if q[k] == p[k] {
                    continue;
                }
                let v = alpha(&q).map_err(|message| StabilityError::EvalFailure {
                    point: q.clone(),
                    message,
                })?;
                if v > val {
                    p = q;
                    val = v;
                    improved = true;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
            if steps.iter().all(|&s| s < 1e-10) {
                break;
            }
        }
    }
    Ok((p, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psys::{ParamSepMatrix, ScalarCoeff};
    use approx::assert_relative_eq;

    #[test]
    fn abscissa_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -3.0]);
        let e = DMatrix::identity(2, 2);
        assert_relative_eq!(spectral_abscissa(&a, &e).unwrap(), -1.0, epsilon = 1e-13);
    }

    #[test]
    fn abscissa_imaginary_pair() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = DMatrix::identity(2, 2);
        assert_relative_eq!(spectral_abscissa(&a, &e).unwrap(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn abscissa_scaled_pencil() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let e = DMatrix::from_element(1, 1, 4.0);
        assert_relative_eq!(spectral_abscissa(&a, &e).unwrap(), -0.5, epsilon = 1e-14);
    }

    fn rom_affine_diag(lo: f64, hi: f64) -> ParametricSystem {
        // Â(p) = diag(p − 1); α(p) = p − 1, linear
        ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::linear(0), DMatrix::from_element(1, 1, 1.0)),
                (ScalarCoeff::one(), DMatrix::from_element(1, 1, -1.0)),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::interval(lo, hi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn linear_abscissa_max_at_right_endpoint() {
        let rom = rom_affine_diag(0.0, 0.5);
        let rep = max_abscissa_over_box(&rom).unwrap();
        assert_relative_eq!(rep.max_alpha, -0.5, epsilon = 1e-10);
        assert_relative_eq!(rep.argmax_p[0], 0.5, epsilon = 1e-8);
        assert!(rep.converged);
        assert!(is_stable(&rom).unwrap());
    }

    #[test]
    fn constant_rom_shortcut() {
        let rom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(2, 2)),
            ParamSepMatrix::constant(DMatrix::from_diagonal(&nalgebra::dvector![-0.25, -4.0])),
            ParamSepMatrix::constant(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])),
            ParamSepMatrix::constant(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let rep = max_abscissa_over_box(&rom).unwrap();
        assert_relative_eq!(rep.max_alpha, -0.25, epsilon = 1e-13);
        assert_eq!(rep.interpolant_degree, 0);
    }

    #[test]
    fn quadratic_vertex_interior_max() {
        // Â(p) = [[−1 + 4p(1−p)]] on [0,1]: max 0 at p = 1/2
        let rom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::one(), DMatrix::from_element(1, 1, -1.0)),
                (ScalarCoeff::Monomial(vec![1]), DMatrix::from_element(1, 1, 4.0)),
                (ScalarCoeff::Monomial(vec![2]), DMatrix::from_element(1, 1, -4.0)),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let rep = max_abscissa_over_box(&rom).unwrap();
        assert_relative_eq!(rep.max_alpha, 0.0, epsilon = 1e-9);
        assert_relative_eq!(rep.argmax_p[0], 0.5, epsilon = 1e-7);
        assert!(!is_stable(&rom).unwrap());
    }

    #[test]
    fn no_underestimation_on_samples() {
        let rom = rom_affine_diag(0.1, 0.9);
        let rep = max_abscissa_over_box(&rom).unwrap();
        for j in 0..100 {
            let p = 0.1 + 0.8 * (j as f64 + 0.5) / 100.0;
            let a = spectral_abscissa(&rom.a().eval(&[p]), &rom.e().eval(&[p])).unwrap();
            assert!(rep.max_alpha >= a - 1e-8);
        }
    }

    #[test]
    fn kinky_function_falls_back_to_dense_scan() {
        // max of two crossing branches has a kink; drive the generic
        // scalar maximizer directly
        let f = |x: f64| -> Result<f64, String> { Ok((x - 0.3).abs().max(0.5 * (0.9 - x))) };
        let m = max_scalar_over_interval(&f, 0.0, 1.0).unwrap();
        assert!(!m.converged);
        // true max on [0,1]: at x=0: max(0.3, 0.45) = 0.45? vs x=1: 0.7
        assert_relative_eq!(m.max_value, 0.7, epsilon = 1e-6);
        assert_relative_eq!(m.argmax, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn two_dimensional_grid_path() {
        // α(p) = p₁ − p₂ − 1 over [0,1]²: max −1+1−0 = 0 at (1, 0)
        let rom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::one(), DMatrix::from_element(1, 1, -1.0)),
                (ScalarCoeff::Monomial(vec![1, 0]), DMatrix::from_element(1, 1, 1.0)),
                (ScalarCoeff::Monomial(vec![0, 1]), DMatrix::from_element(1, 1, -1.0)),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let rep = max_abscissa_over_box(&rom).unwrap();
        assert_relative_eq!(rep.max_alpha, 0.0, epsilon = 1e-8);
        assert_relative_eq!(rep.argmax_p[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(rep.argmax_p[1], 0.0, epsilon = 1e-6);
    }
}
