//! Quadrature over the parameter box for vector-valued integrands.
//!
//! All components of the integrand share one set of evaluation points,
//! so bundling an objective value with many gradient entries costs one
//! sweep of expensive per-point work. Three modes:
//!
//! - adaptive: tensor Gauss–Kronrod 15-point panels with bisection on
//!   the axis of largest estimated error,
//! - fixed tensor: Gauss–Legendre with a fixed node count per axis,
//! - discrete: a plain unit-weight sum over a given point list (a sum
//!   of Dirac measures instead of the Lebesgue measure).
//!
//! Panel evaluations may run in parallel; the accumulation is done in
//! panel creation order so results are reproducible for a fixed panel
//! tree.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psys::ParamBox;

/// Hard cap on adaptive panels; exceeding it returns the best estimate
/// with `converged = false`.
pub const DEFAULT_MAX_PANELS: usize = 2000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum QuadSpec {
    Adaptive {
        abs_tol: f64,
        rel_tol: f64,
        #[serde(default = "default_max_panels")]
        max_panels: usize,
    },
    FixedTensor {
        nodes_per_axis: usize,
    },
    Discrete {
        points: Vec<Vec<f64>>,
    },
}

fn default_max_panels() -> usize {
    DEFAULT_MAX_PANELS
}

impl QuadSpec {
    pub fn adaptive(abs_tol: f64, rel_tol: f64) -> Self {
        QuadSpec::Adaptive {
            abs_tol,
            rel_tol,
            max_panels: DEFAULT_MAX_PANELS,
        }
    }

    pub fn fixed_tensor(nodes_per_axis: usize) -> Self {
        QuadSpec::FixedTensor { nodes_per_axis }
    }

    pub fn discrete(points: Vec<Vec<f64>>) -> Self {
        QuadSpec::Discrete { points }
    }
}

impl Default for QuadSpec {
    /// Defaults sit well below the optimizer's stopping tolerance.
    fn default() -> Self {
        QuadSpec::adaptive(1e-10, 1e-6)
    }
}

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("integrand failed at p = {point:?}: {message}")]
    IntegrandFailure { point: Vec<f64>, message: String },
    #[error("invalid quadrature specification: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone)]
pub struct QuadResult {
    pub value: DVector<f64>,
    /// Componentwise error estimate (zero in fixed/discrete modes).
    pub error_estimate: DVector<f64>,
    /// Number of panels used (adaptive mode).
    pub panels: usize,
    /// False when the panel cap was hit before tolerances were met.
    pub converged: bool,
}

// 15-point Kronrod extension of 7-point Gauss on [-1, 1].
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One axis node of the K15 rule: position, Kronrod weight and the
/// embedded Gauss weight (zero for Kronrod-only nodes).
#[derive(Clone, Copy)]
struct GkNode {
    t: f64,
    wk: f64,
    wg: f64,
}

fn gk15() -> [GkNode; 15] {
    let mut nodes = [GkNode {
        t: 0.0,
        wk: 0.0,
        wg: 0.0,
    }; 15];
    for i in 0..7 {
        let wg = if i % 2 == 1 { WG[i / 2] } else { 0.0 };
        nodes[i] = GkNode {
            t: -XGK[i],
            wk: WGK[i],
            wg,
        };
        nodes[14 - i] = GkNode {
            t: XGK[i],
            wk: WGK[i],
            wg,
        };
    }
    nodes[7] = GkNode {
        t: 0.0,
        wk: WGK[7],
        wg: WG[3],
    };
    nodes
}

struct Panel {
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Kronrod value of the integral over this panel.
    value: DVector<f64>,
    /// Componentwise |K − G| estimate.
    err: DVector<f64>,
    /// Axis with the largest one-axis Gauss/Kronrod discrepancy.
    split_axis: usize,
    /// Creation index, fixing the reduction order.
    idx: usize,
}

fn evaluate_points<F>(f: &F, points: &[Vec<f64>]) -> Result<Vec<DVector<f64>>, QuadError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, String> + Sync,
{
    let results: Vec<Result<DVector<f64>, String>> =
        points.par_iter().map(|p| f(p)).collect();
    let mut out = Vec::with_capacity(points.len());
    for (i, res) in results.into_iter().enumerate() {
        let v = res.map_err(|message| QuadError::IntegrandFailure {
            point: points[i].clone(),
            message,
        })?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(QuadError::IntegrandFailure {
                point: points[i].clone(),
                message: "non-finite integrand value".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// Evaluate the tensor K15 rule on one panel. Returns the Kronrod value,
/// componentwise error estimate and the preferred split axis.
fn eval_panel<F>(
    f: &F,
    lo: &[f64],
    hi: &[f64],
) -> Result<(DVector<f64>, DVector<f64>, usize), QuadError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, String> + Sync,
{
    let d = lo.len();
    let nodes = gk15();
    let jac: f64 = (0..d).map(|k| 0.5 * (hi[k] - lo[k])).product();

    let mut points = Vec::new();
    let mut index = vec![0usize; d];
    'outer: loop {
        let p: Vec<f64> = (0..d)
            .map(|k| {
                let c = 0.5 * (lo[k] + hi[k]);
                let h = 0.5 * (hi[k] - lo[k]);
                c + h * nodes[index[k]].t
            })
            .collect();
        points.push(p);
        let mut k = 0;
        loop {
            if k == d {
                break 'outer;
            }
            index[k] += 1;
            if index[k] < 15 {
                break;
            }
            index[k] = 0;
            k += 1;
        }
    }

    let values = evaluate_points(f, &points)?;
    let len = values[0].len();
    let mut kron = DVector::zeros(len);
    let mut gauss_full = DVector::zeros(len);
    // value with the Gauss weight on one axis, Kronrod on the others
    let mut gauss_axis = vec![DVector::zeros(len); d];

    let mut index = vec![0usize; d];
    for v in &values {
        let mut wk_all = 1.0;
        for k in 0..d {
            wk_all *= nodes[index[k]].wk;
        }
        let mut wg_all = 1.0;
        for k in 0..d {
            wg_all *= nodes[index[k]].wg;
        }
        kron.zip_apply(v, |o, x| *o += wk_all * x);
        if wg_all != 0.0 {
            gauss_full.zip_apply(v, |o, x| *o += wg_all * x);
        }
        for a in 0..d {
            let wg_a = nodes[index[a]].wg;
            if wg_a != 0.0 {
                let w = wk_all / nodes[index[a]].wk * wg_a;
                gauss_axis[a].zip_apply(v, |o, x| *o += w * x);
            }
        }
        let mut k = 0;
        while k < d {
            index[k] += 1;
            if index[k] < 15 {
                break;
            }
            index[k] = 0;
            k += 1;
        }
    }

    kron *= jac;
    gauss_full *= jac;
    let mut split_axis = 0;
    let mut worst = -1.0;
    for a in 0..d {
        gauss_axis[a] *= jac;
        let disc = (&kron - &gauss_axis[a]).amax();
        if disc > worst {
            worst = disc;
            split_axis = a;
        }
    }
    let err = DVector::from_fn(len, |l, _| (kron[l] - gauss_full[l]).abs());
    Ok((kron, err, split_axis))
}

/// Integrate a vector-valued function over the box.
///
/// The integrand returns `Err(message)` to abort (e.g. a failed matrix
/// equation at that point); non-finite components abort the same way,
/// reporting the offending parameter point.
pub fn integrate<F>(f: F, domain: &ParamBox, spec: &QuadSpec) -> Result<QuadResult, QuadError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, String> + Sync,
{
    match spec {
        QuadSpec::Discrete { points } => {
            if points.is_empty() {
                return Err(QuadError::BadSpec("discrete point list is empty".into()));
            }
            for p in points {
                if !domain.contains(p) {
                    return Err(QuadError::BadSpec(format!(
                        "discrete point {p:?} lies outside the box"
                    )));
                }
            }
            let values = evaluate_points(&f, points)?;
            let mut sum = DVector::zeros(values[0].len());
            for v in &values {
                sum += v;
            }
            Ok(QuadResult {
                error_estimate: DVector::zeros(sum.len()),
                value: sum,
                panels: 0,
                converged: true,
            })
        }
        QuadSpec::FixedTensor { nodes_per_axis } => {
            let n = *nodes_per_axis;
            if n == 0 {
                return Err(QuadError::BadSpec("nodes_per_axis must be ≥ 1".into()));
            }
            let (nodes, weights) = gauss_legendre(n);
            let d = domain.dim();
            let mut points = Vec::new();
            let mut wprod = Vec::new();
            let mut index = vec![0usize; d];
            'outer: loop {
                let mut p = Vec::with_capacity(d);
                let mut w = 1.0;
                for k in 0..d {
                    let c = 0.5 * (domain.lower()[k] + domain.upper()[k]);
                    let h = 0.5 * (domain.upper()[k] - domain.lower()[k]);
                    p.push(c + h * nodes[index[k]]);
                    w *= h * weights[index[k]];
                }
                points.push(p);
                wprod.push(w);
                let mut k = 0;
                loop {
                    if k == d {
                        break 'outer;
                    }
                    index[k] += 1;
                    if index[k] < n {
                        break;
                    }
                    index[k] = 0;
                    k += 1;
                }
            }
            let values = evaluate_points(&f, &points)?;
            let mut sum = DVector::zeros(values[0].len());
            for (v, w) in values.iter().zip(&wprod) {
                sum.zip_apply(v, |o, x| *o += w * x);
            }
            Ok(QuadResult {
                error_estimate: DVector::zeros(sum.len()),
                value: sum,
                panels: 1,
                converged: true,
            })
        }
        QuadSpec::Adaptive {
            abs_tol,
            rel_tol,
            max_panels,
        } => {
            if !(*abs_tol > 0.0) || !(*rel_tol > 0.0) {
                return Err(QuadError::BadSpec("tolerances must be positive".into()));
            }
            adaptive(&f, domain, *abs_tol, *rel_tol, *max_panels)
        }
    }
}

fn adaptive<F>(
    f: &F,
    domain: &ParamBox,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<QuadResult, QuadError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, String> + Sync,
{
    let lo = domain.lower().to_vec();
    let hi = domain.upper().to_vec();
    let (value, err, axis) = eval_panel(f, &lo, &hi)?;
    let len = value.len();
    let mut panels = vec![Panel {
        lo,
        hi,
        value,
        err,
        split_axis: axis,
        idx: 0,
    }];
    let mut next_idx = 1;

    loop {
        // componentwise totals, reduced in panel creation order
        let mut total = DVector::zeros(len);
        let mut total_err = DVector::zeros(len);
        let mut order: Vec<usize> = (0..panels.len()).collect();
        order.sort_by_key(|&i| panels[i].idx);
        for &i in &order {
            total += &panels[i].value;
            total_err += &panels[i].err;
        }
        let ok = (0..len).all(|l| total_err[l] <= abs_tol.max(rel_tol * total[l].abs()));
        if ok || len == 0 {
            return Ok(QuadResult {
                value: total,
                error_estimate: total_err,
                panels: panels.len(),
                converged: true,
            });
        }
        if panels.len() >= max_panels {
            log::warn!(
                "adaptive quadrature hit the {max_panels}-panel cap; returning best estimate"
            );
            return Ok(QuadResult {
                value: total,
                error_estimate: total_err,
                panels: panels.len(),
                converged: false,
            });
        }
        // bisect the panel with the worst componentwise error
        let worst = (0..panels.len())
            .max_by(|&i, &j| {
                panels[i]
                    .err
                    .amax()
                    .partial_cmp(&panels[j].err.amax())
                    .unwrap()
            })
            .unwrap();
        let old = panels.swap_remove(worst);
        let mid = 0.5 * (old.lo[old.split_axis] + old.hi[old.split_axis]);
        for half in 0..2 {
            let mut lo = old.lo.clone();
            let mut hi = old.hi.clone();
            if half == 0 {
                hi[old.split_axis] = mid;
            } else {
                lo[old.split_axis] = mid;
            }
            let (value, err, axis) = eval_panel(f, &lo, &hi)?;
            panels.push(Panel {
                lo,
                hi,
                value,
                err,
                split_axis: axis,
                idx: next_idx,
            });
            next_idx += 1;
        }
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1] via the Golub–Welsch
/// symmetric tridiagonal eigenvalue problem.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut jac = nalgebra::DMatrix::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}
