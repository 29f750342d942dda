//! BFGS driver with Armijo–Wolfe line search, stability gating and the
//! ROM-change stopping criterion.
//!
//! The optimization variables are the entries of the unfrozen
//! reduced-order coefficient matrices, packed into one flat vector. A
//! candidate that is not asymptotically stable over the whole box maps
//! to an infinite objective before any Gramian work happens, so an
//! unconstrained quasi-Newton method only ever accepts feasible ROMs.
//! Optimization halts when the relative H2⊗L2 change between
//! consecutive accepted ROMs drops below `stop_tol`, or at `max_iter`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;
use thiserror::Error;

use crate::grad::{self, Family, GradientSet};
use crate::gramians;
use crate::psys::{ParamSepMatrix, ParametricSystem, PsysError};
use crate::quad::{self, QuadSpec};
use crate::stability;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("initial ROM is not asymptotically stable over the box (max α = {max_alpha})")]
    UnstableInit { max_alpha: f64 },
    #[error("objective is not finite at the initial ROM")]
    NonFiniteInit,
    #[error("no family left to optimize (all frozen)")]
    AllFrozen,
    #[error(transparent)]
    Psys(#[from] PsysError),
}

/// Families excluded from the optimization variables.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FrozenFamilies {
    pub e: bool,
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl FrozenFamilies {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_frozen(&self, f: Family) -> bool {
        match f {
            Family::E => self.e,
            Family::A => self.a,
            Family::B => self.b,
            Family::C => self.c,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iter: usize,
    /// Tolerance on the relative ROM change between accepted iterates.
    pub stop_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub init_step: f64,
    /// Switch to limited-memory updates above this variable count.
    pub lbfgs_threshold: usize,
    pub lbfgs_memory: usize,
    pub frozen: FrozenFamilies,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iter: 250,
            stop_tol: 1e-5,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            init_step: 1.0,
            lbfgs_threshold: 5000,
            lbfgs_memory: 20,
            frozen: FrozenFamilies::none(),
        }
    }
}

/// Flat layout of the optimization variables: ordered (family, term)
/// entries with their matrix shapes, covering unfrozen families only.
#[derive(Debug, Clone)]
pub struct PackedLayout {
    entries: Vec<(Family, usize, usize, usize)>,
    len: usize,
}

impl PackedLayout {
    pub fn for_rom(rom: &ParametricSystem, frozen: &FrozenFamilies) -> Self {
        let mut entries = Vec::new();
        let mut len = 0;
        for f in Family::ALL {
            if frozen.is_frozen(f) {
                continue;
            }
            let psm = family_of(rom, f);
            for (t, (_, m)) in psm.terms().iter().enumerate() {
                entries.push((f, t, m.nrows(), m.ncols()));
                len += m.len();
            }
        }
        Self { entries, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flatten the unfrozen coefficient matrices (column-major per
    /// matrix, families in E, A, B, C order).
    pub fn pack(&self, rom: &ParametricSystem) -> DVector<f64> {
        let mut x = DVector::zeros(self.len);
        let mut off = 0;
        for &(f, t, rows, cols) in &self.entries {
            let m = &family_of(rom, f).terms()[t].1;
            x.rows_mut(off, rows * cols)
                .copy_from_slice(m.as_slice());
            off += rows * cols;
        }
        x
    }

    /// Rebuild a ROM from the template by substituting the packed
    /// variables into the unfrozen families.
    pub fn unpack(&self, template: &ParametricSystem, x: &DVector<f64>) -> ParametricSystem {
        let mut mats_e: Vec<DMatrix<f64>> =
            template.e().terms().iter().map(|(_, m)| m.clone()).collect();
        let mut mats_a: Vec<DMatrix<f64>> =
            template.a().terms().iter().map(|(_, m)| m.clone()).collect();
        let mut mats_b: Vec<DMatrix<f64>> =
            template.b().terms().iter().map(|(_, m)| m.clone()).collect();
        let mut mats_c: Vec<DMatrix<f64>> =
            template.c().terms().iter().map(|(_, m)| m.clone()).collect();
        let mut off = 0;
        for &(f, t, rows, cols) in &self.entries {
            let m = DMatrix::from_column_slice(rows, cols, &x.as_slice()[off..off + rows * cols]);
            off += rows * cols;
            match f {
                Family::E => mats_e[t] = m,
                Family::A => mats_a[t] = m,
                Family::B => mats_b[t] = m,
                Family::C => mats_c[t] = m,
            }
        }
        ParametricSystem::new(
            template.e().with_matrices(mats_e).unwrap(),
            template.a().with_matrices(mats_a).unwrap(),
            template.b().with_matrices(mats_b).unwrap(),
            template.c().with_matrices(mats_c).unwrap(),
            template.domain().clone(),
        )
        .expect("unpack preserves dimensions")
    }

    /// Flatten a gradient set over the unfrozen entries.
    pub fn flatten_grad(&self, g: &GradientSet) -> DVector<f64> {
        let mut x = DVector::zeros(self.len);
        let mut off = 0;
        for &(f, t, rows, cols) in &self.entries {
            let m = &g.family(f)[t];
            x.rows_mut(off, rows * cols)
                .copy_from_slice(m.as_slice());
            off += rows * cols;
        }
        x
    }
}

fn family_of(sys: &ParametricSystem, f: Family) -> &ParamSepMatrix {
    match f {
        Family::E => sys.e(),
        Family::A => sys.a(),
        Family::B => sys.b(),
        Family::C => sys.c(),
    }
}

/// Objective with the stability gate in front.
///
/// Candidates whose abscissa maximum is non-negative (or whose stability
/// check fails numerically) return `+∞` with a zero gradient, before
/// any Gramian equation is touched.
pub fn gated_objective(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
) -> (f64, GradientSet) {
    let (v, g, _) = gated_objective_full(fom, rom, spec);
    (v, g)
}

fn gated_objective_full(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
) -> (f64, GradientSet, f64) {
    match stability::max_abscissa_over_box(rom) {
        Err(_) => (f64::INFINITY, GradientSet::zeros_like(rom), f64::INFINITY),
        Ok(rep) if rep.max_alpha >= 0.0 => {
            (f64::INFINITY, GradientSet::zeros_like(rom), rep.max_alpha)
        }
        Ok(rep) => {
            let (v, g) = grad::gradient(fom, rom, spec);
            (v, g, rep.max_alpha)
        }
    }
}

/// Relative H2⊗L2 change `‖Ĥⁱ − Ĥⁱ⁻¹‖ / ‖Ĥⁱ⁻¹‖` between two ROMs.
///
/// Numerator and denominator are integrated in one batched quadrature
/// call so they share evaluation points; scaling one ROM output by
/// `(1+δ)` therefore yields exactly `δ` up to rounding. Unstable input
/// maps to `+∞` (which the gated loop never produces).
pub fn rom_change(prev: &ParametricSystem, next: &ParametricSystem, spec: &QuadSpec) -> f64 {
    let diff = match ParametricSystem::error_system(next, prev) {
        Ok(d) => d,
        Err(_) => return f64::INFINITY,
    };
    let integrand = |p: &[f64]| -> Result<DVector<f64>, String> {
        let num = gramians::h2_norm_sq(&diff, p).map_err(|e| e.to_string())?;
        let den = gramians::h2_norm_sq(prev, p).map_err(|e| e.to_string())?;
        Ok(DVector::from_vec(vec![num, den]))
    };
    match quad::integrate(integrand, prev.domain(), spec) {
        Ok(r) => {
            let num = r.value[0].max(0.0);
            let den = r.value[1];
            if den > 0.0 {
                (num / den).sqrt()
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub rom_change: f64,
    pub max_abscissa: f64,
    pub line_search_evals: usize,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    TolMet,
    MaxIter,
    LineSearchFailed,
}

pub struct OptimRun {
    pub iterates: Vec<IterRecord>,
    pub final_rom: ParametricSystem,
    pub status: OptimStatus,
    /// Objective and gradient at the starting point.
    pub initial_objective: f64,
}

impl OptimRun {
    /// Per-iterate rows plus status as a JSON document.
    pub fn report_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            status: OptimStatus,
            initial_objective: f64,
            iterates: &'a [IterRecord],
        }
        serde_json::to_string_pretty(&Doc {
            status: self.status,
            initial_objective: self.initial_objective,
            iterates: &self.iterates,
        })
        .expect("report serialization")
    }

    /// Convergence-curve CSV: one row per accepted iterate.
    pub fn write_convergence_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "iter,objective,grad_norm,rom_change,max_abscissa,line_search_evals,step"
        )?;
        for r in &self.iterates {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e}",
                r.iter, r.objective, r.grad_norm, r.rom_change, r.max_abscissa,
                r.line_search_evals, r.step
            )?;
        }
        Ok(())
    }
}

enum Hessian {
    /// Dense inverse-Hessian approximation.
    Full(DMatrix<f64>),
    /// Limited-memory (s, y, ρ) pairs.
    Limited {
        mem: usize,
        pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    },
}

impl Hessian {
    fn direction(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            Hessian::Full(h) => -(h * g),
            Hessian::Limited { pairs, .. } => {
                // standard two-loop recursion
                let mut q = g.clone();
                let mut alphas = Vec::with_capacity(pairs.len());
                for (s, y, rho) in pairs.iter().rev() {
                    let a = rho * s.dot(&q);
                    q -= y * a;
                    alphas.push(a);
                }
                if let Some((s, y, _)) = pairs.back() {
                    let gamma = s.dot(y) / y.dot(y);
                    q *= gamma;
                }
                for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
                    let b = rho * y.dot(&q);
                    q += s * (a - b);
                }
                -q
            }
        }
    }

    fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) {
        let sy = s.dot(y);
        if sy <= 0.0 || !sy.is_finite() {
            return;
        }
        match self {
            Hessian::Full(h) => {
                let rho = 1.0 / sy;
                let n = s.len();
                let hy = &*h * y;
                let yhy = y.dot(&hy);
                // H ← H − ρ(s yᵀH + H y sᵀ) + ρ²(yᵀHy)ssᵀ + ρ ssᵀ
                for i in 0..n {
                    for j in 0..n {
                        h[(i, j)] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                            + (rho * rho * yhy + rho) * s[i] * s[j];
                    }
                }
            }
            Hessian::Limited { mem, pairs } => {
                pairs.push_back((s.clone(), y.clone(), 1.0 / sy));
                while pairs.len() > *mem {
                    pairs.pop_front();
                }
            }
        }
    }

    fn reset(&mut self) {
        match self {
            Hessian::Full(h) => {
                let n = h.nrows();
                *h = DMatrix::identity(n, n);
            }
            Hessian::Limited { pairs, .. } => pairs.clear(),
        }
    }
}

/// Minimize the gated objective starting from a stable ROM.
///
/// The line search is a weak-Wolfe bracketing search: an infinite
/// objective counts as failed sufficient decrease (the step is halved,
/// at most 60 trials). Inverse-Hessian updates only happen on steps
/// that satisfy both Wolfe conditions. After each accepted step the
/// relative ROM change against the previous accepted iterate decides
/// termination.
pub fn minimize(
    fom: &ParametricSystem,
    rom0: &ParametricSystem,
    config: &OptimConfig,
    spec: &QuadSpec,
) -> Result<OptimRun, OptimError> {
    let layout = PackedLayout::for_rom(rom0, &config.frozen);
    if layout.is_empty() {
        return Err(OptimError::AllFrozen);
    }
    let (f0, g0, alpha0) = gated_objective_full(fom, rom0, spec);
    if !alpha0.is_finite() || alpha0 >= 0.0 {
        return Err(OptimError::UnstableInit { max_alpha: alpha0 });
    }
    if !f0.is_finite() {
        return Err(OptimError::NonFiniteInit);
    }

    let n_vars = layout.len();
    let mut hessian = if n_vars > config.lbfgs_threshold {
        Hessian::Limited {
            mem: config.lbfgs_memory,
            pairs: VecDeque::new(),
        }
    } else {
        Hessian::Full(DMatrix::identity(n_vars, n_vars))
    };

    let mut x = layout.pack(rom0);
    let mut f = f0;
    let mut g = layout.flatten_grad(&g0);
    let mut rom_prev = rom0.clone();
    let mut iterates = Vec::new();
    let mut status = OptimStatus::MaxIter;

    for iter in 1..=config.max_iter {
        let mut d = hessian.direction(&g);
        let mut dg = d.dot(&g);
        if !(dg < 0.0) {
            hessian.reset();
            d = -g.clone();
            dg = d.dot(&g);
            if !(dg < 0.0) {
                // zero gradient: nothing to move along
                status = OptimStatus::TolMet;
                iterates.push(IterRecord {
                    iter,
                    objective: f,
                    grad_norm: g.norm(),
                    rom_change: 0.0,
                    max_abscissa: alpha0,
                    line_search_evals: 0,
                    step: 0.0,
                });
                break;
            }
        }

        // weak-Wolfe bracketing line search; only strict decreases are
        // acceptable so the accepted objective sequence stays strictly
        // decreasing
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut t = config.init_step;
        let mut accepted: Option<(f64, f64, DVector<f64>, ParametricSystem, f64, bool)> = None;
        let mut best_armijo: Option<(f64, f64, DVector<f64>, ParametricSystem, f64)> = None;
        let mut best_seen = f64::INFINITY;
        let mut evals = 0;
        for _ in 0..60 {
            evals += 1;
            let xt = &x + &d * t;
            let rom_t = layout.unpack(&rom_prev, &xt);
            let (ft, gset_t, alpha_t) = gated_objective_full(fom, &rom_t, spec);
            if ft.is_finite() {
                best_seen = best_seen.min(ft);
            }
            let armijo = ft.is_finite() && ft < f && ft <= f + config.wolfe_c1 * t * dg;
            if !armijo {
                hi = t;
                t = 0.5 * (lo + hi);
                continue;
            }
            let gt = layout.flatten_grad(&gset_t);
            if best_armijo
                .as_ref()
                .map(|(_, bf, _, _, _)| ft < *bf)
                .unwrap_or(true)
            {
                best_armijo = Some((t, ft, gt.clone(), rom_t.clone(), alpha_t));
            }
            let curvature = gt.dot(&d) >= config.wolfe_c2 * dg;
            if curvature {
                accepted = Some((t, ft, gt, rom_t, alpha_t, true));
                break;
            }
            lo = t;
            t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
        }
        let (t_acc, f_acc, g_acc, rom_acc, alpha_acc, wolfe_ok) = match accepted {
            Some(acc) => acc,
            None => match best_armijo {
                Some((t, ft, gt, rom_t, alpha_t)) => (t, ft, gt, rom_t, alpha_t, false),
                None => {
                    // the objective is flat along this ray down to
                    // floating-point resolution: converged in place
                    let flat = best_seen.is_finite()
                        && best_seen - f <= 1e-12 * f.abs().max(1e-300);
                    if flat {
                        status = OptimStatus::TolMet;
                        iterates.push(IterRecord {
                            iter,
                            objective: f,
                            grad_norm: g.norm(),
                            rom_change: 0.0,
                            max_abscissa: stability::max_abscissa_over_box(&rom_prev)
                                .map(|r| r.max_alpha)
                                .unwrap_or(f64::INFINITY),
                            line_search_evals: evals,
                            step: 0.0,
                        });
                    } else {
                        status = OptimStatus::LineSearchFailed;
                    }
                    break;
                }
            },
        };

        // feasibility invariant: every accepted iterate is stable
        assert!(
            alpha_acc < 0.0,
            "accepted iterate with non-negative abscissa {alpha_acc}"
        );

        let x_acc = &x + &d * t_acc;
        let s = &x_acc - &x;
        let y = &g_acc - &g;
        if wolfe_ok {
            hessian.update(&s, &y);
        }

        let change = rom_change(&rom_prev, &rom_acc, spec);
        iterates.push(IterRecord {
            iter,
            objective: f_acc,
            grad_norm: g_acc.norm(),
            rom_change: change,
            max_abscissa: alpha_acc,
            line_search_evals: evals,
            step: t_acc,
        });

        x = x_acc;
        f = f_acc;
        g = g_acc;
        rom_prev = rom_acc;

        if change < config.stop_tol {
            status = OptimStatus::TolMet;
            break;
        }
    }

    Ok(OptimRun {
        iterates,
        final_rom: rom_prev,
        status,
        initial_objective: f0,
    })
}
