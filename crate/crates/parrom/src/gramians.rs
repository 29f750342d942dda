//! Per-parameter Gramian blocks, H2 norms, the reduced objective 𝒥ₛ and
//! H2⊗L2 norms of full-order, reduced-order and error systems.
//!
//! For a FOM/ROM pair at a fixed parameter the four blocks are
//!
//! - `P̃` (n×r): `A P̃ Êᵀ + E P̃ Âᵀ + B B̂ᵀ = 0`
//! - `P̂` (r×r): `Â P̂ Êᵀ + Ê P̂ Âᵀ + B̂ B̂ᵀ = 0`
//! - `Q̃` (n×r): `Aᵀ Q̃ Ê + Eᵀ Q̃ Â − Cᵀ Ĉ = 0`
//! - `Q̂` (r×r): `Âᵀ Q̂ Ê + Êᵀ Q̂ Â + Ĉᵀ Ĉ = 0`
//!
//! and the squared H2 norm of a stable system at `p` is
//! `trace(C P Cᵀ) = trace(Bᵀ Q B)` with `P`, `Q` the full Gramians.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mateq::{self, MatEqError};
use crate::psys::{ParamBox, ParametricSystem, PsysError};
use crate::quad::{self, QuadError, QuadSpec};

#[derive(Debug, Error)]
pub enum GramianError {
    #[error(transparent)]
    MatEq(#[from] MatEqError),
    #[error(transparent)]
    Psys(#[from] PsysError),
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// Which Gramian side(s) to solve for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Controllability,
    Observability,
    Both,
}

/// Solutions of the mixed/reduced matrix equations at one parameter
/// point. Sides not requested stay `None`.
#[derive(Debug, Clone)]
pub struct GramianBlocks {
    pub p_mix: Option<DMatrix<f64>>,
    pub p_red: Option<DMatrix<f64>>,
    pub q_mix: Option<DMatrix<f64>>,
    pub q_red: Option<DMatrix<f64>>,
    pub at_p: Vec<f64>,
}

/// Solve the requested Gramian block equations for a FOM/ROM pair at `p`.
///
/// Both systems must be asymptotically stable at `p`; violations surface
/// as solver failures which callers on the optimization path map to an
/// infinite objective.
pub fn gramian_blocks(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    p: &[f64],
    which: Which,
) -> Result<GramianBlocks, GramianError> {
    let e = fom.e().eval(p);
    let a = fom.a().eval(p);
    let b = fom.b().eval(p);
    let c = fom.c().eval(p);
    let eh = rom.e().eval(p);
    let ah = rom.a().eval(p);
    let bh = rom.b().eval(p);
    let ch = rom.c().eval(p);

    let mut blocks = GramianBlocks {
        p_mix: None,
        p_red: None,
        q_mix: None,
        q_red: None,
        at_p: p.to_vec(),
    };
    if which != Which::Observability {
        blocks.p_mix = Some(mateq::solve_sylv(&a, &e, &ah, &eh, &(&b * bh.transpose()))?);
        blocks.p_red = Some(mateq::solve_lyap(&ah, &eh, &(&bh * bh.transpose()))?);
    }
    if which != Which::Controllability {
        blocks.q_mix = Some(mateq::solve_sylv(
            &a.transpose(),
            &e.transpose(),
            &ah.transpose(),
            &eh.transpose(),
            &(-c.transpose() * &ch),
        )?);
        blocks.q_red = Some(mateq::solve_lyap(
            &ah.transpose(),
            &eh.transpose(),
            &(ch.transpose() * &ch),
        )?);
    }
    Ok(blocks)
}

/// Cache of Gramian blocks keyed by the exact bit pattern of `p`.
///
/// One cache instance lives for a single objective+gradient evaluation,
/// so nothing stale leaks across optimizer iterations. Safe to use from
/// parallel quadrature workers.
pub struct BlockCache {
    map: Mutex<HashMap<Vec<u64>, Arc<GramianBlocks>>>,
}

impl BlockCache {
    pub fn new() -> Self {
        Self {
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn get_or_compute(
        &self,
        fom: &ParametricSystem,
        rom: &ParametricSystem,
        p: &[f64],
    ) -> Result<Arc<GramianBlocks>, GramianError> {
        let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
        if let Some(hit) = self.map.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let blocks = Arc::new(gramian_blocks(fom, rom, p, Which::Both)?);
        self.map.lock().unwrap().insert(key, blocks.clone());
        Ok(blocks)
    }
}

impl Default for BlockCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Squared H2 norm at `p` via the controllability Gramian trace
/// `trace(C P Cᵀ)`.
pub fn h2_norm_sq(sys: &ParametricSystem, p: &[f64]) -> Result<f64, GramianError> {
    let e = sys.e().eval(p);
    let a = sys.a().eval(p);
    let b = sys.b().eval(p);
    let c = sys.c().eval(p);
    let gram = mateq::solve_lyap(&a, &e, &(&b * b.transpose()))?;
    Ok((&c * gram * c.transpose()).trace())
}

/// Squared H2 norm at `p` via the dual observability trace
/// `trace(Bᵀ Q B)`; used to cross-check [`h2_norm_sq`].
pub fn h2_norm_sq_obs(sys: &ParametricSystem, p: &[f64]) -> Result<f64, GramianError> {
    let e = sys.e().eval(p);
    let a = sys.a().eval(p);
    let b = sys.b().eval(p);
    let c = sys.c().eval(p);
    let gram = mateq::solve_lyap(&a.transpose(), &e.transpose(), &(c.transpose() * &c))?;
    Ok((b.transpose() * gram * &b).trace())
}

/// The reduced objective
/// `𝒥ₛ = ∫ trace(Ĉ P̂ Ĉᵀ − 2 C P̃ Ĉᵀ) dp`,
/// equal to the squared H2⊗L2 error minus the constant `‖H‖²`.
///
/// Any per-point failure yields `+∞`: the stability gate in the
/// optimizer treats such candidates as infeasible.
pub fn objective_js(fom: &ParametricSystem, rom: &ParametricSystem, spec: &QuadSpec) -> f64 {
    let integrand = |p: &[f64]| -> Result<DVector<f64>, String> {
        js_integrand(fom, rom, p).map(|v| DVector::from_element(1, v))
    };
    match quad::integrate(integrand, fom.domain(), spec) {
        Ok(r) => r.value[0],
        Err(_) => f64::INFINITY,
    }
}

/// Integrand of 𝒥ₛ at one point (shared with the gradient bundle).
pub(crate) fn js_integrand(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    p: &[f64],
) -> Result<f64, String> {
    let blocks = gramian_blocks(fom, rom, p, Which::Controllability).map_err(|e| e.to_string())?;
    let ch = rom.c().eval(p);
    let c = fom.c().eval(p);
    let p_red = blocks.p_red.as_ref().unwrap();
    let p_mix = blocks.p_mix.as_ref().unwrap();
    Ok((&ch * p_red * ch.transpose()).trace() - 2.0 * (&c * p_mix * ch.transpose()).trace())
}

/// Squared H2⊗L2 norm `∫ trace(C(p) P(p) C(p)ᵀ) dp` of a system that is
/// stable over the whole box. Solves one full-order Lyapunov equation
/// per quadrature point, so this is the expensive once-per-experiment
/// quantity.
pub fn fom_h2l2_norm_sq(sys: &ParametricSystem, spec: &QuadSpec) -> Result<f64, GramianError> {
    let integrand = |p: &[f64]| -> Result<DVector<f64>, String> {
        h2_norm_sq(sys, p)
            .map(|v| DVector::from_element(1, v))
            .map_err(|e| e.to_string())
    };
    let r = quad::integrate(integrand, sys.domain(), spec)?;
    Ok(r.value[0])
}

/// Evaluation grids for the error curves/surfaces.
#[derive(Debug, Clone)]
pub struct MetricsGrid {
    pub omegas: Vec<f64>,
    pub params: Vec<Vec<f64>>,
}

impl MetricsGrid {
    /// 101 log-spaced frequencies in `[1e-2, 1e4]` and 101 linearly
    /// spaced parameters (componentwise along the box diagonal for
    /// d > 1).
    pub fn default_for(domain: &ParamBox) -> Self {
        let omegas = log_space(1e-2, 1e4, 101);
        let params = (0..101)
            .map(|j| {
                let t = j as f64 / 100.0;
                domain
                    .lower()
                    .iter()
                    .zip(domain.upper())
                    .map(|(&lo, &hi)| lo + t * (hi - lo))
                    .collect()
            })
            .collect();
        Self { omegas, params }
    }
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|j| (llo + (lhi - llo) * j as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

pub fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
        .collect()
}

/// Relative error metrics of a ROM against its FOM.
#[derive(Debug, Clone)]
pub struct ErrorMetrics {
    /// Relative H2⊗L2 error `‖H − Ĥ‖ / ‖H‖`.
    pub eps: f64,
    /// H2⊗L2 norm of the FOM (the denominator above).
    pub fom_norm: f64,
    /// `(p, ε_p)` curve: per-parameter H2 error scaled by `‖H‖`.
    pub eps_p: Vec<(Vec<f64>, f64)>,
    /// `(ω, p, ε_{ω,p})` surface: pointwise transfer error scaled by `‖H‖`.
    pub eps_omega_p: Vec<(f64, Vec<f64>, f64)>,
}

/// Compute ε, the ε_p curve and the ε_{ω,p} surface on the given grid
/// (or the default grid for the box).
pub fn error_metrics(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
    grid: Option<&MetricsGrid>,
) -> Result<ErrorMetrics, GramianError> {
    let default_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            default_grid = MetricsGrid::default_for(fom.domain());
            &default_grid
        }
    };
    let err_sys = ParametricSystem::error_system(fom, rom)?;
    let fom_norm_sq = fom_h2l2_norm_sq(fom, spec)?;
    let err_norm_sq = fom_h2l2_norm_sq(&err_sys, spec)?;
    let fom_norm = fom_norm_sq.max(0.0).sqrt();
    let eps = err_norm_sq.max(0.0).sqrt() / fom_norm;

    let mut eps_p = Vec::with_capacity(grid.params.len());
    for p in &grid.params {
        let v = h2_norm_sq(&err_sys, p)?.max(0.0).sqrt() / fom_norm;
        eps_p.push((p.clone(), v));
    }

    let mut eps_omega_p = Vec::with_capacity(grid.omegas.len() * grid.params.len());
    for p in &grid.params {
        for &w in &grid.omegas {
            let s = num_complex::Complex64::new(0.0, w);
            let h = fom.transfer_eval(s, p)?;
            let hh = rom.transfer_eval(s, p)?;
            let diff = (&h - &hh).norm() / fom_norm;
            eps_omega_p.push((w, p.clone(), diff));
        }
    }
    Ok(ErrorMetrics {
        eps,
        fom_norm,
        eps_p,
        eps_omega_p,
    })
}

/// Long-format `(p, eps_p)` CSV.
pub fn write_eps_p_csv<W: Write>(mut w: W, metrics: &ErrorMetrics) -> std::io::Result<()> {
    let d = metrics.eps_p.first().map(|(p, _)| p.len()).unwrap_or(1);
    let head: Vec<String> = (0..d).map(|k| format!("p{}", k + 1)).collect();
    writeln!(w, "{},eps_p", head.join(","))?;
    for (p, v) in &metrics.eps_p {
        let ps: Vec<String> = p.iter().map(|x| format!("{x:.17e}")).collect();
        writeln!(w, "{},{v:.17e}", ps.join(","))?;
    }
    Ok(())
}

/// Long-format `(omega, p, eps_omega_p)` CSV.
pub fn write_eps_omega_p_csv<W: Write>(mut w: W, metrics: &ErrorMetrics) -> std::io::Result<()> {
    let d = metrics
        .eps_omega_p
        .first()
        .map(|(_, p, _)| p.len())
        .unwrap_or(1);
    let head: Vec<String> = (0..d).map(|k| format!("p{}", k + 1)).collect();
    writeln!(w, "omega,{},eps_omega_p", head.join(","))?;
    for (omega, p, v) in &metrics.eps_omega_p {
        let ps: Vec<String> = p.iter().map(|x| format!("{x:.17e}")).collect();
        writeln!(w, "{omega:.17e},{},{v:.17e}", ps.join(","))?;
    }
    Ok(())
}
