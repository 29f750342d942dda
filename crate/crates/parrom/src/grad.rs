//! Analytic gradients of the squared H2⊗L2 error with respect to every
//! reduced-order coefficient matrix, and the Wilson-type stationarity
//! residuals derived from them.
//!
//! With Gramian blocks `P̃, P̂, Q̃, Q̂` at a parameter point the gradient
//! integrands are
//!
//! - `∇_{Êᵢ}: 2 êᵢ(p) (Q̂ᵀ Â P̂ + Q̃ᵀ A P̃)`
//! - `∇_{Âⱼ}: 2 âⱼ(p) (Q̂ᵀ Ê P̂ + Q̃ᵀ E P̃)`
//! - `∇_{B̂ₖ}: 2 b̂ₖ(p) (Q̂ᵀ B̂ + Q̃ᵀ B)`
//! - `∇_{Ĉ_ℓ}: 2 ĉ_ℓ(p) (Ĉ P̂ − C P̃)`
//!
//! integrated over the box. One batched quadrature pass produces the
//! objective value and all gradient matrices from shared per-point
//! Gramian solves.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gramians::{self, BlockCache, GramianError, Which};
use crate::psys::ParametricSystem;
use crate::quad::{self, QuadSpec};

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Gramian(#[from] GramianError),
    #[error("nonparametric gradient requires parameter-independent systems")]
    NotConstant,
}

/// The four matrix-valued function families of a system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Family {
    E,
    A,
    B,
    C,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::E, Family::A, Family::B, Family::C];

    pub fn label(self) -> &'static str {
        match self {
            Family::E => "E",
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
        }
    }
}

/// One gradient matrix per reduced-order coefficient matrix, shapes
/// mirroring the ROM's terms.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_e: Vec<DMatrix<f64>>,
    pub d_a: Vec<DMatrix<f64>>,
    pub d_b: Vec<DMatrix<f64>>,
    pub d_c: Vec<DMatrix<f64>>,
}

impl GradientSet {
    pub fn zeros_like(rom: &ParametricSystem) -> Self {
        let zero = |m: &crate::psys::ParamSepMatrix| {
            m.terms()
                .iter()
                .map(|(_, mat)| DMatrix::zeros(mat.nrows(), mat.ncols()))
                .collect()
        };
        Self {
            d_e: zero(rom.e()),
            d_a: zero(rom.a()),
            d_b: zero(rom.b()),
            d_c: zero(rom.c()),
        }
    }

    pub fn family(&self, f: Family) -> &[DMatrix<f64>] {
        match f {
            Family::E => &self.d_e,
            Family::A => &self.d_a,
            Family::B => &self.d_b,
            Family::C => &self.d_c,
        }
    }

    /// Total entry count across all families.
    pub fn flat_len(&self) -> usize {
        Family::ALL
            .iter()
            .map(|&f| self.family(f).iter().map(|m| m.len()).sum::<usize>())
            .sum()
    }

    /// Largest absolute entry over all matrices.
    pub fn max_abs(&self) -> f64 {
        Family::ALL
            .iter()
            .flat_map(|&f| self.family(f))
            .map(|m| m.amax())
            .fold(0.0, f64::max)
    }
}

/// Objective 𝒥ₛ and its gradient in one batched quadrature pass.
///
/// Gramian blocks are computed once per quadrature point (cached by the
/// exact bits of `p`) and shared by the objective and every gradient
/// integrand. Any per-point failure maps the whole evaluation to
/// `(+∞, zero gradient)`, which the optimizer treats as infeasible.
pub fn gradient(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
) -> (f64, GradientSet) {
    let cache = BlockCache::new();
    let sizes = bundle_sizes(rom);

    let integrand = |p: &[f64]| -> Result<DVector<f64>, String> {
        let blocks = cache
            .get_or_compute(fom, rom, p)
            .map_err(|e| e.to_string())?;
        let p_mix = blocks.p_mix.as_ref().unwrap();
        let p_red = blocks.p_red.as_ref().unwrap();
        let q_mix = blocks.q_mix.as_ref().unwrap();
        let q_red = blocks.q_red.as_ref().unwrap();

        let e = fom.e().eval(p);
        let a = fom.a().eval(p);
        let b = fom.b().eval(p);
        let c = fom.c().eval(p);
        let eh = rom.e().eval(p);
        let ah = rom.a().eval(p);
        let bh = rom.b().eval(p);
        let ch = rom.c().eval(p);

        let js = (&ch * p_red * ch.transpose()).trace()
            - 2.0 * (&c * p_mix * ch.transpose()).trace();

        // shared cores; only the scalar coefficient differs across the
        // terms of one family
        let qmt = q_mix.transpose();
        let core_e = 2.0 * (q_red.transpose() * &ah * p_red + &qmt * &a * p_mix);
        let core_a = 2.0 * (q_red.transpose() * &eh * p_red + &qmt * &e * p_mix);
        let core_b = 2.0 * (q_red.transpose() * &bh + &qmt * &b);
        let core_c = 2.0 * (&ch * p_red - &c * p_mix);

        let mut out = DVector::zeros(1 + sizes.total);
        out[0] = js;
        let mut off = 1;
        for (coeff, _) in rom.e().terms() {
            let s = coeff.eval(p);
            for v in core_e.iter() {
                out[off] = s * v;
                off += 1;
            }
        }
        for (coeff, _) in rom.a().terms() {
            let s = coeff.eval(p);
            for v in core_a.iter() {
                out[off] = s * v;
                off += 1;
            }
        }
        for (coeff, _) in rom.b().terms() {
            let s = coeff.eval(p);
            for v in core_b.iter() {
                out[off] = s * v;
                off += 1;
            }
        }
        for (coeff, _) in rom.c().terms() {
            let s = coeff.eval(p);
            for v in core_c.iter() {
                out[off] = s * v;
                off += 1;
            }
        }
        Ok(out)
    };

    match quad::integrate(integrand, fom.domain(), spec) {
        Ok(result) => {
            let js = result.value[0];
            (js, unflatten(rom, &sizes, &result.value))
        }
        Err(_) => (f64::INFINITY, GradientSet::zeros_like(rom)),
    }
}

struct BundleSizes {
    e: (usize, usize, usize),
    a: (usize, usize, usize),
    b: (usize, usize, usize),
    c: (usize, usize, usize),
    total: usize,
}

fn bundle_sizes(rom: &ParametricSystem) -> BundleSizes {
    let r = rom.order();
    let m = rom.num_inputs();
    let p_out = rom.num_outputs();
    let e = (rom.e().num_terms(), r, r);
    let a = (rom.a().num_terms(), r, r);
    let b = (rom.b().num_terms(), r, m);
    let c = (rom.c().num_terms(), p_out, r);
    let total =
        e.0 * e.1 * e.2 + a.0 * a.1 * a.2 + b.0 * b.1 * b.2 + c.0 * c.1 * c.2;
    BundleSizes { e, a, b, c, total }
}

fn unflatten(rom: &ParametricSystem, sizes: &BundleSizes, flat: &DVector<f64>) -> GradientSet {
    let mut off = 1;
    let mut take = |count: usize, rows: usize, cols: usize| -> Vec<DMatrix<f64>> {
        (0..count)
            .map(|_| {
                let m = DMatrix::from_column_slice(rows, cols, &flat.as_slice()[off..off + rows * cols]);
                off += rows * cols;
                m
            })
            .collect()
    };
    let d_e = take(sizes.e.0, sizes.e.1, sizes.e.2);
    let d_a = take(sizes.a.0, sizes.a.1, sizes.a.2);
    let d_b = take(sizes.b.0, sizes.b.1, sizes.b.2);
    let d_c = take(sizes.c.0, sizes.c.1, sizes.c.2);
    let _ = rom;
    GradientSet { d_e, d_a, d_b, d_c }
}

/// Wilson-type first-order-condition residuals: the Frobenius norms of
/// the gradient matrices divided by two, matching the stationarity
/// equations literally. Labels are `E1, E2, …, A1, …` per family term.
pub fn fonc_residuals(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
) -> (f64, Vec<(String, f64)>) {
    let (js, grads) = gradient(fom, rom, spec);
    let mut out = Vec::new();
    for f in Family::ALL {
        for (i, g) in grads.family(f).iter().enumerate() {
            out.push((format!("{}{}", f.label(), i + 1), 0.5 * g.norm()));
        }
    }
    (js, out)
}

/// Gradients with respect to the assembled matrices of constant
/// (parameter-independent) systems: no quadrature involved.
#[derive(Debug, Clone)]
pub struct ConstantGradient {
    pub d_e: DMatrix<f64>,
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_c: DMatrix<f64>,
}

pub fn nonparametric_gradient(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
) -> Result<ConstantGradient, GradError> {
    if !fom.is_constant() || !rom.is_constant() {
        return Err(GradError::NotConstant);
    }
    let p = fom.domain().midpoint();
    let blocks = gramians::gramian_blocks(fom, rom, &p, Which::Both)?;
    let p_mix = blocks.p_mix.as_ref().unwrap();
    let p_red = blocks.p_red.as_ref().unwrap();
    let q_mix = blocks.q_mix.as_ref().unwrap();
    let q_red = blocks.q_red.as_ref().unwrap();
    let e = fom.e().eval(&p);
    let a = fom.a().eval(&p);
    let b = fom.b().eval(&p);
    let c = fom.c().eval(&p);
    let eh = rom.e().eval(&p);
    let ah = rom.a().eval(&p);
    let bh = rom.b().eval(&p);
    let ch = rom.c().eval(&p);
    let qmt = q_mix.transpose();
    Ok(ConstantGradient {
        d_e: 2.0 * (q_red.transpose() * &ah * p_red + &qmt * &a * p_mix),
        d_a: 2.0 * (q_red.transpose() * &eh * p_red + &qmt * &e * p_mix),
        d_b: 2.0 * (q_red.transpose() * &bh + &qmt * &b),
        d_c: 2.0 * (&ch * p_red - &c * p_mix),
    })
}
