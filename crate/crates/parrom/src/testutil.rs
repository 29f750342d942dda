//! Construction helpers for randomized test instances.
//!
//! The random systems are built uniformly strictly dissipative — `E(p)`
//! positive definite and `A(p) + A(p)ᵀ` negative definite over the box —
//! which guarantees asymptotic stability for every parameter without
//! needing a stability check in test setup.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::grad::{Family, GradientSet};
use crate::gramians::objective_js;
use crate::psys::{ParamBox, ParamSepMatrix, ParametricSystem, ScalarCoeff};
use crate::quad::QuadSpec;

/// Wrap four constant matrices into a parametric system over `domain`.
pub fn constant_system(
    e: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    domain: ParamBox,
) -> ParametricSystem {
    ParametricSystem::new(
        ParamSepMatrix::constant(e),
        ParamSepMatrix::constant(a),
        ParamSepMatrix::constant(b),
        ParamSepMatrix::constant(c),
        domain,
    )
    .expect("constant system dimensions")
}

fn randn(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| {
        // Box-Muller keeps the dependency surface small
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

fn skew(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s = randn(n, n, rng);
    0.5 * (&s - s.transpose())
}

fn spd_bump(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = randn(n, n, rng);
    (&g * g.transpose()) / n as f64
}

/// The monomial basis used for random parametric terms: 1, p₁, p₂, p₁².
fn coeff_basis(d: usize, i: usize) -> ScalarCoeff {
    match i {
        0 => ScalarCoeff::one(),
        1 => ScalarCoeff::linear(0),
        2 if d >= 2 => ScalarCoeff::linear(1),
        _ => ScalarCoeff::Monomial(vec![2]),
    }
}

/// Random parametric system over `[0, 1]^d`, stable for every parameter.
///
/// `q_a`, `q_b`, `q_c` are the number of parameter-separable terms in
/// `A`, `B`, `C`; `E` stays a single SPD constant term. The base `A`
/// term is a strictly dissipative matrix and the parametric `A` terms
/// are skew-symmetric plus a small damped symmetric part, so
/// `A(p) + A(p)ᵀ ≺ 0` holds on the whole box.
#[allow(clippy::too_many_arguments)]
pub fn random_parametric_system(
    n: usize,
    m: usize,
    p_out: usize,
    q_a: usize,
    q_b: usize,
    q_c: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> ParametricSystem {
    let domain = ParamBox::new(vec![0.0; d], vec![1.0; d]).expect("unit box");
    let e = ParamSepMatrix::constant(DMatrix::identity(n, n) + spd_bump(n, rng));

    let mut a_terms = Vec::with_capacity(q_a);
    let a0 = -(DMatrix::identity(n, n) + spd_bump(n, rng)) + skew(n, rng);
    a_terms.push((ScalarCoeff::one(), a0));
    for i in 1..q_a {
        // symmetric part bounded well below the base damping
        let sym = 0.2 / q_a as f64 * (-spd_bump(n, rng));
        a_terms.push((coeff_basis(d, i), skew(n, rng) * 0.5 + sym));
    }
    let a = ParamSepMatrix::new(a_terms).unwrap();

    let mut b_terms = Vec::with_capacity(q_b);
    for i in 0..q_b {
        b_terms.push((coeff_basis(d, i), randn(n, m, rng)));
    }
    let b = ParamSepMatrix::new(b_terms).unwrap();

    let mut c_terms = Vec::with_capacity(q_c);
    for i in 0..q_c {
        c_terms.push((coeff_basis(d, i), randn(p_out, n, rng)));
    }
    let c = ParamSepMatrix::new(c_terms).unwrap();

    ParametricSystem::new(e, a, b, c, domain).expect("random system dimensions")
}

/// Copy of `rom` with one entry of one coefficient matrix shifted by
/// `delta`.
pub fn perturbed_rom(
    rom: &ParametricSystem,
    family: Family,
    term: usize,
    i: usize,
    j: usize,
    delta: f64,
) -> ParametricSystem {
    let tweak = |psm: &ParamSepMatrix| -> ParamSepMatrix {
        let mut mats: Vec<DMatrix<f64>> = psm.terms().iter().map(|(_, m)| m.clone()).collect();
        mats[term][(i, j)] += delta;
        psm.with_matrices(mats).unwrap()
    };
    let (mut e, mut a, mut b, mut c) = (
        rom.e().clone(),
        rom.a().clone(),
        rom.b().clone(),
        rom.c().clone(),
    );
    match family {
        Family::E => e = tweak(&e),
        Family::A => a = tweak(&a),
        Family::B => b = tweak(&b),
        Family::C => c = tweak(&c),
    }
    ParametricSystem::new(e, a, b, c, rom.domain().clone()).unwrap()
}

/// Central finite differences of the objective with respect to every
/// ROM coefficient entry. This is the independent oracle for the
/// analytic gradient: it only ever calls the objective-value path.
pub fn fd_gradient(
    fom: &ParametricSystem,
    rom: &ParametricSystem,
    spec: &QuadSpec,
    step: f64,
) -> GradientSet {
    let mut out = GradientSet::zeros_like(rom);
    for family in Family::ALL {
        let psm = match family {
            Family::E => rom.e(),
            Family::A => rom.a(),
            Family::B => rom.b(),
            Family::C => rom.c(),
        };
        for term in 0..psm.num_terms() {
            let (rows, cols) = {
                let m = &psm.terms()[term].1;
                (m.nrows(), m.ncols())
            };
            let mut g = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let plus = objective_js(
                        fom,
                        &perturbed_rom(rom, family, term, i, j, step),
                        spec,
                    );
                    let minus = objective_js(
                        fom,
                        &perturbed_rom(rom, family, term, i, j, -step),
                        spec,
                    );
                    g[(i, j)] = (plus - minus) / (2.0 * step);
                }
            }
            match family {
                Family::E => out.d_e[term] = g,
                Family::A => out.d_a[term] = g,
                Family::B => out.d_b[term] = g,
                Family::C => out.d_c[term] = g,
            }
        }
    }
    out
}

/// Random parametric system whose `E` is also parametric (small SPD
/// perturbations), for exercising the `Ê`-gradient path.
#[allow(clippy::too_many_arguments)]
pub fn random_parametric_system_with_e(
    n: usize,
    m: usize,
    p_out: usize,
    q_e: usize,
    q_a: usize,
    q_b: usize,
    q_c: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> ParametricSystem {
    let base = random_parametric_system(n, m, p_out, q_a, q_b, q_c, d, rng);
    let mut e_terms = vec![(
        ScalarCoeff::one(),
        DMatrix::identity(n, n) + spd_bump(n, rng),
    )];
    for i in 1..q_e {
        // symmetric, small enough to keep E(p) positive definite on [0,1]^d
        let bump = spd_bump(n, rng) * (0.3 / q_e as f64);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        e_terms.push((coeff_basis(d, i), bump * sign));
    }
    ParametricSystem::new(
        ParamSepMatrix::new(e_terms).unwrap(),
        base.a().clone(),
        base.b().clone(),
        base.c().clone(),
        base.domain().clone(),
    )
    .unwrap()
}
