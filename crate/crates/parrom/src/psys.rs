//! Parameter boxes, scalar coefficient functions, parameter-separable
//! matrix-valued functions and parametric state-space systems.
//!
//! A matrix-valued function is stored as a finite sum `Σᵢ fᵢ(p)·Mᵢ` of
//! scalar coefficient functions times constant matrices. A parametric
//! system is the quadruple `(E, A, B, C)` of such functions over a
//! parameter box, with transfer function `H(s; p) = C(p)(sE(p) − A(p))⁻¹B(p)`.
//!
//! All types are immutable after construction and evaluation is pure, so
//! everything here can be shared freely across threads.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mateq::{self, MatEqError};

#[derive(Debug, Error)]
pub enum PsysError {
    #[error("invalid parameter box: {0}")]
    InvalidBox(String),
    #[error("parameter point {point:?} lies outside the box")]
    OutsideDomain { point: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("a parameter-separable matrix needs at least one term")]
    EmptyTerms,
    #[error("rational shift pole {pole} lies inside the box on axis {axis}")]
    PoleInsideBox { axis: usize, pole: f64 },
    #[error("shifted matrix sE(p) − A(p) is singular at s = {shift}")]
    SingularShift { shift: Complex64 },
    #[error("unknown custom coefficient tag '{0}' (not registered)")]
    UnknownCustomTag(String),
    #[error("JSON error: {0}")]
    Json(String),
    #[error(transparent)]
    MatEq(#[from] MatEqError),
}

/// Closed axis-aligned box `[lower₁, upper₁] × … × [lower_d, upper_d]`
/// housing the parameter domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBox {
    /// A non-degenerate box needs `lower[k] < upper[k]` on every axis.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, PsysError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(PsysError::InvalidBox(format!(
                "need d ≥ 1 and matching bound lengths, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for k in 0..lower.len() {
            if !(lower[k] < upper[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(PsysError::InvalidBox(format!(
                    "axis {k}: require finite lower < upper, got [{}, {}]",
                    lower[k], upper[k]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Convenience constructor for a one-dimensional interval.
    pub fn interval(lo: f64, hi: f64) -> Result<Self, PsysError> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Membership test with zero tolerance.
    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    /// Lebesgue measure of the box.
    pub fn measure(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| hi - lo)
            .product()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| 0.5 * (lo + hi))
            .collect()
    }
}

type CoeffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Scalar coefficient function `𝒫 → ℝ` of a parameter-separable term.
///
/// The closed set of variants covers what the shipped models need;
/// `Custom` is the escape hatch for user-registered functions. Custom
/// coefficients are never merged when systems are combined, and they
/// only serialize by tag.
#[derive(Clone)]
pub enum ScalarCoeff {
    /// `p ↦ c`
    Constant(f64),
    /// `p ↦ Π_k p_k^{e_k}` for a multi-index `e`
    Monomial(Vec<u32>),
    /// `p ↦ 1 / (p_axis − pole)`; the pole must lie outside the box
    RationalShift { axis: usize, pole: f64 },
    /// user-registered callable, identified by its tag
    Custom { tag: String, f: CoeffFn },
}

impl ScalarCoeff {
    /// Shorthand for the constant-one coefficient.
    pub fn one() -> Self {
        ScalarCoeff::Constant(1.0)
    }

    /// Shorthand for `p ↦ p_axis`.
    pub fn linear(axis: usize) -> Self {
        let mut e = vec![0u32; axis + 1];
        e[axis] = 1;
        ScalarCoeff::Monomial(e)
    }

    pub fn custom<F>(tag: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarCoeff::Custom {
            tag: tag.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        match self {
            ScalarCoeff::Constant(c) => *c,
            ScalarCoeff::Monomial(exps) => exps
                .iter()
                .enumerate()
                .map(|(k, &e)| p[k].powi(e as i32))
                .product(),
            ScalarCoeff::RationalShift { axis, pole } => 1.0 / (p[*axis] - pole),
            ScalarCoeff::Custom { f, .. } => f(p),
        }
    }

    /// Structural equality used when merging terms; custom callables are
    /// never considered equal.
    pub fn merge_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ScalarCoeff::Constant(a), ScalarCoeff::Constant(b)) => a == b,
            (ScalarCoeff::Monomial(a), ScalarCoeff::Monomial(b)) => {
                // trailing zero exponents are structurally irrelevant
                let len = a.len().max(b.len());
                (0..len).all(|k| {
                    a.get(k).copied().unwrap_or(0) == b.get(k).copied().unwrap_or(0)
                })
            }
            (
                ScalarCoeff::RationalShift { axis: a1, pole: p1 },
                ScalarCoeff::RationalShift { axis: a2, pole: p2 },
            ) => a1 == a2 && p1 == p2,
            _ => false,
        }
    }

    /// Checks domain restrictions (currently: rational-shift poles must
    /// lie outside the box).
    pub fn validate_on(&self, domain: &ParamBox) -> Result<(), PsysError> {
        if let ScalarCoeff::RationalShift { axis, pole } = self {
            if *axis >= domain.dim() {
                return Err(PsysError::DimensionMismatch(format!(
                    "rational shift axis {axis} exceeds box dimension {}",
                    domain.dim()
                )));
            }
            if *pole >= domain.lower()[*axis] && *pole <= domain.upper()[*axis] {
                return Err(PsysError::PoleInsideBox {
                    axis: *axis,
                    pole: *pole,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Debug for ScalarCoeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarCoeff::Constant(c) => write!(f, "Constant({c})"),
            ScalarCoeff::Monomial(e) => write!(f, "Monomial({e:?})"),
            ScalarCoeff::RationalShift { axis, pole } => {
                write!(f, "RationalShift(axis={axis}, pole={pole})")
            }
            ScalarCoeff::Custom { tag, .. } => write!(f, "Custom({tag:?})"),
        }
    }
}

/// Matrix-valued function in parameter-separable form `Σᵢ fᵢ(p)·Mᵢ`.
#[derive(Debug, Clone)]
pub struct ParamSepMatrix {
    terms: Vec<(ScalarCoeff, DMatrix<f64>)>,
    nrows: usize,
    ncols: usize,
}

impl ParamSepMatrix {
    pub fn new(terms: Vec<(ScalarCoeff, DMatrix<f64>)>) -> Result<Self, PsysError> {
        let (nrows, ncols) = match terms.first() {
            Some((_, m)) => (m.nrows(), m.ncols()),
            None => return Err(PsysError::EmptyTerms),
        };
        for (_, m) in &terms {
            if m.nrows() != nrows || m.ncols() != ncols {
                return Err(PsysError::DimensionMismatch(format!(
                    "term shape {}×{} differs from {}×{}",
                    m.nrows(),
                    m.ncols(),
                    nrows,
                    ncols
                )));
            }
        }
        Ok(Self {
            terms,
            nrows,
            ncols,
        })
    }

    /// Single constant term with coefficient one.
    pub fn constant(m: DMatrix<f64>) -> Self {
        let (nrows, ncols) = (m.nrows(), m.ncols());
        Self {
            terms: vec![(ScalarCoeff::one(), m)],
            nrows,
            ncols,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn terms(&self) -> &[(ScalarCoeff, DMatrix<f64>)] {
        &self.terms
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// True when every coefficient is `Constant`, i.e. the function does
    /// not actually depend on the parameter.
    pub fn is_constant(&self) -> bool {
        self.terms
            .iter()
            .all(|(c, _)| matches!(c, ScalarCoeff::Constant(_)))
    }

    /// Evaluate `Σᵢ fᵢ(p)·Mᵢ`.
    pub fn eval(&self, p: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (coeff, m) in &self.terms {
            let c = coeff.eval(p);
            if c != 0.0 {
                out.zip_apply(m, |o, v| *o += c * v);
            }
        }
        out
    }

    /// Rebuild with the same coefficients and new matrices (used by
    /// optimizer unpacking and projection). Matrix count must match.
    pub fn with_matrices(&self, mats: Vec<DMatrix<f64>>) -> Result<Self, PsysError> {
        if mats.len() != self.terms.len() {
            return Err(PsysError::DimensionMismatch(format!(
                "expected {} matrices, got {}",
                self.terms.len(),
                mats.len()
            )));
        }
        let terms = self
            .terms
            .iter()
            .zip(mats)
            .map(|((c, _), m)| (c.clone(), m))
            .collect();
        Self::new(terms)
    }

    /// Block-embed this function's terms into a larger zero matrix at
    /// offset `(ro, co)`, merging with `other`'s terms placed at
    /// `(ro2, co2)`. Coefficients equal under [`ScalarCoeff::merge_eq`]
    /// share one term.
    fn block_union(
        shape: (usize, usize),
        parts: &[(&ParamSepMatrix, (usize, usize), f64)],
    ) -> ParamSepMatrix {
        let mut terms: Vec<(ScalarCoeff, DMatrix<f64>)> = Vec::new();
        for (psm, (ro, co), scale) in parts {
            for (coeff, m) in &psm.terms {
                let hit = terms.iter_mut().find(|(c, _)| c.merge_eq(coeff));
                match hit {
                    Some((_, acc)) => {
                        let mut view = acc.view_mut((*ro, *co), (m.nrows(), m.ncols()));
                        view += &(*scale * m);
                    }
                    None => {
                        let mut big = DMatrix::zeros(shape.0, shape.1);
                        big.view_mut((*ro, *co), (m.nrows(), m.ncols()))
                            .copy_from(&(*scale * m));
                        terms.push((coeff.clone(), big));
                    }
                }
            }
        }
        ParamSepMatrix {
            terms,
            nrows: shape.0,
            ncols: shape.1,
        }
    }
}

/// Parametric state-space system `(E, A, B, C)` over a parameter box.
///
/// `E, A` are `n×n`, `B` is `n×m`, `C` is `p_out×n`. The same type
/// represents full-order and reduced-order models.
#[derive(Debug, Clone)]
pub struct ParametricSystem {
    e: ParamSepMatrix,
    a: ParamSepMatrix,
    b: ParamSepMatrix,
    c: ParamSepMatrix,
    domain: ParamBox,
}

impl ParametricSystem {
    pub fn new(
        e: ParamSepMatrix,
        a: ParamSepMatrix,
        b: ParamSepMatrix,
        c: ParamSepMatrix,
        domain: ParamBox,
    ) -> Result<Self, PsysError> {
        let n = e.nrows();
        if e.ncols() != n || a.nrows() != n || a.ncols() != n {
            return Err(PsysError::DimensionMismatch(
                "E and A must be square of equal order".into(),
            ));
        }
        if b.nrows() != n {
            return Err(PsysError::DimensionMismatch(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(PsysError::DimensionMismatch(format!(
                "C has {} columns, expected {n}",
                c.ncols()
            )));
        }
        for psm in [&e, &a, &b, &c] {
            for (coeff, _) in psm.terms() {
                coeff.validate_on(&domain)?;
            }
        }
        Ok(Self { e, a, b, c, domain })
    }

    pub fn e(&self) -> &ParamSepMatrix {
        &self.e
    }

    pub fn a(&self) -> &ParamSepMatrix {
        &self.a
    }

    pub fn b(&self) -> &ParamSepMatrix {
        &self.b
    }

    pub fn c(&self) -> &ParamSepMatrix {
        &self.c
    }

    pub fn domain(&self) -> &ParamBox {
        &self.domain
    }

    /// State dimension n.
    pub fn order(&self) -> usize {
        self.e.nrows()
    }

    /// Input count m.
    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Output count p.
    pub fn num_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// True when all four matrix functions are parameter-independent.
    pub fn is_constant(&self) -> bool {
        self.e.is_constant() && self.a.is_constant() && self.b.is_constant() && self.c.is_constant()
    }

    fn check_inside(&self, p: &[f64]) -> Result<(), PsysError> {
        if !self.domain.contains(p) {
            return Err(PsysError::OutsideDomain { point: p.to_vec() });
        }
        Ok(())
    }

    /// Evaluate one of the four matrix functions at `p` (inside the box).
    pub fn eval_matrix(&self, m: &ParamSepMatrix, p: &[f64]) -> Result<DMatrix<f64>, PsysError> {
        self.check_inside(p)?;
        Ok(m.eval(p))
    }

    /// Transfer function value `H(s; p) = C(p)(sE(p) − A(p))⁻¹B(p)`.
    pub fn transfer_eval(&self, s: Complex64, p: &[f64]) -> Result<DMatrix<Complex64>, PsysError> {
        self.check_inside(p)?;
        let e = self.e.eval(p);
        let a = self.a.eval(p);
        let b = self.b.eval(p);
        let c = self.c.eval(p);
        let n = self.order();
        let shifted = DMatrix::from_fn(n, n, |i, j| s * e[(i, j)] - a[(i, j)]);
        let bz = b.map(|v| Complex64::new(v, 0.0));
        let x = shifted
            .lu()
            .solve(&bz)
            .ok_or(PsysError::SingularShift { shift: s })?;
        let cz = c.map(|v| Complex64::new(v, 0.0));
        Ok(cz * x)
    }

    /// Eigenvalues of the pencil `λE(p) − A(p)`, unordered.
    pub fn poles(&self, p: &[f64]) -> Result<Vec<Complex64>, PsysError> {
        self.check_inside(p)?;
        Ok(mateq::gen_eigvals(&self.a.eval(p), &self.e.eval(p))?)
    }

    /// Block error realization with transfer function `H − Ĥ`:
    /// block-diagonal `E_e`, `A_e`, stacked `B_e`, and `[C, −Ĉ]`,
    /// all kept parameter-separable over the union of coefficient
    /// functions.
    pub fn error_system(fom: &Self, rom: &Self) -> Result<Self, PsysError> {
        if fom.num_inputs() != rom.num_inputs() || fom.num_outputs() != rom.num_outputs() {
            return Err(PsysError::DimensionMismatch(
                "error system needs matching input/output counts".into(),
            ));
        }
        if fom.domain != rom.domain {
            return Err(PsysError::DimensionMismatch(
                "error system needs a shared parameter domain".into(),
            ));
        }
        let n = fom.order();
        let r = rom.order();
        let ne = n + r;
        let m = fom.num_inputs();
        let p_out = fom.num_outputs();
        let e = ParamSepMatrix::block_union(
            (ne, ne),
            &[(&fom.e, (0, 0), 1.0), (&rom.e, (n, n), 1.0)],
        );
        let a = ParamSepMatrix::block_union(
            (ne, ne),
            &[(&fom.a, (0, 0), 1.0), (&rom.a, (n, n), 1.0)],
        );
        let b = ParamSepMatrix::block_union(
            (ne, m),
            &[(&fom.b, (0, 0), 1.0), (&rom.b, (n, 0), 1.0)],
        );
        let c = ParamSepMatrix::block_union(
            (p_out, ne),
            &[(&fom.c, (0, 0), 1.0), (&rom.c, (0, n), -1.0)],
        );
        Self::new(e, a, b, c, fom.domain.clone())
    }
}

// ---------------------------------------------------------------------------
// JSON document layer
// ---------------------------------------------------------------------------

/// Registry resolving `custom` coefficient tags during deserialization.
#[derive(Default, Clone)]
pub struct CoeffRegistry {
    map: HashMap<String, CoeffFn>,
}

impl CoeffRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, tag: impl Into<String>, f: F)
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.map.insert(tag.into(), Arc::new(f));
    }

    fn resolve(&self, tag: &str) -> Option<CoeffFn> {
        self.map.get(tag).cloned()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CoeffDoc {
    Constant { value: f64 },
    Monomial { exponents: Vec<u32> },
    RationalShift {
        #[serde(default)]
        axis: usize,
        pole: f64,
    },
    Custom { tag: String },
}

#[derive(Serialize, Deserialize)]
struct TermDoc {
    coeff: CoeffDoc,
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DimsDoc {
    n: usize,
    m: usize,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct SystemDoc {
    dims: DimsDoc,
    domain: ParamBox,
    #[serde(rename = "E")]
    e: Vec<TermDoc>,
    #[serde(rename = "A")]
    a: Vec<TermDoc>,
    #[serde(rename = "B")]
    b: Vec<TermDoc>,
    #[serde(rename = "C")]
    c: Vec<TermDoc>,
}

fn coeff_to_doc(c: &ScalarCoeff) -> CoeffDoc {
    match c {
        ScalarCoeff::Constant(v) => CoeffDoc::Constant { value: *v },
        ScalarCoeff::Monomial(e) => CoeffDoc::Monomial {
            exponents: e.clone(),
        },
        ScalarCoeff::RationalShift { axis, pole } => CoeffDoc::RationalShift {
            axis: *axis,
            pole: *pole,
        },
        ScalarCoeff::Custom { tag, .. } => CoeffDoc::Custom { tag: tag.clone() },
    }
}

fn coeff_from_doc(doc: CoeffDoc, registry: &CoeffRegistry) -> Result<ScalarCoeff, PsysError> {
    Ok(match doc {
        CoeffDoc::Constant { value } => ScalarCoeff::Constant(value),
        CoeffDoc::Monomial { exponents } => ScalarCoeff::Monomial(exponents),
        CoeffDoc::RationalShift { axis, pole } => ScalarCoeff::RationalShift { axis, pole },
        CoeffDoc::Custom { tag } => {
            let f = registry
                .resolve(&tag)
                .ok_or_else(|| PsysError::UnknownCustomTag(tag.clone()))?;
            ScalarCoeff::Custom { tag, f }
        }
    })
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, PsysError> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(PsysError::Json("ragged or empty matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn psm_to_docs(m: &ParamSepMatrix) -> Vec<TermDoc> {
    m.terms()
        .iter()
        .map(|(c, mat)| TermDoc {
            coeff: coeff_to_doc(c),
            matrix: matrix_to_rows(mat),
        })
        .collect()
}

fn psm_from_docs(docs: Vec<TermDoc>, registry: &CoeffRegistry) -> Result<ParamSepMatrix, PsysError> {
    let mut terms = Vec::with_capacity(docs.len());
    for d in docs {
        terms.push((coeff_from_doc(d.coeff, registry)?, matrix_from_rows(&d.matrix)?));
    }
    ParamSepMatrix::new(terms)
}

impl ParametricSystem {
    pub fn to_json(&self) -> String {
        let doc = SystemDoc {
            dims: DimsDoc {
                n: self.order(),
                m: self.num_inputs(),
                p: self.num_outputs(),
            },
            domain: self.domain.clone(),
            e: psm_to_docs(&self.e),
            a: psm_to_docs(&self.a),
            b: psm_to_docs(&self.b),
            c: psm_to_docs(&self.c),
        };
        serde_json::to_string_pretty(&doc).expect("system serialization cannot fail")
    }

    pub fn from_json(json: &str, registry: &CoeffRegistry) -> Result<Self, PsysError> {
        let doc: SystemDoc =
            serde_json::from_str(json).map_err(|e| PsysError::Json(e.to_string()))?;
        let sys = Self::new(
            psm_from_docs(doc.e, registry)?,
            psm_from_docs(doc.a, registry)?,
            psm_from_docs(doc.b, registry)?,
            psm_from_docs(doc.c, registry)?,
            doc.domain,
        )?;
        if sys.order() != doc.dims.n
            || sys.num_inputs() != doc.dims.m
            || sys.num_outputs() != doc.dims.p
        {
            return Err(PsysError::Json(
                "declared dims disagree with matrix shapes".into(),
            ));
        }
        Ok(sys)
    }
}

/// Evaluate row-major data into a DVector (helper shared by tests and
/// generators).
pub fn dvec(data: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_system(a_val: f64) -> ParametricSystem {
        ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, a_val)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn eval_constant_term() {
        let m = ParamSepMatrix::constant(DMatrix::from_element(1, 1, 2.0));
        assert_eq!(m.eval(&[0.5])[(0, 0)], 2.0);
    }

    #[test]
    fn eval_monomial_vanishes_at_zero() {
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]);
        let m = ParamSepMatrix::new(vec![
            (ScalarCoeff::one(), a1.clone()),
            (ScalarCoeff::linear(0), a2),
        ])
        .unwrap();
        assert_eq!(m.eval(&[0.0]), a1);
    }

    #[test]
    fn eval_affine_in_p() {
        let m = ParamSepMatrix::new(vec![
            (ScalarCoeff::one(), DMatrix::from_element(1, 1, 1.0)),
            (ScalarCoeff::linear(0), DMatrix::from_element(1, 1, 3.0)),
        ])
        .unwrap();
        assert_relative_eq!(m.eval(&[2.0])[(0, 0)], 7.0);
    }

    #[test]
    fn eval_matrix_rejects_outside_point() {
        let sys = scalar_system(-1.0);
        let err = sys.eval_matrix(sys.a(), &[2.0]).unwrap_err();
        assert!(matches!(err, PsysError::OutsideDomain { .. }));
    }

    #[test]
    fn eval_is_linear_in_matrices() {
        let f = ScalarCoeff::linear(0);
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m2 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, 2.0]);
        let a = ParamSepMatrix::new(vec![(f.clone(), m1.clone())]).unwrap();
        let b = ParamSepMatrix::new(vec![(f.clone(), m2.clone())]).unwrap();
        let sum = ParamSepMatrix::new(vec![(f, &m1 + &m2)]).unwrap();
        for p in [0.1, 0.7, 1.3] {
            assert_relative_eq!(
                (a.eval(&[p]) + b.eval(&[p]) - sum.eval(&[p])).norm(),
                0.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn transfer_scalar_cases() {
        let sys = scalar_system(-1.0);
        let h0 = sys.transfer_eval(Complex64::new(0.0, 0.0), &[0.5]).unwrap();
        assert_relative_eq!(h0[(0, 0)].re, 1.0, epsilon = 1e-14);
        let hi = sys.transfer_eval(Complex64::new(0.0, 1.0), &[0.5]).unwrap();
        let expect = Complex64::new(1.0, 0.0) / Complex64::new(1.0, 1.0);
        assert_relative_eq!(hi[(0, 0)].re, expect.re, epsilon = 1e-14);
        assert_relative_eq!(hi[(0, 0)].im, expect.im, epsilon = 1e-14);
    }

    #[test]
    fn transfer_diagonal_sum() {
        let sys = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(2, 2)),
            ParamSepMatrix::constant(DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0])),
            ParamSepMatrix::constant(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])),
            ParamSepMatrix::constant(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let h = sys.transfer_eval(Complex64::new(0.0, 0.0), &[0.5]).unwrap();
        assert_relative_eq!(h[(0, 0)].re, 1.5, epsilon = 1e-14);
    }

    #[test]
    fn error_system_blocks_scalar() {
        let fom = scalar_system(-1.0);
        let rom = scalar_system(-2.0);
        let err = ParametricSystem::error_system(&fom, &rom).unwrap();
        let p = [0.3];
        assert_eq!(err.e().eval(&p), DMatrix::identity(2, 2));
        assert_eq!(
            err.a().eval(&p),
            DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0])
        );
        assert_eq!(err.b().eval(&p), DMatrix::from_column_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(err.c().eval(&p), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    }

    #[test]
    fn error_system_of_identical_systems_is_zero_transfer() {
        let fom = scalar_system(-1.0);
        let err = ParametricSystem::error_system(&fom, &fom.clone()).unwrap();
        for (s, p) in [
            (Complex64::new(0.0, 0.0), 0.2),
            (Complex64::new(0.0, 2.0), 0.5),
            (Complex64::new(1.0, -1.0), 0.9),
        ] {
            let h = err.transfer_eval(s, &[p]).unwrap();
            assert!(h[(0, 0)].norm() < 1e-14);
        }
    }

    #[test]
    fn error_system_term_bookkeeping() {
        // FOM with A = A₁ + p·A₂ against a constant ROM: two terms on the
        // (1,1) block, one on (2,2), merged through the shared constant.
        let fom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::one(), DMatrix::from_element(1, 1, -1.0)),
                (ScalarCoeff::linear(0), DMatrix::from_element(1, 1, -0.5)),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let rom = scalar_system(-2.0);
        let err = ParametricSystem::error_system(&fom, &rom).unwrap();
        assert_eq!(err.a().num_terms(), 2);
        let at = err.a().eval(&[1.0]);
        assert_relative_eq!(at[(0, 0)], -1.5, epsilon = 1e-15);
        assert_relative_eq!(at[(1, 1)], -2.0, epsilon = 1e-15);
        assert_relative_eq!(at[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn error_transfer_is_difference_of_transfers() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a_fom = -(DMatrix::identity(n, n) * 2.0 + (&g * g.transpose()) / n as f64);
        let fom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(n, n)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::one(), a_fom),
                (
                    ScalarCoeff::linear(0),
                    -DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 0.1 * (i as f64 + 1.0))),
                ),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>())),
            ParamSepMatrix::constant(DMatrix::from_fn(1, n, |_, _| rng.random::<f64>())),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let rom = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(2, 2)),
            ParamSepMatrix::constant(DMatrix::from_diagonal(&nalgebra::dvector![-0.7, -1.9])),
            ParamSepMatrix::constant(DMatrix::from_fn(2, 1, |_, _| rng.random::<f64>())),
            ParamSepMatrix::constant(DMatrix::from_fn(1, 2, |_, _| rng.random::<f64>())),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let err = ParametricSystem::error_system(&fom, &rom).unwrap();
        for (s, p) in [
            (Complex64::new(0.0, 0.3), 0.25),
            (Complex64::new(0.5, -2.0), 0.8),
        ] {
            let lhs = err.transfer_eval(s, &[p]).unwrap()[(0, 0)];
            let rhs = fom.transfer_eval(s, &[p]).unwrap()[(0, 0)]
                - rom.transfer_eval(s, &[p]).unwrap()[(0, 0)];
            assert!((lhs - rhs).norm() <= 1e-12 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn error_system_poles_are_union() {
        let fom = scalar_system(-1.0);
        let rom = scalar_system(-2.0);
        let err = ParametricSystem::error_system(&fom, &rom).unwrap();
        let mut poles: Vec<f64> = err.poles(&[0.5]).unwrap().iter().map(|c| c.re).collect();
        poles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(poles[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(poles[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rational_shift_pole_must_avoid_box() {
        let coeff = ScalarCoeff::RationalShift { axis: 0, pole: 0.5 };
        let m = ParamSepMatrix::new(vec![(coeff, DMatrix::from_element(1, 1, 1.0))]).unwrap();
        let err = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, -1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            m,
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, PsysError::PoleInsideBox { .. }));
    }

    #[test]
    fn json_round_trip() {
        let sys = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(2, 2)),
            ParamSepMatrix::new(vec![
                (ScalarCoeff::one(), DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0])),
                (ScalarCoeff::linear(0), -DMatrix::identity(2, 2)),
            ])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_column_slice(2, 1, &[1.0, 0.5])),
            ParamSepMatrix::constant(DMatrix::from_row_slice(1, 2, &[1.0, -1.0])),
            ParamBox::interval(0.1, 2.0).unwrap(),
        )
        .unwrap();
        let json = sys.to_json();
        let back = ParametricSystem::from_json(&json, &CoeffRegistry::new()).unwrap();
        let p = [0.77];
        assert_eq!(sys.a().eval(&p), back.a().eval(&p));
        assert_eq!(sys.b().eval(&p), back.b().eval(&p));
    }

    #[test]
    fn json_custom_requires_registration() {
        let sys = ParametricSystem::new(
            ParamSepMatrix::constant(DMatrix::identity(1, 1)),
            ParamSepMatrix::new(vec![(
                ScalarCoeff::custom("damping", |p: &[f64]| -p[0].exp()),
                DMatrix::from_element(1, 1, 1.0),
            )])
            .unwrap(),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamSepMatrix::constant(DMatrix::from_element(1, 1, 1.0)),
            ParamBox::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let json = sys.to_json();
        assert!(matches!(
            ParametricSystem::from_json(&json, &CoeffRegistry::new()),
            Err(PsysError::UnknownCustomTag(_))
        ));
        let mut reg = CoeffRegistry::new();
        reg.register("damping", |p: &[f64]| -p[0].exp());
        let back = ParametricSystem::from_json(&json, &reg).unwrap();
        assert_relative_eq!(back.a().eval(&[0.5])[(0, 0)], -(0.5f64.exp()), epsilon = 1e-15);
    }
}
