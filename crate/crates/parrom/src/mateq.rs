//! Dense solvers for the generalized Lyapunov and mixed Sylvester equations.
//!
//! Sign conventions:
//! - [`solve_lyap`] solves `A X Eᵀ + E X Aᵀ + R = 0` for symmetric `R`;
//!   the transposed (observability) variant is obtained by passing `Aᵀ`, `Eᵀ`.
//! - [`solve_sylv`] solves `A X Fᵀ + E X Gᵀ + M = 0` for the tall `n×r`
//!   unknown, where `(G, F)` is the small reduced-order pencil.
//!
//! Both solvers reduce the E-side to standard form through an LU
//! factorization (the pencils are assumed to have invertible E matrices)
//! and then run a real Schur decomposition: of `E⁻¹A` for the Lyapunov
//! case, of the small `r×r` matrix `Gᵀ F⁻ᵀ` for the Sylvester case. The
//! Sylvester back-substitution solves one shifted `n×n` system per real
//! eigenvalue and one coupled `2n×2n` system per complex pair, so no
//! complex arithmetic is needed.

use nalgebra::{DMatrix, Dyn, Schur, LU};
use num_complex::Complex64;
use thiserror::Error;

/// Failures surfaced by the dense matrix-equation solvers.
///
/// Callers in the optimization path map any of these to an infinite
/// objective value instead of propagating them.
#[derive(Debug, Error)]
pub enum MatEqError {
    #[error("matrix dimensions are inconsistent: {0}")]
    DimensionMismatch(String),
    #[error("E factor is singular to working precision (rcond ≈ {rcond:.3e})")]
    SingularE { rcond: f64 },
    #[error("shifted system singular near shift {shift} (pencil spectra overlap?)")]
    SingularShift { shift: Complex64 },
    #[error("real Schur iteration did not converge")]
    SchurFailed,
    #[error("solution contains non-finite entries")]
    NonFinite,
}

/// rcond below this is reported as a hard error.
const RCOND_SINGULAR: f64 = 1e-15;
/// rcond below this only triggers a warning.
const RCOND_WARN: f64 = 1e-12;

fn lu_checked(e: &DMatrix<f64>, what: &str) -> Result<(LU<f64, Dyn, Dyn>, f64), MatEqError> {
    let lu = e.clone().lu();
    let u = lu.u();
    let n = u.nrows();
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..n {
        let d = u[(i, i)].abs();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let rcond = if dmax > 0.0 { dmin / dmax } else { 0.0 };
    if !rcond.is_finite() || rcond < RCOND_SINGULAR {
        return Err(MatEqError::SingularE { rcond });
    }
    if rcond < RCOND_WARN {
        log::warn!("{what}: ill-conditioned E factor, rcond ≈ {rcond:.3e}");
    }
    Ok((lu, rcond))
}

fn real_schur(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), MatEqError> {
    let n = m.nrows();
    let schur = Schur::try_new(m, f64::EPSILON, 200 * n.max(8)).ok_or(MatEqError::SchurFailed)?;
    // unpack returns (Q, T) with M = Q T Qᵀ
    Ok(schur.unpack())
}

/// Split the quasi-upper-triangular `T` into 1×1 and 2×2 diagonal blocks.
fn schur_block_sizes(t: &DMatrix<f64>) -> Vec<usize> {
    let n = t.nrows();
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let coupled = i + 1 < n && {
            let sub = t[(i + 1, i)].abs();
            sub > f64::EPSILON * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs() + 1.0)
        };
        if coupled {
            sizes.push(2);
            i += 2;
        } else {
            sizes.push(1);
            i += 1;
        }
    }
    sizes
}

fn eigvals_from_schur(t: &DMatrix<f64>) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(t.nrows());
    let mut i = 0;
    for size in schur_block_sizes(t) {
        if size == 1 {
            out.push(Complex64::new(t[(i, i)], 0.0));
        } else {
            let (a, b) = (t[(i, i)], t[(i, i + 1)]);
            let (c, d) = (t[(i + 1, i)], t[(i + 1, i + 1)]);
            let mid = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc < 0.0 {
                let im = (-disc).sqrt();
                out.push(Complex64::new(mid, im));
                out.push(Complex64::new(mid, -im));
            } else {
                let rt = disc.sqrt();
                out.push(Complex64::new(mid + rt, 0.0));
                out.push(Complex64::new(mid - rt, 0.0));
            }
        }
        i += size;
    }
    out
}

/// Eigenvalues of a general real square matrix.
pub fn eigvals(m: &DMatrix<f64>) -> Result<Vec<Complex64>, MatEqError> {
    let (_, t) = real_schur(m.clone())?;
    Ok(eigvals_from_schur(&t))
}

/// Eigenvalues of the matrix pencil `λE − A`, i.e. of `E⁻¹A`.
pub fn gen_eigvals(a: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<Vec<Complex64>, MatEqError> {
    let n = a.nrows();
    if a.ncols() != n || e.nrows() != n || e.ncols() != n {
        return Err(MatEqError::DimensionMismatch(format!(
            "gen_eigvals: A is {}×{}, E is {}×{}",
            a.nrows(),
            a.ncols(),
            e.nrows(),
            e.ncols()
        )));
    }
    let (elu, _) = lu_checked(e, "gen_eigvals")?;
    let f = elu.solve(a).ok_or(MatEqError::SingularE { rcond: 0.0 })?;
    eigvals(&f)
}

/// Solve the generalized continuous Lyapunov equation
/// `A X Eᵀ + E X Aᵀ + R = 0`.
///
/// The result is symmetrized before it is returned. The caller is
/// responsible for the solvability condition (no mirrored eigenvalue
/// pairs in the pencil, e.g. a stable pencil).
pub fn solve_lyap(
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MatEqError> {
    let n = a.nrows();
    if a.ncols() != n || e.nrows() != n || e.ncols() != n || rhs.nrows() != n || rhs.ncols() != n {
        return Err(MatEqError::DimensionMismatch(
            "solve_lyap: A, E, R must all be n×n".into(),
        ));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (elu, _) = lu_checked(e, "solve_lyap")?;
    let f = elu.solve(a).ok_or(MatEqError::SingularE { rcond: 0.0 })?;
    // S = E⁻¹ R E⁻ᵀ
    let tmp = elu.solve(rhs).ok_or(MatEqError::SingularE { rcond: 0.0 })?;
    let s = elu
        .solve(&tmp.transpose())
        .ok_or(MatEqError::SingularE { rcond: 0.0 })?
        .transpose();
    let (u, t) = real_schur(f)?;
    let s_hat = u.transpose() * s * &u;
    let y = lyap_schur(&t, &s_hat)?;
    let mut x = &u * y * u.transpose();
    let xt = x.transpose();
    x = 0.5 * (x + xt);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatEqError::NonFinite);
    }
    Ok(x)
}

/// Solve `T Y + Y Tᵀ + S = 0` for quasi-upper-triangular `T`.
fn lyap_schur(t: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>, MatEqError> {
    let n = t.nrows();
    let sizes = schur_block_sizes(t);
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &sz in &sizes {
        offsets.push(off);
        off += sz;
    }
    let mut y = DMatrix::zeros(n, n);
    // Dependencies point to blocks with larger row or column index,
    // so sweep from the bottom-right corner up.
    for bi in (0..sizes.len()).rev() {
        let (i0, ni) = (offsets[bi], sizes[bi]);
        let i1 = i0 + ni;
        for bj in (0..sizes.len()).rev() {
            let (j0, nj) = (offsets[bj], sizes[bj]);
            let j1 = j0 + nj;
            let mut rhs = s.view((i0, j0), (ni, nj)).clone_owned();
            if i1 < n {
                rhs += t.view((i0, i1), (ni, n - i1)) * y.view((i1, j0), (n - i1, nj));
            }
            if j1 < n {
                rhs += y.view((i0, j1), (ni, n - j1)) * t.view((j0, j1), (nj, n - j1)).transpose();
            }
            // T_II Y_IJ + Y_IJ T_JJᵀ = −rhs, via the small Kronecker system
            let t_ii = t.view((i0, i0), (ni, ni)).clone_owned();
            let t_jj = t.view((j0, j0), (nj, nj)).clone_owned();
            let op = DMatrix::identity(nj, nj).kronecker(&t_ii)
                + t_jj.kronecker(&DMatrix::identity(ni, ni));
            let vec_rhs = nalgebra::DVector::from_column_slice(rhs.as_slice());
            let sol = op.lu().solve(&(-vec_rhs)).ok_or(MatEqError::SingularShift {
                shift: Complex64::new(t[(i0, i0)], 0.0),
            })?;
            y.view_mut((i0, j0), (ni, nj))
                .copy_from(&DMatrix::from_column_slice(ni, nj, sol.as_slice()));
        }
    }
    Ok(y)
}

/// Solve the mixed Sylvester equation `A X Fᵀ + E X Gᵀ + M = 0` where
/// `A, E` are `n×n`, `G, F` are `r×r` and `M` is `n×r`.
///
/// Works by a real Schur reduction of the small matrix `Gᵀ F⁻ᵀ` followed
/// by back-substitution over shifted `n×n` linear systems (`2n×2n` for
/// complex-pair blocks).
pub fn solve_sylv(
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MatEqError> {
    let n = a.nrows();
    let r = g.nrows();
    if a.ncols() != n || e.nrows() != n || e.ncols() != n {
        return Err(MatEqError::DimensionMismatch(
            "solve_sylv: A and E must be square with equal size".into(),
        ));
    }
    if g.ncols() != r || f.nrows() != r || f.ncols() != r {
        return Err(MatEqError::DimensionMismatch(
            "solve_sylv: G and F must be square with equal size".into(),
        ));
    }
    if m.nrows() != n || m.ncols() != r {
        return Err(MatEqError::DimensionMismatch(format!(
            "solve_sylv: M must be {n}×{r}, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if r == 0 || n == 0 {
        return Ok(DMatrix::zeros(n, r));
    }
    let (flu, _) = lu_checked(f, "solve_sylv")?;
    // W = F⁻¹ G, small side reduces to A X + E X Wᵀ + M F⁻ᵀ = 0
    let w = flu.solve(g).ok_or(MatEqError::SingularE { rcond: 0.0 })?;
    let mt = flu
        .solve(&m.transpose())
        .ok_or(MatEqError::SingularE { rcond: 0.0 })?;
    let m_tilde = mt.transpose();
    let (u, t) = real_schur(w.transpose())?;
    let c = m_tilde * &u;
    let mut y = DMatrix::zeros(n, r);
    let mut j = 0;
    while j < r {
        let coupled = j + 1 < r && {
            let sub = t[(j + 1, j)].abs();
            sub > f64::EPSILON * (t[(j, j)].abs() + t[(j + 1, j + 1)].abs() + 1.0)
        };
        if !coupled {
            let mut rhs = c.column(j).clone_owned();
            if j > 0 {
                rhs += e * (y.columns(0, j) * t.view((0, j), (j, 1)));
            }
            let shifted = a + t[(j, j)] * e;
            let col = shifted.lu().solve(&(-rhs)).ok_or(MatEqError::SingularShift {
                shift: Complex64::new(t[(j, j)], 0.0),
            })?;
            y.column_mut(j).copy_from(&col);
            j += 1;
        } else {
            let mut rhs0 = c.column(j).clone_owned();
            let mut rhs1 = c.column(j + 1).clone_owned();
            if j > 0 {
                rhs0 += e * (y.columns(0, j) * t.view((0, j), (j, 1)));
                rhs1 += e * (y.columns(0, j) * t.view((0, j + 1), (j, 1)));
            }
            let mut k = DMatrix::zeros(2 * n, 2 * n);
            k.view_mut((0, 0), (n, n)).copy_from(&(a + t[(j, j)] * e));
            k.view_mut((0, n), (n, n)).copy_from(&(t[(j + 1, j)] * e));
            k.view_mut((n, 0), (n, n)).copy_from(&(t[(j, j + 1)] * e));
            k.view_mut((n, n), (n, n))
                .copy_from(&(a + t[(j + 1, j + 1)] * e));
            let mut rhs = nalgebra::DVector::zeros(2 * n);
            rhs.rows_mut(0, n).copy_from(&rhs0);
            rhs.rows_mut(n, n).copy_from(&rhs1);
            let sol = k.lu().solve(&(-rhs)).ok_or(MatEqError::SingularShift {
                shift: Complex64::new(t[(j, j)], t[(j, j + 1)].abs().sqrt()),
            })?;
            y.column_mut(j).copy_from(&sol.rows(0, n));
            y.column_mut(j + 1).copy_from(&sol.rows(n, n));
            j += 2;
        }
    }
    let x = y * u.transpose();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatEqError::NonFinite);
    }
    Ok(x)
}

/// Frobenius norm of the Lyapunov residual `A X Eᵀ + E X Aᵀ + R`.
pub fn lyap_residual(
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
    x: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> f64 {
    (a * x * e.transpose() + e * x * a.transpose() + rhs).norm()
}

/// Frobenius norm of the Sylvester residual `A X Fᵀ + E X Gᵀ + M`.
pub fn sylv_residual(
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f: &DMatrix<f64>,
    x: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> f64 {
    (a * x * f.transpose() + e * x * g.transpose() + m).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        // E = I + G Gᵀ/n is SPD, A has negative definite symmetric part,
        // so the pencil (A, E) is asymptotically stable.
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let e = DMatrix::identity(n, n) + (&g * g.transpose()) / n as f64;
        let h = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let s = DMatrix::from_fn(n, n, |_, _| 2.0 * (rng.random::<f64>() - 0.5));
        let a = -(DMatrix::identity(n, n) + (&h * h.transpose()) / n as f64)
            + 0.5 * (&s - s.transpose());
        (a, e)
    }

    #[test]
    fn lyap_scalar() {
        // -2x - 2x + 1 = 0 → x = 0.25
        let a = DMatrix::from_element(1, 1, -2.0);
        let e = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let x = solve_lyap(&a, &e, &r).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn lyap_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0]);
        let e = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let x = solve_lyap(&a, &e, &r).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(x[(1, 1)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(x[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn lyap_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [3usize, 8] {
            let (a, e) = random_stable(n, &mut rng);
            let r0 = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let r = &r0 + r0.transpose();
            let x = solve_lyap(&a, &e, &r).unwrap();
            // vec form: (E⊗A + A⊗E) vec(X) = −vec(R)
            let op = e.kronecker(&a) + a.kronecker(&e);
            let vr = nalgebra::DVector::from_column_slice(r.as_slice());
            let vx = op.lu().solve(&(-vr)).unwrap();
            let x_oracle = DMatrix::from_column_slice(n, n, vx.as_slice());
            assert!((&x - &x_oracle).norm() <= 1e-9 * x_oracle.norm().max(1e-30));
            let scale = a.norm() * x.norm() * e.norm() + r.norm();
            assert!(lyap_residual(&a, &e, &x, &r) <= 1e-10 * scale);
            // symmetric exactly after post-symmetrization
            assert_eq!(x, x.transpose());
        }
    }

    #[test]
    fn lyap_gramian_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, e) = random_stable(6, &mut rng);
        let b = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>() - 0.5);
        let x = solve_lyap(&a, &e, &(&b * b.transpose())).unwrap();
        let eig = x.clone().symmetric_eigen().eigenvalues;
        let xnorm = x.norm();
        assert!(eig.iter().all(|&l| l >= -1e-10 * xnorm));
    }

    #[test]
    fn sylv_scalar() {
        // -x - 2x + 3 = 0 → x = 1
        let a = DMatrix::from_element(1, 1, -1.0);
        let e = DMatrix::from_element(1, 1, 1.0);
        let g = DMatrix::from_element(1, 1, -2.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let m = DMatrix::from_element(1, 1, 3.0);
        let x = solve_sylv(&a, &e, &g, &f, &m).unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn sylv_zero_rhs() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -3.0]);
        let e = DMatrix::identity(2, 2);
        let g = DMatrix::from_element(1, 1, -2.0);
        let f = DMatrix::from_element(1, 1, 1.0);
        let m = DMatrix::zeros(2, 1);
        let x = solve_sylv(&a, &e, &g, &f, &m).unwrap();
        assert_eq!(x, DMatrix::zeros(2, 1));
    }

    #[test]
    fn sylv_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (n, r) in [(5usize, 2usize), (10, 3), (7, 4)] {
            let (a, e) = random_stable(n, &mut rng);
            let (g, f) = random_stable(r, &mut rng);
            let m = DMatrix::from_fn(n, r, |_, _| rng.random::<f64>() - 0.5);
            let x = solve_sylv(&a, &e, &g, &f, &m).unwrap();
            // vec form: (F⊗A + G⊗E) vec(X) = −vec(M)
            let op = f.kronecker(&a) + g.kronecker(&e);
            let vm = nalgebra::DVector::from_column_slice(m.as_slice());
            let vx = op.lu().solve(&(-vm)).unwrap();
            let x_oracle = DMatrix::from_column_slice(n, r, vx.as_slice());
            assert!((&x - &x_oracle).norm() <= 1e-9 * x_oracle.norm().max(1e-30));
            let scale = a.norm() * x.norm() * f.norm() + e.norm() * x.norm() * g.norm() + m.norm();
            assert!(sylv_residual(&a, &e, &g, &f, &x, &m) <= 1e-10 * scale);
        }
    }

    #[test]
    fn sylv_complex_pair_small_side() {
        // small pencil with a genuine complex conjugate pair exercises the
        // coupled 2n×2n branch
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (a, e) = random_stable(6, &mut rng);
        let g = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, -5.0, -1.0]);
        let f = DMatrix::identity(2, 2);
        let m = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>() - 0.5);
        let x = solve_sylv(&a, &e, &g, &f, &m).unwrap();
        let scale = a.norm() * x.norm() + e.norm() * x.norm() * g.norm() + m.norm();
        assert!(sylv_residual(&a, &e, &g, &f, &x, &m) <= 1e-10 * scale);
    }

    #[test]
    fn gen_eigvals_diagonal_pencil() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-2.0]);
        let e = DMatrix::from_diagonal(&nalgebra::dvector![2.0]);
        let ev = gen_eigvals(&a, &e).unwrap();
        assert_relative_eq!(ev[0].re, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn gen_eigvals_rotation_block() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 10.0, -10.0, -1.0]);
        let e = DMatrix::identity(2, 2);
        let mut ev = gen_eigvals(&a, &e).unwrap();
        ev.sort_by(|x, y| x.im.partial_cmp(&y.im).unwrap());
        assert_relative_eq!(ev[0].re, -1.0, epsilon = 1e-12);
        assert_relative_eq!(ev[0].im, -10.0, epsilon = 1e-12);
        assert_relative_eq!(ev[1].im, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn gen_eigvals_rejects_singular_e() {
        let a = DMatrix::identity(2, 2);
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            gen_eigvals(&a, &e),
            Err(MatEqError::SingularE { .. })
        ));
    }

    #[test]
    fn eigvals_match_characteristic_roots() {
        // 5×5 companion matrix of a polynomial with known roots
        let roots = [-1.0, -2.0, -3.5, -0.25, -4.0];
        let mut poly = vec![1.0];
        for r in roots {
            let mut next = vec![0.0; poly.len() + 1];
            for (i, &c) in poly.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * r;
            }
            poly = next;
        }
        let n = 5;
        let mut comp = DMatrix::zeros(n, n);
        for i in 1..n {
            comp[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            comp[(0, i)] = -poly[i + 1];
        }
        let mut ev: Vec<f64> = eigvals(&comp).unwrap().iter().map(|c| c.re).collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = roots.to_vec();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in ev.iter().zip(expected.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-8);
        }
    }
}
