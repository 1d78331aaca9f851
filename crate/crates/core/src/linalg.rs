//! Householder QR and the null-space machinery used for orthogonal re-initialization.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm2, Tensor};

/// Orthonormal basis of a null space, stored column-wise. May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpace {
    ambient: usize,
    columns: Vec<Vec<f64>>,
}

impl NullSpace {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Basis as an `[n, d]` tensor, or `None` when `d == 0`.
    pub fn to_tensor(&self) -> Option<Tensor> {
        let d = self.dim();
        if d == 0 {
            return None;
        }
        let mut t = Tensor::zeros(&[self.ambient, d]);
        for (j, col) in self.columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                t.set2(i, j, *v);
            }
        }
        Some(t)
    }

    /// Orthogonal projection of `v` onto the null space.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient];
        for col in &self.columns {
            let c = dot(col, v);
            crate::tensor::axpy(c, col, &mut out);
        }
        out
    }
}

/// Column-major working matrix for the in-place reflections.
struct Work {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Work {
    fn from_tensor(a: &Tensor) -> Self {
        let (m, n) = a.rows_cols();
        let cols = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
        Work { rows: m, cols }
    }

    fn from_transpose(a: &Tensor) -> Self {
        let (m, n) = a.rows_cols();
        Work {
            rows: n,
            cols: (0..m).map(|i| a.row(i).to_vec()).collect(),
        }
    }
}

/// Householder vector for `x`; returns `(v, alpha)` with `(I - 2vvᵀ)x = alpha·e₁`,
/// or `None` if `x` is already zero below its first entry and needs no reflection.
fn householder(x: &[f64]) -> Option<(Vec<f64>, f64)> {
    let nrm = norm2(x);
    if nrm == 0.0 {
        return None;
    }
    let alpha = if x[0] > 0.0 { -nrm } else { nrm };
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vn = norm2(&v);
    if vn == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|e| *e /= vn);
    Some((v, alpha))
}

/// Applies `I - 2vvᵀ` to the trailing `v.len()` entries of `col`.
fn reflect(v: &[f64], col: &mut [f64]) {
    let start = col.len() - v.len();
    let tail = &mut col[start..];
    let s = 2.0 * dot(v, tail);
    for (t, vi) in tail.iter_mut().zip(v) {
        *t -= s * vi;
    }
}

/// Accumulates the reflection into `q` (row-major `[m, m]`): `Q ← Q·(I - 2vvᵀ)` acting on columns `k..`.
fn accumulate(q: &mut [f64], m: usize, k: usize, v: &[f64]) {
    for i in 0..m {
        let row = &mut q[i * m + k..(i + 1) * m];
        let s = 2.0 * dot(row, v);
        for (r, vi) in row.iter_mut().zip(v) {
            *r -= s * vi;
        }
    }
}

/// Full Householder QR: `a = q·r` with `q` `[m, m]` orthogonal and `r` `[m, n]` upper-triangular.
pub fn qr_decompose(a: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.rank() != 2 {
        return Err(Error::dim("qr_decompose", format!("expected rank-2, got {:?}", a.shape())));
    }
    let mut w = Work::from_tensor(a);
    let m = w.rows;
    let n = w.cols.len();
    let mut q = Tensor::eye(m).into_data();
    for k in 0..n.min(m.saturating_sub(1)) {
        let Some((v, alpha)) = householder(&w.cols[k][k..]) else {
            continue;
        };
        for col in w.cols.iter_mut().skip(k + 1) {
            reflect(&v, col);
        }
        w.cols[k][k] = alpha;
        w.cols[k][k + 1..].fill(0.0);
        accumulate(&mut q, m, k, &v);
    }
    let mut r = Tensor::zeros(&[m, n]);
    for (j, col) in w.cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate().take(j + 1) {
            r.set2(i, j, *v);
        }
    }
    Ok((Tensor::new(&[m, m], q)?, r))
}

/// Column-pivoted Householder QR of `aᵀ`, returning the accumulated `Q` (row-major `[n, n]`)
/// and the numerical rank: the number of pivots whose remaining norm exceeded `tol`.
fn pivoted_qr_of_transpose(a: &Tensor, tol: f64) -> (Vec<f64>, usize) {
    let mut w = Work::from_transpose(a);
    let n = w.rows;
    let m = w.cols.len();
    let mut q = Tensor::eye(n).into_data();
    let mut rank = 0;
    for k in 0..n.min(m) {
        let (best, best_norm) = (k..m)
            .map(|j| (j, norm2(&w.cols[j][k..])))
            .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_norm <= tol {
            break;
        }
        w.cols.swap(k, best);
        rank = k + 1;
        if k + 1 == n {
            break;
        }
        let Some((v, alpha)) = householder(&w.cols[k][k..]) else {
            continue;
        };
        for col in w.cols.iter_mut().skip(k + 1) {
            reflect(&v, col);
        }
        w.cols[k][k] = alpha;
        w.cols[k][k + 1..].fill(0.0);
        accumulate(&mut q, n, k, &v);
    }
    (q, rank)
}

/// Largest row norm of `a`; the scale the default rank tolerance is relative to.
pub fn max_row_norm(a: &Tensor) -> f64 {
    let (m, _) = a.rows_cols();
    (0..m).map(|i| norm2(a.row(i))).fold(0.0, f64::max)
}

pub fn default_tolerance(a: &Tensor) -> f64 {
    let s = max_row_norm(a);
    if s > 0.0 {
        1e-10 * s
    } else {
        f64::MIN_POSITIVE
    }
}

/// Orthonormal basis of `{v : a·v = 0}` for `a` of shape `[m, n]`.
///
/// Directions whose pivot norm falls at or below `tol` count as rank-deficient;
/// `None` selects [`default_tolerance`].
pub fn null_space_basis(a: &Tensor, tol: Option<f64>) -> Result<NullSpace> {
    if a.rank() != 2 {
        return Err(Error::dim(
            "null_space_basis",
            format!("expected rank-2, got {:?}", a.shape()),
        ));
    }
    let tol = tol.unwrap_or_else(|| default_tolerance(a));
    let (_, n) = a.rows_cols();
    let (q, rank) = pivoted_qr_of_transpose(a, tol);
    let columns = (rank..n)
        .map(|j| (0..n).map(|i| q[i * n + j]).collect())
        .collect();
    Ok(NullSpace { ambient: n, columns })
}

/// Orthonormal basis of the row space of `a` (`[m, n]`), as `n`-vectors.
///
/// Rows left with a pivot norm at or below `tol` count as dependent.
pub fn row_space_basis(a: &Tensor, tol: f64) -> Result<Vec<Vec<f64>>> {
    if a.rank() != 2 {
        return Err(Error::dim(
            "row_space_basis",
            format!("expected rank-2, got {:?}", a.shape()),
        ));
    }
    let (_, n) = a.rows_cols();
    let (q, rank) = pivoted_qr_of_transpose(a, tol);
    Ok((0..rank).map(|j| (0..n).map(|i| q[i * n + j]).collect()).collect())
}

/// `v` minus its least-squares projection onto the row space of `a`.
pub fn residual_from_row_space(a: &Tensor, v: &[f64], tol: Option<f64>) -> Result<Vec<f64>> {
    let (_, n) = a.rows_cols();
    if v.len() != n {
        return Err(Error::dim(
            "residual_from_row_space",
            format!("vector of length {} against {:?}", v.len(), a.shape()),
        ));
    }
    let tol = tol.unwrap_or_else(|| default_tolerance(a));
    let (q, rank) = pivoted_qr_of_transpose(a, tol);
    let mut out = v.to_vec();
    for j in 0..rank {
        let col: Vec<f64> = (0..n).map(|i| q[i * n + j]).collect();
        let c = dot(&col, v);
        crate::tensor::axpy(-c, &col, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(&[m, n], (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check_qr(a: &Tensor) {
        let (q, r) = qr_decompose(a).unwrap();
        let (m, n) = a.rows_cols();
        let qtq = matmul(&q.transpose().unwrap(), &q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(m)) < 1e-10);
        assert!(matmul(&q, &r).unwrap().max_abs_diff(a) < 1e-10);
        for i in 0..m {
            for j in 0..n.min(i) {
                assert_eq!(r.at2(i, j), 0.0);
            }
        }
    }

    #[test]
    fn row_space_of_dependent_rows() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
        let b = row_space_basis(&a, 1e-12).unwrap();
        assert_eq!(b.len(), 2);
        for u in &b {
            assert!((norm2(u) - 1.0).abs() < 1e-12);
            assert!(u[2].abs() < 1e-12);
        }
        assert!(dot(&b[0], &b[1]).abs() < 1e-12);
    }

    #[test]
    fn qr_identity() {
        let (q, r) = qr_decompose(&Tensor::eye(3)).unwrap();
        for i in 0..3 {
            assert!((r.at2(i, i).abs() - 1.0).abs() < 1e-15);
            assert!((q.at2(i, i).abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn qr_rank_one_column() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let (_, r) = qr_decompose(&a).unwrap();
        assert!((r.at2(0, 0).abs() - 5.0).abs() < 1e-14);
        assert_eq!(r.at2(1, 1), 0.0);
        check_qr(&a);
    }

    #[test]
    fn qr_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_qr(&random(&mut rng, 8, 5));
        for _ in 0..40 {
            let m = rng.random_range(1..=64);
            let n = rng.random_range(1..=64);
            check_qr(&random(&mut rng, m, n));
        }
    }

    #[test]
    fn null_space_coordinate_case() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let ns = null_space_basis(&a, None).unwrap();
        assert_eq!(ns.dim(), 1);
        let v = &ns.columns()[0];
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!((v[2].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn null_space_full_rank_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ns = null_space_basis(&random(&mut rng, 6, 6), None).unwrap();
        assert!(ns.is_empty());
        assert!(ns.to_tensor().is_none());
    }

    #[test]
    fn null_space_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 3 x 5 matrix of rank 2: third row is a combination of the first two.
        let mut a = random(&mut rng, 3, 5);
        let combo: Vec<f64> = (0..5).map(|j| 0.3 * a.at2(0, j) - 1.7 * a.at2(1, j)).collect();
        a.row_mut(2).copy_from_slice(&combo);
        let ns = null_space_basis(&a, None).unwrap();
        assert_eq!(ns.dim(), 3);
        let basis = ns.to_tensor().unwrap();
        assert!(matmul(&a, &basis).unwrap().max_abs() < 1e-9);
        let gram = matmul(&basis.transpose().unwrap(), &basis).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(3)) < 1e-10);
    }

    #[test]
    fn residual_is_orthogonal_to_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 7);
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = residual_from_row_space(&a, &v, None).unwrap();
        for i in 0..3 {
            assert!(dot(a.row(i), &r).abs() < 1e-12);
        }
    }
}
