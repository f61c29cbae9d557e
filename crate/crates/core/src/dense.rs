//! Small dense linear-algebra helpers shared by the sampler and the estimators.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};

/// `C ← alpha·op(A)·op(B) + beta·C`, where `op` optionally transposes.
///
/// Thin wrapper over `matrixmultiply::dgemm` that works directly on strided
/// nalgebra views, so transposed operands cost nothing.
pub(crate) fn gemm(
    alpha: f64,
    a: DMatrixView<'_, f64>,
    trans_a: bool,
    b: DMatrixView<'_, f64>,
    trans_b: bool,
    beta: f64,
    c: &mut DMatrixViewMut<'_, f64>,
) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            *c *= beta;
        }
        return;
    }
    let (mut rsa, mut csa) = a.strides();
    if trans_a {
        std::mem::swap(&mut rsa, &mut csa);
    }
    let (mut rsb, mut csb) = b.strides();
    if trans_b {
        std::mem::swap(&mut rsb, &mut csb);
    }
    let (rsc, csc) = c.strides();
    // SAFETY: the shapes and strides come from live nalgebra views, which
    // guarantees every addressed element is in bounds; `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Ties keep the solver's order, so the result is deterministic for a given
/// input.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Largest absolute difference between `m` and its transpose, relative to the
/// largest entry.
pub(crate) fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// `(M + Mᵀ)/2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sines of the principal angles between the column spaces of two matrices
/// with orthonormal columns, largest first.
pub fn principal_angle_sines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    // Singular values of the residual (I − AAᵀ)B; accurate for small angles,
    // unlike √(1 − cos²).
    let resid = b - a * (a.transpose() * b);
    let mut out: Vec<f64> = resid.singular_values().iter().map(|&s| s.min(1.0)).collect();
    out.sort_by(|x, y| y.total_cmp(x));
    out
}

/// Serde adapter storing a matrix as a list of rows.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}
