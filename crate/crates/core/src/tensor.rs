//! Dense third-order tensors and the small amount of matrix algebra the
//! factorization solver needs.
//!
//! Both [`Tensor3`] and [`Mat`] are column-major: element `(i1, i2, i3)` of a
//! tensor with dims `(d1, d2, d3)` lives at `i1 + d1*i2 + d1*d2*i3`, and
//! element `(r, c)` of a matrix lives at `r + rows*c`.
//!
//! Unfoldings follow the Kolda convention: the mode-n unfolding has `d_n`
//! rows and the remaining indices enumerate columns with the lower mode
//! varying fastest. With this convention
//!
//! ```text
//! unfold(C x1 Q1 x2 Q2 x3 Q3, 1) = Q1 * unfold(C, 1) * kron(Q3, Q2)^T
//! unfold(C x1 Q1 x2 Q2 x3 Q3, 2) = Q2 * unfold(C, 2) * kron(Q3, Q1)^T
//! unfold(C x1 Q1 x2 Q2 x3 Q3, 3) = Q3 * unfold(C, 3) * kron(Q2, Q1)^T
//! ```


use crate::error::{NlctfError, Result};

/// A tensor mode. The solver works on third-order tensors only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// Zero-based index of the mode.
    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    /// Mode from a one-based number (1, 2 or 3).
    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(NlctfError::Config(format!("tensor mode must be 1, 2 or 3, got {n}"))),
        }
    }

    /// The two other modes, in increasing order.
    pub fn others(self) -> [Mode; 2] {
        match self {
            Mode::One => [Mode::Two, Mode::Three],
            Mode::Two => [Mode::One, Mode::Three],
            Mode::Three => [Mode::One, Mode::Two],
        }
    }
}

/// Dense column-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i + n * i] = 1.0;
        }
        m
    }

    /// Build from column-major data.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NlctfError::Dimension(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from a closure evaluated at every `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r + self.rows * c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r + self.rows * c] = v;
    }

    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(NlctfError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm_nn(self.rows, self.cols, other.cols, &self.data, &other.data, &mut out.data);
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(NlctfError::Dimension(format!(
                "matmul_t {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        for k in 0..self.cols {
            let a = self.col(k);
            let b = other.col(k);
            for (j, &bjk) in b.iter().enumerate() {
                if bjk == 0.0 {
                    continue;
                }
                let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
                for (d, &aik) in dst.iter_mut().zip(a) {
                    *d += aik * bjk;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(NlctfError::Dimension(format!(
                "t_matmul ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat::from_fn(self.cols, other.cols, |i, j| {
            dot(self.col(i), other.col(j))
        }))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `<self, other>`.
    pub fn inner(&self, other: &Mat) -> f64 {
        dot(&self.data, &other.data)
    }

    /// `||Q^T Q - I||_F`, used to check column orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.t_matmul(self).expect("square gram");
        let mut acc = 0.0;
        for c in 0..g.cols {
            for r in 0..g.rows {
                let e = g.get(r, c) - if r == c { 1.0 } else { 0.0 };
                acc += e * e;
            }
        }
        acc.sqrt()
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |r, c| self.data[c * self.rows + r])
    }

    fn from_faer(m: faer::MatRef<'_, f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    Mat::from_fn(rows, cols, |r, c| {
        a.get(r / b.rows, c / b.cols) * b.get(r % b.rows, c % b.cols)
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column-major `out += a (m x k) * b (k x n)`.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for j in 0..n {
        let dst = &mut out[j * m..(j + 1) * m];
        for p in 0..k {
            let bpj = b[p + k * j];
            if bpj == 0.0 {
                continue;
            }
            let src = &a[p * m..(p + 1) * m];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * bpj;
            }
        }
    }
}

/// Dense third-order tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(NlctfError::Dimension(format!("tensor dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(NlctfError::Dimension(format!(
                "tensor {dims:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Contiguous frontal slice `[:, :, k]`.
    pub fn slice3(&self, k: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice3_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.dims[0] * self.dims[1];
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &Tensor3) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(NlctfError::Dimension(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.check_same(other)?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Tensor3) -> Result<()> {
        self.check_same(other)?;
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d += a * s;
        }
        Ok(())
    }
}

/// Shape of the mode-`mode` unfolding of a tensor with dims `dims`.
pub fn unfolded_shape(dims: [usize; 3], mode: Mode) -> (usize, usize) {
    let [d1, d2, d3] = dims;
    match mode {
        Mode::One => (d1, d2 * d3),
        Mode::Two => (d2, d1 * d3),
        Mode::Three => (d3, d1 * d2),
    }
}

/// Mode-n unfolding (matricization).
pub fn unfold(t: &Tensor3, mode: Mode) -> Mat {
    let [d1, d2, d3] = t.dims;
    match mode {
        // Column-major mode-1 unfolding shares the tensor layout.
        Mode::One => Mat {
            rows: d1,
            cols: d2 * d3,
            data: t.data.clone(),
        },
        Mode::Two => {
            let mut m = Mat::zeros(d2, d1 * d3);
            for k in 0..d3 {
                for j in 0..d2 {
                    for i in 0..d1 {
                        m.data[j + d2 * (i + d1 * k)] = t.data[i + d1 * (j + d2 * k)];
                    }
                }
            }
            m
        }
        Mode::Three => {
            let mut m = Mat::zeros(d3, d1 * d2);
            for k in 0..d3 {
                for j in 0..d2 {
                    for i in 0..d1 {
                        m.data[k + d3 * (i + d1 * j)] = t.data[i + d1 * (j + d2 * k)];
                    }
                }
            }
            m
        }
    }
}

/// Inverse of [`unfold`].
pub fn fold(m: &Mat, mode: Mode, dims: [usize; 3]) -> Result<Tensor3> {
    let (rows, cols) = unfolded_shape(dims, mode);
    if m.rows != rows || m.cols != cols {
        return Err(NlctfError::Dimension(format!(
            "cannot fold {}x{} matrix along mode {} into {dims:?} (expected {rows}x{cols})",
            m.rows,
            m.cols,
            mode.index() + 1
        )));
    }
    let [d1, d2, d3] = dims;
    let data = match mode {
        Mode::One => m.data.clone(),
        Mode::Two => {
            let mut data = vec![0.0; d1 * d2 * d3];
            for k in 0..d3 {
                for j in 0..d2 {
                    for i in 0..d1 {
                        data[i + d1 * (j + d2 * k)] = m.data[j + d2 * (i + d1 * k)];
                    }
                }
            }
            data
        }
        Mode::Three => {
            let mut data = vec![0.0; d1 * d2 * d3];
            for k in 0..d3 {
                for j in 0..d2 {
                    for i in 0..d1 {
                        data[i + d1 * (j + d2 * k)] = m.data[k + d3 * (i + d1 * j)];
                    }
                }
            }
            data
        }
    };
    Tensor3::from_vec(dims, data)
}

/// Mode-n product `t ×_n a`: every mode-n fiber of `t` is multiplied by `a`.
pub fn mode_product(t: &Tensor3, a: &Mat, mode: Mode) -> Result<Tensor3> {
    let [d1, d2, d3] = t.dims;
    let dn = t.dims[mode.index()];
    if a.cols != dn {
        return Err(NlctfError::Dimension(format!(
            "mode-{} product needs a matrix with {dn} columns, got {}x{}",
            mode.index() + 1,
            a.rows,
            a.cols
        )));
    }
    let r = a.rows;
    match mode {
        Mode::One => {
            let mut out = Tensor3::zeros([r, d2, d3]);
            gemm_nn(r, d1, d2 * d3, &a.data, &t.data, &mut out.data);
            Ok(out)
        }
        Mode::Two => {
            // Each frontal slice S (d1 x d2) becomes S * a^T (d1 x r).
            let mut out = Tensor3::zeros([d1, r, d3]);
            for k in 0..d3 {
                let src = t.slice3(k);
                let dst = out.slice3_mut(k);
                for q in 0..r {
                    let dcol = &mut dst[q * d1..(q + 1) * d1];
                    for j in 0..d2 {
                        let aqj = a.data[q + r * j];
                        if aqj == 0.0 {
                            continue;
                        }
                        let scol = &src[j * d1..(j + 1) * d1];
                        for (d, &s) in dcol.iter_mut().zip(scol) {
                            *d += aqj * s;
                        }
                    }
                }
            }
            Ok(out)
        }
        Mode::Three => {
            let mut out = Tensor3::zeros([d1, d2, r]);
            let n = d1 * d2;
            for q in 0..r {
                for k in 0..d3 {
                    let aqk = a.data[q + r * k];
                    if aqk == 0.0 {
                        continue;
                    }
                    let src = &t.data[k * n..(k + 1) * n];
                    let dst = &mut out.data[q * n..(q + 1) * n];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += aqk * s;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// `core ×1 q[0] ×2 q[1] ×3 q[2]`.
pub fn multi_mode_product(core: &Tensor3, q: &[Mat; 3]) -> Result<Tensor3> {
    let t = mode_product(core, &q[0], Mode::One)?;
    let t = mode_product(&t, &q[1], Mode::Two)?;
    mode_product(&t, &q[2], Mode::Three)
}

/// `t ×1 q[0]^T ×2 q[1]^T ×3 q[2]^T`, projecting onto the factor bases.
pub fn multi_mode_product_t(t: &Tensor3, q: &[Mat; 3]) -> Result<Tensor3> {
    let t = mode_product(t, &q[0].transpose(), Mode::One)?;
    let t = mode_product(&t, &q[1].transpose(), Mode::Two)?;
    mode_product(&t, &q[2].transpose(), Mode::Three)
}

/// Thin singular value decomposition `m = u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `rows x k` with orthonormal columns.
    pub u: Mat,
    /// `k` non-increasing, nonnegative singular values.
    pub s: Vec<f64>,
    /// `cols x k` with orthonormal columns.
    pub v: Mat,
}

impl ThinSvd {
    /// Rebuild `u * diag(values) * v^T` with replacement singular values.
    pub fn recompose_with(&self, values: &[f64]) -> Mat {
        let k = self.s.len();
        assert_eq!(values.len(), k);
        let mut scaled = self.u.clone();
        for (c, &sv) in values.iter().enumerate() {
            scaled.data[c * scaled.rows..(c + 1) * scaled.rows]
                .iter_mut()
                .for_each(|x| *x *= sv);
        }
        scaled.matmul_t(&self.v).expect("consistent svd shapes")
    }
}

fn faer_svd(a: faer::MatRef<'_, f64>) -> Result<(faer::Mat<f64>, Vec<f64>, faer::Mat<f64>)> {
    let svd = a
        .thin_svd()
        .map_err(|e| NlctfError::Numeric(format!("SVD of {}x{} matrix: {e:?}", a.nrows(), a.ncols())))?;
    let s = (0..a.nrows().min(a.ncols())).map(|i| svd.S()[i]).collect();
    Ok((svd.U().to_owned(), s, svd.V().to_owned()))
}

/// Unsorted thin SVD. Clearly rectangular matrices are first reduced to a
/// `k x k` triangle by QR, which is cheaper than bidiagonalizing the full
/// matrix.
fn raw_svd(m: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let a = m.to_faer();
    let (u, s, v) = if m.cols >= 2 * m.rows {
        // A^T = Q R, A = R^T Q^T, R^T = U S W^T  =>  V = Q W
        let qr = a.transpose().qr();
        let (u, s, w) = faer_svd(qr.thin_R().transpose())?;
        (u, s, qr.compute_thin_Q() * w)
    } else if m.rows >= 2 * m.cols {
        let qr = a.qr();
        let (w, s, v) = faer_svd(qr.thin_R())?;
        (qr.compute_thin_Q() * w, s, v)
    } else {
        faer_svd(a.as_ref())?
    };
    Ok((Mat::from_faer(u.as_ref()), s, Mat::from_faer(v.as_ref())))
}

/// Thin SVD with singular values sorted non-increasing and a fixed sign
/// convention: in every column of `u` the entry of largest magnitude is
/// nonnegative (first such entry on ties), with `v` flipped to match.
pub fn thin_svd(m: &Mat) -> Result<ThinSvd> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(NlctfError::Numeric(format!(
            "SVD input {}x{} has non-finite entries",
            m.rows, m.cols
        )));
    }
    let k = m.rows.min(m.cols);
    if k == 0 {
        return Err(NlctfError::Dimension("SVD of an empty matrix".into()));
    }
    let (mut u, mut s, mut v) = raw_svd(m)?;

    for c in 0..k {
        if s[c] < 0.0 {
            s[c] = -s[c];
            v.data[c * v.rows..(c + 1) * v.rows].iter_mut().for_each(|x| *x = -*x);
        }
    }
    // The backend sorts already; keep the ordering explicit anyway.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    if order.iter().enumerate().any(|(i, &o)| i != o) {
        let u0 = u.clone();
        let v0 = v.clone();
        let s0 = s.clone();
        for (dst, &src) in order.iter().enumerate() {
            s[dst] = s0[src];
            u.data[dst * u.rows..(dst + 1) * u.rows].copy_from_slice(u0.col(src));
            v.data[dst * v.rows..(dst + 1) * v.rows].copy_from_slice(v0.col(src));
        }
    }

    for c in 0..k {
        let col = u.col(c);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.data[c * u.rows..(c + 1) * u.rows].iter_mut().for_each(|x| *x = -*x);
            v.data[c * v.rows..(c + 1) * v.rows].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(ThinSvd { u, s, v })
}

/// Singular values only.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(NlctfError::Numeric("singular values of non-finite matrix".into()));
    }
    let mut s: Vec<f64> = m
        .to_faer()
        .singular_values()
        .map_err(|e| NlctfError::Numeric(format!("singular values: {e:?}")))?
        .into_iter()
        .map(f64::abs)
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Result of a full-rank higher-order SVD.
#[derive(Debug, Clone)]
pub struct HosvdFactors {
    pub core: Tensor3,
    /// Orthonormal factors; `q[n]` is `d_n x min(d_n, prod of other dims)`.
    pub q: [Mat; 3],
    /// Singular values of each mode unfolding, non-increasing.
    pub sigma: [Vec<f64>; 3],
}

impl HosvdFactors {
    pub fn reconstruct(&self) -> Result<Tensor3> {
        multi_mode_product(&self.core, &self.q)
    }
}

/// Full-rank higher-order SVD: factor `n` holds the left singular vectors of
/// the mode-n unfolding, and the core is the projection of `t` onto them.
pub fn hosvd(t: &Tensor3) -> Result<HosvdFactors> {
    if !t.is_finite() {
        return Err(NlctfError::Numeric("HOSVD input has non-finite entries".into()));
    }
    let mut q = Vec::with_capacity(3);
    let mut sigma: [Vec<f64>; 3] = Default::default();
    for mode in Mode::ALL {
        let svd = thin_svd(&unfold(t, mode))
            .map_err(|e| e.context(format!("HOSVD mode {}", mode.index() + 1)))?;
        q.push(svd.u);
        sigma[mode.index()] = svd.s;
    }
    let q: [Mat; 3] = q.try_into().expect("three factors");
    let core = multi_mode_product_t(t, &q)?;
    Ok(HosvdFactors { core, q, sigma })
}
