//! Dense and sparse kernels behind the layer implementations.
//!
//! Everything here is single-threaded and iterates in a fixed order, so
//! results are bit-reproducible for identical inputs.

/// C[m×n] = alpha * op(A) * op(B) + beta * C, row-major.
///
/// `a_trans` means A is stored (k×m) and used as its transpose; likewise
/// for B stored (n×k).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "A size");
    assert_eq!(b.len(), k * n, "B size");
    assert_eq!(c.len(), m * n, "C size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Out-of-place transpose of a row-major (rows×cols) matrix.
pub fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    // Blocked to keep both sides cache-friendly.
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Sparse row-major weight matrix; only the surviving (unmasked) entries.
#[derive(Clone, Debug)]
pub struct CsrWeights {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub vals: Vec<f64>,
}

impl CsrWeights {
    pub fn from_masked(weights: &[f64], mask: &[f64], rows: usize, cols: usize) -> Self {
        assert_eq!(weights.len(), rows * cols);
        assert_eq!(mask.len(), rows * cols);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for c in 0..cols {
                if mask[r * cols + c] != 0.0 {
                    col_idx.push(c as u32);
                    vals.push(weights[r * cols + c]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrWeights { rows, cols, row_ptr, col_idx, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// yT[o][:] = Σ_i w[o,i] · xT[i][:]  for feature-major activations
/// (xT is cols×batch, yT is rows×batch). Each output row is accumulated
/// in a local buffer so the inner loop stays in L1.
pub fn csr_forward_t(w: &CsrWeights, xt: &[f64], batch: usize, yt: &mut [f64]) {
    assert_eq!(xt.len(), w.cols * batch);
    assert_eq!(yt.len(), w.rows * batch);
    let mut acc = vec![0.0f64; batch];
    for o in 0..w.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for j in w.row_ptr[o]..w.row_ptr[o + 1] {
            let v = w.vals[j];
            let xrow = &xt[w.col_idx[j] as usize * batch..][..batch];
            for (a, x) in acc.iter_mut().zip(xrow) {
                *a += v * x;
            }
        }
        yt[o * batch..][..batch].copy_from_slice(&acc);
    }
}

/// dxT[i][:] += w[o,i] · dyT[o][:] — transpose-apply for the data gradient.
pub fn csr_backward_data_t(w: &CsrWeights, dyt: &[f64], batch: usize, dxt: &mut [f64]) {
    assert_eq!(dyt.len(), w.rows * batch);
    assert_eq!(dxt.len(), w.cols * batch);
    dxt.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..w.rows {
        let dyrow = &dyt[o * batch..][..batch];
        for j in w.row_ptr[o]..w.row_ptr[o + 1] {
            let v = w.vals[j];
            let dxrow = &mut dxt[w.col_idx[j] as usize * batch..][..batch];
            for (dx, dy) in dxrow.iter_mut().zip(dyrow) {
                *dx += v * dy;
            }
        }
    }
}

/// dW[o,i] = dot(dyT[o], xT[i]) at the surviving positions only; the dense
/// gradient buffer is zeroed first so masked positions report zero.
pub fn csr_backward_weight_t(
    w: &CsrWeights,
    dyt: &[f64],
    xt: &[f64],
    batch: usize,
    dw: &mut [f64],
) {
    assert_eq!(dw.len(), w.rows * w.cols);
    dw.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..w.rows {
        let dyrow = &dyt[o * batch..][..batch];
        for j in w.row_ptr[o]..w.row_ptr[o + 1] {
            let xrow = &xt[w.col_idx[j] as usize * batch..][..batch];
            let mut s = 0.0;
            for (dy, x) in dyrow.iter().zip(xrow) {
                s += dy * x;
            }
            dw[o * w.cols + w.col_idx[j] as usize] = s;
        }
    }
}
