//! Slice-level numeric kernels shared by the tape's forward and backward
//! rules. Everything here is row-major and allocation-light.

/// `c = op(a) · op(b)` (or `c += …` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` holds a row-major `k×m` matrix; with
/// `trans_b` the buffer `b` holds a row-major `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a grouped 1-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub length: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_length(&self) -> usize {
        (self.length + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Unfolds group `g` of `x` into a `(cin_g·k) × lout` column matrix.
    fn im2col(&self, x: &[f64], g: usize, col: &mut [f64]) {
        let (cg, k, lout) = (self.in_per_group(), self.kernel, self.out_length());
        let (l, s, p) = (self.length, self.stride, self.padding as isize);
        for c in 0..cg {
            let src = &x[(g * cg + c) * l..(g * cg + c + 1) * l];
            for j in 0..k {
                let row = &mut col[(c * k + j) * lout..(c * k + j + 1) * lout];
                for (t, out) in row.iter_mut().enumerate() {
                    let pos = (t * s) as isize + j as isize - p;
                    *out = if pos >= 0 && (pos as usize) < l {
                        src[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Scatters a column-matrix gradient back onto group `g` of `dx`.
    fn col2im(&self, dcol: &[f64], g: usize, dx: &mut [f64]) {
        let (cg, k, lout) = (self.in_per_group(), self.kernel, self.out_length());
        let (l, s, p) = (self.length, self.stride, self.padding as isize);
        for c in 0..cg {
            let dst = &mut dx[(g * cg + c) * l..(g * cg + c + 1) * l];
            for j in 0..k {
                let row = &dcol[(c * k + j) * lout..(c * k + j + 1) * lout];
                for (t, &v) in row.iter().enumerate() {
                    let pos = (t * s) as isize + j as isize - p;
                    if pos >= 0 && (pos as usize) < l {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (cg, og, k, lout) = (
            self.in_per_group(),
            self.out_per_group(),
            self.kernel,
            self.out_length(),
        );
        let mut out = vec![0.0; self.out_channels * lout];
        let mut col = vec![0.0; cg * k * lout];
        let wlen = og * cg * k;
        for g in 0..self.groups {
            self.im2col(x, g, &mut col);
            gemm(
                og,
                cg * k,
                lout,
                &w[g * wlen..(g + 1) * wlen],
                false,
                &col,
                false,
                &mut out[g * og * lout..(g + 1) * og * lout],
                false,
            );
        }
        out
    }

    /// Returns `(dx, dw)` for upstream gradient `dout`.
    pub fn backward(&self, x: &[f64], w: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (cg, og, k, lout) = (
            self.in_per_group(),
            self.out_per_group(),
            self.kernel,
            self.out_length(),
        );
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut col = vec![0.0; cg * k * lout];
        let mut dcol = vec![0.0; cg * k * lout];
        let wlen = og * cg * k;
        for g in 0..self.groups {
            let dout_g = &dout[g * og * lout..(g + 1) * og * lout];
            self.im2col(x, g, &mut col);
            // dW_g = dOut_g · colᵀ
            gemm(
                og,
                lout,
                cg * k,
                dout_g,
                false,
                &col,
                true,
                &mut dw[g * wlen..(g + 1) * wlen],
                false,
            );
            // dcol = W_gᵀ · dOut_g
            gemm(
                cg * k,
                og,
                lout,
                &w[g * wlen..(g + 1) * wlen],
                true,
                dout_g,
                false,
                &mut dcol,
                false,
            );
            self.col2im(&dcol, g, &mut dx);
        }
        (dx, dw)
    }
}
