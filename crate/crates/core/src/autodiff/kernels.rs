//! Dense kernels shared by the forward and backward passes.

/// `c (m×n) = op(a) · op(b)`, or `c += ...` when `accumulate` is set.
///
/// `op(a)` is `m×k`; with `trans_a` the buffer holds `a` as `k×m`.
/// Likewise `op(b)` is `k×n`, stored `n×k` with `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a (possibly grouped, padded) 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Unfolds one group of the input into a `(cin_g·K) × L_out` matrix.
    fn im2col(&self, x: &[f64], group: usize, cols: &mut [f64]) {
        let (k_w, l_out, pad) = (self.kernel, self.out_len, self.padding as isize);
        for ci in 0..self.cin_g() {
            let chan = &x[(group * self.cin_g() + ci) * self.in_len..][..self.in_len];
            for k in 0..k_w {
                let row = &mut cols[(ci * k_w + k) * l_out..][..l_out];
                for (t, slot) in row.iter_mut().enumerate() {
                    let pos = (t * self.stride + k) as isize - pad;
                    *slot = if pos >= 0 && (pos as usize) < self.in_len { chan[pos as usize] } else { 0.0 };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], group: usize, dx: &mut [f64]) {
        let (k_w, l_out, pad) = (self.kernel, self.out_len, self.padding as isize);
        for ci in 0..self.cin_g() {
            let chan = &mut dx[(group * self.cin_g() + ci) * self.in_len..][..self.in_len];
            for k in 0..k_w {
                let row = &cols[(ci * k_w + k) * l_out..][..l_out];
                for (t, v) in row.iter().enumerate() {
                    let pos = (t * self.stride + k) as isize - pad;
                    if pos >= 0 && (pos as usize) < self.in_len {
                        chan[pos as usize] += v;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (cin_g, cout_g, l_out) = (self.cin_g(), self.cout_g(), self.out_len);
        let rows = cin_g * self.kernel;
        let mut out = vec![0.0; self.out_channels * l_out];
        let mut cols = vec![0.0; rows * l_out];
        for g in 0..self.groups {
            self.im2col(x, g, &mut cols);
            let w_g = &w[g * cout_g * rows..(g + 1) * cout_g * rows];
            let out_g = &mut out[g * cout_g * l_out..(g + 1) * cout_g * l_out];
            gemm(cout_g, rows, l_out, w_g, false, &cols, false, out_g, false);
        }
        if let Some(b) = bias {
            for (co, chan) in out.chunks_mut(l_out).enumerate() {
                chan.iter_mut().for_each(|v| *v += b[co]);
            }
        }
        out
    }

    /// Accumulates input and kernel gradients for upstream gradient `dy`.
    pub fn backward(&self, x: &[f64], w: &[f64], dy: &[f64], mut dx: Option<&mut [f64]>, mut dw: Option<&mut [f64]>) {
        let (cout_g, l_out) = (self.cout_g(), self.out_len);
        let rows = self.cin_g() * self.kernel;
        let mut cols = vec![0.0; rows * l_out];
        for g in 0..self.groups {
            let dy_g = &dy[g * cout_g * l_out..(g + 1) * cout_g * l_out];
            if let Some(dw) = dw.as_deref_mut() {
                self.im2col(x, g, &mut cols);
                let dw_g = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
                gemm(cout_g, l_out, rows, dy_g, false, &cols, true, dw_g, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let w_g = &w[g * cout_g * rows..(g + 1) * cout_g * rows];
                gemm(rows, cout_g, l_out, w_g, true, dy_g, false, &mut cols, false);
                self.col2im_add(&cols, g, dx);
            }
        }
    }
}

/// Tanh approximation of GELU and its derivative.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `ln(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
