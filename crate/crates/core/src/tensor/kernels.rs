//! Row-major dense kernels. All matrices are flat slices.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), or None in the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·K·K, OH·OW]` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_w + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut img = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            img[base + y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

/// Max pooling over one `[C, H, W]` image. Returns values and the flat input
/// index of each window's (first) maximum.
pub(crate) fn maxpool(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (height - kernel) / stride + 1;
    let ow = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * width + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * width + ox * stride + kx;
                        if img[i] > best {
                            best = img[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}
