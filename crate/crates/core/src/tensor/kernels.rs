//! Raw numeric kernels on contiguous row-major slices.
//!
//! Everything here is shape-checked by the caller; the functions only
//! assert lengths in debug builds.

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is `m×k` and
/// `b` is `k×n`, either of them optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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

/// Geometry of a 2-D convolution over NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_c, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_c, self.k, self.k]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h(), self.out_w()]
    }
}

fn im2col(geom: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = oh * ow;
    for c in 0..geom.in_c {
        let plane = &x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (c * geom.k + ky) * geom.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.h
                            && (ix as usize) < geom.w
                        {
                            plane[iy as usize * geom.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(geom: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = oh * ow;
    for c in 0..geom.in_c {
        let plane = &mut x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (c * geom.k + ky) * geom.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= geom.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= geom.w {
                            continue;
                        }
                        plane[iy as usize * geom.w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution `y = conv(x, w)`.
pub fn conv2d(geom: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_sz = geom.in_c * geom.h * geom.w;
    let out_sz = geom.out_c * cols;
    let mut out = vec![0.0; geom.batch * out_sz];
    let mut col = vec![0.0; rows * cols];
    for b in 0..geom.batch {
        im2col(geom, &x[b * in_sz..(b + 1) * in_sz], &mut col);
        gemm(
            geom.out_c,
            rows,
            cols,
            w,
            false,
            &col,
            false,
            &mut out[b * out_sz..(b + 1) * out_sz],
            false,
        );
    }
    out
}

/// Adjoint of `conv2d` in its input: maps an output-shaped tensor `g` to an
/// input-shaped one.
pub fn conv2d_grad_input(geom: &ConvGeom, g: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_sz = geom.in_c * geom.h * geom.w;
    let out_sz = geom.out_c * cols;
    let mut dx = vec![0.0; geom.batch * in_sz];
    let mut col = vec![0.0; rows * cols];
    for b in 0..geom.batch {
        gemm(
            rows,
            geom.out_c,
            cols,
            w,
            true,
            &g[b * out_sz..(b + 1) * out_sz],
            false,
            &mut col,
            false,
        );
        col2im(geom, &col, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    dx
}

/// Adjoint of `conv2d` in its weight: `Σ_b g_b · col(x_b)ᵀ`.
pub fn conv2d_grad_weight(geom: &ConvGeom, x: &[f64], g: &[f64]) -> Vec<f64> {
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_sz = geom.in_c * geom.h * geom.w;
    let out_sz = geom.out_c * cols;
    let mut dw = vec![0.0; geom.out_c * rows];
    let mut col = vec![0.0; rows * cols];
    for b in 0..geom.batch {
        im2col(geom, &x[b * in_sz..(b + 1) * in_sz], &mut col);
        gemm(
            geom.out_c,
            cols,
            rows,
            &g[b * out_sz..(b + 1) * out_sz],
            false,
            &col,
            true,
            &mut dw,
            true,
        );
    }
    dw
}

/// Non-overlapping `k×k` average pooling over NCHW input (trailing rows and
/// columns that do not fill a window are dropped).
pub fn avg_pool2d(shape: &[usize], k: usize, x: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

/// Adjoint of `avg_pool2d`: spreads each pooled value evenly over its
/// window. `in_shape` is the shape of the pooling input.
pub fn avg_pool2d_adjoint(in_shape: &[usize], k: usize, g: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * scale;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] = v;
                    }
                }
            }
        }
    }
    out
}

/// Row-wise log-softmax over the last axis of length `n`.
pub fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of shape
/// `src_shape` that broadcasts onto it.
fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src_shape.len();
    let src_strides = strides(src_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..src_shape.len() {
        if src_shape[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Whether `src` broadcasts onto `out` by plain repetition, i.e. it equals a
/// trailing block of `out` (ignoring leading unit dims).
fn is_trailing_block(src: &[usize], out: &[usize]) -> bool {
    let trimmed: Vec<usize> = src.iter().cloned().skip_while(|&d| d == 1).collect();
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..]
}

/// Elementwise binary op with broadcasting; `out_shape` must be the broadcast
/// of the two input shapes.
pub fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let total: usize = out_shape.iter().product();
    if a.len() == total && b.len() == total {
        return a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
    }
    if a.len() == total && is_trailing_block(b_shape, out_shape) {
        let m = b.len();
        return a.iter().enumerate().map(|(i, x)| f(*x, b[i % m])).collect();
    }
    if b.len() == total && is_trailing_block(a_shape, out_shape) {
        let m = a.len();
        return b.iter().enumerate().map(|(i, y)| f(a[i % m], *y)).collect();
    }
    let ma = broadcast_index_map(a_shape, out_shape);
    let mb = broadcast_index_map(b_shape, out_shape);
    ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect()
}

/// Expands `x` of shape `src_shape` to `out_shape`.
pub fn broadcast_to(x: &[f64], src_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let total: usize = out_shape.iter().product();
    if x.len() == total {
        return x.to_vec();
    }
    if is_trailing_block(src_shape, out_shape) {
        let m = x.len();
        return (0..total).map(|i| x[i % m]).collect();
    }
    broadcast_index_map(src_shape, out_shape)
        .into_iter()
        .map(|i| x[i])
        .collect()
}

/// Sums `x` of shape `src_shape` down to `target_shape` (the inverse of
/// `broadcast_to`).
pub fn sum_to(x: &[f64], src_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    let target: usize = target_shape.iter().product();
    if target == x.len() {
        return x.to_vec();
    }
    if target == 1 {
        return vec![x.iter().sum()];
    }
    let mut out = vec![0.0; target];
    if is_trailing_block(target_shape, src_shape) {
        for chunk in x.chunks_exact(target) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return out;
    }
    for (v, i) in x.iter().zip(broadcast_index_map(target_shape, src_shape)) {
        out[i] += v;
    }
    out
}

/// Transpose of an `r×c` matrix.
pub fn transpose2d(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
