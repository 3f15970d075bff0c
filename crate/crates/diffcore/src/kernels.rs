//! Slice-level forward/backward kernels used by the graph.

use crate::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis whose input coordinate
    /// `o*stride + tap - padding` lands inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.padding as isize;
        // o*s + off >= 0  <=>  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= extent-1
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(out);
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Visits every (column-matrix entry, input element) pair inside the
    /// image; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let in_plane = self.h * self.w;
        let out_plane = self.out_h * self.out_w;
        let n = self.cols();
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.out_h);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.out_w);
                    let row = (ci * self.k + ky) * self.k + kx;
                    for b in 0..self.batch {
                        let i_base = (b * self.c_in + ci) * in_plane;
                        let c_base = row * n + b * out_plane;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * self.stride + kx - self.padding;
                                f(c_base + oy * self.out_w + ox, i_base + iy * self.w + ix);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `input` into a `[c_in·k·k, batch·out_h·out_w]` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    g.for_each_tap(|c, i| col[c] = input[i]);
    col
}

/// `[batch, c_out, plane]` to `[c_out, batch·plane]` and back.
fn to_channel_major<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let n = g.cols();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &x[(b * g.c_out + co) * plane..][..plane];
            out[co * n + b * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

fn from_channel_major<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let n = g.cols();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &x[co * n + b * plane..][..plane];
            out[(b * g.c_out + co) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product accumulated in eight interleaved lanes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, ra) = a.split_at(a.len() / 8 * 8);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for l in lanes {
        acc += l;
    }
    acc
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let col = im2col(g, input);
    let (r, n) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.c_out * n];
    for co in 0..g.c_out {
        let orow = &mut out[co * n..(co + 1) * n];
        for (i, &wv) in kernel[co * r..(co + 1) * r].iter().enumerate() {
            axpy(wv, &col[i * n..(i + 1) * n], orow);
        }
    }
    from_channel_major(g, &out)
}

pub(crate) fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, kernel: &[T], grad_out: &[T]) -> Vec<T> {
    let gout = to_channel_major(g, grad_out);
    let (r, n) = (g.rows(), g.cols());
    let mut gcol = vec![T::zero(); r * n];
    for co in 0..g.c_out {
        let grow = &gout[co * n..(co + 1) * n];
        for (i, &wv) in kernel[co * r..(co + 1) * r].iter().enumerate() {
            axpy(wv, grow, &mut gcol[i * n..(i + 1) * n]);
        }
    }
    let mut gin = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    g.for_each_tap(|c, i| gin[i] += gcol[c]);
    gin
}

pub(crate) fn conv2d_backward_kernel<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> Vec<T> {
    let col = im2col(g, input);
    let gout = to_channel_major(g, grad_out);
    let (r, n) = (g.rows(), g.cols());
    let mut gk = vec![T::zero(); g.c_out * r];
    for co in 0..g.c_out {
        let grow = &gout[co * n..(co + 1) * n];
        for i in 0..r {
            gk[co * r + i] = dot(grow, &col[i * n..(i + 1) * n]);
        }
    }
    gk
}

/// `out[b, j] = sum_i x[b, i] * w[i, j]`
pub(crate) fn matmul<T: Scalar>(x: &[T], w: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for b in 0..rows {
        let orow = &mut out[b * cols..(b + 1) * cols];
        for i in 0..inner {
            let xv = x[b * inner + i];
            if xv == T::zero() {
                continue;
            }
            let wrow = &w[i * cols..(i + 1) * cols];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Gradient of `matmul` with respect to `x`: `g · wᵀ`.
pub(crate) fn matmul_grad_x<T: Scalar>(g: &[T], w: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); rows * inner];
    for b in 0..rows {
        let grow = &g[b * cols..(b + 1) * cols];
        for i in 0..inner {
            let wrow = &w[i * cols..(i + 1) * cols];
            gx[b * inner + i] = grow.iter().zip(wrow).fold(T::zero(), |a, (&gv, &wv)| a + gv * wv);
        }
    }
    gx
}

/// Gradient of `matmul` with respect to `w`: `xᵀ · g`.
pub(crate) fn matmul_grad_w<T: Scalar>(x: &[T], g: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut gw = vec![T::zero(); inner * cols];
    for b in 0..rows {
        let grow = &g[b * cols..(b + 1) * cols];
        for i in 0..inner {
            let xv = x[b * inner + i];
            if xv == T::zero() {
                continue;
            }
            let gwrow = &mut gw[i * cols..(i + 1) * cols];
            for (o, &gv) in gwrow.iter_mut().zip(grow) {
                *o += xv * gv;
            }
        }
    }
    gw
}

/// For every input element, the flat index of the output element it is
/// reduced into when `axes` are removed.
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut flat = 0;
        for (a, (&i, &d)) in idx.iter().zip(shape).enumerate() {
            if !axes.contains(&a) {
                flat = flat * d + i;
            }
        }
        map.push(flat);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (out_shape, map)
}
