//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices; shapes are checked by the callers in `tape`.

use super::tensor::strides;

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    // stride of each output axis inside the source, 0 on broadcast axes
    let mut eff = vec![0usize; rank];
    for k in 0..rank {
        if k + in_shape.len() >= rank {
            let j = k + in_shape.len() - rank;
            if in_shape[j] != 1 {
                eff[k] = in_strides[j];
            }
        }
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for k in (0..rank).rev() {
            idx[k] += 1;
            off += eff[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= eff[k] * idx[k];
            idx[k] = 0;
        }
    }
    map
}

/// Sums `grad` (shaped like the broadcast output) back onto `in_shape`.
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    let n_in: usize = in_shape.iter().product();
    if n_in == grad.len() {
        return grad.to_vec();
    }
    let map = broadcast_map(out_shape, in_shape);
    let mut acc = vec![0.0; n_in];
    for (g, &j) in grad.iter().zip(&map) {
        acc[j] += g;
    }
    acc
}

const MR: usize = 4;
const NR: usize = 8;

/// `out += a·b` for rows `i0..i0+R` of `a`, register-blocked over `NR` columns.
/// Every output accumulates over `p` in order, so results do not depend on blocking.
fn gemm_rows<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], i0: usize, k: usize, n: usize) {
    let full = n - n % NR;
    for j0 in (0..full).step_by(NR) {
        let mut acc = [[0.0; NR]; R];
        for p in 0..k {
            let bv: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i0 + r) * k + p];
                for t in 0..NR {
                    row[t] += av * bv[t];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
            for t in 0..NR {
                o[t] += row[t];
            }
        }
    }
    for r in 0..R {
        for j in full..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[(i0 + r) * k + p] * b[p * n + j];
            }
            out[(i0 + r) * n + j] += s;
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let full = m - m % MR;
    for i0 in (0..full).step_by(MR) {
        gemm_rows::<MR>(a, b, &mut out, i0, k, n);
    }
    for i0 in full..m {
        gemm_rows::<1>(a, b, &mut out, i0, k, n);
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// grad_a = g · bᵀ, grad_b = aᵀ · g
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ga = matmul(g, &transpose(b, k, n), m, n, k);
    let gb = matmul(&transpose(a, m, k), g, k, m, n);
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (k - 1) / 2;
        let span = dilation * (k - 1) + 1;
        let oh = (h + 2 * pad - span) / stride + 1;
        let ow = (w + 2 * pad - span) / stride + 1;
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            dilation,
            pad,
            oh,
            ow,
        }
    }

    /// Output columns `ox` whose input column `ox*stride + off - pad` is in range.
    fn valid_range(&self, off: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let base = off as isize - self.pad as isize;
        // smallest o with o*s + base >= 0
        let lo = if base >= 0 { 0 } else { ((-base) + s - 1) / s };
        // largest o with o*s + base <= n_in-1
        let hi_num = n_in as isize - 1 - base;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(n_out as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfolds `x` into a `[cin·k·k, oh·ow]` patch matrix; padded taps stay zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut col = vec![0.0; g.cin * g.k * g.k * plane];
    for ci in 0..g.cin {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky * g.dilation, g.h, g.oh);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid_range(kx * g.dilation, g.w, g.ow);
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let irow = &xin[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[oy * g.ow + ox] = irow[ox * g.stride + kx * g.dilation - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatters patch gradients back onto the input.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let xin = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky * g.dilation, g.h, g.oh);
            for kx in 0..g.k {
                let (xlo, xhi) = g.valid_range(kx * g.dilation, g.w, g.ow);
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &col[r * plane..(r + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    for ox in xlo..xhi {
                        xin[iy * g.w + ox * g.stride + kx * g.dilation - g.pad] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let col = im2col(x, g);
    let mut out = matmul(wt, &col, g.cout, g.cin * g.k * g.k, plane);
    if let Some(b) = bias {
        for (co, o) in out.chunks_mut(plane).enumerate() {
            o.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_bias).
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.oh * g.ow;
    let rows = g.cin * g.k * g.k;
    let col = im2col(x, g);
    let gb = gout.chunks(plane).map(|c| c.iter().sum()).collect();
    let (gw, gcol) = matmul_backward(wt, &col, gout, g.cout, rows, plane);
    (col2im(&gcol, g), gw, gb)
}

/// Row-major (out_n × in_n) interpolation matrix. Upsampling is plain bilinear
/// with half-pixel centers; downsampling widens the triangle filter by the
/// scale factor so every source sample contributes. Rows sum to 1.
pub(crate) fn resize_matrix(in_n: usize, out_n: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_n * in_n];
    let scale = in_n as f64 / out_n as f64;
    let support = scale.max(1.0);
    for i in 0..out_n {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let row = &mut m[i * in_n..(i + 1) * in_n];
        let mut total = 0.0;
        for (j, r) in row.iter_mut().enumerate() {
            let wgt = 1.0 - (j as f64 - center).abs() / support;
            if wgt > 0.0 {
                *r = wgt;
                total += wgt;
            }
        }
        if total == 0.0 {
            // center beyond the last sample: clamp to the nearest edge
            let j = center.round().clamp(0.0, (in_n - 1) as f64) as usize;
            row[j] = 1.0;
        } else {
            row.iter_mut().for_each(|r| *r /= total);
        }
    }
    m
}

/// out[c] = R · x[c] · Cᵀ for each channel plane.
pub(crate) fn resize_forward(
    x: &[f64],
    ch: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    rows: &[f64],
    cols: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; ch * oh * ow];
    let mut tmp = vec![0.0; oh * w];
    for c in 0..ch {
        let xp = &x[c * h * w..(c + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..oh {
            for y in 0..h {
                let r = rows[i * h + y];
                if r != 0.0 {
                    for xcol in 0..w {
                        tmp[i * w + xcol] += r * xp[y * w + xcol];
                    }
                }
            }
        }
        let op = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let crow = &cols[j * w..(j + 1) * w];
                op[i * ow + j] = crow
                    .iter()
                    .zip(&tmp[i * w..(i + 1) * w])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    g: &[f64],
    ch: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    rows: &[f64],
    cols: &[f64],
) -> Vec<f64> {
    let mut gx = vec![0.0; ch * h * w];
    let mut tmp = vec![0.0; oh * w];
    for c in 0..ch {
        let gp = &g[c * oh * ow..(c + 1) * oh * ow];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..oh {
            for j in 0..ow {
                let gv = gp[i * ow + j];
                if gv != 0.0 {
                    for xcol in 0..w {
                        tmp[i * w + xcol] += gv * cols[j * w + xcol];
                    }
                }
            }
        }
        let gxp = &mut gx[c * h * w..(c + 1) * h * w];
        for i in 0..oh {
            for y in 0..h {
                let r = rows[i * h + y];
                if r != 0.0 {
                    for xcol in 0..w {
                        gxp[y * w + xcol] += r * tmp[i * w + xcol];
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
