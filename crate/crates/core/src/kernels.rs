//! Numeric kernels behind the recorded operations: matrix products,
//! patch extraction for convolutions, depthwise convolution and broadcasting.

use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar};

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} too short: need index {last}, have {len}");
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]`
/// when `tb`), `c` is `[m, n]`, all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    check_extent(a.len(), m, k, rsa, csa, "a");
    check_extent(b.len(), k, n, rsb, csb, "b");
    check_extent(c.len(), m, n, n, 1, "c");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the extents above bound every strided access of the kernel.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
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

/// Geometry of a 2-D convolution over `[N, H, W, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        batch: usize,
        in_h: usize,
        in_w: usize,
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::shape(op, "kernel extents and stride must be at least 1"));
        }
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if kh > ph || kw > pw {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            channels,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input pixel for output `(oy, ox)` and tap `(a, b)`, or `None` in padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + a) as isize - self.pad as isize;
        let x = (ox * self.stride + b) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold `[N, H, W, C]` into `[N*Ho*Wo, kh*kw*C]` patches.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.channels;
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.out_positions() * patch];
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_h * g.in_w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, a, b) {
                            let src = base + (y * g.in_w + xx) * c;
                            let off = (a * g.kw + b) * c;
                            dst[off..off + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[N, H, W, C]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let c = g.channels;
    let patch = g.patch_len();
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_h * g.in_w * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, a, b) {
                            let dst = base + (y * g.in_w + xx) * c;
                            let off = (a * g.kw + b) * c;
                            for (d, &s) in out[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// "Same"-padded depthwise convolution of `[N, H, W, C]` with `[kh, kw, C]`.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    k: &[T],
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (batch, h, w, c) = dims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        let base = n * h * w * c;
        for i in 0..h {
            for a in 0..kh {
                let sy = i as isize + a as isize - ph;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let sy = sy as usize;
                for j in 0..w {
                    let out = &mut y[base + (i * w + j) * c..base + (i * w + j + 1) * c];
                    for b in 0..kw {
                        let sx = j as isize + b as isize - pw;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = base + (sy * w + sx as usize) * c;
                        let taps = &k[(a * kw + b) * c..(a * kw + b + 1) * c];
                        for ((o, &xv), &kv) in out.iter_mut().zip(&x[src..src + c]).zip(taps) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<T>) {
    let (batch, h, w, c) = dims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for n in 0..batch {
        let base = n * h * w * c;
        for i in 0..h {
            for a in 0..kh {
                let sy = i as isize + a as isize - ph;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let sy = sy as usize;
                for j in 0..w {
                    let g = &dy[base + (i * w + j) * c..base + (i * w + j + 1) * c];
                    for b in 0..kw {
                        let sx = j as isize + b as isize - pw;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = base + (sy * w + sx as usize) * c;
                        let tap = (a * kw + b) * c;
                        for ch in 0..c {
                            dx[src + ch] += k[tap + ch] * g[ch];
                            dk[tap + ch] += x[src + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// NumPy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into an operand of
/// `shape` that broadcasts to it. `None` when no broadcasting happens.
pub fn broadcast_offsets(out_shape: &[usize], shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == shape {
        return None;
    }
    let rank = out_shape.len();
    let own = strides(shape);
    let mut eff = vec![0usize; rank];
    for i in 0..shape.len() {
        let axis = rank - shape.len() + i;
        if shape[i] != 1 {
            eff[axis] = own[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            off += eff[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            off -= eff[axis] * index[axis];
            index[axis] = 0;
        }
    }
    Some(offsets)
}
