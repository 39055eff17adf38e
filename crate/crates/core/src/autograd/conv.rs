//! 2-D convolution kernels (im2col + GEMM).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input {input:?} is not [N,C,H,W]"))),
        };
        let (k, kc, kh, kw) = match *kernel {
            [k, kc, kh, kw] => (k, kc, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("kernel {kernel:?} is not [K,C,kh,kw]"))),
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if bias != [k] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {bias:?} does not match {k} output channels"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride} does not tile padded input {ph}x{pw} with kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.k, self.oh, self.ow]
    }
}

/// Input range `[lo, hi)` of output positions whose tap `offset` lands
/// inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && lo * stride + offset < pad {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && (hi - 1) * stride + offset >= pad + len {
        hi -= 1;
    }
    (lo, hi)
}

/// Appends the patch matrix of the whole batch, `[C·kh·kw, N·OH·OW]`, to
/// `cols`; row `(c, i, j)` holds tap `(i, j)` of channel `c` for every
/// output position of every sample.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let hw = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ki, g.pad, g.stride);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, kj, g.pad, g.stride);
                for ni in 0..g.n {
                    let src = &x[ni * g.in_sample() + ci * hw..ni * g.in_sample() + (ci + 1) * hw];
                    for oy in 0..g.oh {
                        if oy < ylo || oy >= yhi || xlo >= xhi {
                            cols.extend(std::iter::repeat_n(T::zero(), g.ow));
                            continue;
                        }
                        let iy = oy * g.stride + ki - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        cols.extend(std::iter::repeat_n(T::zero(), xlo));
                        if g.stride == 1 {
                            let ix0 = xlo + kj - g.pad;
                            cols.extend_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            cols.extend((xlo..xhi).map(|ox| srow[ox * g.stride + kj - g.pad]));
                        }
                        cols.extend(std::iter::repeat_n(T::zero(), g.ow - xhi));
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns `off..off + OH·OW` of a patch
/// matrix with row length `ld` back onto one sample's input gradient.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ki, g.pad, g.stride);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + plane];
                let (xlo, xhi) = valid_range(g.ow, g.w, kj, g.pad, g.stride);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        for (d, &s) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d = *d + s;
                        }
                    } else {
                        for (ox, &s) in (xlo..xhi).zip(srow) {
                            let ix = ox * g.stride + kj - g.pad;
                            drow[ix] = drow[ix] + s;
                        }
                    }
                }
            }
        }
    }
}

fn batch_cols<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = Vec::with_capacity(g.patch() * g.n * g.out_plane());
    im2col(x, g, &mut cols);
    cols
}

/// Returns the output and, if `keep_cols`, the patch matrix for reuse in
/// the backward pass.
pub(crate) fn forward<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom, keep_cols: bool) -> (Vec<T>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let ld = g.n * plane;
    let cols = batch_cols(x, g);
    let mut prod = vec![T::zero(); g.k * ld];
    T::gemm(g.k, g.patch(), ld, kernel, false, &cols, false, &mut prod, false);
    let mut out = Vec::with_capacity(g.n * g.k * plane);
    for ni in 0..g.n {
        for ki in 0..g.k {
            let src = &prod[ki * ld + ni * plane..ki * ld + (ni + 1) * plane];
            out.extend(src.iter().map(|&s| s + bias[ki]));
        }
    }
    (out, keep_cols.then_some(cols))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// `cols` is the patch matrix saved by [`forward`], recomputed if absent.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
    cols: Option<&[T]>,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let ld = g.n * plane;
    // dY as [K, N·OH·OW]
    let mut dyp = Vec::with_capacity(g.k * ld);
    for ki in 0..g.k {
        for ni in 0..g.n {
            dyp.extend_from_slice(&dy[(ni * g.k + ki) * plane..(ni * g.k + ki + 1) * plane]);
        }
    }
    let db = need[2].then(|| dyp.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect());
    let dw = need[1].then(|| {
        let owned;
        let cols = match cols {
            Some(c) => c,
            None => {
                owned = batch_cols(x, g);
                &owned
            }
        };
        let mut dw = vec![T::zero(); kernel.len()];
        T::gemm(g.k, ld, patch, &dyp, false, cols, true, &mut dw, false);
        dw
    });
    // one sample at a time: dY_n is already a contiguous [K, OH·OW] block
    let dx = need[0].then(|| {
        let mut dcols = vec![T::zero(); patch * plane];
        let mut dx = vec![T::zero(); x.len()];
        for ni in 0..g.n {
            let dy_n = &dy[ni * g.k * plane..(ni + 1) * g.k * plane];
            T::gemm(patch, g.k, plane, kernel, true, dy_n, false, &mut dcols, false);
            col2im(&dcols, g, &mut dx[ni * g.in_sample()..(ni + 1) * g.in_sample()], plane, 0);
        }
        dx
    });
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}
