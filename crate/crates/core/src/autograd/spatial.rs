//! Pooling and resampling kernels over `[planes, H, W]` data.

use crate::scalar::Scalar;

pub(crate) fn max_pool2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool2_backward<T: Scalar>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

pub(crate) fn upsample_nearest2<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &x[(p * h + oy / 2) * w..(p * h + oy / 2 + 1) * w];
            let dst = &mut y[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample_nearest2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (p * h + oy / 2) * w + ox / 2;
                dx[i] = dx[i] + dy[(p * oh + oy) * ow + ox];
            }
        }
    }
    dx
}

/// One output coordinate's two source taps and weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centred linear interpolation taps (`align_corners = false`),
/// clamped at the borders.
fn taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of every `h×w` plane in `x` to `oh×ow`.
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for a in &ty {
            for b in &tx {
                let v = a.w0 * (b.w0 * plane[a.i0 * w + b.i0].as_f64() + b.w1 * plane[a.i0 * w + b.i1].as_f64())
                    + a.w1 * (b.w0 * plane[a.i1 * w + b.i0].as_f64() + b.w1 * plane[a.i1 * w + b.i1].as_f64());
                y.push(T::from_f64(v));
            }
        }
    }
    y
}

pub(crate) fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut dx = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = dy[(p * oh + oy) * ow + ox].as_f64();
                plane[a.i0 * w + b.i0] += a.w0 * b.w0 * g;
                plane[a.i0 * w + b.i1] += a.w0 * b.w1 * g;
                plane[a.i1 * w + b.i0] += a.w1 * b.w0 * g;
                plane[a.i1 * w + b.i1] += a.w1 * b.w1 * g;
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_resize_averages_blocks() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y = resize_bilinear(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn max_pool_picks_block_maximum() {
        let x = vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (y, arg) = max_pool2(&x, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
