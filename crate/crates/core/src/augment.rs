//! Spatial transformations shared by images, masks and prediction maps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_TRANSLATE_PX: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Horizontal flip, then rotation about the frame centre, then an integer
/// translation. `tx` moves content right, `ty` moves it down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub hflip: bool,
    pub rotation_deg: f64,
    pub tx: i32,
    pub ty: i32,
    /// Index of the draw that produced this spec; not part of the mapping.
    pub draw: u64,
}

impl TransformSpec {
    pub fn new(hflip: bool, rotation_deg: f64, tx: i32, ty: i32) -> Result<Self> {
        if !(rotation_deg.abs() <= MAX_ROTATION_DEG) {
            return Err(Error::invalid("transform", format!("rotation {rotation_deg} out of range")));
        }
        if tx.abs() > MAX_TRANSLATE_PX || ty.abs() > MAX_TRANSLATE_PX {
            return Err(Error::invalid("transform", format!("translation ({tx}, {ty}) out of range")));
        }
        Ok(Self {
            hflip,
            rotation_deg,
            tx,
            ty,
            draw: 0,
        })
    }

    pub fn identity() -> Self {
        Self {
            hflip: false,
            rotation_deg: 0.0,
            tx: 0,
            ty: 0,
            draw: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.rotation_deg == 0.0 && self.tx == 0 && self.ty == 0
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hflip={} rot={} tx={} ty={}",
            u8::from(self.hflip),
            self.rotation_deg,
            self.tx,
            self.ty
        )
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::invalid("transform", detail);
        let mut fields = [None; 4];
        for part in s.split_whitespace() {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
            let slot = match key {
                "hflip" => 0,
                "rot" => 1,
                "tx" => 2,
                "ty" => 3,
                _ => return Err(bad(format!("unknown field {key:?}"))),
            };
            if fields[slot].replace(value).is_some() {
                return Err(bad(format!("duplicate field {key:?}")));
            }
        }
        let [Some(h), Some(r), Some(x), Some(y)] = fields else {
            return Err(bad(format!("incomplete transform {s:?}")));
        };
        let hflip = match h {
            "0" => false,
            "1" => true,
            _ => return Err(bad(format!("hflip must be 0 or 1, got {h:?}"))),
        };
        let num = |v: &str| v.parse::<i32>().map_err(|e| bad(format!("{v:?}: {e}")));
        let rot = r.parse::<f64>().map_err(|e| bad(format!("{r:?}: {e}")))?;
        TransformSpec::new(hflip, rot, num(x)?, num(y)?)
    }
}

/// Draws flip, rotation and translation independently and uniformly.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, draw: u64) -> TransformSpec {
    let hflip = rng.gen_bool(0.5);
    let rotation_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let tx = rng.gen_range(-MAX_TRANSLATE_PX..=MAX_TRANSLATE_PX);
    let ty = rng.gen_range(-MAX_TRANSLATE_PX..=MAX_TRANSLATE_PX);
    TransformSpec {
        hflip,
        rotation_deg,
        tx,
        ty,
        draw,
    }
}

/// Transforms one `h×w` plane, filling uncovered pixels with zero.
pub fn apply_plane<T: Scalar>(spec: &TransformSpec, src: &[T], h: usize, w: usize, interp: Interpolation) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![T::zero(); h * w];
    if spec.rotation_deg == 0.0 {
        for r in 0..h {
            let sr = r as i64 - spec.ty as i64;
            if sr < 0 || sr >= h as i64 {
                continue;
            }
            for c in 0..w {
                let mut sc = c as i64 - spec.tx as i64;
                if sc < 0 || sc >= w as i64 {
                    continue;
                }
                if spec.hflip {
                    sc = w as i64 - 1 - sc;
                }
                out[r * w + c] = src[sr as usize * w + sc as usize];
            }
        }
        return out;
    }

    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fetch = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            return 0.0;
        }
        let c = if spec.hflip { w as i64 - 1 - c } else { c };
        src[r as usize * w + c as usize].as_f64()
    };
    for r in 0..h {
        for c in 0..w {
            // undo translation, then rotation; the flip is undone in `fetch`
            let dy = (r as f64 - spec.ty as f64) - cy;
            let dx = (c as f64 - spec.tx as f64) - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let v = match interp {
                Interpolation::Nearest => fetch(sy.round() as i64, sx.round() as i64),
                Interpolation::Bilinear => {
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as i64, x0 as i64);
                    (1.0 - fy) * ((1.0 - fx) * fetch(y0, x0) + fx * fetch(y0, x0 + 1))
                        + fy * ((1.0 - fx) * fetch(y0 + 1, x0) + fx * fetch(y0 + 1, x0 + 1))
                }
            };
            out[r * w + c] = T::from_f64(v);
        }
    }
    out
}

fn planes<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let shape = map.shape();
    if shape.len() < 2 {
        return Err(Error::shape("augment", format!("need at least [H, W], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((map.numel() / (h * w), h, w))
}

/// Applies `spec` to every trailing `H×W` plane of `map`.
pub fn apply<T: Scalar>(spec: &TransformSpec, map: &Tensor<T>, interp: Interpolation) -> Result<Tensor<T>> {
    if spec.is_identity() {
        return Ok(map.map(|x| x));
    }
    let (n, h, w) = planes(map)?;
    let mut data = Vec::with_capacity(map.numel());
    for p in map.data().chunks(h * w).take(n) {
        data.extend(apply_plane(spec, p, h, w, interp));
    }
    Tensor::new(map.shape(), data)
}

/// Applies `specs[i]` to sample `i` of a `[N, ...]` batch.
pub fn apply_batch<T: Scalar>(specs: &[TransformSpec], batch: &Tensor<T>, interp: Interpolation) -> Result<Tensor<T>> {
    let n = batch.shape()[0];
    if specs.len() != n {
        return Err(Error::shape("apply_batch", format!("{} specs for {n} samples", specs.len())));
    }
    let (_, h, w) = planes(batch)?;
    let per_sample = batch.numel() / n;
    let mut data = Vec::with_capacity(batch.numel());
    for (spec, sample) in specs.iter().zip(batch.data().chunks(per_sample)) {
        for p in sample.chunks(h * w) {
            if spec.is_identity() {
                data.extend_from_slice(p);
            } else {
                data.extend(apply_plane(spec, p, h, w, interp));
            }
        }
    }
    Tensor::new(batch.shape(), data)
}

/// Returns `student(g(x))` and `g(teacher(x))` for a batch `x` with one
/// spec per sample. The student closure may record into a graph; only its
/// output type is opaque here.
pub fn align_batch<T, S>(
    x: &Tensor<T>,
    specs: &[TransformSpec],
    student: impl FnOnce(Tensor<T>) -> Result<S>,
    teacher: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(S, Tensor<T>)>
where
    T: Scalar,
{
    let moved = apply_batch(specs, x, Interpolation::Bilinear)?;
    let s = student(moved)?;
    let t = teacher(x)?;
    let t = apply_batch(specs, &t, Interpolation::Bilinear)?;
    Ok((s, t))
}

/// Single-spec form of [`align_batch`] over plain tensors.
pub fn align_pair<T: Scalar>(
    x: &Tensor<T>,
    spec: &TransformSpec,
    student: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    teacher: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let moved = apply(spec, x, Interpolation::Bilinear)?;
    let s = student(&moved)?;
    let t = apply(spec, &teacher(x)?, Interpolation::Bilinear)?;
    if s.shape() != t.shape() {
        return Err(Error::shape("align_pair", format!("{:?} vs {:?}", s.shape(), t.shape())));
    }
    Ok((s, t))
}
