use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::spatial::resize_bilinear;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

use super::SliceSample;

pub const DEFAULT_SIZE: usize = 32;

/// Clean intensities before any domain corruption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: f32,
    pub cord: f32,
    pub grey_matter: f32,
}

impl Palette {
    pub const DEFAULT: Palette = Palette {
        background: 0.15,
        cord: 0.5,
        grey_matter: 0.8,
    };
}

/// Acquisition characteristics of one synthetic centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: u8,
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Amplitude of the multiplicative polynomial bias field.
    pub bias_field_amp: f64,
    /// Factor by which the slice is downsampled before being resampled back.
    pub resolution_scale: f64,
}

impl DomainSpec {
    /// Default acquisition settings for domains 1 to 4.
    pub fn preset(domain_id: u8) -> Result<Self> {
        let (gain, offset, noise, blur, bias, res) = match domain_id {
            1 => (1.0, 0.0, 0.03, 0.5, 0.1, 1.0),
            2 => (0.9, 0.08, 0.04, 0.7, 0.15, 1.0),
            3 => (0.7, 0.2, 0.06, 0.8, 0.2, 1.5),
            4 => (0.5, 0.4, 0.08, 1.0, 0.25, 2.0),
            other => return Err(Error::MissingDomain(other)),
        };
        Ok(Self {
            domain_id,
            intensity_gain: gain,
            intensity_offset: offset,
            noise_sigma: noise,
            blur_sigma: blur,
            bias_field_amp: bias,
            resolution_scale: res,
        })
    }

    /// A domain that leaves the clean rendering untouched.
    pub fn clean(domain_id: u8) -> Self {
        Self {
            domain_id,
            intensity_gain: 1.0,
            intensity_offset: 0.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            bias_field_amp: 0.0,
            resolution_scale: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.blur_sigma >= 0.0
            && self.bias_field_amp >= 0.0
            && self.resolution_scale >= 1.0
            && self.intensity_gain.is_finite()
            && self.intensity_offset.is_finite();
        if !ok {
            return Err(Error::invalid("generate_domain", format!("invalid domain spec {self:?}")));
        }
        Ok(())
    }
}

/// Cord and grey-matter geometry shared by all slices of a subject.
struct Subject {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    tilt: f64,
    lobe_dx: f64,
    lobe_a: f64,
    lobe_b: f64,
    lobe_angle: f64,
    phase: f64,
    bias: [f64; 5],
}

impl Subject {
    fn draw(seed: u64, subject: u32, size: usize) -> Self {
        let s = size as f64 / DEFAULT_SIZE as f64;
        let mut g = rng_for(seed, &[stream::GEOMETRY, subject as u64]);
        let c = (size as f64 - 1.0) / 2.0;
        let mut field = rng_for(seed, &[stream::NOISE, subject as u64]);
        Self {
            cx: c + g.gen_range(-2.0..2.0) * s,
            cy: c + g.gen_range(-2.0..2.0) * s,
            a: g.gen_range(6.0..8.0) * s,
            b: g.gen_range(4.0..5.5) * s,
            tilt: g.gen_range(-0.3..0.3),
            lobe_dx: g.gen_range(1.6..2.4) * s,
            lobe_a: g.gen_range(2.2..3.0) * s,
            lobe_b: g.gen_range(1.2..1.7) * s,
            lobe_angle: g.gen_range(0.5..0.9),
            phase: g.gen_range(0.0..std::f64::consts::TAU),
            bias: std::array::from_fn(|_| field.gen_range(-1.0..1.0)),
        }
    }
}

fn inside_ellipse(u: f64, v: f64, a: f64, b: f64) -> bool {
    (u / a).powi(2) + (v / b).powi(2) <= 1.0
}

/// Renders the clean slice and its grey-matter mask.
fn render(sub: &Subject, seed: u64, subject: u32, slice: u32, n_slices: u32, size: usize, palette: Palette) -> (Vec<f64>, Vec<f32>) {
    let mut g = rng_for(seed, &[stream::GEOMETRY, subject as u64, slice as u64]);
    let z = if n_slices > 1 { slice as f64 / (n_slices - 1) as f64 } else { 0.5 };
    let f = 1.0 + 0.12 * (std::f64::consts::PI * z + sub.phase).sin() + g.gen_range(-0.04..0.04);
    let s = size as f64 / DEFAULT_SIZE as f64;
    let (cx, cy) = (sub.cx + g.gen_range(-0.7..0.7) * s, sub.cy + g.gen_range(-0.7..0.7) * s);
    let (st, ct) = sub.tilt.sin_cos();
    let mut img = vec![palette.background as f64; size * size];
    let mut mask = vec![0.0f32; size * size];
    for r in 0..size {
        for c in 0..size {
            let (dx, dy) = (c as f64 - cx, r as f64 - cy);
            let u = ct * dx + st * dy;
            let v = -st * dx + ct * dy;
            if !inside_ellipse(u, v, sub.a * f, sub.b * f) {
                continue;
            }
            let i = r * size + c;
            img[i] = palette.cord as f64;
            let lobe = |side: f64| {
                let (sa, ca) = (side * sub.lobe_angle).sin_cos();
                let (lu, lv) = (u - side * sub.lobe_dx * f, v);
                inside_ellipse(ca * lu + sa * lv, -sa * lu + ca * lv, sub.lobe_a * f, sub.lobe_b * f)
            };
            let bridge = v.abs() <= 0.6 * s && u.abs() <= sub.lobe_dx * f;
            if lobe(-1.0) || lobe(1.0) || bridge {
                img[i] = palette.grey_matter as f64;
                mask[i] = 1.0;
            }
        }
    }
    (img, mask)
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |i: i64| i.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for r in 0..size {
        for c in 0..size {
            tmp[r * size + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[r * size + clampi(c as i64 + k as i64 - radius)])
                .sum::<f64>()
                / norm;
        }
    }
    for r in 0..size {
        for c in 0..size {
            img[r * size + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(r as i64 + k as i64 - radius) * size + c])
                .sum::<f64>()
                / norm;
        }
    }
}

fn corrupt(img: &mut Vec<f64>, spec: &DomainSpec, sub: &Subject, noise: &mut impl Rng, size: usize) {
    if spec.resolution_scale > 1.0 {
        let low = ((size as f64 / spec.resolution_scale).round() as usize).max(1);
        let small = resize_bilinear(img, 1, size, size, low, low);
        *img = resize_bilinear(&small, 1, low, low, size, size);
    }
    gaussian_blur(img, size, spec.blur_sigma);
    let [b1, b2, b3, b4, b5] = sub.bias;
    for r in 0..size {
        for c in 0..size {
            let x = 2.0 * c as f64 / (size - 1) as f64 - 1.0;
            let y = 2.0 * r as f64 / (size - 1) as f64 - 1.0;
            let poly = (b1 * x + b2 * y + b3 * x * y + b4 * x * x + b5 * y * y) / 5.0;
            img[r * size + c] *= 1.0 + spec.bias_field_amp * poly;
        }
    }
    let normal = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
    for v in img.iter_mut() {
        *v = spec.intensity_gain * *v + spec.intensity_offset;
        if let Some(n) = &normal {
            *v += n.sample(noise);
        }
        *v = v.clamp(0.0, 1.0);
    }
}

/// Generates `n_subjects × slices_per_subject` labeled slices of one
/// domain. Geometry depends only on `seed`, so two domains generated with
/// the same seed share their masks.
pub fn generate_domain(
    spec: &DomainSpec,
    n_subjects: u32,
    slices_per_subject: u32,
    size: usize,
    seed: u64,
) -> Result<Vec<SliceSample>> {
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::invalid(
            "generate_domain",
            format!("size {size} must be a multiple of 8 and at least 16"),
        ));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity((n_subjects * slices_per_subject) as usize);
    for subject in 0..n_subjects {
        let sub = Subject::draw(seed, subject, size);
        for slice in 0..slices_per_subject {
            let (mut img, mask) = render(&sub, seed, subject, slice, slices_per_subject, size, Palette::DEFAULT);
            let mut noise = rng_for(seed, &[stream::NOISE, subject as u64, slice as u64]);
            corrupt(&mut img, spec, &sub, &mut noise, size);
            out.push(SliceSample {
                image: Tensor::new(&[1, size, size], img.into_iter().map(|v| v as f32).collect())?,
                mask: Some(Tensor::new(&[1, size, size], mask)?),
                domain_id: spec.domain_id,
                subject_id: subject,
                slice_index: slice,
            });
        }
    }
    Ok(out)
}

/// All four preset domains, each from its own seed derived from `seed`.
pub fn generate_corpus(n_subjects: u32, slices_per_subject: u32, size: usize, seed: u64) -> Result<Vec<Vec<SliceSample>>> {
    super::DOMAINS
        .iter()
        .map(|&d| {
            let spec = DomainSpec::preset(d)?;
            generate_domain(&spec, n_subjects, slices_per_subject, size, derive_seed(seed, &[stream::DOMAIN, d as u64]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labeled() {
        let spec = DomainSpec::preset(2).unwrap();
        let a = generate_domain(&spec, 2, 3, 32, 11).unwrap();
        let b = generate_domain(&spec, 2, 3, 32, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|s| s.is_labeled()));
        assert!(a.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn clean_domain_uses_palette_only() {
        let p = Palette::DEFAULT;
        let slices = generate_domain(&DomainSpec::clean(1), 2, 2, 32, 5).unwrap();
        for s in &slices {
            assert!(s.image.data().iter().all(|&v| v == p.background || v == p.cord || v == p.grey_matter));
        }
    }

    #[test]
    fn masks_ignore_intensity_corruption() {
        let a = generate_domain(&DomainSpec::preset(1).unwrap(), 2, 2, 32, 9).unwrap();
        let b = generate_domain(&DomainSpec::preset(4).unwrap(), 2, 2, 32, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mask, y.mask);
            assert_ne!(x.image, y.image);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let spec = DomainSpec::preset(1).unwrap();
        assert!(generate_domain(&spec, 1, 1, 30, 0).is_err());
        assert!(generate_domain(&spec, 1, 1, 8, 0).is_err());
    }
}
