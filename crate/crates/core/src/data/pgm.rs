use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SliceSample;

/// An 8-bit greyscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Writes a binary (`P5`) PGM with maxval 255.
pub fn write_pgm(path: &Path, img: &Pgm) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|detail| Error::MalformedPgm {
        path: path.to_path_buf(),
        detail,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<&[u8], String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("unexpected end of header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    let magic = token()?;
    if magic != b"P5" {
        return Err(format!("magic {:?} is not P5", String::from_utf8_lossy(magic)));
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {what} {:?}", String::from_utf8_lossy(t)))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty raster {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval}, expected 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = pos + 1;
    let end = data + width * height;
    if bytes.len() < end {
        return Err(format!("raster needs {} bytes, found {}", width * height, bytes.len().saturating_sub(data)));
    }
    if bytes.len() > end {
        return Err(format!("{} trailing bytes", bytes.len() - end));
    }
    Ok(Pgm {
        width,
        height,
        pixels: bytes[data..end].to_vec(),
    })
}

/// Loads an image and optional mask. Images scale to `[0, 1]`; masks must
/// hold only 0 and 255.
pub fn load_pair(image_path: &Path, mask_path: Option<&Path>, domain_id: u8) -> Result<SliceSample> {
    let img = read_pgm(image_path)?;
    let shape = [1, img.height, img.width];
    let image = Tensor::new(&shape, img.pixels.iter().map(|&b| dequantize(b)).collect())?;
    let mask = match mask_path {
        None => None,
        Some(mp) => {
            let m = read_pgm(mp)?;
            if (m.width, m.height) != (img.width, img.height) {
                return Err(Error::MaskDimensions {
                    image: image_path.to_path_buf(),
                    mask: mp.to_path_buf(),
                    image_dims: (img.width, img.height),
                    mask_dims: (m.width, m.height),
                });
            }
            if let Some((index, &value)) = m.pixels.iter().enumerate().find(|(_, &v)| v != 0 && v != 255) {
                return Err(Error::NonBinaryMask {
                    path: mp.to_path_buf(),
                    value,
                    index,
                });
            }
            let bits = m.pixels.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
            Some(Tensor::new(&shape, bits)?)
        }
    };
    Ok(SliceSample {
        image,
        mask,
        domain_id,
        subject_id: 0,
        slice_index: 0,
    })
}

pub(crate) fn image_to_pgm(t: &Tensor<f32>) -> Pgm {
    let s = t.shape();
    Pgm {
        width: s[s.len() - 1],
        height: s[s.len() - 2],
        pixels: t.data().iter().map(|&x| quantize(x)).collect(),
    }
}

pub(crate) fn mask_to_pgm(t: &Tensor<f32>) -> Pgm {
    let s = t.shape();
    Pgm {
        width: s[s.len() - 1],
        height: s[s.len() - 2],
        pixels: t.data().iter().map(|&x| if x > 0.5 { 255 } else { 0 }).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_parsing() {
        let mut ok = b"P5 # comment\n2 1\n255\n".to_vec();
        ok.extend([0, 255]);
        let p = parse_pgm(&ok).unwrap();
        assert_eq!((p.width, p.height, p.pixels), (2, 1, vec![0, 255]));
        assert!(parse_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(parse_pgm(b"P5\n1").is_err());
    }

    #[test]
    fn quantization_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }
}
