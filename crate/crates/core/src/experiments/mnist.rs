//! Class-conditional image densities: IDX parsing, dequantization into
//! logit space and the class-mixture likelihood.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ConditionalModel, Dataset};
use crate::tensor::{logsumexp, softplus, Matrix};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const N_CLASSES: usize = 10;

/// A parsed IDX file of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0000_0800 | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic().to_be_bytes().to_vec();
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)?;
    let n_dims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => return Err(Error::Format(format!("unsupported IDX magic {other:#010x}"))),
    };
    let dims: Vec<usize> = (1..=n_dims).map(|i| word(i).map(|v| v as usize)).collect::<Result<_>>()?;
    let expected: usize = dims.iter().product();
    let data = &bytes[4 * (n_dims + 1)..];
    if data.len() != expected {
        return Err(Error::Format(format!(
            "IDX dims {dims:?} need {expected} bytes, found {}",
            data.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: data.to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

/// Images as rows of pixels plus their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub side: usize,
    pub pixels: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

pub fn load_labeled(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(Error::Format("expected an image file and a label file".into()));
    }
    if img.dims[1] != img.dims[2] {
        return Err(Error::Format("images must be square".into()));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Format(format!("{} images but {} labels", img.dims[0], lab.dims[0])));
    }
    if let Some(l) = lab.data.iter().find(|&&l| l as usize >= N_CLASSES) {
        return Err(Error::Format(format!("label {l} out of range")));
    }
    let side = img.dims[1];
    Ok(LabeledImages {
        side,
        pixels: img.data.chunks(side * side).map(|c| c.to_vec()).collect(),
        labels: lab.data,
    })
}

/// Area-weighted resampling of a square image to `side_out x side_out`.
pub fn downsample(img: &[u8], side_in: usize, side_out: usize) -> Vec<u8> {
    let scale = side_in as f64 / side_out as f64;
    let mut out = Vec::with_capacity(side_out * side_out);
    let overlap = |a0: f64, a1: f64, b: usize| (a1.min(b as f64 + 1.0) - a0.max(b as f64)).max(0.0);
    for r in 0..side_out {
        let (r0, r1) = (r as f64 * scale, (r + 1) as f64 * scale);
        for c in 0..side_out {
            let (c0, c1) = (c as f64 * scale, (c + 1) as f64 * scale);
            let mut acc = 0.0;
            for ir in r0.floor() as usize..(r1.ceil() as usize).min(side_in) {
                let wr = overlap(r0, r1, ir);
                for ic in c0.floor() as usize..(c1.ceil() as usize).min(side_in) {
                    acc += wr * overlap(c0, c1, ic) * img[ir * side_in + ic] as f64;
                }
            }
            out.push((acc / (scale * scale)).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn logit(y: f64) -> f64 {
    y.ln() - (-y).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x = logit(lambda + (1 - 2 lambda) (p + u) / 256)` with given noise `u` in `[0, 1)`.
pub fn dequantize_with_noise(pixels: &[u8], noise: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if pixels.len() != noise.len() {
        return Err(Error::Shape {
            op: "dequantize",
            detail: format!("{} pixels and {} noise values", pixels.len(), noise.len()),
        });
    }
    if !(lambda > 0.0 && lambda < 0.5) {
        return Err(Error::Argument("lambda must lie in (0, 0.5)".into()));
    }
    Ok(pixels
        .iter()
        .zip(noise)
        .map(|(&p, &u)| logit(lambda + (1.0 - 2.0 * lambda) * (p as f64 + u) / 256.0))
        .collect())
}

/// [`dequantize_with_noise`] with uniform noise drawn from `seed`.
pub fn dequantize_logit(pixels: &[u8], lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..pixels.len()).map(|_| rng.random::<f64>()).collect();
    dequantize_with_noise(pixels, &noise, lambda)
}

/// Inverse map back to the continuous pixel scale `p + u`.
pub fn inverse_logit(x: &[f64], lambda: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| (sigmoid(v) - lambda) / (1.0 - 2.0 * lambda) * 256.0)
        .collect()
}

/// `log |d x / d v|` summed over pixels, where `v = (p + u) / 256`.
pub fn logit_log_jacobian(x: &[f64], lambda: f64) -> f64 {
    // log y + log(1 - y) = -softplus(-x) - softplus(x)
    x.iter()
        .map(|&v| (1.0 - 2.0 * lambda).ln() + softplus(-v) + softplus(v))
        .sum()
}

/// Bits per pixel on the 8-bit scale from a logit-space log density.
pub fn bits_per_pixel(log_prob_logit: f64, x: &[f64], lambda: f64) -> f64 {
    let d = x.len() as f64;
    let log_p_unit = log_prob_logit + logit_log_jacobian(x, lambda);
    -log_p_unit / (d * std::f64::consts::LN_2) + 8.0
}

/// Dequantized images (`n x side^2`) with their labels as scalar conditions.
pub fn to_dataset(images: &LabeledImages, lambda: f64, seed: u64) -> Result<Dataset> {
    let d = images.side * images.side;
    let mut x = Vec::with_capacity(images.pixels.len() * d);
    for (i, img) in images.pixels.iter().enumerate() {
        x.extend(dequantize_logit(img, lambda, seed.wrapping_add(i as u64))?);
    }
    let c: Vec<f64> = images.labels.iter().map(|&l| l as f64).collect();
    Dataset::new(Matrix::new(images.pixels.len(), d, x)?, Matrix::column(&c))
}

/// `log p(x) = log sum_i p(x | C_i) / 10` under a uniform class prior.
pub fn mixture_log_prob<M: ConditionalModel + ?Sized>(model: &M, x: &Matrix) -> Result<Vec<f64>> {
    let n = x.rows();
    let per_class: Vec<Vec<f64>> = (0..N_CLASSES)
        .map(|k| model.log_prob_batch(x, &Matrix::filled(n, 1, k as f64)))
        .collect::<Result<_>>()?;
    let prior = (1.0 / N_CLASSES as f64).ln();
    (0..n)
        .map(|i| {
            let terms: Vec<f64> = per_class.iter().map(|v| v[i] + prior).collect();
            logsumexp(&terms)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::stub::FnModel;

    #[test]
    fn idx_roundtrip_and_errors() {
        let a = IdxArray {
            dims: vec![2, 2, 2],
            data: (0..8).collect(),
        };
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_idx(&bytes).unwrap(), a);
        assert!(matches!(parse_idx(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = 2;
        assert!(matches!(parse_idx(&bad), Err(Error::Format(_))));
        assert!(parse_idx(&[0, 0]).is_err());
        let l = IdxArray { dims: vec![3], data: vec![1, 2, 9] };
        assert_eq!(parse_idx(&l.to_bytes()).unwrap(), l);
    }

    #[test]
    fn boundary_pixel_is_finite() {
        let x = dequantize_with_noise(&[0, 255], &[0.0, 0.999_999], DEFAULT_LAMBDA).unwrap();
        assert!((x[0] - logit(DEFAULT_LAMBDA)).abs() < 1e-12);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dequantization_roundtrip() {
        let pixels: Vec<u8> = (0..=255).collect();
        let noise: Vec<f64> = (0..256).map(|i| (i as f64 * 0.618).fract()).collect();
        let x = dequantize_with_noise(&pixels, &noise, DEFAULT_LAMBDA).unwrap();
        let back = inverse_logit(&x, DEFAULT_LAMBDA);
        for ((b, p), u) in back.iter().zip(&pixels).zip(&noise) {
            assert!((b - (*p as f64 + u)).abs() < 1e-10, "{b} vs {}", *p as f64 + u);
        }
        let seeded = dequantize_logit(&pixels, DEFAULT_LAMBDA, 4).unwrap();
        for (b, p) in inverse_logit(&seeded, DEFAULT_LAMBDA).iter().zip(&pixels) {
            assert!(b.floor() as u8 == *p);
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let lambda = 1e-3;
        for v in [0.001, 0.3, 0.77, 0.999] {
            let y = |v: f64| logit(lambda + (1.0 - 2.0 * lambda) * v);
            let h = 1e-7;
            let fd = (y(v + h) - y(v - h)) / (2.0 * h);
            assert!((logit_log_jacobian(&[y(v)], lambda) - fd.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_pixels_cost_eight_bits() {
        // a density uniform in v has log p_logit = -log|dx/dv|
        let x = dequantize_logit(&[10, 200, 37], DEFAULT_LAMBDA, 1).unwrap();
        let lp = -logit_log_jacobian(&x, DEFAULT_LAMBDA);
        assert!((bits_per_pixel(lp, &x, DEFAULT_LAMBDA) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_uses_uniform_prior() {
        let m = FnModel::new(1, 1, |x: &[f64], c: &[f64]| if c[0] == 3.0 { x[0] } else { f64::NEG_INFINITY });
        let lp = mixture_log_prob(&m, &Matrix::column(&[-1.0, 0.5])).unwrap();
        assert!((lp[0] - (-1.0 + 0.1f64.ln())).abs() < 1e-12);
        let m = FnModel::new(1, 1, |_: &[f64], c: &[f64]| (c[0] + 1.0).ln());
        let lp = mixture_log_prob(&m, &Matrix::column(&[0.0])).unwrap();
        assert!((lp[0] - 5.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn downsample_preserves_constant_and_means() {
        assert_eq!(downsample(&[7u8; 28 * 28], 28, 8), vec![7u8; 64]);
        let img: Vec<u8> = (0..16).map(|i| (i * 10) as u8).collect();
        assert_eq!(downsample(&img, 4, 2), vec![25, 45, 105, 125]);
        assert_eq!(downsample(&img, 4, 4), img);
    }
}
