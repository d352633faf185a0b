//! Dense per-pixel descriptors on the quarter-resolution grid.
//!
//! Descriptors are unit L2 vectors (or exactly zero where undefined, e.g. a
//! textureless census window), so correlation entries stay in [-1, 1].

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// Descriptor backend. The channel count D follows from the variant:
/// `window^2 - 1` for census, `window^2` for normalized patches, and the file
/// header for external features.
#[derive(Clone, Debug, PartialEq)]
pub enum Backend {
    Census { window: usize },
    NormalizedPatch { window: usize },
    ExternalFile { path: PathBuf },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Census { window: 7 }
    }
}

/// Quarter-resolution descriptor field, row-major `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    fn from_raw(h: usize, w: usize, d: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), h * w * d);
        FeatureMap { h, w, d, data }
    }

    /// Builds a feature map from raw descriptor components, L2-normalizing
    /// each per-pixel descriptor (zero vectors stay zero).
    pub fn from_unnormalized(h: usize, w: usize, d: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::invalid(format!(
                "feature payload holds {} values, expected {h}x{w}x{d}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature components must be finite"));
        }
        for i in 0..h * w {
            normalize_in_place(&mut data[i * d..(i + 1) * d]);
        }
        Ok(FeatureMap::from_raw(h, w, d, data))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn descriptor(&self, r: usize, c: usize) -> &[f32] {
        let base = (r * self.w + c) * self.d;
        &self.data[base..base + self.d]
    }

    /// Fraction of pixels whose descriptor is the zero vector.
    pub fn zero_fraction(&self) -> f64 {
        let mut zeros = 0usize;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.descriptor(r, c).iter().all(|&v| v == 0.0) {
                    zeros += 1;
                }
            }
        }
        zeros as f64 / (self.h * self.w) as f64
    }
}

/// 4x downsample by block averaging; edge blocks shrink when the input
/// dimensions are not multiples of 4.
pub fn quarter_gray(img: &Image) -> Image {
    let (fh, fw) = img.dims();
    let h = fh.div_ceil(4);
    let w = fw.div_ceil(4);
    Grid::from_fn(h, w, |r, c| {
        let r1 = (4 * r + 4).min(fh);
        let c1 = (4 * c + 4).min(fw);
        let mut sum = 0.0f64;
        for rr in 4 * r..r1 {
            for cc in 4 * c..c1 {
                sum += img.at(rr, cc) as f64;
            }
        }
        (sum / ((r1 - 4 * r) * (c1 - 4 * c)) as f64) as f32
    })
}

fn normalize_in_place(desc: &mut [f32]) {
    let norm_sq: f64 = desc.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if norm_sq < 1e-24 {
        desc.fill(0.0);
        return;
    }
    let inv = 1.0 / norm_sq.sqrt();
    for v in desc.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

fn census(quarter: &Image, window: usize) -> Result<FeatureMap> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "census window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = quarter.dims();
    let d = window * window - 1;
    let half = (window / 2) as isize;
    let amp = 1.0 / (d as f32).sqrt();
    let mut data = vec![0.0f32; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let center = quarter.at(r, c);
            let base = (r * w + c) * d;
            let mut ch = 0;
            for dr in -half..=half {
                for dc in -half..=half {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    let v = quarter.at(rr, cc);
                    data[base + ch] = if v > center {
                        amp
                    } else if v < center {
                        -amp
                    } else {
                        0.0
                    };
                    ch += 1;
                }
            }
            normalize_in_place(&mut data[base..base + d]);
        }
    }
    Ok(FeatureMap::from_raw(h, w, d, data))
}

fn normalized_patch(quarter: &Image, window: usize) -> Result<FeatureMap> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "patch window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = quarter.dims();
    let d = window * window;
    let half = (window / 2) as isize;
    let mut data = vec![0.0f32; h * w * d];
    let mut patch = vec![0.0f64; d];
    for r in 0..h {
        for c in 0..w {
            let mut mean = 0.0f64;
            let mut ch = 0;
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    patch[ch] = quarter.at(rr, cc) as f64;
                    mean += patch[ch];
                    ch += 1;
                }
            }
            mean /= d as f64;
            let base = (r * w + c) * d;
            for (i, &v) in patch.iter().enumerate() {
                data[base + i] = (v - mean) as f32;
            }
            normalize_in_place(&mut data[base..base + d]);
        }
    }
    Ok(FeatureMap::from_raw(h, w, d, data))
}

/// Reads the external feature format: ASCII header `FEAT h w D` terminated by
/// a newline, then `h*w*D` little-endian f32, row-major (row, column, channel).
pub fn read_feature_file(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&name, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(&name, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::parse(&name, "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "FEAT" {
        return Err(Error::parse(&name, format!("bad header `{header}`")));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(&name, format!("bad header dimensions `{header}`")))?;
    let (h, w, d) = (dims[0], dims[1], dims[2]);
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::parse(&name, "dimensions must be positive"));
    }
    let payload = &bytes[nl + 1..];
    let expected = h * w * d * 4;
    if payload.len() != expected {
        return Err(Error::parse(
            &name,
            format!("payload holds {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(h * w * d);
    let mut cursor = payload;
    let mut buf = [0u8; 4];
    while cursor.read_exact(&mut buf).is_ok() {
        data.push(f32::from_le_bytes(buf));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(&name, "non-finite feature value"));
    }
    Ok((h, w, d, data))
}

/// Writes the external feature format (see [`read_feature_file`]).
pub fn write_feature_file(path: &Path, h: usize, w: usize, d: usize, data: &[f32]) -> Result<()> {
    let name = path.display().to_string();
    if data.len() != h * w * d {
        return Err(Error::invalid("feature payload length mismatch"));
    }
    let mut bytes = format!("FEAT {h} {w} {d}\n").into_bytes();
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(&name, e))
}

fn external(img_quarter_dims: (usize, usize), path: &Path) -> Result<FeatureMap> {
    let (h, w, d, data) = read_feature_file(path)?;
    if (h, w) != img_quarter_dims {
        return Err(Error::invalid(format!(
            "feature grid {h}x{w} does not match the quarter grid {}x{}",
            img_quarter_dims.0, img_quarter_dims.1
        )));
    }
    FeatureMap::from_unnormalized(h, w, d, data)
}

/// Extracts a quarter-resolution, unit-normalized descriptor field.
pub fn extract_features(img: &Image, backend: &Backend) -> Result<FeatureMap> {
    let (h, w) = img.dims();
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!(
            "image must be at least 16x16, got {h}x{w}"
        )));
    }
    let quarter = quarter_gray(img);
    match backend {
        Backend::Census { window } => census(&quarter, *window),
        Backend::NormalizedPatch { window } => normalized_patch(&quarter, *window),
        Backend::ExternalFile { path } => external(quarter.dims(), path),
    }
}
