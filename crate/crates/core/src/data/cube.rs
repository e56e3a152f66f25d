//! Band-sequential hyperspectral cubes, NDVI masking and raster output.
//!
//! A cube is a raw little-endian `f32` file laid out `(band, row, col)` plus a
//! JSON sidecar:
//!
//! ```json
//! {"width": 4, "height": 4, "bands": 3, "wavelengths": [670, 800, 900],
//!  "scale_factor": 0.0001, "interleave": "bsq", "data_type": "float32",
//!  "byte_order": "little-endian"}
//! ```
//!
//! `scale_factor` is optional; pixel values are multiplied by it on access.
//!
//! Prediction maps are written as a CSV grid (one image row per line, masked
//! pixels as empty cells), an 8-bit grayscale PNG, and a JSON legend. Gray
//! level 0 marks masked pixels; unmasked values map linearly onto 1..=255 with
//! `gray = 1 + round(254·(v − min)/(max − min))` (255 when `max = min`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::spectra::Banded;

pub const DEFAULT_RED_NM: f64 = 670.0;
pub const DEFAULT_NIR_NM: f64 = 800.0;
pub const DEFAULT_NDVI_THRESHOLD: f64 = 0.3;

/// Maximum distance between a requested wavelength and the band used for it.
const BAND_MATCH_NM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    bands: usize,
    wavelengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_factor: Option<f64>,
    #[serde(default = "bsq")]
    interleave: String,
    #[serde(default = "float32")]
    data_type: String,
    #[serde(default = "little_endian")]
    byte_order: String,
}

fn bsq() -> String {
    "bsq".into()
}
fn float32() -> String {
    "float32".into()
}
fn little_endian() -> String {
    "little-endian".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    wavelengths: Vec<f64>,
    /// `(band, row, col)` order.
    data: Vec<f32>,
    scale_factor: Option<f64>,
}

impl HyperCube {
    pub fn new(
        width: usize,
        height: usize,
        wavelengths: Vec<f64>,
        data: Vec<f32>,
        scale_factor: Option<f64>,
    ) -> Result<Self> {
        if data.len() != width * height * wavelengths.len() {
            return Err(Error::Validation(format!(
                "cube data has {} values, expected {}x{}x{}",
                data.len(),
                wavelengths.len(),
                height,
                width
            )));
        }
        if let Some(i) = (1..wavelengths.len()).find(|&i| !(wavelengths[i] > wavelengths[i - 1])) {
            return Err(Error::Validation(format!(
                "cube wavelengths not increasing at band {i}"
            )));
        }
        if let Some(s) = scale_factor {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Validation(format!("invalid scale factor {s}")));
            }
        }
        Ok(HyperCube {
            width,
            height,
            wavelengths,
            data,
            scale_factor,
        })
    }

    /// Builds a cube from per-pixel spectra given in row-major pixel order.
    pub fn from_pixels(
        width: usize,
        height: usize,
        wavelengths: Vec<f64>,
        pixels: &[Vec<f32>],
    ) -> Result<Self> {
        let bands = wavelengths.len();
        if pixels.len() != width * height || pixels.iter().any(|p| p.len() != bands) {
            return Err(Error::Validation(
                "pixel spectra do not match cube shape".into(),
            ));
        }
        let mut data = vec![0.0f32; width * height * bands];
        for (px, spec) in pixels.iter().enumerate() {
            for (b, &v) in spec.iter().enumerate() {
                data[b * width * height + px] = v;
            }
        }
        HyperCube::new(width, height, wavelengths, data, None)
    }

    pub fn read(data_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path)?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("cube sidecar: {e}"),
        })?;
        if sc.interleave != "bsq" || sc.data_type != "float32" || sc.byte_order != "little-endian" {
            return Err(Error::Validation(format!(
                "unsupported cube layout {}/{}/{}",
                sc.interleave, sc.data_type, sc.byte_order
            )));
        }
        if sc.wavelengths.len() != sc.bands {
            return Err(Error::Validation(format!(
                "sidecar lists {} wavelengths for {} bands",
                sc.wavelengths.len(),
                sc.bands
            )));
        }
        let bytes = fs::read(data_path)?;
        if bytes.len() != 4 * sc.width * sc.height * sc.bands {
            return Err(Error::Validation(format!(
                "cube file has {} bytes, expected {}",
                bytes.len(),
                4 * sc.width * sc.height * sc.bands
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        HyperCube::new(sc.width, sc.height, sc.wavelengths, data, sc.scale_factor)
    }

    pub fn write(&self, data_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(data_path, bytes)?;
        let sc = Sidecar {
            width: self.width,
            height: self.height,
            bands: self.wavelengths.len(),
            wavelengths: self.wavelengths.clone(),
            scale_factor: self.scale_factor,
            interleave: bsq(),
            data_type: float32(),
            byte_order: little_endian(),
        };
        let text =
            serde_json::to_string_pretty(&sc).map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(sidecar_path, text)?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn raw_data(&self) -> &[f32] {
        &self.data
    }

    /// Scaled value of one band at one pixel.
    pub fn value(&self, band: usize, row: usize, col: usize) -> f64 {
        let v = self.data[band * self.width * self.height + row * self.width + col] as f64;
        v * self.scale_factor.unwrap_or(1.0)
    }

    /// Scaled spectrum of one pixel.
    pub fn pixel_spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.num_bands())
            .map(|b| self.value(b, row, col))
            .collect()
    }

    /// Band closest to `nm`, if one lies within ±5 nm.
    pub fn nearest_band(&self, nm: f64) -> Option<usize> {
        self.wavelengths
            .iter()
            .enumerate()
            .map(|(i, w)| (i, (w - nm).abs()))
            .filter(|(_, d)| *d <= BAND_MATCH_NM)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

impl Banded for HyperCube {
    fn band_wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    fn keep_bands(&self, keep: &[bool]) -> Self {
        let plane = self.width * self.height;
        let mut data = Vec::with_capacity(self.data.len());
        let mut wavelengths = Vec::new();
        for (b, &k) in keep.iter().enumerate() {
            if k {
                wavelengths.push(self.wavelengths[b]);
                data.extend_from_slice(&self.data[b * plane..(b + 1) * plane]);
            }
        }
        HyperCube {
            wavelengths,
            data,
            ..self.clone()
        }
    }
}

/// `(nir − red)/(nir + red)`; `None` when the denominator is ≤ 1e−12.
pub fn ndvi(red: f64, nir: f64) -> Option<f64> {
    let den = nir + red;
    if den <= 1e-12 {
        None
    } else {
        Some((nir - red) / den)
    }
}

/// Row-major pixel mask; `true` marks vegetation kept for prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|k| **k).count()
    }

    /// 1.0 for kept pixels, 0.0 otherwise.
    pub fn to_map(&self) -> PredictionMap {
        PredictionMap {
            width: self.width,
            height: self.height,
            values: self
                .data
                .iter()
                .map(|&k| Some(if k { 1.0 } else { 0.0 }))
                .collect(),
        }
    }
}

/// Pixels with NDVI ≥ `threshold` are kept.
pub fn ndvi_mask(cube: &HyperCube, red_nm: f64, nir_nm: f64, threshold: f64) -> Result<Mask> {
    let red = cube
        .nearest_band(red_nm)
        .ok_or_else(|| Error::Config(format!("no band within 5 nm of red {red_nm} nm")))?;
    let nir = cube
        .nearest_band(nir_nm)
        .ok_or_else(|| Error::Config(format!("no band within 5 nm of NIR {nir_nm} nm")))?;
    let mut data = Vec::with_capacity(cube.width * cube.height);
    for row in 0..cube.height {
        for col in 0..cube.width {
            let keep = ndvi(cube.value(red, row, col), cube.value(nir, row, col))
                .is_some_and(|v| v >= threshold);
            data.push(keep);
        }
    }
    Ok(Mask {
        width: cube.width,
        height: cube.height,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Legend {
    pub min: f64,
    pub max: f64,
    pub masked_gray: u8,
    pub low_gray: u8,
    pub high_gray: u8,
    pub scaling: String,
}

/// Row-major raster of optional values (`None` = masked).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<f64>>,
}

impl PredictionMap {
    /// Min and max over unmasked pixels.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .flatten()
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in 0..self.height {
            let cells: Vec<String> = (0..self.width)
                .map(|col| {
                    self.values[row * self.width + col].map_or(String::new(), |v| v.to_string())
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn gray_levels(&self) -> Vec<u8> {
        let (lo, hi) = self.range().unwrap_or((0.0, 0.0));
        self.values
            .iter()
            .map(|v| match v {
                None => 0,
                Some(_) if hi <= lo => 255,
                Some(v) => 1 + (254.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 254.0) as u8,
            })
            .collect()
    }

    pub fn legend(&self) -> Legend {
        let (min, max) = self.range().unwrap_or((f64::NAN, f64::NAN));
        Legend {
            min,
            max,
            masked_gray: 0,
            low_gray: 1,
            high_gray: 255,
            scaling: "gray = 1 + round(254 * (value - min) / (max - min)); 0 = masked".into(),
        }
    }

    /// Writes `<stem>.csv`, `<stem>.png` and `<stem>.legend.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let img =
            image::GrayImage::from_raw(self.width as u32, self.height as u32, self.gray_levels())
                .expect("gray buffer matches map size");
        img.save(dir.join(format!("{stem}.png")))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let legend = serde_json::to_string_pretty(&self.legend())
            .map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(dir.join(format!("{stem}.legend.json")), legend)?;
        Ok(())
    }
}
