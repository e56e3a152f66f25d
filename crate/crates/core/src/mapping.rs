//! Per-pixel prediction maps from a hyperspectral cube and a saved model.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ndvi_mask, remove_bands, resample_spectrum, HyperCube, Mask, PredictionMap,
    DEFAULT_NDVI_THRESHOLD, DEFAULT_NIR_NM, DEFAULT_RED_NM, DEFAULT_WATER_BANDS,
};
use crate::error::{Error, Result};
use crate::model_file::SavedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub water_bands: Vec<(f64, f64)>,
    pub red_nm: f64,
    pub nir_nm: f64,
    pub ndvi_threshold: f64,
    /// When false every pixel is predicted.
    pub apply_mask: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            water_bands: DEFAULT_WATER_BANDS.to_vec(),
            red_nm: DEFAULT_RED_NM,
            nir_nm: DEFAULT_NIR_NM,
            ndvi_threshold: DEFAULT_NDVI_THRESHOLD,
            apply_mask: true,
        }
    }
}

/// A cube reduced to the model's wavelength grid.
#[derive(Debug, Clone)]
pub struct PreparedCube {
    pub width: usize,
    pub height: usize,
    pub mask: Mask,
    /// Row-major; `None` for masked pixels.
    pub pixels: Vec<Option<Vec<f64>>>,
}

/// Masks non-vegetation, drops water bands and interpolates each kept pixel
/// onto `model_wavelengths`.
pub fn prepare_cube(
    cube: &HyperCube,
    model_wavelengths: &[f64],
    opts: &MapOptions,
) -> Result<PreparedCube> {
    if let Some((w, (lo, hi))) = model_wavelengths.iter().find_map(|&w| {
        opts.water_bands
            .iter()
            .find(|&&(lo, hi)| w >= lo && w <= hi)
            .map(|r| (w, *r))
    }) {
        return Err(Error::Range(format!(
            "model wavelength {w} nm lies in the removed band range [{lo}, {hi}] nm"
        )));
    }
    let mask = if opts.apply_mask {
        ndvi_mask(cube, opts.red_nm, opts.nir_nm, opts.ndvi_threshold)?
    } else {
        Mask {
            width: cube.width(),
            height: cube.height(),
            data: vec![true; cube.width() * cube.height()],
        }
    };
    let reduced = remove_bands(cube, &opts.water_bands)?;
    let mut pixels = Vec::with_capacity(mask.data.len());
    for row in 0..cube.height() {
        for col in 0..cube.width() {
            pixels.push(if mask.get(row, col) {
                Some(resample_spectrum(
                    reduced.wavelengths(),
                    &reduced.pixel_spectrum(row, col),
                    model_wavelengths,
                )?)
            } else {
                None
            });
        }
    }
    Ok(PreparedCube {
        width: cube.width(),
        height: cube.height(),
        mask,
        pixels,
    })
}

/// Predictive-mean map of `task`, computed one image row per work item on up
/// to `jobs` threads. The result does not depend on `jobs`.
pub fn predict_map(
    model: &SavedModel,
    prepared: &PreparedCube,
    task: usize,
    jobs: usize,
) -> Result<PredictionMap> {
    let d = model.wavelengths.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<Result<Vec<Option<f64>>>> = pool.install(|| {
        prepared
            .pixels
            .par_chunks(prepared.width.max(1))
            .map(|row| {
                let kept: Vec<&Vec<f64>> = row.iter().flatten().collect();
                let mut out = vec![None; row.len()];
                if kept.is_empty() {
                    return Ok(out);
                }
                let xs = DMatrix::from_fn(kept.len(), d, |i, j| kept[i][j]);
                let (mean, _) = model.predict(&xs, task)?;
                let mut it = mean.into_iter();
                for (o, p) in out.iter_mut().zip(row) {
                    if p.is_some() {
                        *o = it.next();
                    }
                }
                Ok(out)
            })
            .collect()
    });
    let mut values = Vec::with_capacity(prepared.pixels.len());
    for r in rows {
        values.extend(r?);
    }
    Ok(PredictionMap {
        width: prepared.width,
        height: prepared.height,
        values,
    })
}
