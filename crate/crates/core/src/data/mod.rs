//! Ingestion and preprocessing of spectra tables and hyperspectral cubes,
//! and the train/test splitting protocol.

mod cube;
mod spectra;
mod split;

pub use cube::{
    ndvi, ndvi_mask, HyperCube, Mask, PredictionMap, DEFAULT_NDVI_THRESHOLD, DEFAULT_NIR_NM,
    DEFAULT_RED_NM,
};
pub use spectra::{
    band_keep_mask, load_spectra_csv, remove_bands, resample_spectrum, save_spectra_csv, Banded,
    SpectraTable, DEFAULT_WATER_BANDS,
};
pub use split::{split_trial, TargetScaler, TrialSplit};
