use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Observation, ObservationSet};

/// Conventional atmospheric water absorption windows, nm.
pub const DEFAULT_WATER_BANDS: [(f64, f64); 2] = [(1350.0, 1460.0), (1790.0, 1960.0)];

/// Tolerated reflectance range; sensor artifacts can push values slightly
/// outside `[0, 1]`.
const REFLECTANCE_RANGE: (f64, f64) = (-0.05, 1.5);

/// Reflectance spectra with (possibly missing) biochemical labels.
///
/// CSV layout: a header row of wavelengths (numeric, strictly increasing)
/// followed by task names, then one sample per row. A task header may carry
/// its unit in brackets, e.g. `nitrogen [%]`. Empty label cells are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraTable {
    wavelengths: Vec<f64>,
    spectra: DMatrix<f64>,
    /// Row-major `N×M`.
    labels: Vec<Vec<Option<f64>>>,
    task_names: Vec<String>,
    units: Vec<Option<String>>,
}

impl SpectraTable {
    pub fn new(
        wavelengths: Vec<f64>,
        spectra: DMatrix<f64>,
        labels: Vec<Vec<Option<f64>>>,
        task_names: Vec<String>,
        units: Vec<Option<String>>,
    ) -> Result<Self> {
        if spectra.ncols() != wavelengths.len() {
            return Err(Error::Validation(format!(
                "{} bands but {} wavelengths",
                spectra.ncols(),
                wavelengths.len()
            )));
        }
        if let Some(i) = (1..wavelengths.len()).find(|&i| !(wavelengths[i] > wavelengths[i - 1])) {
            return Err(Error::Validation(format!(
                "wavelengths not strictly increasing at column {i} ({} nm)",
                wavelengths[i]
            )));
        }
        if labels.len() != spectra.nrows() {
            return Err(Error::Validation(
                "label rows differ from spectra rows".into(),
            ));
        }
        if task_names.len() != units.len() {
            return Err(Error::Validation(
                "one unit entry per task is required".into(),
            ));
        }
        if labels.iter().any(|r| r.len() != task_names.len()) {
            return Err(Error::Validation(
                "label row width differs from task count".into(),
            ));
        }
        for (l, name) in task_names.iter().enumerate() {
            if labels.iter().all(|r| r[l].is_none()) {
                return Err(Error::Validation(format!("task `{name}` has no labels")));
            }
        }
        Ok(SpectraTable {
            wavelengths,
            spectra,
            labels,
            task_names,
            units,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| csv_error(e, 1))?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        };

        let mut wavelengths = Vec::new();
        let mut task_names = Vec::new();
        let mut units = Vec::new();
        for (col, field) in header.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(w) if task_names.is_empty() => {
                    if let Some(&prev) = wavelengths.last() {
                        if !(w > prev) {
                            return Err(Error::Parse {
                                line: 1,
                                message: format!(
                                    "wavelength header not strictly increasing at column {} (`{field}` after {prev})",
                                    col + 1
                                ),
                            });
                        }
                    }
                    wavelengths.push(w);
                }
                _ => {
                    if field.is_empty() {
                        return Err(Error::Parse {
                            line: 1,
                            message: format!("empty header at column {}", col + 1),
                        });
                    }
                    let (name, unit) = split_unit(field);
                    task_names.push(name);
                    units.push(unit);
                }
            }
        }
        if wavelengths.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "header has no wavelength columns".into(),
            });
        }
        if task_names.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "header has no task columns".into(),
            });
        }

        let d = wavelengths.len();
        let width = d + task_names.len();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| csv_error(e, 0))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() == 1 && rec.get(0) == Some("") {
                continue;
            }
            if rec.len() != width {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            for (col, field) in rec.iter().take(d).enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad reflectance `{field}` at column {}", col + 1),
                })?;
                if !(REFLECTANCE_RANGE.0..=REFLECTANCE_RANGE.1).contains(&v) {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "reflectance {v} at column {} outside [-0.05, 1.5]",
                            col + 1
                        ),
                    });
                }
                values.push(v);
            }
            let row = rec
                .iter()
                .skip(d)
                .enumerate()
                .map(|(t, field)| {
                    if field.is_empty() {
                        Ok(None)
                    } else {
                        field
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .map(Some)
                            .ok_or_else(|| Error::Parse {
                                line,
                                message: format!(
                                    "bad label `{field}` for task `{}`",
                                    task_names[t]
                                ),
                            })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(row);
        }
        let spectra = DMatrix::from_row_slice(labels.len(), d, &values);
        SpectraTable::new(wavelengths, spectra, labels, task_names, units)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.wavelengths.iter().map(|v| v.to_string()).collect();
        for (name, unit) in self.task_names.iter().zip(&self.units) {
            header.push(match unit {
                Some(u) => format!("{name} [{u}]"),
                None => name.clone(),
            });
        }
        w.write_record(&header).map_err(|e| csv_error(e, 1))?;
        for i in 0..self.num_samples() {
            let mut rec: Vec<String> = self.spectra.row(i).iter().map(|v| v.to_string()).collect();
            rec.extend(
                self.labels[i]
                    .iter()
                    .map(|v| v.map_or(String::new(), |v| v.to_string())),
            );
            w.write_record(&rec).map_err(|e| csv_error(e, i + 2))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn spectra(&self) -> &DMatrix<f64> {
        &self.spectra
    }

    pub fn num_samples(&self) -> usize {
        self.spectra.nrows()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn units(&self) -> &[Option<String>] {
        &self.units
    }

    pub fn label(&self, sample: usize, task: usize) -> Option<f64> {
        self.labels[sample][task]
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|n| n == name)
    }

    /// Sample indices carrying a label for `task`.
    pub fn labelled(&self, task: usize) -> Vec<usize> {
        (0..self.num_samples())
            .filter(|&i| self.labels[i][task].is_some())
            .collect()
    }

    /// Keeps only the given task columns, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.num_tasks()) {
            return Err(Error::Config(format!("task index {t} out of range")));
        }
        SpectraTable::new(
            self.wavelengths.clone(),
            self.spectra.clone(),
            self.labels
                .iter()
                .map(|r| tasks.iter().map(|&t| r[t]).collect())
                .collect(),
            tasks.iter().map(|&t| self.task_names[t].clone()).collect(),
            tasks.iter().map(|&t| self.units[t].clone()).collect(),
        )
    }

    /// Every labelled (sample, task) pair, ordered by task then sample.
    pub fn observations(&self) -> ObservationSet {
        let mut obs = Vec::new();
        for l in 0..self.num_tasks() {
            for i in 0..self.num_samples() {
                if let Some(y) = self.labels[i][l] {
                    obs.push(Observation {
                        input: i,
                        task: l,
                        target: y,
                    });
                }
            }
        }
        ObservationSet::new(self.spectra.clone(), self.num_tasks(), obs)
            .expect("table labels index valid samples and tasks")
    }

    /// Every spectrum linearly interpolated onto `dst`.
    pub fn resample(&self, dst: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(self.num_samples() * dst.len());
        for i in 0..self.num_samples() {
            let src: Vec<f64> = self.spectra.row(i).iter().cloned().collect();
            values.extend(resample_spectrum(&self.wavelengths, &src, dst)?);
        }
        SpectraTable::new(
            dst.to_vec(),
            DMatrix::from_row_slice(self.num_samples(), dst.len(), &values),
            self.labels.clone(),
            self.task_names.clone(),
            self.units.clone(),
        )
    }
}

fn split_unit(field: &str) -> (String, Option<String>) {
    if let (Some(open), true) = (field.rfind('['), field.ends_with(']')) {
        let name = field[..open].trim().to_string();
        let unit = field[open + 1..field.len() - 1].trim().to_string();
        if !name.is_empty() {
            return (name, Some(unit).filter(|u| !u.is_empty()));
        }
    }
    (field.to_string(), None)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn load_spectra_csv(path: impl AsRef<Path>) -> Result<SpectraTable> {
    SpectraTable::from_reader(File::open(path)?)
}

pub fn save_spectra_csv(table: &SpectraTable, path: impl AsRef<Path>) -> Result<()> {
    table.to_writer(File::create(path)?)
}

/// Piecewise-linear interpolation of `(src_wavelengths, src_values)` at
/// `dst_wavelengths`. No extrapolation.
pub fn resample_spectrum(
    src_wavelengths: &[f64],
    src_values: &[f64],
    dst_wavelengths: &[f64],
) -> Result<Vec<f64>> {
    if src_wavelengths.len() != src_values.len() || src_wavelengths.is_empty() {
        return Err(Error::Shape(format!(
            "{} source wavelengths for {} values",
            src_wavelengths.len(),
            src_values.len()
        )));
    }
    let lo = src_wavelengths[0];
    let hi = src_wavelengths[src_wavelengths.len() - 1];
    dst_wavelengths
        .iter()
        .map(|&w| {
            if !(w >= lo && w <= hi) {
                return Err(Error::Range(format!(
                    "wavelength {w} nm outside the source range [{lo}, {hi}] nm"
                )));
            }
            let k = src_wavelengths.partition_point(|&s| s < w);
            if src_wavelengths[k] == w {
                return Ok(src_values[k]);
            }
            let (w0, w1) = (src_wavelengths[k - 1], src_wavelengths[k]);
            let (v0, v1) = (src_values[k - 1], src_values[k]);
            Ok(v0 + (v1 - v0) * (w - w0) / (w1 - w0))
        })
        .collect()
}

/// Which bands survive removal of the closed `[lo, hi]` ranges.
pub fn band_keep_mask(wavelengths: &[f64], exclusion_ranges: &[(f64, f64)]) -> Result<Vec<bool>> {
    if let Some(&(lo, hi)) = exclusion_ranges.iter().find(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Config(format!("invalid band range [{lo}, {hi}]")));
    }
    let keep: Vec<bool> = wavelengths
        .iter()
        .map(|&w| !exclusion_ranges.iter().any(|&(lo, hi)| w >= lo && w <= hi))
        .collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::EmptyResult);
    }
    Ok(keep)
}

/// Data with a wavelength axis from which bands can be dropped.
pub trait Banded: Sized {
    fn band_wavelengths(&self) -> &[f64];
    fn keep_bands(&self, keep: &[bool]) -> Self;
}

impl Banded for SpectraTable {
    fn band_wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    fn keep_bands(&self, keep: &[bool]) -> Self {
        let cols: Vec<usize> = (0..keep.len()).filter(|&c| keep[c]).collect();
        SpectraTable {
            wavelengths: cols.iter().map(|&c| self.wavelengths[c]).collect(),
            spectra: self.spectra.select_columns(&cols),
            ..self.clone()
        }
    }
}

/// Drops every band whose wavelength lies in one of the closed ranges.
pub fn remove_bands<T: Banded>(data: &T, exclusion_ranges: &[(f64, f64)]) -> Result<T> {
    let keep = band_keep_mask(data.band_wavelengths(), exclusion_ranges)?;
    Ok(data.keep_bands(&keep))
}
