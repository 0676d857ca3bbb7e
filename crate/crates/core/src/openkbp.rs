//! Loader for OpenKBP-style patient directories.
//!
//! Each file is a sparse CSV of `flat_index,value` rows over a flattened
//! cubic grid (128^3 in the public dataset). Structure masks list indices
//! only. Expected files: `ct.csv`, `dose.csv`, `possible_dose_mask.csv` and
//! one `<ROI>.csv` per structure named as in [`ROI_NAMES`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{PatientCase, ROI_NAMES};
use crate::tensor::{Grid, Shape};

pub const OPENKBP_EXTENT: usize = 128;
pub const CT_CLIP: f64 = 4095.0;

/// A loaded case plus notes about files that were absent.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub case: PatientCase,
    pub warnings: Vec<String>,
}

/// Reads `(index, value)` rows. Rows whose first field is not an integer
/// (such as a header) are skipped. A missing value reads as 1.
pub fn read_sparse_csv(path: &Path, voxels: usize) -> Result<Vec<(usize, f32)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let Some(Ok(index)) = record.get(0).map(|s| s.trim().parse::<usize>()) else {
            continue;
        };
        if index >= voxels {
            return Err(Error::format(
                path,
                format!("row {}: index {index} outside a grid of {voxels} voxels", row + 1),
            ));
        }
        let value = match record.get(1).map(str::trim) {
            None | Some("") => 1.0,
            Some(s) => s.parse::<f32>().map_err(|e| {
                Error::format(path, format!("row {}: bad value {s:?}: {e}", row + 1))
            })?,
        };
        out.push((index, value));
    }
    Ok(out)
}

fn densify(entries: &[(usize, f32)], voxels: usize) -> Vec<f32> {
    let mut out = vec![0.0; voxels];
    for &(i, v) in entries {
        out[i] = v;
    }
    out
}

/// Loads one patient directory onto an `extent^3` grid.
pub fn load_openkbp_case(dir: &Path, extent: usize) -> Result<LoadedCase> {
    let voxels = extent * extent * extent;
    let shape = Shape::new(1, extent, extent, extent);
    let mut warnings = Vec::new();
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());

    let dose_path = dir.join("dose.csv");
    if !dose_path.exists() {
        return Err(Error::format(&dose_path, "dose file is missing"));
    }
    let dose = densify(&read_sparse_csv(&dose_path, voxels)?, voxels);

    let ct_path = dir.join("ct.csv");
    let ct = if ct_path.exists() {
        let mut ct = densify(&read_sparse_csv(&ct_path, voxels)?, voxels);
        for v in &mut ct {
            *v = ((*v as f64).clamp(0.0, CT_CLIP) / CT_CLIP) as f32;
        }
        ct
    } else {
        warnings.push("ct.csv missing; CT set to zero".to_string());
        vec![0.0; voxels]
    };

    let mask = |name: &str, warnings: &mut Vec<String>| -> Result<Vec<f32>> {
        let path = dir.join(format!("{name}.csv"));
        if !path.exists() {
            warnings.push(format!("{name}.csv missing; mask left empty"));
            return Ok(vec![0.0; voxels]);
        }
        let entries = read_sparse_csv(&path, voxels)?;
        let mut out = vec![0.0; voxels];
        for (i, _) in entries {
            out[i] = 1.0;
        }
        Ok(out)
    };

    let mut rois = Vec::with_capacity(voxels * ROI_NAMES.len());
    for name in ROI_NAMES {
        rois.extend(mask(name, &mut warnings)?);
    }
    let valid = if dir.join("possible_dose_mask.csv").exists() {
        mask("possible_dose_mask", &mut warnings)?
    } else {
        warnings.push("possible_dose_mask.csv missing; every voxel treated as valid".to_string());
        vec![1.0; voxels]
    };

    Ok(LoadedCase {
        case: PatientCase {
            id,
            ct: Grid::from_vec(shape, ct)?,
            rois: Grid::from_vec(shape.with_channels(ROI_NAMES.len()), rois)?,
            dose: Grid::from_vec(shape, dose)?,
            valid: Grid::from_vec(shape, valid)?,
        },
        warnings,
    })
}
