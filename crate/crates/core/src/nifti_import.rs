//! Conversion of a CT volume and its label volume (0 background, 1 liver,
//! 2 lesion) into axial slice records.

use std::path::Path;

use nifti::{NiftiObject, NiftiVolume, RandomAccessNiftiVolume, ReaderOptions};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::imaging::{Grid, HuWindow, Mask, Provenance, Slice};

#[derive(Clone, Debug, PartialEq)]
pub struct ImportOptions {
    pub window: HuWindow,
    /// Slices with fewer liver pixels are skipped.
    pub min_liver_pixels: usize,
    pub liver_label: u32,
    pub lesion_label: u32,
}

impl Default for ImportOptions {
    fn default() -> Self {
        Self { window: HuWindow::LIVER, min_liver_pixels: 1, liver_label: 1, lesion_label: 2 }
    }
}

struct Volume {
    dims: [usize; 3],
    spacing: (f64, f64),
    values: Vec<f32>,
}

fn read_volume(path: &Path) -> Result<Volume> {
    if !path.is_file() {
        return Err(Error::NotFound(format!("volume {}", path.display())));
    }
    let object = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e.to_string()))?;
    let pixdim = object.header().pixdim;
    let volume = object.into_volume();
    let dim = volume.dim();
    if dim.len() < 3 || dim[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, format!("expected a 3D volume, got dimensions {dim:?}")));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];
    let mut values = Vec::with_capacity(dims.iter().product());
    for z in 0..dim[2] {
        for y in 0..dim[1] {
            for x in 0..dim[0] {
                values.push(volume.get_f32(&[x, y, z]).map_err(|e| Error::format(path, e.to_string()))?);
            }
        }
    }
    let spacing = (pixdim[2].abs().max(f32::MIN_POSITIVE) as f64, pixdim[1].abs().max(f32::MIN_POSITIVE) as f64);
    Ok(Volume { dims, spacing, values })
}

/// 8-connected components of `mask`, in raster order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Mask> {
    let (rows, cols) = mask.shape();
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || !mask.get(start / cols, start % cols) {
            continue;
        }
        let mut component = Mask::empty(rows, cols);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            let (r, c) = (k / cols, k % cols);
            component.set(r, c, true);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    if mask.get_or_zero(y, x) {
                        let j = y as usize * cols + x as usize;
                        if !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        out.push(component);
    }
    out
}

/// One record per axial slice with liver; each connected lesion region
/// becomes one lesion mask. Lesion pixels count as liver.
pub fn import_volume(ct: &Path, labels: &Path, options: &ImportOptions) -> Result<Vec<SampleRecord>> {
    options.window.validate()?;
    let ct = read_volume(ct)?;
    let labels_vol = read_volume(labels)?;
    if ct.dims != labels_vol.dims {
        return Err(Error::invalid(format!("CT {:?} and labels {:?} differ in size", ct.dims, labels_vol.dims)));
    }
    let [nx, ny, nz] = ct.dims;
    let plane = nx * ny;
    let mut records = Vec::new();
    for z in 0..nz {
        let label = |y: usize, x: usize| labels_vol.values[z * plane + y * nx + x].round() as u32;
        let liver = Mask::from_fn(ny, nx, |y, x| {
            let l = label(y, x);
            l == options.liver_label || l == options.lesion_label
        });
        if liver.count() < options.min_liver_pixels.max(1) {
            continue;
        }
        let lesion = Mask::from_fn(ny, nx, |y, x| label(y, x) == options.lesion_label);
        let pixels = Grid::new(ny, nx, ct.values[z * plane..(z + 1) * plane].to_vec())?;
        let slice = Slice::new(pixels, ct.spacing, Provenance::Real)?;
        records.push(SampleRecord::new(slice, liver, connected_components(&lesion), options.window)?);
    }
    Ok(records)
}
