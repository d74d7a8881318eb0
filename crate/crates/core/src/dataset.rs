//! On-disk datasets: one directory per sample holding `slice.lsf`,
//! `liver_mask.lsf`, `lesion_mask_<k>.lsf` and a `meta` TOML record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{
    extract_lesion_sample, normalize_hu, DensityHistogram, Grid, HuWindow, LesionSample, Mask, Provenance, Slice, HIST_BINS,
};
use crate::lsf;
use crate::phantom::Phantom;

/// A slice with its liver and lesion annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub slice: Slice,
    pub liver: Mask,
    pub lesions: Vec<Mask>,
    /// Window that maps the slice's stored values onto [0, 1].
    pub window: HuWindow,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    provenance: Provenance,
    spacing: (f64, f64),
    window: HuWindow,
    lesions: usize,
}

impl SampleRecord {
    pub fn new(slice: Slice, liver: Mask, lesions: Vec<Mask>, window: HuWindow) -> Result<Self> {
        window.validate()?;
        let shape = slice.pixels.shape();
        if liver.shape() != shape || lesions.iter().any(|m| m.shape() != shape) {
            return Err(Error::invalid("annotation masks must match the slice shape"));
        }
        Ok(Self { slice, liver, lesions, window })
    }

    /// Phantoms are stored in normalized units.
    pub fn from_phantom(phantom: &Phantom) -> Self {
        Self {
            slice: phantom.slice.clone(),
            liver: phantom.liver.clone(),
            lesions: phantom.lesions.clone(),
            window: HuWindow::UNIT,
        }
    }

    /// Union of all lesion masks.
    pub fn lesion_union(&self) -> Mask {
        let (r, c) = self.slice.pixels.shape();
        self.lesions.iter().fold(Mask::empty(r, c), |acc, m| acc.union(m).expect("shapes checked"))
    }

    pub fn normalized(&self) -> Result<Grid> {
        normalize_hu(&self.slice, self.window)
    }

    /// Lesion-centred training samples, one per lesion.
    pub fn lesion_samples(&self, patch_size: usize) -> Result<Vec<LesionSample>> {
        self.lesions
            .iter()
            .map(|m| extract_lesion_sample(&self.slice, m, patch_size, self.window))
            .collect()
    }
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    lsf::write(path, &[mask.rows(), mask.cols()], &mask.to_f32())
}

fn read_grid(path: &Path) -> Result<Grid> {
    let (shape, values) = lsf::read(path)?;
    if shape.len() != 2 {
        return Err(Error::format(path, format!("expected a 2D tensor, got shape {shape:?}")));
    }
    Grid::new(shape[0], shape[1], values).map_err(|e| Error::format(path, e.to_string()))
}

fn read_mask(path: &Path) -> Result<Mask> {
    let grid = read_grid(path)?;
    Mask::from_f32(grid.rows(), grid.cols(), grid.data()).map_err(|e| Error::format(path, e.to_string()))
}

pub const META_FILE: &str = "meta";

pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = &record.slice.pixels;
    lsf::write(&dir.join("slice.lsf"), &[p.rows(), p.cols()], p.data())?;
    write_mask(&dir.join("liver_mask.lsf"), &record.liver)?;
    for (k, m) in record.lesions.iter().enumerate() {
        write_mask(&dir.join(format!("lesion_mask_{k}.lsf")), m)?;
    }
    let meta = Meta {
        provenance: record.slice.provenance,
        spacing: record.slice.spacing,
        window: record.window,
        lesions: record.lesions.len(),
    };
    fs::write(dir.join(META_FILE), toml::to_string(&meta).map_err(|e| Error::Configuration(e.to_string()))?)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|_| Error::NotFound(format!("sample record {}", meta_path.display())))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let pixels = read_grid(&dir.join("slice.lsf"))?;
    let slice = Slice::new(pixels, meta.spacing, meta.provenance)?;
    let liver = read_mask(&dir.join("liver_mask.lsf"))?;
    let lesions = (0..meta.lesions)
        .map(|k| read_mask(&dir.join(format!("lesion_mask_{k}.lsf"))))
        .collect::<Result<Vec<_>>>()?;
    SampleRecord::new(slice, liver, lesions, meta.window).map_err(|e| Error::format(dir, e.to_string()))
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:05}"))
}

/// Writes `records` as `sample_00000`, `sample_00001`, ... under `root`.
pub fn write_dataset(root: &Path, records: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, r) in records.iter().enumerate() {
        write_sample(&sample_dir(root, i), r)?;
    }
    Ok(())
}

/// Reads every `sample_*` directory under `root` in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    sorted_dirs(root, "sample_")?.iter().map(|d| read_sample(d)).collect()
}

fn sorted_dirs(root: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::NotFound(format!("dataset directory {}", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(prefix)))
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Serialize, Deserialize)]
struct LesionMeta {
    rescaled: bool,
}

pub fn lesion_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("lesion_{index:05}"))
}

/// Writes each sample as `lesion_NNNNN/` holding the patch, its mask, its
/// 100-bin histogram and a small meta record.
pub fn write_lesion_samples(root: &Path, samples: &[LesionSample]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, s) in samples.iter().enumerate() {
        let dir = lesion_dir(root, i);
        fs::create_dir_all(&dir)?;
        lsf::write(&dir.join("patch.lsf"), &[s.patch.rows(), s.patch.cols()], s.patch.data())?;
        write_mask(&dir.join("mask.lsf"), &s.mask)?;
        let hist: Vec<f32> = s.histogram()?.bins().iter().map(|&v| v as f32).collect();
        lsf::write(&dir.join("histogram.lsf"), &[hist.len()], &hist)?;
        let meta = toml::to_string(&LesionMeta { rescaled: s.rescaled }).map_err(|e| Error::Configuration(e.to_string()))?;
        fs::write(dir.join(META_FILE), meta)?;
    }
    Ok(())
}

/// A lesion sample read back with its directory name as id.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredLesion {
    pub id: String,
    pub sample: LesionSample,
    pub histogram: DensityHistogram,
}

pub fn read_histogram(path: &Path) -> Result<DensityHistogram> {
    let (shape, values) = lsf::read(path)?;
    if shape.len() != 1 || shape[0] != HIST_BINS {
        return Err(Error::format(path, format!("expected a {HIST_BINS}-bin histogram, got shape {shape:?}")));
    }
    DensityHistogram::from_weights(&values.iter().map(|&v| v as f64).collect::<Vec<_>>())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads every `lesion_*` directory under `root` in name order.
pub fn read_lesion_samples(root: &Path) -> Result<Vec<StoredLesion>> {
    sorted_dirs(root, "lesion_")?
        .iter()
        .map(|dir| {
            let meta_path = dir.join(META_FILE);
            let text = fs::read_to_string(&meta_path)
                .map_err(|_| Error::NotFound(format!("lesion record {}", meta_path.display())))?;
            let meta: LesionMeta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
            let patch = read_grid(&dir.join("patch.lsf"))?;
            let mask = read_mask(&dir.join("mask.lsf"))?;
            let sample = LesionSample::new(patch, mask, meta.rescaled).map_err(|e| Error::format(dir, e.to_string()))?;
            let histogram = read_histogram(&dir.join("histogram.lsf"))?;
            let id = dir.file_name().expect("named").to_string_lossy().into_owned();
            Ok(StoredLesion { id, sample, histogram })
        })
        .collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file below `root`: relative path, length and
/// contents in sorted path order.
pub fn directory_digest(root: &Path) -> Result<String> {
    if !root.is_dir() {
        return Err(Error::NotFound(format!("directory {}", root.display())));
    }
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    digest_files(root, files)
}

pub(crate) fn digest_files(root: &Path, mut files: Vec<PathBuf>) -> Result<String> {
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel))?;
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    collect_files(root, dir, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    #[test]
    fn lesion_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let record = SampleRecord::from_phantom(&generate_phantom(4, &PhantomConfig::default()).unwrap());
        let samples = record.lesion_samples(32).unwrap();
        write_lesion_samples(dir.path(), &samples).unwrap();
        let back = read_lesion_samples(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        for (i, (b, s)) in back.iter().zip(&samples).enumerate() {
            assert_eq!(b.id, format!("lesion_{i:05}"));
            assert_eq!(&b.sample, s);
            let h = s.histogram().unwrap();
            for (x, y) in b.histogram.bins().iter().zip(h.bins()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(matches!(read_lesion_samples(&dir.path().join("none")), Err(Error::NotFound(_))));
    }

    #[test]
    fn roundtrip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig::default();
        let records: Vec<_> = (0..3).map(|s| SampleRecord::from_phantom(&generate_phantom(s, &cfg).unwrap())).collect();
        write_dataset(dir.path(), &records).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, records);
        let d1 = directory_digest(dir.path()).unwrap();
        let other = tempfile::tempdir().unwrap();
        write_dataset(other.path(), &records).unwrap();
        assert_eq!(d1, directory_digest(other.path()).unwrap());
        write_dataset(other.path(), &records[..1]).unwrap();
        fs::write(other.path().join("sample_00000").join(META_FILE), "garbage = [").unwrap();
        assert!(matches!(read_dataset(other.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn lesion_samples_cover_every_lesion() {
        let ph = generate_phantom(4, &PhantomConfig::default()).unwrap();
        let rec = SampleRecord::from_phantom(&ph);
        let samples = rec.lesion_samples(32).unwrap();
        assert_eq!(samples.len(), ph.lesions.len());
        assert_eq!(rec.lesion_union().count(), ph.lesions.iter().map(Mask::count).sum::<usize>());
    }

    #[test]
    fn mismatched_annotations_are_rejected() {
        let slice = Slice::new(Grid::filled(4, 4, 0.0), (1.0, 1.0), Provenance::Real).unwrap();
        assert!(SampleRecord::new(slice, Mask::empty(3, 3), vec![], HuWindow::LIVER).is_err());
    }
}
