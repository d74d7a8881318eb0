//! Parsing of the value syntaxes shared by several subcommands.

use std::path::Path;

use lesionsyn::dataset::{read_histogram, read_lesion_samples};
use lesionsyn::export::decode_png;
use lesionsyn::synthesis::{make_preset, HistogramPreset};
use lesionsyn::{lsf, DensityHistogram, Error, HuWindow, Mask, Result, HIST_BINS};

fn numbers(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("{p:?} is not a number"))))
        .collect()
}

/// `lo,hi` in HU.
pub fn parse_window(text: &str) -> Result<HuWindow> {
    match numbers(text)?.as_slice() {
        &[lo, hi] => HuWindow::new(lo, hi),
        _ => Err(Error::InvalidArgument(format!("window {text:?} must be lo,hi"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

/// `a,b,c`.
pub fn parse_seeds(text: &str) -> Result<Seeds> {
    text.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| Error::InvalidArgument(format!("seed {p:?} is not an integer"))))
        .collect::<Result<Vec<_>>>()
        .map(Seeds)
}

/// A preset (`uniform`, `delta:B`, `unimodal:MEAN,WIDTH`,
/// `bimodal:M1,M2,WIDTH[,W1,W2]`) or a file: a 100-bin LSF tensor or a
/// JSON array of bins.
pub fn parse_histogram(text: &str) -> Result<DensityHistogram> {
    let preset = match text.split_once(':') {
        None if text == "uniform" => return Ok(DensityHistogram::uniform(HIST_BINS)),
        Some(("delta", v)) => {
            let bin = v.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad delta bin {v:?}")))?;
            Some(HistogramPreset::Delta { bin })
        }
        Some(("unimodal", v)) => match numbers(v)?.as_slice() {
            &[mean_bin, width_bins] => Some(HistogramPreset::Unimodal { mean_bin, width_bins }),
            _ => return Err(Error::InvalidArgument("unimodal takes MEAN,WIDTH".into())),
        },
        Some(("bimodal", v)) => match *numbers(v)?.as_slice() {
            [a, b, width_bins] => Some(HistogramPreset::Bimodal { mean_bins: (a, b), width_bins, weights: (1.0, 1.0) }),
            [a, b, width_bins, wa, wb] => Some(HistogramPreset::Bimodal { mean_bins: (a, b), width_bins, weights: (wa, wb) }),
            _ => return Err(Error::InvalidArgument("bimodal takes M1,M2,WIDTH[,W1,W2]".into())),
        },
        _ => None,
    };
    if let Some(p) = preset {
        return make_preset(&p);
    }
    let path = Path::new(text);
    if !path.is_file() {
        return Err(Error::NotFound(format!("histogram preset or file {text:?}")));
    }
    if path.extension().is_some_and(|e| e == "json") {
        let bins: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
        if bins.len() != HIST_BINS {
            return Err(Error::InvalidArgument(format!("histogram file has {} bins, expected {HIST_BINS}", bins.len())));
        }
        return DensityHistogram::from_weights(&bins);
    }
    read_histogram(path)
}

/// A mask from an LSF or PNG file, or the mask of a stored lesion sample
/// directory.
pub fn load_mask(path: &Path) -> Result<Mask> {
    if path.is_dir() {
        let file = path.join("mask.lsf");
        if file.is_file() {
            return load_mask(&file);
        }
        return Err(Error::NotFound(format!("no mask.lsf in {}", path.display())));
    }
    if !path.is_file() {
        return Err(Error::NotFound(format!("mask {}", path.display())));
    }
    if path.extension().is_some_and(|e| e == "png") {
        let (rows, cols, px) = decode_png(&std::fs::read(path)?)?;
        return Ok(Mask::from_fn(rows, cols, |r, c| px[r * cols + c] >= 128));
    }
    let (shape, values) = lsf::read(path)?;
    match shape.as_slice() {
        &[rows, cols] => Mask::from_f32(rows, cols, &values),
        _ => Err(Error::Format { path: path.into(), reason: format!("expected a 2D mask, got shape {shape:?}") }),
    }
}

/// Masks of every sample in a lesion directory.
pub fn load_shape_pool(dir: &Path) -> Result<Vec<Mask>> {
    Ok(read_lesion_samples(dir)?.into_iter().map(|s| s.sample.mask).collect())
}

pub fn load_histogram_pool(dir: &Path) -> Result<Vec<DensityHistogram>> {
    Ok(read_lesion_samples(dir)?.into_iter().map(|s| s.histogram).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(parse_histogram("delta:80").unwrap().bins()[80], 1.0);
        assert_eq!(parse_histogram("uniform").unwrap().bins()[3], 0.01);
        let u = parse_histogram("unimodal:30,4").unwrap();
        assert!((u.mean_intensity() - 0.305).abs() < 0.01);
        let b = parse_histogram("bimodal:20,80,3").unwrap();
        assert!(b.bins()[20] > 0.05 && b.bins()[80] > 0.05);
        assert!(parse_histogram("delta:100").is_err());
        assert!(parse_histogram("unimodal:3").is_err());
        assert!(matches!(parse_histogram("/no/such/file"), Err(Error::NotFound(_))));
    }

    #[test]
    fn histogram_files() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("h.json");
        let mut bins = vec![0.0; 100];
        bins[7] = 2.0;
        bins[9] = 2.0;
        std::fs::write(&json, serde_json::to_string(&bins).unwrap()).unwrap();
        let h = parse_histogram(json.to_str().unwrap()).unwrap();
        assert_eq!(h.bins()[7], 0.5);
        std::fs::write(&json, "[1, 2]").unwrap();
        assert!(parse_histogram(json.to_str().unwrap()).is_err());
    }

    #[test]
    fn windows_and_seeds() {
        assert_eq!(parse_window("-100,400").unwrap(), HuWindow::LIVER);
        assert!(parse_window("400,-100").is_err());
        assert!(parse_window("1").is_err());
        assert_eq!(parse_seeds("0, 1,2").unwrap().0, [0, 1, 2]);
        assert!(parse_seeds("a").is_err());
    }
}
