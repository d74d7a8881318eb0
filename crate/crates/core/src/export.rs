//! 8-bit grayscale PNG and LSF1 export of [0, 1] images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::Grid;
use crate::lsf;

/// Linear [0, 1] to 0..255 with round-half-up; values outside are clipped.
pub fn to_u8(v: f32) -> u8 {
    let x = (v as f64).clamp(0.0, 1.0) * 255.0;
    (x + 0.5).floor().min(255.0) as u8
}

pub fn encode_png(grid: &Grid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, grid.cols() as u32, grid.rows() as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::invalid(format!("png header: {e}")))?;
        let bytes: Vec<u8> = grid.data().iter().map(|&v| to_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale PNG into (rows, cols, bytes).
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::invalid(format!("png decode: {e}"));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::invalid("png too large"))?];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::invalid("expected an 8-bit grayscale png"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn write_png(path: &Path, grid: &Grid) -> Result<()> {
    std::fs::write(path, encode_png(grid)?)?;
    Ok(())
}

pub fn encode_lsf(grid: &Grid) -> Vec<u8> {
    lsf::encode(&[grid.rows(), grid.cols()], grid.data())
}

pub fn write_lsf(path: &Path, grid: &Grid) -> Result<()> {
    lsf::write(path, &[grid.rows(), grid.cols()], grid.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(2.0), 255);
        // 0.5 * 255 = 127.5 rounds up.
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(1.0 / 255.0), 1);
    }

    #[test]
    fn png_roundtrip() {
        let g = Grid::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        let (r, c, bytes) = decode_png(&encode_png(&g).unwrap()).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(bytes, g.data().iter().map(|&v| to_u8(v)).collect::<Vec<_>>());
        assert!(decode_png(b"not a png").is_err());
    }
}
