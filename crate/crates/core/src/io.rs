//! 8-bit binary PGM/PPM images and CSV tables.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageReader};

use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, bytes: &[u8], h: usize, w: usize, color: bool) -> Result<()> {
    let (subtype, ct) = if color {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    let file = BufWriter::new(File::create(path)?);
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("image side {v} too large")));
    PnmEncoder::new(file).with_subtype(subtype).encode(bytes, dim(w)?, dim(h)?, ct)?;
    Ok(())
}

/// Writes `values` (row-major, clamped to `[0, 1]`) as a P5 graymap.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Format(format!("{} values for a {h}x{w} graymap", values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    encode(path.as_ref(), &bytes, h, w, false)
}

/// Writes a planar `[3, H, W]` buffer as a P6 pixmap.
pub fn write_ppm(path: impl AsRef<Path>, planar: &[f64], h: usize, w: usize) -> Result<()> {
    if planar.len() != 3 * h * w {
        return Err(Error::Format(format!("{} values for a 3x{h}x{w} pixmap", planar.len())));
    }
    let plane = h * w;
    let bytes: Vec<u8> = (0..plane).flat_map(|i| (0..3).map(move |c| quantize(planar[c * plane + i]))).collect();
    encode(path.as_ref(), &bytes, h, w, true)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    Ok(ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

/// Reads any graymap as values in `[0, 1]`; returns `(values, h, w)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let img = open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok((values, h as usize, w as usize))
}

/// Reads a pixmap as a planar `[3, H, W]` buffer in `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let img = open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok((out, h, w))
}

pub fn write_csv<S: AsRef<str>>(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
    wtr.write_record(header).map_err(csv_err)?;
    for r in rows {
        wtr.write_record(r.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a headed CSV into `(header, rows)`.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
