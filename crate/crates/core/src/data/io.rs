//! PNG rasters: 8-bit grey (or RGB) images, 8-bit indexed class masks and
//! 16-bit grey probability maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder};

use crate::data::generate::Raster;
use crate::error::{ensure, Error, Result};
use crate::grid::{ClassMap, Grid};
use crate::scalar::Scalar;

const PALETTE: [u8; 9] = [0, 0, 0, 255, 160, 0, 220, 20, 60];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<()> {
    let w = create(path)?;
    let mut enc = Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    palette_len: Option<usize>,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = Decoder::new(BufReader::new(file)).read_info().map_err(fmt)?;
    let palette_len = reader.info().palette.as_ref().map(|p| p.len() / 3);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        palette_len,
        data: buf,
    })
}

/// Writes a 1-channel raster as 8-bit grey, a 3-channel one as RGB.
pub fn write_raster(path: &Path, img: &Raster) -> Result<()> {
    let plane = img.height * img.width;
    match img.channels {
        1 => write_png(path, img.width, img.height, ColorType::Grayscale, BitDepth::Eight, None, &img.data),
        3 => {
            let mut inter = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for c in 0..3 {
                    inter.push(img.data[c * plane + i]);
                }
            }
            write_png(path, img.width, img.height, ColorType::Rgb, BitDepth::Eight, None, &inter)
        }
        c => Err(Error::format(path, format!("cannot store a {c}-channel raster"))),
    }
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let d = read_png(path)?;
    if d.depth != BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit image"));
    }
    let plane = d.width * d.height;
    match d.color {
        ColorType::Grayscale => Raster::new(1, d.height, d.width, d.data),
        ColorType::Rgb => {
            let mut planar = vec![0; 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    planar[c * plane + i] = d.data[3 * i + c];
                }
            }
            Raster::new(3, d.height, d.width, planar)
        }
        other => Err(Error::format(path, format!("unsupported image colour type {other:?}"))),
    }
}

/// Writes class indices as an 8-bit palette image.
pub fn write_mask(path: &Path, mask: &ClassMap) -> Result<()> {
    let n = usize::from(mask.classes()).clamp(2, 3);
    let mut palette = PALETTE[..3 * n].to_vec();
    for extra in 3..usize::from(mask.classes()) {
        let v = (extra * 37 % 256) as u8;
        palette.extend_from_slice(&[v, v, v]);
    }
    write_png(
        path,
        mask.width(),
        mask.height(),
        ColorType::Indexed,
        BitDepth::Eight,
        Some(&palette),
        mask.as_slice(),
    )
}

/// Reads a class mask; the class count is the palette size (at least 2).
pub fn read_mask(path: &Path) -> Result<ClassMap> {
    let d = read_png(path)?;
    if d.depth != BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit mask"));
    }
    let classes = match (d.color, d.palette_len) {
        (ColorType::Indexed, Some(n)) => n,
        (ColorType::Grayscale, _) => usize::from(d.data.iter().copied().max().unwrap_or(0)) + 1,
        (other, _) => return Err(Error::format(path, format!("unsupported mask colour type {other:?}"))),
    };
    let classes = u8::try_from(classes.max(2)).map_err(|_| Error::format(path, "too many classes"))?;
    ClassMap::new(d.height, d.width, classes, d.data).map_err(|e| Error::format(path, e.to_string()))
}

/// Stores values in `[0, 1]` as 16-bit grey.
pub fn write_probability<S: Scalar>(path: &Path, prob: &Grid<S>) -> Result<()> {
    let mut data = Vec::with_capacity(2 * prob.len());
    for v in prob.as_slice() {
        let q = (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, prob.width(), prob.height(), ColorType::Grayscale, BitDepth::Sixteen, None, &data)
}

pub fn read_probability(path: &Path) -> Result<Grid<f64>> {
    let d = read_png(path)?;
    ensure!(
        d.color == ColorType::Grayscale && d.depth == BitDepth::Sixteen,
        "{}: expected a 16-bit grey probability map",
        path.display()
    );
    let vals = d
        .data
        .chunks_exact(2)
        .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
        .collect();
    Grid::from_vec(d.height, d.width, vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasters_masks_and_probabilities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grey = Raster::new(1, 2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let p = dir.path().join("a/grey.png");
        write_raster(&p, &grey).unwrap();
        assert_eq!(read_raster(&p).unwrap(), grey);
        let rgb = Raster::new(3, 1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = dir.path().join("rgb.png");
        write_raster(&p, &rgb).unwrap();
        assert_eq!(read_raster(&p).unwrap(), rgb);
        let mask = ClassMap::new(2, 2, 3, vec![0, 1, 2, 0]).unwrap();
        let p = dir.path().join("mask.png");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        let prob = Grid::from_vec(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let p = dir.path().join("prob.png");
        write_probability(&p, &prob).unwrap();
        let back = read_probability(&p).unwrap();
        assert!(back.max_abs_diff(&prob) <= 1.0 / 65535.0);
        assert!(read_raster(&dir.path().join("missing.png")).is_err());
    }
}
