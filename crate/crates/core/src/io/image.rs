//! 8-bit PPM/PGM images and heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

fn encode(pixels: &[u8], width: usize, height: usize, rgb: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let (sub, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(sub)
        .encode(pixels, width as u32, height as u32, color)
        .expect("in-memory PNM encoding");
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Quantizes a `[C×H×W]` image in `[0, 1]` (C = 1 or 3) to 8 bits.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Dimension(format!(
            "cannot store an image of shape {s:?} as PPM/PGM"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut px = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[ch * h * w + y * w + x];
                px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(encode(&px, w, h, c == 3))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_image(image)?)
}

/// Reads a PPM (3 channels) or PGM (1 channel) as `[C×H×W]` values `k/255`.
pub fn load_image(path: &Path, dtype: DType) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16);
    let (c, raw) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    Ok(Tensor::from_fn(vec![c, h, w], dtype, |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        f64::from(raw[rest * c + ch]) / 255.0
    }))
}

/// Sidecar path `<path>.norm.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm.txt");
    PathBuf::from(s)
}

/// Grayscale levels: min-max normalized, a constant map is mid-gray (128).
pub fn grayscale_levels(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    (levels, lo, hi)
}

/// Diverging colours symmetric about zero: white at 0, red for positive,
/// blue for negative, full saturation at `±max|v|`.
pub fn diverging_colors(values: &[f64]) -> (Vec<[u8; 3]>, f64) {
    let a = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let colors = values
        .iter()
        .map(|&v| {
            let t = if a > 0.0 { v / a } else { 0.0 };
            let fade = ((1.0 - t.abs()) * 255.0).round() as u8;
            if t >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect();
    (colors, a)
}

fn upscale<T: Copy>(cells: &[T], grid: usize, cell: usize) -> Vec<T> {
    let side = grid * cell;
    (0..side * side)
        .map(|i| cells[(i / side / cell) * grid + (i % side) / cell])
        .collect()
}

fn check_map(values: &[f64], grid: usize, cell: usize) -> Result<()> {
    if values.is_empty() || values.len() != grid * grid || cell == 0 {
        return Err(Error::Usage(format!(
            "heatmap needs {grid}×{grid} values and a positive cell size, got {}",
            values.len()
        )));
    }
    Ok(())
}

/// Writes a grayscale PGM of a `grid × grid` map, each cell `cell` pixels
/// wide, plus the normalization sidecar.
pub fn export_grayscale(path: &Path, values: &[f64], grid: usize, cell: usize) -> Result<()> {
    check_map(values, grid, cell)?;
    let (levels, lo, hi) = grayscale_levels(values);
    write(path, &encode(&upscale(&levels, grid, cell), grid * cell, grid * cell, false))?;
    let note = format!(
        "kind=grayscale\nnormalization=min-max\nmin={lo}\nmax={hi}\nconstant_level=128\ngrid={grid}\ncell={cell}\n"
    );
    write(&sidecar_path(path), note.as_bytes())
}

/// Writes a diverging PPM of a `grid × grid` signed map plus its sidecar.
pub fn export_diverging(path: &Path, values: &[f64], grid: usize, cell: usize) -> Result<()> {
    check_map(values, grid, cell)?;
    let (colors, a) = diverging_colors(values);
    let px: Vec<u8> = upscale(&colors, grid, cell).concat();
    write(path, &encode(&px, grid * cell, grid * cell, true))?;
    let note = format!(
        "kind=diverging\nnormalization=symmetric\nscale={a}\nzero=white\npositive=red\nnegative=blue\ngrid={grid}\ncell={cell}\n"
    );
    write(&sidecar_path(path), note.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_mid_gray() {
        let (l, _, _) = grayscale_levels(&[0.3; 4]);
        assert_eq!(l, vec![128; 4]);
    }

    #[test]
    fn single_positive_patch_is_the_only_bright_cell() {
        let mut v = vec![0.0; 9];
        v[5] = 2.0;
        let (l, _, _) = grayscale_levels(&v);
        assert_eq!(l[5], 255);
        assert!(l.iter().enumerate().all(|(i, &x)| i == 5 || x == 0));
        let up = upscale(&l, 3, 2);
        assert_eq!(up.len(), 36);
        // cell (1, 2) covers pixel rows 2..4, cols 4..6
        for y in 0..6 {
            for x in 0..6 {
                let want = if (2..4).contains(&y) && (4..6).contains(&x) { 255 } else { 0 };
                assert_eq!(up[y * 6 + x], want);
            }
        }
    }

    #[test]
    fn diverging_is_symmetric() {
        let (c, a) = diverging_colors(&[-2.0, 0.0, 1.0, 2.0]);
        assert_eq!(a, 2.0);
        assert_eq!(c[0], [0, 0, 255]);
        assert_eq!(c[1], [255, 255, 255]);
        assert_eq!(c[2], [255, 128, 128]);
        assert_eq!(c[3], [255, 0, 0]);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Tensor::from_fn(vec![3, 4, 5], DType::F64, |i| ((i * 37) % 256) as f64 / 255.0);
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p, DType::F64).unwrap(), img);
        let g = dir.path().join("g.pgm");
        let gray = Tensor::from_fn(vec![1, 2, 3], DType::F64, |i| (i * 40) as f64 / 255.0);
        save_image(&g, &gray).unwrap();
        assert_eq!(load_image(&g, DType::F64).unwrap(), gray);
        assert!(save_image(&p, &Tensor::zeros(vec![2, 2, 2], DType::F64)).is_err());
    }
}
