//! Color statistics of images: mean HSV saturation, RMS contrast and
//! pixel-value kernel density estimates.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image with channels normalized to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("image must have at least one pixel"));
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(index) = pixels
            .iter()
            .position(|p| p.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::contract(format!(
                "pixel {index} has a channel outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn grayscale(&self) -> impl Iterator<Item = f64> + '_ {
        self.pixels
            .iter()
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
    }
}

/// Hexcone RGB to HSV; every component in `[0, 1]`, hue in `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max == 0.0 { 0.0 } else { chroma / max };
    let h = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / chroma + 2.0) / 6.0
    } else {
        ((r - g) / chroma + 4.0) / 6.0
    };
    [if h >= 1.0 { 0.0 } else { h }, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn mean_saturation(image: &ImageRGB) -> f64 {
    let total: f64 = image.pixels.iter().map(|&p| rgb_to_hsv(p)[1]).sum();
    total / image.pixels.len() as f64
}

/// Population standard deviation of BT.601 grayscale.
pub fn rms_contrast(image: &ImageRGB) -> f64 {
    let n = image.pixels.len() as f64;
    // Shifting by the first value keeps a constant image at exactly zero.
    let shift = image.grayscale().next().unwrap_or(0.0);
    let mean = image.grayscale().map(|g| g - shift).sum::<f64>() / n;
    let var = image
        .grayscale()
        .map(|g| (g - shift - mean) * (g - shift - mean))
        .sum::<f64>()
        / n;
    var.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density over the grid.
    pub fn mass(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

/// Silverman's rule of thumb `1.06 std n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::contract("bandwidth needs at least two values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    if !(h > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(h)
}

/// Gaussian KDE on `grid_size` uniform points spanning `[min - 5h, max + 5h]`.
pub fn kde(values: &[f64], bandwidth: Option<f64>, grid_size: usize) -> Result<DensityEstimate> {
    if values.len() < 2 {
        return Err(Error::contract("kde needs at least two values"));
    }
    if grid_size < 16 {
        return Err(Error::contract("kde grid needs at least 16 points"));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "kde input",
            index,
        });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::contract(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values)?,
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min - 5.0 * h, max + 5.0 * h);
    let step = (hi - lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .par_iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| {
                    let u = (x - v) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(DensityEstimate {
        grid,
        density,
        bandwidth: h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRow {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub saturation: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorReport {
    pub mean_saturation: f64,
    pub mean_contrast: f64,
    pub rows: Vec<ImageRow>,
    /// Inputs that could not be read.
    pub skipped: usize,
}

/// Averages saturation and contrast over named images.
pub fn batch_color_report(images: &[(String, ImageRGB)]) -> Result<ColorReport> {
    if images.is_empty() {
        return Err(Error::contract("color report needs at least one image"));
    }
    let rows: Vec<ImageRow> = images
        .par_iter()
        .map(|(name, img)| ImageRow {
            name: name.clone(),
            width: img.width,
            height: img.height,
            saturation: mean_saturation(img),
            contrast: rms_contrast(img),
        })
        .collect();
    let n = rows.len() as f64;
    Ok(ColorReport {
        mean_saturation: rows.iter().map(|r| r.saturation).sum::<f64>() / n,
        mean_contrast: rows.iter().map(|r| r.contrast).sum::<f64>() / n,
        rows,
        skipped: 0,
    })
}

/// Loads PNG (or other formats the decoder knows) and `.csv` pixel grids.
pub fn load_image(path: &Path) -> Result<ImageRGB> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        return load_csv_grid(path);
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<[f64; 3]> = match img {
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgb8(_) | D::ImageRgba8(_) => img
            .to_rgb8()
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect(),
        D::ImageLuma16(_) | D::ImageLumaA16(_) | D::ImageRgb16(_) | D::ImageRgba16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 65535.0))
            .collect(),
        _ => img
            .to_rgb32f()
            .pixels()
            .map(|p| p.0.map(|c| (c as f64).clamp(0.0, 1.0)))
            .collect(),
    };
    ImageRGB::new(w, h, pixels)
}

/// Reads a long-format pixel table with header `row,col,r,g,b`.
pub fn load_csv_grid(path: &Path) -> Result<ImageRGB> {
    let bad = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["row", "col", "r", "g", "b"] {
        return Err(bad("expected header row,col,r,g,b".into()));
    }
    let mut cells = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse_idx = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|e| bad(format!("record {}: {e}", line + 1)))
        };
        let parse_val = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|e| bad(format!("record {}: {e}", line + 1)))
        };
        cells.push((
            parse_idx(0)?,
            parse_idx(1)?,
            [parse_val(2)?, parse_val(3)?, parse_val(4)?],
        ));
    }
    let height = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let width = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != width * height {
        return Err(bad(format!(
            "{} cells do not fill a {width}x{height} grid",
            cells.len()
        )));
    }
    let mut pixels = vec![None; width * height];
    for (r, c, rgb) in cells {
        let slot = &mut pixels[r * width + c];
        if slot.is_some() {
            return Err(bad(format!("duplicate cell ({r}, {c})")));
        }
        *slot = Some(rgb);
    }
    let pixels = pixels.into_iter().map(|p| p.expect("grid filled")).collect();
    ImageRGB::new(width, height, pixels).map_err(|e| bad(e.to_string()))
}

/// Images that loaded, by display name, and paths that did not.
pub type LoadedImages = (Vec<(String, ImageRGB)>, Vec<(PathBuf, Error)>);

/// Loads every path, skipping unreadable ones with a warning.
pub fn load_images(paths: &[PathBuf]) -> LoadedImages {
    let loaded: Vec<_> = paths
        .par_iter()
        .map(|p| (p.clone(), load_image(p)))
        .collect();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for (path, result) in loaded {
        match result {
            Ok(img) => {
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                images.push((name, img));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push((path, e));
            }
        }
    }
    (images, failures)
}

/// Loads and reports over a list of files, counting unreadable ones.
pub fn color_report_from_paths(paths: &[PathBuf]) -> Result<ColorReport> {
    let (images, failures) = load_images(paths);
    let mut report = batch_color_report(&images)?;
    report.skipped = failures.len();
    Ok(report)
}
