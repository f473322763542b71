//! PNG renderings of metric tables and sample grids.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use sts_nn::Tensor;

use crate::error::{Result, StsError};

use super::arrays::read_array;
use super::run::{parse_metrics_csv, MetricsRow};

const PALETTE: [[u8; 3]; 6] = [
    [76, 114, 176],
    [221, 132, 82],
    [85, 168, 104],
    [196, 78, 82],
    [129, 114, 179],
    [147, 120, 96],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
    }
    img.save(path).map_err(|e| StsError::ArrayFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Bar chart of one value per row, bars in row order and colored by
/// position. Bars share a zero baseline and are scaled to the largest
/// magnitude.
pub fn bar_chart(values: &[f64]) -> RgbImage {
    let (bar_w, gap, h) = (40u32, 16u32, 200u32);
    let w = gap + values.len() as u32 * (bar_w + gap);
    let mut img = RgbImage::from_pixel(w.max(1), h, Rgb([255, 255, 255]));
    let top = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let base = h - 10;
    for x in 0..w {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for (i, v) in values.iter().enumerate() {
        let frac = if top > 0.0 && v.is_finite() { v.abs() / top } else { 0.0 };
        let bh = (frac * (base - 10) as f64).round() as u32;
        let x0 = gap + i as u32 * (bar_w + gap);
        for x in x0..x0 + bar_w {
            for y in base - bh..base {
                img.put_pixel(x, y, Rgb(PALETTE[i % PALETTE.len()]));
            }
        }
    }
    img
}

/// Tiles `[N, 3, H, W]` images row-major into a grid, each pixel scaled up
/// `scale` times. Values are clamped to `[0, 1]`.
pub fn image_grid(images: &Tensor, cols: usize, scale: u32) -> Result<RgbImage> {
    if images.ndim() != 4 || images.shape()[1] != 3 {
        return Err(StsError::invalid(format!("grid needs [N, 3, H, W], got {:?}", images.shape())));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (cw, ch) = (w as u32 * scale + 2, h as u32 * scale + 2);
    let mut img = RgbImage::from_pixel(cols as u32 * cw, (rows as u32 * ch).max(1), Rgb([255, 255, 255]));
    for k in 0..n {
        let (r, c) = ((k / cols) as u32, (k % cols) as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch_: usize| (images[[k, ch_, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                let color = Rgb([px(0), px(1), px(2)]);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(c * cw + 1 + x as u32 * scale + dx, r * ch + 1 + y as u32 * scale + dy, color);
                    }
                }
            }
        }
    }
    Ok(img)
}

fn metric(rows: &[MetricsRow], name: &str) -> Vec<f64> {
    rows.iter()
        .map(|r| match name {
            "KID" => r.kid,
            "MMD" => r.mmd,
            "SSIM" => r.ssim,
            _ => r.probe_acc,
        })
        .collect()
}

/// Writes one bar chart per metric for a metrics table, plus a sample grid
/// for each output array found next to it. Returns the files written.
pub fn report(csv: &Path, out_dir: &Path, samples: usize) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(csv).map_err(|e| StsError::io(csv, e))?;
    let rows = parse_metrics_csv(&text)?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let mut written = Vec::new();
    for name in ["KID", "MMD", "SSIM", "probe_acc"] {
        let p = out_dir.join(format!("{stem}_{name}.png"));
        save(&bar_chart(&metric(&rows, name)), &p)?;
        written.push(p);
    }
    let legend: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{i}: {} omega={}", r.config_name, r.omega))
        .collect();
    let lp = out_dir.join(format!("{stem}_legend.txt"));
    std::fs::write(&lp, legend.join("\n") + "\n").map_err(|e| StsError::io(&lp, e))?;
    written.push(lp);

    let outputs = csv.parent().map(|d| d.join("outputs"));
    if let Some(dir) = outputs.filter(|d| d.is_dir()) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| StsError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "hdr"))
            .collect();
        entries.sort();
        for hdr in entries {
            let (arr, _) = read_array(&hdr)?;
            if arr.ndim() != 4 || arr.shape()[1] != 3 {
                continue;
            }
            let k = samples.min(arr.shape()[0]);
            let head = arr.slice_axis(ndarray::Axis(0), (0..k).into()).to_owned();
            let name = hdr.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
            let p = out_dir.join(format!("grid_{name}.png"));
            save(&image_grid(&head, 8, 4)?, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
