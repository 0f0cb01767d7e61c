use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{RasterMap, SaliencyError};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SaliencyError + '_ {
    move |source| SaliencyError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One raster row per line, comma-separated, shortest round-trip formatting.
pub fn write_csv(map: &RasterMap, path: &Path) -> Result<(), SaliencyError> {
    let mut out = String::with_capacity(map.values().len() * 8);
    for row in map.values().chunks(map.width()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<RasterMap, SaliencyError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SaliencyError::Parse(format!("line {}: {e}", i + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(SaliencyError::Parse(format!(
                    "line {} has {} values, expected {w}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    RasterMap::from_values(width.unwrap_or(0), height, values)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale, values clamped to `[0, 1]` and scaled to 0..255.
pub fn write_gray_png(map: &RasterMap, path: &Path) -> Result<(), SaliencyError> {
    let img = GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([to_byte(map.get(x as usize, y as usize))])
    });
    img.save(path)?;
    Ok(())
}

/// Blue-cyan-yellow-red ramp.
fn ramp(v: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.35, [0.0, 0.8, 1.0]),
        (0.7, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let k = STOPS.iter().rposition(|(t, _)| *t <= v).unwrap_or(0).min(2);
    let (t0, c0) = STOPS[k];
    let (t1, c1) = STOPS[k + 1];
    let f = ((v - t0) / (t1 - t0)).clamp(0.0, 1.0);
    let mix = |i: usize| to_byte(c0[i] + (c1[i] - c0[i]) * f);
    [mix(0), mix(1), mix(2)]
}

pub fn colorize(map: &RasterMap) -> RgbImage {
    RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Rgb(ramp(map.get(x as usize, y as usize)))
    })
}

pub fn write_color_png(map: &RasterMap, path: &Path) -> Result<(), SaliencyError> {
    colorize(map).save(path)?;
    Ok(())
}

/// Alpha-blends the coloured map over a background image, stretching the
/// map to the background's size with nearest-neighbour sampling.
pub fn write_overlay(map: &RasterMap, background: &Path, out: &Path, alpha: f64) -> Result<(), SaliencyError> {
    let bg = image::open(background)?.to_rgb8();
    let (bw, bh) = bg.dimensions();
    let heat = colorize(map);
    let a = alpha.clamp(0.0, 1.0);
    let img = RgbImage::from_fn(bw, bh, |x, y| {
        let hx = (u64::from(x) * map.width() as u64 / u64::from(bw)) as u32;
        let hy = (u64::from(y) * map.height() as u64 / u64::from(bh)) as u32;
        let h = heat.get_pixel(hx, hy).0;
        let b = bg.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|i| (a * f64::from(h[i]) + (1.0 - a) * f64::from(b[i])).round() as u8))
    });
    img.save(out)?;
    Ok(())
}
