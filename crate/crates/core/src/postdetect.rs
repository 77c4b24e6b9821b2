//! Cleaning of predicted masks, extraction of countable instances, and
//! outline overlays for reports.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::morph::{binary_median, components8, dilate, BinaryMask};
use crate::raster::{Circle, GrayImage, LabelMask, RgbImage};

/// One connected component of a cleaned mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedInstance {
    pub id: usize,
    /// Row runs `(y, x_start, x_end_inclusive)` in raster order.
    pub spans: Vec<(usize, usize, usize)>,
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub equiv_radius: f64,
}

impl DetectedInstance {
    fn from_pixels(id: usize, pixels: &[usize], width: usize) -> Self {
        let mut spans: Vec<(usize, usize, usize)> = Vec::new();
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in pixels {
            let (x, y) = (i % width, i / width);
            sx += x as f64;
            sy += y as f64;
            match spans.last_mut() {
                Some((ly, _, lx1)) if *ly == y && *lx1 + 1 == x => *lx1 = x,
                _ => spans.push((y, x, x)),
            }
        }
        let area = pixels.len();
        Self {
            id,
            spans,
            cx: sx / area as f64,
            cy: sy / area as f64,
            area,
            equiv_radius: (area as f64 / PI).sqrt(),
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.spans.iter().flat_map(|&(y, x0, x1)| (x0..=x1).map(move |x| (x, y)))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let y0 = self.spans.first().map_or(0, |s| s.0);
        let y1 = self.spans.last().map_or(0, |s| s.0);
        let x0 = self.spans.iter().map(|s| s.1).min().unwrap_or(0);
        let x1 = self.spans.iter().map(|s| s.2).max().unwrap_or(0);
        (x0, y0, x1, y1)
    }

    pub fn record(&self) -> InstanceRecord {
        InstanceRecord { id: self.id, cx: self.cx, cy: self.cy, area: self.area, equiv_radius: self.equiv_radius }
    }
}

/// Serialised summary of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub equiv_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostParams {
    pub median_window: usize,
    pub dilate_radius: usize,
    /// Expected particle radius that anchors the area gate.
    pub radius_mean: f64,
    pub area_min_frac: f64,
    pub area_max_frac: f64,
}

impl Default for PostParams {
    fn default() -> Self {
        Self { median_window: 5, dilate_radius: 2, radius_mean: 15.0, area_min_frac: 0.25, area_max_frac: 4.0 }
    }
}

impl PostParams {
    /// `[area_min, area_max]` in pixels.
    pub fn area_range(&self) -> (usize, usize) {
        let disc = PI * self.radius_mean * self.radius_mean;
        ((self.area_min_frac * disc).ceil() as usize, (self.area_max_frac * disc).floor() as usize)
    }
}

/// Binary median filter followed by dilation with a disc.
pub fn clean_mask(mask: &LabelMask, median_window: usize, dilate_radius: usize) -> Result<LabelMask> {
    let m = binary_median(&BinaryMask::from_labels(mask), median_window)?;
    Ok(dilate(&m, dilate_radius).to_labels())
}

/// 8-connected components whose area lies in `[area_min, area_max]`, sorted
/// by `(cy, cx)` and numbered in that order.
pub fn extract_instances(mask: &LabelMask, area_min: usize, area_max: usize) -> Vec<DetectedInstance> {
    let bm = BinaryMask::from_labels(mask);
    let mut out: Vec<DetectedInstance> = components8(&bm)
        .into_iter()
        .filter(|c| (area_min..=area_max).contains(&c.pixels.len()))
        .map(|c| DetectedInstance::from_pixels(0, &c.pixels, mask.width()))
        .collect();
    out.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.cx.total_cmp(&b.cx)));
    for (i, inst) in out.iter_mut().enumerate() {
        inst.id = i;
    }
    out
}

/// `clean_mask` then `extract_instances` with the configured gate.
pub fn detect_instances(mask: &LabelMask, params: &PostParams) -> Result<Vec<DetectedInstance>> {
    let cleaned = clean_mask(mask, params.median_window, params.dilate_radius)?;
    let (lo, hi) = params.area_range();
    Ok(extract_instances(&cleaned, lo, hi))
}

/// Anything with an outline that can be burnt into an overlay.
pub trait Outline {
    /// Pixels of the shape that have a 4-neighbour outside it or lie on the
    /// raster border.
    fn outline(&self, width: usize, height: usize) -> Vec<(usize, usize)>;
}

fn boundary_of(pixels: &[(usize, usize)], width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut set = vec![false; width * height];
    for &(x, y) in pixels {
        set[y * width + x] = true;
    }
    pixels
        .iter()
        .copied()
        .filter(|&(x, y)| {
            x == 0
                || y == 0
                || x + 1 == width
                || y + 1 == height
                || !set[y * width + x - 1]
                || !set[y * width + x + 1]
                || !set[(y - 1) * width + x]
                || !set[(y + 1) * width + x]
        })
        .collect()
}

impl Outline for DetectedInstance {
    fn outline(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let px: Vec<_> = self.pixels().filter(|&(x, y)| x < width && y < height).collect();
        boundary_of(&px, width, height)
    }
}

impl Outline for Circle {
    fn outline(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let px: Vec<_> = self.pixels(width, height).collect();
        boundary_of(&px, width, height)
    }
}

/// RGB copy of `img` (8-bit view) with every shape's outline painted `color`.
pub fn burn_overlay<S: Outline>(img: &GrayImage, shapes: &[S], color: [u8; 3]) -> RgbImage {
    let mut rgb = RgbImage::from_gray(img);
    for s in shapes {
        for (x, y) in s.outline(img.width(), img.height()) {
            rgb.set(x, y, color);
        }
    }
    rgb
}

/// One JSON object per line: `{id, cx, cy, area, equiv_radius}`.
pub fn write_instances(instances: &[DetectedInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, &inst.record())?;
        buf.push(b'\n');
    }
    crate::raster::write_bytes(path.as_ref(), &buf)
}
