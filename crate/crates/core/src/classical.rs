//! Candidate proposal for semi-automatic annotation.
//!
//! The pipeline assumes an intact particle is a round bright object on a
//! darker surround:
//!
//! 1. saturate the lowest and highest 1% of intensities, then median filter
//!    with a 15x15 window;
//! 2. mask out large bright regions (Otsu threshold, disc closing, area gate)
//!    so they cannot vote;
//! 3. gradient-voting circular Hough transform, bright-on-dark polarity;
//! 4. drop candidates whose surrounding square patch has a histogram mode
//!    that is not clearly darker than the disc interior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morph::{self, otsu_threshold};
use crate::raster::{self, BitDepth, Circle, GrayImage};

pub use crate::morph::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateCircle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
}

impl CandidateCircle {
    pub fn circle(&self) -> Circle {
        Circle::new(self.cx, self.cy, self.r)
    }
}

// ---------------------------------------------------------------------------
// Step 1: contrast stretch and median filter

fn histogram(img: &GrayImage) -> Vec<u64> {
    let mut hist = vec![0u64; img.depth().max_value() as usize + 1];
    for &v in img.pixels() {
        hist[v as usize] += 1;
    }
    hist
}

/// Smallest value whose cumulative count reaches `count`.
fn quantile_value(hist: &[u64], count: u64) -> usize {
    let mut acc = 0u64;
    for (v, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= count {
            return v;
        }
    }
    hist.len() - 1
}

/// Saturates the `low_frac` darkest and `high_frac` brightest pixels and maps
/// the range between linearly onto the full scale of the image's depth.
///
/// With sorted pixels `s` and `n` pixels, the low cut is
/// `s[max(ceil(low_frac * n), 1) - 1]` and the high cut is
/// `s[ceil((1 - high_frac) * n) - 1]`. A constant image is returned as is.
pub fn stretch_contrast(img: &GrayImage, low_frac: f64, high_frac: f64) -> Result<GrayImage> {
    if !(low_frac >= 0.0 && high_frac >= 0.0 && low_frac + high_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "saturation fractions {low_frac} + {high_frac} must lie in [0, 1)"
        )));
    }
    let hist = histogram(img);
    let n = img.pixels().len() as f64;
    let lo_count = ((low_frac * n).ceil() as u64).max(1);
    let hi_count = ((1.0 - high_frac) * n).ceil() as u64;
    let lo = quantile_value(&hist, lo_count);
    let hi = quantile_value(&hist, hi_count.max(1));
    if hi <= lo {
        return Ok(img.clone());
    }
    let max = img.depth().max_value() as f64;
    let span = (hi - lo) as f64;
    img.map(img.depth(), |v| {
        let t = (v as f64 - lo as f64) / span;
        (t.clamp(0.0, 1.0) * max).round() as u16
    })
}

/// Median over a `window x window` neighbourhood with replicate padding.
pub fn median_filter(img: &GrayImage, window: usize) -> Result<GrayImage> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median window must be odd, got {window}")));
    }
    if window == 1 {
        return Ok(img.clone());
    }
    match img.depth() {
        BitDepth::Eight => Ok(median_histogram(img, window)),
        BitDepth::Sixteen => Ok(median_sorting(img, window)),
    }
}

/// Sliding-histogram median for 8-bit data.
fn median_histogram(img: &GrayImage, window: usize) -> GrayImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let r = (window / 2) as isize;
    let rank = (window * window / 2) as u32; // zero-based rank of the median
    let mut out = img.clone();
    let mut hist = [0u32; 256];
    for y in 0..h {
        hist.fill(0);
        for dy in -r..=r {
            for dx in -r..=r {
                hist[img.get_clamped(dx, y + dy) as usize] += 1;
            }
        }
        for x in 0..w {
            if x > 0 {
                for dy in -r..=r {
                    hist[img.get_clamped(x - r - 1, y + dy) as usize] -= 1;
                    hist[img.get_clamped(x + r, y + dy) as usize] += 1;
                }
            }
            let mut acc = 0u32;
            let mut med = 0usize;
            for (v, &c) in hist.iter().enumerate() {
                acc += c;
                if acc > rank {
                    med = v;
                    break;
                }
            }
            out.set(x as usize, y as usize, med as u16);
        }
    }
    out
}

fn median_sorting(img: &GrayImage, window: usize) -> GrayImage {
    let r = (window / 2) as isize;
    let mut out = img.clone();
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..img.height() as isize {
        for x in 0..img.width() as isize {
            buf.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    buf.push(img.get_clamped(x + dx, y + dy));
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable(mid);
            out.set(x as usize, y as usize, *m);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Step 2: bright-region masking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrightMaskParams {
    pub closing_radius: usize,
    /// Components larger than this are masked. Defaults to `4 * pi * r_max^2`
    /// when unset.
    pub area_min: Option<f64>,
}

impl Default for BrightMaskParams {
    fn default() -> Self {
        Self { closing_radius: 5, area_min: None }
    }
}

/// Marks bright connected regions too large to be single particles.
pub fn mask_bright_regions(img: &GrayImage, params: &BrightMaskParams, r_max: f64) -> BinaryMask {
    let hist = histogram(img);
    let t = otsu_threshold(&hist) as u16;
    let bright = BinaryMask {
        width: img.width(),
        height: img.height(),
        bits: img.pixels().iter().map(|&v| v > t).collect(),
    };
    let closed = morph::close(&bright, params.closing_radius);
    let area_min = params
        .area_min
        .unwrap_or(4.0 * std::f64::consts::PI * r_max * r_max);
    let mut out = BinaryMask::empty(img.width(), img.height());
    for comp in morph::components8(&closed) {
        if comp.pixels.len() as f64 > area_min {
            for i in comp.pixels {
                out.bits[i] = true;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Step 3: circular Hough transform

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughParams {
    pub r_min: f64,
    pub r_max: f64,
    /// Minimum peak score. A score of 1 is one full circumference of edge
    /// pixels voting for the same center.
    pub sensitivity: f64,
    /// Gradient-magnitude percentile above which a pixel is an edge.
    pub edge_percentile: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        Self { r_min: 10.0, r_max: 20.0, sensitivity: 1.2, edge_percentile: 0.9 }
    }
}

impl HoughParams {
    /// Radius range `mean * (1 -+ 0.35)`.
    pub fn for_radius(radius_mean: f64) -> Self {
        Self {
            r_min: (radius_mean * 0.65).round(),
            r_max: (radius_mean * 1.35).round(),
            ..Self::default()
        }
    }
}

/// Sobel gradients with replicate padding.
/// Separable Gaussian blur with replicate borders, truncated at 3 sigma.
fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-rad..=rad)
                .zip(&kernel)
                .map(|(k, c)| c * values[y * w + at(x as isize + k, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-rad..=rad)
                .zip(&kernel)
                .map(|(k, c)| c * tmp[at(y as isize + k, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Sobel gradients of the image after a sigma-1 Gaussian blur, which keeps
/// gradient directions on pixelated boundaries close to the normal.
fn sobel(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let raw: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let smooth = gaussian_blur(&raw, w, h, 1.0);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| {
                smooth[(y + dy).clamp(0, h as isize - 1) as usize * w + (x + dx).clamp(0, w as isize - 1) as usize]
            };
            let i = y as usize * w + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

struct Edge {
    x: f64,
    y: f64,
    ux: f64,
    uy: f64,
    mag: f64,
}

/// Gradient-voting circle detector.
///
/// Edge pixels (gradient magnitude above the configured percentile, outside
/// `exclusion`) vote along their gradient direction, which points into a
/// bright disc, at every integer distance in `[r_min, r_max]`. Each vote
/// weighs `1 / (3 * 2 pi d)`. Peak scores are 3x3 sums of the accumulator;
/// a boundary pixel's votes at its three nearest radii all land in that
/// box, so each complete one-pixel ring of edge pixels adds about 1. Peaks above
/// `sensitivity` are taken greedily by score with a minimum center distance
/// of `r_min`; each radius comes from the histogram of distances to inward
/// facing edge pixels.
pub fn hough_circles(
    img: &GrayImage,
    exclusion: &BinaryMask,
    params: &HoughParams,
) -> Result<Vec<CandidateCircle>> {
    let HoughParams { r_min, r_max, sensitivity, edge_percentile } = *params;
    if !(r_min > 0.0 && r_min < r_max) {
        return Err(Error::InvalidArgument(format!("need 0 < r_min < r_max, got [{r_min}, {r_max}]")));
    }
    let (w, h) = (img.width(), img.height());
    if exclusion.width != w || exclusion.height != h {
        return Err(Error::ShapeMismatch("exclusion mask does not match image".into()));
    }
    let (gx, gy) = sobel(img);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let mut sorted = mag.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let pos = ((sorted.len() - 1) as f64 * edge_percentile.clamp(0.0, 1.0)).floor() as usize;
    let thr = sorted[pos];

    let edges: Vec<Edge> = (0..w * h)
        .filter(|&i| mag[i] > thr && mag[i] > 0.0 && !exclusion.bits[i])
        .map(|i| Edge {
            x: (i % w) as f64,
            y: (i / w) as f64,
            ux: gx[i] / mag[i],
            uy: gy[i] / mag[i],
            mag: mag[i],
        })
        .collect();
    if edges.is_empty() {
        return Ok(Vec::new());
    }

    let mut acc = vec![0.0f64; w * h];
    let radii: Vec<f64> = {
        let mut v = Vec::new();
        let mut r = r_min;
        while r <= r_max + 1e-9 {
            v.push(r);
            r += 1.0;
        }
        v
    };
    for e in &edges {
        for &r in &radii {
            let (vx, vy) = (e.x + r * e.ux, e.y + r * e.uy);
            if vx < 0.0 || vy < 0.0 || vx > (w - 1) as f64 || vy > (h - 1) as f64 {
                continue;
            }
            let weight = 1.0 / (3.0 * std::f64::consts::TAU * r);
            let (x0, y0) = (vx.floor() as usize, vy.floor() as usize);
            let (fx, fy) = (vx - x0 as f64, vy - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            acc[y0 * w + x0] += weight * (1.0 - fx) * (1.0 - fy);
            acc[y0 * w + x1] += weight * fx * (1.0 - fy);
            acc[y1 * w + x0] += weight * (1.0 - fx) * fy;
            acc[y1 * w + x1] += weight * fx * fy;
        }
    }

    // 3x3 box sums
    let mut score = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += acc[yy * w + xx];
                }
            }
            score[y * w + x] = s;
        }
    }

    let mut peaks: Vec<usize> = (0..w * h).filter(|&i| score[i] >= sensitivity).collect();
    peaks.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut accepted: Vec<CandidateCircle> = Vec::new();
    for i in peaks {
        let (px, py) = ((i % w) as f64, (i / w) as f64);
        if accepted
            .iter()
            .any(|c| (c.cx - px).powi(2) + (c.cy - py).powi(2) < r_min * r_min)
        {
            continue;
        }
        let (cx, cy) = refine_center(&acc, w, h, i % w, i / w);
        let Some(r) = estimate_radius(&edges, cx, cy, r_min, r_max) else { continue };
        accepted.push(CandidateCircle { cx, cy, r, score: score[i] });
    }
    Ok(accepted)
}

/// Accumulator centroid over a 5x5 window, re-centered on its own estimate
/// a few times so a peak picked at the edge of a flat top is pulled back.
fn refine_center(acc: &[f64], w: usize, h: usize, x: usize, y: usize) -> (f64, f64) {
    let (mut x, mut y) = (x, y);
    let mut est = (x as f64, y as f64);
    for _ in 0..3 {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for yy in y.saturating_sub(2)..=(y + 2).min(h - 1) {
            for xx in x.saturating_sub(2)..=(x + 2).min(w - 1) {
                let a = acc[yy * w + xx];
                sx += a * xx as f64;
                sy += a * yy as f64;
                sw += a;
            }
        }
        if sw <= 0.0 {
            break;
        }
        est = (sx / sw, sy / sw);
        let (nx, ny) = (est.0.round() as usize, est.1.round() as usize);
        if (nx, ny) == (x, y) {
            break;
        }
        (x, y) = (nx, ny);
    }
    est
}

/// Magnitude-weighted mode of the distances from the center to edge pixels
/// facing it, refined by the weighted mean over the modal bin and its
/// neighbours.
fn estimate_radius(edges: &[Edge], cx: f64, cy: f64, r_min: f64, r_max: f64) -> Option<f64> {
    let lo = (r_min - 1.0).max(0.0);
    let hi = r_max + 1.0;
    let nbins = hi.ceil() as usize + 2;
    let mut bins = vec![(0.0f64, 0.0f64); nbins];
    for e in edges {
        let (dx, dy) = (cx - e.x, cy - e.y);
        let d = dx.hypot(dy);
        if d < lo || d > hi || d == 0.0 {
            continue;
        }
        if (e.ux * dx + e.uy * dy) / d < 0.8 {
            continue;
        }
        let b = d.round() as usize;
        bins[b].0 += e.mag;
        bins[b].1 += e.mag * d;
    }
    let best = (0..nbins).max_by(|&a, &b| bins[a].0.total_cmp(&bins[b].0).then(b.cmp(&a)))?;
    if bins[best].0 == 0.0 {
        return None;
    }
    let (mut n, mut s) = (0.0, 0.0);
    for b in best.saturating_sub(1)..=(best + 1).min(nbins - 1) {
        n += bins[b].0;
        s += bins[b].1;
    }
    Some((s / n).clamp(r_min, r_max))
}

// ---------------------------------------------------------------------------
// Step 4: dark-halo check

/// Histogram mode (ties toward the darker bin) and lower median of the
/// disc interior, both on the 8-bit scale.
pub fn halo_statistics(img: &GrayImage, c: &CandidateCircle) -> Option<(u8, u8)> {
    let img8 = raster::to_8bit(img);
    let (w, h) = (img8.width() as f64, img8.height() as f64);
    let half = 1.5 * c.r;
    let x0 = (c.cx - half).ceil().max(0.0) as usize;
    let y0 = (c.cy - half).ceil().max(0.0) as usize;
    let x1 = (c.cx + half).floor().min(w - 1.0);
    let y1 = (c.cy + half).floor().min(h - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return None;
    }
    let mut hist = [0u32; 256];
    let mut interior = Vec::new();
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let v = img8.get(x, y) as u8;
            if raster::disc_contains(c.cx, c.cy, c.r, x, y) {
                interior.push(v);
            } else {
                hist[v as usize] += 1;
            }
        }
    }
    if interior.is_empty() || hist.iter().all(|&n| n == 0) {
        return None;
    }
    let mut mode = 0usize;
    for v in 1..256 {
        if hist[v] > hist[mode] {
            mode = v;
        }
    }
    interior.sort_unstable();
    let median = interior[(interior.len() - 1) / 2];
    Some((mode as u8, median))
}

/// Keeps candidates whose surround mode is at least `delta` below the
/// interior median. Order is preserved.
pub fn dark_halo_filter(img: &GrayImage, candidates: &[CandidateCircle], delta: f64) -> Vec<CandidateCircle> {
    candidates
        .iter()
        .filter(|c| {
            halo_statistics(img, c).is_some_and(|(mode, median)| mode as f64 <= median as f64 - delta)
        })
        .copied()
        .collect()
}

// ---------------------------------------------------------------------------
// Composite

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalParams {
    pub low_frac: f64,
    pub high_frac: f64,
    pub median_window: usize,
    pub bright: BrightMaskParams,
    pub hough: HoughParams,
    pub halo_delta: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            low_frac: 0.01,
            high_frac: 0.01,
            median_window: 15,
            bright: BrightMaskParams::default(),
            hough: HoughParams::default(),
            halo_delta: 10.0,
        }
    }
}

/// Intermediate images of one pipeline run.
#[derive(Debug, Clone)]
pub struct ProposalStages {
    pub stretched: GrayImage,
    pub filtered: GrayImage,
    pub bright: BinaryMask,
    pub hough: Vec<CandidateCircle>,
    pub candidates: Vec<CandidateCircle>,
}

pub fn propose_stages(img: &GrayImage, params: &ProposalParams) -> Result<ProposalStages> {
    img.require_depth(BitDepth::Eight)?;
    let stretched = stretch_contrast(img, params.low_frac, params.high_frac)?;
    let filtered = median_filter(&stretched, params.median_window)?;
    let bright = mask_bright_regions(&filtered, &params.bright, params.hough.r_max);
    let hough = hough_circles(&filtered, &bright, &params.hough)?;
    let candidates = dark_halo_filter(&filtered, &hough, params.halo_delta);
    Ok(ProposalStages { stretched, filtered, bright, hough, candidates })
}

/// The full four-step pipeline on an 8-bit image.
pub fn propose_candidates(img: &GrayImage, params: &ProposalParams) -> Result<Vec<CandidateCircle>> {
    propose_stages(img, params).map(|s| s.candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::LabelMask;

    fn img8(w: usize, h: usize, px: Vec<u16>) -> GrayImage {
        GrayImage::new(w, h, BitDepth::Eight, px).unwrap()
    }

    fn disc_image(w: usize, h: usize, discs: &[(f64, f64, f64)], bg: u16, fg: u16) -> GrayImage {
        let mut img = GrayImage::filled(w, h, BitDepth::Eight, bg).unwrap();
        for &(cx, cy, r) in discs {
            for (x, y) in raster::disc_pixels(cx, cy, r, w, h) {
                img.set(x, y, fg);
            }
        }
        img
    }

    /// Low and high cuts by sorting every pixel.
    fn sort_oracle(img: &GrayImage, low: f64, high: f64) -> (u16, u16) {
        let mut s = img.pixels().to_vec();
        s.sort_unstable();
        let n = s.len() as f64;
        let lo = s[((low * n).ceil() as usize).max(1) - 1];
        let hi = s[((1.0 - high) * n).ceil() as usize - 1];
        (lo, hi)
    }

    #[test]
    fn stretch_constant_unchanged() {
        let img = GrayImage::filled(8, 8, BitDepth::Eight, 77).unwrap();
        assert_eq!(stretch_contrast(&img, 0.01, 0.01).unwrap(), img);
    }

    #[test]
    fn stretch_uniform_histogram() {
        // 4 copies of every value 0..=255
        let img = img8(64, 16, (0..1024).map(|i| (i % 256) as u16).collect());
        let (lo, hi) = sort_oracle(&img, 0.01, 0.01);
        assert_eq!((lo, hi), (2, 253));
        let out = stretch_contrast(&img, 0.01, 0.01).unwrap();
        for (&v, &o) in img.pixels().iter().zip(out.pixels()) {
            if v <= 2 {
                assert_eq!(o, 0);
            }
            if v >= 253 {
                assert_eq!(o, 255);
            }
            if v > 2 && v < 253 {
                assert!(o > 0 && o < 255);
            }
        }
    }

    #[test]
    fn stretch_two_values() {
        let img = img8(4, 2, vec![50, 50, 50, 50, 200, 200, 200, 200]);
        assert_eq!(sort_oracle(&img, 0.01, 0.01), (50, 200));
        let out = stretch_contrast(&img, 0.01, 0.01).unwrap();
        assert_eq!(out.pixels(), &[0, 0, 0, 0, 255, 255, 255, 255]);
    }

    #[test]
    fn stretch_rejects_bad_fractions() {
        let img = img8(2, 1, vec![0, 1]);
        assert!(stretch_contrast(&img, 0.6, 0.5).is_err());
        assert!(stretch_contrast(&img, -0.1, 0.0).is_err());
    }

    #[test]
    fn median_examples() {
        let flat = GrayImage::filled(9, 9, BitDepth::Eight, 40).unwrap();
        assert_eq!(median_filter(&flat, 15).unwrap(), flat);
        let mut imp = flat.clone();
        imp.set(4, 4, 255);
        // window 3 around the impulse: eight 40s and one 255, median 40
        assert_eq!(median_filter(&imp, 3).unwrap(), flat);
        assert_eq!(median_filter(&imp, 1).unwrap(), imp);
        assert!(median_filter(&imp, 4).is_err());
    }

    #[test]
    fn median_histogram_matches_sorting() {
        let mut rng = crate::rng::DetRng::new(3);
        let img = img8(23, 17, (0..23 * 17).map(|_| rng.below(256) as u16).collect());
        for win in [3, 5, 15] {
            assert_eq!(median_histogram(&img, win), median_sorting(&img, win));
        }
    }

    #[test]
    fn bright_mask_examples() {
        let params = BrightMaskParams::default();
        let flat = GrayImage::filled(128, 128, BitDepth::Eight, 90).unwrap();
        assert!(mask_bright_regions(&flat, &params, 20.0).is_empty());

        let disc = disc_image(128, 128, &[(64.0, 64.0, 15.0)], 90, 200);
        assert!(mask_bright_regions(&disc, &params, 20.0).is_empty());

        // 10x the largest virus area (pi * 20^2), as a 112 x 112 rectangle
        let side = (10.0 * std::f64::consts::PI * 400.0f64).sqrt().ceil() as usize;
        let mut rect = GrayImage::filled(256, 256, BitDepth::Eight, 90).unwrap();
        for y in 20..20 + side {
            for x in 30..30 + side {
                rect.set(x, y, 200);
            }
        }
        let m = mask_bright_regions(&rect, &params, 20.0);
        assert_eq!(m.count(), side * side);
        assert!(m.get(30, 20) && m.get(30 + side - 1, 20 + side - 1) && !m.get(29, 20));
    }

    #[test]
    fn hough_blank_and_bad_range() {
        let blank = GrayImage::filled(64, 64, BitDepth::Eight, 100).unwrap();
        let ex = BinaryMask::empty(64, 64);
        assert!(hough_circles(&blank, &ex, &HoughParams::default()).unwrap().is_empty());
        let bad = HoughParams { r_min: 20.0, r_max: 20.0, ..HoughParams::default() };
        assert!(hough_circles(&blank, &ex, &bad).is_err());
    }

    #[test]
    fn hough_single_disc() {
        let img = disc_image(256, 256, &[(100.0, 120.0, 30.0)], 60, 180);
        let params = HoughParams { r_min: 20.0, r_max: 40.0, ..HoughParams::default() };
        let c = hough_circles(&img, &BinaryMask::empty(256, 256), &params).unwrap();
        assert_eq!(c.len(), 1, "{c:?}");
        assert!((c[0].cx - 100.0).hypot(c[0].cy - 120.0) <= 2.0, "{c:?}");
        assert!((c[0].r - 30.0).abs() <= 3.0, "{c:?}");
    }

    #[test]
    fn hough_two_discs() {
        let truth = [(100.0, 120.0, 30.0), (300.0, 120.0, 28.0)];
        let img = disc_image(400, 256, &truth, 60, 180);
        let params = HoughParams { r_min: 20.0, r_max: 40.0, ..HoughParams::default() };
        let c = hough_circles(&img, &BinaryMask::empty(400, 256), &params).unwrap();
        assert_eq!(c.len(), 2, "{c:?}");
        for &(tx, ty, tr) in &truth {
            assert!(c.iter().any(|k| (k.cx - tx).hypot(k.cy - ty) <= 2.0 && (k.r - tr).abs() <= 3.0));
        }
    }

    #[test]
    fn hough_ignores_excluded_pixels() {
        let img = disc_image(128, 128, &[(64.0, 64.0, 15.0)], 60, 180);
        let mut ex = BinaryMask::empty(128, 128);
        ex.bits.iter_mut().for_each(|b| *b = true);
        assert!(hough_circles(&img, &ex, &HoughParams::default()).unwrap().is_empty());
    }

    #[test]
    fn hough_translation_equivariant() {
        let params = HoughParams::default();
        let ex = BinaryMask::empty(128, 128);
        let base = hough_circles(&disc_image(128, 128, &[(50.0, 60.0, 15.0)], 60, 180), &ex, &params).unwrap();
        for (dx, dy) in [(3.0, 0.0), (-5.0, 7.0), (11.0, -4.0)] {
            let moved = disc_image(128, 128, &[(50.0 + dx, 60.0 + dy, 15.0)], 60, 180);
            let c = hough_circles(&moved, &ex, &params).unwrap();
            assert_eq!(c.len(), base.len());
            assert!((c[0].cx - base[0].cx - dx).abs() <= 1.0);
            assert!((c[0].cy - base[0].cy - dy).abs() <= 1.0);
        }
    }

    #[test]
    fn halo_filter_examples() {
        assert!(dark_halo_filter(&GrayImage::filled(8, 8, BitDepth::Eight, 0).unwrap(), &[], 10.0).is_empty());

        // bright disc with a dark ring on a mid background
        let mut img = disc_image(96, 96, &[(48.0, 48.0, 19.0)], 110, 75);
        for (x, y) in raster::disc_pixels(48.0, 48.0, 15.0, 96, 96) {
            img.set(x, y, 180);
        }
        let cand = CandidateCircle { cx: 48.0, cy: 48.0, r: 15.0, score: 1.0 };
        let (mode, median) = halo_statistics(&img, &cand).unwrap();
        assert_eq!((mode, median), (110, 180));
        assert_eq!(dark_halo_filter(&img, &[cand], 10.0), vec![cand]);

        // same disc on a background as bright as the disc
        let bright = disc_image(96, 96, &[(48.0, 48.0, 15.0)], 178, 180);
        let (mode, median) = halo_statistics(&bright, &cand).unwrap();
        assert_eq!((mode, median), (178, 180));
        assert!(dark_halo_filter(&bright, &[cand], 10.0).is_empty());
    }

    #[test]
    fn halo_mode_ties_go_dark() {
        // 9x9 square around an r = 3 disc: 29 interior pixels, 52 surround
        // pixels split evenly between 50 and 60
        let mut img = GrayImage::filled(9, 9, BitDepth::Eight, 200).unwrap();
        let cand = CandidateCircle { cx: 4.0, cy: 4.0, r: 3.0, score: 0.0 };
        let mut k = 0;
        for y in 0..9 {
            for x in 0..9 {
                if !raster::disc_contains(4.0, 4.0, 3.0, x, y) {
                    img.set(x, y, if k % 2 == 0 { 60 } else { 50 });
                    k += 1;
                }
            }
        }
        let (mode, _) = halo_statistics(&img, &cand).unwrap();
        assert_eq!(mode, 50);
    }

    #[test]
    fn halo_filter_preserves_order_and_subset() {
        let mut img = disc_image(200, 100, &[(50.0, 50.0, 19.0), (150.0, 50.0, 19.0)], 110, 75);
        for (x, y) in raster::disc_pixels(50.0, 50.0, 15.0, 200, 100)
            .chain(raster::disc_pixels(150.0, 50.0, 15.0, 200, 100))
        {
            img.set(x, y, 180);
        }
        let cands = vec![
            CandidateCircle { cx: 150.0, cy: 50.0, r: 15.0, score: 2.0 },
            CandidateCircle { cx: 100.0, cy: 50.0, r: 15.0, score: 1.5 },
            CandidateCircle { cx: 50.0, cy: 50.0, r: 15.0, score: 1.0 },
        ];
        let kept = dark_halo_filter(&img, &cands, 10.0);
        assert_eq!(kept, vec![cands[0], cands[2]]);
    }

    #[test]
    fn propose_blank_is_empty_and_requires_8bit() {
        let blank = GrayImage::filled(128, 128, BitDepth::Eight, 120).unwrap();
        assert!(propose_candidates(&blank, &ProposalParams::default()).unwrap().is_empty());
        let deep = GrayImage::filled(16, 16, BitDepth::Sixteen, 1).unwrap();
        assert!(propose_candidates(&deep, &ProposalParams::default()).is_err());
    }

    #[test]
    fn truth_mask_helper_consistent() {
        // the shared rasterizer is what both truth masks and discs here use
        let img = disc_image(32, 32, &[(10.0, 12.0, 5.0)], 0, 1);
        let m = LabelMask::from_circles(32, 32, &[Circle::new(10.0, 12.0, 5.0)]).unwrap();
        let from_img: Vec<u8> = img.pixels().iter().map(|&v| v as u8).collect();
        assert_eq!(from_img, m.labels());
    }
}
