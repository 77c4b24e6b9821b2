//! Binary morphology, connected components and histogram thresholds shared by
//! the candidate pipeline and mask post-processing.

use crate::error::{Error, Result};
use crate::raster::LabelMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn from_labels(mask: &LabelMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            bits: mask.labels().iter().map(|&l| l == 1).collect(),
        }
    }

    pub fn to_labels(&self) -> LabelMask {
        LabelMask::new(self.width, self.height, self.bits.iter().map(|&b| b as u8).collect())
            .expect("dims match")
    }
}

/// Offsets of a disc structuring element, `dx^2 + dy^2 <= r^2`.
pub fn disc_element(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Row spans `(dy, dx_min, dx_max)` of a disc element, used by the fast paths.
fn disc_rows(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r)
        .map(|dy| {
            let half = ((r * r - dy * dy) as f64).sqrt().floor() as isize;
            (dy, half)
        })
        .collect()
}

/// Dilation with a disc; pixels outside the raster count as background.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width as isize, mask.height as isize);
    let rows = disc_rows(radius);
    let mut out = BinaryMask::empty(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[(y * w + x) as usize] {
                continue;
            }
            for &(dy, half) in &rows {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let x0 = (x - half).max(0);
                let x1 = (x + half).min(w - 1);
                let row = (yy * w) as usize;
                for b in &mut out.bits[row + x0 as usize..=row + x1 as usize] {
                    *b = true;
                }
            }
        }
    }
    out
}

/// Erosion with a disc; pixels outside the raster count as foreground so the
/// border does not eat into objects touching it.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let inverted = BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: mask.bits.iter().map(|&b| !b).collect(),
    };
    let grown = dilate(&inverted, radius);
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: grown.bits.iter().map(|&b| !b).collect(),
    }
}

pub fn close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

/// One 8-connected component: its pixel indices in raster order.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<usize>,
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn components8(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// Otsu threshold over a histogram: the bin `t` maximizing the between-class
/// variance of `{v <= t}` vs `{v > t}`. Ties resolve to the lowest bin.
pub fn otsu_threshold(hist: &[u64]) -> usize {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0f64;
    let mut sum0 = 0f64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        // single populated bin
        hist.iter().rposition(|&c| c > 0).unwrap_or(0)
    } else {
        best.1
    }
}

/// Binary median: a pixel is set iff more than half of the `window x window`
/// neighbourhood (replicate padding) is set.
pub fn binary_median(mask: &BinaryMask, window: usize) -> Result<BinaryMask> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("median window must be odd, got {window}")));
    }
    let (w, h) = (mask.width as isize, mask.height as isize);
    let r = (window / 2) as isize;
    let majority = window * window / 2;
    // column sums over the vertical window with replicate padding, then slide horizontally
    let mut out = BinaryMask::empty(mask.width, mask.height);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut col = vec![0usize; mask.width];
    for y in 0..h {
        for (x, c) in col.iter_mut().enumerate() {
            *c = (-r..=r)
                .filter(|&dy| mask.bits[clamp(y + dy, h) * mask.width + x])
                .count();
        }
        for x in 0..w {
            let s: usize = (-r..=r).map(|dx| col[clamp(x + dx, w)]).sum();
            out.bits[(y * w + x) as usize] = s > majority;
        }
    }
    Ok(out)
}
