//! Raster types, depth conversion, patch tiling and image file I/O.
//!
//! Pixel `(x, y)` is addressed with its center at integer coordinates; circle
//! centers and radii share that frame. [`disc_contains`] is the single
//! rasterization rule used for truth masks, exports and overlap scoring.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }
}

/// Single-channel image, 8- or 16-bit, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    depth: BitDepth,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, depth: BitDepth, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {width}x{height} image",
                pixels.len()
            )));
        }
        let max = depth.max_value();
        if let Some(v) = pixels.iter().find(|&&v| v > max) {
            return Err(Error::InvalidArgument(format!(
                "value {v} exceeds {}-bit range",
                depth.bits()
            )));
        }
        Ok(Self { width, height, depth, pixels })
    }

    pub fn filled(width: usize, height: usize, depth: BitDepth, value: u16) -> Result<Self> {
        Self::new(width, height, depth, vec![value; width * height])
    }

    pub fn from_u8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(width, height, BitDepth::Eight, pixels.iter().map(|&v| v as u16).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> BitDepth {
        self.depth
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    /// Replicate-padded read.
    pub fn get_clamped(&self, x: isize, y: isize) -> u16 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        debug_assert!(v <= self.depth.max_value());
        self.pixels[y * self.width + x] = v;
    }

    /// 8-bit samples; errors on 16-bit images.
    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.require_depth(BitDepth::Eight)?;
        Ok(self.pixels.iter().map(|&v| v as u8).collect())
    }

    pub fn require_depth(&self, depth: BitDepth) -> Result<()> {
        if self.depth != depth {
            return Err(Error::BitDepth { expected: depth.bits(), actual: self.depth.bits() });
        }
        Ok(())
    }

    /// Maps values through a closure into a new image of the given depth.
    pub fn map(&self, depth: BitDepth, f: impl Fn(u16) -> u16) -> Result<Self> {
        Self::new(self.width, self.height, depth, self.pixels.iter().map(|&v| f(v)).collect())
    }
}

/// Per-pixel class ids: 0 background, 1 intact virus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
        }
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {width}x{height} mask",
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("label {v} outside {{0, 1}}")));
        }
        Ok(Self { width, height, labels })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.labels[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    /// Sets every pixel of the disc to 1.
    pub fn paint_disc(&mut self, cx: f64, cy: f64, r: f64) {
        for (x, y) in disc_pixels(cx, cy, r, self.width, self.height) {
            self.labels[y * self.width + x] = 1;
        }
    }

    /// Union of rasterized circles.
    pub fn from_circles<'a>(
        width: usize,
        height: usize,
        circles: impl IntoIterator<Item = &'a Circle>,
    ) -> Result<Self> {
        let mut m = Self::empty(width, height)?;
        for c in circles {
            m.paint_disc(c.cx, c.cy, c.r);
        }
        Ok(m)
    }
}

/// A circle in pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, r }
    }

    pub fn pixels(&self, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        disc_pixels(self.cx, self.cy, self.r, width, height)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        disc_contains(self.cx, self.cy, self.r, x, y)
    }

    /// Fully inside a `width x height` raster, edge pixels included.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.r > 0.0
            && self.cx - self.r >= 0.0
            && self.cy - self.r >= 0.0
            && self.cx + self.r <= (width - 1) as f64
            && self.cy + self.r <= (height - 1) as f64
    }
}

/// `true` iff the pixel center lies strictly inside the circle.
#[inline]
pub fn disc_contains(cx: f64, cy: f64, r: f64, x: usize, y: usize) -> bool {
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    dx * dx + dy * dy < r * r
}

/// Pixels of a disc clipped to a `width x height` raster, row-major order.
pub fn disc_pixels(
    cx: f64,
    cy: f64,
    r: f64,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(-1.0) as isize).min(width as isize - 1);
    let y1 = ((cy + r).ceil().max(-1.0) as isize).min(height as isize - 1);
    let (xs, ys) = if x1 < 0 || y1 < 0 || r <= 0.0 {
        (1..0, 1..0)
    } else {
        (x0..x1 as usize + 1, y0..y1 as usize + 1)
    };
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
        .filter(move |&(x, y)| disc_contains(cx, cy, r, x, y))
}

/// 8-bit RGB raster used for overlays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        let data = img
            .pixels()
            .iter()
            .map(|&v| {
                let g = match img.depth() {
                    BitDepth::Eight => v as u8,
                    BitDepth::Sixteen => depth_16_to_8(v),
                };
                [g, g, g]
            })
            .collect();
        Self { width: img.width(), height: img.height(), data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.data[y * self.width + x] = c;
    }
}

#[inline]
fn depth_16_to_8(v: u16) -> u8 {
    // round(v * 255 / 65535) in exact integer arithmetic
    ((v as u32 * 255 + 32767) / 65535) as u8
}

/// Full-scale rescale `round(v * 255 / 65535)`.
pub fn convert_depth_16_to_8(img: &GrayImage) -> Result<GrayImage> {
    img.require_depth(BitDepth::Sixteen)?;
    img.map(BitDepth::Eight, |v| depth_16_to_8(v) as u16)
}

/// Brings any supported image to 8 bits (identity for 8-bit input).
pub fn to_8bit(img: &GrayImage) -> GrayImage {
    match img.depth() {
        BitDepth::Eight => img.clone(),
        BitDepth::Sixteen => convert_depth_16_to_8(img).expect("depth checked"),
    }
}

/// A raster that can be cut into square tiles and reassembled.
pub trait Tile: Sized {
    fn dims(&self) -> (usize, usize);
    fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self;
    fn assemble(width: usize, height: usize, tiles: &[(usize, usize, &Self)]) -> Result<Self>;
}

fn crop_vec<T: Copy>(src: &[T], stride: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        out.extend_from_slice(&src[y * stride + x0..y * stride + x0 + w]);
    }
    out
}

fn paste_vec<T: Copy>(dst: &mut [T], stride: usize, x0: usize, y0: usize, w: usize, src: &[T]) {
    for (row, chunk) in src.chunks_exact(w).enumerate() {
        let off = (y0 + row) * stride + x0;
        dst[off..off + w].copy_from_slice(chunk);
    }
}

impl Tile for GrayImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            width: w,
            height: h,
            depth: self.depth,
            pixels: crop_vec(&self.pixels, self.width, x0, y0, w, h),
        }
    }

    fn assemble(width: usize, height: usize, tiles: &[(usize, usize, &Self)]) -> Result<Self> {
        let depth = tiles
            .first()
            .map(|t| t.2.depth)
            .ok_or_else(|| Error::InvalidArgument("no tiles".into()))?;
        if tiles.iter().any(|t| t.2.depth != depth) {
            return Err(Error::ShapeMismatch("tiles have mixed bit depths".into()));
        }
        let mut pixels = vec![0u16; width * height];
        for &(x0, y0, t) in tiles {
            paste_vec(&mut pixels, width, x0, y0, t.width, &t.pixels);
        }
        GrayImage::new(width, height, depth, pixels)
    }
}

impl Tile for LabelMask {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            width: w,
            height: h,
            labels: crop_vec(&self.labels, self.width, x0, y0, w, h),
        }
    }

    fn assemble(width: usize, height: usize, tiles: &[(usize, usize, &Self)]) -> Result<Self> {
        let mut labels = vec![0u8; width * height];
        for &(x0, y0, t) in tiles {
            paste_vec(&mut labels, width, x0, y0, t.width, &t.labels);
        }
        LabelMask::new(width, height, labels)
    }
}

/// Non-overlapping square tiles in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<T>,
}

pub fn split_patches<T: Tile>(img: &T, patch_size: usize) -> Result<PatchGrid<T>> {
    let (width, height) = img.dims();
    if patch_size == 0 || width % patch_size != 0 || height % patch_size != 0 {
        return Err(Error::NotDivisible { width, height, patch: patch_size });
    }
    let rows = height / patch_size;
    let cols = width / patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            patches.push(img.crop(c * patch_size, r * patch_size, patch_size, patch_size));
        }
    }
    Ok(PatchGrid { patch_size, rows, cols, patches })
}

pub fn stitch_patches<T: Tile>(grid: &PatchGrid<T>) -> Result<T> {
    let n = grid.rows * grid.cols;
    if n == 0 || grid.patches.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} patches for a {}x{} grid",
            grid.patches.len(),
            grid.rows,
            grid.cols
        )));
    }
    let s = grid.patch_size;
    if let Some(p) = grid.patches.iter().find(|p| p.dims() != (s, s)) {
        let (w, h) = p.dims();
        return Err(Error::ShapeMismatch(format!("patch is {w}x{h}, expected {s}x{s}")));
    }
    let tiles: Vec<(usize, usize, &T)> = grid
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| ((i % grid.cols) * s, (i / grid.cols) * s, p))
        .collect();
    T::assemble(grid.cols * s, grid.rows * s, &tiles)
}

// ---------------------------------------------------------------------------
// File I/O

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Encodes a binary PGM: `P5\n<w> <h>\n<maxval>\n` followed by big-endian samples.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let maxval = img.depth().max_value();
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    match img.depth() {
        BitDepth::Eight => out.extend(img.pixels().iter().map(|&v| v as u8)),
        BitDepth::Sixteen => {
            for &v in img.pixels() {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("missing P5 magic".into()));
    }
    pos += 2;
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a number in header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header number out of range".into()))?;
    }
    // exactly one whitespace byte before the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    let depth = match maxval {
        255 => BitDepth::Eight,
        65535 => BitDepth::Sixteen,
        other => return Err(Error::Unsupported(format!("PGM maxval {other}"))),
    };
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    let pixels: Vec<u16> = match depth {
        BitDepth::Eight => {
            if payload.len() < n {
                return Err(Error::Format(format!("truncated payload: {} of {n} bytes", payload.len())));
            }
            payload[..n].iter().map(|&v| v as u16).collect()
        }
        BitDepth::Sixteen => {
            if payload.len() < 2 * n {
                return Err(Error::Format(format!(
                    "truncated payload: {} of {} bytes",
                    payload.len(),
                    2 * n
                )));
            }
            payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        }
    };
    GrayImage::new(width, height, depth, pixels)
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        let data: Vec<u8> = match img.depth() {
            BitDepth::Eight => {
                enc.set_depth(png::BitDepth::Eight);
                img.pixels().iter().map(|&v| v as u8).collect()
            }
            BitDepth::Sixteen => {
                enc.set_depth(png::BitDepth::Sixteen);
                img.pixels().iter().flat_map(|v| v.to_be_bytes()).collect()
            }
        };
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&data).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Unsupported(format!(
            "PNG color type {:?} (grayscale only)",
            info.color_type
        )));
    }
    let depth = match info.bit_depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => return Err(Error::Unsupported(format!("PNG bit depth {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut data).map_err(|e| Error::Format(e.to_string()))?;
    let data = &data[..frame.buffer_size()];
    let pixels = match depth {
        BitDepth::Eight => data.iter().map(|&v| v as u16).collect(),
        BitDepth::Sixteen => data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
    };
    GrayImage::new(w, h, depth, pixels)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let flat: Vec<u8> = img.data.iter().flatten().copied().collect();
        w.write_image_data(&flat).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

/// Reads a PGM (P5) or grayscale PNG, detected by magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else {
        Err(Error::Unsupported(format!("{}: unrecognized image format", path.display())))
    }
}

/// Writes PNG when the extension is `.png`, PGM otherwise.
pub fn write_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        _ => encode_pgm(img),
    };
    write_bytes(path, &bytes)
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_rgb_png(img)?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// 8-bit image with 0 for background and 255 for virus.
pub fn mask_to_image(mask: &LabelMask) -> GrayImage {
    let px = mask.labels().iter().map(|&l| if l == 1 { 255 } else { 0 }).collect();
    GrayImage::new(mask.width(), mask.height(), BitDepth::Eight, px).expect("mask dims are valid")
}

/// Masks are stored as 8-bit PGM (or PNG by extension) via [`mask_to_image`].
pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_image(&mask_to_image(mask), path)
}

pub fn mask_from_image(img: &GrayImage) -> Result<LabelMask> {
    let max = img.depth().max_value();
    let labels = img
        .pixels()
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            v if v == max => Ok(1),
            v => Err(Error::Format(format!("mask value {v} is neither 0 nor {max}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(img.width(), img.height(), labels)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    mask_from_image(&read_image(path)?)
}
