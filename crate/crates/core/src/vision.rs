//! Melt-pool geometry from camera frames.
//!
//! A frame is cropped, binarized against its mean intensity, reduced to the
//! largest 4-connected bright region, and measured with two circles: the
//! largest inscribed circle gives the melt-pool width and the smallest
//! enclosing circle gives its length.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if width * height != pixels.len() {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn full_rect(&self) -> CropRect {
        CropRect { x0: 0, y0: 0, w: self.width, h: self.height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    fn check(&self, img: &GrayImage) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::invalid("crop must be at least one pixel in each direction"));
        }
        if self.x0 + self.w > img.width || self.y0 + self.h > img.height {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} exceeds {}x{} image",
                self.w, self.h, self.x0, self.y0, img.width, img.height
            )));
        }
        Ok(())
    }
}

/// Binary image; `true` marks melt-pool pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != bits.len() {
            return Err(Error::invalid("mask dimensions do not match its contents"));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Foreground pixel centers as (x, y).
    pub fn foreground(&self) -> Vec<(f64, f64)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.get(x, y))
            .map(|(x, y)| (x as f64, y as f64))
            .collect()
    }
}

/// Foreground iff the pixel is strictly brighter than the mean of the crop.
pub fn binarize_mean(img: &GrayImage, crop: CropRect) -> Result<Mask> {
    crop.check(img)?;
    let mut sum = 0u64;
    for y in crop.y0..crop.y0 + crop.h {
        for x in crop.x0..crop.x0 + crop.w {
            sum += img.get(x, y) as u64;
        }
    }
    let count = (crop.w * crop.h) as u64;
    // Integer comparison against the exact mean: p > sum / count  <=>  p * count > sum.
    Mask::from_fn(crop.w, crop.h, |x, y| {
        img.get(crop.x0 + x, crop.y0 + y) as u64 * count > sum
    })
}

/// Keeps the largest 4-connected foreground component. Ties go to the
/// component met first in raster order.
pub fn largest_connected_component(mask: &Mask) -> Result<Mask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0usize; w * h];
    let mut best = (0usize, 0usize);
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    if best.0 == 0 {
        return Err(Error::EmptyPool);
    }
    Mask::new(w, h, label.iter().map(|&l| l == best.0).collect())
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from each pixel to the nearest background pixel,
/// with everything outside the mask counting as background.
pub fn squared_distance_to_background(mask: &Mask) -> Vec<f64> {
    // Finite stand-in for infinity; every padded column holds a zero so it never survives.
    const FAR: f64 = 1e20;
    let (w, h) = (mask.width + 2, mask.height + 2);
    let inside = |x: usize, y: usize| x >= 1 && y >= 1 && x <= mask.width && y <= mask.height && mask.get(x - 1, y - 1);
    let mut grid: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| if inside(x, y) { FAR } else { 0.0 })
        .collect();
    let n = w.max(h);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (x, y)))
        .map(|(x, y)| grid[(y + 1) * w + x + 1])
        .collect()
}

/// Diameter in pixels of the largest circle inside the foreground.
///
/// The circle is centered on a foreground pixel and reaches the near edge of
/// the closest background pixel: diameter = 2 * d - 1 for a center-to-center
/// distance `d`.
pub fn largest_inscribed_circle(mask: &Mask) -> Result<f64> {
    if mask.count() == 0 {
        return Err(Error::EmptyPool);
    }
    let best = squared_distance_to_background(mask)
        .into_iter()
        .zip(&mask.bits)
        .filter(|(_, fg)| **fg)
        .map(|(d2, _)| d2)
        .fold(0.0, f64::max);
    Ok(2.0 * best.sqrt() - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, p: (f64, f64)) -> bool {
        let d = ((p.0 - self.cx).powi(2) + (p.1 - self.cy).powi(2)).sqrt();
        d <= self.r * (1.0 + 1e-12) + 1e-9
    }

    fn diametral(a: (f64, f64), b: (f64, f64)) -> Self {
        let (cx, cy) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let r = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / 2.0;
        Self { cx, cy, r }
    }

    fn through(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Self {
        let (bx, by) = (b.0 - a.0, b.1 - a.1);
        let (cx, cy) = (c.0 - a.0, c.1 - a.1);
        let d = 2.0 * (bx * cy - by * cx);
        if d.abs() < 1e-12 {
            // Collinear: the farthest pair spans the others.
            let candidates = [Self::diametral(a, b), Self::diametral(a, c), Self::diametral(b, c)];
            return candidates.into_iter().max_by(|p, q| p.r.total_cmp(&q.r)).unwrap();
        }
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        Self { cx: ux + a.0, cy: uy + a.1, r: (ux * ux + uy * uy).sqrt() }
    }
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimal enclosing circle of a point set (randomized incremental, exact).
pub fn min_enclosing_circle(points: &[(f64, f64)]) -> Option<Circle> {
    if points.is_empty() {
        return None;
    }
    let mut pts = convex_hull(points.to_vec());
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5EC));
    let mut c = Circle { cx: pts[0].0, cy: pts[0].1, r: 0.0 };
    for i in 1..pts.len() {
        if c.contains(pts[i]) {
            continue;
        }
        c = Circle { cx: pts[i].0, cy: pts[i].1, r: 0.0 };
        for j in 0..i {
            if c.contains(pts[j]) {
                continue;
            }
            c = Circle::diametral(pts[i], pts[j]);
            for k in 0..j {
                if !c.contains(pts[k]) {
                    c = Circle::through(pts[i], pts[j], pts[k]);
                }
            }
        }
    }
    Some(c)
}

/// Diameter in pixels of the smallest circle covering every foreground pixel center.
pub fn smallest_enclosing_circle(mask: &Mask) -> Result<f64> {
    min_enclosing_circle(&mask.foreground())
        .map(|c| 2.0 * c.r)
        .ok_or(Error::EmptyPool)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeltPoolGeometry {
    pub mpw: f64,
    pub mpl: f64,
    pub area_px: usize,
    pub valid: bool,
}

impl MeltPoolGeometry {
    pub fn invalid() -> Self {
        Self { mpw: 0.0, mpl: 0.0, area_px: 0, valid: false }
    }
}

pub fn extract_geometry(img: &GrayImage, crop: CropRect, mm_per_px: f64) -> Result<MeltPoolGeometry> {
    if !(mm_per_px > 0.0) {
        return Err(Error::invalid("pixel scale must be positive"));
    }
    let mask = binarize_mean(img, crop)?;
    let pool = match largest_connected_component(&mask) {
        Ok(pool) => pool,
        Err(Error::EmptyPool) => return Ok(MeltPoolGeometry::invalid()),
        Err(e) => return Err(e),
    };
    let inscribed = largest_inscribed_circle(&pool)?;
    let enclosing = smallest_enclosing_circle(&pool)?;
    Ok(MeltPoolGeometry {
        mpw: inscribed * mm_per_px,
        mpl: enclosing * mm_per_px,
        area_px: pool.count(),
        valid: true,
    })
}

/// Reads a binary (`P5`) 8-bit PGM.
pub fn read_pgm<R: Read>(mut reader: R) -> Result<GrayImage> {
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::Parse(format!("unsupported PGM magic `{}`", tokens[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse(format!("bad PGM {what} `{s}`")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    if parse(&tokens[3], "maxval")? != 255 {
        return Err(Error::Parse("only maxval 255 is supported".into()));
    }
    pos += 1;
    let end = pos + width * height;
    if end > data.len() {
        return Err(Error::Parse("PGM pixel data is truncated".into()));
    }
    GrayImage::new(width, height, data[pos..end].to_vec())
}

pub fn write_pgm<W: Write>(img: &GrayImage, mut writer: W) -> Result<()> {
    write!(writer, "P5\n{} {}\n255\n", img.width, img.height)?;
    writer.write_all(&img.pixels)?;
    Ok(())
}
