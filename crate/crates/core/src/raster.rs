//! Binary images: synthesis from a projected curve, morphology and PGM I/O.
//!
//! Pixel `(u, v)` is column `u`, row `v`; its center sits at the integer
//! coordinates of the camera's pixel frame.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::camera::CameraModel;
use crate::error::{domain, Error, Result};

/// A two-level image stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(domain("image dimensions must be positive"));
        }
        Ok(Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width as usize + u
    }

    pub fn get(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height && self.data[self.idx(u as usize, v as usize)]
    }

    pub fn set(&mut self, u: u32, v: u32, white: bool) {
        if u < self.width && v < self.height {
            let i = self.idx(u as usize, v as usize);
            self.data[i] = white;
        }
    }

    pub fn count_white(&self) -> usize {
        self.data.iter().filter(|&&w| w).count()
    }

    /// White pixels as integer `(u, v)`, row-major.
    pub fn white_pixels(&self) -> Vec<(u32, u32)> {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_pgm_from(BufReader::new(file))
    }

    /// Binary (`P5`) PGM with maxval up to 65535. Values at or above half
    /// the range count as white.
    pub fn read_pgm_from<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut fields: Vec<String> = Vec::new();
        while fields.len() < 4 {
            let mut byte = [0u8; 1];
            if input.read(&mut byte)? == 0 {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            match byte[0] {
                b'#' if header.is_empty() => {
                    let mut skip = Vec::new();
                    input.read_until(b'\n', &mut skip)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !header.is_empty() {
                        fields.push(String::from_utf8_lossy(&header).into_owned());
                        header.clear();
                    }
                }
                c => header.push(c),
            }
        }
        if fields[0] != "P5" {
            return Err(Error::Parse(format!("unsupported PGM magic {:?}", fields[0])));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::Parse(format!("invalid PGM {what} {s:?}")))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Parse("PGM dimensions or maxval out of range".into()));
        }
        let n = width as usize * height as usize;
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let mut raw = vec![0u8; n * bytes_per];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Parse("truncated PGM raster".into()))?;
        let threshold = maxval.div_ceil(2);
        let data = if bytes_per == 1 {
            raw.iter().map(|&b| b as u32 >= threshold).collect()
        } else {
            raw.chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32 >= threshold)
                .collect()
        };
        Ok(Self { width, height, data })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_pgm_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_pgm_to<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let raw: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        out.write_all(&raw)?;
        Ok(())
    }
}

/// Half-widths of the digital disk `dx^2 + dy^2 <= r^2`, indexed by `dy + r`.
fn disk_spans(radius: u32) -> Vec<i64> {
    let r = radius as i64;
    (-r..=r)
        .map(|dy| {
            let rem = r * r - dy * dy;
            let mut w = (rem as f64).sqrt() as i64;
            while w * w > rem {
                w -= 1;
            }
            while (w + 1) * (w + 1) <= rem {
                w += 1;
            }
            w
        })
        .collect()
}

/// Number of pixels in the digital disk of the given radius.
pub fn disk_area(radius: u32) -> usize {
    disk_spans(radius).iter().map(|w| (2 * w + 1) as usize).sum()
}

/// Morphological dilation with a digital disk.
pub fn dilate(image: &BinaryImage, radius: u32) -> BinaryImage {
    if radius == 0 {
        return image.clone();
    }
    let (w, h) = (image.width as i64, image.height as i64);
    let r = radius as i64;
    let spans = disk_spans(radius);
    // per-row difference arrays
    let mut diff = vec![0i32; (w as usize + 1) * h as usize];
    for (u, v) in image.white_pixels() {
        let (u, v) = (u as i64, v as i64);
        for (k, half) in spans.iter().enumerate() {
            let y = v + k as i64 - r;
            if y < 0 || y >= h {
                continue;
            }
            let lo = (u - half).max(0);
            let hi = (u + half + 1).min(w);
            let row = y as usize * (w as usize + 1);
            diff[row + lo as usize] += 1;
            diff[row + hi as usize] -= 1;
        }
    }
    let mut out = BinaryImage::new(image.width, image.height).unwrap();
    for y in 0..h as usize {
        let row = y * (w as usize + 1);
        let mut acc = 0;
        for x in 0..w as usize {
            acc += diff[row + x];
            out.data[y * w as usize + x] = acc > 0;
        }
    }
    out
}

/// Morphological erosion with a digital disk. Pixels outside the image
/// count as white, so the border does not erode the shape.
pub fn erode(image: &BinaryImage, radius: u32) -> BinaryImage {
    if radius == 0 {
        return image.clone();
    }
    let (w, h) = (image.width as usize, image.height as usize);
    let r = radius as i64;
    let spans = disk_spans(radius);
    // run lengths of white to the left and right of each pixel, inclusive
    let mut left = vec![0u32; w * h];
    let mut right = vec![0u32; w * h];
    for y in 0..h {
        let row = y * w;
        let mut run = u32::MAX / 2;
        for x in 0..w {
            run = if image.data[row + x] { run + 1 } else { 0 };
            left[row + x] = run;
        }
        run = u32::MAX / 2;
        for x in (0..w).rev() {
            run = if image.data[row + x] { run + 1 } else { 0 };
            right[row + x] = run;
        }
    }
    let mut out = BinaryImage::new(image.width, image.height).unwrap();
    for (u, v) in image.white_pixels() {
        let (u, v) = (u as usize, v as i64);
        let keep = spans.iter().enumerate().all(|(k, &half)| {
            let y = v + k as i64 - r;
            if y < 0 || y >= h as i64 {
                return true;
            }
            let i = y as usize * w + u;
            left[i].min(right[i]) as i64 > half
        });
        if keep {
            out.data[v as usize * w + u] = true;
        }
    }
    out
}

/// Erosion followed by dilation.
pub fn open(image: &BinaryImage, radius: u32) -> BinaryImage {
    dilate(&erode(image, radius), radius)
}

/// White pixels as real coordinates, row-major.
pub fn extract_pixels(image: &BinaryImage) -> Result<Vec<Vector2<f64>>> {
    let pixels: Vec<_> = image
        .white_pixels()
        .into_iter()
        .map(|(u, v)| Vector2::new(u as f64, v as f64))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyImage("no white pixels to extract".into()));
    }
    Ok(pixels)
}

/// Undilated rendering of a curve in one view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rasterization {
    pub image: BinaryImage,
    /// Points that fell outside the frame or behind the camera.
    pub skipped: usize,
}

/// Projects curve samples into a camera and sets the pixel at each rounded
/// projection (half away from zero). The caller samples densely enough that
/// consecutive projections are at most one pixel apart.
pub fn rasterize_curve(camera: &CameraModel, points: &[Vector3<f64>]) -> Result<Rasterization> {
    let (w, h) = camera.image_size;
    let mut image = BinaryImage::new(w, h)?;
    let mut skipped = 0;
    for p in points {
        let Ok(px) = camera.project(p) else {
            skipped += 1;
            continue;
        };
        let (u, v) = (px.x.round(), px.y.round());
        if u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64 {
            image.set(u as u32, v as u32, true);
        } else {
            skipped += 1;
        }
    }
    if image.count_white() == 0 {
        return Err(Error::EmptyImage("the curve projects outside the image".into()));
    }
    if skipped > 0 {
        log::info!("rasterization skipped {skipped} out-of-frame point(s)");
    }
    Ok(Rasterization { image, skipped })
}
