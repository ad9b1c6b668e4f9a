//! PNG / PGM / PPM reading and writing, and the paired dataset layout.
//!
//! A dataset directory holds `<name>_1.<ext>` and `<name>_2.<ext>` for every
//! registered pair, with `ext` one of `png`, `pgm`, `ppm`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An image split into three `[0, 1]` colour planes.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub r: Image,
    pub g: Image,
    pub b: Image,
}

impl RgbImage {
    pub fn dims(&self) -> (usize, usize) {
        self.r.dims()
    }

    pub fn luma(&self) -> Image {
        let [wr, wg, wb] = LUMA_WEIGHTS;
        let data = self
            .r
            .data()
            .iter()
            .zip(self.g.data())
            .zip(self.b.data())
            .map(|((r, g), b)| wr * r + wg * g + wb * b)
            .collect();
        Image::new(self.r.width(), self.r.height(), data).expect("planes share dims")
    }

    /// Full-range YCbCr chroma `(cb, cr)` of every pixel.
    pub fn chroma(&self) -> (Image, Image) {
        let y = self.luma();
        let cb = Image::from_fn(y.width(), y.height(), |x, yy| {
            (self.b.get(x, yy) - y.get(x, yy)) / 1.772
        });
        let cr = Image::from_fn(y.width(), y.height(), |x, yy| {
            (self.r.get(x, yy) - y.get(x, yy)) / 1.402
        });
        (cb, cr)
    }

    /// Inverse of [`RgbImage::luma`] plus [`RgbImage::chroma`], clamped to `[0, 1]`.
    pub fn from_ycbcr(y: &Image, cb: &Image, cr: &Image) -> RgbImage {
        let [wr, wg, wb] = LUMA_WEIGHTS;
        let (w, h) = y.dims();
        let r = Image::from_fn(w, h, |x, yy| y.get(x, yy) + 1.402 * cr.get(x, yy));
        let b = Image::from_fn(w, h, |x, yy| y.get(x, yy) + 1.772 * cb.get(x, yy));
        let g = Image::from_fn(w, h, |x, yy| {
            (y.get(x, yy) - wr * r.get(x, yy) - wb * b.get(x, yy)) / wg
        });
        let clamp = |p: Image| p.map(|v| v.clamp(0.0, 1.0));
        RgbImage {
            r: clamp(r),
            g: clamp(g),
            b: clamp(b),
        }
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn planes_of(img: &DynamicImage) -> RgbImage {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane =
        |c: usize| Image::new(w, h, rgb.pixels().map(|p| p.0[c] as f64).collect()).expect("dims");
    RgbImage {
        r: plane(0),
        g: plane(1),
        b: plane(2),
    }
}

fn is_gray(img: &DynamicImage) -> bool {
    !img.color().has_color()
}

/// Loads an image as luma in `[0, 1]`. Colour images use BT.601 weights.
pub fn load_luma(path: &Path) -> Result<Image> {
    let img = open(path)?;
    if is_gray(&img) {
        let l = img.to_luma32f();
        let (w, h) = (l.width() as usize, l.height() as usize);
        return Image::new(w, h, l.pixels().map(|p| p.0[0] as f64).collect());
    }
    Ok(planes_of(&img).luma())
}

/// Loads an image as colour planes; `None` for single-channel files.
pub fn load_rgb(path: &Path) -> Result<Option<RgbImage>> {
    let img = open(path)?;
    if is_gray(&img) {
        return Ok(None);
    }
    Ok(Some(planes_of(&img)))
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit grayscale image. The format follows the extension.
pub fn save_luma(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer sized from image");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit RGB image.
pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let (w, h) = img.dims();
    let mut raw = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        raw.push(to_u8(img.r.data()[i]));
        raw.push(to_u8(img.g.data()[i]));
        raw.push(to_u8(img.b.data()[i]));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from image");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One registered multi-focus pair.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub first: Image,
    pub second: Image,
}

impl ImagePair {
    pub fn dims(&self) -> (usize, usize) {
        self.first.dims()
    }
}

/// Splits `a_1.png` into `("a", 1)`.
fn pair_member(path: &Path) -> Option<(String, u8)> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let (name, idx) = stem.rsplit_once('_')?;
    match idx {
        "1" if !name.is_empty() => Some((name.to_string(), 1)),
        "2" if !name.is_empty() => Some((name.to_string(), 2)),
        _ => None,
    }
}

/// Lists pair file paths of a dataset directory, sorted by pair name.
pub fn list_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut found: BTreeMap<String, [Option<PathBuf>; 2]> = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some((name, idx)) = pair_member(&path) {
            let slot = &mut found.entry(name.clone()).or_default()[idx as usize - 1];
            if let Some(prev) = slot {
                return Err(Error::Dataset(format!(
                    "pair {name} has two candidates: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
            *slot = Some(path);
        }
    }
    let mut pairs = Vec::with_capacity(found.len());
    for (name, [a, b]) in found {
        match (a, b) {
            (Some(a), Some(b)) => pairs.push((name, a, b)),
            (Some(p), None) | (None, Some(p)) => {
                return Err(Error::Dataset(format!(
                    "{} has no partner image",
                    p.display()
                )))
            }
            (None, None) => unreachable!(),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no <name>_1/<name>_2 image pairs in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// Loads every pair of a dataset directory as luma, in lexicographic name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    list_pairs(dir)?
        .into_iter()
        .map(|(name, a, b)| {
            let first = load_luma(&a)?;
            let second = load_luma(&b)?;
            if first.dims() != second.dims() {
                return Err(Error::PairSizeMismatch {
                    name,
                    first: a,
                    second: b,
                    first_dims: first.dims(),
                    second_dims: second.dims(),
                });
            }
            Ok(ImagePair {
                name,
                first,
                second,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_names_parse() {
        assert_eq!(pair_member(Path::new("d/a_1.png")), Some(("a".into(), 1)));
        assert_eq!(
            pair_member(Path::new("d/lytro_03_2.PGM")),
            Some(("lytro_03".into(), 2))
        );
        assert_eq!(pair_member(Path::new("d/a_3.png")), None);
        assert_eq!(pair_member(Path::new("d/a_1.jpg")), None);
        assert_eq!(pair_member(Path::new("d/_1.png")), None);
    }

    #[test]
    fn ycbcr_round_trip() {
        let rgb = RgbImage {
            r: Image::from_fn(4, 3, |x, y| (x * 3 + y) as f64 / 12.0),
            g: Image::from_fn(4, 3, |x, y| (x + y * 2) as f64 / 10.0),
            b: Image::from_fn(4, 3, |x, y| ((x * y) % 5) as f64 / 5.0),
        };
        let (cb, cr) = rgb.chroma();
        let back = RgbImage::from_ycbcr(&rgb.luma(), &cb, &cr);
        for (p, q) in [(&rgb.r, &back.r), (&rgb.g, &back.g), (&rgb.b, &back.b)] {
            for (a, b) in p.data().iter().zip(q.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
