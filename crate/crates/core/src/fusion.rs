//! Fusing image files with a trained network.
//!
//! The network sees luma only. In colour mode each output pixel takes its
//! chroma from the source whose 7x7 local luma standard deviation is larger,
//! the same sharpness criterion the loss uses.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{self, RgbImage};
use crate::metrics::sharper_first;
use crate::model::MfNetWeights;
use crate::raster::Image;
use crate::ssim::SsimConstants;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColorMode {
    #[default]
    Luma,
    Color,
}

pub fn fuse_color(weights: &MfNetWeights, a: &RgbImage, b: &RgbImage) -> Result<RgbImage> {
    let (y1, y2) = (a.luma(), b.luma());
    let y = weights.fuse(&y1, &y2)?;
    let mask = sharper_first(&y1, &y2, SsimConstants::default().window)?;
    let (cb1, cr1) = a.chroma();
    let (cb2, cr2) = b.chroma();
    let (w, h) = y.dims();
    let pick = |p: &Image, q: &Image| {
        Image::from_fn(w, h, |x, yy| {
            if mask.get(x, yy) {
                p.get(x, yy)
            } else {
                q.get(x, yy)
            }
        })
    };
    Ok(RgbImage::from_ycbcr(
        &y,
        &pick(&cb1, &cb2),
        &pick(&cr1, &cr2),
    ))
}

/// Fuses two image files into `out`. Colour mode falls back to luma when
/// either input is single-channel.
pub fn fuse_files(
    weights: &MfNetWeights,
    in1: &Path,
    in2: &Path,
    out: &Path,
    mode: ColorMode,
) -> Result<()> {
    let l1 = imageio::load_luma(in1)?;
    let l2 = imageio::load_luma(in2)?;
    if l1.dims() != l2.dims() {
        return Err(Error::PairSizeMismatch {
            name: "input".into(),
            first: in1.to_path_buf(),
            second: in2.to_path_buf(),
            first_dims: l1.dims(),
            second_dims: l2.dims(),
        });
    }
    if mode == ColorMode::Color {
        if let (Some(a), Some(b)) = (imageio::load_rgb(in1)?, imageio::load_rgb(in2)?) {
            return imageio::save_rgb(out, &fuse_color(weights, &a, &b)?);
        }
    }
    imageio::save_luma(out, &weights.fuse(&l1, &l2)?)
}
