//! Single-channel floating point images and summed-area tables.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major single-channel image, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "image",
                format!(
                    "{width}x{height} needs {} pixels, got {}",
                    width * height,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Image {
            width,
            height,
            data,
        }
    }

    /// Pixelwise mean of two equally sized images.
    pub fn average(a: &Image, b: &Image) -> Result<Image> {
        ensure_same_dims("average", a, b)?;
        Ok(Image {
            width: a.width,
            height: a.height,
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| 0.5 * (x + y))
                .collect(),
        })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::of(v)).collect(),
        )
    }

    /// Extracts plane `(n, c)` of a tensor as an image.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, c: usize) -> Image {
        let [_, _, h, w] = t.shape();
        Image {
            width: w,
            height: h,
            data: t.plane(n, c).iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Stacks images into an `[N, 1, H, W]` tensor.
    pub fn stack<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("stack", "no images"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            ensure_same_dims("stack", first, img)?;
            data.extend(img.data.iter().map(|&v| T::of(v)));
        }
        Tensor::new([images.len(), 1, first.height, first.width], data)
    }
}

pub(crate) fn ensure_same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![a.height, a.width],
            found: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Summed-area table with a zero guard row and column.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    width: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(width: usize, height: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        let mut it = values.into_iter();
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += it.next().expect("integral image input too short");
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        IntegralImage { width, sums }
    }

    pub fn of(img: &Image) -> Self {
        Self::new(img.width, img.height, img.data.iter().copied())
    }

    /// Sum over the rectangle `[x0, x1) x [y0, y1)`.
    #[inline]
    pub fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }
}
