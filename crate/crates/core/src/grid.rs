//! Dense row-major rasters and the resampling used by the canonical image
//! transform and by refinement upsampling.
//!
//! Pixel-center convention throughout: pixel `(x, y)` covers the unit square
//! centered at `(x, y)`, so the center of the top-left pixel is `(0, 0)`.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("buffer of length {len} does not fit a {width}x{height} grid")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("grid must be at least 1x1")]
    Empty,
    #[error("non-finite depth at valid pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("normal at ({x}, {y}) is not unit length")]
    NotUnit { x: usize, y: usize },
    #[error("image intensity out of [0, 1] at ({x}, {y})")]
    IntensityRange { x: usize, y: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::Empty);
        }
        if data.len() != width * height {
            return Err(GridError::BadLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> Result<(), GridError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(GridError::ShapeMismatch(self.shape(), other.shape()))
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask, GridError> {
        self.same_shape(other)?;
        Ok(Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }
}

/// Dense depth in meters with a validity mask. Values at invalid pixels are
/// carried along but never read by any consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Grid<f64>,
    pub valid: Mask,
}

impl DepthMap {
    pub fn new(values: Grid<f64>, valid: Mask) -> Result<Self, GridError> {
        values.same_shape(&valid)?;
        for y in 0..values.height() {
            for x in 0..values.width() {
                if *valid.get(x, y) && !values.get(x, y).is_finite() {
                    return Err(GridError::NonFinite { x, y });
                }
            }
        }
        Ok(Self { values, valid })
    }

    /// All pixels valid.
    pub fn dense(values: Grid<f64>) -> Result<Self, GridError> {
        let valid = Grid::filled(values.width(), values.height(), true);
        Self::new(values, valid)
    }

    /// Builds a map where `None` marks an invalid pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(d) if d.is_finite() => {
                        values.push(d);
                        valid.push(true);
                    }
                    _ => {
                        values.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        Self {
            values: Grid {
                width,
                height,
                data: values,
            },
            valid: Grid {
                width,
                height,
                data: valid,
            },
        }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }

    /// Multiplies every value (valid or not) by `k`.
    pub fn scaled(&self, k: f64) -> DepthMap {
        DepthMap {
            values: self.values.map(|v| v * k),
            valid: self.valid.clone(),
        }
    }

    /// Clamps valid values into `[lo, hi]`.
    pub fn clamped(&self, lo: f64, hi: f64) -> DepthMap {
        let mut out = self.clone();
        for (v, &ok) in out.values.as_mut_slice().iter_mut().zip(self.valid.iter()) {
            if ok {
                *v = v.clamp(lo, hi);
            }
        }
        out
    }
}

/// RGB image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub pixels: Grid<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(pixels: Grid<[f64; 3]>) -> Result<Self, GridError> {
        for y in 0..pixels.height() {
            for x in 0..pixels.width() {
                if pixels.get(x, y).iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(GridError::IntensityRange { x, y });
                }
            }
        }
        Ok(Self { pixels })
    }

    /// Uniform gray image, handy when only geometry matters.
    pub fn gray(width: usize, height: usize, level: f64) -> Self {
        Self {
            pixels: Grid::filled(width, height, [level.clamp(0.0, 1.0); 3]),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

/// Values that can be linearly interpolated.
pub trait Blend: Copy {
    fn zero() -> Self;
    fn add_scaled(self, other: Self, w: f64) -> Self;
    fn scale(self, k: f64) -> Self;
}

impl Blend for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add_scaled(self, other: Self, w: f64) -> Self {
        self + other * w
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

impl Blend for [f64; 3] {
    fn zero() -> Self {
        [0.0; 3]
    }
    fn add_scaled(self, o: Self, w: f64) -> Self {
        [self[0] + o[0] * w, self[1] + o[1] * w, self[2] + o[2] * w]
    }
    fn scale(self, k: f64) -> Self {
        [self[0] * k, self[1] * k, self[2] * k]
    }
}

impl Blend for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn add_scaled(self, o: Self, w: f64) -> Self {
        self + o * w
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

/// One axis of a resampling map: two taps, the fractional weight of the
/// second tap, and the nearest tap.
#[derive(Clone, Copy, Debug)]
struct Taps {
    i0: usize,
    i1: usize,
    frac: f64,
    nearest: usize,
}

fn axis_taps(src_len: usize, dst_len: usize) -> Vec<Taps> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let frac = s - i0 as f64;
            let nearest = if frac < 0.5 { i0 } else { i1 };
            Taps { i0, i1, frac, nearest }
        })
        .collect()
}

/// Bilinear resize to `dst_w x dst_h`.
pub fn resize_bilinear<T: Blend>(src: &Grid<T>, dst_w: usize, dst_h: usize) -> Grid<T> {
    let tx = axis_taps(src.width(), dst_w);
    let ty = axis_taps(src.height(), dst_h);
    Grid::from_fn(dst_w, dst_h, |x, y| {
        let (a, b) = (tx[x], ty[y]);
        let top = src.get(a.i0, b.i0).scale(1.0 - a.frac).add_scaled(*src.get(a.i1, b.i0), a.frac);
        let bot = src.get(a.i0, b.i1).scale(1.0 - a.frac).add_scaled(*src.get(a.i1, b.i1), a.frac);
        top.scale(1.0 - b.frac).add_scaled(bot, b.frac)
    })
}

/// Nearest-neighbor resize (ties round toward the higher index).
pub fn resize_nearest<T: Clone>(src: &Grid<T>, dst_w: usize, dst_h: usize) -> Grid<T> {
    let tx = axis_taps(src.width(), dst_w);
    let ty = axis_taps(src.height(), dst_h);
    Grid::from_fn(dst_w, dst_h, |x, y| src.get(tx[x].nearest, ty[y].nearest).clone())
}

/// Resizes values bilinearly using only valid taps (weights renormalized) and
/// resizes the mask by nearest neighbor. A pixel whose nearest source pixel is
/// valid always has at least that tap with nonzero weight.
pub fn resize_masked<T: Blend>(values: &Grid<T>, valid: &Mask, dst_w: usize, dst_h: usize) -> (Grid<T>, Mask) {
    let tx = axis_taps(values.width(), dst_w);
    let ty = axis_taps(values.height(), dst_h);
    let mask = Grid::from_fn(dst_w, dst_h, |x, y| *valid.get(tx[x].nearest, ty[y].nearest));
    let out = Grid::from_fn(dst_w, dst_h, |x, y| {
        if !*mask.get(x, y) {
            return T::zero();
        }
        let (a, b) = (tx[x], ty[y]);
        let taps = [
            (a.i0, b.i0, (1.0 - a.frac) * (1.0 - b.frac)),
            (a.i1, b.i0, a.frac * (1.0 - b.frac)),
            (a.i0, b.i1, (1.0 - a.frac) * b.frac),
            (a.i1, b.i1, a.frac * b.frac),
        ];
        let total: f64 = taps.iter().filter(|t| *valid.get(t.0, t.1)).map(|t| t.2).sum();
        if total == 1.0 {
            // all taps valid: plain bilinear, same arithmetic as resize_bilinear
            let top = values
                .get(a.i0, b.i0)
                .scale(1.0 - a.frac)
                .add_scaled(*values.get(a.i1, b.i0), a.frac);
            let bot = values
                .get(a.i0, b.i1)
                .scale(1.0 - a.frac)
                .add_scaled(*values.get(a.i1, b.i1), a.frac);
            return top.scale(1.0 - b.frac).add_scaled(bot, b.frac);
        }
        let mut acc = T::zero();
        for &(sx, sy, w) in &taps {
            if *valid.get(sx, sy) && w > 0.0 {
                acc = acc.add_scaled(*values.get(sx, sy), w / total);
            }
        }
        acc
    });
    (out, mask)
}

/// Resizes a depth map: values bilinear over valid taps, mask nearest.
pub fn resize_depth(depth: &DepthMap, dst_w: usize, dst_h: usize) -> DepthMap {
    let (values, valid) = resize_masked(&depth.values, &depth.valid, dst_w, dst_h);
    DepthMap { values, valid }
}
