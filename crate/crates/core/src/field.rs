//! Pixel grids: likelihood maps, binary masks and short slice stacks.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A row-major grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Real> ScalarField2D<T> {
    /// Validates dimensions and that every value is finite and in `[0, 1]`.
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty field {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "field {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Value(format!("pixel {i} = {v} is not a finite value in [0,1]")));
        }
        Ok(Self { width, height, values })
    }

    /// Like [`ScalarField2D::new`] but clamps finite values into `[0, 1]`.
    pub fn new_clamped(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite value".into()));
        }
        let values = values.into_iter().map(clamp01).collect();
        Self::new(width, height, values)
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, T::zero())
    }

    /// Builds a field from `f(row, col)`; values are validated.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(width, height, values)
    }

    /// Internal constructor for values already known to satisfy the invariant.
    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()));
        Self { width, height, values }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::one(), T::min)
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::lit(self.len() as f64)
    }

    /// Copies the `height`×`width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            values.extend_from_slice(&self.values[start..start + width]);
        }
        Ok(Self::from_raw(width, height, values))
    }

    /// Converts the element type, e.g. `f64` to `f32`.
    pub fn cast<U: Real>(&self) -> ScalarField2D<U> {
        let values = self.values.iter().map(|v| clamp01(U::lit(v.as_f64()))).collect();
        ScalarField2D::from_raw(self.width, self.height, values)
    }

    pub(crate) fn same_dims<U>(&self, other: &ScalarField2D<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[inline]
pub(crate) fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Boolean pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask2D {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask2D {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} with {} bits",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self::new(width, height, bits)
    }

    /// Parses rows of `#`/`1` (set) and `.`/`0` (unset). Handy in tests.
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut bits = Vec::with_capacity(width * height);
        for row in rows {
            if row.len() != width {
                return Err(Error::Shape("ragged ascii mask".into()));
            }
            for ch in row.chars() {
                bits.push(matches!(ch, '#' | '1'));
            }
        }
        Self::new(width, height, bits)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(width, height, |r, c| self.get(row + r, col + c))
    }

    /// True where `self` is set implies `other` is set.
    pub fn is_subset_of(&self, other: &BinaryMask2D) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_field<T: Real>(&self) -> ScalarField2D<T> {
        let values = self.bits.iter().map(|b| if *b { T::one() } else { T::zero() }).collect();
        ScalarField2D::from_raw(self.width, self.height, values)
    }
}

/// Consecutive slices fed to the network together. Allowed lengths are 1, 3 and 5.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack<T> {
    slices: Vec<ScalarField2D<T>>,
}

pub const ALLOWED_SLICE_COUNTS: [usize; 3] = [1, 3, 5];

impl<T: Real> SliceStack<T> {
    pub fn new(slices: Vec<ScalarField2D<T>>) -> Result<Self> {
        if !ALLOWED_SLICE_COUNTS.contains(&slices.len()) {
            return Err(Error::param("slice count", format!("{} not in {{1,3,5}}", slices.len())));
        }
        let first = &slices[0];
        if slices.iter().any(|s| !s.same_dims(first)) {
            return Err(Error::Shape("slices in a stack differ in size".into()));
        }
        Ok(Self { slices })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center_index(&self) -> usize {
        self.slices.len() / 2
    }

    pub fn center(&self) -> &ScalarField2D<T> {
        &self.slices[self.center_index()]
    }

    pub fn slices(&self) -> &[ScalarField2D<T>] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<ScalarField2D<T>> {
        self.slices
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    /// `(height, width)` shared by all slices.
    pub fn dims(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        let slices = self
            .slices
            .iter()
            .map(|s| s.crop(row, col, height, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slices })
    }
}

/// Per-pixel superlevel test `field(p) >= level`.
pub fn threshold<T: Real>(field: &ScalarField2D<T>, level: T) -> BinaryMask2D {
    BinaryMask2D {
        width: field.width,
        height: field.height,
        bits: field.values.iter().map(|v| *v >= level).collect(),
    }
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    let radius = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let two_var = T::lit(2.0) * sigma * sigma;
    let mut taps: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::lit(i as f64 - radius as f64);
            (-(d * d) / two_var).exp()
        })
        .collect();
    let total: T = taps.iter().copied().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Zero-padded Gaussian blur, rescaled afterwards so the output peak equals
/// the input peak.
pub fn gaussian_smooth<T: Real>(field: &ScalarField2D<T>, sigma: T) -> Result<ScalarField2D<T>> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("{sigma} must be positive")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (h, w) = field.dims();

    // separable: rows then columns; zero padding commutes with the split
    let mut tmp = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = T::zero();
            for (k, tap) in kernel.iter().enumerate() {
                let cc = c as isize + k as isize - radius as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += *tap * field.values[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = T::zero();
            for (k, tap) in kernel.iter().enumerate() {
                let rr = r as isize + k as isize - radius as isize;
                if rr >= 0 && (rr as usize) < h {
                    acc += *tap * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = acc;
        }
    }

    let in_max = field.max();
    let out_max = out.iter().copied().fold(T::zero(), T::max);
    if out_max > T::zero() {
        let scale = in_max / out_max;
        for v in &mut out {
            *v = (*v * scale).max(T::zero()).min(in_max);
        }
    }
    Ok(ScalarField2D::from_raw(w, h, out))
}
