//! Coded-aperture snapshot spectral imaging: mask modulation, prism
//! dispersion, detector integration with additive noise, and the shift-back
//! initialization used as network input.
//!
//! Cubes are stored `[row, column, band]`. Dispersion moves band `n` by
//! `d[n]` columns to the right, so the detector is `W + d_max` columns wide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spectral scene `H x W x bands`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube<T> {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<T>,
}

impl<T: Scalar> HsiCube<T> {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<T>) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Contract("a cube needs at least one band".into()));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape(
                "hsi cube",
                format!("{height}x{width}x{bands} needs {} values, got {}", height * width * bands, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("cube value at {pos} is not finite")));
        }
        Ok(HsiCube { height, width, bands, data })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            data: vec![T::zero(); height * width * bands],
        }
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w, b] => Self::new(h, w, b, t.data().to_vec()),
            [1, h, w, b] => Self::new(h, w, b, t.data().to_vec()),
            _ => Err(Error::shape("hsi cube", format!("expected [H,W,B], got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.height, self.width, self.bands], self.data.clone()).expect("cube shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, band: usize) -> T {
        self.data[(row * self.width + col) * self.bands + band]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, v: T) {
        self.data[(row * self.width + col) * self.bands + band] = v;
    }

    /// Spectrum of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    /// Spatial window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({top},{left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for r in top..top + h {
            let start = (r * self.width + left) * self.bands;
            data.extend_from_slice(&self.data[start..start + w * self.bands]);
        }
        Ok(HsiCube { height: h, width: w, bands: self.bands, data })
    }

    pub fn cast<U: Scalar>(&self) -> HsiCube<U> {
        HsiCube {
            height: self.height,
            width: self.width,
            bands: self.bands,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width, self.bands) != (other.height, other.width, other.bands) {
            return Err(Error::mismatch(
                op,
                &[self.height, self.width, self.bands],
                &[other.height, other.width, other.bands],
            ));
        }
        Ok(())
    }
}

/// Spatial transmission pattern `M` of the coded aperture.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedAperture<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> CodedAperture<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} needs {} values, got {}", height * width, values.len())));
        }
        if values.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Contract("mask values must lie in [0, 1]".into()));
        }
        Ok(CodedAperture { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        CodedAperture { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::shape("crop", "mask window out of bounds"));
        }
        let mut values = Vec::with_capacity(h * w);
        for r in top..top + h {
            values.extend_from_slice(&self.values[r * self.width + left..r * self.width + left + w]);
        }
        Ok(CodedAperture { height: h, width: w, values })
    }

    pub fn cast<U: Scalar>(&self) -> CodedAperture<U> {
        CodedAperture {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }

    fn check_scene(&self, h: usize, w: usize, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(Error::mismatch(op, &[h, w], &[self.height, self.width]));
        }
        Ok(())
    }
}

/// Integer-pixel prism dispersion: band `n` moves `step * n` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispersionSpec {
    pub step: usize,
}

impl Default for DispersionSpec {
    fn default() -> Self {
        DispersionSpec { step: 1 }
    }
}

impl DispersionSpec {
    pub fn new(step: usize) -> Self {
        DispersionSpec { step }
    }

    pub fn shift(&self, band: usize) -> usize {
        self.step * band
    }

    pub fn shifts(&self, bands: usize) -> Vec<usize> {
        (0..bands).map(|b| self.shift(b)).collect()
    }

    pub fn max_shift(&self, bands: usize) -> usize {
        self.shift(bands.saturating_sub(1))
    }
}

/// 2-D detector image of width `W + d_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    /// Noise level used when simulating (record only).
    pub sigma: f64,
}

impl<T: Scalar> Measurement<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>, sigma: f64) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("measurement", format!("{height}x{width} needs {} values, got {}", height * width, values.len())));
        }
        Ok(Measurement { height, width, values, sigma })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::mismatch("dot", &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum())
    }
}

/// `X'[:, :, n] = M * X[:, :, n]` for every band.
pub fn modulate<T: Scalar>(x: &HsiCube<T>, mask: &CodedAperture<T>) -> Result<HsiCube<T>> {
    mask.check_scene(x.height, x.width, "modulate")?;
    let mut out = x.clone();
    for (px, &m) in out.data.chunks_mut(x.bands).zip(&mask.values) {
        for v in px {
            *v *= m;
        }
    }
    Ok(out)
}

/// Translate band `n` by `d[n]` columns into a cube of width `W + d_max`;
/// vacated columns stay zero.
pub fn disperse<T: Scalar>(x: &HsiCube<T>, d: DispersionSpec) -> HsiCube<T> {
    let out_w = x.width + d.max_shift(x.bands);
    let mut out = HsiCube::zeros(x.height, out_w, x.bands);
    for r in 0..x.height {
        for c in 0..x.width {
            for b in 0..x.bands {
                out.set(r, c + d.shift(b), b, x.at(r, c, b));
            }
        }
    }
    out
}

/// Sum a dispersed cube over its bands and add i.i.d. Gaussian noise.
pub fn integrate<T: Scalar>(dispersed: &HsiCube<T>, sigma: f64, seed: u64) -> Result<Measurement<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut values: Vec<T> = dispersed.data.chunks(dispersed.bands).map(|px| px.iter().copied().sum()).collect();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for v in values.iter_mut() {
            *v += T::from_f64_lossy(normal.sample(&mut rng));
        }
    }
    Measurement::new(dispersed.height, dispersed.width, values, sigma)
}

/// Full optical chain: modulation, dispersion, integration.
pub fn forward<T: Scalar>(
    x: &HsiCube<T>,
    mask: &CodedAperture<T>,
    d: DispersionSpec,
    sigma: f64,
    seed: u64,
) -> Result<Measurement<T>> {
    integrate(&disperse(&modulate(x, mask)?, d), sigma, seed)
}

/// Undo the dispersion on the detector: `H[r, c, n] = Y[r, c + d[n]]`.
pub fn shift_back<T: Scalar>(y: &Measurement<T>, d: DispersionSpec, bands: usize) -> Result<HsiCube<T>> {
    if bands == 0 {
        return Err(Error::Contract("shift_back needs at least one band".into()));
    }
    let dmax = d.max_shift(bands);
    if y.width <= dmax {
        return Err(Error::shape(
            "shift_back",
            format!("measurement width {} cannot hold a maximal shift of {dmax}", y.width),
        ));
    }
    let w = y.width - dmax;
    let mut out = HsiCube::zeros(y.height, w, bands);
    for r in 0..y.height {
        for c in 0..w {
            for b in 0..bands {
                out.set(r, c, b, y.at(r, c + d.shift(b)));
            }
        }
    }
    Ok(out)
}

/// Adjoint of the noiseless [`forward`] operator: `M * shift_back(Y)`.
pub fn adjoint<T: Scalar>(y: &Measurement<T>, mask: &CodedAperture<T>, d: DispersionSpec, bands: usize) -> Result<HsiCube<T>> {
    let h = shift_back(y, d, bands)?;
    modulate(&h, mask)
}

/// Bernoulli coded aperture with open fraction `density`.
pub fn random_mask<T: Scalar>(height: usize, width: usize, density: f64, seed: u64) -> Result<CodedAperture<T>> {
    use rand::Rng;
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Contract(format!("mask density {density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width)
        .map(|_| if rng.gen_bool(density) { T::one() } else { T::zero() })
        .collect();
    CodedAperture::new(height, width, values)
}
