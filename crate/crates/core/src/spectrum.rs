//! Unnormalised 2-D discrete Fourier transform.
//!
//! Forward: `X(u,v) = Σ x(h,w) exp(-2πi (uh/H + vw/W))`. The inverse carries
//! the `1/(HW)` factor, so `‖F(x)‖² = HW ‖x‖²` (Parseval). Multi-channel
//! images transform channel by channel.
//!
//! Power-of-two extents use an iterative radix-2 Cooley–Tukey pass; any
//! other extent falls back to an exact direct DFT along that axis. Inputs are
//! never padded.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    /// Sum of squared moduli over every channel and frequency.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum()
    }

    /// `Σ |self - other|²`.
    pub fn squared_distance(&self, other: &ComplexSpectrum) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "spectra {:?} and {:?} differ in shape",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum())
    }

    /// Largest deviation from `X(u,v) = conj(X(-u mod H, -v mod W))`.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut worst = 0.0f64;
        for c in 0..self.channels {
            for u in 0..h {
                for v in 0..w {
                    let a = self.get(c, u, v);
                    let b = self.get(c, (h - u) % h, (w - v) % w).conj();
                    worst = worst.max((a - b).norm());
                }
            }
        }
        worst
    }
}

/// Direct `O((HW)²)` evaluation of the 2-D DFT of one channel.
///
/// Slow and obviously correct; the reference the fast path is tested against.
pub fn dft2_reference(x: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    assert_eq!(x.len(), height * width, "channel length does not match extent");
    let mut out = vec![Complex64::new(0.0, 0.0); height * width];
    for u in 0..height {
        for v in 0..width {
            let mut acc = Complex64::new(0.0, 0.0);
            for h in 0..height {
                for w in 0..width {
                    // Reduce the phase index exactly before converting to an angle.
                    let ph = ((u * h) % height) as f64 / height as f64
                        + ((v * w) % width) as f64 / width as f64;
                    acc += x[h * width + w] * Complex64::from_polar(1.0, -2.0 * PI * ph);
                }
            }
            out[u * width + v] = acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Plan1d {
    Radix2 { bitrev: Vec<usize>, twiddles: Vec<Complex64> },
    Direct { roots: Vec<Complex64> },
}

/// One-dimensional transform of a fixed length.
#[derive(Debug, Clone)]
struct Fft1d {
    len: usize,
    plan: Plan1d,
}

impl Fft1d {
    fn new(len: usize) -> Self {
        assert!(len > 0);
        let angle = |k: usize| -2.0 * PI * k as f64 / len as f64;
        let plan = if len.is_power_of_two() {
            let bits = len.trailing_zeros();
            let bitrev = (0..len)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect();
            let twiddles = (0..len / 2).map(|k| Complex64::from_polar(1.0, angle(k))).collect();
            Plan1d::Radix2 { bitrev, twiddles }
        } else {
            Plan1d::Direct {
                roots: (0..len).map(|k| Complex64::from_polar(1.0, angle(k))).collect(),
            }
        };
        Self { len, plan }
    }

    /// In-place forward transform; `inverse` conjugates the twiddles (no scaling).
    fn process(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, inverse: bool) {
        debug_assert_eq!(buf.len(), self.len);
        let n = self.len;
        let tw = |z: Complex64| if inverse { z.conj() } else { z };
        match &self.plan {
            Plan1d::Radix2 { bitrev, twiddles } => {
                for i in 0..n {
                    let j = bitrev[i];
                    if i < j {
                        buf.swap(i, j);
                    }
                }
                let mut size = 2;
                while size <= n {
                    let half = size / 2;
                    let step = n / size;
                    for start in (0..n).step_by(size) {
                        for k in 0..half {
                            let t = tw(twiddles[k * step]) * buf[start + k + half];
                            let u = buf[start + k];
                            buf[start + k] = u + t;
                            buf[start + k + half] = u - t;
                        }
                    }
                    size *= 2;
                }
            }
            Plan1d::Direct { roots } => {
                scratch.clear();
                scratch.extend_from_slice(buf);
                for (k, out) in buf.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (j, &x) in scratch.iter().enumerate() {
                        acc += x * tw(roots[(k * j) % n]);
                    }
                    *out = acc;
                }
            }
        }
    }
}

/// Reusable row/column plans for one `H × W` extent.
#[derive(Debug, Clone)]
pub struct Fft2Plan {
    height: usize,
    width: usize,
    rows: Fft1d,
    cols: Fft1d,
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rows: Fft1d::new(width),
            cols: Fft1d::new(height),
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let mut scratch = Vec::with_capacity(h.max(w));
        for row in data.chunks_exact_mut(w) {
            self.rows.process(row, &mut scratch, inverse);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = data[i * w + j];
            }
            self.cols.process(&mut column, &mut scratch, inverse);
            for i in 0..h {
                data[i * w + j] = column[i];
            }
        }
    }

    /// Forward transform of one real channel.
    pub fn forward_channel(&self, x: &[f64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.height * self.width, "channel length does not match plan");
        let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        data
    }

    /// Inverse transform with `1/(HW)` scaling.
    pub fn inverse_channel(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(spectrum.len(), self.height * self.width);
        let mut data = spectrum.to_vec();
        self.transform(&mut data, true);
        let scale = 1.0 / (self.height * self.width) as f64;
        data.iter_mut().for_each(|z| *z *= scale);
        data
    }

    pub fn forward(&self, img: &Image) -> Result<ComplexSpectrum> {
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(Error::dim(format!(
                "plan is {}x{}, image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        let mut data = Vec::with_capacity(img.len());
        for c in 0..img.channels() {
            data.extend(self.forward_channel(img.channel(c)));
        }
        Ok(ComplexSpectrum {
            channels: img.channels(),
            height: self.height,
            width: self.width,
            data,
        })
    }
}

pub fn fft2(img: &Image) -> ComplexSpectrum {
    Fft2Plan::new(img.height(), img.width())
        .forward(img)
        .expect("plan built for this image")
}

/// Inverse transform, keeping the real part.
pub fn ifft2(spectrum: &ComplexSpectrum) -> Image {
    let [c, h, w] = spectrum.shape();
    let plan = Fft2Plan::new(h, w);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        out.extend(plan.inverse_channel(spectrum.channel(ch)).iter().map(|z| z.re));
    }
    Image::new(c, h, w, out).expect("spectrum shape is a valid image shape")
}

/// `‖F(a) − F(b)‖²` summed over channels.
pub fn spectral_sq_distance(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "spectral_sq_distance")?;
    let plan = Fft2Plan::new(a.height(), a.width());
    plan.forward(a)?.squared_distance(&plan.forward(b)?)
}

/// [`spectral_sq_distance`] with its gradient in `a`.
///
/// By Parseval the gradient is `2·H·W·(a − b)`, so no adjoint transform is
/// needed.
pub fn spectral_sq_distance_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let value = spectral_sq_distance(a, b)?;
    let hw = a.pixels_per_channel() as f64;
    let grad = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| 2.0 * hw * (x - y))
        .collect();
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error, Tensor};
    use crate::rng::{stream_rng, uniform};
    use proptest::prelude::*;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, "spectrum-test");
        Image::from_fn(c, h, w, |_, _, _| uniform(&mut rng, -1.0, 1.0))
    }

    fn frob_rel(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(Complex64::norm_sqr).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    #[test]
    fn dc_only_signal() {
        let x = dft2_reference(&[1.0; 4], 2, 2);
        assert!((x[0] - Complex64::new(4.0, 0.0)).norm() < 1e-12);
        for z in &x[1..] {
            assert!(z.norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = [0.0; 16];
        x[0] = 1.0;
        for z in dft2_reference(&x, 4, 4) {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let img = Image::new(1, 4, 4, x.to_vec()).unwrap();
        for z in fft2(&img).as_slice() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn zeros_transform_to_zeros() {
        let s = fft2(&Image::zeros(2, 8, 6));
        assert!(s.as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn fast_path_matches_reference() {
        for (h, w, seed) in [(4, 4, 1), (8, 8, 2), (32, 32, 3), (5, 7, 4), (1, 16, 5), (12, 3, 6)] {
            let img = random_image(1, h, w, seed);
            let fast = fft2(&img);
            let slow = dft2_reference(img.as_slice(), h, w);
            let err = frob_rel(fast.as_slice(), &slow);
            assert!(err < 1e-10, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for (h, w) in [(8, 8), (6, 10), (1, 1), (16, 3)] {
            let img = random_image(2, h, w, (h * w) as u64);
            let back = ifft2(&fft2(&img));
            for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dc_shift_distance() {
        let b = random_image(1, 8, 8, 11);
        let delta = 0.3;
        let a = b.map(|v| v + delta);
        let d = spectral_sq_distance(&a, &b).unwrap();
        let want = (64.0 * delta) * (64.0 * delta);
        assert!((d - want).abs() / want < 1e-10);
        assert_eq!(spectral_sq_distance(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn distance_parseval_against_reference_dft() {
        let a = random_image(1, 8, 8, 21);
        let b = random_image(1, 8, 8, 22);
        let fa = dft2_reference(a.as_slice(), 8, 8);
        let fb = dft2_reference(b.as_slice(), 8, 8);
        let via_reference: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).norm_sqr()).sum();
        let pixel = 64.0 * a.zip_map(&b, |x, y| x - y).unwrap().squared_norm();
        let d = spectral_sq_distance(&a, &b).unwrap();
        assert!((d - pixel).abs() / pixel < 1e-9);
        assert!((via_reference - pixel).abs() / pixel < 1e-9);
    }

    #[test]
    fn distance_shape_mismatch() {
        assert!(spectral_sq_distance(&Image::zeros(1, 4, 4), &Image::zeros(1, 4, 2)).is_err());
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let a = random_image(2, 4, 6, 31);
        let b = random_image(2, 4, 6, 32);
        let (_, grad) = spectral_sq_distance_grad(&a, &b).unwrap();
        let numeric = finite_diff_grad(
            |t: &Tensor| spectral_sq_distance(&Image::from_tensor(t).unwrap(), &b).unwrap(),
            &a.to_tensor(),
            1e-4,
        );
        assert!(max_relative_error(&grad, &numeric, 1e-6) < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn parseval_linearity_and_symmetry(
            seed in 0u64..1_000_000,
            h in 1usize..12,
            w in 1usize..12,
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let x = random_image(2, h, w, seed);
            let y = random_image(2, h, w, seed + 1);
            let fx = fft2(&x);
            let fy = fft2(&y);

            for c in 0..2 {
                let energy: f64 = fx.channel(c).iter().map(Complex64::norm_sqr).sum();
                let pixel: f64 = x.channel(c).iter().map(|v| v * v).sum::<f64>() * (h * w) as f64;
                prop_assert!((energy - pixel).abs() <= 1e-9 * pixel.max(1e-300));
            }

            let combo = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
            let fc = fft2(&combo);
            for ((zc, zx), zy) in fc.as_slice().iter().zip(fx.as_slice()).zip(fy.as_slice()) {
                prop_assert!((zc - (alpha * zx + beta * zy)).norm() < 1e-10);
            }

            prop_assert!(fx.conjugate_symmetry_error() < 1e-9);
        }
    }
}
