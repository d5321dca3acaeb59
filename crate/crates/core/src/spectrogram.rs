//! STFT analysis/synthesis with Complex-as-Channels packing.
//!
//! Frames are Hann-windowed and centered (reflect padding of `n_fft/2` on
//! both sides) with `hop = n_fft/2`. Only bins `0..n_fft/2` are kept: the
//! Nyquist bin is dropped so the frequency extent halves cleanly through
//! every down-sampling level, and is restored as zero on inversion.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Multichannel audio; samples are `[channels, length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub sample_rate: u32,
    pub samples: Tensor<T>,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(sample_rate: u32, samples: Tensor<T>) -> Result<Self> {
        if samples.rank() != 2 || samples.dim(0) == 0 || samples.dim(1) == 0 {
            return Err(Error::Validation(format!(
                "waveform needs [channels >= 1, samples >= 1], got {:?}",
                samples.shape()
            )));
        }
        if !samples.all_finite() {
            return Err(Error::NonFinite { what: "waveform samples".into() });
        }
        Ok(Waveform { sample_rate, samples })
    }

    pub fn from_channels(sample_rate: u32, channels: Vec<Vec<T>>) -> Result<Self> {
        let c = channels.len();
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|ch| ch.len() != n) {
            return Err(Error::Validation("channels differ in length".into()));
        }
        Self::new(sample_rate, Tensor::new(vec![c, n], channels.concat())?)
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Self {
        Waveform {
            sample_rate,
            samples: Tensor::zeros(vec![channels, len]),
        }
    }

    pub fn channels(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn len(&self) -> usize {
        self.samples.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[T] {
        self.samples.slice_outer(c)
    }

    /// Samples `start..start+len` of every channel.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Validation(format!(
                "segment {start}..{} past end {}",
                start + len,
                self.len()
            )));
        }
        let data = (0..self.channels())
            .flat_map(|c| self.channel(c)[start..start + len].to_vec())
            .collect();
        Ok(Waveform {
            sample_rate: self.sample_rate,
            samples: Tensor::new(vec![self.channels(), len], data)?,
        })
    }

    pub fn scaled(&self, gain: T) -> Self {
        Waveform {
            sample_rate: self.sample_rate,
            samples: self.samples.map(|v| v * gain),
        }
    }

    /// Elementwise sum of equally shaped waveforms.
    pub fn sum(items: &[Waveform<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Validation("sum of no waveforms".into()))?;
        let mut acc = first.samples.clone();
        for w in &items[1..] {
            if w.samples.shape() != acc.shape() {
                return Err(Error::shape(format!(
                    "waveform {:?} vs {:?}",
                    w.samples.shape(),
                    acc.shape()
                )));
            }
            acc.add_assign(&w.samples);
        }
        Ok(Waveform {
            sample_rate: first.sample_rate,
            samples: acc,
        })
    }
}

/// Complex-as-Channels spectrogram: `[2c, T, F]` where channel `2k` holds the
/// real part and `2k+1` the imaginary part of audio channel `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpec<T> {
    pub tensor: Tensor<T>,
    pub n_fft: usize,
    pub hop: usize,
}

impl<T: Scalar> ComplexSpec<T> {
    pub fn audio_channels(&self) -> usize {
        self.tensor.dim(0) / 2
    }

    pub fn frames(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn bins(&self) -> usize {
        self.tensor.dim(2)
    }

    /// `(re, im)` of one bin.
    pub fn bin(&self, channel: usize, frame: usize, bin: usize) -> (T, T) {
        let (t, f) = (self.frames(), self.bins());
        let d = self.tensor.data();
        let at = |ch: usize| d[(ch * t + frame) * f + bin];
        (at(2 * channel), at(2 * channel + 1))
    }
}

/// Precomputed radix-2 transform of one power-of-two size.
pub struct Fft {
    n: usize,
    rev: Vec<usize>,
    twiddle: Vec<Complex64>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::config(format!("FFT size {n} is not a power of two >= 2")));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
        let twiddle = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Fft { n, rev, twiddle })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place transform; the inverse is unnormalized (caller divides by `n`).
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "FFT buffer length");
        for i in 0..self.n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let step = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..len / 2 {
                    let mut w = self.twiddle[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + len / 2] * w;
                    buf[start + k] = a + b;
                    buf[start + k + len / 2] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_sizes(n_fft: usize, hop: usize) -> Result<()> {
    if n_fft < 4 || !n_fft.is_power_of_two() {
        return Err(Error::config(format!("n_fft {n_fft} must be a power of two >= 4")));
    }
    if hop != n_fft / 2 {
        return Err(Error::config(format!("hop {hop} must equal n_fft/2 = {}", n_fft / 2)));
    }
    Ok(())
}

/// Number of frames produced for `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Samples that produce exactly `frames` frames.
pub fn samples_for_frames(frames: usize, hop: usize) -> usize {
    (frames.max(1) - 1) * hop
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    // one reflection suffices because pad < len
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

pub fn stft<T: Scalar>(w: &Waveform<T>, n_fft: usize, hop: usize) -> Result<ComplexSpec<T>> {
    check_sizes(n_fft, hop)?;
    let pad = n_fft / 2;
    let len = w.len();
    if len <= pad {
        return Err(Error::config(format!(
            "signal of {len} samples too short for n_fft {n_fft} (needs more than {pad})"
        )));
    }
    let frames = frame_count(len, hop);
    let bins = n_fft / 2;
    let window = hann(n_fft);
    let fft = Fft::new(n_fft)?;
    let c = w.channels();
    let mut out = vec![T::zero(); 2 * c * frames * bins];
    let mut buf = vec![Complex64::default(); n_fft];
    for ch in 0..c {
        let x = w.channel(ch);
        for t in 0..frames {
            let start = (t * hop) as isize - pad as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = x[reflect_index(start + i as isize, len)].f64();
                *slot = Complex64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf, false);
            let re = &mut out[((2 * ch) * frames + t) * bins..][..bins];
            for (r, z) in re.iter_mut().zip(&buf) {
                *r = T::c(z.re);
            }
            let im = &mut out[((2 * ch + 1) * frames + t) * bins..][..bins];
            for (r, z) in im.iter_mut().zip(&buf) {
                *r = T::c(z.im);
            }
        }
    }
    Ok(ComplexSpec {
        tensor: Tensor::new(vec![2 * c, frames, bins], out)?,
        n_fft,
        hop,
    })
}

/// Inverse of [`stft`] by windowed overlap-add with squared-window
/// normalization; the result is truncated or zero-extended to `length`.
pub fn istft<T: Scalar>(s: &ComplexSpec<T>, length: usize, sample_rate: u32) -> Result<Waveform<T>> {
    check_sizes(s.n_fft, s.hop)?;
    let (n_fft, hop) = (s.n_fft, s.hop);
    let shape = s.tensor.shape();
    if shape.len() != 3 || !shape[0].is_multiple_of(2) || shape[0] == 0 || shape[2] != n_fft / 2 {
        return Err(Error::shape(format!(
            "spectrogram {shape:?} is not [2c, T, {}]",
            n_fft / 2
        )));
    }
    let (c, frames, bins) = (shape[0] / 2, shape[1], shape[2]);
    let pad = n_fft / 2;
    let padded_len = (frames - 1) * hop + n_fft;
    let window = hann(n_fft);
    let fft = Fft::new(n_fft)?;
    let mut norm = vec![0.0f64; padded_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * hop + i] += w * w;
        }
    }
    let data = s.tensor.data();
    let mut out = vec![T::zero(); c * length];
    let mut buf = vec![Complex64::default(); n_fft];
    let mut acc = vec![0.0f64; padded_len];
    for ch in 0..c {
        acc.fill(0.0);
        for t in 0..frames {
            let re = &data[((2 * ch) * frames + t) * bins..][..bins];
            let im = &data[((2 * ch + 1) * frames + t) * bins..][..bins];
            buf.fill(Complex64::default());
            for k in 0..bins {
                let z = Complex64::new(re[k].f64(), im[k].f64());
                buf[k] = z;
                if k > 0 {
                    buf[n_fft - k] = z.conj();
                }
            }
            // DC and the restored (zero) Nyquist bin must be real
            buf[0].im = 0.0;
            fft.process(&mut buf, true);
            for (i, z) in buf.iter().enumerate() {
                acc[t * hop + i] += z.re / n_fft as f64 * window[i];
            }
        }
        let dst = &mut out[ch * length..(ch + 1) * length];
        for (i, d) in dst.iter_mut().enumerate() {
            let j = i + pad;
            if j >= padded_len {
                break;
            }
            if norm[j] <= 1e-12 {
                return Err(Error::Validation(format!(
                    "zero overlap-add normalization at sample {i}"
                )));
            }
            *d = T::c(acc[j] / norm[j]);
        }
    }
    Waveform::new(sample_rate, Tensor::new(vec![c, length], out)?)
}
