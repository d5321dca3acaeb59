use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::conditioning::DEFAULT_INSTRUMENTS;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::spectrogram::Waveform;

/// Mixture peak after normalization.
pub const MIX_PEAK: f64 = 0.89;

/// One multi-source excerpt: the mixture and every source, equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub mixture: Waveform<f32>,
    pub sources: IndexMap<String, Waveform<f32>>,
}

impl Track {
    /// Builds a track whose mixture is the sum of `sources` in order.
    pub fn from_sources(id: impl Into<String>, sources: IndexMap<String, Waveform<f32>>) -> Result<Self> {
        let parts: Vec<_> = sources.values().cloned().collect();
        if parts.is_empty() {
            return Err(Error::Validation("a track needs at least one source".into()));
        }
        let rate = parts[0].sample_rate;
        if parts.iter().any(|p| p.sample_rate != rate) {
            return Err(Error::Validation("sources differ in sample rate".into()));
        }
        let mixture = Waveform::sum(&parts)?;
        Ok(Track {
            id: id.into(),
            mixture,
            sources,
        })
    }

    pub fn source(&self, name: &str) -> Result<&Waveform<f32>> {
        self.sources.get(name).ok_or_else(|| Error::UnknownInstrument {
            name: name.to_string(),
            valid: self.sources.keys().cloned().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

/// Parameters of a synthetic track; timbres are drawn from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration: 6.0,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn samples(&self) -> Result<usize> {
        let n = self.duration * self.sample_rate as f64;
        if n.is_nan() || n < 1.0 || (n - n.round()).abs() > 1e-6 {
            return Err(Error::config(format!(
                "{} s at {} Hz is not a whole number of samples",
                self.duration, self.sample_rate
            )));
        }
        Ok(n.round() as usize)
    }
}

/// Harmonic tone with vibrato and a slow syllabic envelope.
fn vocals(rng: &mut RngStream, n: usize, sr: f64) -> Vec<f64> {
    let f0 = rng.uniform_range(200.0, 380.0);
    let vib_rate = rng.uniform_range(4.5, 6.5);
    let vib_depth = rng.uniform_range(0.01, 0.025);
    let env_rate = rng.uniform_range(0.8, 2.0);
    let env_phase = rng.uniform_range(0.0, 2.0 * PI);
    let note_len = (rng.uniform_range(0.4, 0.9) * sr) as usize;
    let steps = [1.0, 9.0 / 8.0, 5.0 / 4.0, 4.0 / 3.0, 3.0 / 2.0];
    let mut phase = 0.0;
    let mut ratio = 1.0;
    (0..n)
        .map(|i| {
            if i % note_len == 0 {
                ratio = steps[rng.below(steps.len())];
            }
            let t = i as f64 / sr;
            let f = f0 * ratio * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            let tone: f64 = (1..=6).map(|k| (k as f64 * phase).sin() / (k * k) as f64).sum();
            let env = 0.6 + 0.4 * (2.0 * PI * env_rate * t + env_phase).sin();
            env * tone
        })
        .collect()
}

/// Bursts of band-passed noise on a regular beat.
fn drums(rng: &mut RngStream, n: usize, sr: f64) -> Vec<f64> {
    let bpm = rng.uniform_range(90.0, 150.0);
    let period = (60.0 / bpm / 2.0 * sr) as usize;
    let decay = rng.uniform_range(0.02, 0.06) * sr;
    let center = rng.uniform_range(2800.0, 4200.0);
    let offset = rng.below(period);
    // RBJ band-pass biquad, applied twice
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * 1.2);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let mut state = [[0.0f64; 4]; 2];
    (0..n)
        .map(|i| {
            let since = (i + period - offset % period) % period;
            let accent = if ((i + period - offset % period) / period).is_multiple_of(2) { 1.0 } else { 0.6 };
            let mut v = accent * (-(since as f64) / decay).exp() * rng.normal();
            for s in &mut state {
                let y = b0 * v + b2 * s[1] - a1 * s[2] - a2 * s[3];
                s[1] = s[0];
                s[0] = v;
                s[3] = s[2];
                s[2] = y;
                v = y;
            }
            v
        })
        .collect()
}

/// Low sine line gliding between notes.
fn bass(rng: &mut RngStream, n: usize, sr: f64) -> Vec<f64> {
    let base = rng.uniform_range(50.0, 80.0);
    let note_len = (rng.uniform_range(0.3, 0.7) * sr) as usize;
    let glide = rng.uniform_range(0.03, 0.1) * sr;
    let steps = [1.0, 4.0 / 3.0, 3.0 / 2.0, 16.0 / 15.0];
    let mut phase = 0.0;
    let mut from = base;
    let mut to = base;
    (0..n)
        .map(|i| {
            if i % note_len == 0 {
                from = to;
                to = base * steps[rng.below(steps.len())];
            }
            let k = ((i % note_len) as f64 / glide).min(1.0);
            let f = from * (to / from).powf(k);
            phase += 2.0 * PI * f / sr;
            phase.sin() + 0.15 * (2.0 * phase).sin()
        })
        .collect()
}

/// Band-limited sawtooth triad.
fn other(rng: &mut RngStream, n: usize, sr: f64) -> Vec<f64> {
    let root = rng.uniform_range(420.0, 560.0);
    let chord_len = (rng.uniform_range(1.0, 2.0) * sr) as usize;
    let shapes: [[f64; 3]; 3] = [[1.0, 1.25, 1.5], [1.0, 1.2, 1.5], [1.0, 4.0 / 3.0, 5.0 / 3.0]];
    let limit = 5000.0;
    let mut phases = [0.0f64; 3];
    let mut chord = shapes[0];
    (0..n)
        .map(|i| {
            if i % chord_len == 0 {
                chord = shapes[rng.below(3)];
            }
            let mut v = 0.0;
            for (p, r) in phases.iter_mut().zip(chord) {
                let f = root * r;
                *p += 2.0 * PI * f / sr;
                let harmonics = (limit / f) as usize;
                v += (1..=harmonics).map(|k| (k as f64 * *p).sin() / k as f64).sum::<f64>();
            }
            v / 3.0
        })
        .collect()
}

/// Draws one source of `n` samples at the given rate.
type Generator = fn(&mut RngStream, usize, f64) -> Vec<f64>;

/// Four spectrally separated archetypes named after the usual sources,
/// mixed with the mixture peak normalized to [`MIX_PEAK`].
pub fn synth_track(id: impl Into<String>, spec: &SynthSpec) -> Result<Track> {
    let n = spec.samples()?;
    let sr = spec.sample_rate as f64;
    let mut rng = RngStream::new(spec.seed);
    let generators: [Generator; 4] = [vocals, drums, bass, other];
    let mut raw = Vec::with_capacity(4);
    for gen in generators {
        let mut sub = rng.fork(raw.len() as u64);
        let mut s = gen(&mut sub, n, sr);
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let level = rng.uniform_range(0.5, 1.0) / rms;
        s.iter_mut().for_each(|v| *v *= level);
        raw.push(s);
    }
    let peak = (0..n)
        .map(|i| raw.iter().map(|s| s[i]).sum::<f64>().abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let gain = MIX_PEAK / peak;
    let mut sources = IndexMap::new();
    for (name, s) in DEFAULT_INSTRUMENTS.iter().zip(raw) {
        let samples = Tensor::new(vec![1, n], s.iter().map(|v| (v * gain) as f32).collect())?;
        sources.insert(name.to_string(), Waveform::new(spec.sample_rate, samples)?);
    }
    Track::from_sources(id, sources)
}
