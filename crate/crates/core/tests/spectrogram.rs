mod common;

use std::f64::consts::PI;

use common::*;
use lasaft::numerics::{RngStream, Tensor};
use lasaft::spectrogram::{hann, istft, stft, Waveform};

fn mono<T: lasaft::numerics::Scalar>(x: &[f64]) -> Waveform<T> {
    Waveform::from_channels(16_000, vec![x.iter().map(|&v| T::c(v)).collect()]).unwrap()
}

#[test]
fn cosine_on_a_bin_concentrates_energy() {
    let n_fft = 256;
    let k = 19;
    let x: Vec<f64> = (0..4096).map(|n| (2.0 * PI * k as f64 * n as f64 / n_fft as f64).cos()).collect();
    let s = stft(&mono::<f64>(&x), n_fft, n_fft / 2).unwrap();
    // steady-state frames only: the first and last touch the padding
    for t in 2..s.frames() - 2 {
        let energy: Vec<f64> = (0..s.bins())
            .map(|b| {
                let (re, im) = s.bin(0, t, b);
                re * re + im * im
            })
            .collect();
        let total: f64 = energy.iter().sum();
        // the Hann main lobe spans k-1..=k+1 with 2/3 of the energy in bin k
        let lobe = energy[k - 1] + energy[k] + energy[k + 1];
        assert!(lobe / total >= 0.95, "frame {t}: {}", lobe / total);
        assert!((energy[k] / total - 2.0 / 3.0).abs() < 1e-9);
        assert!(energy.iter().all(|&e| e <= energy[k]));
        // direct windowed DFT of the same frame
        let w = hann(n_fft);
        let start = t * n_fft / 2 - n_fft / 2;
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..n_fft {
            let v = x[start + n] * w[n];
            re += v * (2.0 * PI * (k * n) as f64 / n_fft as f64).cos();
            im -= v * (2.0 * PI * (k * n) as f64 / n_fft as f64).sin();
        }
        let (gr, gi) = s.bin(0, t, k);
        assert!((gr - re).abs() < 1e-9 && (gi - im).abs() < 1e-9);
    }
}

#[test]
fn stereo_input_yields_four_channels() {
    let w = Waveform::<f32>::silence(44_100, 2, 5000);
    let s = stft(&w, 512, 256).unwrap();
    assert_eq!(s.tensor.dim(0), 4);
    assert_eq!(s.bins(), 256);
}

#[test]
fn round_trip_band_limited_noise_f32() {
    let mut rng = RngStream::new(40);
    for n_fft in [256usize, 2048] {
        let x = band_limited_noise(&mut rng, 20 * n_fft + 37, 0.2, n_fft);
        let w = mono::<f32>(&x);
        let s = stft(&w, n_fft, n_fft / 2).unwrap();
        let y = istft(&s, w.len(), 16_000).unwrap();
        let err = y.samples.max_abs_diff(&w.samples);
        assert!(err < 1e-5, "n_fft {n_fft}: {err}");
    }
}

#[test]
fn round_trip_even_periodic_signal_f64() {
    // zero-phase bin-centred cosines, length a period multiple plus one:
    // reflect padding continues the signal exactly and no frame has any
    // Nyquist content
    let mut rng = RngStream::new(41);
    let n_fft = 256;
    let amps: Vec<(usize, f64)> = (0..24).map(|_| (1 + rng.below(n_fft / 2 - 3), rng.uniform_range(-0.1, 0.1))).collect();
    let len = 12 * n_fft + 1;
    let x: Vec<f64> = (0..len)
        .map(|n| amps.iter().map(|&(k, a)| a * (2.0 * PI * (k * n) as f64 / n_fft as f64).cos()).sum())
        .collect();
    let w = mono::<f64>(&x);
    let y = istft(&stft(&w, n_fft, n_fft / 2).unwrap(), len, 16_000).unwrap();
    let err = y.samples.max_abs_diff(&w.samples);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn linearity() {
    let mut rng = RngStream::new(42);
    let a: Vec<f64> = (0..3000).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..3000).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.7 * x - 1.3 * y).collect();
    let sa = stft(&mono::<f64>(&a), 256, 128).unwrap().tensor;
    let sb = stft(&mono::<f64>(&b), 256, 128).unwrap().tensor;
    let sm = stft(&mono::<f64>(&mix), 256, 128).unwrap().tensor;
    let expect = sa.zip_map(&sb, |x, y| 0.7 * x - 1.3 * y);
    assert_close(sm.data(), expect.data(), 1e-6);
}

#[test]
fn framewise_energy_matches_windowed_signal() {
    let n_fft = 256;
    let mut rng = RngStream::new(43);
    let x = band_limited_noise(&mut rng, 8 * n_fft, 0.3, n_fft);
    let s = stft(&mono::<f64>(&x), n_fft, n_fft / 2).unwrap();
    let w = hann(n_fft);
    for t in 1..s.frames() - 1 {
        let start = t * n_fft / 2 - n_fft / 2;
        let time: f64 = (0..n_fft).map(|n| (x[start + n] * w[n]).powi(2)).sum();
        let spec: f64 = (0..s.bins())
            .map(|b| {
                let (re, im) = s.bin(0, t, b);
                let e = re * re + im * im;
                if b == 0 { e } else { 2.0 * e }
            })
            .sum::<f64>()
            / n_fft as f64;
        assert!((time - spec).abs() <= 1e-4 * time, "frame {t}: {time} vs {spec}");
    }
}

#[test]
fn shorter_length_is_prefix_of_full_reconstruction() {
    let mut rng = RngStream::new(44);
    let x: Vec<f64> = (0..2000).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    let s = stft(&mono::<f32>(&x), 256, 128).unwrap();
    let full = istft(&s, 2000, 16_000).unwrap();
    let short = istft(&s, 777, 16_000).unwrap();
    assert_eq!(short.channel(0), &full.channel(0)[..777]);
}

#[test]
fn zero_spectrogram_inverts_to_silence() {
    let s = stft(&Waveform::<f32>::silence(16_000, 2, 1024), 256, 128).unwrap();
    let zero = lasaft::spectrogram::ComplexSpec { tensor: Tensor::zeros(s.tensor.shape().to_vec()), ..s };
    let y = istft(&zero, 1024, 16_000).unwrap();
    assert!(y.samples.data().iter().all(|&v| v == 0.0));
    assert_eq!(y.channels(), 2);
}
