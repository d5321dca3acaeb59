use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::error::{Error, Result, WavError};
use crate::numerics::Tensor;
use crate::spectrogram::Waveform;

/// Sample encoding for [`save_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Stage a hound failure happened in; short reads mean different things in
/// the header and in the sample data.
#[derive(Clone, Copy)]
enum Stage {
    Header,
    Samples,
    Write,
}

fn map_err(path: &Path, stage: Stage, e: hound::Error) -> Error {
    match (stage, e) {
        (Stage::Header, hound::Error::IoError(e)) => WavError::Header(e.to_string()).into(),
        (Stage::Samples, hound::Error::IoError(_)) => WavError::Truncated.into(),
        (_, e) => map_other(path, e),
    }
}

fn map_other(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(msg) => WavError::Header(msg.to_string()).into(),
        hound::Error::UnfinishedSample => WavError::Truncated.into(),
        hound::Error::TooWide => WavError::Unsupported("sample width".into()).into(),
        hound::Error::Unsupported => WavError::Unsupported("codec".into()).into(),
        hound::Error::InvalidSampleFormat => WavError::Unsupported("sample format".into()).into(),
    }
}

/// Reads PCM16 or IEEE-float32 audio with one or two channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| map_err(path, Stage::Header, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(WavError::Unsupported(format!("{channels} channels")).into());
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_err(path, Stage::Samples, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| map_err(path, Stage::Samples, e))?,
        (f, bits) => return Err(WavError::Unsupported(format!("{bits}-bit {f:?}")).into()),
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(WavError::Truncated.into());
    }
    let samples = Tensor::from_fn(vec![channels, frames], |i| interleaved[(i % frames) * channels + i / frames]);
    Waveform::new(spec.sample_rate, samples)
}

pub fn save_wav(w: &Waveform<f32>, path: impl AsRef<Path>, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let channels = w.channels();
    if !(1..=2).contains(&channels) {
        return Err(WavError::Unsupported(format!("{channels} channels")).into());
    }
    let spec = WavSpec {
        channels: channels as u16,
        sample_rate: w.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_err(path, Stage::Write, e))?;
    for t in 0..w.len() {
        for c in 0..channels {
            let v = w.channel(c)[t];
            let r = match format {
                WavFormat::Pcm16 => writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
                WavFormat::Float32 => writer.write_sample(v),
            };
            r.map_err(|e| map_err(path, Stage::Write, e))?;
        }
    }
    writer.finalize().map_err(|e| map_err(path, Stage::Write, e))
}
