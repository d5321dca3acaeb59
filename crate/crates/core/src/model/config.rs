use std::fmt;
use std::str::FromStr;

use crate::blocks::{tdf_hidden, TfcConfig};
use crate::conditioning::DEFAULT_INSTRUMENTS;
use crate::error::{Error, Result};

/// Decoder-side feature modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modulation {
    None,
    Film,
    Gpocm,
}

/// Frequency-transformation block inserted after TFCs and modulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FtBlock {
    None,
    Tdf,
    Lasaft,
}

impl FromStr for Modulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Modulation::None),
            "film" => Ok(Modulation::Film),
            "gpocm" => Ok(Modulation::Gpocm),
            _ => Err(Error::config(format!("modulation must be none, film or gpocm, got `{s}`"))),
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modulation::None => "none",
            Modulation::Film => "film",
            Modulation::Gpocm => "gpocm",
        })
    }
}

impl FromStr for FtBlock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FtBlock::None),
            "tdf" => Ok(FtBlock::Tdf),
            "lasaft" => Ok(FtBlock::Lasaft),
            _ => Err(Error::config(format!("ft_block must be none, tdf or lasaft, got `{s}`"))),
        }
    }
}

impl fmt::Display for FtBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FtBlock::None => "none",
            FtBlock::Tdf => "tdf",
            FtBlock::Lasaft => "lasaft",
        })
    }
}

/// Every hyperparameter of the conditioned U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder/decoder depth `L`; the network has `2L + 1` intermediate blocks.
    pub levels: usize,
    /// Internal channel count `C̄`.
    pub channels: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub tfc_layers: usize,
    pub growth_rate: usize,
    pub kernel: (usize, usize),
    /// TDF bottleneck factor `bf`.
    pub bottleneck: usize,
    pub embedding_dim: usize,
    pub key_dim: usize,
    pub instruments: Vec<String>,
    pub latent_sources: usize,
    pub modulation: Modulation,
    pub ft_block: FtBlock,
    pub lr: f64,
    pub audio_channels: usize,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            channels: 24,
            n_fft: 2048,
            hop: 1024,
            tfc_layers: 5,
            growth_rate: 24,
            kernel: (3, 3),
            bottleneck: 16,
            embedding_dim: 32,
            key_dim: 32,
            instruments: DEFAULT_INSTRUMENTS.iter().map(|s| s.to_string()).collect(),
            latent_sources: 6,
            modulation: Modulation::Gpocm,
            ft_block: FtBlock::Lasaft,
            lr: 0.001,
            audio_channels: 2,
            sample_rate: 44100,
        }
    }
}

pub const CONFIG_KEYS: [&str; 18] = [
    "levels",
    "channels",
    "n_fft",
    "hop",
    "tfc_layers",
    "growth_rate",
    "kernel_t",
    "kernel_f",
    "bottleneck",
    "embedding_dim",
    "key_dim",
    "instruments",
    "latent_sources",
    "modulation",
    "ft_block",
    "lr",
    "audio_channels",
    "sample_rate",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

impl ModelConfig {
    /// Smallest configuration exercising every block: `L = 1`, `C̄ = 4`,
    /// `F = 32`, two latent sources.
    pub fn micro() -> Self {
        ModelConfig {
            levels: 1,
            channels: 4,
            n_fft: 64,
            hop: 32,
            tfc_layers: 2,
            growth_rate: 2,
            bottleneck: 4,
            embedding_dim: 4,
            key_dim: 4,
            latent_sources: 2,
            audio_channels: 1,
            sample_rate: 16000,
            ..ModelConfig::default()
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2
    }

    /// Frames and bins must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Frames per inference chunk.
    pub fn chunk_frames(&self) -> usize {
        self.divisor() * 16
    }

    pub fn spec_channels(&self) -> usize {
        2 * self.audio_channels
    }

    pub fn needs_embedding(&self) -> bool {
        self.modulation != Modulation::None || self.ft_block == FtBlock::Lasaft
    }

    pub fn tfc(&self, in_channels: usize) -> TfcConfig {
        TfcConfig {
            num_layers: self.tfc_layers,
            growth_rate: self.growth_rate,
            kernel: self.kernel,
            in_channels,
            out_channels: self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("levels", self.levels),
            ("channels", self.channels),
            ("embedding_dim", self.embedding_dim),
            ("key_dim", self.key_dim),
            ("latent_sources", self.latent_sources),
            ("audio_channels", self.audio_channels),
            ("bottleneck", self.bottleneck),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be at least 1")));
            }
        }
        if self.levels > 8 {
            return Err(Error::config("`levels` must be at most 8"));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 4 {
            return Err(Error::config(format!("`n_fft` = {} is not a power of two ≥ 4", self.n_fft)));
        }
        if self.hop != self.n_fft / 2 {
            return Err(Error::config(format!("`hop` must be n_fft/2 = {}, got {}", self.n_fft / 2, self.hop)));
        }
        let f = self.freq_bins();
        if !f.is_multiple_of(self.divisor()) {
            return Err(Error::config(format!(
                "frequency extent F = {f} is not divisible by 2^L = {}",
                self.divisor()
            )));
        }
        if self.instruments.is_empty() {
            return Err(Error::config("`instruments` must name at least one source"));
        }
        for (i, name) in self.instruments.iter().enumerate() {
            if name.is_empty() || name.contains([',', ' ', '=']) {
                return Err(Error::config(format!("invalid instrument name `{name}`")));
            }
            if self.instruments[..i].contains(name) {
                return Err(Error::config(format!("duplicate instrument `{name}`")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("`sample_rate` must be positive"));
        }
        self.tfc(2 * self.channels).validate()?;
        if self.ft_block != FtBlock::None {
            tdf_hidden(f >> self.levels, self.bottleneck)?;
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "levels" => self.levels = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "n_fft" => self.n_fft = parse(key, v)?,
            "hop" => self.hop = parse(key, v)?,
            "tfc_layers" => self.tfc_layers = parse(key, v)?,
            "growth_rate" => self.growth_rate = parse(key, v)?,
            "kernel_t" => self.kernel.0 = parse(key, v)?,
            "kernel_f" => self.kernel.1 = parse(key, v)?,
            "bottleneck" => self.bottleneck = parse(key, v)?,
            "embedding_dim" => self.embedding_dim = parse(key, v)?,
            "key_dim" => self.key_dim = parse(key, v)?,
            "instruments" => {
                self.instruments = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "latent_sources" => self.latent_sources = parse(key, v)?,
            "modulation" => self.modulation = v.parse()?,
            "ft_block" => self.ft_block = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "audio_channels" => self.audio_channels = parse(key, v)?,
            "sample_rate" => self.sample_rate = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "levels" => self.levels.to_string(),
            "channels" => self.channels.to_string(),
            "n_fft" => self.n_fft.to_string(),
            "hop" => self.hop.to_string(),
            "tfc_layers" => self.tfc_layers.to_string(),
            "growth_rate" => self.growth_rate.to_string(),
            "kernel_t" => self.kernel.0.to_string(),
            "kernel_f" => self.kernel.1.to_string(),
            "bottleneck" => self.bottleneck.to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "key_dim" => self.key_dim.to_string(),
            "instruments" => self.instruments.join(","),
            "latent_sources" => self.latent_sources.to_string(),
            "modulation" => self.modulation.to_string(),
            "ft_block" => self.ft_block.to_string(),
            "lr" => format!("{:?}", self.lr),
            "audio_channels" => self.audio_channels.to_string(),
            "sample_rate" => self.sample_rate.to_string(),
            _ => return None,
        })
    }

    /// Canonical `key = value` lines in a fixed key order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses [`to_text`](Self::to_text) output; unknown keys are rejected
    /// and missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected `key = value`, got `{line}`")))?;
            config.set(k.trim(), v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_rejections() {
        let mut c = ModelConfig::micro();
        c.lr = 0.0005;
        c.modulation = Modulation::Film;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_text("colour = red").is_err());
        assert!(ModelConfig::from_text("modulation = pocm").is_err());
        assert!(ModelConfig::from_text("levels = 12").is_err());
        let err = ModelConfig::from_text("n_fft = 96\nhop = 48").unwrap_err();
        assert!(err.to_string().contains("power of two"));
    }

    #[test]
    fn divisibility_names_extent() {
        let c = ModelConfig {
            levels: 6,
            n_fft: 64,
            hop: 32,
            ..ModelConfig::micro()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("F = 32"), "{err}");
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
    }
}
