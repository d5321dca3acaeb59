//! The conditioned U-Net: channel expansion, an encoder of TFC (+FT) blocks
//! with downsampling, a bottleneck, a modulated decoder with skip
//! connections, and channel restoration.

mod checkpoint;
mod config;

pub use checkpoint::CHECKPOINT_VERSION;
pub use config::{FtBlock, ModelConfig, Modulation, CONFIG_KEYS};

use indexmap::IndexMap;

use crate::blocks::{self, Builder, Conv, Ctx, Tdf, Tfc, Upsample};
use crate::conditioning::{
    film_apply, gpocm_apply, ConditionGenerator, ConditionVector, Embedding, ModulationParams, ParamKind,
};
use crate::error::{Error, Result};
use crate::lasaft::Lasaft;
use crate::numerics::{Graph, Mode, ParamStore, RngStream, Scalar, StatStore, Tensor, Var};
use crate::spectrogram::{istft, stft, ComplexSpec, Waveform};

/// Inference chunks evaluated together.
const CHUNK_BATCH: usize = 4;

#[derive(Clone, Debug)]
pub enum Ft {
    Tdf(Tdf),
    Lasaft(Lasaft),
}

impl Ft {
    fn build<T: Scalar>(b: &mut Builder<T>, c: &ModelConfig, prefix: &str, freq: usize) -> Result<Option<Ft>> {
        Ok(match c.ft_block {
            FtBlock::None => None,
            FtBlock::Tdf => Some(Ft::Tdf(Tdf::build(b, prefix, freq, c.bottleneck)?)),
            FtBlock::Lasaft => Some(Ft::Lasaft(Lasaft::build(
                b,
                prefix,
                freq,
                c.bottleneck,
                c.latent_sources,
                c.embedding_dim,
                c.key_dim,
            )?)),
        })
    }

    /// `x + ft(x)`.
    fn residual<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, emb: Option<Var>) -> Result<Var> {
        match self {
            Ft::Tdf(t) => {
                let y = t.forward(g, ctx, x)?;
                g.add(x, y)
            }
            Ft::Lasaft(l) => {
                let e = emb.ok_or_else(|| Error::config("attention block needs a condition embedding"))?;
                l.residual(g, ctx, x, e)
            }
        }
    }
}

fn apply_ft<T: Scalar>(ft: &Option<Ft>, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, emb: Option<Var>) -> Result<Var> {
    match ft {
        Some(ft) => ft.residual(g, ctx, x, emb),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    tfc: Tfc,
    ft: Option<Ft>,
    down: Conv,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Upsample,
    tfc: Tfc,
    ft: Option<Ft>,
}

/// Layer layout of a built model; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    config: ModelConfig,
    expand: Conv,
    encoder: Vec<EncoderLevel>,
    mid_tfc: Tfc,
    mid_ft: Option<Ft>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    restore: Conv,
    embedding: Option<Embedding>,
    generator: Option<ConditionGenerator>,
}

impl Net {
    fn build<T: Scalar>(b: &mut Builder<T>, c: &ModelConfig) -> Result<Self> {
        c.validate()?;
        let f = c.freq_bins();
        let ch = c.channels;
        let expand = blocks::build_channel_adjust(b, "expand", c.spec_channels(), ch)?;
        let mut encoder = Vec::with_capacity(c.levels);
        for l in 0..c.levels {
            encoder.push(EncoderLevel {
                tfc: Tfc::build(b, &format!("enc.{l}.tfc"), c.tfc(ch))?,
                ft: Ft::build(b, c, &format!("enc.{l}.ft"), f >> l)?,
                down: blocks::build_downsample(b, &format!("enc.{l}.down"), ch)?,
            });
        }
        let mid_tfc = Tfc::build(b, "mid.tfc", c.tfc(ch))?;
        let mid_ft = Ft::build(b, c, "mid.ft", f >> c.levels)?;
        let mut decoder = Vec::with_capacity(c.levels);
        for l in (0..c.levels).rev() {
            decoder.push(DecoderLevel {
                up: Upsample::build(b, format!("dec.{l}.up"), ch)?,
                tfc: Tfc::build(b, &format!("dec.{l}.tfc"), c.tfc(2 * ch))?,
                ft: Ft::build(b, c, &format!("dec.{l}.ft"), f >> l)?,
            });
        }
        let restore = blocks::build_channel_adjust(b, "restore", ch, c.spec_channels())?;
        let embedding = if c.needs_embedding() {
            Some(Embedding::build(b, "cond.embedding", c.instruments.len(), c.embedding_dim)?)
        } else {
            None
        };
        let generator = match c.modulation {
            Modulation::None => None,
            Modulation::Film => Some(ConditionGenerator::build(b, "cond", c.embedding_dim, c.levels, ch, ParamKind::Film)?),
            Modulation::Gpocm => Some(ConditionGenerator::build(b, "cond", c.embedding_dim, c.levels, ch, ParamKind::Pocm)?),
        };
        Ok(Net {
            config: c.clone(),
            expand,
            encoder,
            mid_tfc,
            mid_ft,
            decoder,
            restore,
            embedding,
            generator,
        })
    }

    /// Checks `[N, 2c, T, F]` against the configuration before any compute.
    pub fn check_input(&self, shape: &[usize], conditions: usize) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.spec_channels() || shape[3] != c.freq_bins() {
            return Err(Error::shape(format!(
                "model expects [N, {}, T, {}] spectrograms, got {shape:?}",
                c.spec_channels(),
                c.freq_bins()
            )));
        }
        if shape[0] == 0 || shape[2] == 0 || !shape[2].is_multiple_of(c.divisor()) {
            return Err(Error::config(format!(
                "frame count T = {} is not a positive multiple of 2^L = {}",
                shape[2],
                c.divisor()
            )));
        }
        if conditions != shape[0] {
            return Err(Error::shape(format!("{conditions} conditions for a batch of {}", shape[0])));
        }
        Ok(())
    }

    /// Estimated target spectrograms for a batch of mixtures, one condition
    /// per example.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        x: Var,
        conditions: &[ConditionVector],
    ) -> Result<Var> {
        self.check_input(g.shape(x), conditions.len())?;
        let emb = match &self.embedding {
            Some(e) => Some(e.forward(g, ctx, conditions)?),
            None => None,
        };
        let modulation: Option<ModulationParams> = match (&self.generator, emb) {
            (Some(gen), Some(e)) => Some(gen.generate(g, ctx, e, gen.kind)?),
            _ => None,
        };

        let mut h = blocks::channel_expand(&self.expand, g, ctx, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            h = level.tfc.forward(g, ctx, h)?;
            h = apply_ft(&level.ft, g, ctx, h, emb)?;
            skips.push(h);
            h = blocks::downsample(&level.down, g, ctx, h)?;
        }
        h = self.mid_tfc.forward(g, ctx, h)?;
        h = apply_ft(&self.mid_ft, g, ctx, h, emb)?;
        for (i, level) in self.decoder.iter().enumerate() {
            h = level.up.forward(g, ctx, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip])?;
            h = level.tfc.forward(g, ctx, h)?;
            if let Some(m) = &modulation {
                let (w, beta) = m.block(g, i)?;
                h = match self.config.modulation {
                    Modulation::Film => film_apply(g, h, w, beta)?,
                    _ => gpocm_apply(g, h, w, beta)?,
                };
            }
            h = apply_ft(&level.ft, g, ctx, h, emb)?;
        }
        blocks::channel_restore(&self.restore, g, ctx, h)
    }
}

/// Parameter counts grouped by leading name segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCensus {
    pub groups: IndexMap<String, usize>,
    pub total: usize,
}

/// Parameters, batch-norm statistics, and layout of one model.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stats: StatStore<T>,
    pub net: Net,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut stats = StatStore::new();
        let mut rng = RngStream::new(seed);
        let net = Net::build(
            &mut Builder {
                params: &mut params,
                stats: &mut stats,
                rng: &mut rng,
            },
            config,
        )?;
        Ok(Model {
            config: config.clone(),
            params,
            stats,
            net,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        mode: Mode,
        rng: &mut RngStream,
        x: Var,
        conditions: &[ConditionVector],
    ) -> Result<Var> {
        let mut ctx = Ctx {
            params: &self.params,
            stats: &mut self.stats,
            mode,
            rng,
        };
        self.net.forward(g, &mut ctx, x, conditions)
    }

    /// Eval-mode forward on a `[N, 2c, T, F]` batch; parameters and
    /// statistics are left untouched.
    pub fn predict(&self, x: Tensor<T>, conditions: &[ConditionVector]) -> Result<Tensor<T>> {
        self.net.check_input(x.shape(), conditions.len())?;
        let mut stats = self.stats.clone();
        let mut rng = RngStream::new(0);
        let mut ctx = Ctx {
            params: &self.params,
            stats: &mut stats,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        let mut g = Graph::new();
        let x = g.constant(x);
        let y = self.net.forward(&mut g, &mut ctx, x, conditions)?;
        Ok(g.value(y).clone())
    }

    pub fn condition(&self, instrument: &str) -> Result<ConditionVector> {
        ConditionVector::by_name(instrument, &self.config.instruments)
    }

    /// Estimated target spectrogram of a whole mixture spectrogram, run in
    /// non-overlapping chunks of [`ModelConfig::chunk_frames`] frames.
    pub fn separate_spec(&self, mix: &ComplexSpec<T>, z: &ConditionVector) -> Result<ComplexSpec<T>> {
        let c = &self.config;
        let (ch, frames, bins) = (mix.tensor.dim(0), mix.frames(), mix.bins());
        if ch != c.spec_channels() || bins != c.freq_bins() {
            return Err(Error::shape(format!(
                "spectrogram [{ch}, {frames}, {bins}] does not match model [{}, T, {}]",
                c.spec_channels(),
                c.freq_bins()
            )));
        }
        let chunk = c.chunk_frames();
        let chunks = frames.div_ceil(chunk);
        let src = mix.tensor.data();
        let mut out = vec![T::zero(); src.len()];
        for first in (0..chunks).step_by(CHUNK_BATCH) {
            let n = CHUNK_BATCH.min(chunks - first);
            let mut batch = Tensor::zeros(vec![n, ch, chunk, bins]);
            let dst = batch.data_mut();
            for i in 0..n {
                for k in 0..ch {
                    for t in 0..chunk {
                        let frame = (first + i) * chunk + t;
                        if frame >= frames {
                            break;
                        }
                        let s = (k * frames + frame) * bins;
                        let d = ((i * ch + k) * chunk + t) * bins;
                        dst[d..d + bins].copy_from_slice(&src[s..s + bins]);
                    }
                }
            }
            let y = self.predict(batch, &vec![z.clone(); n])?;
            let yd = y.data();
            for i in 0..n {
                for k in 0..ch {
                    for t in 0..chunk {
                        let frame = (first + i) * chunk + t;
                        if frame >= frames {
                            break;
                        }
                        let s = ((i * ch + k) * chunk + t) * bins;
                        let d = (k * frames + frame) * bins;
                        out[d..d + bins].copy_from_slice(&yd[s..s + bins]);
                    }
                }
            }
        }
        Ok(ComplexSpec {
            tensor: Tensor::new(mix.tensor.shape().to_vec(), out)?,
            n_fft: mix.n_fft,
            hop: mix.hop,
        })
    }

    /// Separates `instrument` from a mixture waveform; the result has the
    /// input's length.
    pub fn separate(&self, w: &Waveform<T>, instrument: &str) -> Result<Waveform<T>> {
        let z = self.condition(instrument)?;
        if w.channels() != self.config.audio_channels {
            return Err(Error::Validation(format!(
                "model separates {}-channel audio, input has {} channels",
                self.config.audio_channels,
                w.channels()
            )));
        }
        if w.sample_rate != self.config.sample_rate {
            log::warn!(
                "input sample rate {} Hz differs from the model's {} Hz; proceeding",
                w.sample_rate,
                self.config.sample_rate
            );
        }
        let spec = stft(w, self.config.n_fft, self.config.hop)?;
        let est = self.separate_spec(&spec, &z)?;
        istft(&est, w.len(), w.sample_rate)
    }

    pub fn param_count(&self) -> ParamCensus {
        census(&self.params)
    }
}

pub fn census<T: Scalar>(params: &ParamStore<T>) -> ParamCensus {
    let mut out = ParamCensus::default();
    for p in params.iter() {
        let group = p.name.split('.').next().unwrap_or("").to_string();
        *out.groups.entry(group).or_default() += p.value.len();
        out.total += p.value.len();
    }
    out
}
