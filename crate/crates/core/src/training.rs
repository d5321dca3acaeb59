//! Losses, cross-track augmentation, the optimization step, and the
//! validated training loop.

use std::io::Write;
use std::sync::mpsc;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::conditioning::ConditionVector;
use crate::data::Track;
use crate::error::{Error, Result};
use crate::blocks::Ctx;
use crate::model::{Model, ModelConfig};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Mode, RngStream, Scalar, Tensor, Var};
use crate::spectrogram::{samples_for_frames, stft, ComplexSpec, Waveform};

/// Mean of `(T̂ − T)²` over every element.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, estimate: Var, target: Var) -> Result<Var> {
    g.mse(estimate, target)
}

/// Mean absolute sample difference over channels, up to the shorter length.
pub fn mae_signal(estimate: &Waveform<f32>, reference: &Waveform<f32>) -> f64 {
    let channels = estimate.channels().min(reference.channels());
    let (mut sum, mut n) = (0.0f64, 0usize);
    for c in 0..channels {
        for (&a, &b) in estimate.channel(c).iter().zip(reference.channel(c)) {
            sum += (a as f64 - b as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean absolute difference between two spectrograms of equal shape.
pub fn mae_spec<T: Scalar>(estimate: &ComplexSpec<T>, reference: &ComplexSpec<T>) -> Result<f64> {
    if estimate.tensor.shape() != reference.tensor.shape() {
        return Err(Error::shape(format!(
            "spectrograms {:?} vs {:?}",
            estimate.tensor.shape(),
            reference.tensor.shape()
        )));
    }
    let n = estimate.tensor.len().max(1) as f64;
    Ok(estimate
        .tensor
        .data()
        .iter()
        .zip(reference.tensor.data())
        .map(|(&a, &b)| (a.f64() - b.f64()).abs())
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub min_gain: f64,
    pub max_gain: f64,
    /// Draw each source from an independently chosen track and offset.
    pub cross_track: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            min_gain: 0.25,
            max_gain: 1.25,
            cross_track: true,
        }
    }
}

/// An excerpt: every source clip and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Excerpt {
    pub mixture: Waveform<f32>,
    pub sources: IndexMap<String, Waveform<f32>>,
}

/// Assembles a training mixture from randomly chosen, randomly gained
/// source clips of `len` samples.
pub fn augment_mix(
    pool: &[Track],
    rng: &mut RngStream,
    len: usize,
    instruments: &[String],
    aug: &AugmentConfig,
) -> Result<Excerpt> {
    if pool.is_empty() {
        return Err(Error::Validation("augmentation pool is empty".into()));
    }
    let shortest = pool.iter().map(Track::len).min().unwrap_or(0);
    if len == 0 || len > shortest {
        return Err(Error::Validation(format!(
            "chunk of {len} samples does not fit the shortest track ({shortest} samples)"
        )));
    }
    let mut shared = None;
    let mut sources = IndexMap::with_capacity(instruments.len());
    for inst in instruments {
        let (track, offset) = match (aug.cross_track, shared) {
            (false, Some(s)) => s,
            _ => {
                let t = rng.below(pool.len());
                let o = rng.below(pool[t].len() - len + 1);
                shared = Some((t, o));
                (t, o)
            }
        };
        let gain = rng.uniform_range(aug.min_gain, aug.max_gain);
        let clip = pool[track].source(inst)?.segment(offset, len)?;
        let clip = if gain == 1.0 { clip } else { clip.scaled(gain as f32) };
        sources.insert(inst.clone(), clip);
    }
    let parts: Vec<_> = sources.values().cloned().collect();
    Ok(Excerpt {
        mixture: Waveform::sum(&parts)?,
        sources,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Frames per training excerpt; a multiple of `2^L`.
    pub chunk_frames: usize,
    pub seed: u64,
    /// Steps between validations.
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub augment: AugmentConfig,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 2000,
            chunk_frames: 32,
            seed: 0,
            val_every: 200,
            patience: 5,
            augment: AugmentConfig::default(),
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("chunk_frames", self.chunk_frames),
            ("val_every", self.val_every),
            ("prefetch", self.prefetch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be at least 1")));
            }
        }
        if !self.chunk_frames.is_multiple_of(model.divisor()) {
            return Err(Error::config(format!(
                "`chunk_frames` = {} is not divisible by 2^L = {}",
                self.chunk_frames,
                model.divisor()
            )));
        }
        let a = &self.augment;
        if !(a.min_gain > 0.0 && a.min_gain <= a.max_gain && a.max_gain.is_finite()) {
            return Err(Error::config(format!("invalid gain range [{}, {}]", a.min_gain, a.max_gain)));
        }
        Ok(())
    }

    /// Samples per excerpt so that the STFT yields exactly `chunk_frames`.
    pub fn chunk_samples(&self, model: &ModelConfig) -> usize {
        samples_for_frames(self.chunk_frames, model.hop)
    }
}

/// Mixture and conditioned-target spectrograms, `[B, 2c, T, F]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub seed: u64,
    pub mixture: Tensor<T>,
    pub target: Tensor<T>,
    pub conditions: Vec<ConditionVector>,
}

/// Seed of the batch drawn at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    RngStream::new(seed).fork(step as u64).next_u64()
}

/// One batch of augmented excerpts with uniformly drawn conditions.
pub fn make_batch(pool: &[Track], seed: u64, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainBatch<f32>> {
    let mut rng = RngStream::new(seed);
    let len = cfg.chunk_samples(model);
    let mut mixes = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut conditions = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let ex = augment_mix(pool, &mut rng, len, &model.instruments, &cfg.augment)?;
        let k = rng.below(model.instruments.len());
        let mix = stft(&ex.mixture, model.n_fft, model.hop)?;
        let target = stft(&ex.sources[k], model.n_fft, model.hop)?;
        debug_assert_eq!(mix.frames(), cfg.chunk_frames);
        mixes.push(mix.tensor);
        targets.push(target.tensor);
        conditions.push(ConditionVector::one_hot(k, model.instruments.len())?);
    }
    Ok(TrainBatch {
        seed,
        mixture: Tensor::stack(&mixes)?,
        target: Tensor::stack(&targets)?,
        conditions,
    })
}

/// Forward, MSE loss, backward, and one Adam update; returns the loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &TrainBatch<T>,
    adam: &mut AdamState<T>,
    rng: &mut RngStream,
    lr: f64,
) -> Result<f64> {
    // Running statistics are committed only once the step is known finite.
    let mut stats = model.stats.clone();
    let mut g = Graph::new();
    let x = g.constant(batch.mixture.clone());
    let y = {
        let mut ctx = Ctx {
            params: &model.params,
            stats: &mut stats,
            mode: Mode::Train,
            rng,
        };
        model.net.forward(&mut g, &mut ctx, x, &batch.conditions)?
    };
    let t = g.constant(batch.target.clone());
    let loss = mse_loss(&mut g, y, t)?;
    let value = g.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("training loss at optimizer step {} (batch seed {})", adam.step + 1, batch.seed),
        });
    }
    let grads = g.backward(loss)?;
    model.params.zero_grad();
    g.accumulate_param_grads(&grads, &mut model.params);
    adam_step(&mut model.params, adam, lr).map_err(|e| match e {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{what} at optimizer step {} (batch seed {})", adam.step + 1, batch.seed),
        },
        e => e,
    })?;
    model.stats = stats;
    Ok(value)
}

/// Per-instrument time-domain MAE of the model's estimates over `tracks`.
pub fn validation_mae(model: &Model<f32>, tracks: &[Track]) -> Result<IndexMap<String, f64>> {
    let instruments = &model.config.instruments;
    let per_track: Vec<Vec<f64>> = tracks
        .par_iter()
        .map(|t| {
            instruments
                .iter()
                .map(|inst| Ok(mae_signal(&model.separate(&t.mixture, inst)?, t.source(inst)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(instruments
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let s: f64 = per_track.iter().map(|r| r[i]).sum();
            (inst.clone(), s / per_track.len().max(1) as f64)
        })
        .collect())
}

/// MAE of the mixture used as every source's estimate.
pub fn mixture_mae(tracks: &[Track], instruments: &[String]) -> Result<IndexMap<String, f64>> {
    instruments
        .iter()
        .map(|inst| {
            let mut s = 0.0;
            for t in tracks {
                s += mae_signal(&t.mixture, t.source(inst)?);
            }
            Ok((inst.clone(), s / tracks.len().max(1) as f64))
        })
        .collect()
}

fn mean(m: &IndexMap<String, f64>) -> f64 {
    m.values().sum::<f64>() / m.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_mae: IndexMap<String, f64>,
}

impl HistoryRow {
    pub fn mean_val_mae(&self) -> f64 {
        mean(&self.val_mae)
    }
}

/// Training log; written as CSV preceded by `# key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub header: Vec<(String, String)>,
    pub instruments: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Validation(format!("writing history: {e}"));
        for (k, v) in &self.header {
            writeln!(w, "# {k} = {v}").map_err(io)?;
        }
        let mut cw = csv::Writer::from_writer(w);
        let ce = |e: csv::Error| Error::Validation(format!("writing history: {e}"));
        let mut head = vec!["step".to_string(), "train_loss".to_string()];
        head.extend(self.instruments.iter().map(|i| format!("val_mae_{i}")));
        cw.write_record(&head).map_err(ce)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.train_loss.to_string()];
            rec.extend(
                self.instruments
                    .iter()
                    .map(|i| r.val_mae.get(i).map(f64::to_string).unwrap_or_default()),
            );
            cw.write_record(&rec).map_err(ce)?;
        }
        cw.flush().map_err(io)
    }
}

pub struct FitReport {
    pub history: History,
    /// Model state at the best validation.
    pub best: Model<f32>,
    pub best_step: usize,
    pub best_val_mae: f64,
    pub baseline_val_mae: IndexMap<String, f64>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Trains on augmented excerpts of `train`, validating on `val` every
/// `val_every` steps and at the end. Batches are prepared on a producer
/// thread, bounded by `prefetch`.
pub fn fit(
    model: &mut Model<f32>,
    train: &[Track],
    val: &[Track],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<FitReport> {
    cfg.validate(&model.config)?;
    let mcfg = model.config.clone();
    let lr = mcfg.lr;
    let mut header = vec![("seed".to_string(), cfg.seed.to_string())];
    header.extend(crate::model::CONFIG_KEYS.iter().map(|k| (k.to_string(), mcfg.get(k).expect("known key"))));
    header.extend([
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("chunk_frames".to_string(), cfg.chunk_frames.to_string()),
    ]);
    let mut history = History {
        header,
        instruments: mcfg.instruments.clone(),
        rows: Vec::new(),
    };
    let baseline_val_mae = mixture_mae(val, &mcfg.instruments)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = RngStream::new(cfg.seed).fork(u64::MAX);
    let mut best = model.clone();
    let mut best_step = 0;
    let mut best_val_mae = f64::INFINITY;
    let mut stale = 0;
    let mut losses = Vec::new();
    let mut steps_run = 0;
    let mut stopped_early = false;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<TrainBatch<f32>>>(cfg.prefetch);
        let producer_cfg = mcfg.clone();
        scope.spawn(move || {
            for step in 1..=cfg.steps {
                let b = make_batch(train, batch_seed(cfg.seed, step), &producer_cfg, cfg);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for step in 1..=cfg.steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Validation("batch producer stopped".into()))??;
            losses.push(train_step(model, &batch, &mut adam, &mut rng, lr)?);
            steps_run = step;
            if step % cfg.val_every != 0 && step != cfg.steps {
                continue;
            }
            let val_mae = if val.is_empty() {
                IndexMap::new()
            } else {
                validation_mae(model, val)?
            };
            let row = HistoryRow {
                step,
                train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                val_mae,
            };
            losses.clear();
            progress(&row);
            let score = if val.is_empty() { row.train_loss } else { row.mean_val_mae() };
            history.rows.push(row);
            if score < best_val_mae {
                best_val_mae = score;
                best_step = step;
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale > cfg.patience {
                    stopped_early = step != cfg.steps;
                    break;
                }
            }
        }
        // unblocks the producer if it is waiting on a full queue
        drop(rx);
        Ok(())
    })?;

    Ok(FitReport {
        history,
        best,
        best_step,
        best_val_mae,
        baseline_val_mae,
        steps_run,
        stopped_early,
    })
}
