mod common;

use common::*;
use lasaft::blocks::Ctx;
use lasaft::data::{synth_track, SynthSpec, Track};
use lasaft::model::{FtBlock, Model, ModelConfig, Modulation};
use lasaft::numerics::{grad_check, AdamConfig, AdamState, GradCheckOptions, Graph, Mode, RngStream, Tensor, Want};
use lasaft::spectrogram::{stft, Waveform};
use lasaft::training::*;
use lasaft::Error;

fn tracks(n: u64, duration: f64) -> Vec<Track> {
    (0..n)
        .map(|i| synth_track(format!("t{i}"), &SynthSpec { duration, seed: 500 + i, ..SynthSpec::default() }).unwrap())
        .collect()
}

fn names() -> Vec<String> {
    ["vocals", "drums", "bass", "other"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn mse_values_and_gradient() {
    let mut rng = RngStream::new(1);
    let t = random_tensor(&mut rng, &[2, 3, 4]);
    let eval = |p: Tensor<f64>, t: Tensor<f64>| {
        let mut g = Graph::new();
        let (pv, tv) = (g.leaf(p), g.constant(t));
        let l = mse_loss(&mut g, pv, tv).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).data()[0], grads.get(pv).unwrap().clone())
    };
    assert_eq!(eval(t.clone(), t.clone()).0, 0.0);
    assert_eq!(eval(t.map(|v| v + 1.0), t.clone()).0, 1.0);
    let p = random_tensor(&mut rng, &[2, 3, 4]);
    let (loss, grad) = eval(p.clone(), t.clone());
    let n = p.len() as f64;
    let oracle: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    assert!((loss - oracle).abs() < 1e-14);
    for ((g, a), b) in grad.data().iter().zip(p.data()).zip(t.data()) {
        assert!((g - 2.0 * (a - b) / n).abs() < 1e-15);
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(Tensor::<f64>::zeros(vec![2])), g.constant(Tensor::zeros(vec![3])));
    assert!(mse_loss(&mut g, a, b).is_err());
}

#[test]
fn mae_values() {
    let mut rng = RngStream::new(2);
    let s = Waveform::new(16000, random_tensor_f32(&mut rng, &[2, 300])).unwrap();
    assert_eq!(mae_signal(&s, &s), 0.0);
    let shifted = Waveform::new(16000, s.samples.map(|v| v + 0.5)).unwrap();
    assert!((mae_signal(&shifted, &s) - 0.5).abs() < 1e-6);
    let o = Waveform::new(16000, random_tensor_f32(&mut rng, &[2, 300])).unwrap();
    let oracle: f64 = o.samples.data().iter().zip(s.samples.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / 600.0;
    assert!((mae_signal(&o, &s) - oracle).abs() < 1e-12);
    let short = s.segment(0, 100).unwrap();
    assert_eq!(mae_signal(&short, &s), 0.0);
}

#[test]
fn augmentation_reassembles_and_is_seeded() {
    let pool = tracks(1, 1.0);
    let unit = AugmentConfig { min_gain: 1.0, max_gain: 1.0, cross_track: false };
    let mut rng = RngStream::new(3);
    let ex = augment_mix(&pool, &mut rng, 4000, &names(), &unit).unwrap();
    let start = (0..=pool[0].len() - 4000)
        .find(|&o| pool[0].sources["vocals"].segment(o, 4000).unwrap() == ex.sources["vocals"])
        .expect("clip comes from the track");
    for n in names() {
        assert_eq!(ex.sources[&n], pool[0].sources[&n].segment(start, 4000).unwrap());
    }
    assert_eq!(ex.mixture, pool[0].mixture.segment(start, 4000).unwrap());

    let pool = tracks(3, 1.0);
    let aug = AugmentConfig::default();
    let a = augment_mix(&pool, &mut RngStream::new(9), 3000, &names(), &aug).unwrap();
    let b = augment_mix(&pool, &mut RngStream::new(9), 3000, &names(), &aug).unwrap();
    assert_eq!(a, b);
    let parts: Vec<_> = a.sources.values().cloned().collect();
    assert_eq!(Waveform::sum(&parts).unwrap(), a.mixture);
    assert!(augment_mix(&pool, &mut rng, 20000, &names(), &aug).is_err());
    assert!(augment_mix(&[], &mut rng, 10, &names(), &aug).is_err());
}

#[test]
fn batches_respect_stft_linearity() {
    let pool = tracks(3, 1.0);
    let c = ModelConfig::micro();
    let tc = TrainConfig { chunk_frames: 8, batch_size: 3, ..TrainConfig::default() };
    let batch = make_batch(&pool, 11, &c, &tc).unwrap();
    assert_eq!(batch.mixture.shape(), &[3, 2, 8, 32]);
    assert_eq!(batch.conditions.len(), 3);
    assert_eq!(make_batch(&pool, 11, &c, &tc).unwrap(), batch);

    let mut rng = RngStream::new(12);
    let ex = augment_mix(&pool, &mut rng, tc.chunk_samples(&c), &names(), &AugmentConfig::default()).unwrap();
    let mix = stft(&ex.mixture, c.n_fft, c.hop).unwrap();
    let mut sum = Tensor::zeros(mix.tensor.shape().to_vec());
    for s in ex.sources.values() {
        sum.add_assign(&stft(s, c.n_fft, c.hop).unwrap().tensor);
    }
    assert!(mix.tensor.max_abs_diff(&sum) < 1e-5);
    assert_eq!(mix.frames(), 8);

    let bad = TrainConfig { chunk_frames: 7, ..tc };
    assert!(bad.validate(&c).is_err());
}

fn micro_batch(seed: u64) -> (ModelConfig, TrainBatch<f32>) {
    let pool = tracks(2, 0.5);
    let c = ModelConfig { lr: 2e-3, ..ModelConfig::micro() };
    let tc = TrainConfig { chunk_frames: 8, batch_size: 4, ..TrainConfig::default() };
    let b = make_batch(&pool, seed, &c, &tc).unwrap();
    (c, b)
}

#[test]
fn steps_are_reproducible_and_zero_lr_is_inert() {
    let (c, batch) = micro_batch(13);
    let run = || {
        let mut m = Model::<f32>::build(&c, 14).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        let mut rng = RngStream::new(15);
        let l1 = train_step(&mut m, &batch, &mut adam, &mut rng, c.lr).unwrap();
        let l2 = train_step(&mut m, &batch, &mut adam, &mut rng, c.lr).unwrap();
        (l1, l2, m.to_bytes())
    };
    assert_eq!(run(), run());

    let mut m = Model::<f32>::build(&c, 14).unwrap();
    let before: Vec<_> = m.params.iter().map(|p| p.value.clone()).collect();
    let mut adam = AdamState::new(AdamConfig::default());
    train_step(&mut m, &batch, &mut adam, &mut RngStream::new(1), 0.0).unwrap();
    let after: Vec<_> = m.params.iter().map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn fixed_batch_loss_decreases() {
    let (c, batch) = micro_batch(16);
    let mut m = Model::<f32>::build(&c, 17).unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    let mut rng = RngStream::new(18);
    let first = train_step(&mut m, &batch, &mut adam, &mut rng, c.lr).unwrap();
    let mut last = first;
    for _ in 0..49 {
        last = train_step(&mut m, &batch, &mut adam, &mut rng, c.lr).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (c, mut batch) = micro_batch(19);
    batch.mixture.data_mut()[5] = f32::NAN;
    let mut m = Model::<f32>::build(&c, 20).unwrap();
    let before = m.to_bytes();
    let mut adam = AdamState::new(AdamConfig::default());
    match train_step(&mut m, &batch, &mut adam, &mut RngStream::new(1), c.lr) {
        Err(Error::NonFinite { what }) => {
            assert!(what.contains("step 1") && what.contains(&format!("batch seed {}", batch.seed)), "{what}")
        }
        r => panic!("{r:?}"),
    }
    assert_eq!(m.to_bytes(), before);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let c = ModelConfig { modulation: Modulation::Gpocm, ft_block: FtBlock::Lasaft, ..ModelConfig::micro() };
    let model = Model::<f64>::build(&c, 21).unwrap();
    let mut rng = RngStream::new(22);
    let x = random_tensor(&mut rng, &[2, 2, 2, 32]);
    let target = random_tensor(&mut rng, &[2, 2, 2, 32]);
    let conds = [model.condition("drums").unwrap(), model.condition("other").unwrap()];
    let mut params = model.params.clone();
    let report = grad_check(
        &mut params,
        |p, want| {
            let mut stats = model.stats.clone();
            let mut rng = RngStream::new(23);
            let mut ctx = Ctx { params: p, stats: &mut stats, mode: Mode::Train, rng: &mut rng };
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = model.net.forward(&mut g, &mut ctx, xv, &conds)?;
            let t = g.constant(target.clone());
            let loss = mse_loss(&mut g, y, t)?;
            if want == Want::LossAndGrad {
                let grads = g.backward(loss)?;
                g.accumulate_param_grads(&grads, p);
            }
            Ok(g.value(loss).data()[0])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

fn micro_fit(seed: u64, steps: usize) -> FitReport {
    let pool = tracks(4, 1.0);
    let c = ModelConfig { lr: 3e-3, ..ModelConfig::micro() };
    let mut m = Model::<f32>::build(&c, seed).unwrap();
    let tc = TrainConfig { steps, chunk_frames: 16, val_every: 20, patience: 100, seed, ..TrainConfig::default() };
    fit(&mut m, &pool[..3], &pool[3..], &tc, |_| {}).unwrap()
}

#[test]
fn fit_history_selection_and_baseline() {
    let rep = micro_fit(24, 150);
    assert_eq!(rep.history.rows.len(), 8);
    assert_eq!(rep.history.rows.last().unwrap().step, 150);
    assert_eq!(rep.steps_run, 150);
    let final_mae = rep.history.rows.last().unwrap().mean_val_mae();
    assert!(rep.best_val_mae <= final_mae);
    let min = rep.history.rows.iter().map(|r| r.mean_val_mae()).fold(f64::INFINITY, f64::min);
    assert_eq!(rep.best_val_mae, min);
    let baseline = rep.baseline_val_mae.values().sum::<f64>() / 4.0;
    assert!(rep.best_val_mae < baseline, "{} vs mixture {baseline}", rep.best_val_mae);

    let mut csv = Vec::new();
    rep.history.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.contains("# lr = 0.003"), "{text}");
    assert!(text.contains("step,train_loss,val_mae_vocals,val_mae_drums,val_mae_bass,val_mae_other"));
    let again = micro_fit(24, 150);
    assert_eq!(again.history, rep.history);
}

#[test]
fn patience_stops_early() {
    let pool = tracks(2, 0.5);
    let c = ModelConfig { lr: 0.5, ..ModelConfig::micro() };
    let mut m = Model::<f32>::build(&c, 25).unwrap();
    let tc = TrainConfig { steps: 100, chunk_frames: 8, val_every: 5, patience: 1, ..TrainConfig::default() };
    let rep = fit(&mut m, &pool[..1], &pool[1..], &tc, |_| {}).unwrap();
    assert!(rep.stopped_early, "{:?}", rep.history.rows.iter().map(|r| r.mean_val_mae()).collect::<Vec<_>>());
    assert!(rep.steps_run < 100);
}
