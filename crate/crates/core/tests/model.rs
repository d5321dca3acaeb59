mod common;

use std::collections::BTreeSet;

use common::*;
use lasaft::blocks::Ctx;
use lasaft::conditioning::ConditionVector;
use lasaft::error::CheckpointError;
use lasaft::model::{FtBlock, Model, ModelConfig, Modulation};
use lasaft::numerics::{GradCheckOptions, Mode, RngStream, StatStore, Tensor};
use lasaft::spectrogram::{istft, ComplexSpec, Waveform};
use lasaft::Error;

const MODULATIONS: [Modulation; 3] = [Modulation::None, Modulation::Film, Modulation::Gpocm];
const FTS: [FtBlock; 3] = [FtBlock::None, FtBlock::Tdf, FtBlock::Lasaft];

fn variant(m: Modulation, ft: FtBlock) -> ModelConfig {
    ModelConfig {
        modulation: m,
        ft_block: ft,
        ..ModelConfig::micro()
    }
}

fn names(c: &ModelConfig) -> BTreeSet<String> {
    Model::<f32>::build(c, 0).unwrap().params.names().map(str::to_string).collect()
}

fn cond(i: usize) -> ConditionVector {
    ConditionVector::one_hot(i, 4).unwrap()
}

fn randomized(c: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::build(c, seed).unwrap();
    let mut rng = RngStream::new(seed + 1);
    for s in m.stats.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>() {
        let st = m.stats.get_mut(&s).unwrap();
        st.mean.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        st.var.iter_mut().for_each(|v| *v = rng.uniform_range(0.5, 1.5));
    }
    m
}

#[test]
fn every_variant_preserves_shape() {
    let mut rng = RngStream::new(1);
    for m in MODULATIONS {
        for ft in FTS {
            let model = randomized(&variant(m, ft), 2);
            let x = random_tensor(&mut rng, &[2, 2, 4, 32]);
            let y = model.predict(x.clone(), &[cond(0), cond(3)]).unwrap();
            assert_eq!(y.shape(), x.shape(), "{m}/{ft}");
            assert!(y.all_finite());
        }
    }
}

#[test]
fn unconditioned_variants_ignore_the_condition() {
    let mut rng = RngStream::new(3);
    let x = random_tensor(&mut rng, &[1, 2, 4, 32]);
    for ft in [FtBlock::None, FtBlock::Tdf] {
        let model = randomized(&variant(Modulation::None, ft), 4);
        let base = model.predict(x.clone(), &[cond(0)]).unwrap();
        for i in 1..4 {
            assert_eq!(model.predict(x.clone(), &[cond(i)]).unwrap(), base);
        }
    }
    for (m, ft) in [(Modulation::Gpocm, FtBlock::None), (Modulation::Film, FtBlock::Tdf), (Modulation::None, FtBlock::Lasaft)] {
        let model = randomized(&variant(m, ft), 5);
        let a = model.predict(x.clone(), &[cond(0)]).unwrap();
        let b = model.predict(x.clone(), &[cond(1)]).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0, "{m}/{ft}");
    }
}

#[test]
fn input_validation_precedes_compute() {
    let model = Model::<f32>::build(&ModelConfig::micro(), 0).unwrap();
    let bad_t = Tensor::zeros(vec![1, 2, 3, 32]);
    let err = model.predict(bad_t, &[cond(0)]).unwrap_err();
    assert!(matches!(err, Error::Config(_)) && err.to_string().contains("T = 3"), "{err}");
    assert!(model.predict(Tensor::zeros(vec![1, 2, 4, 16]), &[cond(0)]).is_err());
    assert!(model.predict(Tensor::zeros(vec![1, 4, 4, 32]), &[cond(0)]).is_err());
    assert!(model.predict(Tensor::zeros(vec![2, 2, 4, 32]), &[cond(0)]).is_err());
    let bad = ModelConfig {
        n_fft: 64,
        hop: 32,
        levels: 6,
        ..ModelConfig::micro()
    };
    let err = Model::<f32>::build(&bad, 0).unwrap_err().to_string();
    assert!(err.contains("F = 32"), "{err}");
}

#[test]
fn seeded_builds_are_identical() {
    let c = ModelConfig::micro();
    let a = Model::<f32>::build(&c, 7).unwrap();
    let b = Model::<f32>::build(&c, 7).unwrap();
    let d = Model::<f32>::build(&c, 8).unwrap();
    for ((pa, pb), pd) in a.params.iter().zip(b.params.iter()).zip(d.params.iter()) {
        assert_eq!(pa.value, pb.value);
        assert_eq!(pa.name, pd.name);
    }
    assert!(a.params.iter().zip(d.params.iter()).any(|(x, y)| x.value != y.value));
}

#[test]
fn film_baseline_census() {
    let c = ModelConfig {
        modulation: Modulation::Film,
        ft_block: FtBlock::None,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::build(&c, 0).unwrap();
    let tfcs: BTreeSet<&str> = model
        .params
        .names()
        .filter_map(|n| n.find(".tfc").map(|i| &n[..i + 4]))
        .collect();
    assert_eq!(tfcs.len(), 7, "{tfcs:?}");
    let (e, cl) = (c.embedding_dim, c.channels * c.levels);
    assert_eq!(cl, 72);
    let v = |n: &str| model.params.value(n).unwrap().len();
    assert_eq!(v("cond.gamma.weight") + v("cond.gamma.bias"), 4 * e * cl + cl);
    assert_eq!(v("cond.beta.weight") + v("cond.beta.bias"), 4 * e * cl + cl);
    let census = model.param_count();
    assert_eq!(census.total, census.groups.values().sum::<usize>());
    assert_eq!(census.total, model.params.numel());
    assert_eq!(
        census.groups.keys().map(String::as_str).collect::<Vec<_>>(),
        ["expand", "enc", "mid", "dec", "restore", "cond"]
    );
    let empty = lasaft::model::census(&lasaft::numerics::ParamStore::<f32>::new());
    assert_eq!(empty.total, 0);
}

#[test]
fn ablation_parameter_sets_nest() {
    let c = ModelConfig {
        levels: 2,
        channels: 6,
        n_fft: 256,
        hop: 128,
        tfc_layers: 3,
        growth_rate: 4,
        ..ModelConfig::default()
    };
    let film = |ft| ModelConfig {
        modulation: Modulation::Film,
        ft_block: ft,
        ..c.clone()
    };
    let (a, b, l) = (names(&film(FtBlock::None)), names(&film(FtBlock::Tdf)), names(&film(FtBlock::Lasaft)));
    assert!(a.is_subset(&b) && a.len() < b.len());
    assert!(b.is_subset(&l) && b.len() < l.len());

    let count = |cfg: &ModelConfig| Model::<f32>::build(cfg, 0).unwrap().params.numel();
    let sites = 2 * c.levels + 1;
    let mut extra = 0;
    let freqs: Vec<usize> = (0..c.levels)
        .map(|lv| (c.n_fft / 2) >> lv)
        .chain([(c.n_fft / 2) >> c.levels])
        .chain((0..c.levels).map(|lv| (c.n_fft / 2) >> lv))
        .collect();
    assert_eq!(freqs.len(), sites);
    for f in freqs {
        let hidden = f / c.bottleneck;
        let copy = hidden * f + 2 * f; // dense weights + BN scale/shift
        extra += (c.latent_sources - 1) * copy;
        extra += c.latent_sources * c.key_dim;
        extra += c.key_dim * c.embedding_dim + c.key_dim;
    }
    assert_eq!(count(&film(FtBlock::Lasaft)) - count(&film(FtBlock::Tdf)), extra);
    let new: Vec<_> = l.difference(&b).collect();
    let keys = new.iter().filter(|n| n.ends_with(".keys")).count();
    let copies = new.iter().filter(|n| n.contains(".fc2.")).count();
    assert_eq!(keys, sites);
    assert_eq!(copies, sites * (c.latent_sources - 1));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = variant(Modulation::Gpocm, FtBlock::Lasaft);
    let mut model = Model::<f32>::build(&c, 11).unwrap();
    let mut rng = RngStream::new(12);
    for s in model.stats.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>() {
        model.stats.get_mut(&s).unwrap().mean[0] = rng.normal() as f32;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lsft");
    model.save_checkpoint(&path).unwrap();
    let back = Model::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back.config, c);
    let x = random_tensor_f32(&mut rng, &[2, 2, 4, 32]);
    let conds = [cond(1), cond(2)];
    assert_eq!(model.predict(x.clone(), &conds).unwrap(), back.predict(x, &conds).unwrap());
    assert_eq!(back.to_bytes(), model.to_bytes());
}

#[test]
fn checkpoint_corruption_is_classified() {
    let c = variant(Modulation::Film, FtBlock::Tdf);
    let model = Model::<f32>::build(&c, 13).unwrap();
    let bytes = model.to_bytes();
    let err = |b: &[u8]| match Model::<f32>::from_bytes(b) {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected checkpoint error, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(err(&bad), CheckpointError::BadMagic));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(err(&bad), CheckpointError::Version { found: 9, expected: 1 }));
    assert!(matches!(err(&bytes[..bytes.len() - 10]), CheckpointError::Truncated));
    assert!(matches!(err(&bytes[..10]), CheckpointError::Truncated));
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(matches!(err(&bad), CheckpointError::Checksum));
    match Model::<f64>::from_bytes(&bytes) {
        Err(Error::Checkpoint(CheckpointError::DType { found: "f32", expected: "f64" })) => {}
        other => panic!("{other:?}"),
    }

    let mut other = Model::<f32>::build(&variant(Modulation::Film, FtBlock::Lasaft), 0).unwrap();
    match other.load_weights(&bytes) {
        Err(Error::Checkpoint(CheckpointError::MissingTensor(n))) => assert!(n.contains(".fc2.1") || n.contains("keys") || n.contains("query"), "{n}"),
        r => panic!("{r:?}"),
    }
    let wider = ModelConfig {
        channels: 6,
        ..c.clone()
    };
    let mut other = Model::<f32>::build(&wider, 0).unwrap();
    match other.load_weights(&bytes) {
        Err(Error::Checkpoint(CheckpointError::TensorShape { name, .. })) => assert_eq!(name, "expand.weight"),
        r => panic!("{r:?}"),
    }
    let mut smaller = Model::<f32>::build(&variant(Modulation::Film, FtBlock::None), 0).unwrap();
    match smaller.load_weights(&bytes) {
        Err(Error::Checkpoint(CheckpointError::UnknownTensor(name))) => assert!(name.starts_with("enc.0.ft"), "{name}"),
        r => panic!("{r:?}"),
    }
    let mut same = Model::<f32>::build(&c, 99).unwrap();
    same.load_weights(&bytes).unwrap();
    assert_eq!(same.to_bytes(), bytes);
}

#[test]
fn separation_preserves_length_and_is_deterministic() {
    let c = variant(Modulation::Gpocm, FtBlock::Lasaft);
    let model = Model::<f32>::build(&c, 14).unwrap();
    let mut rng = RngStream::new(15);
    for len in [100, 2000, 4321] {
        let w = Waveform::new(16000, random_tensor_f32(&mut rng, &[1, len])).unwrap();
        let a = model.separate(&w, "vocals").unwrap();
        assert_eq!(a.len(), len);
        assert_eq!(a.channels(), 1);
        assert_eq!(model.separate(&w, "vocals").unwrap(), a);
    }
    let w = Waveform::<f32>::silence(16000, 1, 500);
    match model.separate(&w, "kazoo") {
        Err(Error::UnknownInstrument { valid, .. }) => assert_eq!(valid, ["vocals", "drums", "bass", "other"]),
        r => panic!("{r:?}"),
    }
    assert!(model.separate(&Waveform::<f32>::silence(16000, 2, 500), "bass").is_err());
}

#[test]
fn silence_yields_the_tiled_bias_response() {
    let c = variant(Modulation::Film, FtBlock::Tdf);
    let model = Model::<f64>::build(&c, 16).unwrap();
    let len = 3000;
    let frames = 1 + len / c.hop;
    let chunk = c.chunk_frames();
    let r = model
        .predict(Tensor::zeros(vec![1, 2, chunk, 32]), &[cond(2)])
        .unwrap();
    let tiled = Tensor::from_fn(vec![2, frames, 32], |i| {
        let (k, rest) = (i / (frames * 32), i % (frames * 32));
        let (t, b) = (rest / 32, rest % 32);
        r.data()[(k * chunk + t % chunk) * 32 + b]
    });
    let oracle = istft(
        &ComplexSpec {
            tensor: tiled,
            n_fft: c.n_fft,
            hop: c.hop,
        },
        len,
        16000,
    )
    .unwrap();
    let out = model.separate(&Waveform::silence(16000, 1, len), "bass").unwrap();
    assert!(out.samples.max_abs_diff(&oracle.samples) < 1e-12);
}

#[test]
fn end_to_end_micro_gradients() {
    for (m, ft) in [(Modulation::Gpocm, FtBlock::Lasaft), (Modulation::Film, FtBlock::Tdf)] {
        let c = ModelConfig {
            latent_sources: 2,
            ..variant(m, ft)
        };
        let model = Model::<f64>::build(&c, 17).unwrap();
        let mut params = model.params.clone();
        let mut rng = RngStream::new(18);
        let x = random_tensor(&mut rng, &[2, 2, 2, 32]);
        let conds = [cond(0), cond(3)];
        let report = check_block(&mut params, 19, GradCheckOptions::default(), |g, p| {
            let mut stats: StatStore<f64> = model.stats.clone();
            let mut rng = RngStream::new(20);
            let mut ctx = Ctx {
                params: p,
                stats: &mut stats,
                mode: Mode::Train,
                rng: &mut rng,
            };
            let x = g.constant(x.clone());
            model.net.forward(g, &mut ctx, x, &conds)
        });
        assert!(report.passes(1e-3), "{m}/{ft}: {report:?}");
    }
}
