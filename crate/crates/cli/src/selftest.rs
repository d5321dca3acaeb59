//! Self-verification suites: finite-difference gradient checks, STFT
//! round-trip, modulation identities, attention normalization and the
//! convexity of the latent-source blend.

use std::time::Instant;

use lasaft::blocks::{Builder, Ctx, Tdf, Tfc, TfcConfig};
use lasaft::conditioning::{film_apply, gpocm_apply, pocm_apply, ConditionGenerator, ConditionVector, Embedding, ParamKind};
use lasaft::lasaft::Lasaft;
use lasaft::model::{FtBlock, Model, ModelConfig, Modulation};
use lasaft::numerics::{
    grad_check, ConvGeometry, GradCheckOptions, Graph, Mode, ParamStore, RngStream, RunningStats, StatStore,
    Tensor, Var, Want,
};
use lasaft::spectrogram::{istft, stft, Waveform};

/// Relative error bound for every gradient check.
pub const GRAD_TOL: f64 = 1e-3;

type Check = fn(bool) -> Result<String, String>;

/// Named suites in run order.
pub const CHECKS: [(&str, Check); 8] = [
    ("grad.kernels", grad_kernels),
    ("grad.blocks", grad_blocks),
    ("grad.model", grad_model),
    ("stft.roundtrip", stft_roundtrip),
    ("identity.modulation", identity_modulation),
    ("identity.lasaft", identity_lasaft),
    ("attention.normalization", attention_normalization),
    ("lasaft.convexity", lasaft_convexity),
];

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Runs one suite; `corrupt` injects a fault into its measured quantity so
/// the harness itself can be shown to catch failures.
pub fn run(name: &str, corrupt: bool) -> Option<Outcome> {
    let (name, check) = CHECKS.iter().find(|(n, _)| *n == name)?;
    let t = Instant::now();
    let result = check(corrupt);
    let seconds = t.elapsed().as_secs_f64();
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Some(Outcome {
        name,
        passed,
        detail,
        seconds,
    })
}

fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn err(e: lasaft::Error) -> String {
    e.to_string()
}

/// Gradient check under a fixed random projection of the block output.
/// With `corrupt`, the analytic gradient of the first parameter is skewed.
fn check_block<F>(label: &str, params: &mut ParamStore<f64>, seed: u64, corrupt: bool, mut build: F) -> Result<String, String>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> lasaft::Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    let report = grad_check(
        params,
        |p, want| {
            let mut g = Graph::new();
            let out = build(&mut g, p)?;
            let r = proj
                .get_or_insert_with(|| random_tensor(&mut RngStream::new(seed), g.shape(out)))
                .clone();
            let r = g.constant(r);
            let prod = g.mul(out, r)?;
            let loss = g.sum(prod);
            if want == Want::LossAndGrad {
                let grads = g.backward(loss)?;
                g.accumulate_param_grads(&grads, p);
                if corrupt {
                    if let Some(first) = p.iter_mut().next() {
                        first.grad = first.grad.map(|v| v * 1.05 + 1e-3);
                    }
                }
            }
            Ok(g.value(loss).data()[0])
        },
        GradCheckOptions::default(),
    )
    .map_err(|e| format!("{label}: {e}"))?;
    if report.passes(GRAD_TOL) {
        Ok(format!("{label} {:.1e}", report.max_rel_error))
    } else {
        Err(format!(
            "{label}: max relative error {:.3e} at {:?}",
            report.max_rel_error, report.worst
        ))
    }
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).expect("distinct names");
    }
    s
}

fn summarize(parts: Vec<Result<String, String>>) -> Result<String, String> {
    let (ok, bad): (Vec<_>, Vec<_>) = parts.into_iter().partition(|r| r.is_ok());
    if bad.is_empty() {
        Ok(ok.into_iter().map(|r| r.unwrap_or_default()).collect::<Vec<_>>().join(", "))
    } else {
        Err(bad.into_iter().filter_map(|r| r.err()).collect::<Vec<_>>().join("; "))
    }
}

pub fn grad_kernels(corrupt: bool) -> Result<String, String> {
    let mut rng = RngStream::new(101);
    let mut parts = Vec::new();

    let mut s = store(vec![
        ("x", random_tensor(&mut rng, &[2, 2, 5, 6])),
        ("w", random_tensor(&mut rng, &[3, 2, 3, 2])),
        ("b", random_tensor(&mut rng, &[3])),
    ]);
    parts.push(check_block("conv2d", &mut s, 1, corrupt, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.conv2d(x, w, Some(b), ConvGeometry::new((2, 1), (1, 1, 0, 1)))
    }));

    let mut s = store(vec![
        ("x", random_tensor(&mut rng, &[2, 3, 3, 2])),
        ("w", random_tensor(&mut rng, &[3, 2, 2, 2])),
        ("b", random_tensor(&mut rng, &[2])),
    ]);
    parts.push(check_block("conv_transpose2d", &mut s, 2, corrupt, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.conv_transpose2d(x, w, Some(b), (2, 2))
    }));

    let mut s = store(vec![
        ("x", random_tensor(&mut rng, &[4, 5])),
        ("w", random_tensor(&mut rng, &[3, 5])),
        ("b", random_tensor(&mut rng, &[3])),
    ]);
    parts.push(check_block("dense", &mut s, 3, corrupt, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.dense(x, w, Some(b))
    }));

    for mode in [Mode::Train, Mode::Eval] {
        let mut s = store(vec![
            ("x", random_tensor(&mut rng, &[3, 2, 2, 3])),
            ("scale", random_tensor(&mut rng, &[2])),
            ("shift", random_tensor(&mut rng, &[2])),
        ]);
        let label = format!("batch_norm/{mode:?}").to_lowercase();
        parts.push(check_block(&label, &mut s, 4, corrupt, |g, p| {
            let (x, a, b) = (g.param(p, "x")?, g.param(p, "scale")?, g.param(p, "shift")?);
            let mut stats = RunningStats::new(2);
            stats.mean = vec![0.3, -0.2];
            stats.var = vec![1.5, 0.7];
            g.batch_norm(x, a, b, &mut stats, 1, mode)
        }));
    }

    let mut s = store(vec![("x", random_tensor(&mut rng, &[3, 4]))]);
    parts.push(check_block("activations", &mut s, 5, corrupt, |g, p| {
        let x = g.param(p, "x")?;
        let a = g.softmax(x);
        let b = g.sigmoid(x);
        let c = g.relu(x);
        let ab = g.mul(a, b)?;
        g.add(ab, c)
    }));
    summarize(parts)
}

/// Parameters, statistics and a stream for building blocks in isolation.
struct Bench {
    params: ParamStore<f64>,
    stats: StatStore<f64>,
    rng: RngStream,
}

impl Bench {
    fn new(seed: u64) -> Self {
        Bench {
            params: ParamStore::new(),
            stats: StatStore::new(),
            rng: RngStream::new(seed),
        }
    }

    fn builder(&mut self) -> Builder<'_, f64> {
        Builder {
            params: &mut self.params,
            stats: &mut self.stats,
            rng: &mut self.rng,
        }
    }

    fn input(&mut self, name: &str, shape: &[usize]) {
        let t = random_tensor(&mut self.rng, shape);
        self.params.insert(name, t).expect("fresh input name");
    }

    fn randomize(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.normal();
            }
        }
    }

    fn randomize_stats(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        let names: Vec<String> = self.stats.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let s = self.stats.get_mut(&n).expect("listed statistic");
            for m in &mut s.mean {
                *m = 0.3 * rng.normal();
            }
            for v in &mut s.var {
                *v = rng.uniform_range(0.5, 2.0);
            }
        }
    }
}

pub fn grad_blocks(corrupt: bool) -> Result<String, String> {
    let mut parts = Vec::new();

    let mut b = Bench::new(201);
    let cfg = TfcConfig {
        num_layers: 3,
        growth_rate: 2,
        kernel: (3, 3),
        in_channels: 2,
        out_channels: 3,
    };
    let tfc = Tfc::build(&mut b.builder(), "tfc", cfg).map_err(err)?;
    b.input("x", &[2, 2, 3, 8]);
    let Bench { params, stats, rng } = &mut b;
    parts.push(check_block("tfc", params, 21, corrupt, |g, p| {
        let mut ctx = Ctx { params: p, stats, mode: Mode::Train, rng };
        let x = g.param(p, "x")?;
        tfc.forward(g, &mut ctx, x)
    }));

    let mut b = Bench::new(202);
    let tdf = Tdf::build(&mut b.builder(), "tdf", 8, 2).map_err(err)?;
    b.input("x", &[2, 2, 3, 8]);
    let Bench { params, stats, rng } = &mut b;
    parts.push(check_block("tdf", params, 22, corrupt, |g, p| {
        let mut ctx = Ctx { params: p, stats, mode: Mode::Train, rng };
        let x = g.param(p, "x")?;
        tdf.forward(g, &mut ctx, x)
    }));

    type Op = fn(&mut Graph<f64>, Var, Var, Var) -> lasaft::Result<Var>;
    let ops: [(&str, Op, bool); 3] = [("film", film_apply, false), ("pocm", pocm_apply, true), ("gpocm", gpocm_apply, true)];
    for (i, (label, op, square)) in ops.into_iter().enumerate() {
        let mut rng = RngStream::new(210 + i as u64);
        let wshape: &[usize] = if square { &[2, 3, 3] } else { &[2, 3] };
        let mut s = store(vec![
            ("x", random_tensor(&mut rng, &[2, 3, 2, 3])),
            ("w", random_tensor(&mut rng, wshape)),
            ("b", random_tensor(&mut rng, &[2, 3])),
        ]);
        parts.push(check_block(label, &mut s, 23 + i as u64, corrupt, |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            op(g, x, w, b)
        }));
    }

    let mut b = Bench::new(203);
    let block = Lasaft::build(&mut b.builder(), "ft", 8, 2, 3, 4, 5).map_err(err)?;
    b.input("x", &[2, 2, 3, 8]);
    b.input("e", &[2, 4]);
    let Bench { params, stats, rng } = &mut b;
    parts.push(check_block("lasaft", params, 26, corrupt, |g, p| {
        let mut ctx = Ctx { params: p, stats, mode: Mode::Train, rng };
        let (x, e) = (g.param(p, "x")?, g.param(p, "e")?);
        block.residual(g, &mut ctx, x, e)
    }));

    let mut b = Bench::new(204);
    let emb = Embedding::build(&mut b.builder(), "cond.embedding", 3, 4).map_err(err)?;
    let gen = ConditionGenerator::build(&mut b.builder(), "cond", 4, 2, 2, ParamKind::Pocm).map_err(err)?;
    let conds: Vec<ConditionVector> = [0, 2, 1, 2]
        .iter()
        .map(|&i| ConditionVector::one_hot(i, 3))
        .collect::<lasaft::Result<_>>()
        .map_err(err)?;
    let Bench { params, stats, .. } = &mut b;
    parts.push(check_block("condition_generator", params, 27, corrupt, |g, p| {
        // dropout masks fixed across evaluations
        let mut rng = RngStream::new(28);
        let mut ctx = Ctx { params: p, stats, mode: Mode::Train, rng: &mut rng };
        let e = emb.forward(g, &ctx, &conds)?;
        let m = gen.generate(g, &mut ctx, e, ParamKind::Pocm)?;
        let w = g.reshape(m.weight, &[4, 8])?;
        g.concat(&[w, m.beta])
    }));
    summarize(parts)
}

/// The micro configuration: L = 1, C̄ = 4, F = 32, two latent sources.
pub fn micro(modulation: Modulation, ft_block: FtBlock) -> ModelConfig {
    ModelConfig {
        modulation,
        ft_block,
        latent_sources: 2,
        ..ModelConfig::micro()
    }
}

pub fn grad_model(corrupt: bool) -> Result<String, String> {
    let mut parts = Vec::new();
    for (i, (m, ft)) in [(Modulation::Gpocm, FtBlock::Lasaft), (Modulation::Film, FtBlock::Tdf)]
        .into_iter()
        .enumerate()
    {
        let c = micro(m, ft);
        let model = Model::<f64>::build(&c, 300 + i as u64).map_err(err)?;
        let mut params = model.params.clone();
        let mut rng = RngStream::new(310 + i as u64);
        // one example per instrument: batch statistics over two examples
        // pin the generator's hidden features at ±1 and starve its gradient
        let conds = c
            .instruments
            .iter()
            .map(|i| model.condition(i))
            .collect::<lasaft::Result<Vec<_>>>()
            .map_err(err)?;
        let shape = [conds.len(), c.spec_channels(), 2, c.freq_bins()];
        let x = random_tensor(&mut rng, &shape);
        let label = format!("model/{m}+{ft}");
        parts.push(check_block(&label, &mut params, 320 + i as u64, corrupt, |g, p| {
            let mut stats = model.stats.clone();
            let mut rng = RngStream::new(330);
            let mut ctx = Ctx { params: p, stats: &mut stats, mode: Mode::Train, rng: &mut rng };
            let x = g.constant(x.clone());
            model.net.forward(g, &mut ctx, x, &conds)
        }));
    }
    summarize(parts)
}

/// Random-phase partials below `max_cycles` cycles per sample, faded in
/// and out over `fade` samples, peak 0.9.
pub fn band_limited_noise(rng: &mut RngStream, len: usize, max_cycles: f64, fade: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let partials: Vec<(f64, f64, f64)> = (0..48)
        .map(|_| (rng.uniform_range(0.002, max_cycles), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.2, 1.0)))
        .collect();
    let mut x: Vec<f64> = (0..len)
        .map(|n| partials.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * n as f64 + ph).sin()).sum())
        .collect();
    for n in 0..fade.min(len / 2) {
        let g = (0.5 - 0.5 * (PI * n as f64 / fade as f64).cos()).powi(2);
        x[n] *= g;
        x[len - 1 - n] *= g;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().map(|v| 0.9 * v / peak).collect()
}

pub fn stft_roundtrip(corrupt: bool) -> Result<String, String> {
    let mut rng = RngStream::new(401);
    let mut parts = Vec::new();
    for n_fft in [256usize, 2048] {
        let x = band_limited_noise(&mut rng, 20 * n_fft + 37, 0.2, n_fft);
        let samples: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let w = Waveform::from_channels(16_000, vec![samples]).map_err(err)?;
        let s = stft(&w, n_fft, n_fft / 2).map_err(err)?;
        let mut y = istft(&s, w.len(), 16_000).map_err(err)?;
        if corrupt {
            y.samples.data_mut()[n_fft] += 1e-4;
        }
        let e = y.samples.max_abs_diff(&w.samples);
        parts.push(if e < 1e-5 {
            Ok(format!("n_fft {n_fft} {e:.1e}"))
        } else {
            Err(format!("n_fft {n_fft}: max reconstruction error {e:.3e}"))
        });
    }
    summarize(parts)
}

fn modulate(op: fn(&mut Graph<f64>, Var, Var, Var) -> lasaft::Result<Var>, x: &Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Result<Tensor<f64>, String> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w), g.constant(b));
    let y = op(&mut g, xv, wv, bv).map_err(err)?;
    Ok(g.value(y).clone())
}

pub fn identity_modulation(corrupt: bool) -> Result<String, String> {
    let mut rng = RngStream::new(501);
    let (n, c) = (2, 5);
    let mut x = random_tensor(&mut rng, &[n, c, 3, 4]);
    let skew = |t: Tensor<f64>| if corrupt { t.map(|v| v * (1.0 + 1e-6)) } else { t };
    let film = skew(modulate(film_apply, &x, Tensor::full(vec![n, c], 1.0), Tensor::zeros(vec![n, c]))?);
    if film != x {
        return Err("FiLM(γ = 1, β = 0) is not the identity".into());
    }
    let gamma = random_tensor(&mut rng, &[n, c]);
    let beta = random_tensor(&mut rng, &[n, c]);
    let omega = Tensor::from_fn(vec![n, c, c], |i| {
        let (e, r, k) = (i / (c * c), (i / c) % c, i % c);
        if r == k {
            gamma.data()[e * c + r]
        } else {
            0.0
        }
    });
    let pocm = skew(modulate(pocm_apply, &x, omega, beta.clone())?);
    let film = modulate(film_apply, &x, gamma, beta)?;
    if pocm != film {
        return Err("PoCM with diagonal ω differs from FiLM".into());
    }
    x = x.map(|v| v * 10.0);
    let gated = skew(modulate(gpocm_apply, &x, Tensor::zeros(vec![n, c, c]), Tensor::zeros(vec![n, c]))?);
    let worst = gated
        .data()
        .iter()
        .zip(x.data())
        .map(|(y, v)| (y - 0.5 * v).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-7 {
        return Err(format!("GPoCM(ω = 0, β = 0) deviates from X/2 by {worst:.3e}"));
    }
    Ok(format!("film identity, diagonal pocm = film, gpocm half gate {worst:.1e}"))
}

pub fn identity_lasaft(corrupt: bool) -> Result<String, String> {
    let mut b = Bench::new(601);
    let block = Lasaft::build(&mut b.builder(), "ft", 16, 4, 1, 8, 8).map_err(err)?;
    b.randomize(602);
    b.randomize_stats(603);
    let mut t = Bench::new(604);
    let tdf = Tdf::build(&mut t.builder(), "ft", 16, 4).map_err(err)?;
    for p in t.params.iter_mut() {
        p.value = b.params.value(&p.name).map_err(err)?.clone();
    }
    for (name, s) in b.stats.iter() {
        *t.stats.get_mut(name).map_err(err)? = s.clone();
    }
    let mut rng = RngStream::new(605);
    let x = random_tensor(&mut rng, &[2, 3, 4, 16]);
    let e = random_tensor(&mut rng, &[2, 8]);
    for mode in [Mode::Eval, Mode::Train] {
        let mut g = Graph::new();
        let (xv, ev) = (g.constant(x.clone()), g.constant(e.clone()));
        let mut ctx = Ctx { params: &b.params, stats: &mut b.stats, mode, rng: &mut b.rng };
        let y = block.forward(&mut g, &mut ctx, xv, ev).map_err(err)?;
        let mut lhs = g.value(y).clone();
        if corrupt {
            lhs.data_mut()[0] += 1e-12;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx { params: &t.params, stats: &mut t.stats, mode, rng: &mut t.rng };
        let y = tdf.forward(&mut g, &mut ctx, xv).map_err(err)?;
        if &lhs != g.value(y) {
            return Err(format!("single-branch LaSAFT differs from TDF in {mode:?} mode"));
        }
    }
    Ok("single-branch lasaft = tdf (train, eval)".into())
}

pub fn attention_normalization(corrupt: bool) -> Result<String, String> {
    let mut rng = RngStream::new(701);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let latent = 1 + rng.below(8);
        let dk = 1 + rng.below(32);
        let e_dim = 1 + rng.below(32);
        let mut b = Bench::new(710 + trial);
        let block = Lasaft::build(&mut b.builder(), "ft", 8, 2, latent, e_dim, dk).map_err(err)?;
        let scale = rng.uniform_range(0.1, 50.0);
        for p in b.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = scale * rng.normal();
            }
        }
        let n = 1 + rng.below(4);
        let e = random_tensor(&mut rng, &[n, e_dim]);
        let mut g = Graph::new();
        let ev = g.constant(e);
        let ctx = Ctx { params: &b.params, stats: &mut b.stats, mode: Mode::Eval, rng: &mut b.rng };
        let a = block.attention(&mut g, &ctx, ev).map_err(err)?;
        let mut a = g.value(a).clone();
        if corrupt {
            a = a.map(|v| v * 1.00001);
        }
        for row in a.data().chunks(latent) {
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(format!("attention weight outside [0, 1] in trial {trial}"));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("attention rows sum to 1 ± {worst:.3e}"));
    }
    Ok(format!("rows sum to 1 ± {worst:.1e} over 50 draws"))
}

/// Pre-residual LaSAFT output against the per-coordinate envelope of the
/// individual branch outputs, over 100 random configurations.
pub fn lasaft_convexity(corrupt: bool) -> Result<String, String> {
    let mut rng = RngStream::new(801);
    let mut margin = f64::INFINITY;
    for trial in 0..100u64 {
        let latent = 1 + rng.below(6);
        let bf = 1 + rng.below(4);
        let freq = bf * (1 + rng.below(6));
        let (dk, e_dim) = (1 + rng.below(8), 1 + rng.below(8));
        let (n, c, t) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let mode = if rng.below(2) == 0 { Mode::Eval } else { Mode::Train };
        let mut b = Bench::new(900 + trial);
        let block = Lasaft::build(&mut b.builder(), "ft", freq, bf, latent, e_dim, dk).map_err(err)?;
        b.randomize(1000 + trial);
        b.randomize_stats(1100 + trial);
        let x = random_tensor(&mut rng, &[n, c, t, freq]);
        let e = random_tensor(&mut rng, &[n, e_dim]);
        let rows = n * c * t;

        let mut g = Graph::new();
        let (xv, ev) = (g.constant(x.clone()), g.constant(e));
        let mut stats = b.stats.clone();
        let mut ctx = Ctx { params: &b.params, stats: &mut stats, mode, rng: &mut b.rng };
        let y = block.forward(&mut g, &mut ctx, xv, ev).map_err(err)?;
        let mut y = g.value(y).clone();
        if corrupt {
            y.data_mut()[0] += 1.0;
        }
        let mut branches = Vec::with_capacity(latent);
        for k in 0..latent {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut stats = b.stats.clone();
            let mut ctx = Ctx { params: &b.params, stats: &mut stats, mode, rng: &mut b.rng };
            let flat = g.reshape(xv, &[rows, freq]).map_err(err)?;
            let hid = block.first.forward(&mut g, &mut ctx, flat).map_err(err)?;
            let out = block.branches[k].forward(&mut g, &mut ctx, hid).map_err(err)?;
            branches.push(g.value(out).clone());
        }
        for (i, v) in y.data().iter().enumerate() {
            let lo = branches.iter().map(|b| b.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = branches.iter().map(|b| b.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let inside = (v - lo).min(hi - v);
            margin = margin.min(inside);
            if inside < -1e-6 {
                return Err(format!(
                    "trial {trial}: coordinate {i} = {v} outside branch envelope [{lo}, {hi}]"
                ));
            }
        }
    }
    Ok(format!("100 configurations, worst envelope margin {margin:.1e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_and_corruption_is_caught() {
        for name in ["identity.modulation", "identity.lasaft", "attention.normalization", "stft.roundtrip"] {
            let ok = run(name, false).unwrap();
            assert!(ok.passed, "{name}: {}", ok.detail);
            let bad = run(name, true).unwrap();
            assert!(!bad.passed, "{name} missed an injected fault");
        }
        assert!(run("no.such.check", false).is_none());
    }

    #[test]
    fn noise_is_peak_normalized() {
        let x = band_limited_noise(&mut RngStream::new(1), 1000, 0.1, 100);
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
        assert!(x[0].abs() < 1e-12);
    }
}
