//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use lasaft::numerics::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, RngStream, Tensor, Var, Want,
};
use lasaft::Result;

pub fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

pub fn random_tensor_f32(rng: &mut RngStream, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() as f32)
}

/// Direct nested-loop convolution over one example `[Cin, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_direct(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: (usize, usize),
    pad: (usize, usize, usize, usize),
) -> (Vec<f64>, usize, usize) {
    let ho = (h + pad.0 + pad.1 - kh) / stride.0 + 1;
    let wo = (w + pad.2 + pad.3 - kw) / stride.1 + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let ii = (oi * stride.0 + a) as isize - pad.0 as isize;
                            let jj = (oj * stride.1 + b) as isize - pad.2 as isize;
                            if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                continue;
                            }
                            acc += k[((co * cin + ci) * kh + a) * kw + b]
                                * x[(ci * h + ii as usize) * w + jj as usize];
                        }
                    }
                }
                out[(co * ho + oi) * wo + oj] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// Transposed convolution as the adjoint of direct convolution: each output
/// coordinate `u` receives `Σ_v x[v]·conv(e_u)[v]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_by_duality(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride.0 + kh;
    let ow = (w - 1) * stride.1 + kw;
    let n_out = cout * oh * ow;
    let mut out = vec![0.0; n_out];
    let zero_bias = vec![0.0; cin];
    for (u, slot) in out.iter_mut().enumerate() {
        let mut basis = vec![0.0; n_out];
        basis[u] = 1.0;
        // conv kernel [cin, cout, kh, kw] maps cout channels to cin channels
        let (col, _, _) = conv_direct(&basis, cout, oh, ow, k, cin, kh, kw, &zero_bias, stride, (0, 0, 0, 0));
        *slot = col.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    (out, oh, ow)
}

/// Row-major triple-loop `x·wᵀ + b`.
pub fn matmul_naive(x: &[f64], rows: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows * fout];
    for r in 0..rows {
        for o in 0..fout {
            let mut acc = b[o];
            for i in 0..fin {
                acc += x[r * fin + i] * w[o * fin + i];
            }
            y[r * fout + o] = acc;
        }
    }
    y
}

pub fn assert_close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= rel * scale, "index {i}: {x} vs {y}");
    }
}

/// Gradient check of `build(graph, params) -> output` under a fixed random
/// projection loss `Σ r ⊙ output`, so every output coordinate contributes.
pub fn check_block<F>(params: &mut ParamStore<f64>, seed: u64, opts: GradCheckOptions, mut build: F) -> GradCheckReport
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    grad_check(
        params,
        |p, want| {
            let mut g = Graph::new();
            let out = build(&mut g, p)?;
            let r = proj
                .get_or_insert_with(|| {
                    let mut rng = RngStream::new(seed);
                    random_tensor(&mut rng, g.shape(out))
                })
                .clone();
            let r = g.constant(r);
            let prod = g.mul(out, r)?;
            let loss = g.sum(prod);
            if want == Want::LossAndGrad {
                let grads = g.backward(loss)?;
                g.accumulate_param_grads(&grads, p);
            }
            Ok(g.value(loss).data()[0])
        },
        opts,
    )
    .expect("gradient check ran")
}

/// Band-limited noise: random-phase partials below `max_cycles` (cycles per
/// sample), faded in/out over `fade` samples so that the reflected padding
/// at both ends stays smooth, peak-normalized to 0.9.
pub fn band_limited_noise(rng: &mut RngStream, len: usize, max_cycles: f64, fade: usize) -> Vec<f64> {
    let partials: Vec<(f64, f64, f64)> = (0..48)
        .map(|_| (rng.uniform_range(0.002, max_cycles), rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform_range(0.2, 1.0)))
        .collect();
    let mut x: Vec<f64> = (0..len)
        .map(|n| {
            partials
                .iter()
                .map(|&(f, ph, a)| a * (2.0 * std::f64::consts::PI * f * n as f64 + ph).sin())
                .sum()
        })
        .collect();
    for n in 0..fade.min(len / 2) {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * n as f64 / fade as f64).cos();
        let g = g * g;
        x[n] *= g;
        x[len - 1 - n] *= g;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().map(|v| 0.9 * v / peak).collect()
}

use lasaft::blocks::{Builder, Ctx};
use lasaft::numerics::{Mode, Scalar, StatStore};

/// Owns everything a block needs to be built and run in isolation.
pub struct Harness<T> {
    pub params: ParamStore<T>,
    pub stats: StatStore<T>,
    pub rng: RngStream,
}

impl<T: Scalar> Harness<T> {
    pub fn new(seed: u64) -> Self {
        Harness {
            params: ParamStore::new(),
            stats: StatStore::new(),
            rng: RngStream::new(seed),
        }
    }

    pub fn builder(&mut self) -> Builder<'_, T> {
        Builder {
            params: &mut self.params,
            stats: &mut self.stats,
            rng: &mut self.rng,
        }
    }

    pub fn ctx(&mut self, mode: Mode) -> Ctx<'_, T> {
        Ctx {
            params: &self.params,
            stats: &mut self.stats,
            mode,
            rng: &mut self.rng,
        }
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(p.value.shape(), value.shape(), "{name}");
        p.value = value;
    }

    pub fn fill(&mut self, name: &str, v: f64) {
        let shape = self.params.value(name).unwrap().shape().to_vec();
        self.set(name, Tensor::full(shape, T::c(v)));
    }

    /// Overwrites every parameter with standard normal draws.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = T::c(rng.normal());
            }
        }
    }

    /// Random running statistics so eval-mode batch norm is not the identity.
    pub fn randomize_stats(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        let names: Vec<String> = self.stats.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let s = self.stats.get_mut(&n).unwrap();
            for m in &mut s.mean {
                *m = T::c(0.3 * rng.normal());
            }
            for v in &mut s.var {
                *v = T::c(rng.uniform_range(0.5, 2.0));
            }
        }
    }

    pub fn run(&mut self, mode: Mode, x: Tensor<T>, f: impl FnOnce(&mut Graph<T>, &mut Ctx<T>, Var) -> Result<Var>) -> Tensor<T> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = self.ctx(mode);
        let y = f(&mut g, &mut ctx, xv).expect("forward");
        g.value(y).clone()
    }
}

/// Eval-mode batch norm oracle over `[outer, ch, inner]`.
pub fn bn_eval_oracle(x: &mut [f64], ch: usize, inner: usize, mean: &[f64], var: &[f64], scale: &[f64], shift: &[f64]) {
    for (i, v) in x.iter_mut().enumerate() {
        let c = (i / inner) % ch;
        *v = scale[c] * (*v - mean[c]) / (var[c] + 1e-5).sqrt() + shift[c];
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}
