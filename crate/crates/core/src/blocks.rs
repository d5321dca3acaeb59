//! U-Net building blocks: densely connected convolution (TFC), time-distributed
//! fully-connected (TDF), scale changers, and channel adjusters.
//!
//! Every block registers its parameters under a name prefix when built and
//! binds them into a [`Graph`] when run. Layers followed by batch norm carry
//! no bias: batch norm's shift subsumes it.

use crate::error::{Error, Result};
use crate::numerics::{ConvGeometry, Graph, Mode, ParamStore, RngStream, Scalar, StatStore, Tensor, Var};

/// Mutable state a forward pass needs besides the graph.
pub struct Ctx<'a, T> {
    pub params: &'a ParamStore<T>,
    pub stats: &'a mut StatStore<T>,
    pub mode: Mode,
    pub rng: &'a mut RngStream,
}

/// Registers parameters and batch-norm statistics with their initial values.
pub struct Builder<'a, T> {
    pub params: &'a mut ParamStore<T>,
    pub stats: &'a mut StatStore<T>,
    pub rng: &'a mut RngStream,
}

impl<T: Scalar> Builder<'_, T> {
    /// Uniform in `±√(1/fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::c(rng.uniform_range(-bound, bound)));
        self.params.insert(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::c(std * rng.normal()));
        self.params.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(shape.to_vec(), T::c(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl Conv {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        name: impl Into<String>,
        (in_channels, out_channels): (usize, usize),
        kernel: (usize, usize),
        geometry: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        let fan_in = in_channels * kernel.0 * kernel.1;
        b.fan_in(&format!("{name}.weight"), &[out_channels, in_channels, kernel.0, kernel.1], fan_in)?;
        if bias {
            b.fan_in(&format!("{name}.bias"), &[out_channels], fan_in)?;
        }
        Ok(Conv {
            name,
            in_channels,
            out_channels,
            kernel,
            geometry,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = g.param(ctx.params, &format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(g.param(ctx.params, &format!("{}.bias", self.name))?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.geometry)
    }
}

/// Dense layer applied to the rows of a `[rows, features]` tensor.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        b.fan_in(&format!("{name}.weight"), &[out_features, in_features], in_features)?;
        if bias {
            b.fan_in(&format!("{name}.bias"), &[out_features], in_features)?;
        }
        Ok(Linear {
            name,
            in_features,
            out_features,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = g.param(ctx.params, &format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(g.param(ctx.params, &format!("{}.bias", self.name))?)
        } else {
            None
        };
        g.dense(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    /// Normalized axis: 1 for `[N, C, T, F]` features, 1 (last) for `[rows, F]`.
    pub axis: usize,
}

impl BatchNorm {
    pub fn build<T: Scalar>(b: &mut Builder<T>, name: impl Into<String>, channels: usize, axis: usize) -> Result<Self> {
        let name = name.into();
        b.constant(&format!("{name}.scale"), &[channels], 1.0)?;
        b.constant(&format!("{name}.shift"), &[channels], 0.0)?;
        b.stats.insert(name.clone(), channels)?;
        Ok(BatchNorm { name, channels, axis })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let scale = g.param(ctx.params, &format!("{}.scale", self.name))?;
        let shift = g.param(ctx.params, &format!("{}.shift", self.name))?;
        let stats = ctx.stats.get_mut(&self.name)?;
        g.batch_norm(x, scale, shift, stats, self.axis, ctx.mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TfcConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl TfcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.growth_rate == 0 {
            return Err(Error::config("TFC needs at least one layer and growth rate >= 1"));
        }
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
            return Err(Error::config(format!(
                "TFC kernel {:?} must be odd to preserve extents",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("TFC channel counts must be positive"));
        }
        Ok(())
    }

    /// Input channels of layer `j`: block input plus all earlier outputs.
    pub fn layer_inputs(&self, j: usize) -> usize {
        self.in_channels + j * self.growth_rate
    }

    pub fn layer_outputs(&self, j: usize) -> usize {
        if j + 1 == self.num_layers {
            self.out_channels
        } else {
            self.growth_rate
        }
    }
}

/// Densely connected 2-D convolutions; each layer is conv → BN → ReLU and
/// sees the concatenation of the block input and all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct Tfc {
    pub config: TfcConfig,
    layers: Vec<(Conv, BatchNorm)>,
}

impl Tfc {
    pub fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, config: TfcConfig) -> Result<Self> {
        config.validate()?;
        let (kh, kw) = config.kernel;
        let geo = ConvGeometry::new((1, 1), (kh / 2, kh / 2, kw / 2, kw / 2));
        let layers = (0..config.num_layers)
            .map(|j| {
                let name = format!("{prefix}.layer{j}");
                let conv = Conv::build(
                    b,
                    format!("{name}.conv"),
                    (config.layer_inputs(j), config.layer_outputs(j)),
                    config.kernel,
                    geo,
                    false,
                )?;
                let bn = BatchNorm::build(b, format!("{name}.bn"), config.layer_outputs(j), 1)?;
                Ok((conv, bn))
            })
            .collect::<Result<_>>()?;
        Ok(Tfc { config, layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "TFC expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut features = vec![x];
        let mut out = x;
        for (conv, bn) in &self.layers {
            let input = if features.len() == 1 { x } else { g.concat(&features)? };
            let y = conv.forward(g, ctx, input)?;
            let y = bn.forward(g, ctx, y)?;
            out = g.relu(y);
            features.push(out);
        }
        Ok(out)
    }
}

/// Hidden width of a frequency transformation at extent `freq`.
pub fn tdf_hidden(freq: usize, bottleneck: usize) -> Result<usize> {
    if bottleneck == 0 || freq / bottleneck == 0 {
        return Err(Error::config(format!(
            "bottleneck factor {bottleneck} leaves no hidden units for {freq} frequency bins"
        )));
    }
    Ok(freq / bottleneck)
}

/// One dense → BN → ReLU stage over frame rows `[rows, features]`.
#[derive(Clone, Debug)]
pub struct FrameLayer {
    pub fc: Linear,
    pub bn: BatchNorm,
}

impl FrameLayer {
    pub fn build<T: Scalar>(b: &mut Builder<T>, fc: &str, bn: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(FrameLayer {
            fc: Linear::build(b, fc, fin, fout, false)?,
            bn: BatchNorm::build(b, bn, fout, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, rows: Var) -> Result<Var> {
        let y = self.fc.forward(g, ctx, rows)?;
        let y = self.bn.forward(g, ctx, y)?;
        Ok(g.relu(y))
    }
}

/// Views `[N, C, T, F]` as frame rows `[N·C·T, F]`, checking `F`.
pub fn to_frames<T: Scalar>(g: &mut Graph<T>, x: Var, freq: usize) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != freq {
        return Err(Error::config(format!(
            "frequency transformation built for {freq} bins, input is {shape:?}"
        )));
    }
    let rows = g.reshape(x, &[shape[0] * shape[1] * shape[2], freq])?;
    Ok((rows, shape))
}

/// Time-distributed fully-connected block: the same two frame layers applied
/// to every frame `x[n, c, t, :]`.
#[derive(Clone, Debug)]
pub struct Tdf {
    pub freq: usize,
    pub hidden: usize,
    pub first: FrameLayer,
    pub second: FrameLayer,
}

impl Tdf {
    pub fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, freq: usize, bottleneck: usize) -> Result<Self> {
        let hidden = tdf_hidden(freq, bottleneck)?;
        Ok(Tdf {
            freq,
            hidden,
            first: FrameLayer::build(b, &format!("{prefix}.fc1"), &format!("{prefix}.bn1"), freq, hidden)?,
            second: FrameLayer::build(b, &format!("{prefix}.fc2.0"), &format!("{prefix}.bn2.0"), hidden, freq)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (rows, shape) = to_frames(g, x, self.freq)?;
        let h = self.first.forward(g, ctx, rows)?;
        let y = self.second.forward(g, ctx, h)?;
        g.reshape(y, &shape)
    }
}

/// Strided 2×2 convolution halving time and frequency.
pub fn build_downsample<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Conv> {
    Conv::build(b, name, (channels, channels), (2, 2), ConvGeometry::new((2, 2), (0, 0, 0, 0)), true)
}

pub fn downsample<T: Scalar>(conv: &Conv, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::config(format!("down-sampling needs even extents, got {s:?}")));
    }
    conv.forward(g, ctx, x)
}

/// Transposed 2×2 convolution doubling time and frequency.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub name: String,
    pub channels: usize,
}

impl Upsample {
    pub fn build<T: Scalar>(b: &mut Builder<T>, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        let fan_in = channels * 4;
        b.fan_in(&format!("{name}.weight"), &[channels, channels, 2, 2], fan_in)?;
        b.fan_in(&format!("{name}.bias"), &[channels], fan_in)?;
        Ok(Upsample { name, channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = g.param(ctx.params, &format!("{}.weight", self.name))?;
        let b = g.param(ctx.params, &format!("{}.bias", self.name))?;
        g.conv_transpose2d(x, w, Some(b), (2, 2))
    }
}

/// `1×2` convolution padded on the high-frequency side, preserving `F`.
pub fn build_channel_adjust<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Result<Conv> {
    Conv::build(b, name, (cin, cout), (1, 2), ConvGeometry::new((1, 1), (0, 0, 0, 1)), true)
}

/// Channel expansion `2c → C̄` followed by ReLU.
pub fn channel_expand<T: Scalar>(conv: &Conv, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
    let y = conv.forward(g, ctx, x)?;
    Ok(g.relu(y))
}

/// Channel restoration `C̄ → 2c`, linear (complex-valued target).
pub fn channel_restore<T: Scalar>(conv: &Conv, g: &mut Graph<T>, ctx: &Ctx<T>, x: Var) -> Result<Var> {
    conv.forward(g, ctx, x)
}
