use crate::error::Result;
use crate::nn::functional as F;
use crate::nn::Mode;
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::tensor::{ops, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Depthwise `k×k` convolution followed by a 1×1 pointwise projection and a
/// bias. Stride 1, same padding.
#[derive(Debug, Clone)]
pub struct DwsConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl DwsConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let dw = init.kaiming_uniform(vec![in_channels, 1, kernel, kernel], kernel * kernel);
        let pw = init.kaiming_uniform(vec![out_channels, in_channels, 1, 1], in_channels);
        Ok(Self {
            depthwise: store.add(format!("{name}.depthwise"), dw, ParamKind::Trainable)?,
            pointwise: store.add(format!("{name}.pointwise"), pw, ParamKind::Trainable)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), ParamKind::Trainable)?,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let d = F::depthwise_conv2d(x, tape.param(store, self.depthwise))?;
        F::pointwise_conv2d(d, tape.param(store, self.pointwise), tape.param(store, self.bias))
    }

    pub fn num_params(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        in_channels * kernel * kernel + out_channels * in_channels + out_channels
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(vec![channels]), ParamKind::Buffer)?,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// In [`Mode::Train`] the updated running statistics are queued on the tape
    /// (see [`crate::tensor::Tape::take_stat_updates`]).
    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = F::batch_norm_train(x, gamma, beta, self.eps)?;
                let m = T::cst(self.momentum);
                let keep = T::one() - m;
                let unbias = T::cst(stats.count as f64 / (stats.count as f64 - 1.0));
                let rm = &store.get(self.running_mean).value;
                let rv = &store.get(self.running_var).value;
                let new_mean: Vec<T> = rm.data().iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect();
                let new_var: Vec<T> = rv
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| keep * r + m * b * unbias)
                    .collect();
                tape.record_stat_update(self.running_mean, Tensor::new(vec![self.channels], new_mean)?);
                tape.record_stat_update(self.running_var, Tensor::new(vec![self.channels], new_var)?);
                Ok(y)
            }
            Mode::Eval => F::batch_norm_eval(
                x,
                gamma,
                beta,
                &store.get(self.running_mean).value,
                &store.get(self.running_var).value,
                self.eps,
            ),
        }
    }
}

/// DWS-conv → ReLU → BatchNorm, the repeated encoder/decoder unit.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: DwsConv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: DwsConv::new(store, init, &format!("{name}.dws"), in_channels, out_channels, kernel)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let y = ops::relu(self.conv.forward(store, x)?);
        self.bn.forward(store, y, mode)
    }
}

/// 2×2 stride-2 transposed convolution (exact ×2 upsampling), no bias.
#[derive(Debug, Clone)]
pub struct TransposedConv {
    pub kernel: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl TransposedConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let k = init.kaiming_uniform(vec![in_channels, out_channels, 2, 2], in_channels);
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), k, ParamKind::Trainable)?,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        F::conv_transpose2x2(x, x.tape().param(store, self.kernel))
    }
}

/// Dense projection over the last axis: `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let w = init.fan_in_uniform(vec![in_features, out_features], in_features);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_features]), ParamKind::Trainable)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let y = ops::matmul(x, tape.param(store, self.weight))?;
        ops::add_broadcast(y, tape.param(store, self.bias))
    }

    pub fn num_params(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![features]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![features]), ParamKind::Trainable)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        ops::layer_norm(x, tape.param(store, self.gamma), tape.param(store, self.beta), self.eps)
    }
}

/// 1×1 convolution with bias, used for the prediction head.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let w = init.kaiming_uniform(vec![out_channels, in_channels, 1, 1], in_channels);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), ParamKind::Trainable)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        F::pointwise_conv2d(x, tape.param(store, self.weight), tape.param(store, self.bias))
    }
}
