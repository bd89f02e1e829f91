use crate::convlstm::BiConvLstm;
use crate::error::{Error, Result};
use crate::nn::functional as F;
use crate::nn::{BatchNorm, Conv1x1, ConvBlock, Mode, TransposedConv};
use crate::params::{Init, ParamStore};
use crate::swin::SwinBlockPair;
use crate::tensor::{ops, Real, Tape, Tensor, Var};

use super::TeslNetConfig;

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub swin: SwinBlockPair,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: TransposedConv,
    pub up_bn: BatchNorm,
    pub fuse: BiConvLstm,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
}

/// Layer handles of the network. Parameters live in a separate store so the
/// same layout can be evaluated against perturbed copies.
#[derive(Debug, Clone)]
pub struct TeslLayers {
    pub enc1: EncoderStage,
    pub enc2: EncoderStage,
    pub dec1: DecoderStage,
    pub dec2: DecoderStage,
    pub head: Conv1x1,
}

/// Intermediate maps of one forward pass.
pub struct Activations<'t, T: Real> {
    pub c2: Var<'t, T>,
    pub st1: Var<'t, T>,
    pub c4: Var<'t, T>,
    pub st2: Var<'t, T>,
    pub d1: Var<'t, T>,
    pub d2: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub prob: Var<'t, T>,
}

impl EncoderStage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TeslNetConfig,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let k = cfg.dws_kernel;
        Ok(Self {
            conv1: ConvBlock::new(store, init, &format!("{name}.conv1"), cin, cout, k)?,
            conv2: ConvBlock::new(store, init, &format!("{name}.conv2"), cout, cout, k)?,
            swin: SwinBlockPair::new(store, init, &format!("{name}.swin"), &cfg.swin, cout)?,
        })
    }

    /// Returns the pre-pool skip map and the Swin output.
    fn forward<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let a = self.conv1.forward(store, x, mode)?;
        let skip = self.conv2.forward(store, a, mode)?;
        let st = self.swin.forward(store, F::maxpool2x2(skip)?)?;
        Ok((skip, st))
    }
}

impl DecoderStage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &TeslNetConfig,
        cin: usize,
        cout: usize,
        hidden: usize,
    ) -> Result<Self> {
        let k = cfg.dws_kernel;
        Ok(Self {
            up: TransposedConv::new(store, init, &format!("{name}.up"), cin, cout)?,
            up_bn: BatchNorm::new(store, &format!("{name}.up_bn"), cout)?,
            fuse: BiConvLstm::new(store, init, &format!("{name}.fuse"), cout, hidden, cfg.lstm_kernel)?,
            conv1: ConvBlock::new(store, init, &format!("{name}.conv1"), 2 * hidden, cout, k)?,
            conv2: ConvBlock::new(store, init, &format!("{name}.conv2"), cout, cout, k)?,
        })
    }

    fn forward<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        skip: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let up = ops::relu(self.up.forward(store, x)?);
        let up = self.up_bn.forward(store, up, mode)?;
        let fused = self.fuse.forward(store, &[skip, up])?;
        let y = self.conv1.forward(store, fused, mode)?;
        self.conv2.forward(store, y, mode)
    }
}

impl TeslLayers {
    pub fn build<T: Real>(cfg: &TeslNetConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed);
        let init = &mut init;
        let [c1, c2] = cfg.widths;
        let [h1, h2] = cfg.lstm_hidden;
        Ok(Self {
            enc1: EncoderStage::new(store, init, "enc1", cfg, cfg.in_channels, c1)?,
            enc2: EncoderStage::new(store, init, "enc2", cfg, c1, c2)?,
            dec1: DecoderStage::new(store, init, "dec1", cfg, c2, c2, h2)?,
            dec2: DecoderStage::new(store, init, "dec2", cfg, c2, c1, h1)?,
            head: Conv1x1::new(store, init, "head", c1, 1)?,
        })
    }

    pub fn forward_activations<'t, T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Activations<'t, T>> {
        let (c2, st1) = self.enc1.forward(store, x, mode)?;
        let (c4, st2) = self.enc2.forward(store, st1, mode)?;
        let d1 = self.dec1.forward(store, st2, c4, mode)?;
        let d2 = self.dec2.forward(store, d1, c2, mode)?;
        let logits = self.head.forward(store, d2)?;
        let prob = ops::sigmoid(logits);
        Ok(Activations {
            c2,
            st1,
            c4,
            st2,
            d1,
            d2,
            logits,
            prob,
        })
    }

    /// `[N, 3, H, W]` image batch to `[N, 1, H, W]` lesion probabilities.
    pub fn forward<'t, T: Real>(&self, store: &ParamStore<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        Ok(self.forward_activations(store, x, mode)?.prob)
    }
}

/// The segmentation network together with its parameters.
#[derive(Debug, Clone)]
pub struct TeslNet<T: Real> {
    pub config: TeslNetConfig,
    pub layers: TeslLayers,
    pub params: ParamStore<T>,
}

impl<T: Real> TeslNet<T> {
    pub fn build(config: &TeslNetConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let layers = TeslLayers::build(config, &mut params)?;
        Ok(Self {
            config: config.clone(),
            layers,
            params,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && *h == s && *w == s => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "TeslNet::forward",
                lhs: shape.to_vec(),
                rhs: vec![0, self.config.in_channels, s, s],
            }),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        self.layers.forward(&self.params, x, mode)
    }

    /// Gradient-free evaluation-mode forward pass.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let y = self.forward(tape.constant(x.clone()), Mode::Eval)?;
        let out = (*y.value()).clone();
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn cast<U: Real>(&self) -> TeslNet<U> {
        TeslNet {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }
}
