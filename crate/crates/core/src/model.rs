//! The encoder/decoder network.
//!
//! Encoder block: conv → batch-norm → ReLU → 2×2 max-pool.
//! Decoder block: conv → batch-norm → ReLU → ×2 nearest upsample.
//! Head: conv to one channel → sigmoid.
//!
//! With channels `[16, 32, 64]` the decoder mirrors the encoder as
//! `64 → 64 → 32 → 16`, and the head maps 16 channels back to one.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, sigmoid, upsample_nearest, upsample_nearest_backward, BatchNormCache, BatchNormState, ConvSpec,
    Mode, PoolIndices, Tensor,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width) of the network's input and output.
    pub input_size: (usize, usize),
    /// Output channels of each encoder block.
    pub channels: Vec<usize>,
    /// Square, odd kernel size used by every convolution.
    pub kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (512, 512),
            channels: vec![16, 32, 64],
            kernel: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            input_size: (size, size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "channels must be a nonempty list of positive counts, got {:?}",
                self.channels
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel must be odd for same-size padding, got {}",
                self.kernel
            )));
        }
        let factor = 1usize
            .checked_shl(self.channels.len() as u32)
            .ok_or_else(|| Error::InvalidConfig("too many blocks".into()))?;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {h}x{w} must be divisible by 2^{} = {factor}",
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        let f = 1 << self.channels.len();
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    /// Whether two configs describe the same architecture (seed ignored).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.input_size == other.input_size && self.channels == other.channels && self.kernel == other.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn he_uniform(spec: ConvSpec, rng: &mut rng::Rng) -> Self {
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-bound..bound));
        Self {
            spec,
            weight,
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub bn: BatchNormState,
}

/// Activations saved by a training forward pass.
pub struct Tape {
    encoder: Vec<BlockTape>,
    decoder: Vec<BlockTape>,
    head_input: Tensor,
}

struct BlockTape {
    input: Tensor,
    bn: BatchNormCache,
    pre_relu: Tensor,
    pool: Option<PoolIndices>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    config: ModelConfig,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
}

impl Autoencoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(config.seed);
        let k = config.kernel;
        let mut block = |cin, cout| Block {
            conv: Conv::he_uniform(ConvSpec::same(cin, cout, k), &mut rng),
            bn: BatchNormState::new(cout),
        };

        let mut encoder = Vec::new();
        let mut c = 1;
        for &out in &config.channels {
            encoder.push(block(c, out));
            c = out;
        }
        let mut decoder = Vec::new();
        for &out in config.channels.iter().rev() {
            decoder.push(block(c, out));
            c = out;
        }
        let head = Conv::he_uniform(ConvSpec::same(c, 1, k), &mut rng);
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[Block] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Block] {
        &self.decoder
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, _, _, _) = x.dims4()?;
        let (h, w) = self.config.input_size;
        x.ensure_shape(&[n, 1, h, w])
    }

    /// Runs the network. Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => self.forward_train(batch).map(|(y, _)| y),
            Mode::Infer => self.infer(batch),
        }
    }

    /// Inference pass using running batch-norm statistics. Never mutates the model.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for b in &self.encoder {
            let pre = Self::conv_bn(b, &x)?;
            x = maxpool2d(&relu(&pre), 2, 2)?.0;
        }
        for b in &self.decoder {
            let pre = Self::conv_bn(b, &x)?;
            x = upsample_nearest(&relu(&pre), 2)?;
        }
        let logits = conv2d_forward(&x, &self.head.weight, &self.head.bias, &self.head.spec)?;
        Ok(sigmoid(&logits))
    }

    fn conv_bn(b: &Block, x: &Tensor) -> Result<Tensor> {
        let z = conv2d_forward(x, &b.conv.weight, &b.conv.bias, &b.conv.spec)?;
        let mut st = b.bn.clone();
        Ok(batchnorm_forward(&z, &mut st, Mode::Infer)?.0)
    }

    /// Training pass: batch statistics, running-stat update, and a tape for `backward`.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut enc_tape = Vec::with_capacity(self.encoder.len());
        for b in &mut self.encoder {
            let z = conv2d_forward(&x, &b.conv.weight, &b.conv.bias, &b.conv.spec)?;
            let (pre, bn) = batchnorm_forward(&z, &mut b.bn, Mode::Train)?;
            let (pooled, idx) = maxpool2d(&relu(&pre), 2, 2)?;
            enc_tape.push(BlockTape {
                input: std::mem::replace(&mut x, pooled),
                bn,
                pre_relu: pre,
                pool: Some(idx),
            });
        }
        let mut dec_tape = Vec::with_capacity(self.decoder.len());
        for b in &mut self.decoder {
            let z = conv2d_forward(&x, &b.conv.weight, &b.conv.bias, &b.conv.spec)?;
            let (pre, bn) = batchnorm_forward(&z, &mut b.bn, Mode::Train)?;
            let up = upsample_nearest(&relu(&pre), 2)?;
            dec_tape.push(BlockTape {
                input: std::mem::replace(&mut x, up),
                bn,
                pre_relu: pre,
                pool: None,
            });
        }
        let logits = conv2d_forward(&x, &self.head.weight, &self.head.bias, &self.head.spec)?;
        Ok((
            sigmoid(&logits),
            Tape {
                encoder: enc_tape,
                decoder: dec_tape,
                head_input: x,
            },
        ))
    }

    /// Backpropagates a gradient with respect to the head's logits.
    ///
    /// Returns gradients in the order of [`Autoencoder::trainable_mut`].
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Tensor> = Vec::with_capacity(self.trainable_count());

        let hg = conv2d_backward(grad_logits, &tape.head_input, &self.head.weight, &self.head.spec)?;
        let mut g = hg.grad_input;
        let head_grads = [hg.grad_weight, hg.grad_bias];

        let mut dec_grads = Vec::with_capacity(self.decoder.len());
        for (b, t) in self.decoder.iter().zip(&tape.decoder).rev() {
            let up = upsample_nearest_backward(&g, 2)?;
            let (gi, bg) = Self::block_backward(b, t, up)?;
            g = gi;
            dec_grads.push(bg);
        }
        let mut enc_grads = Vec::with_capacity(self.encoder.len());
        for (b, t) in self.encoder.iter().zip(&tape.encoder).rev() {
            let idx = t.pool.as_ref().expect("encoder tape records pooling");
            let pooled = maxpool2d_backward(&g, idx)?;
            let (gi, bg) = Self::block_backward(b, t, pooled)?;
            g = gi;
            enc_grads.push(bg);
        }

        for bg in enc_grads.into_iter().rev().chain(dec_grads.into_iter().rev()) {
            grads.extend(bg);
        }
        grads.extend(head_grads);
        Ok(grads)
    }

    fn block_backward(b: &Block, t: &BlockTape, g: Tensor) -> Result<(Tensor, [Tensor; 4])> {
        let g = relu_backward(&g, &t.pre_relu)?;
        let bn = batchnorm_backward(&g, &t.bn, &b.bn)?;
        let cg = conv2d_backward(&bn.grad_input, &t.input, &b.conv.weight, &b.conv.spec)?;
        Ok((cg.grad_input, [cg.grad_weight, cg.grad_bias, bn.grad_gamma, bn.grad_beta]))
    }

    fn trainable_count(&self) -> usize {
        4 * (self.encoder.len() + self.decoder.len()) + 2
    }

    /// Learnable tensors: per block conv weight, conv bias, bn gamma, bn beta; then the head.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.contains("running_"))
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    /// Every tensor that defines the model, including running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let blocks = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("encoder.{i}"), b))
            .chain(self.decoder.iter().enumerate().map(|(i, b)| (format!("decoder.{i}"), b)));
        for (prefix, b) in blocks {
            out.push((format!("{prefix}.conv.weight"), &b.conv.weight));
            out.push((format!("{prefix}.conv.bias"), &b.conv.bias));
            out.push((format!("{prefix}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &b.bn.beta));
            out.push((format!("{prefix}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &b.bn.running_var));
        }
        out.push(("head.conv.weight".into(), &self.head.weight));
        out.push(("head.conv.bias".into(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let blocks = self
            .encoder
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("encoder.{i}"), b))
            .chain(
                self.decoder
                    .iter_mut()
                    .enumerate()
                    .map(|(i, b)| (format!("decoder.{i}"), b)),
            );
        for (prefix, b) in blocks {
            out.push((format!("{prefix}.conv.weight"), &mut b.conv.weight));
            out.push((format!("{prefix}.conv.bias"), &mut b.conv.bias));
            out.push((format!("{prefix}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &mut b.bn.beta));
            out.push((format!("{prefix}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &mut b.bn.running_var));
        }
        out.push(("head.conv.weight".into(), &mut self.head.weight));
        out.push(("head.conv.bias".into(), &mut self.head.bias));
        out
    }

    /// Copies every named tensor from `source`; shapes must agree exactly.
    pub fn load_tensors<'a>(&mut self, source: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let source: Vec<(&str, &Tensor)> = source.into_iter().collect();
        let mut problems = Vec::new();
        for (name, dst) in self.named_tensors() {
            match source.iter().find(|(n, _)| *n == name) {
                None => problems.push(format!("{name} (missing)")),
                Some((_, src)) if src.shape() != dst.shape() => problems.push(format!(
                    "{name} (expected {:?}, found {:?})",
                    dst.shape(),
                    src.shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::TensorMismatch(problems));
        }
        for (name, dst) in self.named_tensors_mut() {
            let (_, src) = source.iter().find(|(n, _)| *n == name).expect("checked above");
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}
