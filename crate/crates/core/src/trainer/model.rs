use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool, avg_pool_backward, relu_backward, relu_forward, softmax_channels, softsign,
    BatchNorm2d, BnCache, Conv2d,
};
use super::loss::surrogate_width;
use super::params::{Grads, ParamGroup, ParamKind, ParamStore};
use super::{Real, Tensor4, TensorGrid};
use crate::coverage::CoverageGrid;
use crate::error::{Error, Result};
use crate::geometry::NUM_CLASSES;

/// Output activation and loss of the soiling head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Softsign outputs regressed on tile coverage.
    #[default]
    Coverage,
    /// Softmax over classes per tile, trained on dominant labels.
    Classification,
}

impl HeadMode {
    pub fn code(self) -> u32 {
        match self {
            HeadMode::Coverage => 0,
            HeadMode::Classification => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(HeadMode::Coverage),
            1 => Some(HeadMode::Classification),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub vtiles: usize,
    pub htiles: usize,
    /// Output channels of the stride-2 encoder blocks.
    pub encoder_channels: Vec<usize>,
    /// Width of the 3x3 soiling-head blocks.
    pub head_channels: usize,
    pub head_depth: usize,
    pub mode: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 3,
            vtiles: 4,
            htiles: 4,
            encoder_channels: vec![16, 32, 32, 32],
            head_channels: 32,
            head_depth: 2,
            mode: HeadMode::Coverage,
        }
    }
}

impl ModelConfig {
    /// Leading and trailing padding of encoder block `i`. Padding only at the
    /// end everywhere except the last block puts each output cell's
    /// receptive-field centre on the centre of the input block it summarizes
    /// (for even sizes) instead of on its top-left corner.
    pub fn encoder_padding(&self, i: usize) -> (usize, usize) {
        if i + 1 == self.encoder_channels.len() {
            (1, 1)
        } else {
            (0, 1)
        }
    }

    fn checked_feature_size(&self) -> Option<(usize, usize)> {
        let mut hw = (self.height, self.width);
        for i in 0..self.encoder_channels.len() {
            let (pad, pad_end) = self.encoder_padding(i);
            let out = |n: usize| (n + pad + pad_end).checked_sub(3).map(|v| v / 2 + 1);
            hw = (out(hw.0)?, out(hw.1)?);
        }
        Some(hw)
    }

    /// Spatial size of the encoder output; `(0, 0)` when the input is too
    /// small for the encoder.
    pub fn feature_size(&self) -> (usize, usize) {
        self.checked_feature_size().unwrap_or((0, 0))
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty()
            || self.encoder_channels.contains(&0)
            || self.in_channels == 0
            || self.head_channels == 0
            || self.head_depth == 0
        {
            return Err(Error::Argument(
                "model widths and depths must be positive".into(),
            ));
        }
        let (fh, fw) = self.feature_size();
        if fh == 0 || fw == 0 {
            return Err(Error::Argument(format!(
                "input of {}x{} px is too small for {} encoder blocks",
                self.height,
                self.width,
                self.encoder_channels.len()
            )));
        }
        if self.vtiles == 0 || self.htiles == 0 || fh % self.vtiles != 0 || fw % self.htiles != 0 {
            return Err(Error::Argument(format!(
                "encoder output {fh}x{fw} does not divide into {}x{} tiles",
                self.vtiles, self.htiles
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    bn: BnCache<T>,
    /// Post-ReLU output.
    out: Tensor4<T>,
}

impl ConvBlock {
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        training: bool,
    ) -> BlockCache<T> {
        let z = self.conv.forward(store, x);
        let (mut out, bn) = self.bn.forward(store, &z, training);
        relu_forward(&mut out);
        BlockCache { bn, out }
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor4<T>,
        cache: &BlockCache<T>,
        mut d_out: Tensor4<T>,
        mut grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        relu_backward(&cache.out, &mut d_out);
        let dz = self
            .bn
            .backward(store, &cache.bn, &d_out, grads.as_deref_mut(), true)
            .expect("bn input gradient");
        self.conv.backward(store, input, &dz, grads, need_dx)
    }
}

/// Encoder activations of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderPass<T> {
    input: Tensor4<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> EncoderPass<T> {
    pub fn features(&self) -> &Tensor4<T> {
        &self.blocks.last().expect("encoder has blocks").out
    }
}

#[derive(Clone, Debug)]
enum HeadPass<T> {
    Surrogate {
        pooled: Tensor4<T>,
    },
    Soiling {
        blocks: Vec<BlockCache<T>>,
        pooled: Tensor4<T>,
    },
}

/// Everything a backward pass needs. `logits` is the head output before the
/// final activation; `output` after it.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    encoder: Option<EncoderPass<T>>,
    features: Tensor4<T>,
    head: HeadPass<T>,
    pub logits: Tensor4<T>,
    pub output: Tensor4<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn is_surrogate(&self) -> bool {
        matches!(self.head, HeadPass::Surrogate { .. })
    }

    /// Sign pattern of every ReLU in the pass; a change between two passes
    /// means a kink was crossed.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        let mut push = |t: &Tensor4<T>| bits.extend(t.data.iter().map(|v| *v > T::zero()));
        if let Some(enc) = &self.encoder {
            for b in &enc.blocks {
                push(&b.out);
            }
        }
        match &self.head {
            HeadPass::Surrogate { .. } => {}
            HeadPass::Soiling { blocks, .. } => blocks.iter().for_each(|b| push(&b.out)),
        }
        bits
    }

    /// Name of the first stage holding a non-finite activation.
    pub fn first_non_finite(&self) -> Option<String> {
        if let Some(enc) = &self.encoder {
            if !enc.input.is_finite() {
                return Some("input".into());
            }
            for (i, b) in enc.blocks.iter().enumerate() {
                if !b.out.is_finite() {
                    return Some(format!("encoder.{i}"));
                }
            }
        }
        if let HeadPass::Soiling { blocks, .. } = &self.head {
            for (i, b) in blocks.iter().enumerate() {
                if !b.out.is_finite() {
                    return Some(format!("soiling.{i}"));
                }
            }
        }
        if !self.logits.is_finite() {
            return Some("head.out".into());
        }
        None
    }
}

/// Per-tile model output for one image.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    /// Raw softsign values, range (-1, 1).
    Coverage(CoverageGrid),
    /// Softmax distributions over the four classes.
    Probabilities(CoverageGrid),
}

impl HeadOutput {
    pub fn grid(&self) -> &CoverageGrid {
        match self {
            HeadOutput::Coverage(g) | HeadOutput::Probabilities(g) => g,
        }
    }

    pub fn into_grid(self) -> CoverageGrid {
        match self {
            HeadOutput::Coverage(g) | HeadOutput::Probabilities(g) => g,
        }
    }
}

const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Encoder, surrogate head and soiling head over one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    encoder: Vec<ConvBlock>,
    surrogate_out: Conv2d,
    soiling: Vec<ConvBlock>,
    soiling_out: Conv2d,
    trainable: [bool; 3],
}

struct Builder<T> {
    store: ParamStore<T>,
}

impl<T: Real> Builder<T> {
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        (pad, pad_end): (usize, usize),
    ) -> Conv2d {
        let weight = self.store.add(
            format!("{name}.weight"),
            group,
            ParamKind::Weight,
            vec![out_c, in_c, kernel, kernel],
            vec![T::zero(); out_c * in_c * kernel * kernel],
        );
        let bias = self.store.add(
            format!("{name}.bias"),
            group,
            ParamKind::Bias,
            vec![out_c],
            vec![T::zero(); out_c],
        );
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            pad_end,
        }
    }

    fn bn(&mut self, name: &str, group: ParamGroup, c: usize) -> BatchNorm2d {
        let mut add = |suffix: &str, kind, value: f64| {
            self.store.add(
                format!("{name}.{suffix}"),
                group,
                kind,
                vec![c],
                vec![T::of(value); c],
            )
        };
        BatchNorm2d {
            gamma: add("gamma", ParamKind::Gamma, 1.0),
            beta: add("beta", ParamKind::Beta, 0.0),
            running_mean: add("running_mean", ParamKind::RunningMean, 0.0),
            running_var: add("running_var", ParamKind::RunningVar, 1.0),
            channels: c,
        }
    }

    fn block(
        &mut self,
        name: &str,
        group: ParamGroup,
        (in_c, out_c): (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> ConvBlock {
        ConvBlock {
            conv: self.conv(
                &format!("{name}.conv"),
                group,
                in_c,
                out_c,
                3,
                stride,
                padding,
            ),
            bn: self.bn(&format!("{name}.bn"), group, out_c),
        }
    }
}

impl<T: Real> ToyModel<T> {
    /// Builds the layer structure with weights zeroed, biases zero and
    /// batch-norm parameters at identity.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
        };
        let mut encoder = Vec::new();
        let mut in_c = config.in_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let padding = config.encoder_padding(i);
            encoder.push(b.block(
                &format!("encoder.{i}"),
                ParamGroup::Encoder,
                (in_c, c),
                2,
                padding,
            ));
            in_c = c;
        }
        let feat = config.feature_channels();
        let same = (1, 1);
        let surrogate_out = b.conv(
            "surrogate.out",
            ParamGroup::Surrogate,
            feat,
            surrogate_width(config.in_channels),
            1,
            1,
            (0, 0),
        );
        let mut soiling = Vec::new();
        let mut in_c = feat;
        for i in 0..config.head_depth {
            let widths = (in_c, config.head_channels);
            soiling.push(b.block(
                &format!("soiling.{i}"),
                ParamGroup::Soiling,
                widths,
                1,
                same,
            ));
            in_c = config.head_channels;
        }
        let soiling_out = b.conv(
            "soiling.out",
            ParamGroup::Soiling,
            in_c,
            NUM_CLASSES,
            1,
            1,
            (0, 0),
        );
        Ok(Self {
            config,
            store: b.store,
            encoder,
            surrogate_out,
            soiling,
            soiling_out,
            trainable: [true; 3],
        })
    }

    /// He-normal initialization of every convolution weight from a ChaCha8
    /// stream seeded with `seed`. The two output projections start at a
    /// tenth of that scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.store.params {
            if p.kind == ParamKind::Weight {
                let fan_in: usize = p.shape[1..].iter().product();
                let gain = if p.name.ends_with(".out.weight") {
                    OUTPUT_INIT_GAIN
                } else {
                    1.0
                };
                let std = gain * (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                for v in &mut p.data {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(model)
    }

    pub fn mode(&self) -> HeadMode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: HeadMode) {
        self.config.mode = mode;
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group.index()]
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable[group.index()] = trainable;
    }

    /// Sets the soiling output bias so that a zero pre-bias input predicts
    /// `prior`: the inverse softsign of the clamped prior in coverage mode,
    /// its logarithm in classification mode.
    pub fn set_output_prior(&mut self, prior: [f64; NUM_CLASSES]) {
        let mode = self.config.mode;
        let bias = self.store.get_mut(self.soiling_out.bias);
        for (b, p) in bias.iter_mut().zip(prior) {
            let v = match mode {
                HeadMode::Coverage => {
                    let p = p.clamp(0.01, 0.99);
                    p / (1.0 - p)
                }
                HeadMode::Classification => p.max(1e-3).ln(),
            };
            *b = T::of(v);
        }
    }

    pub fn encoder_checksum(&self) -> String {
        self.store.group_checksum(ParamGroup::Encoder)
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            surrogate_out: self.surrogate_out.clone(),
            soiling: self.soiling.clone(),
            soiling_out: self.soiling_out.clone(),
            trainable: self.trainable,
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let c = &self.config;
        if (x.c, x.h, x.w) != (c.in_channels, c.height, c.width) {
            return Err(Error::Dimension(format!(
                "input is {}x{}x{}, model expects {}x{}x{}",
                x.c, x.h, x.w, c.in_channels, c.height, c.width
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor4<T>, training: bool) -> Result<EncoderPass<T>> {
        self.check_input(x)?;
        let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let input = blocks.last().map_or(x, |b| &b.out);
            let cache = block.forward(&self.store, input, training);
            blocks.push(cache);
        }
        Ok(EncoderPass {
            input: x.clone(),
            blocks,
        })
    }

    fn pool_factors(&self, features: &Tensor4<T>) -> (usize, usize) {
        (
            features.h / self.config.vtiles,
            features.w / self.config.htiles,
        )
    }

    fn head_forward(
        &self,
        features: &Tensor4<T>,
        surrogate: bool,
        training: bool,
    ) -> (HeadPass<T>, Tensor4<T>, Tensor4<T>) {
        let (fh, fw) = self.pool_factors(features);
        if surrogate {
            let pooled = avg_pool(features, fh, fw);
            let logits = self.surrogate_out.forward(&self.store, &pooled);
            let output = logits.clone();
            (HeadPass::Surrogate { pooled }, logits, output)
        } else {
            let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(self.soiling.len());
            for block in &self.soiling {
                let input = blocks.last().map_or(features, |b| &b.out);
                let cache = block.forward(&self.store, input, training);
                blocks.push(cache);
            }
            let last = blocks.last().map_or(features, |b| &b.out);
            let pooled = avg_pool(last, fh, fw);
            let logits = self.soiling_out.forward(&self.store, &pooled);
            let output = match self.config.mode {
                HeadMode::Coverage => {
                    let mut o = logits.clone();
                    o.data.iter_mut().for_each(|v| *v = softsign(*v));
                    o
                }
                HeadMode::Classification => softmax_channels(&logits),
            };
            (HeadPass::Soiling { blocks, pooled }, logits, output)
        }
    }

    /// Full forward pass through the encoder and one head.
    pub fn forward(
        &self,
        x: &Tensor4<T>,
        surrogate: bool,
        encoder_training: bool,
        head_training: bool,
    ) -> Result<ForwardPass<T>> {
        let encoder = self.encode(x, encoder_training)?;
        let features = encoder.features().clone();
        let (head, logits, output) = self.head_forward(&features, surrogate, head_training);
        Ok(ForwardPass {
            encoder: Some(encoder),
            features,
            head,
            logits,
            output,
        })
    }

    /// Head-only forward pass on precomputed encoder features.
    pub fn forward_from_features(
        &self,
        features: Tensor4<T>,
        surrogate: bool,
        head_training: bool,
    ) -> Result<ForwardPass<T>> {
        let (fh, fw) = self.config.feature_size();
        if (features.c, features.h, features.w) != (self.config.feature_channels(), fh, fw) {
            return Err(Error::Dimension(
                "feature tensor does not match the encoder".into(),
            ));
        }
        let (head, logits, output) = self.head_forward(&features, surrogate, head_training);
        Ok(ForwardPass {
            encoder: None,
            features,
            head,
            logits,
            output,
        })
    }

    /// Backpropagates `d_logits` (gradient w.r.t. the pre-activation head
    /// output). Only trainable groups receive gradients; the encoder is not
    /// visited when frozen.
    pub fn backward(&self, pass: &ForwardPass<T>, d_logits: &Tensor4<T>) -> Grads<T> {
        let mut grads = Grads::zeros_like(&self.store);
        let train_enc = self.is_trainable(ParamGroup::Encoder) && pass.encoder.is_some();
        let (fh, fw) = self.pool_factors(&pass.features);

        let d_features = match &pass.head {
            HeadPass::Surrogate { pooled } => {
                let g = self.is_trainable(ParamGroup::Surrogate);
                self.surrogate_out
                    .backward(
                        &self.store,
                        pooled,
                        d_logits,
                        g.then_some(&mut grads),
                        train_enc,
                    )
                    .map(|d| avg_pool_backward(&d, fh, fw))
            }
            HeadPass::Soiling { blocks, pooled } => {
                let g = self.is_trainable(ParamGroup::Soiling);
                let d_pooled = self
                    .soiling_out
                    .backward(&self.store, pooled, d_logits, g.then_some(&mut grads), true)
                    .expect("pooled gradient");
                let mut d = Some(avg_pool_backward(&d_pooled, fh, fw));
                for (i, block) in self.soiling.iter().enumerate().rev() {
                    let input = if i == 0 {
                        &pass.features
                    } else {
                        &blocks[i - 1].out
                    };
                    let need_dx = i > 0 || train_enc;
                    d = block.backward(
                        &self.store,
                        input,
                        &blocks[i],
                        d.take().expect("block gradient"),
                        g.then_some(&mut grads),
                        need_dx,
                    );
                }
                d
            }
        };

        if let (true, Some(enc), Some(mut d)) = (train_enc, &pass.encoder, d_features) {
            for (i, block) in self.encoder.iter().enumerate().rev() {
                let input = if i == 0 {
                    &enc.input
                } else {
                    &enc.blocks[i - 1].out
                };
                match block.backward(
                    &self.store,
                    input,
                    &enc.blocks[i],
                    d,
                    Some(&mut grads),
                    i > 0,
                ) {
                    Some(next) => d = next,
                    None => break,
                }
            }
        }
        grads
    }

    /// Folds the batch statistics of training-mode batch norms into the
    /// running statistics of trainable groups.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        if let (true, Some(enc)) = (self.is_trainable(ParamGroup::Encoder), &pass.encoder) {
            for (block, cache) in self.encoder.iter().zip(&enc.blocks) {
                block.bn.update_running(&mut self.store, &cache.bn);
            }
        }
        match &pass.head {
            HeadPass::Soiling { blocks, .. } if self.is_trainable(ParamGroup::Soiling) => {
                for (block, cache) in self.soiling.iter().zip(blocks) {
                    block.bn.update_running(&mut self.store, &cache.bn);
                }
            }
            _ => {}
        }
    }

    /// Encoder features in evaluation mode.
    pub fn features(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.encode(x, false)?.features().clone())
    }

    /// Per-tile soiling output of one image, evaluation mode.
    pub fn predict(&self, image: &TensorGrid<T>) -> Result<HeadOutput> {
        let x = Tensor4::stack(std::slice::from_ref(image))?;
        let pass = self.forward(&x, false, false, false)?;
        Ok(self.head_outputs(&pass.output).remove(0))
    }

    /// Splits a soiling-head output batch into per-image grids.
    pub fn head_outputs(&self, output: &Tensor4<T>) -> Vec<HeadOutput> {
        let (vt, ht) = (self.config.vtiles, self.config.htiles);
        (0..output.n)
            .map(|n| {
                let values = (0..vt * ht)
                    .map(|t| std::array::from_fn(|c| output.at(n, c, t / ht, t % ht).as_f64()))
                    .collect();
                let grid = CoverageGrid {
                    vtiles: vt,
                    htiles: ht,
                    values,
                };
                match self.config.mode {
                    HeadMode::Coverage => HeadOutput::Coverage(grid),
                    HeadMode::Classification => HeadOutput::Probabilities(grid),
                }
            })
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn soiling_out_bias(&self) -> usize {
        self.soiling_out.bias
    }

    #[cfg(test)]
    pub(crate) fn soiling_out_weight(&self) -> usize {
        self.soiling_out.weight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, seed: u64) -> Tensor4<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor4::zeros(n, 3, 64, 64);
        x.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
        x
    }

    #[test]
    fn default_architecture_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_size(), (4, 4));
        let model = ToyModel::<f64>::new(cfg, 1).unwrap();
        let pass = model.forward(&input(2, 0), false, true, true).unwrap();
        assert_eq!(
            (pass.output.n, pass.output.c, pass.output.h, pass.output.w),
            (2, 4, 4, 4)
        );
        let sur = model.forward(&input(2, 0), true, true, true).unwrap();
        assert_eq!((sur.output.c, sur.output.h), (surrogate_width(3), 4));
        let names: Vec<&str> = model.store.params.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"encoder.3.bn.running_var"));
        assert!(names.contains(&"soiling.out.bias"));
    }

    #[test]
    fn coarser_tiling_pools_features() {
        let cfg = ModelConfig {
            vtiles: 2,
            htiles: 2,
            ..ModelConfig::default()
        };
        let model = ToyModel::<f64>::new(cfg, 1).unwrap();
        let out = model.predict(&input(1, 3).sample(0)).unwrap();
        assert_eq!(out.grid().num_tiles(), 4);
    }

    #[test]
    fn invalid_tiling_is_rejected() {
        let cfg = ModelConfig {
            vtiles: 3,
            ..ModelConfig::default()
        };
        assert!(ToyModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = ToyModel::<f64>::new(ModelConfig::default(), 0).unwrap();
        let x = Tensor4::zeros(1, 3, 32, 32);
        assert!(matches!(
            model.forward(&x, false, false, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_head_outputs_softsign_of_bias() {
        let mut model = ToyModel::<f64>::new(ModelConfig::default(), 4).unwrap();
        let w = model.soiling_out_weight();
        model.store.get_mut(w).fill(0.0);
        let out = model.predict(&input(1, 1).sample(0)).unwrap();
        assert!(out.grid().values.iter().flatten().all(|&v| v == 0.0));

        let b = model.soiling_out_bias();
        model
            .store
            .get_mut(b)
            .copy_from_slice(&[1.0, -3.0, 0.0, 0.25]);
        let out = model.predict(&input(1, 1).sample(0)).unwrap();
        for tile in &out.grid().values {
            assert_eq!(*tile, [0.5, -0.75, 0.0, 0.2]);
        }
    }

    #[test]
    fn classification_outputs_are_distributions() {
        let mut cfg = ModelConfig::default();
        cfg.mode = HeadMode::Classification;
        let model = ToyModel::<f64>::new(cfg, 8).unwrap();
        for seed in 0..3 {
            let mut x = input(1, seed);
            x.data.iter_mut().for_each(|v| *v = (*v - 0.5) * 1e3);
            let out = model.predict(&x.sample(0)).unwrap();
            for t in &out.grid().values {
                assert!(t.iter().all(|&p| p >= 0.0));
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = ToyModel::<f32>::new(ModelConfig::default(), 77).unwrap();
        let b = ToyModel::<f32>::new(ModelConfig::default(), 77).unwrap();
        let x = input(1, 5).cast::<f32>().sample(0);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn feature_path_matches_full_forward() {
        let model = ToyModel::<f64>::new(ModelConfig::default(), 2).unwrap();
        let x = input(2, 9);
        let full = model.forward(&x, false, false, true).unwrap();
        let feats = model.features(&x).unwrap();
        let head = model.forward_from_features(feats, false, true).unwrap();
        assert_eq!(full.output, head.output);
    }
}
