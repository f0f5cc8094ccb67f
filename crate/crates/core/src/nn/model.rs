use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::layers::{
    self, BatchNormCache, BatchNormParams, ConvCache, DropoutMask, Mode, PoolCache,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Network topology. Conv blocks are `conv3x3 -> batch-norm -> ReLU -> maxpool2x2`;
/// the head is `dense -> ReLU -> batch-norm -> dropout -> dense`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    /// Number of conv blocks; 0 gives a dense-only network over the flattened input.
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_rows: 32,
            input_cols: 40,
            conv_layers: 4,
            conv_channels: 16,
            hidden: 128,
            classes: 12,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn for_input(rows: usize, cols: usize) -> Self {
        ModelConfig {
            input_rows: rows,
            input_cols: cols,
            ..Default::default()
        }
    }

    /// Spatial extent after all pooling stages.
    pub fn pooled_extent(&self) -> (usize, usize) {
        (
            self.input_rows >> self.conv_layers,
            self.input_cols >> self.conv_layers,
        )
    }

    /// Width of the flattened feature vector entering the first dense layer.
    pub fn flat_dim(&self) -> usize {
        let (r, c) = self.pooled_extent();
        let ch = if self.conv_layers == 0 { 1 } else { self.conv_channels };
        ch * r * c
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.pooled_extent();
        if r == 0 || c == 0 {
            return Err(Error::config(format!(
                "input {}x{} is too small for {} pooling stages",
                self.input_rows, self.input_cols, self.conv_layers
            )));
        }
        if self.conv_layers > 0 && self.conv_channels == 0 {
            return Err(Error::config("conv_channels must be positive"));
        }
        if self.hidden == 0 || self.classes < 2 {
            return Err(Error::config("hidden width must be positive and classes >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps < 0.0 {
            return Err(Error::config("batch-norm momentum must be in (0, 1] and eps >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNormParams<T>,
}

/// All trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub convs: Vec<ConvBlock<T>>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc_bn: BatchNormParams<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Gradients, one tensor per entry of [`ModelParams::trainable`] in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    relu_out: Tensor<T>,
    pool: PoolCache,
}

/// Saved activations from a training-mode forward pass.
pub struct ForwardCache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    flat: Tensor<T>,
    fc1_relu_out: Tensor<T>,
    fc_bn: BatchNormCache<T>,
    dropout: DropoutMask<T>,
    fc2_input: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dropout_mask(&self) -> &DropoutMask<T> {
        &self.dropout
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// True when both passes took the same piecewise-linear branch everywhere:
    /// identical ReLU on/off patterns and identical pooling winners.
    pub fn same_branches(&self, other: &ForwardCache<T>) -> bool {
        let on = |t: &Tensor<T>| t.data().iter().map(|v| *v > T::zero()).collect::<Vec<_>>();
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.pool.argmax == b.pool.argmax && on(&a.relu_out) == on(&b.relu_out)
            })
            && on(&self.fc1_relu_out) == on(&other.fc1_relu_out)
    }
}

/// How a forward pass treats batch-norm and dropout.
pub enum Pass<'a, T> {
    Eval,
    /// Batch statistics and a freshly sampled dropout mask.
    Train(&'a mut dyn RngCore),
    /// Batch statistics with a caller-supplied dropout mask (finite-difference checks).
    TrainWithMask(&'a DropoutMask<T>),
}

fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape has no zero extent")
}

impl<T: Scalar> ModelParams<T> {
    /// Kaiming-uniform (fan-in) weights, zero biases, unit batch-norm scale.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut in_ch = 1;
        for _ in 0..config.conv_layers {
            let f = config.conv_channels;
            convs.push(ConvBlock {
                weight: kaiming_uniform(&[f, in_ch, 3, 3], in_ch * 9, rng),
                bias: Tensor::zeros(&[f]),
                bn: BatchNormParams::new(f),
            });
            in_ch = f;
        }
        let d = config.flat_dim();
        let fc1_weight = kaiming_uniform(&[d, config.hidden], d, rng);
        let fc2_weight = kaiming_uniform(&[config.hidden, config.classes], config.hidden, rng);
        Ok(ModelParams {
            fc1_bias: Tensor::zeros(&[config.hidden]),
            fc_bn: BatchNormParams::new(config.hidden),
            fc2_bias: Tensor::zeros(&[config.classes]),
            fc1_weight,
            fc2_weight,
            convs,
            config,
        })
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for b in &self.convs {
            v.extend([&b.weight, &b.bias, &b.bn.gamma, &b.bn.beta]);
        }
        v.extend([
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc_bn.gamma,
            &self.fc_bn.beta,
            &self.fc2_weight,
            &self.fc2_bias,
        ]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.convs {
            v.extend([&mut b.weight, &mut b.bias, &mut b.bn.gamma, &mut b.bn.beta]);
        }
        v.extend([
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc_bn.gamma,
            &mut self.fc_bn.beta,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
        v
    }

    /// Human-readable names matching [`Self::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.convs.len() {
            for part in ["weight", "bias", "gamma", "beta"] {
                v.push(format!("conv{i}.{part}"));
            }
        }
        for n in ["fc1.weight", "fc1.bias", "fc_bn.gamma", "fc_bn.beta", "fc2.weight", "fc2.bias"] {
            v.push(n.to_string());
        }
        v
    }

    /// Every stored tensor with its name: trainable tensors in
    /// [`Self::trainable`] order, then each batch-norm's running mean and
    /// variance.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> =
            self.trainable_names().into_iter().zip(self.trainable()).collect();
        for (i, bn) in self.batch_norms().into_iter().enumerate() {
            let name = self.bn_name(i);
            v.push((format!("{name}.running_mean"), &bn.running_mean));
            v.push((format!("{name}.running_var"), &bn.running_var));
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self
            .state()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut tensors: Vec<&mut Tensor<T>> = Vec::with_capacity(names.len());
        let mut stats: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.convs {
            tensors.extend([&mut b.weight, &mut b.bias, &mut b.bn.gamma, &mut b.bn.beta]);
            stats.extend([&mut b.bn.running_mean, &mut b.bn.running_var]);
        }
        tensors.extend([
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc_bn.gamma,
            &mut self.fc_bn.beta,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
        stats.extend([&mut self.fc_bn.running_mean, &mut self.fc_bn.running_var]);
        tensors.append(&mut stats);
        names.into_iter().zip(tensors).collect()
    }

    fn bn_name(&self, i: usize) -> String {
        if i < self.convs.len() {
            format!("conv{i}")
        } else {
            "fc_bn".to_string()
        }
    }

    /// Running statistics of every batch-norm layer, conv blocks first.
    pub fn batch_norms(&self) -> Vec<&BatchNormParams<T>> {
        let mut v: Vec<_> = self.convs.iter().map(|b| &b.bn).collect();
        v.push(&self.fc_bn);
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams<T>> {
        let mut v: Vec<_> = self.convs.iter_mut().map(|b| &mut b.bn).collect();
        v.push(&mut self.fc_bn);
        v
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let bn = |p: &BatchNormParams<T>| BatchNormParams {
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
            running_mean: p.running_mean.cast(),
            running_var: p.running_var.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|b| ConvBlock {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    bn: bn(&b.bn),
                })
                .collect(),
            fc1_weight: self.fc1_weight.cast(),
            fc1_bias: self.fc1_bias.cast(),
            fc_bn: bn(&self.fc_bn),
            fc2_weight: self.fc2_weight.cast(),
            fc2_bias: self.fc2_bias.cast(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match *input.shape() {
            [b, 1, h, w] if h == c.input_rows && w == c.input_cols => Ok(b),
            ref s => Err(Error::config(format!(
                "model expects [B, 1, {}, {}] input, got {s:?}",
                c.input_rows, c.input_cols
            ))),
        }
    }

    /// Logits `[B, classes]`; a cache is returned for the training passes only.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        pass: Pass<'_, T>,
    ) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
        let batch = self.check_input(input)?;
        let mode = match pass {
            Pass::Eval => Mode::Eval,
            _ => Mode::Train,
        };
        let eps = T::lit(self.config.bn_eps);

        let mut x = input.clone();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for block in &self.convs {
            let conv_out = layers::conv2d_forward(&x, &block.weight, &block.bias)?;
            let (mut h, bn_cache) = layers::batchnorm_forward(&conv_out, &block.bn, mode, eps)?;
            drop(conv_out);
            layers::relu_inplace(&mut h);
            let (pooled, pool) = layers::maxpool2x2_forward(&h)?;
            if let Some(bn) = bn_cache {
                blocks.push(BlockCache {
                    conv: ConvCache { input: x },
                    bn,
                    relu_out: h,
                    pool,
                });
            }
            x = pooled;
        }

        let d = self.config.flat_dim();
        let flat = x.reshape(&[batch, d])?;
        let mut h = layers::dense_forward(&flat, &self.fc1_weight, &self.fc1_bias)?;
        layers::relu_inplace(&mut h);
        let (normed, fc_bn) = layers::batchnorm_forward(&h, &self.fc_bn, mode, eps)?;
        let mask = match pass {
            Pass::Eval => None,
            Pass::Train(rng) => Some(DropoutMask::sample(normed.len(), self.config.dropout, rng)?),
            Pass::TrainWithMask(m) => Some(m.clone()),
        };
        let dropped = match &mask {
            Some(m) => layers::dropout_apply(&normed, m)?,
            None => normed,
        };
        let logits = layers::dense_forward(&dropped, &self.fc2_weight, &self.fc2_bias)?;

        let cache = match (fc_bn, mask) {
            (Some(fc_bn), Some(dropout)) => Some(ForwardCache {
                batch,
                blocks,
                flat,
                fc1_relu_out: h,
                fc_bn,
                dropout,
                fc2_input: dropped,
            }),
            _ => None,
        };
        Ok((logits, cache))
    }

    /// Full-network gradient of a loss whose gradient w.r.t. the logits is `grad_logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_logits.shape() != [cache.batch, self.config.classes] {
            return Err(Error::Contract(format!(
                "grad_logits {:?} does not match cached batch of {}",
                grad_logits.shape(),
                cache.batch
            )));
        }
        if cache.blocks.len() != self.convs.len() {
            return Err(Error::Contract("cache was produced by a different topology".into()));
        }
        let fc2 = layers::dense_backward(&cache.fc2_input, &self.fc2_weight, grad_logits)?;
        let g = layers::dropout_apply(&fc2.input, &cache.dropout)?;
        let bn = layers::batchnorm_backward(&cache.fc_bn, &self.fc_bn, &g)?;
        let mut g = bn.input;
        layers::relu_backward_inplace(&cache.fc1_relu_out, &mut g)?;
        let fc1 = layers::dense_backward(&cache.flat, &self.fc1_weight, &g)?;

        let mut tail = vec![
            fc1.weight, fc1.bias, bn.gamma, bn.beta, fc2.weight, fc2.bias,
        ];

        let mut block_grads = Vec::with_capacity(self.convs.len() * 4);
        if let Some(last) = cache.blocks.last() {
            let pooled_shape: Vec<usize> = {
                let s = &last.pool.input_shape;
                vec![s[0], s[1], s[2] / 2, s[3] / 2]
            };
            let mut g = fc1.input.reshape(&pooled_shape)?;
            for (i, (block, bc)) in self.convs.iter().zip(&cache.blocks).enumerate().rev() {
                let mut gr = layers::maxpool2x2_backward(&bc.pool, &g)?;
                layers::relu_backward_inplace(&bc.relu_out, &mut gr)?;
                let bn = layers::batchnorm_backward(&bc.bn, &block.bn, &gr)?;
                let conv = layers::conv2d_backward(&bc.conv, &block.weight, &bn.input, i > 0)?;
                block_grads.push([conv.weight, conv.bias, bn.gamma, bn.beta]);
                if let Some(gi) = conv.input {
                    g = gi;
                }
            }
        }
        let mut tensors: Vec<Tensor<T>> = block_grads.into_iter().rev().flatten().collect();
        tensors.append(&mut tail);
        Ok(Gradients { tensors })
    }

    /// Moves every batch-norm running statistic toward the batch statistics in `cache`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let momentum = T::lit(self.config.bn_momentum);
        for (block, bc) in self.convs.iter_mut().zip(&cache.blocks) {
            block.bn.update_running(&bc.bn, momentum);
        }
        self.fc_bn.update_running(&cache.fc_bn, momentum);
    }

    /// Eval-mode class predictions; ties resolve to the lowest class index.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(input, Pass::Eval)?;
        Ok(predict_from_logits(&logits))
    }
}

pub fn predict_from_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(1);
    logits.data().chunks(k).map(layers::argmax).collect()
}
