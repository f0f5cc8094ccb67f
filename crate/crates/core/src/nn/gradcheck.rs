use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{softmax_xent, DropoutMask};
use super::model::{ForwardCache, ModelConfig, ModelParams, Pass};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Model and probe settings for a central-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    /// Central-difference half step.
    pub step: f64,
    /// Use the fourth-order stencil `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`
    /// instead of `(f(h) - f(-h)) / 2h`.
    pub fourth_order: bool,
}

impl GradCheckConfig {
    /// Full topology (4 conv blocks) on a 16x16 input with narrow layers.
    pub fn tiny() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                input_rows: 16,
                input_cols: 16,
                conv_layers: 4,
                conv_channels: 8,
                hidden: 32,
                ..Default::default()
            },
            batch: 4,
            step: 1e-3,
            fourth_order: true,
        }
    }

    /// The dense head alone over a flattened 8x8 input.
    pub fn dense_only() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                input_rows: 8,
                input_cols: 8,
                conv_layers: 0,
                hidden: 16,
                ..Default::default()
            },
            batch: 4,
            step: 1e-3,
            fourth_order: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Tensor name and flat index where the maximum occurred.
    pub worst: String,
    pub checked: usize,
    /// Probes skipped because the perturbation crossed a ReLU or pooling kink,
    /// where a central difference does not estimate the derivative.
    pub kinks: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares backprop gradients of the mean cross-entropy against central
/// differences for every trainable value. Batch-norm runs on batch statistics
/// and dropout uses one fixed mask for all evaluations.
pub fn grad_check<T: Scalar>(config: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<T>::init(config.model.clone(), &mut rng)?;
    let m = &config.model;
    let n = config.batch * m.input_rows * m.input_cols;
    let input = Tensor::from_vec(
        &[config.batch, 1, m.input_rows, m.input_cols],
        (0..n).map(|_| T::lit(rng.random::<f64>())).collect(),
    )?;
    let labels: Vec<usize> = (0..config.batch)
        .map(|_| rng.random_range(0..m.classes))
        .collect();
    let mask = DropoutMask::<T>::sample(config.batch * m.hidden, m.dropout, &mut rng)?;

    let loss_at = |p: &ModelParams<T>| -> Result<(f64, ForwardCache<T>)> {
        let (logits, cache) = p.forward(&input, Pass::TrainWithMask(&mask))?;
        let loss = softmax_xent(&logits, &labels)?.loss.as_f64();
        Ok((loss, cache.expect("train pass yields a cache")))
    };

    let (logits, cache) = params.forward(&input, Pass::TrainWithMask(&mask))?;
    let cache = cache.expect("train pass yields a cache");
    let xent = softmax_xent(&logits, &labels)?;
    let grads = params.backward(&cache, &xent.grad_logits)?;

    let names = params.trainable_names();
    let offsets: &[f64] = if config.fourth_order {
        &[1.0, -1.0, 2.0, -2.0]
    } else {
        &[1.0, -1.0]
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
    };
    for (ti, grad) in grads.tensors.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = params.trainable()[ti].data()[j];
            let mut numeric = None;
            // shrink the step when a probe crosses a kink
            for shrink in [1.0, 0.1, 0.01] {
                let h = T::lit(config.step * shrink);
                let mut losses = Vec::with_capacity(offsets.len());
                let mut kink = false;
                for &o in offsets {
                    params.trainable_mut()[ti].data_mut()[j] = orig + T::lit(o) * h;
                    let (loss, probe) = loss_at(&params)?;
                    kink |= !cache.same_branches(&probe);
                    losses.push(loss);
                }
                params.trainable_mut()[ti].data_mut()[j] = orig;
                if !kink {
                    // divide by the step actually taken after rounding
                    let taken = ((orig + h) - (orig - h)).as_f64() / 2.0;
                    numeric = Some(if config.fourth_order {
                        (8.0 * (losses[0] - losses[1]) - (losses[2] - losses[3])) / (12.0 * taken)
                    } else {
                        (losses[0] - losses[1]) / (2.0 * taken)
                    });
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.kinks += 1;
                continue;
            };
            let err = rel_error(grad.data()[j].as_f64(), numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{j}]", names[ti]);
            }
        }
    }
    Ok(report)
}
