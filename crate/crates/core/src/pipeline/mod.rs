//! Session-disjoint cross-validation, fold preparation and the two training
//! loops (plain, and with random channel ablation).

mod experiment;
mod persist;

pub use experiment::{evaluate_models, run_experiment, train_all, ExperimentConfig};
pub use persist::{load_model, model_stem, save_model, MODEL_MAGIC};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablate_batch, AblationConfig, Granularity};
use crate::error::{Error, Result};
use crate::evaluation::ChannelMeans;
use crate::nn::layers::softmax_xent;
use crate::nn::{AdamConfig, AdamState, ModelConfig, ModelParams, Pass, Tensor};
use crate::preprocess::{
    build_composite, compute_norm_stats, ChannelLayout, Dataset, Geometry, NormStats, Record,
    N_CHANNELS, N_CLASSES,
};
use crate::rng::{stream, Purpose};

/// Sessions held out by one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub train: Vec<u16>,
    pub test: Vec<u16>,
}

/// Splits sorted session ids into `folds` contiguous blocks; when the count
/// does not divide evenly the first blocks get one extra session.
pub fn session_kfold(sessions: &[u16], folds: usize) -> Result<Vec<FoldSpec>> {
    let mut ids = sessions.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > ids.len() {
        return Err(Error::config(format!(
            "{folds} folds requested but only {} sessions",
            ids.len()
        )));
    }
    let (base, extra) = (ids.len() / folds, ids.len() % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for index in 0..folds {
        let len = base + usize::from(index < extra);
        let test = ids[start..start + len].to_vec();
        let train = ids[..start].iter().chain(&ids[start + len..]).copied().collect();
        out.push(FoldSpec { index, train, test });
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound K on channels ablated per draw.
    pub max_ablate: usize,
    pub granularity: Granularity,
    pub seed: u64,
    pub hidden: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    /// When set, must equal the dataset's stored geometry.
    pub geometry: Option<Geometry>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            epochs: 10,
            max_ablate: 8,
            granularity: Granularity::PerSample,
            seed: 0,
            hidden: 128,
            conv_channels: 16,
            dropout: 0.5,
            geometry: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size must be >= 2 for batch-norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.max_ablate > N_CHANNELS {
            return Err(Error::config(format!(
                "max ablated channels must be <= {N_CHANNELS}, got {}",
                self.max_ablate
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, rows: usize, cols: usize) -> ModelConfig {
        ModelConfig {
            input_rows: rows,
            input_cols: cols,
            conv_channels: self.conv_channels,
            hidden: self.hidden,
            classes: N_CLASSES,
            dropout: self.dropout,
            ..Default::default()
        }
    }

    fn check_geometry(&self, dataset: &Dataset) -> Result<()> {
        match self.geometry {
            Some(g) if g != dataset.geometry => Err(Error::config(format!(
                "configured geometry {}x{} does not match dataset {}x{}",
                g.us_rows, g.us_cols, dataset.geometry.us_rows, dataset.geometry.us_cols
            ))),
            _ => Ok(()),
        }
    }
}

/// Normalized composite frames stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len()..][..self.frame_len()]
    }

    /// `[B, 1, rows, cols]` batch of the given frames.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Tensor::from_vec(&[indices.len(), 1, self.rows, self.cols], data)
            .expect("batch of at least one frame")
    }

    fn build(records: &[&Record], stats: &NormStats, rows: usize, cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(records.len() * rows * cols);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let c = build_composite(r, stats)?;
            data.extend_from_slice(c.grid.data());
            labels.push(c.label as usize);
        }
        Ok(FrameSet {
            rows,
            cols,
            data,
            labels,
        })
    }
}

/// Everything derived from one fold's split. Statistics and means come from
/// the training sessions alone.
#[derive(Clone, Debug)]
pub struct PreparedFold {
    pub fold: FoldSpec,
    pub stats: NormStats,
    pub means: ChannelMeans,
    pub layout: ChannelLayout,
    pub train: FrameSet,
    pub test: FrameSet,
}

pub fn prepare_fold(dataset: &Dataset, fold: &FoldSpec) -> Result<PreparedFold> {
    let select = |ids: &[u16]| -> Vec<&Record> {
        dataset.records.iter().filter(|r| ids.contains(&r.session)).collect()
    };
    let train = select(&fold.train);
    let test = select(&fold.test);
    if train.is_empty() {
        return Err(Error::config(format!("fold {} has no training frames", fold.index)));
    }
    let stats = compute_norm_stats(train.iter().copied())?;
    let layout = dataset.layout()?;
    let (rows, cols) = (dataset.geometry.composite_rows(), dataset.geometry.composite_cols());
    let train = FrameSet::build(&train, &stats, rows, cols)?;
    let test = FrameSet::build(&test, &stats, rows, cols)?;
    let means = ChannelMeans::from_frames(&train, &layout)?;
    Ok(PreparedFold {
        fold: fold.clone(),
        stats,
        means,
        layout,
        train,
        test,
    })
}

/// Which training loop produced a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    Robust,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Standard => "standard",
            Variant::Robust => "robust",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub variant: Variant,
    pub fold: FoldSpec,
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub stats: NormStats,
    pub means: ChannelMeans,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Eval-mode accuracy (percent) on the unablated training frames.
    pub train_accuracy: f64,
}

/// Eval-mode predictions for every frame of a set.
pub fn predict_set(params: &ModelParams<f32>, set: &FrameSet) -> Result<Vec<usize>> {
    const CHUNK: usize = 100;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(CHUNK) {
        out.extend(params.predict(&set.batch(chunk))?);
    }
    Ok(out)
}

/// Runs the training loop on a prepared fold. `Variant::Robust` ablates every
/// batch with up to `config.max_ablate` channels before the forward pass.
pub fn train_prepared(prepared: &PreparedFold, config: &TrainConfig, variant: Variant) -> Result<TrainedModel> {
    config.validate()?;
    let train = &prepared.train;
    if train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let fold = prepared.fold.index as u64;
    let seed = config.seed;
    let mut init_rng = stream(seed, fold, Purpose::Init);
    let mut shuffle_rng = stream(seed, fold, Purpose::Shuffle);
    let mut ablation_rng = stream(seed, fold, Purpose::Ablation);
    let mut dropout_rng = stream(seed, fold, Purpose::Dropout);

    let mut params = ModelParams::<f32>::init(config.model_config(train.rows, train.cols), &mut init_rng)?;
    let mut adam = AdamState::new(&params.trainable(), AdamConfig::default());
    let ablation = AblationConfig {
        max_ablate: config.max_ablate,
        granularity: config.granularity,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        // a trailing batch of one cannot be batch-normalized and is skipped
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let mut x = train.batch(chunk);
            if variant == Variant::Robust {
                ablate_batch(&mut x, &ablation, &prepared.layout, &mut ablation_rng)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = params.forward(&x, Pass::Train(&mut dropout_rng))?;
            let cache = cache.expect("train pass yields a cache");
            let xent = softmax_xent(&logits, &labels)?;
            let grads = params.backward(&cache, &xent.grad_logits)?;
            params.update_running_stats(&cache);
            adam.step(&mut params.trainable_mut(), &grads.tensors, config.learning_rate)?;
            loss_sum += xent.loss as f64;
            batches += 1;
        }
        let mean = loss_sum / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Degenerate(format!("training loss diverged in epoch {epoch}")));
        }
        debug!("fold {fold} seed {seed} {variant} epoch {epoch}: loss {mean:.4}");
        loss_curve.push(mean);
    }
    let predictions = predict_set(&params, train)?;
    let correct = predictions.iter().zip(&train.labels).filter(|(p, y)| p == y).count();
    let train_accuracy = 100.0 * correct as f64 / train.len() as f64;
    info!(
        "fold {fold} seed {seed} {variant}: final loss {:.4}, train accuracy {train_accuracy:.2}%",
        loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TrainedModel {
        variant,
        fold: prepared.fold.clone(),
        config: config.clone(),
        params,
        stats: prepared.stats,
        means: prepared.means.clone(),
        loss_curve,
        train_accuracy,
    })
}

/// Training with random channel ablation.
pub fn train_robust(dataset: &Dataset, fold: &FoldSpec, config: &TrainConfig) -> Result<TrainedModel> {
    config.check_geometry(dataset)?;
    train_prepared(&prepare_fold(dataset, fold)?, config, Variant::Robust)
}

/// Training on all channels, no ablation.
pub fn train_standard(dataset: &Dataset, fold: &FoldSpec, config: &TrainConfig) -> Result<TrainedModel> {
    config.check_geometry(dataset)?;
    train_prepared(&prepare_fold(dataset, fold)?, config, Variant::Standard)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_sessions_five_folds() {
        let sessions: Vec<u16> = (0..20).collect();
        let folds = session_kfold(&sessions, 5).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<u16> = Vec::new();
        for f in &folds {
            assert_eq!(f.test.len(), 4);
            assert_eq!(f.train.len(), 16);
            assert!(f.test.iter().all(|s| !f.train.contains(s)));
            seen.extend(&f.test);
        }
        seen.sort_unstable();
        assert_eq!(seen, sessions);
        // 1,200 frames per session as in the full-scale protocol
        assert_eq!(folds[0].train.len() * 1_200, 19_200);
        assert_eq!(folds[0].test.len() * 1_200, 4_800);
    }

    #[test]
    fn uneven_and_degenerate_splits() {
        let folds = session_kfold(&[0, 1, 2, 3, 4, 5, 6], 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, [3, 2, 2]);
        let one_each = session_kfold(&[4, 3, 2, 1, 0], 5).unwrap();
        assert!(one_each.iter().enumerate().all(|(i, f)| f.test == [i as u16]));
        assert!(matches!(session_kfold(&[0, 1], 3), Err(Error::Config(_))));
        assert!(session_kfold(&[0, 1], 1).is_err());
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 1, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { max_ablate: 17, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let r: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epoch": 3}"#);
        assert!(r.is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "granularity": "per-sample"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.granularity, Granularity::PerSample);
    }
}
