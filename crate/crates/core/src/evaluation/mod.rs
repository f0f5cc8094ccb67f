//! Test-time missing channels: draw which channels are lost for each test
//! frame, repair the frame (zero fill or training-mean imputation) and score
//! the four methods.

mod report;

pub use report::{emit_report, load_report, AggregateRow, EvalReport, EvalRow, ReportMeta, REPORT_FILES};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{fill_channels, AblationMask};
use crate::error::{Error, Result};
use crate::pipeline::{predict_set, FrameSet, TrainedModel, Variant};
use crate::preprocess::{ChannelLayout, CompositeFrame, N_CHANNELS};

/// How many channels each test frame loses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum MissingSpec {
    /// Exactly `k` channels.
    Fixed(usize),
    /// `k` uniform on `1..=K`.
    UpTo(usize),
}

impl MissingSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MissingSpec::Fixed(k) if k <= N_CHANNELS => Ok(()),
            MissingSpec::UpTo(k) if (1..=N_CHANNELS).contains(&k) => Ok(()),
            s => Err(Error::config(format!("invalid missing-channel regime {s}"))),
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            MissingSpec::Fixed(_) => "fixed",
            MissingSpec::UpTo(_) => "up-to",
        }
    }

    pub fn value(&self) -> usize {
        match *self {
            MissingSpec::Fixed(k) | MissingSpec::UpTo(k) => k,
        }
    }

    /// Stable per-regime key for RNG stream derivation.
    pub fn key(&self) -> u64 {
        match *self {
            MissingSpec::Fixed(k) => k as u64,
            MissingSpec::UpTo(k) => 0x100 + k as u64,
        }
    }
}

impl std::fmt::Display for MissingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.mode_name(), self.value())
    }
}

impl std::str::FromStr for MissingSpec {
    type Err = Error;

    /// `fixed:4` or `up-to:8`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("regime must look like fixed:K or up-to:K, got {s:?}"));
        let (mode, value) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = value.trim().parse().map_err(|_| bad())?;
        let spec = match mode.trim() {
            "fixed" => MissingSpec::Fixed(k),
            "up-to" => MissingSpec::UpTo(k),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Standard model, missing channels zero-filled.
    Baseline,
    /// Standard model, missing channels replaced by training means.
    Imputation,
    /// Ablation-trained model, missing channels zero-filled.
    Proposed,
    /// Standard model, nothing missing.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Imputation, Method::Proposed, Method::Oracle];

    pub fn variant(&self) -> Variant {
        match self {
            Method::Proposed => Variant::Robust,
            _ => Variant::Standard,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Draws the missing channels of one test frame.
pub fn sample_missing_mask<R: Rng + ?Sized>(
    spec: MissingSpec,
    n_channels: usize,
    rng: &mut R,
) -> Result<AblationMask> {
    spec.validate()?;
    let k = match spec {
        MissingSpec::Fixed(k) => k,
        MissingSpec::UpTo(k) => rng.random_range(1..=k),
    };
    AblationMask::sample_exact(k, n_channels, rng)
}

/// One mask per test frame, in frame order.
pub fn draw_masks<R: Rng + ?Sized>(spec: MissingSpec, n_frames: usize, rng: &mut R) -> Result<Vec<AblationMask>> {
    (0..n_frames).map(|_| sample_missing_mask(spec, N_CHANNELS, rng)).collect()
}

/// Per-column mean of the normalized training frames (over frames and rows),
/// plus the scalar mean of each channel's columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeans {
    pub per_column: Vec<f32>,
    pub per_channel: Vec<f32>,
}

impl ChannelMeans {
    pub fn from_frames(frames: &FrameSet, layout: &ChannelLayout) -> Result<Self> {
        if frames.cols != layout.width() {
            return Err(Error::config(format!(
                "frames are {} wide, layout is {}",
                frames.cols,
                layout.width()
            )));
        }
        if frames.is_empty() {
            return Err(Error::Degenerate("no frames to average".into()));
        }
        let mut sums = vec![0.0f64; frames.cols];
        for row in frames.data.chunks(frames.cols) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let n = (frames.len() * frames.rows) as f64;
        let per_column: Vec<f32> = sums.iter().map(|s| (s / n) as f32).collect();
        let per_channel = (0..layout.n_channels())
            .map(|ch| {
                let r = layout.columns(ch)?;
                let w = r.len() as f64;
                Ok((r.map(|c| sums[c]).sum::<f64>() / (n * w)) as f32)
            })
            .collect::<Result<_>>()?;
        Ok(ChannelMeans {
            per_column,
            per_channel,
        })
    }
}

/// Which training mean replaces a missing value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMode {
    /// The mean of that column.
    #[default]
    PerColumn,
    /// One mean shared by all columns of the channel.
    PerChannel,
}

impl std::str::FromStr for ImputeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-column" => Ok(ImputeMode::PerColumn),
            "per-channel" => Ok(ImputeMode::PerChannel),
            _ => Err(Error::config(format!("impute mode must be per-column or per-channel, got {s:?}"))),
        }
    }
}

pub fn zero_fill(frame: &CompositeFrame, mask: &AblationMask, layout: &ChannelLayout) -> Result<CompositeFrame> {
    let mut out = frame.clone();
    crate::ablation::zero_channels(&mut out.grid, mask, layout)?;
    Ok(out)
}

fn check_means(means: &ChannelMeans, layout: &ChannelLayout) -> Result<()> {
    if means.per_column.len() != layout.width() || means.per_channel.len() != layout.n_channels() {
        return Err(Error::config(format!(
            "channel means cover {} columns / {} channels, layout has {} / {}",
            means.per_column.len(),
            means.per_channel.len(),
            layout.width(),
            layout.n_channels()
        )));
    }
    Ok(())
}

fn impute_plane(
    plane: &mut [f32],
    mask: &AblationMask,
    means: &ChannelMeans,
    layout: &ChannelLayout,
    mode: ImputeMode,
) -> Result<()> {
    check_means(means, layout)?;
    match mode {
        ImputeMode::PerColumn => fill_channels(plane, layout.width(), mask, layout, |c| means.per_column[c]),
        ImputeMode::PerChannel => fill_channels(plane, layout.width(), mask, layout, |c| {
            means.per_channel[layout.channel_of_column(c).expect("column inside layout")]
        }),
    }
}

pub fn impute_channel_mean(
    frame: &CompositeFrame,
    mask: &AblationMask,
    means: &ChannelMeans,
    layout: &ChannelLayout,
    mode: ImputeMode,
) -> Result<CompositeFrame> {
    let mut out = frame.clone();
    impute_plane(out.grid.data_mut(), mask, means, layout, mode)?;
    Ok(out)
}

/// `100 * correct / total`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Number of classifiers needed to cover every subset of at most `k` missing
/// channels out of `n`: the sum of C(n, j) for j in 0..=k.
pub fn classifier_count(n: u32, k: u32) -> Result<u128> {
    if k > n {
        return Err(Error::input(format!("cannot drop {k} of {n} channels")));
    }
    if n > 127 {
        return Err(Error::input(format!("n = {n} overflows a 128-bit count")));
    }
    // C(n, j+1) = C(n, j) * (n - j) / (j + 1), exact at every step
    let mut c: u128 = 1;
    let mut total: u128 = 1;
    for j in 0..k {
        c = c * (n - j) as u128 / (j + 1) as u128;
        total += c;
    }
    Ok(total)
}

/// Scores one method on a test set with the given per-frame masks (ignored
/// by the oracle).
pub fn evaluate_with_masks(
    model: &TrainedModel,
    test: &FrameSet,
    layout: &ChannelLayout,
    method: Method,
    masks: &[AblationMask],
    impute: ImputeMode,
) -> Result<f64> {
    if model.variant != method.variant() {
        return Err(Error::config(format!(
            "{method} needs the {} model, got {}",
            method.variant(),
            model.variant
        )));
    }
    let c = &model.params.config;
    if (test.rows, test.cols) != (c.input_rows, c.input_cols) {
        return Err(Error::config(format!(
            "model expects {}x{} frames, test set has {}x{}",
            c.input_rows, c.input_cols, test.rows, test.cols
        )));
    }
    if method != Method::Oracle && masks.len() != test.len() {
        return Err(Error::input(format!("{} masks for {} test frames", masks.len(), test.len())));
    }
    let repaired = if method == Method::Oracle {
        std::borrow::Cow::Borrowed(test)
    } else {
        let mut set = test.clone();
        let n = set.frame_len();
        for (plane, mask) in set.data.chunks_mut(n).zip(masks) {
            match method {
                Method::Imputation => impute_plane(plane, mask, &model.means, layout, impute)?,
                _ => fill_channels(plane, test.cols, mask, layout, |_| 0.0)?,
            }
        }
        std::borrow::Cow::Owned(set)
    };
    accuracy(&predict_set(&model.params, &repaired)?, &test.labels)
}

/// Draws masks for `spec` from `rng`, then scores the method.
pub fn evaluate_method<R: Rng + ?Sized>(
    model: &TrainedModel,
    test: &FrameSet,
    layout: &ChannelLayout,
    method: Method,
    spec: MissingSpec,
    impute: ImputeMode,
    rng: &mut R,
) -> Result<f64> {
    let masks = draw_masks(spec, test.len(), rng)?;
    evaluate_with_masks(model, test, layout, method, &masks, impute)
}
