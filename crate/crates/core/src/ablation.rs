//! Random channel ablation.
//!
//! During robust training each batch (or each sample) gets a random number of
//! channels `k` drawn uniformly from `0..=K`, then `k` distinct channels drawn
//! uniformly, and every column of those channels is set to zero.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::preprocess::{ChannelLayout, CompositeFrame, Grid, N_CHANNELS};

/// Sorted set of ablated (or missing) channel indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationMask {
    indices: Vec<usize>,
}

impl AblationMask {
    pub fn empty() -> Self {
        AblationMask::default()
    }

    pub fn all(n_channels: usize) -> Self {
        AblationMask {
            indices: (0..n_channels).collect(),
        }
    }

    /// Builds a mask from arbitrary indices; duplicates are rejected.
    pub fn new(mut indices: Vec<usize>, n_channels: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input(format!("duplicate channel in mask {indices:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_channels) {
            return Err(Error::input(format!(
                "channel {bad} out of range for {n_channels} channels"
            )));
        }
        Ok(AblationMask { indices })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, channel: usize) -> bool {
        self.indices.binary_search(&channel).is_ok()
    }

    /// Exactly `k` distinct channels, uniform without replacement.
    pub fn sample_exact<R: Rng + ?Sized>(k: usize, n_channels: usize, rng: &mut R) -> Result<Self> {
        if k > n_channels {
            return Err(Error::config(format!(
                "cannot pick {k} of {n_channels} channels"
            )));
        }
        let mut indices = index::sample(rng, n_channels, k).into_vec();
        indices.sort_unstable();
        Ok(AblationMask { indices })
    }
}

/// Draws `k` uniformly from `0..=max_k`, then `k` channels uniformly.
pub fn sample_mask<R: Rng + ?Sized>(max_k: usize, n_channels: usize, rng: &mut R) -> Result<AblationMask> {
    if max_k > n_channels {
        return Err(Error::config(format!(
            "max ablated channels {max_k} exceeds {n_channels} channels"
        )));
    }
    let k = rng.random_range(0..=max_k);
    AblationMask::sample_exact(k, n_channels, rng)
}

/// Sets every column of the masked channels to `value` in a row-major
/// `rows x cols` plane.
pub(crate) fn fill_channels(
    plane: &mut [f32],
    cols: usize,
    mask: &AblationMask,
    layout: &ChannelLayout,
    mut value: impl FnMut(usize) -> f32,
) -> Result<()> {
    if cols != layout.width() {
        return Err(Error::config(format!(
            "frame width {cols} does not match channel layout width {}",
            layout.width()
        )));
    }
    let ranges = mask
        .indices()
        .iter()
        .map(|&ch| layout.columns(ch))
        .collect::<Result<Vec<_>>>()?;
    for row in plane.chunks_mut(cols) {
        for r in &ranges {
            for c in r.clone() {
                row[c] = value(c);
            }
        }
    }
    Ok(())
}

/// Zeroes the masked channels of one grid in place.
pub fn zero_channels(grid: &mut Grid, mask: &AblationMask, layout: &ChannelLayout) -> Result<()> {
    let cols = grid.cols();
    fill_channels(grid.data_mut(), cols, mask, layout, |_| 0.0)
}

/// Returns copies of `frames` with the masked channels zeroed.
pub fn apply_mask(
    frames: &[CompositeFrame],
    mask: &AblationMask,
    layout: &ChannelLayout,
) -> Result<Vec<CompositeFrame>> {
    frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            zero_channels(&mut out.grid, mask, layout)?;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One mask shared by the whole batch.
    PerBatch,
    /// An independent mask for every sample. The default: with a shared
    /// mask, batch-norm statistics track whichever masks came last and no
    /// longer match single frames at inference.
    #[default]
    PerSample,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" => Ok(Granularity::PerBatch),
            "per-sample" => Ok(Granularity::PerSample),
            other => Err(Error::config(format!(
                "granularity must be per-batch or per-sample, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::PerBatch => "per-batch",
            Granularity::PerSample => "per-sample",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub max_ablate: usize,
    pub granularity: Granularity,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ablate > N_CHANNELS {
            return Err(Error::config(format!(
                "max ablated channels must be <= {N_CHANNELS}, got {}",
                self.max_ablate
            )));
        }
        Ok(())
    }
}

/// Ablates a `[B, 1, H, W]` batch in place and returns the masks used
/// (one for per-batch, `B` for per-sample).
pub fn ablate_batch<R: Rng + ?Sized>(
    batch: &mut Tensor<f32>,
    config: &AblationConfig,
    layout: &ChannelLayout,
    rng: &mut R,
) -> Result<Vec<AblationMask>> {
    config.validate()?;
    let (b, h, w) = match *batch.shape() {
        [b, 1, h, w] => (b, h, w),
        ref s => return Err(Error::config(format!("batch must be [B, 1, H, W], got {s:?}"))),
    };
    let n = layout.n_channels();
    let masks = match config.granularity {
        Granularity::PerBatch => vec![sample_mask(config.max_ablate, n, rng)?],
        Granularity::PerSample => (0..b)
            .map(|_| sample_mask(config.max_ablate, n, rng))
            .collect::<Result<_>>()?,
    };
    for (i, plane) in batch.data_mut().chunks_mut(h * w).enumerate() {
        let mask = &masks[if masks.len() == 1 { 0 } else { i }];
        if !mask.is_empty() {
            fill_channels(plane, w, mask, layout, |_| 0.0)?;
        }
    }
    Ok(masks)
}
