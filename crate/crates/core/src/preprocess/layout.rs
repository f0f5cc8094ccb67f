use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::FMG_CHANNELS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ultrasound,
    Fmg,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpan {
    pub start: usize,
    pub end: usize,
    pub modality: Modality,
}

/// Column ranges of the logical channels of a composite frame: equal-width
/// ultrasound bands, then one column per FMG sensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    channels: Vec<ChannelSpan>,
}

pub fn make_layout(us_cols: usize, n_us_channels: usize) -> Result<ChannelLayout> {
    if n_us_channels == 0 || us_cols == 0 || !us_cols.is_multiple_of(n_us_channels) {
        return Err(Error::config(format!(
            "ultrasound width {us_cols} does not split into {n_us_channels} equal channels"
        )));
    }
    let width = us_cols / n_us_channels;
    let mut channels: Vec<ChannelSpan> = (0..n_us_channels)
        .map(|i| ChannelSpan {
            start: i * width,
            end: (i + 1) * width,
            modality: Modality::Ultrasound,
        })
        .collect();
    channels.extend((0..FMG_CHANNELS).map(|k| ChannelSpan {
        start: us_cols + k,
        end: us_cols + k + 1,
        modality: Modality::Fmg,
    }));
    Ok(ChannelLayout { channels })
}

impl ChannelLayout {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[ChannelSpan] {
        &self.channels
    }

    /// Total composite width covered by the layout.
    pub fn width(&self) -> usize {
        self.channels.last().map_or(0, |c| c.end)
    }

    pub fn columns(&self, channel: usize) -> Result<Range<usize>> {
        self.channels
            .get(channel)
            .map(|c| c.start..c.end)
            .ok_or_else(|| {
                Error::input(format!(
                    "channel {channel} out of range for {} channels",
                    self.channels.len()
                ))
            })
    }

    pub fn channel_of_column(&self, col: usize) -> Option<usize> {
        self.channels.iter().position(|c| c.start <= col && col < c.end)
    }

    pub fn us_channel_width(&self) -> usize {
        self.channels
            .iter()
            .find(|c| c.modality == Modality::Ultrasound)
            .map_or(0, |c| c.end - c.start)
    }
}
