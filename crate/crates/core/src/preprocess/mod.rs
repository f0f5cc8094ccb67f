//! Raw ultrasound + FMG frames to composite training grids.
//!
//! A raw frame holds a `d x d` grayscale ultrasound image and 8 FMG readings.
//! The image is decimated by 2 (`out(i, j) = in(2i, 2j)`), zero columns are
//! appended until the width is a multiple of 8, and this prepared form is
//! what the dataset container stores. Normalization depends on the training
//! split, so composites are assembled per fold: both modalities are min-max
//! scaled with training statistics, the FMG vector is repeated on every row,
//! and its 8 columns are appended to the right of the image.

mod container;
mod layout;

pub use container::{read_dataset, write_dataset, decode_dataset, encode_dataset, sidecar_path, HEADER_LEN, MAGIC};
pub use layout::{make_layout, ChannelLayout, ChannelSpan, Modality};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const US_CHANNELS: usize = 8;
pub const FMG_CHANNELS: usize = 8;
pub const N_CHANNELS: usize = US_CHANNELS + FMG_CHANNELS;
pub const N_CLASSES: usize = 12;

/// Row-major 2-D grid of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "{rows}x{cols} grid needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Writes `v` into every row of columns `[start, end)`.
    pub fn fill_columns(&mut self, start: usize, end: usize, v: f32) {
        for r in 0..self.rows {
            self.data[r * self.cols + start..r * self.cols + end].fill(v);
        }
    }
}

/// One acquisition: square ultrasound image plus the 8 FMG readings taken with it.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub ultrasound: Grid,
    pub fmg: [f32; FMG_CHANNELS],
    pub label: u16,
    pub session: u16,
    pub subject: u16,
}

impl RawFrame {
    pub fn validate(&self) -> Result<()> {
        let d = self.ultrasound.rows();
        if d != self.ultrasound.cols() || d == 0 || !d.is_multiple_of(2) {
            return Err(Error::input(format!(
                "ultrasound must be square with even side, got {}x{}",
                d,
                self.ultrasound.cols()
            )));
        }
        if self.label as usize >= N_CLASSES {
            return Err(Error::input(format!("label {} out of range", self.label)));
        }
        Ok(())
    }
}

/// A frame after decimation and padding, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub ultrasound: Grid,
    pub fmg: [f32; FMG_CHANNELS],
    pub label: u16,
    pub session: u16,
    pub subject: u16,
}

impl Record {
    pub fn from_raw(raw: &RawFrame) -> Result<Self> {
        raw.validate()?;
        let ultrasound = pad_to_multiple8(&downsample2x(&raw.ultrasound)?);
        Ok(Record {
            ultrasound,
            fmg: raw.fmg,
            label: raw.label,
            session: raw.session,
            subject: raw.subject,
        })
    }
}

/// Access to the two modality value sets, for statistics.
pub trait ModalityValues {
    fn ultrasound_values(&self) -> &[f32];
    fn fmg_values(&self) -> &[f32];
}

impl ModalityValues for RawFrame {
    fn ultrasound_values(&self) -> &[f32] {
        self.ultrasound.data()
    }
    fn fmg_values(&self) -> &[f32] {
        &self.fmg
    }
}

impl ModalityValues for Record {
    fn ultrasound_values(&self) -> &[f32] {
        self.ultrasound.data()
    }
    fn fmg_values(&self) -> &[f32] {
        &self.fmg
    }
}

/// Stride-2 selection: `out(i, j) = in(2i, 2j)`.
pub fn downsample2x(image: &Grid) -> Result<Grid> {
    if !image.rows().is_multiple_of(2) || !image.cols().is_multiple_of(2) {
        return Err(Error::input(format!(
            "downsampling needs even dimensions, got {}x{}",
            image.rows(),
            image.cols()
        )));
    }
    Ok(Grid::from_fn(image.rows() / 2, image.cols() / 2, |i, j| {
        image.get(2 * i, 2 * j)
    }))
}

pub fn padded_width(cols: usize) -> usize {
    cols.div_ceil(8) * 8
}

/// Appends zero columns until the width is divisible by 8.
pub fn pad_to_multiple8(grid: &Grid) -> Grid {
    let cols = padded_width(grid.cols());
    Grid::from_fn(grid.rows(), cols, |r, c| {
        if c < grid.cols() {
            grid.get(r, c)
        } else {
            0.0
        }
    })
}

/// Repeats the FMG vector on each of `rows` rows.
pub fn expand_fmg_rows(fmg: &[f32], rows: usize) -> Result<Grid> {
    if rows == 0 {
        return Err(Error::input("FMG expansion needs at least one row"));
    }
    Grid::new(rows, fmg.len(), fmg.repeat(rows))
}

/// Ultrasound columns first, then the FMG columns.
pub fn compose_frame(us: &Grid, fmg: &Grid) -> Result<Grid> {
    if us.rows() != fmg.rows() {
        return Err(Error::input(format!(
            "cannot append {} FMG rows to {} ultrasound rows",
            fmg.rows(),
            us.rows()
        )));
    }
    let cols = us.cols() + fmg.cols();
    let mut data = Vec::with_capacity(us.rows() * cols);
    for r in 0..us.rows() {
        data.extend_from_slice(us.row(r));
        data.extend_from_slice(fmg.row(r));
    }
    Grid::new(us.rows(), cols, data)
}

/// Per-modality min/max over a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub us_min: f32,
    pub us_max: f32,
    pub fmg_min: f32,
    pub fmg_max: f32,
}

pub fn compute_norm_stats<'a, F, I>(frames: I) -> Result<NormStats>
where
    F: ModalityValues + 'a,
    I: IntoIterator<Item = &'a F>,
{
    let mut s = NormStats {
        us_min: f32::INFINITY,
        us_max: f32::NEG_INFINITY,
        fmg_min: f32::INFINITY,
        fmg_max: f32::NEG_INFINITY,
    };
    let mut any = false;
    for f in frames {
        any = true;
        for &v in f.ultrasound_values() {
            s.us_min = s.us_min.min(v);
            s.us_max = s.us_max.max(v);
        }
        for &v in f.fmg_values() {
            s.fmg_min = s.fmg_min.min(v);
            s.fmg_max = s.fmg_max.max(v);
        }
    }
    if !any {
        return Err(Error::Degenerate("no training frames for normalization".into()));
    }
    if !(s.us_max > s.us_min) {
        return Err(Error::Degenerate(format!("ultrasound is constant at {}", s.us_min)));
    }
    if !(s.fmg_max > s.fmg_min) {
        return Err(Error::Degenerate(format!("FMG is constant at {}", s.fmg_min)));
    }
    Ok(s)
}

#[inline]
pub fn scale_unit(v: f32, min: f32, max: f32) -> f32 {
    ((v - min) / (max - min)).clamp(0.0, 1.0)
}

/// Maps each modality onto [0, 1] with the given statistics; values outside
/// the training range clamp.
pub fn apply_normalization(record: &Record, stats: &NormStats) -> Record {
    let mut out = record.clone();
    for v in out.ultrasound.data_mut() {
        *v = scale_unit(*v, stats.us_min, stats.us_max);
    }
    for v in out.fmg.iter_mut() {
        *v = scale_unit(*v, stats.fmg_min, stats.fmg_max);
    }
    out
}

/// A normalized sample ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeFrame {
    pub grid: Grid,
    pub label: u16,
    pub session: u16,
    pub subject: u16,
}

pub fn build_composite(record: &Record, stats: &NormStats) -> Result<CompositeFrame> {
    let n = apply_normalization(record, stats);
    let fmg = expand_fmg_rows(&n.fmg, n.ultrasound.rows())?;
    Ok(CompositeFrame {
        grid: compose_frame(&n.ultrasound, &fmg)?,
        label: n.label,
        session: n.session,
        subject: n.subject,
    })
}

/// Stored ultrasound geometry (after decimation and padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub us_rows: usize,
    pub us_cols: usize,
}

impl Geometry {
    /// Geometry produced from a `d x d` raw image.
    pub fn from_raw_side(d: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::config(format!("raw ultrasound side must be even, got {d}")));
        }
        Ok(Geometry {
            us_rows: d / 2,
            us_cols: padded_width(d / 2),
        })
    }

    pub fn composite_rows(&self) -> usize {
        self.us_rows
    }

    pub fn composite_cols(&self) -> usize {
        self.us_cols + FMG_CHANNELS
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
    pub note: Option<String>,
}

/// Prepared records for one subject, sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(geometry: Geometry, records: Vec<Record>, provenance: Provenance) -> Result<Self> {
        let ds = Dataset {
            geometry,
            records,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.ultrasound.rows() != self.geometry.us_rows
                || r.ultrasound.cols() != self.geometry.us_cols
            {
                return Err(Error::input(format!(
                    "record {i} is {}x{}, dataset geometry is {}x{}",
                    r.ultrasound.rows(),
                    r.ultrasound.cols(),
                    self.geometry.us_rows,
                    self.geometry.us_cols
                )));
            }
            if r.label as usize >= N_CLASSES {
                return Err(Error::input(format!("record {i} has label {}", r.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct session ids in ascending order.
    pub fn sessions(&self) -> Vec<u16> {
        let mut s: Vec<u16> = self.records.iter().map(|r| r.session).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn layout(&self) -> Result<ChannelLayout> {
        make_layout(self.geometry.us_cols, US_CHANNELS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_examples() {
        let g = Grid::from_fn(4, 4, |i, j| (4 * i + j) as f32);
        let d = downsample2x(&g).unwrap();
        assert_eq!(d.data(), &[0.0, 2.0, 8.0, 10.0]);

        let g = Grid::new(2, 2, vec![7.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(downsample2x(&g).unwrap().data(), &[7.0]);

        let big = Grid::zeros(350, 350);
        let d = downsample2x(&big).unwrap();
        assert_eq!((d.rows(), d.cols()), (175, 175));

        assert!(matches!(downsample2x(&Grid::zeros(3, 3)), Err(Error::Input(_))));
    }

    #[test]
    fn pad_examples() {
        let p = pad_to_multiple8(&Grid::zeros(175, 175));
        assert_eq!((p.rows(), p.cols()), (175, 176));

        let g = Grid::from_fn(2, 32, |r, c| (r * 32 + c) as f32);
        assert_eq!(pad_to_multiple8(&g), g);

        let g = Grid::from_fn(3, 9, |_, c| c as f32 + 1.0);
        let p = pad_to_multiple8(&g);
        assert_eq!(p.cols(), 16);
        for r in 0..3 {
            assert_eq!(&p.row(r)[..9], g.row(r));
            assert!(p.row(r)[9..].iter().all(|v| *v == 0.0));
        }
    }

    fn record(us: Vec<f32>, fmg: [f32; 8]) -> Record {
        Record {
            ultrasound: Grid::new(1, us.len(), us).unwrap(),
            fmg,
            label: 0,
            session: 0,
            subject: 0,
        }
    }

    #[test]
    fn norm_stats_and_application() {
        let a = record(vec![0.0, 255.0, 17.0], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let s = compute_norm_stats([&a]).unwrap();
        assert_eq!((s.us_min, s.us_max, s.fmg_min, s.fmg_max), (0.0, 255.0, 1.0, 8.0));

        let n = apply_normalization(&a, &s);
        assert_eq!(n.ultrasound.data()[0], 0.0);
        assert_eq!(n.ultrasound.data()[1], 1.0);
        assert_eq!(n.fmg[0], 0.0);
        assert_eq!(n.fmg[7], 1.0);

        let test = record(vec![300.0, -5.0, 0.0], [9.0; 8]);
        let n = apply_normalization(&test, &s);
        assert_eq!(n.ultrasound.data()[0], 1.0);
        assert_eq!(n.ultrasound.data()[1], 0.0);
        assert!(n.fmg.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn norm_stats_errors() {
        let empty: [&Record; 0] = [];
        assert!(matches!(compute_norm_stats(empty), Err(Error::Degenerate(_))));
        let flat = record(vec![3.0, 3.0], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(matches!(compute_norm_stats([&flat]), Err(Error::Degenerate(_))));
        let flat_fmg = record(vec![0.0, 3.0], [2.0; 8]);
        assert!(matches!(compute_norm_stats([&flat_fmg]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn expand_and_compose() {
        let fmg = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let one = expand_fmg_rows(&fmg, 1).unwrap();
        assert_eq!(one.data(), &fmg);
        let many = expand_fmg_rows(&fmg, 175).unwrap();
        assert_eq!((many.rows(), many.cols()), (175, 8));
        for c in 0..8 {
            assert!((0..175).all(|r| many.get(r, c) == fmg[c]));
        }
        assert!(expand_fmg_rows(&fmg, 0).is_err());

        let us = Grid::zeros(175, 176);
        let comp = compose_frame(&us, &many).unwrap();
        assert_eq!((comp.rows(), comp.cols()), (175, 184));
        for k in 0..8 {
            assert_eq!(comp.get(100, 176 + k), fmg[k]);
        }

        let desk = compose_frame(&Grid::zeros(32, 32), &expand_fmg_rows(&fmg, 32).unwrap()).unwrap();
        assert_eq!((desk.rows(), desk.cols()), (32, 40));

        assert!(matches!(
            compose_frame(&Grid::zeros(4, 8), &Grid::zeros(5, 8)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn paper_and_desk_geometry() {
        let g = Geometry::from_raw_side(350).unwrap();
        assert_eq!((g.us_rows, g.us_cols, g.composite_cols()), (175, 176, 184));
        let g = Geometry::from_raw_side(64).unwrap();
        assert_eq!((g.composite_rows(), g.composite_cols()), (32, 40));
        assert!(Geometry::from_raw_side(63).is_err());
    }

    #[test]
    fn raw_frame_validation() {
        let mut f = RawFrame {
            ultrasound: Grid::zeros(4, 4),
            fmg: [0.0; 8],
            label: 11,
            session: 0,
            subject: 0,
        };
        assert!(Record::from_raw(&f).is_ok());
        f.label = 12;
        assert!(f.validate().is_err());
        f.label = 0;
        f.ultrasound = Grid::zeros(5, 5);
        assert!(f.validate().is_err());
    }
}
