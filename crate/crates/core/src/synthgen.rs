//! Synthetic ultrasound + FMG datasets with a known class structure.
//!
//! Every class has a sign per channel and a band word saying which two of six
//! depth bands light up across the ultrasound image. Classes use different
//! words, so any single surviving ultrasound channel identifies the class;
//! the FMG signs tell the classes apart when all eight FMG channels survive.
//! Either way, losing any 8 of the 16 channels leaves enough to identify the
//! class. The sign of an ultrasound channel sets how bright its bands are.
//!
//! Ultrasound frames are dark with bright bands, so a zeroed channel looks
//! like a channel with every band off.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::session_kfold;
use crate::preprocess::{
    build_composite, compute_norm_stats, padded_width, CompositeFrame, Dataset, Geometry, Grid,
    Provenance, RawFrame, Record, FMG_CHANNELS, N_CHANNELS, N_CLASSES, US_CHANNELS,
};
use crate::rng::{stream, Purpose};

const MAX_ATTEMPTS: usize = 1_000_000;
/// Baseline intensity and signature swing: amplitudes land in [0.2, 0.8].
const MID: f32 = 0.5;
const SWING: f32 = 0.3;
/// Ultrasound background level.
const DARK: f32 = 0.02;
/// Depth bands; every class lights exactly `LIT_BANDS` of them, so all words
/// carry the same energy and any two differ in at least two bands.
pub const BANDS: usize = 6;
pub const LIT_BANDS: u32 = 2;

fn band_words() -> Vec<u8> {
    (0..1u8 << BANDS).filter(|w| w.count_ones() == LIT_BANDS).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_classes: usize,
    pub sessions: usize,
    pub frames_per_gesture: usize,
    /// Side of the square raw ultrasound image, before decimation.
    pub raw_side: usize,
    /// Additive Gaussian noise on every ultrasound pixel and FMG reading,
    /// in units of the [0, 1] intensity scale.
    pub noise_sigma: f64,
    /// Per-(session, FMG channel) offset scale.
    pub session_sigma: f64,
    /// Per-(frame, channel) relative jitter of the signature amplitude.
    pub gain_sigma: f64,
    /// Standard deviation of each depth band, as a fraction of the rows.
    pub bump_width: f64,
    /// Minimum pairwise Hamming distance of the 16-channel sign code.
    pub min_distance: usize,
    pub subject: u16,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_classes: N_CLASSES,
            sessions: 20,
            frames_per_gesture: 20,
            raw_side: 64,
            noise_sigma: 0.05,
            session_sigma: 0.1,
            gain_sigma: 0.05,
            bump_width: 0.07,
            min_distance: 6,
            subject: 0,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// 350x350 raw frames, 100 per gesture and session: 24,000 frames.
    pub fn full_scale() -> Self {
        GenConfig {
            frames_per_gesture: 100,
            raw_side: 350,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != N_CLASSES {
            return Err(Error::config(format!(
                "the container holds {N_CLASSES} classes, got n_classes = {}",
                self.n_classes
            )));
        }
        if self.sessions == 0 || self.sessions > u16::MAX as usize {
            return Err(Error::config(format!("sessions must be in 1..=65535, got {}", self.sessions)));
        }
        if self.frames_per_gesture == 0 {
            return Err(Error::config("frames_per_gesture must be >= 1"));
        }
        Geometry::from_raw_side(self.raw_side)?;
        if self.raw_side < 16 {
            return Err(Error::config(format!("raw_side must be >= 16, got {}", self.raw_side)));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be > 0, got {}", self.noise_sigma)));
        }
        for (name, v) in [("session_sigma", self.session_sigma), ("gain_sigma", self.gain_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.bump_width > 0.0 && self.bump_width <= 1.0) {
            return Err(Error::config(format!("bump_width must be in (0, 1], got {}", self.bump_width)));
        }
        if self.min_distance > N_CHANNELS {
            return Err(Error::config(format!(
                "min_distance must be <= {N_CHANNELS}, got {}",
                self.min_distance
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.sessions * self.n_classes * self.frames_per_gesture
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    /// +1 or -1 per channel, ultrasound channels first.
    pub signs: [i8; N_CHANNELS],
    /// Lit depth bands, bit b for band b.
    pub bands: u8,
}

impl ClassSignature {
    /// Channel amplitude on the [0.2, 0.8] band.
    pub fn amplitude(&self, channel: usize) -> f32 {
        MID + SWING * self.signs[channel] as f32
    }

    /// Peak band intensity of an ultrasound channel: 0.8 for a positive
    /// sign, 0.5 for a negative one. Dimmer bands than that are hard to
    /// pick up once most channels are gone.
    pub fn band_peak(&self, channel: usize) -> f32 {
        MID + SWING * self.signs[channel].max(0) as f32
    }
}

fn hamming(a: u16, b: u16) -> usize {
    (a ^ b).count_ones() as usize
}

const FMG_BITS: u16 = 0xff00;

/// Rejection-samples sign codes with pairwise distance >= `min_distance`
/// over all channels and >= 2 over the FMG channels, then assigns every class
/// its own band word.
pub fn make_class_signatures<R: Rng + ?Sized>(
    n_classes: usize,
    min_distance: usize,
    rng: &mut R,
) -> Result<Vec<ClassSignature>> {
    let mut words: Vec<u16> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while words.len() < n_classes {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "no {n_classes}-word code with distance {min_distance} after {MAX_ATTEMPTS} draws"
            )));
        }
        attempts += 1;
        let w: u16 = rng.random();
        if words
            .iter()
            .all(|&v| hamming(v, w) >= min_distance && hamming(v & FMG_BITS, w & FMG_BITS) >= 2)
        {
            words.push(w);
        }
    }
    let mut bands = band_words();
    if n_classes > bands.len() {
        return Err(Error::Generation(format!(
            "{n_classes} classes need more than {} band words",
            bands.len()
        )));
    }
    bands.shuffle(rng);
    Ok(words
        .iter()
        .zip(bands)
        .map(|(&w, bands)| ClassSignature {
            signs: std::array::from_fn(|ch| if w >> ch & 1 == 1 { 1 } else { -1 }),
            bands,
        })
        .collect())
}

/// Exhaustive check over every way of losing `n_missing` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub n_missing: usize,
    pub subsets: usize,
    /// (subset, class pair) combinations whose surviving signs coincide.
    pub sign_collisions: usize,
    /// Minimum over subsets and class pairs of surviving channels that
    /// still distinguish the pair by sign or band word.
    pub min_distinguishing: usize,
}

pub fn verify_redundancy(sigs: &[ClassSignature], n_missing: usize) -> Result<RedundancyReport> {
    if n_missing > N_CHANNELS {
        return Err(Error::config(format!("cannot lose {n_missing} of {N_CHANNELS} channels")));
    }
    // per pair: bitmask of channels that tell the two classes apart
    let mut pairs = Vec::new();
    let mut sign_pairs = Vec::new();
    for (i, a) in sigs.iter().enumerate() {
        for b in &sigs[i + 1..] {
            let mut by_sign = 0u32;
            let mut any = 0u32;
            for ch in 0..N_CHANNELS {
                let s = a.signs[ch] != b.signs[ch];
                let d = ch < US_CHANNELS && a.bands != b.bands;
                by_sign |= (s as u32) << ch;
                any |= ((s || d) as u32) << ch;
            }
            sign_pairs.push(by_sign);
            pairs.push(any);
        }
    }
    let mut report = RedundancyReport {
        n_missing,
        subsets: 0,
        sign_collisions: 0,
        min_distinguishing: N_CHANNELS,
    };
    for missing in 0u32..(1 << N_CHANNELS) {
        if missing.count_ones() as usize != n_missing {
            continue;
        }
        report.subsets += 1;
        let keep = !missing & 0xffff;
        for (&any, &by_sign) in pairs.iter().zip(&sign_pairs) {
            report.min_distinguishing = report
                .min_distinguishing
                .min((any & keep).count_ones() as usize);
            report.sign_collisions += (by_sign & keep == 0) as usize;
        }
    }
    if report.min_distinguishing == 0 {
        return Err(Error::Generation(format!(
            "some loss of {n_missing} channels leaves two classes identical"
        )));
    }
    Ok(report)
}

/// Noise-free band pattern per class and raw pixel, plus the channel of each
/// raw column.
struct Templates {
    side: usize,
    column_channel: Vec<usize>,
    /// `[class][y * side + x]`, the lit bands without the background.
    bumps: Vec<Vec<f32>>,
}

impl Templates {
    fn new(config: &GenConfig, sigs: &[ClassSignature]) -> Self {
        let d = config.raw_side;
        let rows = d / 2;
        let cw = padded_width(d / 2) / US_CHANNELS;
        let column_channel: Vec<usize> = (0..d).map(|x| (x / 2) / cw).collect();
        let w = config.bump_width as f32;
        let bumps = sigs
            .iter()
            .map(|sig| {
                let mut t = vec![0.0f32; d * d];
                for y in 0..d {
                    let v = ((y / 2) as f32 + 0.5) / rows as f32;
                    for x in 0..d {
                        let ch = column_channel[x];
                        let u = ((x / 2 - ch * cw) as f32 + 0.5) / cw as f32;
                        let depth: f32 = (0..BANDS)
                            .filter(|b| sig.bands >> b & 1 == 1)
                            .map(|b| {
                                let z = (v - (b as f32 + 0.5) / BANDS as f32) / w;
                                (-0.5 * z * z).exp()
                            })
                            .sum();
                        let lateral = (std::f32::consts::PI * u).sin();
                        t[y * d + x] = sig.band_peak(ch) * depth.min(1.0) * lateral;
                    }
                }
                t
            })
            .collect();
        Templates {
            side: d,
            column_channel,
            bumps,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// One session's frames, gesture-major.
fn generate_session(
    config: &GenConfig,
    sigs: &[ClassSignature],
    templates: &Templates,
    session: usize,
) -> Vec<RawFrame> {
    let mut rng = stream(config.seed, session as u64, Purpose::Session);
    let sigma = config.noise_sigma as f32;
    let gain_sigma = config.gain_sigma as f32;
    let offsets: [f32; FMG_CHANNELS] =
        std::array::from_fn(|_| config.session_sigma as f32 * normal(&mut rng));
    let d = templates.side;
    let mut frames = Vec::with_capacity(config.n_classes * config.frames_per_gesture);
    for (class, sig) in sigs.iter().enumerate() {
        let bump = &templates.bumps[class];
        for _ in 0..config.frames_per_gesture {
            let gains: [f32; N_CHANNELS] =
                std::array::from_fn(|_| (1.0 + gain_sigma * normal(&mut rng)).max(0.0));
            let mut us = Vec::with_capacity(d * d);
            for y in 0..d {
                for x in 0..d {
                    let g = gains[templates.column_channel[x]];
                    let v = DARK + g * bump[y * d + x] + sigma * normal(&mut rng);
                    us.push(255.0 * v.clamp(0.0, 1.0));
                }
            }
            let fmg: [f32; FMG_CHANNELS] = std::array::from_fn(|k| {
                let ch = US_CHANNELS + k;
                MID + gains[ch] * SWING * sig.signs[ch] as f32
                    + offsets[k]
                    + sigma * normal(&mut rng)
            });
            frames.push(RawFrame {
                ultrasound: Grid::new(d, d, us).expect("template side matches"),
                fmg,
                label: class as u16,
                session: session as u16,
                subject: config.subject,
            });
        }
    }
    frames
}

/// A generated dataset with the signatures that produced it.
#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: Dataset,
    pub signatures: Vec<ClassSignature>,
    pub redundancy: RedundancyReport,
}

/// Pure function of the config (the seed lives in it). Frames are ordered
/// session, then gesture, then frame.
pub fn generate_dataset(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let mut sig_rng = stream(config.seed, 0, Purpose::Signatures);
    let signatures = make_class_signatures(config.n_classes, config.min_distance, &mut sig_rng)?;
    let redundancy = verify_redundancy(&signatures, N_CHANNELS / 2)?;
    let templates = Templates::new(config, &signatures);
    let geometry = Geometry::from_raw_side(config.raw_side)?;
    let mut records = Vec::with_capacity(config.n_frames());
    for session in 0..config.sessions {
        for raw in generate_session(config, &signatures, &templates, session) {
            records.push(Record::from_raw(&raw)?);
        }
    }
    let provenance = Provenance {
        seed: Some(config.seed),
        generator: Some(serde_json::to_value(config).map_err(|e| Error::Generation(e.to_string()))?),
        note: Some("synthetic".into()),
    };
    Ok(Generated {
        dataset: Dataset::new(geometry, records, provenance)?,
        signatures,
        redundancy,
    })
}

/// Nearest-centroid accuracies (percent) on held-out sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub full: f64,
    /// Mean over mask draws with 4 channels missing.
    pub missing4: f64,
    /// Mean over mask draws with 8 channels missing.
    pub missing8: f64,
    pub draws: usize,
    pub test_frames: usize,
}

/// Centroids come from the training sessions of the first of five session
/// folds. With channels missing the distance runs over surviving columns
/// only; each draw removes one random set of channels from every test frame.
pub fn separability_check(dataset: &Dataset, draws: usize, seed: u64) -> Result<SeparabilityReport> {
    let folds = session_kfold(&dataset.sessions(), 5)?;
    let fold = &folds[0];
    let train: Vec<&Record> = dataset
        .records
        .iter()
        .filter(|r| fold.train.contains(&r.session))
        .collect();
    let test: Vec<&Record> = dataset
        .records
        .iter()
        .filter(|r| fold.test.contains(&r.session))
        .collect();
    let stats = compute_norm_stats(train.iter().copied())?;
    let layout = dataset.layout()?;
    let width = layout.width();
    let composite = |r: &Record| -> Result<CompositeFrame> { build_composite(r, &stats) };

    let mut centroids = vec![vec![0.0f64; dataset.geometry.us_rows * width]; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    for r in &train {
        let f = composite(r)?;
        counts[f.label as usize] += 1;
        for (c, &v) in centroids[f.label as usize].iter_mut().zip(f.grid.data()) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::Degenerate("a class is absent from the training sessions".into()));
        }
        c.iter_mut().for_each(|v| *v /= n as f64);
    }

    // squared distance per test frame, class and channel
    let mut parts = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for r in &test {
        let f = composite(r)?;
        let mut d = vec![[0.0f64; N_CHANNELS]; N_CLASSES];
        for (class, c) in centroids.iter().enumerate() {
            for (i, (&v, &m)) in f.grid.data().iter().zip(c).enumerate() {
                let ch = layout.channel_of_column(i % width).expect("column inside layout");
                d[class][ch] += (v as f64 - m) * (v as f64 - m);
            }
        }
        parts.push(d);
        labels.push(f.label as usize);
    }
    if parts.is_empty() {
        return Err(Error::Degenerate("no test frames".into()));
    }

    let score = |keep: &[bool; N_CHANNELS]| -> f64 {
        let correct = parts
            .iter()
            .zip(&labels)
            .filter(|(d, &y)| {
                let dist = |c: usize| -> f64 { (0..N_CHANNELS).filter(|&ch| keep[ch]).map(|ch| d[c][ch]).sum() };
                let best = (0..N_CLASSES)
                    .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                    .expect("classes exist");
                best == y
            })
            .count();
        100.0 * correct as f64 / parts.len() as f64
    };
    let mut rng = stream(seed, 0, Purpose::Separability);
    let mut masked = |k: usize| -> f64 {
        (0..draws)
            .map(|_| {
                let mut keep = [true; N_CHANNELS];
                for ch in rand::seq::index::sample(&mut rng, N_CHANNELS, k) {
                    keep[ch] = false;
                }
                score(&keep)
            })
            .sum::<f64>()
            / draws.max(1) as f64
    };
    let missing4 = masked(4);
    let missing8 = masked(8);
    Ok(SeparabilityReport {
        full: score(&[true; N_CHANNELS]),
        missing4,
        missing8,
        draws,
        test_frames: parts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{decode_dataset, encode_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GenConfig {
        GenConfig {
            sessions: 5,
            frames_per_gesture: 4,
            raw_side: 32,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn signatures_meet_distance_constraints() {
        for seed in 0..20 {
            let sigs = make_class_signatures(12, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (i, a) in sigs.iter().enumerate() {
                for b in &sigs[i + 1..] {
                    let d = (0..16).filter(|&c| a.signs[c] != b.signs[c]).count();
                    assert!(d >= 6);
                    assert!((8..16).filter(|&c| a.signs[c] != b.signs[c]).count() >= 2);
                }
            }
            let mut words: Vec<u8> = sigs.iter().map(|s| s.bands).collect();
            assert!(words.iter().all(|&w| w.count_ones() == LIT_BANDS && w < 1 << BANDS));
            words.sort_unstable();
            words.dedup();
            assert_eq!(words.len(), 12);
            for s in &sigs {
                for ch in 0..16 {
                    assert!([0.2f32, 0.8].iter().any(|a| (s.amplitude(ch) - a).abs() < 1e-6));
                    assert!([0.5f32, 0.8].iter().any(|a| (s.band_peak(ch) - a).abs() < 1e-6));
                }
            }
        }
    }

    #[test]
    fn signatures_are_deterministic() {
        let a = make_class_signatures(12, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_class_signatures(12, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_code_is_a_generation_error() {
        // more than two words at full distance 16 cannot exist
        let r = make_class_signatures(3, 16, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn redundancy_holds_for_every_eight_channel_loss() {
        let sigs = make_class_signatures(12, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = verify_redundancy(&sigs, 8).unwrap();
        assert_eq!(r.subsets, 12_870);
        assert!(r.min_distinguishing >= 1);
        // losing all 16 channels leaves nothing
        assert!(verify_redundancy(&sigs, 16).is_err());
    }

    #[test]
    fn counts_and_balance() {
        let cfg = small();
        let g = generate_dataset(&cfg).unwrap();
        assert_eq!(g.dataset.len(), 5 * 12 * 4);
        assert_eq!(g.dataset.geometry, Geometry { us_rows: 16, us_cols: 16 });
        let mut counts = std::collections::HashMap::new();
        for r in &g.dataset.records {
            *counts.entry((r.session, r.label)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 60);
        assert!(counts.values().all(|&n| n == 4));
    }

    #[test]
    fn desk_default_frame_count() {
        assert_eq!(GenConfig::default().n_frames(), 4_800);
        assert_eq!(GenConfig::full_scale().n_frames(), 24_000);
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let cfg = small();
        let a = generate_dataset(&cfg).unwrap().dataset;
        let b = generate_dataset(&cfg).unwrap().dataset;
        assert_eq!(a, b);
        let bytes = encode_dataset(&a).unwrap();
        let back = decode_dataset(&bytes, a.provenance.clone()).unwrap();
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn near_noiseless_frames_repeat_within_a_session() {
        let cfg = GenConfig {
            noise_sigma: 1e-9,
            gain_sigma: 0.0,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap().dataset;
        let same = |a: &Record, b: &Record| {
            a.ultrasound.data().iter().zip(b.ultrasound.data()).all(|(x, y)| (x - y).abs() < 1e-3)
                && a.fmg.iter().zip(&b.fmg).all(|(x, y)| (x - y).abs() < 1e-6)
        };
        let r = &ds.records;
        assert!(same(&r[0], &r[1]));
        // same class in another session: ultrasound equal, FMG shifted
        let other = r.iter().find(|x| x.session == 1 && x.label == 0).unwrap();
        assert!(r[0].ultrasound.data().iter().zip(other.ultrasound.data()).all(|(x, y)| (x - y).abs() < 1e-3));
        assert!(!same(&r[0], other));
        assert!(!same(&r[0], &r[4]));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            GenConfig { noise_sigma: 0.0, ..small() },
            GenConfig { frames_per_gesture: 0, ..small() },
            GenConfig { raw_side: 33, ..small() },
            GenConfig { n_classes: 5, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn shuffled_labels_fall_to_chance() {
        let cfg = GenConfig {
            frames_per_gesture: 60,
            raw_side: 32,
            ..Default::default()
        };
        let mut ds = generate_dataset(&cfg).unwrap().dataset;
        let mut labels: Vec<u16> = ds.records.iter().map(|r| r.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        for (r, l) in ds.records.iter_mut().zip(labels) {
            r.label = l;
        }
        let rep = separability_check(&ds, 1, 0).unwrap();
        // 2880 test frames: 3 sigma of the chance rate is 1.5 points
        assert!((rep.full - 100.0 / 12.0).abs() < 2.0, "{rep:?}");
    }
}
