use std::path::PathBuf;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{prepare_fold, session_kfold, train_prepared, FrameSet, TrainConfig, TrainedModel, Variant};
use crate::error::{Error, Result};
use crate::evaluation::{draw_masks, evaluate_with_masks, EvalReport, EvalRow, ImputeMode, Method, MissingSpec, ReportMeta};
use crate::preprocess::{Dataset, Record};
use crate::rng::{derive_seed, stream, Purpose};

/// Cross-validated comparison of standard and ablation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// One training run per (fold, seed); `train.seed` is replaced per run.
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub train: TrainConfig,
    pub regimes: Vec<MissingSpec>,
    pub impute: ImputeMode,
    /// Worker threads for independent (fold, seed) runs.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            out: None,
            seeds: vec![0, 1, 11],
            folds: 5,
            train: TrainConfig::default(),
            regimes: vec![
                MissingSpec::Fixed(0),
                MissingSpec::Fixed(2),
                MissingSpec::Fixed(4),
                MissingSpec::Fixed(6),
                MissingSpec::Fixed(8),
                MissingSpec::UpTo(4),
                MissingSpec::UpTo(8),
            ],
            impute: ImputeMode::PerColumn,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.folds < 2 {
            return Err(Error::config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be >= 1"));
        }
        for r in &self.regimes {
            r.validate()?;
        }
        Ok(())
    }

    fn runs(&self) -> Vec<(usize, u64)> {
        (0..self.folds)
            .flat_map(|f| self.seeds.iter().map(move |&s| (f, s)))
            .collect()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Config echo for reports: output location and worker count do not
    /// affect results and are left out.
    fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
            m.remove("jobs");
        }
        v
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))
}

/// Trains a standard and an ablation model for every (fold, seed); models are
/// returned fold-major, then by seed, standard before robust.
pub fn train_all(dataset: &Dataset, config: &ExperimentConfig) -> Result<Vec<TrainedModel>> {
    config.validate()?;
    config.train.check_geometry(dataset)?;
    let folds = session_kfold(&dataset.sessions(), config.folds)?;
    let prepared = folds
        .iter()
        .map(|f| prepare_fold(dataset, f).map_err(|e| e.in_run(f.index, config.seeds[0])))
        .collect::<Result<Vec<_>>>()?;
    let runs = config.runs();
    info!("training {} runs x 2 variants", runs.len());
    let per_run = pool(config.jobs)?.install(|| {
        runs.par_iter()
            .map(|&(fold, seed)| {
                let tc = config.train_config(seed);
                let p = &prepared[fold];
                let standard = train_prepared(p, &tc, Variant::Standard).map_err(|e| e.in_run(fold, seed))?;
                let robust = train_prepared(p, &tc, Variant::Robust).map_err(|e| e.in_run(fold, seed))?;
                Ok([standard, robust])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_run.into_iter().flatten().collect())
}

fn test_set(dataset: &Dataset, model: &TrainedModel) -> Result<FrameSet> {
    let records: Vec<&Record> = dataset
        .records
        .iter()
        .filter(|r| model.fold.test.contains(&r.session))
        .collect();
    if records.is_empty() {
        return Err(Error::config(format!("fold {} has no test frames", model.fold.index)));
    }
    let g = &dataset.geometry;
    FrameSet::build(&records, &model.stats, g.composite_rows(), g.composite_cols())
}

struct RunResult {
    rows: Vec<EvalRow>,
    mask_bytes: Vec<u8>,
}

fn evaluate_run(
    dataset: &Dataset,
    standard: &TrainedModel,
    robust: &TrainedModel,
    config: &ExperimentConfig,
) -> Result<RunResult> {
    let (fold, seed) = (standard.fold.index, standard.config.seed);
    if robust.fold != standard.fold || robust.stats != standard.stats {
        return Err(Error::config("standard and robust models were trained on different splits"));
    }
    let layout = dataset.layout()?;
    let test = test_set(dataset, standard)?;
    let oracle = evaluate_with_masks(standard, &test, &layout, Method::Oracle, &[], config.impute)?;
    let mut rows = Vec::new();
    let mut mask_bytes = Vec::new();
    let base = derive_seed(seed, fold as u64, Purpose::EvalMask);
    for &regime in &config.regimes {
        // masks depend only on (seed, fold, regime), so all methods see the same ones
        let masks = draw_masks(regime, test.len(), &mut stream(base, regime.key(), Purpose::EvalMask))?;
        for m in &masks {
            mask_bytes.push(m.k() as u8);
            mask_bytes.extend(m.indices().iter().map(|&i| i as u8));
        }
        for method in Method::ALL {
            let acc = match method {
                Method::Oracle => oracle,
                Method::Proposed => evaluate_with_masks(robust, &test, &layout, method, &masks, config.impute)?,
                _ => evaluate_with_masks(standard, &test, &layout, method, &masks, config.impute)?,
            };
            rows.push(EvalRow::new(method, regime, fold, seed, acc));
        }
    }
    info!("fold {fold} seed {seed}: oracle {oracle:.2}%");
    Ok(RunResult { rows, mask_bytes })
}

/// Scores every (fold, seed) pair of standard and robust models on its test
/// sessions under every configured regime.
pub fn evaluate_models(dataset: &Dataset, models: &[TrainedModel], config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let find = |fold: usize, seed: u64, v: Variant| {
        models
            .iter()
            .find(|m| m.fold.index == fold && m.config.seed == seed && m.variant == v)
            .ok_or_else(|| Error::config(format!("no {v} model for fold {fold}, seed {seed}")))
    };
    let mut pairs = Vec::new();
    let mut seen: Vec<(usize, u64)> = models.iter().map(|m| (m.fold.index, m.config.seed)).collect();
    seen.sort_unstable();
    seen.dedup();
    for (fold, seed) in seen {
        pairs.push((find(fold, seed, Variant::Standard)?, find(fold, seed, Variant::Robust)?));
    }
    if pairs.is_empty() {
        return Err(Error::config("no models to evaluate"));
    }
    let results = pool(config.jobs)?.install(|| {
        pairs
            .par_iter()
            .map(|(s, r)| evaluate_run(dataset, s, r, config).map_err(|e| e.in_run(s.fold.index, s.config.seed)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut hasher = Sha256::new();
    let mut rows = Vec::new();
    for r in results {
        hasher.update(&r.mask_bytes);
        rows.extend(r.rows);
    }
    let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let meta = ReportMeta {
        config: config.echo(),
        masks_digest: digest,
        dataset: config.dataset.as_ref().map(|p| p.display().to_string()),
    };
    EvalReport::new(rows, meta)
}

/// Trains and evaluates everything; the report averages over folds and seeds.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<(EvalReport, Vec<TrainedModel>)> {
    let models = train_all(dataset, config)?;
    let report = evaluate_models(dataset, &models, config)?;
    Ok((report, models))
}
