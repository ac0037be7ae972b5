//! Train-then-evaluate runs and the ALB-depth sweep.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::protocol::{extract_bank, run_protocol_on_bank, Direction, ProtocolConfig, ProtocolReport};
use crate::train::{EpochSummary, TrainLogRecord, Trainer};

/// Split by identity, holding out `cfg.eval.test_ids` identities.
pub fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let n = dataset.identities().len();
    if cfg.eval.test_ids == 0 || cfg.eval.test_ids >= n {
        return Err(Error::Config(format!(
            "eval.test_ids must lie in 1..{n} for a dataset of {n} identities, got {}",
            cfg.eval.test_ids
        )));
    }
    dataset.split_by_identity(n - cfg.eval.test_ids)
}

pub fn protocol_config(cfg: &RunConfig) -> ProtocolConfig {
    ProtocolConfig {
        trials: cfg.eval.trials,
        gallery_per_cam: cfg.eval.gallery_per_cam,
        max_rank: cfg.eval.max_rank,
        seed: cfg.seed,
    }
}

pub fn evaluate_model(
    model: &Model<f32>,
    test: &Dataset,
    cfg: &RunConfig,
    directions: &[Direction],
) -> Result<Vec<ProtocolReport>> {
    let bank = extract_bank(model, &test.records, (cfg.augment.target_h, cfg.augment.target_w), cfg.parallel)?;
    let pc = protocol_config(cfg);
    directions.iter().map(|&d| run_protocol_on_bank(&bank, d, &pc)).collect()
}

#[derive(Debug)]
pub struct RunResult {
    pub model: Model<f32>,
    pub epochs: Vec<EpochSummary>,
    /// Both directions, `v2t` first.
    pub reports: Vec<ProtocolReport>,
}

impl RunResult {
    /// Mean of the two directions' rank-1.
    pub fn rank1(&self) -> f64 {
        self.reports.iter().map(|r| r.mean.rank(1)).sum::<f64>() / self.reports.len() as f64
    }

    pub fn map(&self) -> f64 {
        self.reports.iter().map(|r| r.mean.map).sum::<f64>() / self.reports.len() as f64
    }
}

/// Train on the training split of `dataset` and evaluate both directions
/// on the held-out identities.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    dataset: &Dataset,
    log: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<RunResult> {
    let (train, test) = split(cfg, dataset)?;
    let mut trainer = Trainer::new(cfg.clone(), &train)?;
    let mut epochs = Vec::new();
    trainer.run(log, &mut |_, s| {
        epochs.push(s.clone());
        Ok(())
    })?;
    let cfg = trainer.cfg.clone();
    let model = trainer.into_model();
    let reports = evaluate_model(&model, &test, &cfg, &[Direction::V2T, Direction::T2V])?;
    Ok(RunResult { model, epochs, reports })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub num_alb: usize,
    pub multiscale: bool,
    pub rank1: f64,
    pub map: f64,
}

/// Train and evaluate every `num_alb` in `0..=5` with and without
/// multi-scale injection.
pub fn sweep_alb(
    cfg: &RunConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for num_alb in 0..=5 {
        for multiscale in [true, false] {
            let mut c = cfg.clone();
            c.model.num_alb = num_alb;
            c.model.multiscale = multiscale;
            let r = train_and_evaluate(&c, dataset, &mut |_| Ok(()))?;
            let row = SweepRow {
                num_alb,
                multiscale,
                rank1: r.rank1(),
                map: r.map(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("num_alb,multiscale,rank1,map\n");
    for r in rows {
        let ms = if r.multiscale { "on" } else { "off" };
        writeln!(s, "{},{ms},{:.6},{:.6}", r.num_alb, r.rank1, r.map).unwrap();
    }
    s
}
