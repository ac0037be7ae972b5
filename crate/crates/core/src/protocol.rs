//! Cross-modal retrieval protocol: embed a test split, then average
//! several trials with freshly sampled galleries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{eval_views, stack_images};
use crate::data::{Modality, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, FeatureBank, RetrievalReport};
use crate::model::Model;

/// Rows embedded per forward pass.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Visible queries against an infrared gallery.
    V2T,
    /// Infrared queries against a visible gallery.
    T2V,
}

impl Direction {
    pub fn query(self) -> Modality {
        match self {
            Direction::V2T => Modality::Visible,
            Direction::T2V => Modality::Infrared,
        }
    }

    pub fn gallery(self) -> Modality {
        match self {
            Direction::V2T => Modality::Infrared,
            Direction::T2V => Modality::Visible,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2t" => Ok(Direction::V2T),
            "t2v" => Ok(Direction::T2V),
            _ => Err(Error::Config(format!("unknown direction `{s}` (v2t|t2v)"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::V2T => "v2t",
            Direction::T2V => "t2v",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub trials: usize,
    pub gallery_per_cam: usize,
    pub max_rank: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub direction: Direction,
    pub mean: RetrievalReport,
    pub trials: Vec<RetrievalReport>,
}

/// Embed every record with the eval path. Rows keep the record order.
/// Each row depends only on its own image, so chunking and `parallel` do
/// not change the values.
pub fn extract_bank(
    model: &Model<f32>,
    records: &[SampleRecord],
    target: (usize, usize),
    parallel: bool,
) -> Result<FeatureBank> {
    if model.is_training() {
        return Err(Error::Usage("extract_bank needs a model in eval mode".into()));
    }
    let mut chunks: Vec<(Modality, Vec<usize>)> = Vec::new();
    for m in [Modality::Visible, Modality::Infrared] {
        let rows: Vec<usize> = (0..records.len()).filter(|&i| records[i].modality == m).collect();
        chunks.extend(rows.chunks(EVAL_CHUNK).map(|c| (m, c.to_vec())));
    }
    let embed = |(m, rows): &(Modality, Vec<usize>)| -> Result<Vec<f32>> {
        let mut gs = Vec::with_capacity(rows.len());
        let mut cs = Vec::with_capacity(rows.len());
        for &i in rows {
            let (g, c) = eval_views(&records[i], target.0, target.1)?;
            gs.push(g);
            cs.push(c);
        }
        let out = model.forward_eval(&stack_images(&gs)?, &stack_images(&cs)?, *m == Modality::Infrared)?;
        Ok(out.into_data())
    };
    let outputs: Vec<Vec<f32>> = if parallel {
        chunks.par_iter().map(embed).collect::<Result<_>>()?
    } else {
        chunks.iter().map(embed).collect::<Result<_>>()?
    };
    let dim = model.cfg.feature_channels();
    let mut embeddings = vec![0.0f32; records.len() * dim];
    for ((_, rows), out) in chunks.iter().zip(&outputs) {
        for (k, &i) in rows.iter().enumerate() {
            embeddings[i * dim..(i + 1) * dim].copy_from_slice(&out[k * dim..(k + 1) * dim]);
        }
    }
    FeatureBank::new(
        dim,
        embeddings,
        records.iter().map(|r| r.identity as i32).collect(),
        records.iter().map(|r| r.camera as i32).collect(),
        records.iter().map(|r| r.modality).collect(),
    )
}

/// Gallery rows for one trial: up to `per_cam` rows for every identity and
/// camera of the gallery modality, in ascending row order.
pub fn sample_gallery(bank: &FeatureBank, modality: Modality, per_cam: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: BTreeMap<(i32, i32), Vec<usize>> = BTreeMap::new();
    for i in 0..bank.len() {
        if bank.modality[i] == modality {
            groups.entry((bank.ids[i], bank.cams[i])).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for rows in groups.values() {
        let k = per_cam.min(rows.len());
        let mut picked: Vec<usize> = sample(rng, rows.len(), k).into_iter().map(|j| rows[j]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out.sort_unstable();
    out
}

/// Evaluate one direction on a precomputed bank.
pub fn run_protocol_on_bank(bank: &FeatureBank, direction: Direction, cfg: &ProtocolConfig) -> Result<ProtocolReport> {
    if cfg.trials == 0 || cfg.gallery_per_cam == 0 {
        return Err(Error::Config("protocol needs at least one trial and one gallery image per camera".into()));
    }
    let query_rows: Vec<usize> = (0..bank.len()).filter(|&i| bank.modality[i] == direction.query()).collect();
    let has_gallery = bank.modality.iter().any(|&m| m == direction.gallery());
    if query_rows.is_empty() || !has_gallery {
        return Err(Error::Dataset(format!(
            "test split lacks {} samples for direction {direction}",
            if query_rows.is_empty() { direction.query() } else { direction.gallery() }.tag()
        )));
    }
    let query = bank.select(&query_rows);
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64);
        let gallery = bank.select(&sample_gallery(bank, direction.gallery(), cfg.gallery_per_cam, &mut rng));
        trials.push(evaluate(&query, &gallery, cfg.max_rank)?);
    }
    Ok(ProtocolReport {
        direction,
        mean: RetrievalReport::mean(&trials)?,
        trials,
    })
}

/// Embed `records` with `model` and evaluate one direction.
pub fn run_protocol(
    model: &Model<f32>,
    records: &[SampleRecord],
    direction: Direction,
    cfg: &ProtocolConfig,
    target: (usize, usize),
) -> Result<ProtocolReport> {
    let bank = extract_bank(model, records, target, false)?;
    run_protocol_on_bank(&bank, direction, cfg)
}
