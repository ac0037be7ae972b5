//! Identity-balanced cross-modal batch sampling.

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;

use crate::data::{IdentityIndex, Modality};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Identities per batch (`P`).
    pub ids_per_batch: usize,
    pub v_per_id: usize,
    pub t_per_id: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ids_per_batch: 6,
            v_per_id: 4,
            t_per_id: 4,
            seed: 7,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 {
            return Err(Error::Config(format!(
                "sampler needs at least 2 identities per batch, got {}",
                self.ids_per_batch
            )));
        }
        if self.v_per_id == 0 || self.t_per_id == 0 {
            return Err(Error::Config("sampler needs at least one sample per identity and modality".into()));
        }
        Ok(())
    }
}

/// Record indices of one batch, identity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub ids: Vec<u32>,
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
}

fn draw(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= k {
        sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Draw samples for the given identities: without replacement where an
/// identity has enough samples, with replacement otherwise.
pub fn samples_for_ids(index: &IdentityIndex, ids: &[u32], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<BatchIndices> {
    let mut out = BatchIndices {
        ids: ids.to_vec(),
        visible: Vec::with_capacity(ids.len() * cfg.v_per_id),
        infrared: Vec::with_capacity(ids.len() * cfg.t_per_id),
    };
    for &id in ids {
        let v = index.samples(id, Modality::Visible);
        let t = index.samples(id, Modality::Infrared);
        if v.is_empty() || t.is_empty() {
            return Err(Error::Dataset(format!("identity {id} lacks samples in one modality")));
        }
        out.visible.extend(draw(v, cfg.v_per_id, rng));
        out.infrared.extend(draw(t, cfg.t_per_id, rng));
    }
    Ok(out)
}

/// Draw `P` distinct identities uniformly and their samples.
pub fn sample_identity_batch(index: &IdentityIndex, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<BatchIndices> {
    cfg.validate()?;
    let eligible = index.eligible();
    if eligible.len() < cfg.ids_per_batch {
        return Err(Error::Dataset(format!(
            "need {} identities with both modalities, dataset has {}",
            cfg.ids_per_batch,
            eligible.len()
        )));
    }
    let ids: Vec<u32> = sample(rng, eligible.len(), cfg.ids_per_batch)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    samples_for_ids(index, &ids, cfg, rng)
}

/// Identity lists for one epoch: `ceil(N / P)` batches over a shuffled
/// permutation. A short final batch is topped up from a fresh permutation,
/// skipping identities it already holds.
pub fn epoch_id_batches(index: &IdentityIndex, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>> {
    cfg.validate()?;
    let mut eligible = index.eligible();
    let p = cfg.ids_per_batch;
    if eligible.len() < p {
        return Err(Error::Dataset(format!(
            "need {p} identities with both modalities, dataset has {}",
            eligible.len()
        )));
    }
    eligible.shuffle(rng);
    let mut batches: Vec<Vec<u32>> = eligible.chunks(p).map(<[u32]>::to_vec).collect();
    let last = batches.last_mut().expect("at least one batch");
    if last.len() < p {
        let mut fresh = index.eligible();
        fresh.shuffle(rng);
        for id in fresh {
            if last.len() == p {
                break;
            }
            if !last.contains(&id) {
                last.push(id);
            }
        }
    }
    Ok(batches)
}

/// All batches of one epoch.
pub fn epoch_batches(index: &IdentityIndex, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<BatchIndices>> {
    epoch_id_batches(index, cfg, rng)?
        .iter()
        .map(|ids| samples_for_ids(index, ids, cfg, rng))
        .collect()
}
