//! Paired visible/infrared identity datasets: in-memory types, a synthetic
//! generator, and the on-disk format.

mod format;
mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use format::{load_dataset, write_dataset, DATA_FILE, MANIFEST_FILE, MANIFEST_VERSION};
pub use synth::{generate_dataset, render_infrared, render_visible, IdentityLatent, Pose, LATENT_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Visible (RGB), stored with 3 channels.
    Visible,
    /// Thermal / infrared, stored with a single channel.
    Infrared,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Visible => 3,
            Modality::Infrared => 1,
        }
    }

    pub fn tag(self) -> char {
        match self {
            Modality::Visible => 'V',
            Modality::Infrared => 'T',
        }
    }
}

/// Generator settings. Also serialized into the dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub num_identities: u32,
    pub samples_per_id_per_modality: u32,
    pub image_h: u32,
    pub image_w: u32,
    pub cams_per_modality: u32,
    /// 0 = infrared is exactly the luminance of the visible render; 1 = fully
    /// thermal-style contrast.
    pub modality_gap: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            num_identities: 32,
            samples_per_id_per_modality: 8,
            image_h: 96,
            image_w: 48,
            cams_per_modality: 2,
            modality_gap: 0.3,
            noise_std: 0.03,
            seed: 7,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Param("need ≥ 2 identities".into()));
        }
        if self.samples_per_id_per_modality < 1 {
            return Err(Error::Param("need ≥ 1 sample per identity and modality".into()));
        }
        if self.image_h < 8 || self.image_w < 8 {
            return Err(Error::Param(format!(
                "image must be at least 8x8, got {}x{}",
                self.image_h, self.image_w
            )));
        }
        if self.cams_per_modality < 1 {
            return Err(Error::Param("need ≥ 1 camera per modality".into()));
        }
        for (name, v) in [("modality_gap", self.modality_gap), ("noise_std", self.noise_std)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Param(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.modality_gap > 1.0 {
            return Err(Error::Param(format!("modality_gap must be ≤ 1, got {}", self.modality_gap)));
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.num_identities as usize * self.samples_per_id_per_modality as usize * 2
    }
}

/// One stored image. Pixels are interleaved `H x W x C` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub identity: u32,
    pub modality: Modality,
    pub camera: u32,
    pub height: u32,
    pub width: u32,
    pub pixels: Vec<u8>,
}

impl SampleRecord {
    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    /// Planar float image in `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let (h, w, c) = (self.height as usize, self.width as usize, self.channels());
        let mut data = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        Image { c, h, w, data }
    }
}

/// Planar (`C x H x W`) float image used by the augmentation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }
}

/// Anything that can hand the training pipeline labelled samples. Real
/// visible/infrared datasets can be adapted by implementing this trait.
pub trait SampleSource {
    fn records(&self) -> &[SampleRecord];
}

/// An in-memory dataset: generator parameters plus its records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: GenParams,
    pub records: Vec<SampleRecord>,
}

impl SampleSource for Dataset {
    fn records(&self) -> &[SampleRecord] {
        &self.records
    }
}

/// Record indices grouped by identity and modality.
#[derive(Clone, Debug, Default)]
pub struct IdentityIndex {
    pub by_id: BTreeMap<u32, [Vec<usize>; 2]>,
}

impl IdentityIndex {
    pub fn build(records: &[SampleRecord]) -> Self {
        let mut by_id: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_id.entry(r.identity).or_default()[r.modality.code() as usize].push(i);
        }
        IdentityIndex { by_id }
    }

    /// Identities with at least one sample in both modalities, ascending.
    pub fn eligible(&self) -> Vec<u32> {
        self.by_id
            .iter()
            .filter(|(_, m)| !m[0].is_empty() && !m[1].is_empty())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn samples(&self, id: u32, modality: Modality) -> &[usize] {
        self.by_id.get(&id).map(|m| &m[modality.code() as usize][..]).unwrap_or(&[])
    }
}

impl Dataset {
    pub fn index(&self) -> IdentityIndex {
        IdentityIndex::build(&self.records)
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Disjoint identity split: the `num_train` smallest identities go to the
    /// first dataset, the rest to the second.
    pub fn split_by_identity(&self, num_train: usize) -> Result<(Dataset, Dataset)> {
        let ids = self.identities();
        if num_train == 0 || num_train >= ids.len() {
            return Err(Error::Dataset(format!(
                "cannot split {} identities into {num_train} train identities and a non-empty test set",
                ids.len()
            )));
        }
        let cut = ids[num_train];
        let (train, test): (Vec<_>, Vec<_>) = self.records.iter().cloned().partition(|r| r.identity < cut);
        Ok((
            Dataset {
                params: self.params.clone(),
                records: train,
            },
            Dataset {
                params: self.params.clone(),
                records: test,
            },
        ))
    }
}
