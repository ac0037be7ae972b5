//! The training loop: identity-balanced batches, the four augmented streams,
//! identity plus QCT loss, SGD with a step schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{make_stream_batch, StreamBatch};
use crate::checkpoint::{self, NamedTensors};
use crate::config::RunConfig;
use crate::data::{Dataset, IdentityIndex, SampleRecord};
use crate::error::{Error, Result};
use crate::loss::{total_loss, IdGroups, LossValues};
use crate::model::{Forward, Model, StreamInputs};
use crate::optim::sgd_step;
use crate::sampler::{epoch_batches, BatchIndices};
use crate::tensor::{Graph, NormMode};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_id: f64,
    pub d_quar: f64,
    pub d_dual: f64,
    pub l_nm: f64,
    pub l_total: f64,
    pub wall_ms: u64,
}

impl fmt::Display for TrainLogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:e} l_id={:.9e} d_quar={:.9e} d_dual={:.9e} l_nm={:.9e} l_total={:.9e} wall_ms={}",
            self.step, self.epoch, self.lr, self.l_id, self.d_quar, self.d_dual, self.l_nm, self.l_total, self.wall_ms
        )
    }
}

impl FromStr for TrainLogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::format("train log", format!("bad field `{part}`")))?;
            fields.insert(k, v);
        }
        fn get<T: FromStr>(fields: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("train log", format!("missing or invalid `{k}`")))
        }
        Ok(TrainLogRecord {
            step: get(&fields, "step")?,
            epoch: get(&fields, "epoch")?,
            lr: get(&fields, "lr")?,
            l_id: get(&fields, "l_id")?,
            d_quar: get(&fields, "d_quar")?,
            d_dual: get(&fields, "d_dual")?,
            l_nm: get(&fields, "l_nm")?,
            l_total: get(&fields, "l_total")?,
            wall_ms: get(&fields, "wall_ms")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
}

/// Random stream for a zero-based epoch; independent of earlier epochs so a
/// resumed run sees the same batches.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    records: Vec<SampleRecord>,
    index: IdentityIndex,
    classes: BTreeMap<u32, usize>,
    epochs_done: usize,
    step: usize,
}

impl Trainer {
    /// A freshly initialised model for `train`. The classifier width is
    /// taken from the number of training identities.
    pub fn new(mut cfg: RunConfig, train: &Dataset) -> Result<Self> {
        let index = train.index();
        let ids = index.eligible();
        if ids.len() < cfg.sampler.ids_per_batch {
            return Err(Error::Dataset(format!(
                "training split has {} identities with both modalities, batches need {}",
                ids.len(),
                cfg.sampler.ids_per_batch
            )));
        }
        cfg.model.num_classes = ids.len();
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        Ok(Trainer {
            classes: ids.iter().enumerate().map(|(c, &id)| (id, c)).collect(),
            records: train.records.clone(),
            index,
            model,
            cfg,
            epochs_done: 0,
            step: 0,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::state`].
    pub fn resume(cfg: RunConfig, train: &Dataset, state: NamedTensors) -> Result<Self> {
        let mut t = Trainer::new(cfg, train)?;
        t.epochs_done = checkpoint::restore(&mut t.model, state)?;
        t.step = t.epochs_done * t.batches_per_epoch();
        Ok(t)
    }

    pub fn state(&self) -> Result<NamedTensors> {
        checkpoint::model_state(&self.model, self.epochs_done)
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.cfg.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.classes.len().div_ceil(self.cfg.sampler.ids_per_batch)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.cfg.schedule.lr_at(self.cfg.optimizer.lr, epoch)
    }

    /// Class label of each row of the `4B` logits (`vg, vc, tg, tc`).
    fn labels(&self, batch: &StreamBatch) -> Result<Vec<usize>> {
        let class = |id: &u32| {
            self.classes
                .get(id)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("identity {id} is not a training class")))
        };
        let v: Vec<usize> = batch.v_ids().iter().map(class).collect::<Result<_>>()?;
        let t: Vec<usize> = batch.t_ids().iter().map(class).collect::<Result<_>>()?;
        Ok([&v[..], &v, &t, &t].concat())
    }

    /// Build the augmented stream batches of one epoch.
    pub fn epoch_stream_batches(&self, epoch: usize) -> Result<Vec<StreamBatch>> {
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let batches = epoch_batches(&self.index, &self.cfg.sampler, &mut rng)?;
        let seeded: Vec<(u64, BatchIndices)> = batches.into_iter().map(|b| (rng.gen(), b)).collect();
        let prep = |(seed, b): &(u64, BatchIndices)| {
            let v: Vec<&SampleRecord> = b.visible.iter().map(|&i| &self.records[i]).collect();
            let t: Vec<&SampleRecord> = b.infrared.iter().map(|&i| &self.records[i]).collect();
            make_stream_batch(&v, &t, &self.cfg.augment, &mut ChaCha8Rng::seed_from_u64(*seed))
        };
        if self.cfg.parallel {
            seeded.par_iter().map(prep).collect()
        } else {
            seeded.iter().map(prep).collect()
        }
    }

    /// Forward, backward and one SGD update on `batch`.
    pub fn train_step(&mut self, batch: &StreamBatch, lr: f64) -> Result<LossValues> {
        let labels = self.labels(batch)?;
        let groups = IdGroups::new(batch.v_ids(), batch.t_ids())?;
        let inputs = StreamInputs::from_batch(batch);
        let mut graph = Graph::new();
        let (terms, binding) = {
            let mut fw = Forward::new(&mut graph, &self.model.store, NormMode::Train, true);
            let out = self.model.forward_train(&mut fw, &inputs)?;
            let terms = total_loss(fw.graph, &out.streams, out.logits, &labels, &groups, &self.cfg.loss)?;
            (terms, fw.finish())
        };
        let values = terms.values(&graph);
        if !values.total.is_finite() {
            return Err(Error::Divergence { step: self.step });
        }
        graph.backward(terms.total)?;
        binding.write_grads(&graph, &mut self.model.store)?;
        binding.update_running_stats(&mut self.model.store);
        let o = &self.cfg.optimizer;
        // parameters outside the active graph (a disabled MIMB) stay frozen
        for p in self.model.store.params_mut().iter_mut().filter(|p| p.grad.is_some()) {
            sgd_step(std::slice::from_mut(p), lr, o.momentum, o.weight_decay)?;
        }
        self.step += 1;
        Ok(values)
    }

    /// Run the next epoch, reporting every step to `log`.
    pub fn train_epoch(&mut self, log: &mut dyn FnMut(&TrainLogRecord) -> Result<()>) -> Result<EpochSummary> {
        let epoch = self.epochs_done;
        let lr = self.lr_at(epoch);
        self.model.set_training(true);
        let batches = self.epoch_stream_batches(epoch)?;
        let mut sum = 0.0;
        for batch in &batches {
            let start = Instant::now();
            let v = self.train_step(batch, lr)?;
            sum += v.total;
            log(&TrainLogRecord {
                step: self.step - 1,
                epoch,
                lr,
                l_id: v.l_id,
                d_quar: v.d_quar,
                d_dual: v.d_dual,
                l_nm: v.l_nm,
                l_total: v.total,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
        }
        self.epochs_done += 1;
        self.model.set_training(false);
        Ok(EpochSummary {
            epoch,
            lr,
            steps: batches.len(),
            mean_total: sum / batches.len() as f64,
        })
    }

    /// Train until the epoch budget is spent.
    pub fn run(
        &mut self,
        log: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Trainer, &EpochSummary) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let summary = self.train_epoch(log)?;
            on_epoch(self, &summary)?;
        }
        self.model.set_training(false);
        Ok(())
    }

    pub fn into_model(mut self) -> Model<f32> {
        self.model.set_training(false);
        self.model
    }
}
