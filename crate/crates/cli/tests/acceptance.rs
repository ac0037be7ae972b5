//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p mscm-cli --test acceptance -- 2 3`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mscm::checkpoint::{self, model_state, restore};
use mscm::config::RunConfig;
use mscm::data::{generate_dataset, load_dataset, write_dataset, Dataset, GenParams, DATA_FILE, MANIFEST_FILE};
use mscm::experiment::{sweep_alb, train_and_evaluate, RunResult};
use mscm::gradsuite::{run_suite, SuiteOptions};
use mscm::loss::{quar_distance, stream_centers, total_loss, DistanceMode, IdGroups, LossConfig};
use mscm::metrics::{evaluate, evaluate_distances, FeatureBank, Labels, RetrievalReport};
use mscm::model::{Alb, AlbSpec, Builder, Forward, Model, ModelConfig, QfeMode, StreamInputs};
use mscm::optim::ParamStore;
use mscm::data::Modality;
use mscm::tensor::{Graph, NormMode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    let results = run_suite(&SuiteOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in results.iter().filter(|r| !r.passed()) {
        o.check(false, r.to_string());
    }
    o.check(results.len() == mscm::gradsuite::CHECKS.len(), format!("{} checks", results.len()));
    o.check(results.iter().all(|r| r.seeds == 20), "20 seeds each");
    o.note(format!("worst max_rel_err {worst:.2e}"));
    o.check(elapsed <= Duration::from_secs(120), format!("runtime {:.1}s", elapsed.as_secs_f64()));
    o
}

// ---------------------------------------------------------------- 2

struct LossBatch {
    streams: [Vec<Vec<f64>>; 4],
    v_ids: Vec<u32>,
    t_ids: Vec<u32>,
}

fn loss_batch(rng: &mut ChaCha8Rng) -> LossBatch {
    let (p, k, dim) = (rng.gen_range(2..=8), rng.gen_range(1..=4), rng.gen_range(2..=12));
    let ids: Vec<u32> = (0..p as u32).map(|i| 5 * i + 2).collect();
    let v_ids: Vec<u32> = ids.iter().flat_map(|&i| vec![i; k]).collect();
    let mut t_ids = v_ids.clone();
    t_ids.shuffle(rng);
    let streams = [0; 4].map(|_| (0..p * k).map(|_| (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect());
    LossBatch { streams, v_ids, t_ids }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_of(rows: &[(&Vec<Vec<f64>>, &Vec<u32>)], id: u32) -> Vec<f64> {
    let dim = rows[0].0[0].len();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for (feats, ids) in rows {
        for (f, &i) in feats.iter().zip(ids.iter()) {
            if i == id {
                for d in 0..dim {
                    acc[d] += f[d];
                }
                n += 1;
            }
        }
    }
    acc.into_iter().map(|v| v / n as f64).collect()
}

/// `(d_quar, d_dual, l_nm)` by explicit loops over samples and identities.
fn naive_qct(b: &LossBatch, rho: f64) -> (f64, f64, f64) {
    let [vg, vc, tg, tc] = &b.streams;
    let (vi, ti) = (&b.v_ids, &b.t_ids);
    let mut quar = 0.0;
    // each stream is pulled to the gray center of the other modality
    for (feats, ids, anchor) in [(vg, vi, (tg, ti)), (vc, vi, (tg, ti)), (tg, ti, (vg, vi)), (tc, ti, (vg, vi))] {
        for (f, &id) in feats.iter().zip(ids.iter()) {
            quar += euclid(f, &mean_of(&[anchor], id));
        }
    }
    let mut dual = 0.0;
    for (feats, ids, other) in [(vg, vi, [(tg, ti), (tc, ti)]), (vc, vi, [(tg, ti), (tc, ti)]), (tg, ti, [(vg, vi), (vc, vi)]), (tc, ti, [(vg, vi), (vc, vi)])] {
        for (f, &id) in feats.iter().zip(ids.iter()) {
            dual += euclid(f, &mean_of(&other, id));
        }
    }
    let mut uniq = vi.clone();
    uniq.sort();
    uniq.dedup();
    let mut nm = 0.0;
    for (feats, ids) in [(vg, vi), (vc, vi), (tg, ti), (tc, ti)] {
        for (f, &id) in feats.iter().zip(ids.iter()) {
            for &other in uniq.iter().filter(|&&u| u != id) {
                for modality in [[(vg, vi), (vc, vi)], [(tg, ti), (tc, ti)]] {
                    nm += (rho - euclid(f, &mean_of(&modality, other))).max(0.0);
                }
            }
        }
    }
    (quar, dual, nm)
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.iter().flatten().copied().collect()).unwrap()
}

fn loss_oracles() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = LossConfig {
        margin_rho: 0.7,
        ..LossConfig::default()
    };
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let b = loss_batch(&mut rng);
        let mut g = Graph::<f64>::new();
        let groups = IdGroups::new(&b.v_ids, &b.t_ids).unwrap();
        let s = b.streams.clone().map(|x| g.constant(to_tensor(&x)));
        let n = 4 * b.v_ids.len();
        let logits = g.constant(Tensor::zeros(&[n, 3]));
        let v = total_loss(&mut g, &s, logits, &vec![0; n], &groups, &cfg).unwrap().values(&g);
        let (q, d, nm) = naive_qct(&b, cfg.margin_rho);
        let err = (v.d_quar - q).abs().max((v.d_dual - d).abs()).max((v.l_nm - nm).abs());
        worst = worst.max(err);
        if err >= 1e-6 {
            o.check(false, format!("batch {trial}: quar {} vs {q}, dual {} vs {d}, nm {} vs {nm}", v.d_quar, v.d_dual, v.l_nm));
        }
    }
    o.check(worst < 1e-6, format!("50 batches, max abs err {worst:.1e}"));

    let mut g = Graph::<f64>::new();
    let groups = IdGroups::new(&[0], &[0]).unwrap();
    let pts = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [2.0, 0.0]];
    let s = pts.map(|p| g.constant(Tensor::new(vec![1, 2], p.to_vec()).unwrap()));
    let c = stream_centers(&mut g, &s, &groups).unwrap();
    let dq = quar_distance(&mut g, &s, &c, &groups, DistanceMode::Norm).unwrap();
    let dq = g.value(dq).item();
    o.check(dq == 4.0, format!("worked D^quar = {dq}"));
    o
}

// ---------------------------------------------------------------- 3

/// Per-query reference: each gallery item's rank is one plus the number of
/// kept items ordered before it.
fn naive_eval(q: &FeatureBank, g: &FeatureBank, max_rank: usize) -> Option<RetrievalReport> {
    let mut cmc = vec![0.0; max_rank];
    let (mut ap, mut inp, mut valid) = (0.0, 0.0, 0usize);
    for i in 0..q.len() {
        let d: Vec<f64> = (0..g.len())
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(g.row(j))
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let kept: Vec<usize> = (0..g.len()).filter(|&j| !(g.ids[j] == q.ids[i] && g.cams[j] == q.cams[i])).collect();
        let mut ranks: Vec<usize> = kept
            .iter()
            .filter(|&&j| g.ids[j] == q.ids[i])
            .map(|&j| 1 + kept.iter().filter(|&&o| d[o] < d[j] || (d[o] == d[j] && o < j)).count())
            .collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort();
        valid += 1;
        for (k, c) in cmc.iter_mut().enumerate() {
            if ranks[0] <= k + 1 {
                *c += 1.0;
            }
        }
        let mut s = 0.0;
        for (m, &r) in ranks.iter().enumerate() {
            s += (m + 1) as f64 / r as f64;
        }
        ap += s / ranks.len() as f64;
        inp += ranks.len() as f64 / *ranks.last().unwrap() as f64;
    }
    (valid > 0).then(|| {
        let v = valid as f64;
        RetrievalReport {
            cmc: cmc.into_iter().map(|c| c / v).collect(),
            map: ap / v,
            minp: inp / v,
            num_valid_queries: valid,
            num_dropped_queries: q.len() - valid,
        }
    })
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, dim: usize, ids: i32, modality: Modality) -> FeatureBank {
    // small integers keep every distance exact
    FeatureBank::new(
        dim,
        (0..n * dim).map(|_| rng.gen_range(-3..=3) as f32).collect(),
        (0..n).map(|_| rng.gen_range(0..ids)).collect(),
        (0..n).map(|_| rng.gen_range(0..3)).collect(),
        vec![modality; n],
    )
    .unwrap()
}

fn metric_oracles() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut compared, mut mismatched) = (0, 0);
    for bank in 0..100 {
        let dim = rng.gen_range(1..=4);
        let ids = rng.gen_range(2..8);
        let (nq, ng) = (rng.gen_range(1..15), rng.gen_range(1..30));
        let q = random_bank(&mut rng, nq, dim, ids, Modality::Visible);
        let g = random_bank(&mut rng, ng, dim, ids, Modality::Infrared);
        let fast = evaluate(&q, &g, 10);
        match naive_eval(&q, &g, 10) {
            Some(r) => {
                compared += 1;
                if fast.as_ref().ok() != Some(&r) {
                    mismatched += 1;
                    o.check(false, format!("bank {bank}: {fast:?} vs {r:?}"));
                }
            }
            None => {
                if fast.is_ok() {
                    mismatched += 1;
                    o.check(false, format!("bank {bank}: expected no valid query"));
                }
            }
        }
    }
    o.check(mismatched == 0, format!("100 banks, {compared} with valid queries, {mismatched} mismatches"));

    let lab = |ids: &'static [i32], cams: &'static [i32]| Labels { ids, cams };
    let r = evaluate_distances(&[0.1, 0.2, 0.3, 0.4], lab(&[7], &[0]), lab(&[7, 1, 7, 2], &[1, 1, 1, 1]), 4).unwrap();
    let ap_ok = (r.map - 5.0 / 6.0).abs() <= f64::EPSILON / 2.0;
    o.check(ap_ok && r.minp == 2.0 / 3.0 && r.cmc[0] == 1.0, format!("worked AP {} INP {}", r.map, r.minp));
    o
}

// ---------------------------------------------------------------- 4, 5

fn desk_run(seed: u64, edit: impl FnOnce(&mut RunConfig)) -> (RunResult, Duration) {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    edit(&mut cfg);
    let data = generate_dataset(&GenParams {
        num_identities: 48,
        seed,
        ..GenParams::default()
    })
    .unwrap();
    let start = Instant::now();
    let r = train_and_evaluate(&cfg, &data, &mut |_| Ok(())).unwrap();
    (r, start.elapsed())
}

fn end_to_end(full7: &RunResult, elapsed: Duration) -> Outcome {
    let mut o = Outcome::new();
    for rep in &full7.reports {
        let (r1, map) = (rep.mean.rank(1), rep.mean.map);
        o.check(r1 >= 0.80, format!("{} rank1 {r1:.3}", rep.direction));
        o.check(map >= 0.70, format!("{} mAP {map:.3}", rep.direction));
    }
    o.note("chance 0.0625".to_string());
    let first = full7.epochs.first().unwrap().mean_total;
    let last = full7.epochs.last().unwrap().mean_total;
    o.check(last < first, format!("L_total {first:.2} -> {last:.2}"));
    o.check(elapsed <= Duration::from_secs(15 * 60), format!("runtime {:.0}s", elapsed.as_secs_f64()));
    o
}

fn ablations(full7: Option<RunResult>) -> Outcome {
    let mut o = Outcome::new();
    let seeds = [7u64, 8, 9];
    let mut maps = [[0.0; 3]; 3];
    for (si, &seed) in seeds.iter().enumerate() {
        maps[0][si] = match (&full7, seed) {
            (Some(r), 7) => r.map(),
            _ => desk_run(seed, |_| {}).0.map(),
        };
        maps[1][si] = desk_run(seed, |c| c.model.mimb = false).0.map();
        maps[2][si] = desk_run(seed, |c| c.model.qfe = QfeMode::Dual).0.map();
    }
    let mean = |m: &[f64; 3]| m.iter().sum::<f64>() / 3.0;
    let (full, no_mimb, dual) = (mean(&maps[0]), mean(&maps[1]), mean(&maps[2]));
    o.note(format!("full {:?}", maps[0].map(|v| (v * 1e4).round() / 1e4)));
    o.check(full - no_mimb >= -0.01, format!("full {full:.4} - no-MIMB {no_mimb:.4} = {:+.4}", full - no_mimb));
    o.check(full - dual >= -0.01, format!("full {full:.4} - dual QFE {dual:.4} = {:+.4}", full - dual));
    o
}

// ---------------------------------------------------------------- 6

fn desk_inputs(b: usize, seed: u64) -> StreamInputs<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StreamInputs {
        streams: [0; 4].map(|_| Tensor::from_fn(&[b, 3, 96, 48], |_| rng.gen_range(0.0..1.0))),
    }
}

fn train_outputs(model: &Model<f32>, inputs: &StreamInputs<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let mut g = Graph::new();
    let out = {
        let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
        model.forward_train(&mut fw, inputs).unwrap()
    };
    (g.value(out.embeddings).clone(), g.value(out.logits).clone())
}

fn tiny_cfg() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        stage_channels: vec![2, 4, 4, 4, 4],
        stage_strides: vec![2, 2, 2, 2, 1],
        attn_dim: 4,
        attn_heads: 2,
        token_grid: (2, 1),
        embed_dim: 4,
        ..ModelConfig::default()
    };
    cfg.augment.target_h = 32;
    cfg.augment.target_w = 16;
    cfg.sampler.ids_per_batch = 2;
    cfg.sampler.v_per_id = 2;
    cfg.sampler.t_per_id = 2;
    cfg.epochs = 1;
    cfg.schedule.milestones = vec![];
    cfg.eval.test_ids = 4;
    cfg.eval.trials = 3;
    cfg.eval.max_rank = 4;
    let data = generate_dataset(&GenParams {
        num_identities: 10,
        samples_per_id_per_modality: 3,
        image_h: 32,
        image_w: 16,
        ..GenParams::default()
    })
    .unwrap();
    (cfg, data)
}

fn mimb_structure() -> Outcome {
    let mut o = Outcome::new();
    let inputs = desk_inputs(2, 3);
    let mut base = ModelConfig::default();
    base.num_classes = 32;
    let zero = Model::<f32>::new(ModelConfig { num_alb: 0, ..base.clone() }, 7).unwrap();
    let off = Model::<f32>::new(ModelConfig { mimb: false, ..base.clone() }, 7).unwrap();
    o.check(train_outputs(&zero, &inputs) == train_outputs(&off, &inputs), "num_alb=0 forward == MIMB off");

    let (cfg, data) = tiny_cfg();
    let banks: Vec<_> = [|c: &mut RunConfig| c.model.num_alb = 0, |c: &mut RunConfig| c.model.mimb = false]
        .into_iter()
        .map(|edit| {
            let mut c = cfg.clone();
            edit(&mut c);
            train_and_evaluate(&c, &data, &mut |_| Ok(())).unwrap().reports
        })
        .collect();
    o.check(banks[0] == banks[1], "num_alb=0 trained reports == MIMB off");

    let spec = AlbSpec {
        deep_channels: 32,
        shallow_channels: 8,
        dim: 16,
        heads: 2,
        grid: (6, 3),
        mix_alpha: 0.1,
    };
    let mut store = ParamStore::<f64>::new();
    let alb = Alb::new(&mut Builder::new(&mut store, 11), "alb", spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in store.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let mut zeroed = alb.attn.params().to_vec();
    zeroed.extend(alb.out.params());
    for id in zeroed {
        store.param_mut(id).value.data_mut().fill(0.0);
    }
    let f = Tensor::<f64>::from_fn(&[4, 32, 12, 6], |_| rng.gen_range(-2.0..2.0));
    let shallow = Tensor::<f64>::from_fn(&[4, 8, 48, 24], |_| rng.gen_range(-2.0..2.0));
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &store, NormMode::Train, false);
    let fv = fw.graph.constant(f.clone());
    let gv = fw.graph.constant(shallow);
    let out = alb.forward(&mut fw, fv, gv).unwrap().out;
    o.check(g.value(out) == &f, "zeroed-branch ALB is identity");

    let sweep = |c: &RunConfig| sweep_alb(c, &data, &mut |_| {}).unwrap();
    let a = sweep(&cfg);
    let b = sweep(&cfg);
    o.check(a.len() == 12, format!("sweep rows {}", a.len()));
    let grid: Vec<(usize, bool)> = a.iter().map(|r| (r.num_alb, r.multiscale)).collect();
    let expected: Vec<(usize, bool)> = (0..=5).flat_map(|n| [(n, true), (n, false)]).collect();
    o.check(grid == expected, "sweep grid num_alb 0..=5 x multiscale");
    o.check(a == b, "sweep deterministic");
    o
}

// ---------------------------------------------------------------- 7

fn mscm(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mscm")).current_dir(dir).args(args).output().unwrap()
}

fn exit(o: &std::process::Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const TINY: &str = "\
model.stage_channels = 2,4,4,4,4
model.stage_strides = 2,2,2,2,1
model.attn_dim = 4
model.attn_heads = 2
model.token_grid = 2x1
model.embed_dim = 4
augment.target_size = 32x16
sampler.ids_per_batch = 2
sampler.v_per_id = 2
sampler.t_per_id = 2
eval.test_ids = 4
eval.trials = 3
train.epochs = 2
schedule.milestones = 1
";

fn with_flipped(src: &Path, dst: &Path, at: impl FnOnce(&mut Vec<u8>)) {
    let mut bytes = fs::read(src).unwrap();
    at(&mut bytes);
    fs::write(dst, bytes).unwrap();
}

fn reproducibility() -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.cfg"), TINY).unwrap();
    let gen = mscm(p, &["gen-data", "--ids", "10", "--per-id", "3", "--size", "32x16", "--out", "d"]);
    o.check(exit(&gen) == 0, "gen-data");
    for out in ["a", "b"] {
        let t = mscm(p, &["train", "--config", "tiny.cfg", "--data", "d", "--out", out]);
        o.check(exit(&t) == 0, format!("train {out}"));
    }
    let same = |f: &str| fs::read(p.join("a").join(f)).ok() == fs::read(p.join("b").join(f)).ok();
    o.check(same("final.ck"), "fixed-seed checkpoints byte-identical");
    let log = |d: &str| -> Vec<String> {
        let text = fs::read_to_string(p.join(d).join("train.log")).unwrap_or_default();
        text.lines().map(|l| l.split(" wall_ms=").next().unwrap().to_string()).collect()
    };
    o.check(!log("a").is_empty() && log("a") == log("b"), "train logs identical apart from wall_ms");

    let ck = fs::read(p.join("a/final.ck")).unwrap();
    let tensors = checkpoint::decode(&ck).unwrap();
    o.check(checkpoint::encode(&tensors).unwrap() == ck, "checkpoint decode/encode bit-exact");
    let cfg = RunConfig::load(&p.join("a/run.cfg")).unwrap();
    let mut model = Model::<f32>::new(cfg.model.clone(), 0).unwrap();
    let epochs = restore(&mut model, tensors).unwrap();
    o.check(checkpoint::encode(&model_state(&model, epochs).unwrap()).unwrap() == ck, "model restore/save bit-exact");

    let data = load_dataset(&p.join("d")).unwrap();
    let regenerated = generate_dataset(&data.params).unwrap();
    o.check(data == regenerated, "dataset load == regenerate");
    write_dataset(&data, &p.join("d2")).unwrap();
    let files_same = [MANIFEST_FILE, DATA_FILE].iter().all(|f| fs::read(p.join("d").join(f)).unwrap() == fs::read(p.join("d2").join(f)).unwrap());
    o.check(files_same, "dataset write/load bit-exact");

    let eval = |ck: &str| mscm(p, &["eval", "--checkpoint", ck, "--data", "d", "--out", "rep"]);
    o.check(exit(&eval("a/final.ck")) == 0, "eval intact checkpoint");
    with_flipped(&p.join("a/final.ck"), &p.join("flip.ck"), |b| {
        let mid = b.len() / 2;
        b[mid] ^= 0x10;
    });
    let e = eval("flip.ck");
    o.check(exit(&e) == 3 && String::from_utf8_lossy(&e.stderr).contains("checksum"), format!("corrupt checkpoint exit {}", exit(&e)));
    with_flipped(&p.join("a/final.ck"), &p.join("v9.ck"), |b| b[4..8].copy_from_slice(&9u32.to_le_bytes()));
    o.check(exit(&eval("v9.ck")) == 5, format!("checkpoint version exit {}", exit(&eval("v9.ck"))));

    fs::create_dir_all(p.join("bad")).unwrap();
    fs::copy(p.join("d").join(MANIFEST_FILE), p.join("bad").join(MANIFEST_FILE)).unwrap();
    with_flipped(&p.join("d").join(DATA_FILE), &p.join("bad").join(DATA_FILE), |b| b[3] ^= 1);
    let t = mscm(p, &["train", "--config", "tiny.cfg", "--data", "bad", "--out", "x"]);
    o.check(exit(&t) == 3 && String::from_utf8_lossy(&t.stderr).contains("checksum"), format!("corrupt dataset exit {}", exit(&t)));
    o
}

// ----------------------------------------------------------------

fn report(n: usize, title: &str, o: &Outcome) -> bool {
    let pass = o.failures.is_empty();
    let mut detail = o.notes.join("; ");
    if !pass {
        detail = format!("{}; passed: {detail}", o.failures.join("; "));
    }
    println!("[{}] criterion {n} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results = Vec::new();

    if want(1) {
        results.push(report(1, "gradient suite", &gradients()));
    }
    if want(2) {
        results.push(report(2, "loss oracles", &loss_oracles()));
    }
    if want(3) {
        results.push(report(3, "metric oracles", &metric_oracles()));
    }
    let mut full7 = None;
    if want(4) {
        let (r, t) = desk_run(7, |_| {});
        results.push(report(4, "end-to-end learning", &end_to_end(&r, t)));
        full7 = Some(r);
    }
    if want(5) {
        results.push(report(5, "ablation direction", &ablations(full7)));
    }
    if want(6) {
        results.push(report(6, "MIMB structure", &mimb_structure()));
    }
    if want(7) {
        results.push(report(7, "reproducibility and formats", &reproducibility()));
    }

    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
