mod common;

use common::*;
use mscm::model::*;
use mscm::tensor::{grad_check, GradCheckOptions, Graph, NormMode, Tensor, Var};
use mscm::loss::{total_loss, IdGroups, LossConfig};
use mscm::optim::ParamStore;

fn train_forward(model: &Model<f32>, inputs: &StreamInputs<f32>) -> (Graph<f32>, TrainOutput) {
    let mut g = Graph::new();
    let out = {
        let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
        model.forward_train(&mut fw, inputs).unwrap()
    };
    (g, out)
}

#[test]
fn default_shapes() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let inputs = random_inputs::<f32>(24, 96, 48, 0);
    let (g, out) = train_forward(&model, &inputs);
    for s in out.streams {
        assert_eq!(g.shape(s), &[24, 64]);
    }
    assert_eq!(g.shape(out.logits), &[96, 32]);
    assert_eq!(g.shape(out.stages.g[0]), &[96, 8, 48, 24]);
    let dims: Vec<_> = out.stages.g.iter().map(|&v| g.shape(v)[2] * g.shape(v)[3]).collect();
    assert!(dims.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(g.shape(out.stages.f_final), &[96, 64, 6, 3]);
}

#[test]
fn qfe_output_shape_per_stream() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let inputs = random_inputs::<f32>(24, 96, 48, 0);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
    let x = inputs.streams.clone().map(|t| fw.graph.constant(t));
    let stems = model.qfe_forward(&mut fw, x).unwrap();
    for s in stems {
        assert_eq!(fw.graph.shape(s), &[24, 8, 48, 24]);
    }
    let v = fw.graph.concat(&stems[..2]).unwrap();
    assert_eq!(fw.graph.shape(v), &[48, 8, 48, 24]);
}

#[test]
fn parameter_count_is_sum_of_named_parameters() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let sum: usize = model.store.params().iter().map(|p| p.value.numel()).sum();
    assert_eq!(model.num_parameters(), sum);
    assert!(sum > 0);
}

#[test]
fn unshared_stems_give_distinct_outputs() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let img: Tensor<f32> = random_tensor(&[2, 3, 16, 8], 5);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
    let x = fw.graph.constant(img);
    let out = model.qfe_forward(&mut fw, [x; 4]).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            let a = fw.graph.value(out[i]).data();
            let b = fw.graph.value(out[j]).data();
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(diff > 0.0, "streams {i} and {j}");
        }
    }
}

#[test]
fn zero_input_gives_identical_rows() {
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
    let x = fw.graph.constant(Tensor::zeros(&[3, 3, 16, 8]));
    let out = model.qfe_forward(&mut fw, [x; 4]).unwrap();
    for s in out {
        let v = fw.graph.value(s);
        let row = v.numel() / 3;
        assert_eq!(&v.data()[..row], &v.data()[row..2 * row]);
        assert_eq!(&v.data()[..row], &v.data()[2 * row..]);
    }
}

#[test]
fn fuse_arithmetic() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &store, NormMode::Eval, false);
    let a = fw.graph.constant(Tensor::new(vec![2], vec![2.0, 4.0]).unwrap());
    let z = fw.graph.constant(Tensor::zeros(&[2]));
    let f = Model::fuse_streams(&mut fw, a, z, 0.5).unwrap();
    assert_eq!(fw.graph.value(f).data(), &[1.0, 2.0]);
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let f = Model::fuse_streams(&mut fw, a, a, alpha).unwrap();
        assert_eq!(fw.graph.value(f).data(), &[2.0, 4.0]);
    }
    let b = fw.graph.constant(Tensor::new(vec![2], vec![7.0, -3.0]).unwrap());
    let f = Model::fuse_streams(&mut fw, a, b, 1.0).unwrap();
    assert_eq!(fw.graph.value(f).data(), &[2.0, 4.0]);
    let c = fw.graph.constant(Tensor::zeros(&[3]));
    assert!(Model::fuse_streams(&mut fw, a, c, 0.5).is_err());
}

fn alb_spec() -> AlbSpec {
    AlbSpec {
        deep_channels: 32,
        shallow_channels: 8,
        dim: 16,
        heads: 2,
        grid: (6, 3),
        mix_alpha: 0.1,
    }
}

fn zero_params(store: &mut ParamStore<f64>, ids: &[mscm::optim::ParamId]) {
    for &id in ids {
        store.param_mut(id).value.data_mut().fill(0.0);
    }
}

#[test]
fn zeroed_alb_branch_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let alb = Alb::new(&mut Builder::new(&mut store, 3), "alb", alb_spec()).unwrap();
    let mut ids = alb.attn.params().to_vec();
    ids.extend(alb.out.params());
    zero_params(&mut store, &ids);
    let f: Tensor<f64> = random_tensor(&[4, 32, 12, 6], 1);
    let gs: Tensor<f64> = random_tensor(&[4, 8, 48, 24], 2);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &store, NormMode::Train, false);
    let fv = fw.graph.constant(f.clone());
    let gv = fw.graph.constant(gs);
    let out = alb.forward(&mut fw, fv, gv).unwrap();
    assert_eq!(fw.graph.value(out.out), &f);
}

#[test]
fn fresh_alb_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let alb = Alb::new(&mut Builder::new(&mut store, 3), "alb", alb_spec()).unwrap();
    let f: Tensor<f64> = random_tensor(&[4, 32, 12, 6], 1);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &store, NormMode::Train, false);
    let fv = fw.graph.constant(f.clone());
    let gv = fw.graph.constant(random_tensor(&[4, 8, 48, 24], 2));
    let out = alb.forward(&mut fw, fv, gv).unwrap();
    assert_eq!(fw.graph.value(out.out), &f);
}

#[test]
fn value_mix_zero_cuts_shallow_value_path() {
    let mut store = ParamStore::<f64>::new();
    let spec = AlbSpec { mix_alpha: 0.0, ..alb_spec() };
    let alb = Alb::new(&mut Builder::new(&mut store, 3), "alb", spec).unwrap();
    zero_params(&mut store, &[alb.q.weight, alb.k.weight]);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &store, NormMode::Train, false);
    let fv = fw.graph.leaf(random_tensor(&[4, 32, 12, 6], 1), true);
    let gv = fw.graph.leaf(random_tensor(&[4, 8, 48, 24], 2), true);
    let out = alb.forward(&mut fw, fv, gv).unwrap();
    let s = fw.graph.sum(out.out);
    g.backward(s).unwrap();
    assert!(g.grad(gv).map_or(true, |gr| gr.iter().all(|&x| x == 0.0)));
    assert!(g.grad(fv).unwrap().iter().any(|&x| x != 0.0));
}

fn check_with_params(
    store: &ParamStore<f64>,
    ids: &[mscm::optim::ParamId],
    extra: Vec<Tensor<f64>>,
    f: impl Fn(&mut Forward<f64>, &[Var]) -> mscm::Result<Var>,
    opts: &GradCheckOptions,
) -> mscm::tensor::GradCheckReport {
    let mut inputs: Vec<Tensor<f64>> = extra;
    let n_extra = inputs.len();
    inputs.extend(ids.iter().map(|&id| store.param(id).value.clone()));
    grad_check(
        |g, vars| {
            let mut fw = Forward::new(g, store, NormMode::Train, false);
            for (k, &id) in ids.iter().enumerate() {
                fw.bind(id, vars[n_extra + k]);
            }
            f(&mut fw, &vars[..n_extra])
        },
        &inputs,
        opts,
    )
    .unwrap()
}

#[test]
fn alb_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let alb = Alb::new(&mut Builder::new(&mut store, 3), "alb", alb_spec()).unwrap();
    let ids = alb.params();
    // the output norm starts at zero scale; open the branch
    for &id in &alb.out.params() {
        let p = store.param_mut(id);
        if p.name.ends_with("bn.weight") {
            p.value = random_tensor(p.value.shape(), 5);
        }
    }
    let w: Tensor<f64> = random_tensor(&[4, 32, 12, 6], 9);
    let report = check_with_params(
        &store,
        &ids,
        vec![random_tensor(&[4, 32, 12, 6], 1), random_tensor(&[4, 8, 48, 24], 2)],
        |fw, x| {
            let out = alb.forward(fw, x[0], x[1])?;
            let weighted = fw.graph.mul_const(out.out, &w)?;
            Ok(fw.graph.sum(weighted))
        },
        &GradCheckOptions {
            step: 1e-5,
            max_coords: Some(40),
            ..GradCheckOptions::default()
        },
    );
    assert!(report.passed(), "{report:?}");
}

fn mha_vars(g: &mut Graph<f64>, d: usize, seed: u64) -> MhaVars {
    let mut s = seed;
    let mut p = |shape: &[usize]| {
        s += 1;
        g.leaf(random_tensor(shape, s), true)
    };
    MhaVars {
        wq: p(&[d, d]),
        bq: p(&[d]),
        wk: p(&[d, d]),
        bk: p(&[d]),
        wv: p(&[d, d]),
        bv: p(&[d]),
        wo: p(&[d, d]),
        bo: p(&[d]),
        w1: p(&[d, 2 * d]),
        b1: p(&[2 * d]),
        w2: p(&[2 * d, d]),
        b2: p(&[d]),
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let mut g = Graph::new();
    let w = mha_vars(&mut g, 8, 0);
    let q = g.constant(random_tensor(&[2, 5, 8], 1));
    let row: Tensor<f64> = random_tensor(&[1, 1, 8], 2);
    let k = g.constant(Tensor::from_fn(&[2, 5, 8], |i| row.data()[i % 8]));
    let v = g.constant(random_tensor(&[2, 5, 8], 3));
    let out = multi_head_attention(&mut g, q, k, v, 2, &w).unwrap();
    for &a in g.value(out.attn).data() {
        assert!((a - 0.2).abs() < 1e-12);
    }
}

#[test]
fn single_token_attention_is_one() {
    let mut g = Graph::new();
    let w = mha_vars(&mut g, 4, 0);
    let x = g.constant(random_tensor(&[3, 1, 4], 1));
    let out = multi_head_attention(&mut g, x, x, x, 2, &w).unwrap();
    assert!(g.value(out.attn).data().iter().all(|&a| a == 1.0));
    assert!(matches!(
        multi_head_attention(&mut g, x, x, x, 3, &w),
        Err(mscm::Error::Config(_))
    ));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let d = 8;
    let mut shapes = vec![vec![2, 4, d]; 3];
    for s in [[d, d], [d, d], [d, d], [d, d]] {
        shapes.push(s.to_vec());
        shapes.push(vec![d]);
    }
    shapes.extend([vec![d, 2 * d], vec![2 * d], vec![2 * d, d], vec![d]]);
    let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| random_tensor(s, i as u64)).collect();
    let report = grad_check(
        |g, v| {
            let w = MhaVars {
                wq: v[3],
                bq: v[4],
                wk: v[5],
                bk: v[6],
                wv: v[7],
                bv: v[8],
                wo: v[9],
                bo: v[10],
                w1: v[11],
                b1: v[12],
                w2: v[13],
                b2: v[14],
            };
            let out = multi_head_attention(g, v[0], v[1], v[2], 2, &w)?;
            let sq = g.mul(out.out, out.out)?;
            Ok(g.sum(sq))
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn mimb_structure() {
    for n in 0..=5 {
        let cfg = ModelConfig { num_alb: n, ..tiny_config() };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let groups: std::collections::BTreeSet<_> = model
            .store
            .params()
            .iter()
            .filter_map(|p| p.name.strip_prefix("mimb.").map(|s| s.split('.').next().unwrap().to_string()))
            .collect();
        assert_eq!(groups.len(), n);
        let (g, out) = train_forward(&model, &random_inputs(2, 16, 8, 1));
        let g3 = out.stages.g[3];
        let mut g2 = Graph::new();
        let mut fw = Forward::new(&mut g2, &model.store, NormMode::Train, false);
        let gs: Vec<Var> = out.stages.g.iter().map(|&v| fw.graph.constant(g.value(v).clone())).collect();
        let f = model.mimb_forward(&mut fw, &gs, &mut Vec::new()).unwrap();
        assert_eq!(fw.graph.shape(f), g.shape(g3));
        if n == 0 {
            assert_eq!(fw.graph.value(f), g.value(g3));
        }
        assert!(model.mimb_forward(&mut fw, &gs[..3], &mut Vec::new()).is_err());
    }
}

#[test]
fn empty_mimb_equals_disabled_pipeline_bit_exactly() {
    let inputs = random_inputs::<f32>(3, 32, 16, 4);
    let zero = Model::<f32>::new(ModelConfig { num_alb: 0, ..tiny_config() }, 5).unwrap();
    let off = Model::<f32>::new(ModelConfig { mimb: false, ..tiny_config() }, 5).unwrap();
    let (g0, o0) = train_forward(&zero, &inputs);
    let (g1, o1) = train_forward(&off, &inputs);
    assert_eq!(g0.value(o0.embeddings), g1.value(o1.embeddings));
    assert_eq!(g0.value(o0.logits), g1.value(o1.logits));
}

#[test]
fn zeroed_alb_chain_equals_disabled_pipeline() {
    let inputs = random_inputs::<f32>(3, 32, 16, 4);
    let mut full = Model::<f32>::new(tiny_config(), 5).unwrap();
    let names: Vec<String> = full
        .store
        .params()
        .iter()
        .filter(|p| p.name.starts_with("mimb.") && p.name.contains(".out.bn."))
        .map(|p| p.name.clone())
        .collect();
    assert_eq!(names.len(), 8);
    for n in names {
        let id = full.store.find_param(&n).unwrap();
        full.store.param_mut(id).value.data_mut().fill(0.0);
    }
    let base = Model::<f32>::new(ModelConfig { num_alb: 0, ..tiny_config() }, 5).unwrap();
    let (g0, o0) = train_forward(&full, &inputs);
    let (g1, o1) = train_forward(&base, &inputs);
    assert_eq!(g0.value(o0.embeddings), g1.value(o1.embeddings));
}

#[test]
fn perturbing_one_stem_leaves_other_streams_untouched() {
    let mut model = Model::<f32>::new(tiny_config(), 2).unwrap();
    let inputs = random_inputs::<f32>(2, 16, 8, 3);
    let run = |m: &Model<f32>| {
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &m.store, NormMode::Eval, false);
        let x = inputs.streams.clone().map(|t| fw.graph.constant(t));
        let out = m.forward_streams(&mut fw, x).unwrap();
        out.streams.map(|s| g.value(s).clone())
    };
    let before = run(&model);
    let w = model.stem_params(0)[0];
    model.store.param_mut(w).value.data_mut()[0] += 0.5;
    let after = run(&model);
    assert_ne!(before[0], after[0]);
    for s in 1..4 {
        assert_eq!(before[s], after[s], "stream {s}");
    }
}

#[test]
fn dual_qfe_shares_stems() {
    let cfg = ModelConfig { qfe: QfeMode::Dual, ..tiny_config() };
    let model = Model::<f32>::new(cfg, 1).unwrap();
    assert!(model.store.find_param("stem.v.conv.weight").is_some());
    assert!(model.store.find_param("stem.vg.conv.weight").is_none());
    let (g, out) = train_forward(&model, &random_inputs(2, 16, 8, 1));
    assert_eq!(g.shape(out.embeddings), &[8, 4]);
}

#[test]
fn mode_flags_are_enforced() {
    let mut model = Model::<f32>::new(tiny_config(), 1).unwrap();
    let imgs: Tensor<f32> = random_tensor(&[2, 3, 16, 8], 1);
    assert!(matches!(model.forward_eval(&imgs, &imgs, false), Err(mscm::Error::Usage(_))));
    model.set_training(false);
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.store, NormMode::Train, false);
    assert!(matches!(
        model.forward_train(&mut fw, &random_inputs(2, 16, 8, 1)),
        Err(mscm::Error::Usage(_))
    ));
}

#[test]
fn eval_embeddings_are_deterministic_and_normalized() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    model.set_training(false);
    let a: Tensor<f32> = random_tensor(&[1, 3, 96, 48], 1);
    let b: Tensor<f32> = random_tensor(&[1, 3, 96, 48], 2);
    let twice = Tensor::new(vec![2, 3, 96, 48], [a.data(), a.data()].concat()).unwrap();
    let twice_c = Tensor::new(vec![2, 3, 96, 48], [b.data(), b.data()].concat()).unwrap();
    for infrared in [false, true] {
        let e = model.forward_eval(&twice, &twice_c, infrared).unwrap();
        let rows: Vec<&[f32]> = e.rows().collect();
        assert_eq!(rows[0], rows[1]);
        for r in rows {
            let n: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5);
        }
        assert_eq!(e, model.forward_eval(&twice, &twice_c, infrared).unwrap());
    }
}

#[test]
fn unit_fusion_alpha_ignores_channel_stream() {
    let mut model = Model::<f32>::new(ModelConfig { fusion_alpha: 1.0, ..ModelConfig::default() }, 1).unwrap();
    model.set_training(false);
    let g: Tensor<f32> = random_tensor(&[2, 3, 96, 48], 1);
    let c1: Tensor<f32> = random_tensor(&[2, 3, 96, 48], 2);
    let c2: Tensor<f32> = random_tensor(&[2, 3, 96, 48], 3);
    assert_eq!(model.forward_eval(&g, &c1, false).unwrap(), model.forward_eval(&g, &c2, false).unwrap());
}

#[test]
fn config_validation() {
    let bad = [
        ModelConfig { num_alb: 6, ..ModelConfig::default() },
        ModelConfig { fusion_alpha: 1.5, ..ModelConfig::default() },
        ModelConfig { alb_mix_alpha: -0.1, ..ModelConfig::default() },
        ModelConfig { attn_dim: 15, ..ModelConfig::default() },
        ModelConfig { embed_dim: 32, ..ModelConfig::default() },
        ModelConfig { stage_channels: vec![8, 16], ..ModelConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(Model::<f32>::new(cfg, 0), Err(mscm::Error::Config(_))));
    }
}

#[test]
fn end_to_end_gradients_for_every_parameter_group() {
    let cfg = ModelConfig {
        num_alb: 2,
        ..tiny_config()
    };
    let mut model = Model::<f64>::new(cfg, 3).unwrap();
    for p in model.store.params_mut() {
        if p.name.contains(".out.bn.weight") {
            p.value = random_tensor(p.value.shape(), 8);
        }
    }
    let inputs = random_inputs::<f64>(2, 32, 16, 6);
    let groups = IdGroups::new(&[0, 1], &[0, 1]).unwrap();
    let labels = [0, 1, 0, 1, 0, 1, 0, 1];
    let mut by_group: std::collections::BTreeMap<String, Vec<mscm::optim::ParamId>> = Default::default();
    for p in model.store.params() {
        let group = p.name.split('.').next().unwrap().to_string();
        by_group.entry(group).or_default().push(model.store.find_param(&p.name).unwrap());
    }
    assert!(by_group.contains_key("mimb") && by_group.contains_key("classifier"), "{:?}", by_group.keys());
    let opts = GradCheckOptions {
        max_coords: Some(6),
        ..GradCheckOptions::default()
    };
    for (name, ids) in &by_group {
        let report = check_with_params(
            &model.store,
            ids,
            vec![],
            |fw, _| {
                let out = model.forward_train(fw, &inputs)?;
                Ok(total_loss(fw.graph, &out.streams, out.logits, &labels, &groups, &LossConfig::default())?.total)
            },
            &opts,
        );
        assert!(report.passed(), "{name}: {report:?}");
    }
}
