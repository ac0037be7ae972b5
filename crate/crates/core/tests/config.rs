use mscm::config::RunConfig;
use mscm::Error;

#[test]
fn desk_defaults() {
    let c = RunConfig::default();
    assert_eq!(c.epochs, 20);
    assert_eq!(c.seed, 7);
    assert_eq!(c.model.stage_channels, vec![8, 16, 32, 64, 64]);
    assert_eq!(c.model.embed_dim, 64);
    assert_eq!(c.sampler.ids_per_batch, 6);
    assert_eq!((c.sampler.v_per_id, c.sampler.t_per_id), (4, 4));
    assert_eq!((c.augment.target_h, c.augment.target_w), (96, 48));
    assert_eq!(c.optimizer.momentum, 0.9);
    assert_eq!(c.optimizer.weight_decay, 5e-4);
    assert_eq!(c.schedule.factor, 0.1);
    c.validate().unwrap();
}

#[test]
fn reference_schedule_drops_tenfold() {
    let (s, epochs) = RunConfig::reference_schedule();
    assert_eq!(epochs, 150);
    let lr = |e| s.lr_at(0.1, e);
    assert_eq!(lr(0), 0.1);
    assert_eq!(lr(29), 0.1);
    assert!((lr(30) - 0.01).abs() < 1e-15);
    assert!((lr(89) - 0.01).abs() < 1e-15);
    assert!((lr(90) - 0.001).abs() < 1e-15);
    assert!((lr(120) - 1e-4).abs() < 1e-15);
    assert!((lr(149) - 1e-4).abs() < 1e-15);
}

#[test]
fn text_round_trip() {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "model.num_alb=2",
        "model.token_grid=4x2",
        "loss.margin_rho=0.5",
        "schedule.milestones=3,9",
        "augment.erase_area=0.05,0.3",
        "train.parallel=true",
        "paths.dataset_dir=/tmp/x",
    ])
    .unwrap();
    let back = RunConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back.to_text(), c.to_text());
    assert_eq!(back.model.num_alb, 2);
    assert_eq!(back.model.token_grid, (4, 2));
    assert_eq!(back.schedule.milestones, vec![3, 9]);
    assert!(back.parallel);
}

#[test]
fn comments_and_blank_lines_are_skipped() {
    let c = RunConfig::from_text("# desk\n\ntrain.epochs = 3\n  # indented\n").unwrap();
    assert_eq!(c.epochs, 3);
}

#[test]
fn errors_name_the_line() {
    let e = RunConfig::from_text("train.epochs = 3\nbogus.key = 1\n").unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("line 2")), "{e}");
    let e = RunConfig::from_text("train.epochs\n").unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("line 1")), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn invalid_values_are_config_errors() {
    for o in [
        "optimizer.lr=-1",
        "optimizer.momentum=1",
        "schedule.milestones=5,5",
        "schedule.factor=1.5",
        "train.epochs=0",
        "sampler.ids_per_batch=1",
        "eval.trials=0",
    ] {
        let mut c = RunConfig::default();
        let r = c.apply_overrides(&[o]).and_then(|_| c.validate());
        assert!(matches!(r, Err(Error::Config(_))), "{o}: {r:?}");
    }
    let mut c = RunConfig::default();
    assert!(c.apply_overrides(&["train.epochs=abc"]).is_err());
    assert!(c.apply_overrides(&["noequals"]).is_err());
}
