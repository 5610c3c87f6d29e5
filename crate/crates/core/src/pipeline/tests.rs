use super::*;
use crate::model::OodQueries;
use crate::textspace::Binning;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "model.height=16",
        "model.width=16",
        "model.dim=8",
        "model.depth=2",
        "model.dec_depth=1",
        "model.pixel_dim=4",
        "train.iterations=2",
        "train.batch_size=2",
        "data.train_n=6",
        "data.eval_n=4",
        "eval.thresholds=20",
    ] {
        c.apply_override(kv).unwrap();
    }
    c.validate().unwrap();
    c
}

fn trained(cfg: &RunConfig) -> Trainer {
    let corpus = load_corpus(cfg).unwrap();
    let mined = mine(cfg, &corpus).unwrap();
    let data = generate_dataset(cfg, &recipe(cfg, Split::Train), cfg.data.train_n).unwrap();
    train_from_scratch(cfg, &corpus, &mined, &data.scenes).unwrap().0
}

#[test]
fn default_mining_gives_fifty_labels_in_five_groups() {
    let cfg = RunConfig::default();
    let m = mine(&cfg, &Corpus::bundled()).unwrap();
    assert_eq!(m.ood.labels.len(), 50);
    assert_eq!(m.groups.len(), 5);
    let mut all: Vec<usize> = m.groups.concat();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(m.histogram().iter().sum::<usize>(), 50);
}

#[test]
fn oversized_mining_names_both_sizes() {
    let mut cfg = RunConfig::default();
    cfg.set("mine.m", "100000").unwrap();
    let err = mine(&cfg, &Corpus::bundled()).unwrap_err().to_string();
    assert!(err.contains("100000"), "{err}");
    assert!(err.chars().filter(char::is_ascii_digit).count() > 6, "{err}");
}

#[test]
fn mined_file_round_trip() {
    let cfg = RunConfig::default();
    let corpus = Corpus::bundled();
    let m = mine(&cfg, &corpus).unwrap();
    let file = MinedFile { config_hash: cfg.hash(), m: 50, n: 5, mined: m.labels() };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mined.json");
    file.save(&p).unwrap();
    let back = MinedFile::load(&p).unwrap();
    assert_eq!(back, file);
    let rebuilt = mined_from_labels(&text_space(&cfg, &corpus).unwrap(), &back.mined).unwrap();
    assert_eq!(rebuilt.groups, m.groups);
    assert_eq!(rebuilt.ood.labels, m.ood.labels);
    for (a, b) in rebuilt.ood.embeddings.iter().zip(&m.ood.embeddings) {
        assert_eq!(a, b);
    }
}

#[test]
fn mined_labels_must_partition() {
    let cfg = RunConfig::default();
    let corpus = Corpus::bundled();
    let mut labels = mine(&cfg, &corpus).unwrap().labels();
    labels.groups[0].pop();
    let space = text_space(&cfg, &corpus).unwrap();
    assert!(matches!(mined_from_labels(&space, &labels), Err(Error::Format(_))));
}

#[test]
fn every_ablation_variant_is_buildable() {
    let base = RunConfig::default();
    let corpus = Corpus::bundled();
    let counts = [
        (AblationAxis::Components, 3),
        (AblationAxis::SaaLayers, 3),
        (AblationAxis::Lambda, 3),
        (AblationAxis::Queries, 4),
    ];
    for (axis, n) in counts {
        let vs = axis.variants();
        assert_eq!(vs.len(), n, "{axis:?}");
        for v in &vs {
            let cfg = v.config(&base, 1).unwrap();
            let m = mine(&cfg, &corpus).unwrap();
            assert_eq!(m.groups.len(), cfg.mine.groups, "{}", v.name);
            let model = build_model(&cfg, &corpus, &m).unwrap();
            trainer(&cfg, model).unwrap();
        }
    }
    let q: Vec<usize> = AblationAxis::Queries.variants().iter().map(|v| v.config(&base, 1).unwrap().mine.groups).collect();
    assert_eq!(q, [1, 25, 50, 75]);
    let cfg = AblationAxis::Queries.variants()[3].config(&base, 1).unwrap();
    assert_eq!((cfg.mine.labels, cfg.mine.binning), (75, Binning::EqualCount));
    let c = AblationAxis::Components.variants()[0].config(&base, 1).unwrap();
    assert_eq!((c.queries, c.train.saa.enabled), (OodQueries::Single, false));
    assert!("nope".parse::<AblationAxis>().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny();
    let t = trained(&cfg);
    let ck = Checkpoint::from_trainer(&cfg, &t);
    assert_eq!(ck.meta.step, 2);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..5], b"TDOS1");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config().unwrap(), cfg);
    let model = back.model().unwrap();
    let img = generate_dataset(&cfg, &recipe(&cfg, Split::Eval), 1).unwrap().scenes.remove(0).image;
    let a = t.model.predict(&img).unwrap();
    let b = model.predict(&img).unwrap();
    assert_eq!(a.class_logits, b.class_logits);
    assert_eq!(a.mask_logits, b.mask_logits);
    assert_eq!(model.frozen_hashes(), t.model.frozen_hashes());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tdos");
    ck.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny();
    let corpus = Corpus::bundled();
    let mined = mine(&cfg, &corpus).unwrap();
    let model = build_model(&cfg, &corpus, &mined).unwrap();
    let bytes = Checkpoint::capture(&cfg, &model, 0, (0, 7, 0)).to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Corruption(_))));

    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.config_text = ck.config_text.replace("seed = 0", "seed = 9");
    assert!(matches!(ck.config(), Err(Error::Corruption(_))));
}

#[test]
fn untrained_checkpoint_equals_initialisation() {
    let mut cfg = tiny();
    cfg.set("train.iterations", "0").unwrap();
    let t = trained(&cfg);
    let corpus = Corpus::bundled();
    let fresh = build_model(&cfg, &corpus, &mine(&cfg, &corpus).unwrap()).unwrap();
    let a = Checkpoint::from_trainer(&cfg, &t).to_bytes().unwrap();
    let b = Checkpoint::capture(&cfg, &fresh, 0, t.rng_state()).to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn ground_truth_scores_are_perfect() {
    let cfg = tiny();
    let data = generate_dataset(&cfg, &recipe(&cfg, Split::Eval), 5).unwrap();
    let ev = evaluate_maps(&ground_truth_maps(&data), &data, "eval", 100).unwrap();
    assert_eq!(ev.row.auprc, 1.0);
    assert_eq!(ev.row.fpr95, 0.0);
    assert!(ev.row.auiou >= 0.99);
    assert_eq!(ev.images.len(), 5);
    assert!(ev.prevalence() > 0.0 && ev.prevalence() < 1.0);
}

#[test]
fn no_outliers_is_undefined() {
    let cfg = tiny();
    let mut r = recipe(&cfg, Split::Train);
    r.paste_probability = 0.0;
    let data = generate_dataset(&cfg, &r, 3).unwrap();
    match evaluate_maps(&ground_truth_maps(&data), &data, "clean-set", 10) {
        Err(Error::UndefinedMetric(m)) => assert!(m.contains("clean-set")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reports_are_deterministic_and_carry_the_hash() {
    let cfg = tiny();
    let t = trained(&cfg);
    let data = generate_dataset(&cfg, &recipe(&cfg, Split::Eval), cfg.data.eval_n).unwrap();
    let render = || {
        let ev = evaluate(&t.model, &data, &cfg, "eval").unwrap();
        let rep = EvalReport::new(&cfg.hash(), "eval", "model", Some(t.steps()), &ev);
        let (pr, th) = curves_csv(&cfg.hash(), &ev);
        [eval_json(&rep), metrics_csv(&cfg.hash(), &[("eval".into(), ev.row)]), pr, th, pr_svg(&cfg.hash(), &ev), iou_svg(&cfg.hash(), &ev)]
    };
    let a = render();
    assert_eq!(a, render());
    for s in &a {
        assert!(s.contains(&cfg.hash()));
    }
    assert!(a[1].lines().nth(1).unwrap().ends_with("AuPRC,FPR95,AuIoU,IoU,mean F1"));
    let rep: EvalReport = serde_json::from_str(&a[0]).unwrap();
    assert_eq!(rep.images.len(), cfg.data.eval_n);
}

#[test]
fn summary_table_layout() {
    let r = |v: f64| MetricRow { auprc: v, fpr95: 1.0 - v, auiou: v, iou: v, mean_f1: v };
    let t = summary_table(&[("a".into(), r(0.5)), ("b".into(), r(1.0))]);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 4);
    let head: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(head, ["result", "AuPRC↑", "FPR95↓", "AuIoU↑", "IoU↑", "mean", "F1↑"]);
    assert!(lines[3].starts_with("Average"));
    assert!(lines[3].contains("75.00") && lines[3].contains("25.00"));
    assert_eq!(summary_table(&[("a".into(), r(0.5))]).lines().count(), 2);
}

#[test]
fn losses_csv_columns() {
    let rec = LossRecord { step: 1, total: 2.0, seg: 1.5, l_v: 0.1, l_vl: 0.2, prompt: 0.3, grad_norm: 4.0 };
    let s = losses_csv("h", &[rec]);
    assert_eq!(s, "# config_hash=h\nstep,total,seg,L_V,L_VL,prompt,grad_norm\n1,2,1.5,0.1,0.2,0.3,4\n");
}

#[test]
fn median_of_lists() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn tiny_ablation_is_repeatable() {
    let cfg = tiny();
    let corpus = Corpus::bundled();
    let mut runs = 0;
    let a = ablate(&cfg, &corpus, AblationAxis::Lambda, &[1, 2], |_, _, t, _| {
        assert_eq!(t.steps(), 2);
        runs += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(runs, 6);
    assert_eq!(a.rows.len(), 3);
    assert_eq!(a.rows[0].per_seed.len(), 2);
    let b = ablate(&cfg, &corpus, AblationAxis::Lambda, &[1, 2], |_, _, _, _| Ok(())).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render("h"), b.render("h"));
    let table = a.render("h");
    assert_eq!(table.lines().count(), 3 + 3);
    assert!(table.contains("lambda=0.01"));
    assert_eq!(a.to_csv("h").lines().count(), 2 + 3 * 3);
    for c in 0..5 {
        assert!(a.ranks(c).iter().all(|&r| (1..=3).contains(&r)));
    }
}
