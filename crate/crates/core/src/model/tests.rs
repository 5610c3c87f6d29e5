use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::diffcore::{Tape, Tensor};
use crate::synthio::{generate, LabeledScene, SceneRecipe, DEFAULT_CLASSES};
use crate::textspace::{group_by_distance, neg_mine, Binning, Corpus, EmbeddingSpace, OODPromptSet};

pub(crate) fn toy_model(cfg: ModelConfig, seed: u64, mode: OodQueries) -> Segmenter {
    let corpus = Corpus::bundled();
    let space = EmbeddingSpace::new(&corpus, seed).unwrap();
    let tokens: Vec<&str> = corpus.tokens.iter().map(String::as_str).collect();
    let ood = neg_mine(&space, &DEFAULT_CLASSES, &tokens, 50, 0.05).unwrap();
    let groups = group_by_distance(&ood, 5, Binning::EqualWidth).unwrap();
    let prompts = OODPromptSet::new(&ood, &groups, 4, seed).unwrap();
    let net = SegNet::new(cfg, seed).unwrap();
    let ids = DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect();
    Segmenter::new(net, space, prompts, ids, mode).unwrap()
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig { height: 16, width: 16, dim: 8, depth: 2, dec_depth: 1, pixel_dim: 4, ..ModelConfig::default() }
}

fn tiny_scenes(seed: u64, n: usize) -> Vec<LabeledScene> {
    let r = SceneRecipe { height: 16, width: 16, ..SceneRecipe::eval_default(seed) };
    generate(&r, n).unwrap()
}

#[test]
fn forward_shapes() {
    let m = toy_model(ModelConfig::default(), 1, OodQueries::Prompts);
    let q = m.assignment().len();
    assert_eq!(q, 9);
    let img = vec![0.5; 32 * 32 * 3];
    let p = m.predict(&img).unwrap();
    assert_eq!(p.class_logits.shape(), &[9, 5]);
    assert_eq!(p.mask_logits.shape(), &[9, 32 * 32]);

    let cfg = ModelConfig { pixel_stem: false, ..ModelConfig::default() };
    let m = toy_model(cfg, 1, OodQueries::Prompts);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let (queries, _) = m.queries(&mut tape, &b).unwrap();
    let out = m.net.forward(&mut tape, &b.net, queries, &img, None).unwrap();
    assert_eq!(tape.value(out.mask_logits).shape(), &[9, 16]);
    assert_eq!(m.predict(&img).unwrap().mask_logits.shape(), &[9, 32 * 32]);
}

#[test]
fn query_layouts() {
    let cfg = tiny_cfg();
    assert_eq!(toy_model(cfg.clone(), 2, OodQueries::Single).assignment(), vec![0, 1, 2, 3, 4]);
    let both = toy_model(cfg, 2, OodQueries::PromptsAndMeans);
    assert_eq!(both.assignment().len(), 4 + 10);
    assert!(both.assignment()[4..].iter().all(|&a| a == 4));
}

#[test]
fn two_scale_decoder_runs() {
    let cfg = ModelConfig { height: 32, width: 32, dim: 8, pixel_scales: 2, ..tiny_cfg() };
    let m = toy_model(cfg, 3, OodQueries::Prompts);
    let p = m.predict(&vec![0.2; 32 * 32 * 3]).unwrap();
    assert!(p.mask_logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn construction_is_deterministic() {
    let a = toy_model(tiny_cfg(), 4, OodQueries::Prompts);
    let b = toy_model(tiny_cfg(), 4, OodQueries::Prompts);
    assert_eq!(a.net.params.hash(), b.net.params.hash());
    let img: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    assert_eq!(a.predict(&img).unwrap().mask_logits, b.predict(&img).unwrap().mask_logits);
    let c = toy_model(tiny_cfg(), 5, OodQueries::Prompts);
    assert_ne!(a.net.params.hash(), c.net.params.hash());
}

#[test]
fn untrained_heads_are_uninformative() {
    let m = toy_model(tiny_cfg(), 6, OodQueries::Prompts);
    let s = &tiny_scenes(6, 1)[0];
    let p = m.predict(&s.image).unwrap();
    assert!(p.class_logits.data().iter().all(|&v| v == 0.0));
    assert!(p.mask_logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_query_width_rejected() {
    let m = toy_model(tiny_cfg(), 1, OodQueries::Prompts);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let q = tape.constant(Tensor::zeros(&[3, 7]));
    let r = m.net.forward(&mut tape, &b.net, q, &vec![0.0; 16 * 16 * 3], None);
    assert!(matches!(r, Err(crate::Error::Dimension(_))));
    assert!(matches!(m.predict(&[0.0; 5]), Err(crate::Error::Dimension(_))));
}

#[test]
fn backbone_v_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let l = loss_backbone_v(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(l).item(), 2.0);
    let l = loss_backbone_v(&mut tape, a, a).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn backbone_vl_examples() {
    let k = 4;
    // orthonormal text rows, each feature 10× its class embedding
    let mut text = vec![0.0; (k + 1) * 8];
    for i in 0..=k {
        text[i * 8 + i] = 1.0;
    }
    let classes = [0, 3, 4, 1];
    let feats: Vec<f64> = classes.iter().flat_map(|&c| text[c * 8..(c + 1) * 8].iter().map(|v| v * 10.0)).collect();
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::matrix(k + 1, 8, text.clone()).unwrap());
    let f = tape.constant(Tensor::matrix(4, 8, feats).unwrap());
    let l = loss_backbone_vl(&mut tape, f, e, &classes).unwrap();
    // -log(e^10 / (e^10 + 4)) per token
    let want = (1.0 + 4.0 * (-10.0f64).exp()).ln();
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    assert!(tape.value(l).item() < 1e-3);

    let z = tape.constant(Tensor::zeros(&[4, 8]));
    let l = loss_backbone_vl(&mut tape, z, e, &classes).unwrap();
    assert!((tape.value(l).item() - 5.0f64.ln()).abs() < 1e-12);

    let bad = loss_backbone_vl(&mut tape, z, e, &[0, 1, 2, 5]);
    assert!(matches!(bad, Err(crate::Error::Index(_))));
}

#[test]
fn backbone_vl_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, d, c) = (4, 6, 5);
    let f: Vec<f64> = (0..t * d).map(|_| rng.sample(StandardNormal)).collect();
    let e: Vec<f64> = (0..c * d).map(|_| rng.sample(StandardNormal)).collect();
    let classes = [2, 0, 4, 4];
    let mut want = 0.0;
    for i in 0..t {
        let s: Vec<f64> = (0..c).map(|k| (0..d).map(|j| f[i * d + j] * e[k * d + j]).sum()).collect();
        let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - s[classes[i]];
    }
    want /= t as f64;
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::matrix(t, d, f).unwrap());
    let ev = tape.constant(Tensor::matrix(c, d, e).unwrap());
    let l = loss_backbone_vl(&mut tape, fv, ev, &classes).unwrap();
    assert!((tape.value(l).item() - want).abs() < 1e-9);
}

fn one_class_scene(h: usize, w: usize, class: u8) -> LabeledScene {
    LabeledScene {
        height: h,
        width: w,
        image: vec![0.0; h * w * 3],
        class_map: vec![class; h * w],
        ood_mask: vec![false; h * w],
    }
}

#[test]
fn mask_loss_examples() {
    let k = 4;
    let scene = one_class_scene(4, 4, 2);
    let targets = scene_targets(&scene, k);
    let assignment = [0, 1, 2, 3, 4];

    // saturated perfect logits: query 2 certain of its class and mask, others certain of no-object
    let mut cl = vec![0.0; 5 * 5];
    for (q, &a) in assignment.iter().enumerate() {
        for c in 0..5 {
            cl[q * 5 + c] = if q == 2 && c == a { 10.0 } else if q != 2 && c != a { 10.0 } else { -10.0 };
        }
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::matrix(5, 5, cl).unwrap());
    let mut ml = vec![-10.0; 5 * 16];
    ml[2 * 16..3 * 16].iter_mut().for_each(|v| *v = 10.0);
    let m = tape.constant(Tensor::matrix(5, 16, ml).unwrap());
    let l = loss_mask2former(&mut tape, c, m, &assignment, &targets).unwrap();
    assert!(tape.value(l.total).item() < 1e-2, "{}", tape.value(l.total).item());

    // zero logits: the present query pays ln 5
    let zc = tape.constant(Tensor::zeros(&[1, 5]));
    let zm = tape.constant(Tensor::zeros(&[1, 16]));
    let l = loss_mask2former(&mut tape, zc, zm, &[2], &targets).unwrap();
    assert!((tape.value(l.class_term).item() - 5.0f64.ln()).abs() < 1e-12);

    let bad = loss_mask2former(&mut tape, zc, zm, &[2, 3], &targets);
    assert!(matches!(bad, Err(crate::Error::Dimension(_))));
}

#[test]
fn mask_loss_ignores_outlier_query_order() {
    let scene = &tiny_scenes(3, 1)[0];
    let targets = scene_targets(scene, 4);
    assert!(targets[4].is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = 7;
    let cl: Vec<f64> = (0..q * 5).map(|_| rng.sample(StandardNormal)).collect();
    let ml: Vec<f64> = (0..q * 256).map(|_| rng.sample(StandardNormal)).collect();
    let assignment = [0, 1, 2, 3, 4, 4, 4];
    let eval = |perm: &[usize]| {
        let mut c = Vec::new();
        let mut m = Vec::new();
        for &p in perm {
            c.extend_from_slice(&cl[p * 5..(p + 1) * 5]);
            m.extend_from_slice(&ml[p * 256..(p + 1) * 256]);
        }
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(q, 5, c).unwrap());
        let m = tape.constant(Tensor::matrix(q, 256, m).unwrap());
        let l = loss_mask2former(&mut tape, c, m, &assignment, &targets).unwrap();
        tape.value(l.total).item()
    };
    let a = eval(&[0, 1, 2, 3, 4, 5, 6]);
    let b = eval(&[0, 1, 2, 3, 6, 4, 5]);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn token_classes_mark_any_outlier_pixel() {
    let mut s = one_class_scene(16, 16, 1);
    s.class_map[0] = 3;
    s.class_map[1] = 3;
    s.class_map[8 * 16 + 9] = 4;
    s.ood_mask[8 * 16 + 9] = true;
    assert_eq!(token_classes(&s, 8, 4).unwrap(), vec![1, 1, 1, 4]);
    let mut tie = one_class_scene(2, 2, 0);
    tie.class_map = vec![2, 2, 1, 1];
    assert_eq!(token_classes(&tie, 2, 4).unwrap(), vec![1]);
}

fn trainer(seed: u64, tweak: impl FnOnce(&mut TrainConfig)) -> Trainer {
    let mut cfg = TrainConfig { seed, iterations: 50, batch_size: 2, ..TrainConfig::default() };
    tweak(&mut cfg);
    Trainer::new(toy_model(tiny_cfg(), seed, OodQueries::Prompts), cfg).unwrap()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = tiny_scenes(1, 6);
    let mut t = trainer(1, |c| c.optim.lr = 0.0);
    let (net, text, prompts) = (t.model.net.params.hash(), t.model.space.params.hash(), t.model.prompts.params.hash());
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    assert_eq!(t.model.net.params.hash(), net);
    assert_eq!(t.model.space.params.hash(), text);
    assert_eq!(t.model.prompts.params.hash(), prompts);
}

#[test]
fn frozen_twins_survive_training() {
    let data = tiny_scenes(2, 6);
    let mut t = trainer(2, |_| {});
    let before = t.model.frozen_hashes();
    let net = t.model.net.params.hash();
    for _ in 0..5 {
        t.step(&data).unwrap();
    }
    assert_eq!(t.model.frozen_hashes(), before);
    assert_ne!(t.model.net.params.hash(), net);
}

#[test]
fn first_step_has_no_drift() {
    let data = tiny_scenes(4, 6);
    for saa in [true, false] {
        let mut t = trainer(4, |c| {
            c.saa.enabled = saa;
            c.saa.gate_threshold = 1.0;
            c.weights.v = 0.0;
        });
        assert_eq!(t.step(&data).unwrap().l_v, 0.0);
        let later: Vec<f64> = (0..5).map(|_| t.step(&data).unwrap().l_v).collect();
        assert!(later.iter().any(|&v| v > 0.0), "{later:?}");
    }
}

#[test]
fn single_query_mode_leaves_prompts_alone() {
    let data = tiny_scenes(5, 4);
    let mut cfg = TrainConfig { seed: 5, batch_size: 2, ..TrainConfig::default() };
    cfg.iterations = 10;
    let mut t = Trainer::new(toy_model(tiny_cfg(), 5, OodQueries::Single), cfg).unwrap();
    let p = t.model.prompts.params.hash();
    let r = t.step(&data).unwrap();
    assert_eq!(r.prompt, 0.0);
    assert_eq!(t.model.prompts.params.hash(), p);
}

#[test]
fn poisoned_input_reports_divergence_and_keeps_parameters() {
    let mut data = tiny_scenes(6, 2);
    data[0].image[0] = f64::NAN;
    data[1].image[0] = f64::NAN;
    let mut t = trainer(6, |_| {});
    let h = t.model.net.params.hash();
    match t.step(&data) {
        Err(crate::Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(t.model.net.params.hash(), h);
    assert_eq!(t.steps(), 0);
}

#[test]
fn same_seed_same_trajectory() {
    let data = tiny_scenes(7, 6);
    let run = || {
        let mut t = trainer(7, |_| {});
        let h: Vec<LossRecord> = (0..4).map(|_| t.step(&data).unwrap()).collect();
        (h, t.model.net.params.hash(), t.rng_state())
    };
    assert_eq!(run(), run());
}

#[test]
fn learning_rate_decays_to_zero() {
    let t = trainer(1, |c| c.iterations = 100);
    assert_eq!(t.lr_at(0), t.cfg.optim.lr);
    assert!(t.lr_at(50) < t.cfg.optim.lr);
    assert_eq!(t.lr_at(100), 0.0);
    let flat = trainer(1, |c| c.lr_power = 0.0);
    assert_eq!(flat.lr_at(40), flat.cfg.optim.lr);
}

#[test]
fn config_validation() {
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    let mut bad = TrainConfig::default();
    bad.weights.v = -1.0;
    assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    let bad = ModelConfig { patch: 5, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(crate::Error::Dimension(_))));
}
