//! Finite differences on the full training loss of a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use textood::config::RunConfig;
use textood::diffcore::{check_gradients, Bound, ParamSet, Var};
use textood::model::{scene_loss, Augment, Binding, LossWeights, Supervision};
use textood::pipeline::{build_model, generate_dataset, mine, recipe, Split};
use textood::saa::SaaConfig;
use textood::textspace::Corpus;

pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    for kv in ["model.height=16", "model.width=16", "model.dim=8", "model.depth=2", "model.dec_depth=1", "model.pixel_dim=4"] {
        c.apply_override(kv).unwrap();
    }
    c.set("seed", &seed.to_string()).unwrap();
    c
}

fn jitter(set: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (_, t) in set.iter_mut() {
        for x in t.data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Largest relative error over two coordinates of every parameter tensor, with
/// the augmentation active and all three loss terms weighted.
pub fn composed_loss_error(seed: u64) -> f64 {
    let cfg = tiny_config(seed);
    let corpus = Corpus::bundled();
    let mut m = build_model(&cfg, &corpus, &mine(&cfg, &corpus).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter(&mut m.net.params, &mut rng);
    jitter(&mut m.prompts.params, &mut rng);
    let mut r = recipe(&cfg, Split::Eval);
    r.seed = seed;
    let scene = generate_dataset(&cfg, &r, 1).unwrap().scenes.remove(0);
    let sup = Supervision::new(&m, &scene).unwrap();
    let saa = SaaConfig { lambda: 0.5, ..SaaConfig::default() };
    let layers = saa.resolve_layers(m.net.cfg.depth).unwrap();
    let noise: Vec<Vec<f64>> = layers.iter().map(|_| saa.draw_noise(&mut rng, m.net.cfg.dim)).collect();
    let weights = LossWeights { seg: 1.0, v: 1.0, vl: 1.0, prompt: 0.0 };

    let names: Vec<Vec<String>> = [&m.net.params, &m.space.params, &m.prompts.params]
        .iter()
        .map(|s| s.names().map(String::from).collect())
        .collect();
    let mut inputs = m.net.params.tensors();
    inputs.extend(m.space.params.tensors());
    inputs.extend(m.prompts.params.tensors());
    let (n0, n1) = (names[0].len(), names[0].len() + names[1].len());
    let report = check_gradients(
        &inputs,
        |tape, vars: &[Var]| {
            let b = Binding {
                net: Bound::from_vars(names[0].clone(), &vars[..n0])?,
                text: Bound::from_vars(names[1].clone(), &vars[n0..n1])?,
                prompts: Bound::from_vars(names[2].clone(), &vars[n1..])?,
            };
            let aug = Augment { cfg: &saa, layers: &layers, mask: &sup.token_mask, r: 0.0, noise: &noise };
            Ok(scene_loss(tape, &m, &b, &scene, &sup, Some(&aug), &weights)?.total)
        },
        1e-4,
        Some(2),
    )
    .unwrap();
    report.max_rel_error()
}
