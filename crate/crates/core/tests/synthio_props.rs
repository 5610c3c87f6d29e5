use sha2::{Digest, Sha256};
use textood::synthio::{
    generate, generate_tagged, load_dataset, save_dataset, Dataset, OodEntry, Provenance, SceneRecipe, Shape,
};

/// Disk of radius `r` by Euclidean distance between pixel centres, clipped to the image.
fn reference_disk(cy: i64, cx: i64, r: f64, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt();
            m[y * w + x] = d <= r + 1e-9;
        }
    }
    m
}

#[test]
fn pasted_disk_matches_reference_rasterizer() {
    let recipe = SceneRecipe {
        ood_palette: vec![OodEntry { shape: Shape::Disk, color: "green".into() }],
        ood_size_range: (3, 3),
        max_ood_objects: 1,
        paste_probability: 1.0,
        ..SceneRecipe::train_default(77)
    };
    let mut interior = 0;
    for scene in generate(&recipe, 40).unwrap() {
        let hits: Vec<(i64, i64)> = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| reference_disk(y, x, 3.0, 32, 32) == scene.ood_mask)
            .collect();
        assert_eq!(hits.len(), 1, "mask is not a single radius-3 disk");
        let (cy, cx) = hits[0];
        if (3..29).contains(&cy) && (3..29).contains(&cx) {
            interior += 1;
            assert_eq!(scene.ood_pixels(), 29);
        }
    }
    assert!(interior > 10);
}

fn sha(bytes: &[u8]) -> Vec<u8> {
    Sha256::digest(bytes).to_vec()
}

#[test]
fn hundred_scene_round_trip_hash() {
    let ds = Dataset::new(4, "cfg", generate(&SceneRecipe::eval_default(3), 100).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("eval.tdsc");
    save_dataset(&p, &ds).unwrap();
    let first = sha(&std::fs::read(&p).unwrap());
    let back = load_dataset(&p).unwrap();
    assert_eq!(back, ds);
    save_dataset(&p, &back).unwrap();
    assert_eq!(sha(&std::fs::read(&p).unwrap()), first);
}

#[test]
fn palettes_never_cross() {
    for recipe in [SceneRecipe::train_default(5), SceneRecipe::eval_default(6)] {
        let k = recipe.num_classes() as u8;
        for (scene, tags) in generate_tagged(&recipe, 150).unwrap() {
            for (p, t) in tags.iter().enumerate() {
                match *t {
                    Provenance::Id(j) => {
                        let e = &recipe.id_palette[j];
                        assert!(!recipe.ood_palette.iter().any(|o| o.shape == e.shape && o.color == e.color));
                        assert_eq!(scene.class_map[p], e.class as u8);
                        assert!(!scene.ood_mask[p]);
                    }
                    Provenance::Ood(j) => {
                        let o = &recipe.ood_palette[j];
                        assert!(!recipe.id_palette.iter().any(|e| o.shape == e.shape && o.color == e.color));
                        assert_eq!(scene.class_map[p], k);
                        assert!(scene.ood_mask[p]);
                    }
                }
            }
        }
    }
}

#[test]
fn train_and_eval_outliers_are_disjoint() {
    let (tr, ev) = (SceneRecipe::train_default(0), SceneRecipe::eval_default(0));
    for o in &ev.ood_palette {
        assert!(!tr.ood_palette.iter().any(|t| t.shape == o.shape));
    }
}

#[test]
fn every_class_in_most_scenes() {
    let mut freq = [0.0f64; 4];
    let seeds = [1, 2, 3];
    for seed in seeds {
        let scenes = generate(&SceneRecipe::train_default(seed), 200).unwrap();
        for (c, f) in freq.iter_mut().enumerate() {
            let present = scenes.iter().filter(|s| s.class_map.contains(&(c as u8))).count();
            *f += present as f64 / scenes.len() as f64 / seeds.len() as f64;
        }
    }
    for (c, f) in freq.iter().enumerate() {
        assert!(*f >= 0.8, "class {c} present in {:.2} of scenes", f);
    }
}
