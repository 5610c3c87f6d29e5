//! Every tape op wrapped into a scalar loss for finite-difference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textood::diffcore::{check_gradients, Tape, Tensor, Var};

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> textood::Result<Var>>;

/// Each op wrapped into a scalar loss, with the input shapes it expects.
pub fn op_cases() -> Vec<(&'static str, Vec<(usize, usize)>, LossFn)> {
    let weights = |tape: &mut Tape, x: Var, seed: u64| -> textood::Result<Var> {
        // fixed random projection to turn any matrix into a non-trivial scalar
        let shape = tape.value(x).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let w = tape.constant(w);
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    };
    vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(move |t, v| { let y = t.matmul(v[0], v[1])?; weights(t, y, 1) })),
        ("matmul_bt", vec![(3, 4), (5, 4)], Box::new(move |t, v| { let y = t.matmul_bt(v[0], v[1])?; weights(t, y, 2) })),
        ("transpose", vec![(3, 4)], Box::new(move |t, v| { let y = t.transpose(v[0])?; weights(t, y, 3) })),
        ("add_sub_mul", vec![(3, 3), (3, 3)], Box::new(move |t, v| {
            let a = t.add(v[0], v[1])?; let s = t.sub(a, v[1])?; let m = t.mul(s, v[1])?; weights(t, m, 4)
        })),
        ("add_bias", vec![(4, 3), (1, 3)], Box::new(move |t, v| { let y = t.add_bias(v[0], v[1])?; weights(t, y, 5) })),
        ("gelu", vec![(3, 5)], Box::new(move |t, v| { let y = t.gelu(v[0]); weights(t, y, 6) })),
        ("sigmoid", vec![(3, 5)], Box::new(move |t, v| { let y = t.sigmoid(v[0]); weights(t, y, 7) })),
        ("softmax_rows", vec![(3, 5)], Box::new(move |t, v| { let y = t.softmax_rows(v[0])?; weights(t, y, 8) })),
        ("layer_norm", vec![(4, 6), (1, 6), (1, 6)], Box::new(move |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weights(t, y, 9) })),
        ("normalize_rows", vec![(3, 4)], Box::new(move |t, v| { let y = t.normalize_rows(v[0])?; weights(t, y, 10) })),
        ("mean_rows", vec![(3, 4)], Box::new(move |t, v| { let y = t.mean_rows(v[0])?; weights(t, y, 11) })),
        ("concat_slice_gather", vec![(2, 3), (3, 3)], Box::new(move |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?; let s = t.slice_rows(c, 1, 4)?; let g = t.gather_rows(s, &[2, 0, 2, 1])?; weights(t, g, 12)
        })),
        ("cross_entropy", vec![(4, 3)], Box::new(|t, v| t.cross_entropy(v[0], &[2, 0, 1, 1]))),
        ("presence_nll", vec![(3, 4)], Box::new(|t, v| t.presence_nll(v[0], &[1, 3, 3], &[true, false, true]))),
        ("bce_with_logits", vec![(2, 5)], Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]))),
        ("dice", vec![(2, 4)], Box::new(|t, v| { let p = t.sigmoid(v[0]); t.dice_loss(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], 1.0) })),
        ("l2_distance", vec![(3, 2), (3, 2)], Box::new(|t, v| t.squared_l2(v[0], v[1]))),
        ("row_blend", vec![(3, 4), (3, 4)], Box::new(move |t, v| { let y = t.row_blend(v[0], v[1], &[1.0, 0.0, 0.25])?; weights(t, y, 13) })),
        ("attention", vec![(3, 4), (5, 4), (5, 2)], Box::new(move |t, v| { let y = t.attention(v[0], v[1], v[2])?; weights(t, y, 14) })),
        ("attention_then_cross_entropy", vec![(4, 3), (4, 3), (4, 3)], Box::new(|t, v| {
            let y = t.attention(v[0], v[1], v[2])?; t.cross_entropy(y, &[0, 2, 1, 0])
        })),
    ]
}


fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Largest relative error of each op over seeds `0..seeds`.
pub fn op_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let worst = (0..seeds)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
                    check_gradients(&inputs, &f, 1e-4, None).unwrap().max_rel_error()
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
