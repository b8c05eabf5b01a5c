use medrec_tensor::gradcheck::check_fn;
use medrec_tensor::{Axis, NodeId, Result, Rng, Tape, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces any node to a scalar with a fixed random weighting so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let [r, c] = tape.shape(x);
    let mut rng = Rng::seeded(seed);
    let w = tape.constant(rand_tensor(&mut rng, r, c));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn assert_check(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) {
    let report = check_fn(inputs, H, TOL, build).unwrap();
    assert_eq!(
        report.within_tol, report.checked,
        "{name}: {:?}",
        report.worst
    );
}

#[test]
fn every_forward_op_passes_gradient_check() {
    let mut rng = Rng::seeded(11);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 2);
    let c = rand_tensor(&mut rng, 3, 4);
    let row = rand_tensor(&mut rng, 1, 4);

    assert_check("matmul", vec![a.clone(), b.clone()], |t, x| {
        let y = t.matmul(x[0], x[1])?;
        weighted_sum(t, y, 1)
    });
    assert_check("add", vec![a.clone(), c.clone()], |t, x| {
        let y = t.add(x[0], x[1])?;
        weighted_sum(t, y, 2)
    });
    assert_check("add_broadcast", vec![a.clone(), row.clone()], |t, x| {
        let y = t.add(x[0], x[1])?;
        weighted_sum(t, y, 3)
    });
    assert_check("sub", vec![a.clone(), row.clone()], |t, x| {
        let y = t.sub(x[0], x[1])?;
        weighted_sum(t, y, 4)
    });
    assert_check("mul", vec![a.clone(), c.clone()], |t, x| {
        let y = t.mul(x[0], x[1])?;
        weighted_sum(t, y, 5)
    });
    assert_check("mul_broadcast", vec![a.clone(), row.clone()], |t, x| {
        let y = t.mul(x[0], x[1])?;
        weighted_sum(t, y, 6)
    });
    assert_check("scale", vec![a.clone()], |t, x| {
        let y = t.scale(x[0], -2.5)?;
        weighted_sum(t, y, 7)
    });
    assert_check("concat_cols", vec![a.clone(), c.clone()], |t, x| {
        let y = t.concat(&[x[0], x[1], x[0]], Axis::Cols)?;
        weighted_sum(t, y, 8)
    });
    assert_check("concat_rows", vec![a.clone(), row.clone()], |t, x| {
        let y = t.concat(&[x[1], x[0]], Axis::Rows)?;
        weighted_sum(t, y, 9)
    });
    assert_check("sum_rows", vec![a.clone()], |t, x| {
        let y = t.sum_rows(x[0])?;
        weighted_sum(t, y, 10)
    });
    assert_check("sigmoid", vec![a.clone()], |t, x| {
        let y = t.sigmoid(x[0])?;
        weighted_sum(t, y, 11)
    });
    assert_check("tanh", vec![a.clone()], |t, x| {
        let y = t.tanh(x[0])?;
        weighted_sum(t, y, 12)
    });
    assert_check("relu", vec![a.clone()], |t, x| {
        let y = t.relu(x[0])?;
        weighted_sum(t, y, 13)
    });
    assert_check("softmax", vec![a.clone()], |t, x| {
        let y = t.softmax(x[0], 2.0)?;
        weighted_sum(t, y, 14)
    });
    assert_check("layer_norm", vec![a.clone()], |t, x| {
        let y = t.layer_norm(x[0], 1e-9)?;
        weighted_sum(t, y, 15)
    });
    assert_check("dropout", vec![a.clone()], |t, x| {
        let mut rng = Rng::seeded(99);
        let y = t.dropout(x[0], 0.4, Some(&mut rng))?;
        weighted_sum(t, y, 16)
    });
    assert_check("gather_rows", vec![a.clone()], |t, x| {
        let y = t.gather_rows(x[0], &[2, 0, 2, 1])?;
        weighted_sum(t, y, 17)
    });
    assert_check("transpose", vec![a.clone()], |t, x| {
        let y = t.transpose(x[0])?;
        weighted_sum(t, y, 18)
    });

    // Loss ops take probabilities in (0, 1); map the raw inputs through a
    // sigmoid so the check covers the whole composite.
    let target = Tensor::matrix(3, 4, vec![1., 0., 1., 0., 0., 0., 1., 1., 1., 0., 0., 0.]).unwrap();
    let mut adj = Tensor::zeros(4, 4);
    for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2), (0, 3), (3, 0)] {
        adj.data_mut()[i * 4 + j] = 1.0;
    }
    let tg = target.clone();
    assert_check("bce_loss", vec![a.clone()], move |t, x| {
        let p = t.sigmoid(x[0])?;
        let m = t.constant(tg.clone());
        t.bce_loss(p, m, 1e-12)
    });
    let tg = target.clone();
    assert_check("margin_loss", vec![a.clone()], move |t, x| {
        let p = t.sigmoid(x[0])?;
        let m = t.constant(tg.clone());
        t.margin_loss(p, m)
    });
    assert_check("ddi_loss", vec![a.clone()], move |t, x| {
        let p = t.sigmoid(x[0])?;
        let r = t.constant(adj.clone());
        t.ddi_loss(p, r)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, div in 0.1f64..10.0) {
        let mut rng = Rng::seeded(seed);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, rows, cols));
        let y = tape.softmax(x, div).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let row = v.row_slice(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..70) {
        let mut rng = Rng::seeded(seed);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, rows, cols));
        let y = tape.layer_norm(x, 1e-9).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let row = v.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn same_seed_same_outputs(seed in any::<u64>()) {
        let run = || {
            let mut rng = Rng::seeded(seed);
            let mut tape = Tape::new();
            let x = tape.var(rand_tensor(&mut rng, 4, 6));
            let w = tape.var(rand_tensor(&mut rng, 6, 3));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.dropout(h, 0.5, Some(&mut rng)).unwrap();
            let y = tape.tanh(h).unwrap();
            let s = tape.sum(y).unwrap();
            let out = tape.value(s).item().unwrap();
            let g = tape.backward(s).unwrap();
            (out.to_bits(), g.wrt(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
