use mapdistill_core::gradcheck::check_gradient;
use mapdistill_core::optim::lr_schedule;
use mapdistill_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0..50.0f64, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 9)) {
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.softmax_rows(v).unwrap();
        let c = x.shape()[1];
        for row in tape.value(s).chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 || c > 1));
        }
    }

    #[test]
    fn transpose_is_an_involution(x in matrix(5, 5)) {
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let t = tape.transpose2d(v).unwrap();
        let tt = tape.transpose2d(t).unwrap();
        prop_assert_eq!(tape.tensor(tt), x);
    }

    #[test]
    fn blob_round_trip(x in matrix(4, 7)) {
        let blob = x.to_blob();
        let (back, used) = Tensor::from_blob(&blob).unwrap();
        prop_assert_eq!(used, blob.len());
        prop_assert_eq!(back, x);
    }

    #[test]
    fn schedule_never_increases(lr0 in 1e-5..1.0f64, factor in 0.01..1.0f64, m1 in 0usize..20, m2 in 0usize..20) {
        let ms = [m1.min(m2), m1.max(m2)];
        let mut prev = lr_schedule(0, lr0, factor, &ms);
        prop_assert_eq!(prev, lr0.min(prev).max(prev));
        for e in 1..30 {
            let lr = lr_schedule(e, lr0, factor, &ms);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn matmul_identity_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let a = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let ii = tape.matmul(i2, i2).unwrap();
    assert_eq!(tape.value(ii), &[1.0, 0.0, 0.0, 1.0]);
    let ai = tape.matmul(a, i2).unwrap();
    assert_eq!(tape.value(ai), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn gradient_of_summed_product_is_row_broadcast_of_b_transpose() {
    let a = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(&[4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
    let mut tape = Tape::new();
    let av = tape.leaf(&a.clone().with_grad());
    let bv = tape.constant(&b);
    let y = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap().get(av);
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((g.data()[i * 4 + k] - want).abs() < 1e-15);
        }
    }
    let err = check_gradient(
        |t, x| {
            let bv = t.constant(&b);
            let y = t.matmul(x, bv)?;
            Ok(t.sum(y))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn transpose_gradient_on_random_input() {
    let x = Tensor::new(&[2, 4], vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.7, -0.9]).unwrap();
    let w = Tensor::new(&[4, 2], vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0, 0.0, 2.0]).unwrap();
    let err = check_gradient(
        |t, x| {
            let y = t.transpose2d(x)?;
            let w = t.constant(&w);
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let x = Tensor::new(&[3, 3], (0..9).map(|i| (i as f64).sqrt() - 1.0).collect()).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad());
        let s = tape.softmax_rows(v).unwrap();
        let t = tape.tanh(s);
        let l = tape.sum(t);
        let g = tape.backward(l).unwrap().get(v);
        (tape.value(l).to_vec(), g)
    };
    assert_eq!(run(), run());
}
