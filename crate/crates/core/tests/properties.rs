//! Algebraic properties of the losses and the optimizer.

use lwdna_core::optim::{Schedule, Sgd};
use lwdna_core::tape::Tape;
use lwdna_core::Tensor;
use proptest::prelude::*;

fn logits_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..5, 2usize..6).prop_flat_map(|(n, k)| {
        (
            Just(n),
            Just(k),
            prop::collection::vec(-5.0f64..5.0, n * k),
            prop::collection::vec(0..k, n),
        )
    })
}

fn ce(n: usize, k: usize, x: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![n, k], x.to_vec()).unwrap());
    let l = tape.cross_entropy(v, labels).unwrap();
    tape.value(l).item()
}

fn kd(n: usize, k: usize, x: &[f64], teacher: &[f64], labels: &[usize], lambda: f64, t: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![n, k], x.to_vec()).unwrap());
    let teacher = Tensor::new(vec![n, k], teacher.to_vec()).unwrap();
    let l = tape.kd_loss(v, &teacher, labels, lambda, t).unwrap();
    tape.value(l).item()
}

proptest! {
    #[test]
    fn cross_entropy_is_shift_invariant((n, k, x, labels) in logits_strategy(), shift in -50.0f64..50.0) {
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        prop_assert!((ce(n, k, &x, &labels) - ce(n, k, &shifted, &labels)).abs() < 1e-10);
    }

    #[test]
    fn kd_without_teacher_weight_is_cross_entropy((n, k, x, labels) in logits_strategy(), t in 0.5f64..8.0) {
        let teacher: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(kd(n, k, &x, &teacher, &labels, 0.0, t).to_bits(), ce(n, k, &x, &labels).to_bits());
    }

    #[test]
    fn kd_against_itself_is_scaled_cross_entropy((n, k, x, labels) in logits_strategy(), lambda in 0.0f64..=1.0, t in 0.5f64..8.0) {
        let expect = (1.0 - lambda) * ce(n, k, &x, &labels);
        prop_assert_eq!(kd(n, k, &x, &x, &labels, lambda, t).to_bits(), expect.to_bits());
    }

    #[test]
    fn plain_sgd_is_gradient_descent(p in prop::collection::vec(-3.0f64..3.0, 1..8), lr in 0.0f64..1.0) {
        let g: Vec<f64> = p.iter().map(|v| 0.5 * v + 1.0).collect();
        let mut t = Tensor::from_vec(p.clone());
        let mut opt = Sgd::new(0.0, 0.0).unwrap();
        opt.step(&mut [&mut t], &[&g], lr).unwrap();
        for ((a, b), gv) in t.data().iter().zip(&p).zip(&g) {
            prop_assert_eq!(*a, b - lr * gv);
        }
    }

    #[test]
    fn step_schedule_is_non_increasing(total in 1usize..400) {
        let s = Schedule::step_default();
        let lrs: Vec<f64> = (0..total).map(|e| s.lr_at(0.1, e, total)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
