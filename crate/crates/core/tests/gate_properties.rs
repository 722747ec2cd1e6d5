use proptest::prelude::*;
use tgate::{gate_tensor, grad_shaping, step_gate, trainable_gate, ShapeKind, Tape, Tensor, TrainableGate};

fn kind() -> impl Strategy<Value = ShapeKind> {
    prop::sample::select(ShapeKind::ALL.to_vec())
}

fn m_value() -> impl Strategy<Value = u32> {
    prop::sample::select(vec![1u32, 10, 1_000, 100_000])
}

proptest! {
    #[test]
    fn sawtooth_range(w in -50.0f64..50.0, m in m_value()) {
        let s = grad_shaping(w, m).unwrap();
        prop_assert!(s >= 0.0 && s < 1.0 / f64::from(m), "s({w}) = {s}");
    }

    #[test]
    fn sawtooth_periodicity(w in -1.0f64..1.0) {
        let period = 1e-5;
        let a = grad_shaping(w, 100_000).unwrap();
        let b = grad_shaping(w + period, 100_000).unwrap();
        // Near a piece boundary rounding can put the two points on either
        // side of the jump; compare on the circle of circumference 1/M.
        let d = (a - b).abs();
        prop_assert!(d.min(period - d) <= 1e-12, "s({w}) = {a}, s(w + 1/M) = {b}");
    }

    #[test]
    fn step_gate_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(step_gate(lo) <= step_gate(hi));
    }

    #[test]
    fn gate_stays_within_bound_of_step(w in -3.0f64..3.0, k in kind(), m in m_value()) {
        let gate = TrainableGate::new(m, k).unwrap();
        let bound = gate.shape_fn().sup_abs() / f64::from(m);
        let dev = (trainable_gate(w, &gate) - f64::from(step_gate(w))).abs();
        prop_assert!(dev <= bound, "|TG - b| = {dev} > {bound}");
    }

    #[test]
    fn tape_gradient_matches_scalar_rule(ws in prop::collection::vec(-2.0f64..2.0, 1..16), k in kind(), m in m_value()) {
        let gate = TrainableGate::new(m, k).unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(ws.clone()));
        let tg = gate_tensor(&mut tape, w, gate).unwrap();
        for (v, &wi) in tape.value(tg).data().iter().zip(&ws) {
            prop_assert_eq!(*v, trainable_gate(wi, &gate));
        }
        let loss = tape.sum(tg).unwrap();
        let g = tape.backward(loss).unwrap().get(w);
        for (gi, &wi) in g.data().iter().zip(&ws) {
            prop_assert_eq!(*gi, gate.derivative(wi));
        }
    }

    #[test]
    fn closed_gate_gradient_is_nonzero(w in -2.0f64..0.0, k in kind()) {
        // sigmoid' and tanh' are strictly positive; the rule is g + s·g'.
        let gate = TrainableGate::new(100_000, k).unwrap();
        prop_assert_eq!(step_gate(w), 0);
        prop_assert!(gate.derivative(w) > 0.0);
    }
}

#[test]
fn zero_is_closed() {
    assert_eq!(step_gate(0.0), 0);
    assert_eq!(step_gate(f64::MIN_POSITIVE), 1);
    let gate = TrainableGate::default();
    assert_eq!(trainable_gate(0.0, &gate), 0.0);
}
