//! Autodiff gradients against central finite differences (step 1e-5).

use proptest::prelude::*;
use tgate::{Padding, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Compares the tape gradient of `build` with central differences for every
/// element of every input. `build` must reduce to a scalar.
fn gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

fn tensor(shape: &[usize]) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.5f64..1.5, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Values bounded away from the relu kink.
fn off_kink(shape: &[usize]) -> impl Strategy<Value = Tensor> {
    tensor(shape).prop_map(|t| t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_chain(a in off_kink(&[3, 4]), b in tensor(&[3, 4])) {
        let err = gradcheck(&[a, b], &|t, v| {
            let s = t.sin(v[0]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let r = t.relu(v[0]).unwrap();
            let d = t.sub(m, r).unwrap();
            let q = t.square(d).unwrap();
            let o = t.offset(q, 0.3).unwrap();
            let sc = t.scale(o, -1.7).unwrap();
            let a2 = t.add(sc, v[1]).unwrap();
            t.mean(a2).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn matmul_and_bias(x in tensor(&[3, 4]), w in tensor(&[4, 5]), b in tensor(&[5])) {
        let err = gradcheck(&[x, w, b], &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.add_channel_bias(y, v[2]).unwrap();
            let y = t.sin(y).unwrap();
            t.sum(y).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn conv_same_and_valid(
        x in tensor(&[2, 2, 5, 5]),
        k in tensor(&[3, 2, 3, 3]),
        b in tensor(&[3]),
        stride in 1usize..3,
        same in any::<bool>(),
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        let err = gradcheck(&[x, k, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], stride, padding).unwrap();
            let y = t.add_channel_bias(y, v[2]).unwrap();
            let y = t.sin(y).unwrap();
            let f = t.flatten(y).unwrap();
            let sq = t.square(f).unwrap();
            t.sum(sq).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn channel_scaling_and_reshape(x in tensor(&[2, 3, 2, 2]), s in tensor(&[3])) {
        let err = gradcheck(&[x, s], &|t, v| {
            let y = t.mul_channels(v[0], v[1]).unwrap();
            let y = t.reshape(y, &[2, 12]).unwrap();
            let y = t.sin(y).unwrap();
            let y = t.div_const(y, 3.0).unwrap();
            t.sum(y).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy(logits in tensor(&[4, 3]), labels in prop::collection::vec(0usize..3, 4)) {
        let err = gradcheck(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn reused_parameter_sums_paths(a in tensor(&[5])) {
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone());
        let p1 = tape.scale(v, 2.0).unwrap();
        let p2 = tape.sin(v).unwrap();
        let s = tape.add(p1, p2).unwrap();
        let out = tape.sum(s).unwrap();
        let g = tape.backward(out).unwrap().get(v);
        for (gi, ai) in g.data().iter().zip(a.data()) {
            prop_assert!((gi - (2.0 + ai.cos())).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(x in tensor(&[2, 1, 6, 6]), k in tensor(&[2, 1, 3, 3])) {
        let run = || {
            let mut tape = Tape::new();
            let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
            let y = tape.conv2d(xv, kv, 2, Padding::Same).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
