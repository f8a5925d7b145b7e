use evidex::gradcheck::{compare, DEFAULT_STEP};
use evidex::tensor::{conv2d_reference, softmax_slice, Adam, Tape, Tensor, Var};
use evidex::Result;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    // cheap deterministic fill in [-1, 1)
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

prop_compose! {
    fn conv_geometry()(
        n in 1usize..3, c in 1usize..4, k in 1usize..4,
        h in 1usize..9, w in 1usize..9,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..4, pad in 0usize..3,
    ) -> (usize, usize, usize, usize, usize, usize, usize, usize, usize) {
        (n, c, k, h, w, kh, kw, stride, pad)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv2d_matches_naive_loops((n, c, k, h, w, kh, kw, stride, pad) in conv_geometry(), seed in any::<u64>()) {
        prop_assume!(kh <= h + 2 * pad && kw <= w + 2 * pad);
        let x = tensor(vec![n, c, h, w], seed);
        let kern = tensor(vec![k, c, kh, kw], seed ^ 0xABCD);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(kern.clone());
        let out = tape.conv2d(xv, kv, stride, pad).unwrap();
        let fast = tape.value(out);
        let slow = conv2d_reference(&x, &kern, stride, pad).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert_eq!(fast.shape()[2], (h + 2 * pad - kh) / stride + 1);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax_slice(&v);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tensor_shape_product_matches_len(shape in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn adam_moves_at_most_lr(g in prop::collection::vec(-1e3f64..1e3, 1..8), steps in 1usize..6, lr in 1e-4f64..1.0) {
        let mut p = Tensor::zeros(vec![g.len()]);
        let mut adam = Adam::new(lr);
        for _ in 0..steps {
            let before = p.data().to_vec();
            adam.step(&mut [&mut p], &[&g]).unwrap();
            for (a, b) in before.iter().zip(p.data()) {
                prop_assert!((a - b).abs() <= lr * (1.0 + 1e-6));
            }
        }
        prop_assert_eq!(adam.step_count(), steps as u64);
    }
}

/// A small conv net, sigmoid head and mean-squared loss: exercises most ops in one graph.
fn composite(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let c = tape.conv2d(v[0], v[1], 1, 1)?;
    let c = tape.bias_add(c, v[2])?;
    let a = tape.relu(c)?;
    let p = tape.avg_pool2(a)?;
    let u = tape.upsample_nearest2x(p)?;
    let cat = tape.concat_channels(u, a)?;
    let s = tape.sigmoid(cat)?;
    let g = tape.global_avg_pool(s)?;
    let sq = tape.square(g)?;
    let tv = tape.diff(s, 3)?;
    let tv = tape.abs_sum(tv)?;
    let m = tape.mean(sq)?;
    tape.add(m, tv)
}

#[test]
fn composite_graph_matches_finite_differences() {
    for seed in 0..10 {
        let inputs = vec![
            tensor(vec![1, 2, 4, 4], seed),
            tensor(vec![3, 2, 3, 3], seed + 100),
            tensor(vec![3], seed + 200),
        ];
        let cmp = compare(&composite, &inputs, None, DEFAULT_STEP).unwrap();
        assert!(cmp.relative_error() < 1e-4, "seed {seed}: {}", cmp.relative_error());
    }
}

#[test]
fn identical_passes_give_identical_gradients() {
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = [
            tensor(vec![1, 2, 6, 6], 7),
            tensor(vec![3, 2, 3, 3], 8),
            tensor(vec![3], 9),
        ]
        .into_iter()
        .map(|t| tape.leaf(t.with_grad()))
        .collect();
        let loss = composite(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn softmax_cross_entropy_hand_values() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
    let ce = tape.softmax_cross_entropy(logits, vec![2]).unwrap();
    assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
}
