use hodinet_core::gradcheck::{check, random_tensor, weighted_sum, GradCheckConfig};
use hodinet_core::nn::init;
use hodinet_core::tensor::{Axes, Graph, Tensor};
use hodinet_core::Error;
use hodinet_oracles as oracle;
use proptest::prelude::*;

fn t(shape: [usize; 4], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn scalar_mul_and_identity_add() {
    let mut g = Graph::new();
    let a = g.input(t([1, 1, 1, 1], &[2.0]));
    let b = g.input(t([1, 1, 1, 1], &[3.0]));
    let c = g.mul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.0]);

    let x = random_tensor(&mut init::rng(1), [2, 3, 4, 5]);
    let xv = g.input(x.clone());
    let y = g.add_scalar(xv, 0.0);
    let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(g.value(y).data()), bits(x.data()));
}

#[test]
fn channel_broadcast_matches_tiling_oracle() {
    let mut rng = init::rng(2);
    let a = random_tensor(&mut rng, [1, 2, 2, 2]);
    let b = random_tensor(&mut rng, [1, 2, 1, 1]);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.mul(av, bv).unwrap();
    let tiled = oracle::tile(b.data(), [1, 2, 1, 1], [1, 2, 2, 2]);
    let expected: Vec<f64> = a.data().iter().zip(&tiled).map(|(x, y)| x * y).collect();
    assert_eq!(g.value(c).data(), expected.as_slice());
}

#[test]
fn incompatible_shapes_are_dimension_errors() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros([1, 2, 3, 3]));
    let b = g.input(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    let m = g.input(Tensor::zeros([1, 1, 2, 3]));
    assert!(matches!(g.matmul(m, m), Err(Error::Dimension { .. })));
    assert!(g.reshape(a, [1, 1, 1, 17]).is_err());
}

#[test]
fn division_by_near_zero_is_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::full([1, 1, 1, 2], 1.0));
    let b = g.input(t([1, 1, 1, 2], &[1.0, 1e-301]));
    assert!(matches!(g.div(a, b), Err(Error::NearZeroDivisor(..))));
}

#[test]
fn matmul_identity_and_triple_loop() {
    let mut rng = init::rng(3);
    let a = random_tensor(&mut rng, [1, 1, 3, 3]);
    let eye = Tensor::from_fn([1, 1, 3, 3], |_, _, i, j| (i == j) as u8 as f64);
    let mut g = Graph::new();
    let (ev, av) = (g.input(eye), g.input(a.clone()));
    let p = g.matmul(ev, av).unwrap();
    assert_eq!(g.value(p).data(), a.data());

    let x = random_tensor(&mut rng, [1, 1, 2, 3]);
    let y = random_tensor(&mut rng, [1, 1, 3, 2]);
    let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
    let p = g.matmul(xv, yv).unwrap();
    let expected = oracle::matmul(x.data(), y.data(), 2, 3, 2);
    for (u, v) in g.value(p).data().iter().zip(&expected) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn matmul_gradient_is_ones_times_b_transposed() {
    let mut rng = init::rng(4);
    let a = random_tensor(&mut rng, [1, 1, 2, 3]).with_grad();
    let b = random_tensor(&mut rng, [1, 1, 3, 4]);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a), g.input(b.clone()));
    let p = g.matmul(av, bv).unwrap();
    let s = g.sum(p, Axes::ALL).unwrap();
    g.backward(s).unwrap();
    // d/dA[i,k] = sum_j B[k,j]
    let grad = g.grad(av).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let row: f64 = (0..4).map(|j| b.data()[k * 4 + j]).sum();
            assert!((grad[i * 3 + k] - row).abs() < 1e-14);
        }
    }
}

#[test]
fn transpose_against_index_oracle() {
    let mut g = Graph::new();
    let one = g.input(t([1, 1, 1, 1], &[5.0]));
    let tt = g.transpose(one);
    assert_eq!(g.value(tt).data(), &[5.0]);

    let x = random_tensor(&mut init::rng(5), [1, 1, 2, 3]);
    let xv = g.input(x.clone());
    let tt = g.transpose(xv);
    assert_eq!(g.shape(tt).0, [1, 1, 3, 2]);
    assert_eq!(g.value(tt).data(), oracle::transpose(x.data(), 2, 3).as_slice());
    let back = g.transpose(tt);
    assert_eq!(g.value(back).data(), x.data());
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let ones = g.input(Tensor::full([1, 1, 2, 2], 1.0));
    let s = g.sum(ones, Axes::ALL).unwrap();
    assert_eq!(g.value(s).data(), &[4.0]);

    let x = random_tensor(&mut init::rng(6), [2, 3, 4, 5]);
    let xv = g.input(x.clone());
    let m = g.mean(xv, Axes::SPATIAL).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for h in 0..4 {
                for w in 0..5 {
                    acc += x.get(n, c, h, w);
                }
            }
            assert!((g.value(m).get(n, c, 0, 0) - acc / 20.0).abs() < 1e-14);
        }
    }

    let k = g.input(Tensor::full([1, 2, 3, 3], -1.25));
    let mx = g.max(k, Axes::ALL).unwrap();
    assert_eq!(g.value(mx).data(), &[-1.25]);

    let empty = g.input(Tensor::zeros([1, 0, 2, 2]));
    assert!(g.sum(empty, Axes::ALL).is_err());
}

#[test]
fn max_gradient_goes_to_first_argmax() {
    let mut g = Graph::new();
    let x = g.input(t([1, 1, 1, 4], &[1.0, 3.0, 3.0, 2.0]).with_grad());
    let m = g.max(x, Axes::ALL).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn square_at_three_has_gradient_six_and_accumulates() {
    let mut g = Graph::new();
    let x = g.input(t([1, 1, 1, 1], &[3.0]).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    // a second sweep without zeroing adds to the buffer
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grad();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 1, 1, 2]).with_grad());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn sigmoid_sum_gradient_matches_central_differences() {
    let x = random_tensor(&mut init::rng(7), [1, 2, 3, 3]);
    let cfg = GradCheckConfig::default().with_tolerance(1e-6);
    let r = check("sum(sigmoid)", &[x], &cfg, |g, v| {
        let s = g.sigmoid(v[0]);
        g.sum(s, Axes::ALL)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

/// Every primitive against central differences at h = 1e-6, rel-err <= 1e-5.
#[test]
fn primitive_gradients() {
    let mut rng = init::rng(8);
    let cfg = GradCheckConfig::default();
    let shape = [2, 3, 4, 5];
    let x = random_tensor(&mut rng, shape);
    let y = random_tensor(&mut rng, shape);
    let chan = random_tensor(&mut rng, [1, 3, 1, 1]);
    let positive = Tensor::new(shape, x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    type Case = (&'static str, Vec<Tensor>, fn(&mut Graph, &[hodinet_core::Var]) -> hodinet_core::Result<hodinet_core::Var>);
    let cases: Vec<Case> = vec![
        ("add_broadcast", vec![x.clone(), chan.clone()], |g, v| {
            let r = g.add(v[0], v[1])?;
            weighted_sum(g, r, 1)
        }),
        ("sub", vec![x.clone(), y.clone()], |g, v| {
            let r = g.sub(v[0], v[1])?;
            weighted_sum(g, r, 2)
        }),
        ("mul_broadcast", vec![x.clone(), chan.clone()], |g, v| {
            let r = g.mul(v[0], v[1])?;
            weighted_sum(g, r, 3)
        }),
        ("div", vec![x.clone(), positive.clone()], |g, v| {
            let r = g.div(v[0], v[1])?;
            weighted_sum(g, r, 4)
        }),
        ("maximum", vec![x.clone(), y.clone()], |g, v| {
            let r = g.maximum(v[0], v[1])?;
            weighted_sum(g, r, 5)
        }),
        ("scalar_ops", vec![x.clone()], |g, v| {
            let a = g.mul_scalar(v[0], -1.7);
            let b = g.add_scalar(a, 0.3);
            weighted_sum(g, b, 6)
        }),
        ("exp", vec![x.clone()], |g, v| {
            let r = g.exp(v[0]);
            weighted_sum(g, r, 7)
        }),
        ("ln", vec![positive.clone()], |g, v| {
            let r = g.ln(v[0])?;
            weighted_sum(g, r, 8)
        }),
        ("sigmoid", vec![x.clone()], |g, v| {
            let r = g.sigmoid(v[0]);
            weighted_sum(g, r, 9)
        }),
        ("relu", vec![x.clone()], |g, v| {
            let r = g.relu(v[0]);
            weighted_sum(g, r, 10)
        }),
        ("signed_sqrt", vec![x.clone()], |g, v| {
            let r = g.signed_sqrt(v[0]);
            weighted_sum(g, r, 11)
        }),
        ("clamp", vec![x.clone()], |g, v| {
            let r = g.clamp(v[0], -0.5, 0.5);
            weighted_sum(g, r, 12)
        }),
        ("sum_mean_max", vec![x.clone()], |g, v| {
            let a = g.sum(v[0], Axes::SPATIAL)?;
            let b = g.mean(v[0], Axes([true, false, false, true]))?;
            let c = g.max(v[0], Axes::SPATIAL)?;
            let (a, b, c) = (weighted_sum(g, a, 13)?, weighted_sum(g, b, 14)?, weighted_sum(g, c, 15)?);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }),
        ("reshape_transpose", vec![x.clone()], |g, v| {
            let r = g.reshape(v[0], [1, 2, 15, 4])?;
            let t = g.transpose(r);
            weighted_sum(g, t, 16)
        }),
        ("matmul_batched", vec![random_tensor(&mut init::rng(40), [2, 3, 4, 5]), random_tensor(&mut init::rng(41), [1, 1, 5, 3])], |g, v| {
            let r = g.matmul(v[0], v[1])?;
            weighted_sum(g, r, 17)
        }),
        ("concat", vec![x.clone(), y.clone()], |g, v| {
            let r = g.concat(&[v[0], v[1], v[0]], 1)?;
            let s = g.concat(&[r, r], 3)?;
            weighted_sum(g, s, 18)
        }),
        ("softmax", vec![x.clone()], |g, v| {
            let r = g.softmax(v[0]);
            weighted_sum(g, r, 19)
        }),
        ("l2_normalize_rows", vec![x.clone()], |g, v| {
            let r = g.l2_normalize_rows(v[0], 1e-12);
            weighted_sum(g, r, 20)
        }),
        ("upsample", vec![random_tensor(&mut init::rng(42), [1, 2, 3, 4])], |g, v| {
            let r = g.upsample_bilinear(v[0], 7, 5)?;
            weighted_sum(g, r, 21)
        }),
        ("batch_norm", vec![x.clone()], |g, v| {
            let (r, _, _) = g.batch_norm(v[0], 1e-5)?;
            weighted_sum(g, r, 22)
        }),
        ("conv2d", vec![random_tensor(&mut init::rng(43), [2, 3, 5, 5]), random_tensor(&mut init::rng(44), [4, 3, 3, 3]), random_tensor(&mut init::rng(45), [1, 4, 1, 1])], |g, v| {
            let a = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, a, 23)
        }),
        ("conv2d_pointwise", vec![random_tensor(&mut init::rng(46), [2, 3, 4, 4]), random_tensor(&mut init::rng(47), [2, 3, 1, 1])], |g, v| {
            let a = g.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_sum(g, a, 24)
        }),
    ];
    for (name, inputs, f) in cases {
        let r = check(name, &inputs, &cfg, f).unwrap();
        assert!(r.passed(), "{name}: {r:?}");
    }
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let x = random_tensor(&mut init::rng(9), [1, 1, 3, 3]);
    let cfg = GradCheckConfig::default();
    let r = check("bad_square", &[x], &cfg, |g, v| {
        let value = g.value(v[0]).clone();
        let squared = Tensor::new(value.shape(), value.data().iter().map(|a| a * a).collect())?;
        // correct rule is 2x; this one is 2.02x
        let y = g.custom(
            v[0],
            squared,
            Box::new(|x, _y, gy, gx| {
                for i in 0..x.len() {
                    gx[i] = 2.02 * x[i] * gy[i];
                }
            }),
        )?;
        weighted_sum(g, y, 1)
    })
    .unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_err > 5e-3);
}

fn shape_strategy() -> impl Strategy<Value = ([usize; 4], [bool; 4])> {
    ([1usize..=2, 1usize..=3, 1usize..=4, 1usize..=4], [any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()])
        .prop_map(|(d, ones)| (d, ones))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_matches_tiling((full, ones) in shape_strategy(), seed in 0u64..1000, swap in any::<bool>()) {
        let mut small = full;
        for i in 0..4 {
            if ones[i] { small[i] = 1; }
        }
        let mut rng = init::rng(seed);
        let a = random_tensor(&mut rng, full);
        let b = random_tensor(&mut rng, small);
        let tiled = oracle::tile(b.data(), small, full);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b));
        let (sum, prod) = if swap {
            (g.add(bv, av).unwrap(), g.mul(bv, av).unwrap())
        } else {
            (g.add(av, bv).unwrap(), g.mul(av, bv).unwrap())
        };
        for i in 0..a.numel() {
            prop_assert_eq!(g.value(sum).data()[i], a.data()[i] + tiled[i]);
            prop_assert_eq!(g.value(prod).data()[i], a.data()[i] * tiled[i]);
        }
    }

    #[test]
    fn ops_on_finite_inputs_stay_finite(seed in 0u64..1000, scale in 1.0f64..500.0) {
        let mut rng = init::rng(seed);
        let mut x = random_tensor(&mut rng, [1, 2, 3, 3]);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut g = Graph::new();
        let xv = g.input(x.with_grad());
        let s = g.sigmoid(xv);
        let q = g.signed_sqrt(xv);
        let e = g.softmax(xv);
        let n = g.l2_normalize_rows(xv, 1e-12);
        let all = g.concat(&[s, q, e, n], 1).unwrap();
        prop_assert!(g.value(all).is_finite());
        let total = g.sum(all, Axes::ALL).unwrap();
        g.backward(total).unwrap();
        prop_assert!(g.grad(xv).unwrap().iter().all(|v| v.is_finite()));
    }
}
