use hodinet_core::decoder::SaliencyOutput;
use hodinet_core::gradcheck::{check, random_tensor, GradCheckConfig};
use hodinet_core::loss::{bce, hybrid, iou, ssim, total_loss, PROB_CLAMP};
use hodinet_core::nn::init;
use hodinet_core::tensor::{Graph, Tensor, Var};
use hodinet_core::Error;
use hodinet_oracles::loss as oracle;
use rand::Rng;

type LossFn = fn(&mut Graph, Var, Var) -> hodinet_core::Result<Var>;
const LOSSES: [(&str, LossFn); 3] = [("bce", bce), ("ssim", ssim), ("iou", iou)];

fn eval(f: LossFn, p: &Tensor, t: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.input(p.clone()), g.input(t.clone()));
    let l = f(&mut g, a, b).unwrap();
    g.value(l).item().unwrap()
}

fn random_pair(rng: &mut init::InitRng, shape: [usize; 4]) -> (Tensor, Tensor) {
    let p = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0));
    let t = Tensor::from_fn(shape, |_, _, _, _| rng.gen_bool(0.4) as u8 as f64);
    (p, t)
}

#[test]
fn bounds_on_random_inputs() {
    let mut rng = init::rng(1);
    for _ in 0..100 {
        let shape = [rng.gen_range(1..3), 1, rng.gen_range(4..20), rng.gen_range(4..20)];
        let (p, t) = random_pair(&mut rng, shape);
        let b = eval(bce, &p, &t);
        let s = eval(ssim, &p, &t);
        let i = eval(iou, &p, &t);
        assert!(b >= 0.0 && b.is_finite());
        assert!((0.0..=2.0).contains(&s), "ssim {s}");
        assert!((0.0..=1.0).contains(&i), "iou {i}");
    }
}

#[test]
fn perfect_prediction_is_near_zero() {
    let mut rng = init::rng(2);
    for shape in [[1, 1, 8, 8], [2, 1, 16, 16], [1, 1, 24, 20]] {
        let (_, t) = random_pair(&mut rng, shape);
        let pixels = (shape[2] * shape[3]) as f64;
        // clamping leaves -ln(1 - 1e-7) per pixel
        let b = eval(bce, &t, &t);
        assert!(b / pixels <= 1e-5);
        assert!((b / pixels - -(1.0 - PROB_CLAMP).ln()).abs() < 1e-15);
        assert!(eval(ssim, &t, &t).abs() <= 1e-5);
        assert!(eval(iou, &t, &t).abs() <= 1e-5);
    }
}

#[test]
fn half_probability_costs_ln_two_per_pixel() {
    let p = Tensor::full([2, 1, 4, 4], 0.5);
    let (_, t) = random_pair(&mut init::rng(3), [2, 1, 4, 4]);
    assert!((eval(bce, &p, &t) - 16.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn disjoint_prediction_has_unit_iou_loss() {
    let t = Tensor::from_fn([1, 1, 6, 6], |_, _, h, _| (h < 2) as u8 as f64);
    let p = Tensor::from_fn([1, 1, 6, 6], |_, _, h, _| (h >= 2) as u8 as f64);
    assert_eq!(eval(iou, &p, &t), 1.0);
}

#[test]
fn ssim_is_symmetric() {
    let mut rng = init::rng(4);
    for shape in [[1, 1, 16, 16], [2, 1, 8, 9], [1, 1, 12, 30]] {
        let (p, _) = random_pair(&mut rng, shape);
        let (q, _) = random_pair(&mut rng, shape);
        assert!((eval(ssim, &p, &q) - eval(ssim, &q, &p)).abs() <= 1e-12);
    }
}

#[test]
fn losses_fall_as_prediction_moves_toward_target() {
    let mut rng = init::rng(5);
    for shape in [[1, 1, 16, 16], [1, 1, 8, 8]] {
        for _ in 0..5 {
            let (_, t) = random_pair(&mut rng, shape);
            for (name, f) in LOSSES {
                let mut last = f64::INFINITY;
                for k in 0..5 {
                    let a = k as f64 / 4.0;
                    let p = Tensor::from_fn(shape, |n, c, h, w| {
                        let g = t.get(n, c, h, w);
                        (1.0 - a) * (1.0 - g) + a * g
                    });
                    let v = eval(f, &p, &t);
                    assert!(v < last, "{name} at {a}: {v} vs {last}");
                    last = v;
                }
            }
        }
    }
}

#[test]
fn losses_match_loop_oracles() {
    let mut rng = init::rng(6);
    for _ in 0..10 {
        let (p, t) = random_pair(&mut rng, [2, 1, 4, 4]);
        assert!((eval(bce, &p, &t) - oracle::bce(p.data(), t.data(), 2)).abs() <= 1e-10);
        assert!((eval(iou, &p, &t) - oracle::iou(p.data(), t.data(), 2)).abs() <= 1e-12);
        assert!((eval(ssim, &p, &t) - oracle::ssim(p.data(), t.data(), 2, 4, 4)).abs() <= 1e-12);
        let (p, t) = random_pair(&mut rng, [2, 1, 16, 16]);
        assert!((eval(ssim, &p, &t) - oracle::ssim(p.data(), t.data(), 2, 16, 16)).abs() <= 1e-12);
        let (p, t) = random_pair(&mut rng, [1, 1, 13, 21]);
        assert!((eval(ssim, &p, &t) - oracle::ssim(p.data(), t.data(), 1, 13, 21)).abs() <= 1e-12);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros([1, 1, 8, 8]));
    let b = g.input(Tensor::zeros([1, 1, 8, 4]));
    let c = g.input(Tensor::zeros([1, 2, 8, 8]));
    for (_, f) in LOSSES {
        assert!(matches!(f(&mut g, a, b), Err(Error::Dimension { .. })));
        assert!(matches!(f(&mut g, c, c), Err(Error::Dimension { .. })));
    }
    let out = SaliencyOutput { p: [a; 4] };
    assert!(total_loss(&mut g, &out, b).is_err());
}

#[test]
fn total_is_the_sum_of_twelve_terms() {
    let mut rng = init::rng(7);
    let shape = [2, 1, 16, 16];
    let (_, t) = random_pair(&mut rng, shape);
    let preds: Vec<Tensor> = (0..4).map(|_| random_pair(&mut rng, shape).0).collect();
    let mut g = Graph::new();
    let tv = g.input(t.clone());
    let pv: Vec<Var> = preds.iter().map(|p| g.input(p.clone())).collect();
    let out = SaliencyOutput { p: [pv[0], pv[1], pv[2], pv[3]] };
    let (total, parts) = total_loss(&mut g, &out, tv).unwrap();

    let mut hand = 0.0;
    for (i, p) in preds.iter().enumerate() {
        let s = &parts.stages[i];
        assert_eq!(s.bce, eval(bce, p, &t));
        assert_eq!(s.ssim, eval(ssim, p, &t));
        assert_eq!(s.iou, eval(iou, p, &t));
        assert!(s.bce >= 0.0 && s.ssim >= 0.0 && s.iou >= 0.0);
        hand += s.bce + s.ssim + s.iou;
    }
    assert!((parts.total - hand).abs() <= 1e-12 * hand);
    assert_eq!(g.value(total).item().unwrap(), parts.total);

    let mut g = Graph::new();
    let (a, b) = (g.input(preds[0].clone()), g.input(t.clone()));
    let (h, s) = hybrid(&mut g, a, b).unwrap();
    assert_eq!(g.value(h).item().unwrap(), s.hybrid());

    // every prediction equal to the target
    let mut g = Graph::new();
    let tv = g.input(t.clone());
    let (_, parts) = total_loss(&mut g, &SaliencyOutput { p: [tv; 4] }, tv).unwrap();
    assert!(parts.total / (2.0 * 256.0) <= 1e-5);
    assert!(parts.stages.iter().all(|s| s.ssim.abs() <= 1e-5 && s.iou.abs() <= 1e-5));
}

#[test]
fn loss_gradients_with_respect_to_predictions() {
    let mut rng = init::rng(8);
    let cfg = GradCheckConfig::default();
    for shape in [[2, 1, 4, 4], [1, 1, 13, 12]] {
        let p = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.05..0.95));
        let (_, t) = random_pair(&mut rng, shape);
        for (name, f) in LOSSES {
            let r = check(name, std::slice::from_ref(&p), &cfg, |g, v| {
                let tv = g.constant(t.clone());
                f(g, v[0], tv)
            })
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}

#[test]
fn total_gradient_through_final_logits() {
    let mut rng = init::rng(9);
    let shape = [1, 1, 12, 12];
    let z = random_tensor(&mut rng, shape);
    let (_, t) = random_pair(&mut rng, shape);
    let others: Vec<Tensor> = (0..3).map(|_| random_pair(&mut rng, shape).0).collect();
    let r = check("total", &[z], &GradCheckConfig::default(), |g, v| {
        let p1 = g.sigmoid(v[0]);
        let rest: Vec<Var> = others.iter().map(|o| g.constant(o.clone())).collect();
        let tv = g.constant(t.clone());
        let out = SaliencyOutput { p: [p1, rest[0], rest[1], rest[2]] };
        Ok(total_loss(g, &out, tv)?.0)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}
