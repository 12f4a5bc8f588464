//! Invariant checks runnable in-process, against the loop implementations
//! in `hodinet_oracles` where one exists. Each function returns the
//! measured quantity; thresholds live in [`run_all`] and in the tests.

use hodinet_core::encoders::{replicate_channels, ConvBnRelu};
use hodinet_core::fusion::{Hocf, Hosf};
use hodinet_core::gradcheck::{random_tensor, suite};
use hodinet_core::loss::{bce, iou, ssim, PROB_CLAMP};
use hodinet_core::metrics::{e_measure_max, f_measure_max, mae, s_measure, score};
use hodinet_core::nn::{init, ParamStore, Pass, BN_EPS};
use hodinet_core::{Graph, Mode, Model, ModelConfig, Tensor, Var};
use hodinet_oracles::fusion as oracle;

use crate::checkpoint::Checkpoint;

type CoreResult<T> = hodinet_core::Result<T>;

/// Gives biases, BN affine parameters and running statistics random values.
pub fn randomise_norms(store: &mut ParamStore, seed: u64) -> CoreResult<()> {
    let mut rng = init::rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let n = store.get(id).numel();
        let v: Vec<f64> = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            init::uniform(&mut rng, 0.45, n).iter().map(|v| v + 1.0).collect()
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with("bias") {
            init::uniform(&mut rng, 0.3, n)
        } else {
            continue;
        };
        store.assign(id, &v)?;
    }
    Ok(())
}

fn align_of(store: &ParamStore, l: &ConvBnRelu) -> oracle::Align {
    oracle::Align {
        weight: store.get(l.conv.weight).data().to_vec(),
        bias: store.get(l.conv.bias).data().to_vec(),
        gamma: store.get(l.bn.gamma).data().to_vec(),
        beta: store.get(l.bn.beta).data().to_vec(),
        mean: store.get(l.bn.running_mean).data().to_vec(),
        var: store.get(l.bn.running_var).data().to_vec(),
        eps: BN_EPS,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between the spatial block and its loop version over
/// `cases` random `(1, 4, 4, 4)` inputs in eval mode.
pub fn hosf_oracle_deviation(cases: u64, seed: u64) -> CoreResult<f64> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut store = ParamStore::new();
        let mut rng = init::rng(seed.wrapping_mul(1000) + case);
        let block = Hosf::new(&mut store, "hosf", 4, 4, 4, &mut rng);
        randomise_norms(&mut store, seed ^ (case + 7000))?;
        let fr = random_tensor(&mut rng, [1, 4, 4, 4]);
        let fd = random_tensor(&mut rng, [1, 4, 4, 4]);
        let mut g = Graph::new();
        let (a, b) = (g.input(fr.clone()), g.input(fd.clone()));
        let out = block.forward(&mut Pass::new(&mut g, &mut store, Mode::Eval), a, b)?;
        let params = oracle::Hosf {
            rgb: align_of(&store, &block.align.rgb),
            depth: align_of(&store, &block.align.depth),
            dw1_weight: store.get(block.dw1.weight).data().to_vec(),
            dw1_bias: store.get(block.dw1.bias).data().to_vec(),
            dw2_weight: store.get(block.dw2.weight).data().to_vec(),
            dw2_bias: store.get(block.dw2.bias).data().to_vec(),
            norm_eps: 1e-12,
        };
        let want = oracle::hosf(&params, fr.data(), 4, fd.data(), 4, 16);
        worst = worst.max(max_diff(g.value(out).data(), &want));
    }
    Ok(worst)
}

/// As [`hosf_oracle_deviation`] for the channel block on `(1, 8, 2, 2)`,
/// alternating the pool order.
pub fn hocf_oracle_deviation(cases: u64, seed: u64) -> CoreResult<f64> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let swap = case % 2 == 1;
        let mut store = ParamStore::new();
        let mut rng = init::rng(seed.wrapping_mul(1000) + 500 + case);
        let mut block = Hocf::new(&mut store, "hocf", 8, 8, 8, &mut rng);
        block.swap_pools = swap;
        randomise_norms(&mut store, seed ^ (case + 9000))?;
        let fr = random_tensor(&mut rng, [1, 8, 2, 2]);
        let fd = random_tensor(&mut rng, [1, 8, 2, 2]);
        let mut g = Graph::new();
        let (a, b) = (g.input(fr.clone()), g.input(fd.clone()));
        let parts = block.forward_parts(&mut Pass::new(&mut g, &mut store, Mode::Eval), a, b)?;
        let params = oracle::Hocf {
            rgb: align_of(&store, &block.align.rgb),
            depth: align_of(&store, &block.align.depth),
            fc_weight: store.get(block.fc.weight).data().to_vec(),
            fc_bias: store.get(block.fc.bias).data().to_vec(),
            swap_pools: swap,
        };
        let (out, inter, att) = oracle::hocf(&params, fr.data(), 8, fd.data(), 8, 4);
        worst = worst
            .max(max_diff(g.value(parts.out).data(), &out))
            .max(max_diff(g.value(parts.a_ch).data(), &inter))
            .max(max_diff(g.value(parts.att).data(), &att));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualIdentities {
    /// Spatial block output equals the aligned RGB features bit for bit
    /// when the aligned depth features are zero.
    pub zero_depth_exact: bool,
    /// Largest `|out − f_rgb|` of the channel block with its gate driven to 0.
    pub closed_gate_deviation: f64,
}

pub fn residual_identities(seed: u64) -> CoreResult<ResidualIdentities> {
    let mut store = ParamStore::new();
    let mut rng = init::rng(seed);
    let hosf = Hosf::new(&mut store, "hosf", 4, 4, 4, &mut rng);
    let fr = random_tensor(&mut rng, [2, 4, 4, 4]);
    let mut g = Graph::new();
    let a = g.input(fr.clone());
    let z = g.input(Tensor::zeros([2, 4, 4, 4]));
    let parts = hosf.fuse_aligned(&mut Pass::new(&mut g, &mut store, Mode::Train), a, z)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let zero_depth_exact = bits(g.value(parts.out)) == bits(&fr);

    let mut store = ParamStore::new();
    let hocf = Hocf::new(&mut store, "hocf", 8, 8, 8, &mut rng);
    store.assign(hocf.fc.bias, &[-30.0; 8])?;
    let fr = random_tensor(&mut rng, [1, 8, 2, 2]);
    let fd = random_tensor(&mut rng, [1, 8, 2, 2]);
    let mut g = Graph::new();
    let (a, b) = (g.input(fr), g.input(fd));
    let parts = hocf.forward_parts(&mut Pass::new(&mut g, &mut store, Mode::Eval), a, b)?;
    let closed_gate_deviation = g.value(parts.out).max_abs_diff(g.value(parts.f_rgb));
    Ok(ResidualIdentities {
        zero_depth_exact,
        closed_gate_deviation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shapes {
    /// P1..P4.
    pub maps: [[usize; 4]; 4],
    pub rgb_stages: [[usize; 4]; 4],
    pub depth_stages: [[usize; 4]; 4],
    /// Every prediction lies strictly inside `(0, 1)`.
    pub open_unit: bool,
}

/// Runs the toy network on one random `side × side` pair in eval mode.
pub fn shape_contract(side: usize, seed: u64) -> CoreResult<Shapes> {
    let mut model = Model::new(ModelConfig::toy((side, side))?, seed)?;
    let mut rng = init::rng(seed);
    let rgb = unit_map(&mut rng, [1, 3, side, side]);
    let depth = unit_map(&mut rng, [1, 1, side, side]);
    let mut g = Graph::new();
    let (r, d) = (g.constant(rgb), g.constant(depth));
    let (fr, fd) = {
        let mut p = Pass::new(&mut g, &mut model.store, Mode::Eval);
        let fr = model.net.rgb.forward(&mut p, r)?;
        let d3 = replicate_channels(&mut p, d)?;
        (fr, model.net.depth.forward(&mut p, d3)?)
    };
    let out = model.forward(&mut g, r, d, Mode::Eval)?;
    let shape_of = |v: Var| g.shape(v).0;
    Ok(Shapes {
        maps: out.p.map(shape_of),
        rgb_stages: fr.f.map(shape_of),
        depth_stages: fd.f.map(shape_of),
        open_unit: out.p.iter().all(|v| g.value(*v).data().iter().all(|x| *x > 0.0 && *x < 1.0)),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossProperties {
    /// Every loss was finite and inside its range on random inputs.
    pub bounded: bool,
    /// Largest per-pixel BCE, SSIM loss and IoU loss with `P = G`.
    pub perfect_bce_per_pixel: f64,
    pub perfect_ssim: f64,
    pub perfect_iou: f64,
    /// Largest `|ssim(P, G) − ssim(G, P)|`.
    pub ssim_asymmetry: f64,
}

type LossFn = fn(&mut Graph, Var, Var) -> CoreResult<Var>;

fn loss_value(f: LossFn, p: &Tensor, t: &Tensor) -> CoreResult<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.input(p.clone()), g.input(t.clone()));
    let l = f(&mut g, a, b)?;
    g.value(l).item()
}

fn unit_map(rng: &mut init::InitRng, shape: [usize; 4]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    t
}

fn mask(rng: &mut init::InitRng, shape: [usize; 4], fg: f64) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = ((*v + 1.0) / 2.0 < fg) as u8 as f64);
    t
}

pub fn loss_properties(cases: usize, seed: u64) -> CoreResult<LossProperties> {
    let mut rng = init::rng(seed);
    let mut r = LossProperties {
        bounded: true,
        ..Default::default()
    };
    let shapes = [[1, 1, 8, 8], [2, 1, 16, 16], [1, 1, 13, 21], [1, 1, 4, 5]];
    for case in 0..cases {
        let shape = shapes[case % shapes.len()];
        let p = unit_map(&mut rng, shape);
        let q = unit_map(&mut rng, shape);
        let t = mask(&mut rng, shape, 0.4);
        let b = loss_value(bce, &p, &t)?;
        let s = loss_value(ssim, &p, &t)?;
        let i = loss_value(iou, &p, &t)?;
        r.bounded &= b.is_finite() && b >= 0.0 && (0.0..=2.0).contains(&s) && (0.0..=1.0).contains(&i);
        r.ssim_asymmetry = r.ssim_asymmetry.max((loss_value(ssim, &p, &q)? - loss_value(ssim, &q, &p)?).abs());
        let pixels = (shape[2] * shape[3]) as f64;
        r.perfect_bce_per_pixel = r.perfect_bce_per_pixel.max(loss_value(bce, &t, &t)? / pixels);
        r.perfect_ssim = r.perfect_ssim.max(loss_value(ssim, &t, &t)?.abs());
        r.perfect_iou = r.perfect_iou.max(loss_value(iou, &t, &t)?.abs());
    }
    debug_assert!(r.perfect_bce_per_pixel >= -(1.0 - PROB_CLAMP).ln() * 0.999);
    Ok(r)
}

/// Largest deviation of the four measures from their loop versions over
/// `cases` random 8×8 pairs.
pub fn metric_oracle_deviation(cases: usize, seed: u64) -> CoreResult<f64> {
    use hodinet_oracles::metrics as m;
    let mut rng = init::rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut p = unit_map(&mut rng, [1, 1, 8, 8]);
        if case % 2 == 0 {
            p.data_mut().iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);
        }
        let g = mask(&mut rng, [1, 1, 8, 8], [0.1, 0.3, 0.5, 0.8][case % 4]);
        let (pd, gd) = (p.data(), g.data());
        let f = f_measure_max(&p, &g)?.unwrap_or(0.0);
        worst = worst
            .max((mae(&p, &g)? - m::mae(pd, gd)).abs())
            .max((s_measure(&p, &g)? - m::s_measure(pd, gd, 8, 8)).abs())
            .max((f - m::f_measure_max(pd, gd)).abs())
            .max((e_measure_max(&p, &g)? - m::e_measure_max(pd, gd)).abs());
    }
    Ok(worst)
}

/// Largest distance from the ideal scores (MAE 0, others 1) when each of
/// `cases` random masks is scored against itself.
pub fn perfect_score_gap(cases: usize, seed: u64) -> CoreResult<f64> {
    let mut rng = init::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let g = mask(&mut rng, [1, 1, 12, 10], 0.35);
        if g.data().iter().all(|v| *v == 0.0) {
            continue;
        }
        let s = score("x", &g, &g)?;
        worst = worst
            .max(s.mae)
            .max((1.0 - s.s_alpha).abs())
            .max((1.0 - s.f_beta_max).abs())
            .max((1.0 - s.e_xi_max).abs());
    }
    Ok(worst)
}

/// Serialising, parsing and serialising again gives the same bytes, and
/// two models built from the same seed serialise identically.
pub fn checkpoint_round_trip(seed: u64) -> crate::error::Result<bool> {
    let cfg = ModelConfig::toy((64, 64))?;
    let a = Model::new(cfg.clone(), seed)?;
    let b = Model::new(cfg, seed)?;
    let bytes = Checkpoint::from_store(String::new(), &a.store).to_bytes();
    let again = Checkpoint::from_bytes(&bytes)
        .map_err(|e| crate::error::CliError::Failed(e.to_string()))?
        .to_bytes();
    Ok(bytes == again && bytes == Checkpoint::from_store(String::new(), &b.store).to_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check<T>(name: &'static str, r: std::result::Result<T, impl std::fmt::Display>, ok: impl Fn(&T) -> (bool, String)) -> Check {
    match r {
        Ok(v) => {
            let (passed, detail) = ok(&v);
            Check { name, passed, detail }
        }
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Every check, with the thresholds used by the acceptance criteria.
pub fn run_all() -> Vec<Check> {
    let mut out = vec![check("gradient suite", suite(0), |reports| {
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        (
            failed.is_empty(),
            format!("{} components, worst {worst:.2e}, failed [{}]", reports.len(), failed.join(", ")),
        )
    })];
    out.push(check("spatial fusion oracle", hosf_oracle_deviation(20, 0), |d| {
        (*d <= 1e-9, format!("max deviation {d:.2e}"))
    }));
    out.push(check("channel fusion oracle", hocf_oracle_deviation(20, 0), |d| {
        (*d <= 1e-9, format!("max deviation {d:.2e}"))
    }));
    out.push(check("residual identities", residual_identities(0), |r| {
        (
            r.zero_depth_exact && r.closed_gate_deviation <= 1e-6,
            format!("zero depth exact {}, closed gate {:.2e}", r.zero_depth_exact, r.closed_gate_deviation),
        )
    }));
    for side in [64, 96] {
        out.push(check("shape contract", shape_contract(side, 0), move |s| {
            (
                s.maps.iter().all(|m| *m == [1, 1, side, side]) && s.open_unit,
                format!("{side}x{side} -> {:?}", s.maps[0]),
            )
        }));
    }
    out.push(check("loss properties", loss_properties(40, 0), |r| {
        (
            r.bounded
                && r.perfect_bce_per_pixel <= 1e-5
                && r.perfect_ssim <= 1e-5
                && r.perfect_iou <= 1e-5
                && r.ssim_asymmetry <= 1e-12,
            format!("{r:?}"),
        )
    }));
    out.push(check("metric oracles", metric_oracle_deviation(50, 0), |d| {
        (*d <= 1e-9, format!("max deviation {d:.2e}"))
    }));
    out.push(check("perfect scores", perfect_score_gap(10, 0), |d| {
        (*d <= 1e-6, format!("max gap {d:.2e}"))
    }));
    out.push(check("checkpoint round trip", checkpoint_round_trip(0), |same| {
        (*same, format!("byte identical {same}"))
    }));
    out
}
