//! Central finite-difference verification of reverse-mode gradients.
//!
//! An entry passes when `|analytic - numeric| <= tol * max(|analytic|,
//! |numeric|, floor)` where `floor = FLOOR_SCALE * max(1, |f(x)|)`. The
//! floor keeps entries whose true gradient sits below finite-difference
//! resolution from being judged on rounding noise alone.
//!
//! Piecewise-linear ops (ReLU, max, clamp) make the function
//! non-differentiable on measure-zero sets. When a perturbation straddles
//! such a kink, the central difference averages two slopes. An entry whose
//! analytic value matches one of the one-sided differences (within
//! [`ONE_SIDED_TOLERANCE`]) while the two one-sided slopes disagree by ten
//! times more is counted as a kink and skipped; a check fails if more than
//! [`MAX_KINK_FRACTION`] of its entries are kinks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::nn::{init, Mode, ParamStore, Pass};
use crate::tensor::{Graph, Tensor, Var};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Step for deep compositions, where rounding in the forward pass swamps
/// the difference quotient at [`DEFAULT_STEP`].
pub const COMPOSITE_STEP: f64 = 1e-5;
pub const FLOOR_SCALE: f64 = 1e-4;
pub const MAX_KINK_FRACTION: f64 = 0.1;
/// One-sided differences are only first-order accurate, so the side that
/// matches the analytic slope at a kink is held to a looser bound.
pub const ONE_SIDED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled per tensor; `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Batch-norm mode used while evaluating the function.
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            tolerance: 1e-5,
            max_entries_per_tensor: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

impl GradCheckConfig {
    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn sampled(mut self, per_tensor: usize) -> Self {
        self.max_entries_per_tensor = Some(per_tensor);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
    pub kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
            && (self.kinks as f64) <= MAX_KINK_FRACTION * self.checked.max(1) as f64
    }
}

enum Target {
    Input(usize),
    Param(crate::nn::ParamId),
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], mode: Mode, f: &F) -> Result<f64>
where
    F: Fn(&mut Pass, &[Var]) -> Result<Var>,
{
    let mut store = store.clone();
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.input(t.clone())).collect();
    let mut pass = Pass::new(&mut graph, &mut store, mode);
    let root = f(&mut pass, &vars)?;
    graph.value(root).item()
}

/// Checks d f / d(every input and every trainable parameter of `store`).
pub fn check_with_params<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Pass, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut analytic_store = store.clone();
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.input(t.clone().with_grad()))
        .collect();
    let root = {
        let mut pass = Pass::new(&mut graph, &mut analytic_store, cfg.mode);
        f(&mut pass, &vars)?
    };
    let f0 = graph.value(root).item()?;
    graph.backward(root)?;
    let floor = FLOOR_SCALE * libm::fabs(f0).max(1.0);

    let mut targets: Vec<(Target, String, Vec<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = graph.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; inputs[i].numel()]);
        targets.push((Target::Input(i), alloc::format!("input{i}"), g));
    }
    let param_grads: Vec<(usize, Vec<f64>)> = graph
        .tagged()
        .map(|(tag, v)| (tag, graph.grad(v).map(|g| g.to_vec()).unwrap_or_default()))
        .collect();
    for id in store.trainable() {
        let n = store.get(id).numel();
        let g = param_grads
            .iter()
            .find(|(tag, _)| *tag == id.index())
            .map(|(_, g)| g.clone())
            .filter(|g| !g.is_empty())
            .unwrap_or_else(|| alloc::vec![0.0; n]);
        targets.push((Target::Param(id), store.entry(id).name.clone(), g));
    }

    let mut rng = init::rng(cfg.seed);
    let h = cfg.step;
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
        tolerance: cfg.tolerance,
    };
    for (target, label, analytic) in &targets {
        let n = analytic.len();
        let entries: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in entries {
            let eval_at = |delta: f64| -> Result<f64> {
                match target {
                    Target::Input(i) => {
                        let mut shifted = inputs.to_vec();
                        shifted[*i].data_mut()[j] += delta;
                        evaluate(store, &shifted, cfg.mode, &f)
                    }
                    Target::Param(id) => {
                        let mut shifted = store.clone();
                        shifted.get_mut(*id).data_mut()[j] += delta;
                        evaluate(&shifted, inputs, cfg.mode, &f)
                    }
                }
            };
            let fp = eval_at(h)?;
            let fm = eval_at(-h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let scale = libm::fabs(a).max(libm::fabs(numeric)).max(floor);
            let mut err = libm::fabs(a - numeric) / scale;
            report.checked += 1;
            if err > cfg.tolerance {
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                let one_sided = libm::fabs(a - fwd).min(libm::fabs(a - bwd)) / scale;
                let spread = libm::fabs(fwd - bwd) / scale;
                if one_sided <= ONE_SIDED_TOLERANCE && spread > 10.0 * one_sided.max(cfg.tolerance) {
                    report.kinks += 1;
                    err = 0.0;
                }
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = alloc::format!("{label}[{j}]");
            }
        }
    }
    Ok(report)
}

/// Checks d f / d(inputs) for a function of plain tensors.
pub fn check<F>(name: &str, inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with_params(name, &ParamStore::new(), inputs, cfg, |p, v| f(p.graph, v))
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut init::InitRng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, init::uniform(rng, 1.0, n)).expect("length matches")
}

/// Fixed random weights used to collapse a tensor into a scalar so that
/// every output entry carries a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x);
    let w = random_tensor(&mut init::rng(seed ^ 0x5eed), shape.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p, crate::tensor::Axes::ALL)
}

/// Tolerance for single components.
pub const COMPONENT_TOLERANCE: f64 = 1e-5;
/// Tolerance for loss-through-decoder checks.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Randomises every bias, BN affine pair and BN running statistic in
/// `store` so that eval-mode checks do not sit on the identity.
fn perturb_buffers(store: &mut ParamStore, rng: &mut init::InitRng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let n = store.get(id).numel();
        let v: Vec<f64> = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            init::uniform(rng, 0.4, n).iter().map(|v| v + 1.0).collect()
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with("bias") {
            init::uniform(rng, 0.3, n)
        } else {
            continue;
        };
        store.get_mut(id).data_mut().copy_from_slice(&v);
    }
}

/// Probabilities strictly inside `(0.05, 0.95)`, away from the BCE clamp.
fn probabilities(rng: &mut init::InitRng, shape: [usize; 4]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.45 * *v);
    t
}

fn binary_target(rng: &mut init::InitRng, shape: [usize; 4]) -> Tensor {
    let mut t = random_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = (*v > 0.0) as u8 as f64);
    t
}

/// Finite-difference checks of every layer, both fusion blocks, the
/// decoder cascade, the prediction head, all three losses and the loss
/// through the whole decoder, at toy sizes.
pub fn suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use crate::decoder::{Cprn, Decoder, PredictionHead};
    use crate::encoders::{ConvBnRelu, SelfAttention};
    use crate::fusion::{Hocf, Hosf};
    use crate::loss;
    use crate::nn::{
        global_avg_pool, global_max_pool, strided_max_pool, upsample, BatchNorm2d, Conv2d, Linear, PoolDirection,
        Resize,
    };
    use crate::tensor::Axes;

    let mut rng = init::rng(seed);
    let cfg = GradCheckConfig::default().with_seed(seed).with_tolerance(COMPONENT_TOLERANCE);
    let composite = cfg.clone().with_step(COMPOSITE_STEP);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 2, 1, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = random_tensor(&mut rng, [2, 2, 5, 5]);
    out.push(check_with_params("conv2d", &store, &[x], &cfg, |p, v| {
        let y = conv.forward(p, v[0])?;
        weighted_sum(p.graph, y, 1)
    })?);

    for (name, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        perturb_buffers(&mut store, &mut rng);
        let x = random_tensor(&mut rng, [2, 3, 3, 3]);
        out.push(check_with_params(name, &store, &[x], &cfg.clone().with_mode(mode), |p, v| {
            let y = bn.forward(p, v[0])?;
            weighted_sum(p.graph, y, 2)
        })?);
    }

    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", 6, 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = random_tensor(&mut rng, [2, 1, 3, 6]);
    out.push(check_with_params("linear", &store, &[x], &cfg, |p, v| {
        let y = fc.forward(p, v[0])?;
        weighted_sum(p.graph, y, 3)
    })?);

    let x = random_tensor(&mut rng, [2, 3, 4, 4]);
    out.push(check("relu_sigmoid", core::slice::from_ref(&x), &cfg, |g, v| {
        let r = g.relu(v[0]);
        let s = g.sigmoid(v[0]);
        let a = weighted_sum(g, r, 4)?;
        let b = weighted_sum(g, s, 5)?;
        g.add(a, b)
    })?);
    out.push(check("global_pools", core::slice::from_ref(&x), &cfg, |g, v| {
        let a = global_avg_pool(g, v[0])?;
        let m = global_max_pool(g, v[0])?;
        let a = weighted_sum(g, a, 6)?;
        let m = weighted_sum(g, m, 7)?;
        g.add(a, m)
    })?);
    out.push(check("strided_max_pool", core::slice::from_ref(&x), &cfg, |g, v| {
        let rows = strided_max_pool(g, v[0], PoolDirection::Rows)?;
        let cols = strided_max_pool(g, v[0], PoolDirection::Cols)?;
        let a = weighted_sum(g, rows, 8)?;
        let b = weighted_sum(g, cols, 9)?;
        g.add(a, b)
    })?);
    out.push(check("bilinear_upsample", &[x], &cfg, |g, v| {
        let a = upsample(g, v[0], Resize::Scale(2))?;
        let b = upsample(g, v[0], Resize::Target(5, 9))?;
        let a = weighted_sum(g, a, 10)?;
        let b = weighted_sum(g, b, 11)?;
        g.add(a, b)
    })?);

    let mut store = ParamStore::new();
    let block = ConvBnRelu::new(&mut store, "block", 3, 4, 3, 1, 1, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = random_tensor(&mut rng, [2, 3, 4, 4]);
    out.push(check_with_params("conv_bn_relu", &store, &[x], &cfg, |p, v| {
        let y = block.forward(p, v[0])?;
        weighted_sum(p.graph, y, 12)
    })?);

    let mut store = ParamStore::new();
    let attn = SelfAttention::new(&mut store, "attn", 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = random_tensor(&mut rng, [1, 1, 4, 4]);
    out.push(check_with_params("self_attention", &store, &[x], &cfg, |p, v| {
        let y = attn.forward(p, v[0])?;
        weighted_sum(p.graph, y, 13)
    })?);

    let mut store = ParamStore::new();
    let hosf = Hosf::new(&mut store, "hosf", 4, 4, 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = [random_tensor(&mut rng, [1, 4, 4, 4]), random_tensor(&mut rng, [1, 4, 4, 4])];
    out.push(check_with_params("hosf", &store, &x, &cfg, |p, v| {
        let y = hosf.forward(p, v[0], v[1])?;
        weighted_sum(p.graph, y, 14)
    })?);

    let mut store = ParamStore::new();
    let hocf = Hocf::new(&mut store, "hocf", 4, 4, 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = [random_tensor(&mut rng, [1, 4, 4, 4]), random_tensor(&mut rng, [1, 4, 4, 4])];
    out.push(check_with_params("hocf", &store, &x, &cfg, |p, v| {
        let y = hocf.forward(p, v[0], v[1])?;
        weighted_sum(p.graph, y, 15)
    })?);

    let widths = [4, 4, 4, 4];
    let fused: Vec<Tensor> = (0..4).map(|i| random_tensor(&mut rng, [2, widths[i], 8 >> i, 8 >> i])).collect();
    let mut store = ParamStore::new();
    let cprn = Cprn::new(&mut store, "cprn", widths, 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    out.push(check_with_params("cprn", &store, &fused, &composite, |p, v| {
        let y = cprn.forward(p, [v[0], v[1], v[2], v[3]])?;
        p.graph.sum(y[0], Axes::ALL)
    })?);

    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, "head", 3, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let x = random_tensor(&mut rng, [2, 3, 2, 2]);
    out.push(check_with_params("prediction_head", &store, &[x], &cfg, |p, v| {
        let y = head.forward(p, v[0], (8, 8))?;
        weighted_sum(p.graph, y, 16)
    })?);

    type LossFn = fn(&mut Graph, Var, Var) -> Result<Var>;
    let losses: [(&str, LossFn, [usize; 4]); 3] = [
        ("bce_loss", loss::bce, [2, 1, 4, 4]),
        ("ssim_loss", loss::ssim, [1, 1, 12, 13]),
        ("iou_loss", loss::iou, [2, 1, 4, 4]),
    ];
    for (name, f, shape) in losses {
        let p = probabilities(&mut rng, shape);
        let t = binary_target(&mut rng, shape);
        out.push(check(name, &[p], &cfg, |g, v| {
            let tv = g.constant(t.clone());
            f(g, v[0], tv)
        })?);
    }

    let widths = [4, 4, 6, 6];
    let fused: Vec<Tensor> = (0..4).map(|i| random_tensor(&mut rng, [2, widths[i], 8 >> i, 8 >> i])).collect();
    let target = binary_target(&mut rng, [2, 1, 32, 32]);
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, "decoder", widths, 4, &mut rng);
    perturb_buffers(&mut store, &mut rng);
    let end_to_end = composite.clone().with_tolerance(END_TO_END_TOLERANCE).sampled(6);
    out.push(check_with_params("decoder_total_loss", &store, &fused, &end_to_end, |p, v| {
        let y = decoder.forward(p, [v[0], v[1], v[2], v[3]], (32, 32))?;
        let t = p.graph.constant(target.clone());
        Ok(loss::total_loss(p.graph, &y, t)?.0)
    })?);

    Ok(out)
}
