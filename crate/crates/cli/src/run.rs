//! Library side of the subcommands. Printing is left to the binary.

use std::fmt::Write as _;
use std::path::Path;

use hodinet_core::gradcheck::{GradCheckReport, END_TO_END_TOLERANCE, MAX_KINK_FRACTION};
use hodinet_core::loss::{LossBreakdown, StageLoss};
use hodinet_core::metrics::{score, EvalReport};
use hodinet_core::nn::resize;
use hodinet_core::train::{Batch, Trainer};
use hodinet_core::{Graph, Mode, Model, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus;
use crate::error::{CliError, Result};
use crate::images;

/// Model described by `cfg`, with weights from its checkpoint when one is
/// configured and from `cfg.seed` otherwise.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut model = Model::new(cfg.model_config()?, cfg.seed)?;
    if let Some(path) = &cfg.paths.checkpoint {
        Checkpoint::load(path)?.apply(&mut model.store)?;
    }
    Ok(model)
}

pub fn checkpoint_of(cfg: &RunConfig, model: &Model) -> Checkpoint {
    let mut echo = cfg.clone();
    echo.paths.checkpoint = None;
    Checkpoint::from_store(echo.to_toml(), &model.store)
}

/// All four predictions in eval mode, `(1, 1, H, W)` at the input size.
pub fn predict(model: &mut Model, rgb: &Tensor, depth: &Tensor) -> Result<[Tensor; 4]> {
    let mut g = Graph::new();
    let (r, d) = (g.constant(rgb.clone()), g.constant(depth.clone()));
    let out = model.forward(&mut g, r, d, Mode::Eval)?;
    Ok(out.p.map(|v| g.value(v).clone()))
}

/// Runs one RGB-D pair and returns P1..P4 resized to the RGB file's size.
pub fn infer_files(model: &mut Model, cfg: &RunConfig, rgb: &Path, depth: &Path) -> Result<[Tensor; 4]> {
    let size = cfg.input_hw();
    let (rgb, (h, w)) = images::load_rgb(rgb, Some(size))?;
    let depth = images::load_depth(depth, Some(size))?;
    let maps = predict(model, &rgb, &depth)?;
    let mut out = Vec::with_capacity(4);
    for m in &maps {
        out.push(resize(m, h, w)?);
    }
    Ok(out.try_into().expect("four maps"))
}

/// `out.pgm` becomes `out_p2.pgm` and so on.
pub fn stage_path(out: &Path, stage: usize) -> std::path::PathBuf {
    if stage == 1 {
        return out.to_owned();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("saliency");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_p{stage}.{ext}"),
        None => format!("{stem}_p{stage}"),
    };
    out.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let sum = |f: fn(&StageLoss) -> f64| self.mean.stages.iter().map(f).sum::<f64>();
        format!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  bce {:.4}  ssim {:.4}  iou {:.4}",
            self.epoch,
            self.lr,
            self.mean.total,
            sum(|s| s.bce),
            sum(|s| s.ssim),
            sum(|s| s.iou)
        )
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut stages = [StageLoss::default(); 4];
    let mut total = 0.0;
    for b in items {
        for (acc, s) in stages.iter_mut().zip(&b.stages) {
            acc.bce += s.bce / n;
            acc.ssim += s.ssim / n;
            acc.iou += s.iou / n;
        }
        total += b.total / n;
    }
    LossBreakdown { stages, total }
}

/// Trains for `epochs · steps_per_epoch` steps. Step `s` stacks samples
/// `s·b, s·b + 1, …` modulo the corpus size.
pub fn train(
    model: &mut Model,
    cfg: &RunConfig,
    samples: &[Batch],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(CliError::Failed("empty training corpus".into()));
    }
    let mut trainer = Trainer::new(cfg.train_config())?;
    let b = cfg.train.batch_size;
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let lr = trainer.lr_at_epoch(epoch);
        let mut losses = Vec::with_capacity(cfg.train.steps_per_epoch);
        for _ in 0..cfg.train.steps_per_epoch {
            let s = trainer.steps_taken();
            let picked: Vec<&Batch> = (0..b).map(|k| &samples[(s * b + k) % samples.len()]).collect();
            let batch = Batch::stack(&picked)?;
            losses.push(trainer.step(model, &batch)?);
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            mean: mean_breakdown(&losses),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Loads the corpus under `root` and trains a fresh model on it.
pub fn train_corpus(cfg: &RunConfig, root: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<(Model, Vec<EpochLog>)> {
    let triples = corpus::scan(root)?;
    let samples = corpus::load(&triples, cfg.input_hw())?;
    let mut model = build_model(cfg)?;
    let logs = train(&mut model, cfg, &samples, on_epoch)?;
    Ok((model, logs))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// One message per file that could not be scored.
    pub failures: Vec<String>,
}

/// Scores every `*.pgm` in `pred_dir` against the same file name in
/// `gt_dir`. Problems with single files are collected, not fatal.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalOutcome> {
    let preds = corpus::list(pred_dir, "pgm")?;
    let gts = corpus::list(gt_dir, "pgm")?;
    let mut out = EvalOutcome::default();
    for (stem, gt_path) in &gts {
        let Some(pred_path) = preds.get(stem) else {
            out.failures.push(format!("{}: no prediction", gt_path.display()));
            continue;
        };
        let scored = (|| -> Result<_> {
            let p = images::load_map(pred_path)?;
            let g = images::load_mask(gt_path, None)?;
            if p.shape() != g.shape() {
                return Err(CliError::Failed(format!(
                    "{}: prediction is {}x{} but ground truth is {}x{}",
                    pred_path.display(),
                    p.shape().h(),
                    p.shape().w(),
                    g.shape().h(),
                    g.shape().w()
                )));
            }
            Ok(score(stem.clone(), &p, &g)?)
        })();
        match scored {
            Ok(s) => out.report.push(s),
            Err(e) => out.failures.push(e.to_string()),
        }
    }
    for (stem, p) in &preds {
        if !gts.contains_key(stem) {
            out.failures.push(format!("{}: no ground truth", p.display()));
        }
    }
    Ok(out)
}

pub fn eval_table(report: &EvalReport) -> String {
    let width = report.images.iter().map(|s| s.name.len()).max().unwrap_or(0).max(5);
    let mut t = String::new();
    let _ = writeln!(t, "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}", "image", "MAE", "S", "maxF", "maxE");
    for s in &report.images {
        let flag = if s.empty_gt { "  (empty ground truth)" } else { "" };
        let _ = writeln!(
            t,
            "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}{flag}",
            s.name, s.mae, s.s_alpha, s.f_beta_max, s.e_xi_max
        );
    }
    let m = report.means();
    let _ = writeln!(
        t,
        "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}",
        "mean", m.mae, m.s_alpha, m.f_beta_max, m.e_xi_max
    );
    t
}

/// TOML with four decimals: the means first, then one table per image.
pub fn eval_report(report: &EvalReport) -> String {
    let m = report.means();
    let mut t = String::new();
    let _ = writeln!(t, "images = {}", report.count());
    let _ = writeln!(t, "mae = {:.4}", m.mae);
    let _ = writeln!(t, "s_alpha = {:.4}", m.s_alpha);
    let _ = writeln!(t, "f_beta_max = {:.4}", m.f_beta_max);
    let _ = writeln!(t, "e_xi_max = {:.4}", m.e_xi_max);
    for s in &report.images {
        let key = toml::Value::String(s.name.clone());
        let _ = writeln!(t, "\n[image.{key}]");
        let _ = writeln!(t, "mae = {:.4}", s.mae);
        let _ = writeln!(t, "s_alpha = {:.4}", s.s_alpha);
        let _ = writeln!(t, "f_beta_max = {:.4}", s.f_beta_max);
        let _ = writeln!(t, "e_xi_max = {:.4}", s.e_xi_max);
        if s.empty_gt {
            let _ = writeln!(t, "empty_ground_truth = true");
        }
    }
    t
}

/// Components whose error exceeds the command's exit threshold of 1e-4 or
/// that skipped too many entries as kinks.
pub fn gradcheck_failures(reports: &[GradCheckReport]) -> Vec<&str> {
    reports
        .iter()
        .filter(|r| {
            r.max_rel_err.is_nan() || r.max_rel_err > END_TO_END_TOLERANCE
                || r.kinks as f64 > MAX_KINK_FRACTION * r.checked.max(1) as f64
        })
        .map(|r| r.name.as_str())
        .collect()
}

pub fn gradcheck_table(reports: &[GradCheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(9);
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<width$}  {:>10}  {:>7}  {:>5}  {:>9}  result",
        "component", "max rel", "checked", "kinks", "tolerance"
    );
    for r in reports {
        let _ = writeln!(
            t,
            "{:<width$}  {:>10.3e}  {:>7}  {:>5}  {:>9.0e}  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            r.kinks,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_paths() {
        assert_eq!(stage_path(Path::new("a/out.pgm"), 1), Path::new("a/out.pgm"));
        assert_eq!(stage_path(Path::new("a/out.pgm"), 3), Path::new("a/out_p3.pgm"));
        assert_eq!(stage_path(Path::new("out"), 2), Path::new("out_p2"));
    }

    #[test]
    fn breakdown_mean() {
        let mk = |v: f64| LossBreakdown {
            stages: [StageLoss { bce: v, ssim: 0.0, iou: 1.0 }; 4],
            total: 4.0 * (v + 1.0),
        };
        let m = mean_breakdown(&[mk(1.0), mk(3.0)]);
        assert_eq!(m.stages[2].bce, 2.0);
        assert_eq!(m.total, 12.0);
    }
}
