use std::path::Path;
use std::time::Instant;

use serde_json::json;

use super::generate::{build_model, fit_decoder, loss_curve_csv, save_checkpoint, STREAM_EVAL_SCENE};
use super::{rng_stream, valid_depth_mask, write_renders, Config, EvalMode, Manifest, Outputs, PipelineError};
use crate::gaussians::{write_ply, GaussianScene};
use crate::imaging::Image;
use crate::metrics::{absrel, aligned_depth_metrics, delta1, psnr, ssim, MetricReport, MetricRow};
use crate::renderer::RenderOutput;
use crate::synthetic::{completed_depth, observe, random_scene, View};

#[derive(Debug, Clone)]
pub struct ReconstructOutcome {
    pub report: MetricReport,
    /// Same targets scored against a constant depth map.
    pub baseline: MetricReport,
    pub scene: GaussianScene,
    pub manifest: Manifest,
}

fn validate_split(context: &[usize], target: &[usize], mode: EvalMode) -> Result<usize, PipelineError> {
    let invalid = |m: String| Err(PipelineError::Validation(m));
    if target.is_empty() {
        return invalid("target view set is empty".into());
    }
    if context.is_empty() && mode == EvalMode::Decoder {
        return invalid("context view set is empty".into());
    }
    for (name, list) in [("context", context), ("target", target)] {
        if let Some(i) = (1..list.len()).find(|&i| list[..i].contains(&list[i])) {
            return invalid(format!("{name} view {} listed twice", list[i]));
        }
    }
    let shared: Vec<usize> = context.iter().copied().filter(|c| target.contains(c)).collect();
    if !shared.is_empty() {
        return invalid(format!("views {shared:?} are both context and target"));
    }
    Ok(context.iter().chain(target).max().map_or(0, |m| m + 1))
}

/// AbsRel and δ1 of the best constant depth (the mean valid target depth).
pub fn constant_depth_baseline(name: &str, target: &Image) -> MetricRow {
    let valid: Vec<f64> = target.as_slice().iter().copied().filter(|&d| d > 0.0).collect();
    if valid.is_empty() {
        return MetricRow::failed(name, "target has no valid depth");
    }
    let c = valid.iter().sum::<f64>() / valid.len() as f64;
    let pred = Image::filled(target.width(), target.height(), 1, c);
    let mut row = MetricRow::named(name);
    row.absrel = absrel(&pred, target, None).ok();
    row.delta1 = delta1(&pred, target, None).ok();
    row
}

fn score(name: &str, rgb: &Image, depth: &Image, gt: &View) -> Result<MetricRow, PipelineError> {
    let mut row = MetricRow::named(name);
    row.psnr = Some(psnr(rgb, &gt.rgb)?);
    let mut errors = Vec::new();
    match ssim(rgb, &gt.rgb) {
        Ok(v) => row.ssim = Some(v),
        Err(e) => errors.push(format!("ssim: {e}")),
    }
    let mask = valid_depth_mask(&gt.depth);
    match aligned_depth_metrics(depth, &gt.depth, Some(&mask)) {
        Ok(m) => {
            row.absrel = Some(m.absrel);
            row.delta1 = Some(m.delta1);
            row.depth_loss = Some(m.depth_loss);
        }
        Err(e) => errors.push(format!("depth: {e}")),
    }
    if !errors.is_empty() {
        row.error = Some(errors.join("; "));
    }
    Ok(row)
}

/// Reconstruction evaluation on a synthetic scene: the context views are
/// encoded and decoded (or, in oracle mode, the true Gaussians are used),
/// then the target views are rendered and scored against ground truth with
/// per-view scale/shift aligned depth. Depth on both sides is completed
/// towards `pipeline.background_depth` where coverage is partial.
///
/// Writes `target_XX.png`, `target_XX_depth.pfm`, `scene.ply`,
/// `report.json`, `report.csv`, `baseline.json` and `manifest.json`.
pub fn reconstruct(cfg: &Config, out_dir: &Path) -> Result<ReconstructOutcome, PipelineError> {
    let p = &cfg.pipeline;
    let views = validate_split(&p.context, &p.target, p.mode)?;
    let mut out = Outputs::create(out_dir)?;
    let cameras = cfg.ring(views)?;
    let renderer = cfg.renderer();
    let bg = cfg.background();

    let mut rng = rng_stream(cfg.diffusion.seed, STREAM_EVAL_SCENE);
    let truth = random_scene(&mut rng, &p.scene);
    let context_cams: Vec<_> = p.context.iter().map(|&i| cameras[i]).collect();
    let target_cams: Vec<_> = p.target.iter().map(|&i| cameras[i]).collect();
    let (context, truth_targets) = out.time("observe", || {
        (
            observe(&renderer, &truth, &context_cams, &bg, p.background_depth),
            observe(&renderer, &truth, &target_cams, &bg, p.background_depth),
        )
    });

    let mut curve = Vec::new();
    let (scene, model) = match p.mode {
        EvalMode::Oracle => (truth.clone(), None),
        EvalMode::Decoder => {
            let mut model = build_model(cfg, &cameras)?;
            curve = out.time("train", || fit_decoder(cfg, &mut model, vec![context.clone()]))?;
            let scene = out.time("reconstruct", || model.reconstruct(&context))?;
            (scene, Some(model))
        }
    };

    let renders: Vec<RenderOutput> = out.time("render", || {
        target_cams
            .iter()
            .map(|c| renderer.render(&scene, &c.intrinsics, &c.pose, &bg))
            .collect()
    });
    let start = Instant::now();
    let mut rows = Vec::with_capacity(renders.len());
    let mut baseline = Vec::with_capacity(renders.len());
    for ((&v, pred), gt) in p.target.iter().zip(&renders).zip(&truth_targets) {
        let name = format!("target_{v:02}");
        let depth = completed_depth(pred, p.background_depth);
        rows.push(score(&name, &pred.rgb, &depth, gt)?);
        baseline.push(constant_depth_baseline(&name, &gt.depth));
    }
    let report = MetricReport::new(rows);
    let baseline = MetricReport::new(baseline);
    out.stop("metrics", start);

    let start = Instant::now();
    write_renders(&mut out, "target", &renders)?;
    write_ply(out.file("scene.ply"), &scene)?;
    out.write("report.json", report.to_json().as_bytes())?;
    out.write("report.csv", report.to_csv().as_bytes())?;
    out.write("baseline.json", baseline.to_json().as_bytes())?;
    if let (Some(model), false) = (&model, curve.is_empty()) {
        out.write("train_loss.csv", loss_curve_csv(&curve).as_bytes())?;
        save_checkpoint(model, &mut out)?;
    }
    out.stop("write", start);

    let details = json!({
        "mode": p.mode,
        "context": p.context,
        "target": p.target,
        "ground_truth_primitives": truth.len(),
        "primitives": scene.len(),
        "train_steps": curve.len(),
        "failures": report.failures(),
    });
    let manifest = out.finish("reconstruct", cfg, details)?;
    Ok(ReconstructOutcome {
        report,
        baseline,
        scene,
        manifest,
    })
}
