use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::{valid_depth_mask, Config, Manifest, Outputs, PipelineError};
use crate::imaging::Image;
use crate::metrics::{aligned_depth_metrics, MetricReport, MetricRow};

fn pfm_names(dir: &Path) -> Result<BTreeSet<String>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pfm") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

fn evaluate(name: &str, pred: &Path, gt: &Path) -> Result<MetricRow, PipelineError> {
    let p = Image::read_pfm(pred)?;
    let t = Image::read_pfm(gt)?;
    if p.channels() != 1 || p.shape() != t.shape() {
        return Ok(MetricRow::failed(
            name,
            format!(
                "prediction {:?} and ground truth {:?} are not matching depth maps",
                p.shape(),
                t.shape()
            ),
        ));
    }
    let mask = valid_depth_mask(&t);
    Ok(match aligned_depth_metrics(&p, &t, Some(&mask)) {
        Ok(m) => MetricRow {
            absrel: Some(m.absrel),
            delta1: Some(m.delta1),
            depth_loss: Some(m.depth_loss),
            ..MetricRow::named(name)
        },
        Err(e) => MetricRow::failed(name, e.to_string()),
    })
}

/// Scale/shift aligned AbsRel and δ1 for every depth PFM in `pred_dir` with a
/// same-named file in `gt_dir`. Writes `depth_report.json`,
/// `depth_report.csv` and `manifest.json`.
pub fn eval_depth(
    cfg: &Config,
    pred_dir: &Path,
    gt_dir: &Path,
    out_dir: &Path,
) -> Result<(MetricReport, Manifest), PipelineError> {
    let pred = pfm_names(pred_dir)?;
    let gt = pfm_names(gt_dir)?;
    let unmatched: Vec<String> = pred
        .symmetric_difference(&gt)
        .map(|n| {
            let side = if pred.contains(n) { "prediction" } else { "ground truth" };
            format!("{n} ({side} only)")
        })
        .collect();
    if !unmatched.is_empty() {
        return Err(PipelineError::Validation(format!(
            "unmatched depth maps: {}",
            unmatched.join(", ")
        )));
    }
    if pred.is_empty() {
        return Err(PipelineError::Validation(format!(
            "no .pfm files in {}",
            pred_dir.display()
        )));
    }
    let mut out = Outputs::create(out_dir)?;
    let rows = out.time("evaluate", || {
        pred.iter()
            .map(|n| evaluate(n, &pred_dir.join(n), &gt_dir.join(n)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = MetricReport::new(rows);
    out.write("depth_report.json", report.to_json().as_bytes())?;
    out.write("depth_report.csv", report.to_csv().as_bytes())?;
    let details = json!({
        "pred": pred_dir.display().to_string(),
        "gt": gt_dir.display().to_string(),
        "images": report.rows.len(),
        "failures": report.failures(),
    });
    let manifest = out.finish("eval-depth", cfg, details)?;
    Ok((report, manifest))
}
