use std::path::Path;

use serde_json::json;

use super::{write_renders, Config, Manifest, Outputs, PipelineError};
use crate::camera::load_trajectory;
use crate::gaussians::read_ply;
use crate::renderer::RenderOutput;

/// Renders a PLY scene from every camera of a trajectory file, writing
/// `frame_XX.png` and `frame_XX_depth.pfm`.
pub fn render_trajectory(
    cfg: &Config,
    ply: &Path,
    trajectory: &Path,
    out_dir: &Path,
) -> Result<Manifest, PipelineError> {
    let mut out = Outputs::create(out_dir)?;
    let scene = out.time("load", || read_ply(ply))?;
    scene
        .validate()
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", ply.display())))?;
    let cameras = load_trajectory(trajectory)?;
    if cameras.is_empty() {
        return Err(PipelineError::Validation(format!(
            "{}: no cameras",
            trajectory.display()
        )));
    }
    let renderer = cfg.renderer();
    let bg = cfg.background();
    let renders: Vec<RenderOutput> = out.time("render", || {
        cameras
            .iter()
            .map(|c| renderer.render(&scene, &c.intrinsics, &c.pose, &bg))
            .collect()
    });
    write_renders(&mut out, "frame", &renders)?;
    let details = json!({
        "ply": ply.display().to_string(),
        "trajectory": trajectory.display().to_string(),
        "primitives": scene.len(),
        "frames": cameras.len(),
    });
    out.finish("render", cfg, details)
}
