//! Plain-text camera trajectories.
//!
//! One camera per non-empty line, 18 whitespace-separated numbers:
//!
//! ```text
//! fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
//! ```
//!
//! The rotation is camera-to-world, row-major; the translation is the camera
//! origin. Everything after `#` on a line is a comment.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{CameraError, Intrinsics, Pose};

const FIELDS: [&str; 18] = [
    "fx", "fy", "cx", "cy", "width", "height", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "tx",
    "ty", "tz",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Camera>, CameraError> {
    let mut cameras = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != FIELDS.len() {
            return Err(CameraError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", FIELDS.len(), tokens.len()),
            });
        }
        let mut values = [0.0f64; 18];
        for (i, tok) in tokens.iter().enumerate() {
            values[i] = tok.parse::<f64>().map_err(|_| CameraError::Parse {
                line: line_no,
                message: format!("field `{}`: cannot parse {tok:?} as a number", FIELDS[i]),
            })?;
        }
        let dim = |i: usize| -> Result<usize, CameraError> {
            let x = values[i];
            if x.fract() != 0.0 || x < 1.0 || x > u32::MAX as f64 {
                return Err(CameraError::Parse {
                    line: line_no,
                    message: format!("field `{}` must be a positive integer, got {x}", FIELDS[i]),
                });
            }
            Ok(x as usize)
        };
        let (width, height) = (dim(4)?, dim(5)?);
        let with_line = |e: CameraError| CameraError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        let intrinsics =
            Intrinsics::new(values[0], values[1], values[2], values[3], width, height).map_err(with_line)?;
        let rotation = Matrix3::from_row_slice(&values[6..15]);
        let translation = Vector3::new(values[15], values[16], values[17]);
        let pose = Pose::new(rotation, translation).map_err(with_line)?;
        cameras.push(Camera { intrinsics, pose });
    }
    Ok(cameras)
}

/// Serialises cameras so that [`parse_trajectory`] reproduces every value exactly.
pub fn format_trajectory(cameras: &[Camera]) -> String {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(&FIELDS.join(" "));
    out.push('\n');
    for cam in cameras {
        let k = &cam.intrinsics;
        let r = cam.pose.rotation();
        let t = cam.pose.translation();
        // `{:?}` on f64 prints the shortest representation that round-trips.
        let _ = write!(
            out,
            "{:?} {:?} {:?} {:?} {} {}",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        for row in 0..3 {
            for col in 0..3 {
                let _ = write!(out, " {:?}", r[(row, col)]);
            }
        }
        let _ = writeln!(out, " {:?} {:?} {:?}", t.x, t.y, t.z);
    }
    out
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<Camera>, CameraError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CameraError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_trajectory(&text)
}

pub fn save_trajectory(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<(), CameraError> {
    let path = path.as_ref();
    std::fs::write(path, format_trajectory(cameras)).map_err(|e| CameraError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn ring(n: usize) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.7 + 0.1;
                let eye = Vector3::new(3.0 * a.cos(), -0.4, 3.0 * a.sin());
                Camera {
                    intrinsics: Intrinsics::from_fov_y(32, 24, 0.8).unwrap(),
                    pose: Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let cams = ring(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        save_trajectory(&path, &cams).unwrap();
        assert_eq!(load_trajectory(&path).unwrap(), cams);
    }

    #[test]
    fn empty_file_is_empty_trajectory() {
        assert!(parse_trajectory("").unwrap().is_empty());
        assert!(parse_trajectory("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn reflected_rotation_rejected() {
        let line = "10 10 5 5 10 10 1 0 0 0 1 0 0 0 -1 0 0 0\n";
        let err = parse_trajectory(line).unwrap_err();
        match err {
            CameraError::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("orthonormal"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagnostics_name_field_and_line() {
        let text = "# header\n10 10 5 5 10 10 1 0 0 0 1 0 0 0 1 0 0 0\n10 10 5 5 ten 10 1 0 0 0 1 0 0 0 1 0 0 0\n";
        let err = parse_trajectory(text).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("width"), "{err}");
        let short = parse_trajectory("1 2 3").unwrap_err().to_string();
        assert!(short.contains("expected 18 fields"), "{short}");
    }

    #[test]
    fn trailing_comment_allowed() {
        let r = Rotation3::from_euler_angles(0.2, 0.1, -0.3);
        let cams = vec![Camera {
            intrinsics: Intrinsics::new(5.0, 6.0, 2.0, 3.0, 4, 7).unwrap(),
            pose: Pose::from_rotation(&r, Vector3::new(0.5, 0.25, -1.0)),
        }];
        let text = format_trajectory(&cams).replace('\n', " # cam\n");
        assert_eq!(parse_trajectory(&text).unwrap(), cams);
    }
}
