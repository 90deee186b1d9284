//! Binary little-endian PLY in the layout used by common 3DGS viewers.
//!
//! Stored transforms: colour as the degree-0 SH coefficient
//! `f_dc = (rgb - 0.5) / SH_C0`, opacity as a logit, scale as a log. All
//! properties are `float`, so a primitive read back from a file survives a
//! further write/read cycle bit-for-bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use super::{logit, sigmoid, GaussianPrimitive, GaussianScene};

/// Degree-0 real spherical harmonic, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Opacity is clamped to `[EPS, 1 - EPS]` before taking the logit.
const OPACITY_EPS: f64 = 1e-7;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("element `{element}`: payload truncated at item {index} of {count}")]
    Truncated {
        element: String,
        index: usize,
        count: usize,
    },
    #[error("element `vertex` is missing required property `{0}`")]
    MissingProperty(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn encode(p: &GaussianPrimitive) -> [f32; 17] {
    let q = p.rotation.quaternion();
    let op = p.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    [
        p.mean.x as f32,
        p.mean.y as f32,
        p.mean.z as f32,
        0.0,
        0.0,
        0.0,
        ((p.color.x - 0.5) / SH_C0) as f32,
        ((p.color.y - 0.5) / SH_C0) as f32,
        ((p.color.z - 0.5) / SH_C0) as f32,
        logit(op) as f32,
        p.scale.x.ln() as f32,
        p.scale.y.ln() as f32,
        p.scale.z.ln() as f32,
        q.w as f32,
        q.i as f32,
        q.j as f32,
        q.k as f32,
    ]
}

fn decode(v: &[f64; 17]) -> GaussianPrimitive {
    let q = Quaternion::new(v[13], v[14], v[15], v[16]);
    let n = q.norm();
    let rotation = if (n - 1.0).abs() <= 1e-6 {
        // Already unit to within float precision; keep the stored values.
        Unit::new_unchecked(q)
    } else if n > 1e-12 {
        UnitQuaternion::from_quaternion(q)
    } else {
        UnitQuaternion::identity()
    };
    GaussianPrimitive {
        mean: Vector3::new(v[0], v[1], v[2]),
        rotation,
        scale: Vector3::new(v[10].exp(), v[11].exp(), v[12].exp()),
        opacity: sigmoid(v[9]),
        color: Vector3::new(
            (0.5 + SH_C0 * v[6]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[7]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[8]).clamp(0.0, 1.0),
        ),
    }
}

pub fn export_ply(scene: &GaussianScene, mut out: impl Write) -> std::io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in PROPERTIES {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    for p in &scene.primitives {
        for v in encode(p) {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.flush()
}

struct Element {
    name: String,
    count: usize,
    /// (property name, byte size); list properties are rejected.
    properties: Vec<(String, usize)>,
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn parse_header(reader: &mut impl BufRead) -> Result<Vec<Element>, PlyError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), PlyError> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| PlyError::Header(e.to_string()))?;
        if n == 0 {
            return Err(PlyError::Header("unexpected end of file before end_header".into()));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim() != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        next(&mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => saw_format = true,
            ["format", other, ..] => return Err(PlyError::Header(format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| PlyError::Header(format!("bad count for element `{name}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => return Err(PlyError::Header("list properties are not supported".into())),
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header(format!("property `{name}` before any element")))?;
                let size = scalar_size(ty)
                    .ok_or_else(|| PlyError::Header(format!("element `{}`: unknown type `{ty}`", el.name)))?;
                el.properties.push((name.to_string(), size));
            }
            _ => return Err(PlyError::Header(format!("unrecognised line `{}`", line.trim()))),
        }
    }
    if !saw_format {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok(elements)
}

pub fn import_ply(reader: impl Read) -> Result<GaussianScene, PlyError> {
    let mut reader = BufReader::new(reader);
    let elements = parse_header(&mut reader)?;
    let mut primitives = Vec::new();
    for el in &elements {
        let stride: usize = el.properties.iter().map(|p| p.1).sum();
        if el.name != "vertex" {
            // Skip unknown elements.
            let mut skip = vec![0u8; stride];
            for index in 0..el.count {
                reader.read_exact(&mut skip).map_err(|_| PlyError::Truncated {
                    element: el.name.clone(),
                    index,
                    count: el.count,
                })?;
            }
            continue;
        }
        let mut slots = [usize::MAX; 17];
        for (k, name) in PROPERTIES.iter().enumerate() {
            let pos = el.properties.iter().position(|(n, _)| n == name);
            match pos {
                Some(i) if el.properties[i].1 == 4 => slots[k] = i,
                Some(_) => {
                    return Err(PlyError::Header(format!(
                        "element `vertex`: property `{name}` must be float"
                    )))
                }
                // Normals are optional.
                None if (3..6).contains(&k) => {}
                None => return Err(PlyError::MissingProperty(name)),
            }
        }
        let mut row = vec![0u8; stride];
        let offsets: Vec<usize> = el
            .properties
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.1;
                Some(o)
            })
            .collect();
        primitives.reserve(el.count);
        for index in 0..el.count {
            reader.read_exact(&mut row).map_err(|_| PlyError::Truncated {
                element: el.name.clone(),
                index,
                count: el.count,
            })?;
            let mut values = [0.0f64; 17];
            for (k, &slot) in slots.iter().enumerate() {
                if slot != usize::MAX {
                    let o = offsets[slot];
                    values[k] = (&row[o..o + 4]).read_f32::<LittleEndian>().unwrap() as f64;
                }
            }
            primitives.push(decode(&values));
        }
    }
    Ok(GaussianScene::new(primitives))
}

pub fn write_ply(path: impl AsRef<Path>, scene: &GaussianScene) -> Result<(), PlyError> {
    let path = path.as_ref();
    let io = |source| PlyError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    export_ply(scene, std::io::BufWriter::new(file)).map_err(io)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianScene, PlyError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    import_ply(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(n: usize, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianScene::new(
            (0..n)
                .map(|_| GaussianPrimitive {
                    mean: Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
                    rotation: UnitQuaternion::from_quaternion(Quaternion::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )),
                    scale: Vector3::from_fn(|_, _| rng.gen_range(0.001..2.0)),
                    opacity: rng.gen_range(0.0..=1.0),
                    color: Vector3::from_fn(|_, _| rng.gen_range(0.0..=1.0)),
                })
                .collect(),
        )
    }

    fn to_bytes(scene: &GaussianScene) -> Vec<u8> {
        let mut buf = Vec::new();
        export_ply(scene, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact_after_first_write() {
        let scene = random_scene(100, 3);
        let bytes = to_bytes(&scene);
        let loaded = import_ply(&bytes[..]).unwrap();
        assert_eq!(loaded.len(), 100);
        loaded.validate().unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        assert_eq!(import_ply(&to_bytes(&loaded)[..]).unwrap(), loaded);
        for (a, b) in scene.primitives.iter().zip(&loaded.primitives) {
            assert!((a.mean - b.mean).amax() < 1e-5);
            assert!((a.color - b.color).amax() < 1e-6);
            assert!((a.opacity - b.opacity).abs() < 1e-6);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-3);
        }
    }

    #[test]
    fn white_is_stored_as_half_over_sh_c0() {
        let p = GaussianPrimitive::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::repeat(1.0));
        let bytes = to_bytes(&GaussianScene::new(vec![p]));
        let loaded = import_ply(&bytes[..]).unwrap();
        let header_len = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let f_dc0 = (&bytes[header_len + 24..header_len + 28])
            .read_f32::<LittleEndian>()
            .unwrap();
        assert_eq!(f_dc0, (0.5 / SH_C0) as f32);
        assert_eq!(loaded.primitives[0].color, Vector3::repeat(1.0));
        let grey = GaussianPrimitive::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::repeat(0.5));
        assert_eq!(encode(&grey)[6], 0.0);
    }

    #[test]
    fn empty_scene() {
        let bytes = to_bytes(&GaussianScene::default());
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 0\n"));
        assert!(import_ply(&bytes[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_inputs() {
        let bytes = to_bytes(&random_scene(3, 1));
        match import_ply(&bytes[..bytes.len() - 1]) {
            Err(PlyError::Truncated { element, index, count }) => {
                assert_eq!((element.as_str(), index, count), ("vertex", 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(import_ply(&b"plx\n"[..]), Err(PlyError::Header(_))));
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(import_ply(&ascii[..]), Err(PlyError::Header(_))));
        let missing = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(import_ply(&missing[..]), Err(PlyError::MissingProperty("y"))));
    }

    #[test]
    fn extra_properties_are_skipped() {
        // Viewer files usually carry f_rest_* coefficients after f_dc.
        let scene = random_scene(2, 9);
        let mut header = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 2\n");
        for name in PROPERTIES.iter().take(9) {
            header.push_str(&format!("property float {name}\n"));
        }
        header.push_str("property float f_rest_0\n");
        for name in PROPERTIES.iter().skip(9) {
            header.push_str(&format!("property float {name}\n"));
        }
        header.push_str("end_header\n");
        let mut bytes = header.into_bytes();
        for p in &scene.primitives {
            let e = encode(p);
            for (i, v) in e.iter().enumerate() {
                if i == 9 {
                    bytes.write_f32::<LittleEndian>(42.0).unwrap();
                }
                bytes.write_f32::<LittleEndian>(*v).unwrap();
            }
        }
        let loaded = import_ply(&bytes[..]).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&import_ply(&to_bytes(&scene)[..]).unwrap()));
    }
}
