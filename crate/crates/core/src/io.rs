//! File formats: meshes (OBJ, PLY), clouds (PLY), plain-text keypoint,
//! corner and pixel lists, and JSON documents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType,
};
use ply_rs::writer::Writer;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{Pixel, Vec3};
use crate::model::{ModelKeypoint, ObjectModel, PointCloud};
use crate::triangulation::AnnotatedKeypoint;

pub type Mesh = (Vec<Vec3>, Vec<[usize; 3]>);

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).unwrap_or_default()
}

/// Loads a triangle mesh from `.obj` or `.ply`; polygons are fan-triangulated.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    match extension(path).as_str() {
        "obj" => load_obj(path),
        "ply" => load_ply_mesh(path),
        other => Err(Error::parse(path, format!("unsupported mesh extension `{other}`"))),
    }
}

fn load_obj(path: &Path) -> Result<Mesh> {
    let opts = tobj::LoadOptions { triangulate: true, single_index: true, ignore_points: true, ignore_lines: true };
    let (models, _) = tobj::load_obj(path, &opts).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for m in models {
        let base = vertices.len();
        vertices.extend(m.mesh.positions.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])));
        faces.extend(
            m.mesh.indices.chunks_exact(3).map(|f| [base + f[0] as usize, base + f[1] as usize, base + f[2] as usize]),
        );
    }
    Ok((vertices, faces))
}

fn read_ply(path: &Path) -> Result<Ply<DefaultElement>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Parser::<DefaultElement>::new().read_ply(&mut BufReader::new(f)).map_err(|e| Error::parse(path, e.to_string()))
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<i64>> {
    Some(match p {
        Property::ListChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x as i64).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x as i64).collect(),
        _ => return None,
    })
}

fn ply_vertices(path: &Path, ply: &Ply<DefaultElement>) -> Result<Vec<Vec3>> {
    let Some(verts) = ply.payload.get("vertex") else {
        return Ok(Vec::new());
    };
    verts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = |k: &str| {
                v.get(k)
                    .and_then(scalar)
                    .ok_or_else(|| Error::parse(path, format!("vertex {i}: missing numeric `{k}`")))
            };
            Ok(Vec3::new(c("x")?, c("y")?, c("z")?))
        })
        .collect()
}

fn load_ply_mesh(path: &Path) -> Result<Mesh> {
    let ply = read_ply(path)?;
    let vertices = ply_vertices(path, &ply)?;
    let mut faces = Vec::new();
    for (i, f) in ply.payload.get("face").into_iter().flatten().enumerate() {
        let idx = f
            .get("vertex_indices")
            .or_else(|| f.get("vertex_index"))
            .and_then(index_list)
            .ok_or_else(|| Error::parse(path, format!("face {i}: missing index list")))?;
        if idx.iter().any(|&x| x < 0 || x as usize >= vertices.len()) {
            return Err(Error::parse(path, format!("face {i}: vertex index out of range")));
        }
        for k in 1..idx.len().saturating_sub(1) {
            faces.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
        }
    }
    Ok((vertices, faces))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let ply = read_ply(path)?;
    PointCloud::new(ply_vertices(path, &ply)?)
}

fn vertex_element(count_hint: usize) -> (ElementDef, Vec<DefaultElement>) {
    let mut def = ElementDef::new("vertex".to_string());
    for k in ["x", "y", "z"] {
        def.properties.add(PropertyDef::new(k.to_string(), PropertyType::Scalar(ScalarType::Double)));
    }
    (def, Vec::with_capacity(count_hint))
}

fn vertex_of(p: &Vec3) -> DefaultElement {
    let mut e = DefaultElement::new();
    e.insert("x".to_string(), Property::Double(p.x));
    e.insert("y".to_string(), Property::Double(p.y));
    e.insert("z".to_string(), Property::Double(p.z));
    e
}

fn write_ply(path: &Path, mut ply: Ply<DefaultElement>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    Writer::new().write_ply(&mut w, &mut ply).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Binary little-endian PLY with `double` coordinates, so values round-trip exactly.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let (def, mut rows) = vertex_element(cloud.len());
    ply.header.elements.add(def);
    rows.extend(cloud.points().iter().map(vertex_of));
    ply.payload.insert("vertex".to_string(), rows);
    write_ply(path, ply)
}

/// ASCII PLY: the binary writer of `ply-rs` 0.1 emits wrong list lengths.
pub fn save_mesh_ply(path: &Path, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::Ascii;
    let (def, mut rows) = vertex_element(vertices.len());
    ply.header.elements.add(def);
    rows.extend(vertices.iter().map(vertex_of));
    ply.payload.insert("vertex".to_string(), rows);
    let mut face_def = ElementDef::new("face".to_string());
    face_def
        .properties
        .add(PropertyDef::new("vertex_indices".to_string(), PropertyType::List(ScalarType::UChar, ScalarType::Int)));
    ply.header.elements.add(face_def);
    let face_rows = faces
        .iter()
        .map(|f| {
            let mut e = DefaultElement::new();
            e.insert("vertex_indices".to_string(), Property::ListInt(f.iter().map(|&i| i as i32).collect()));
            e
        })
        .collect();
    ply.payload.insert("face".to_string(), face_rows);
    write_ply(path, ply)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn number(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, format!("line {line}: `{tok}` is not a finite number")))
}

/// `id x y z` per line, meters in the object frame.
pub fn load_keypoints(path: &Path) -> Result<Vec<ModelKeypoint>> {
    data_lines(&read_text(path)?)
        .map(|(n, t)| {
            if t.len() != 4 {
                return Err(Error::parse(path, format!("line {n}: expected `id x y z`")));
            }
            Ok(ModelKeypoint {
                id: t[0].to_string(),
                position: Vec3::new(number(path, n, t[1])?, number(path, n, t[2])?, number(path, n, t[3])?),
            })
        })
        .collect()
}

pub fn save_keypoints(path: &Path, keypoints: &[ModelKeypoint]) -> Result<()> {
    let mut s = String::new();
    for k in keypoints {
        s.push_str(&format!("{} {} {} {}\n", k.id, k.position.x, k.position.y, k.position.z));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Board corner pixels, `u v` per line in row-major order.
pub fn load_corners(path: &Path) -> Result<Vec<Pixel>> {
    data_lines(&read_text(path)?)
        .map(|(n, t)| {
            if t.len() != 2 {
                return Err(Error::parse(path, format!("line {n}: expected `u v`")));
            }
            Ok(Pixel::new(number(path, n, t[0])?, number(path, n, t[1])?))
        })
        .collect()
}

pub fn save_corners(path: &Path, corners: &[Pixel]) -> Result<()> {
    let mut s = String::new();
    for c in corners {
        s.push_str(&format!("{} {}\n", c.u, c.v));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Detected 2D keypoints, `id u v` per line.
pub fn load_pixel_keypoints(path: &Path) -> Result<Vec<AnnotatedKeypoint>> {
    data_lines(&read_text(path)?)
        .map(|(n, t)| {
            if t.len() != 3 {
                return Err(Error::parse(path, format!("line {n}: expected `id u v`")));
            }
            Ok(AnnotatedKeypoint {
                keypoint_id: t[0].to_string(),
                pixel: Pixel::new(number(path, n, t[1])?, number(path, n, t[2])?),
            })
        })
        .collect()
}

pub fn save_pixel_keypoints(path: &Path, keypoints: &[AnnotatedKeypoint]) -> Result<()> {
    let mut s = String::new();
    for k in keypoints {
        s.push_str(&format!("{} {} {}\n", k.keypoint_id, k.pixel.u, k.pixel.v));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Mesh file plus keypoint list.
pub fn load_model(mesh: &Path, keypoints: &Path) -> Result<ObjectModel> {
    let (vertices, faces) = load_mesh(mesh)?;
    ObjectModel::new(load_keypoints(keypoints)?, vertices, faces)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)).map_err(|e| Error::io(path, e))
}
