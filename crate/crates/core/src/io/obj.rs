//! Wavefront OBJ with an MTL diffuse texture.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Rgb};
use crate::io::png;
use crate::meshtex::TexturedMesh;

/// Indices of one face corner into the position, uv and normal lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corner {
    pub v: usize,
    pub vt: Option<usize>,
    pub vn: Option<usize>,
}

/// Raw contents of an OBJ file. Faces are already fan-triangulated and
/// `uvs` are in image convention (`v` grows downwards).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjData {
    pub positions: Vec<Vector3<f64>>,
    pub uvs: Vec<Vector2<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub faces: Vec<[Corner; 3]>,
    pub mtllib: Option<String>,
    pub material: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Material {
    pub diffuse: Option<Rgb>,
    pub texture: Option<String>,
}

fn err(format: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        format,
        offset,
        message: message.into(),
    }
}

fn floats<const N: usize>(words: &[&str], offset: usize, what: &str) -> Result<[f64; N]> {
    if words.len() < N {
        return Err(err("obj", offset, format!("{what} needs {N} components")));
    }
    let mut out = [0.0; N];
    for (o, w) in out.iter_mut().zip(words) {
        *o = w
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err("obj", offset, format!("invalid number '{w}' in {what}")))?;
    }
    Ok(out)
}

/// Resolves a 1-based or negative (relative) OBJ index against `len` items.
fn resolve(word: &str, len: usize, offset: usize) -> Result<usize> {
    let i: i64 = word
        .parse()
        .map_err(|_| err("obj", offset, format!("invalid index '{word}'")))?;
    let idx = if i > 0 {
        (i - 1) as usize
    } else if i < 0 && i.unsigned_abs() as usize <= len {
        len - i.unsigned_abs() as usize
    } else {
        return Err(err("obj", offset, format!("index {i} out of range")));
    };
    if idx >= len {
        return Err(err("obj", offset, format!("index {i} out of range ({len} defined)")));
    }
    Ok(idx)
}

pub fn parse_obj(text: &str) -> Result<ObjData> {
    let mut obj = ObjData::default();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let line = line.split('#').next().unwrap_or("");
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, rest)) = words.split_first() else {
            continue;
        };
        match head {
            "v" => obj.positions.push(Vector3::from(floats::<3>(rest, here, "vertex")?)),
            "vt" => {
                let [u, v] = floats::<2>(rest, here, "texture coordinate")?;
                obj.uvs.push(Vector2::new(u, 1.0 - v));
            }
            "vn" => obj.normals.push(Vector3::from(floats::<3>(rest, here, "normal")?)),
            "f" => {
                if rest.len() < 3 {
                    return Err(err("obj", here, "face needs at least 3 vertices"));
                }
                let mut corners = Vec::with_capacity(rest.len());
                for w in rest {
                    let mut parts = w.split('/');
                    let v = resolve(parts.next().unwrap_or(""), obj.positions.len(), here)?;
                    let vt = match parts.next() {
                        None | Some("") => None,
                        Some(s) => Some(resolve(s, obj.uvs.len(), here)?),
                    };
                    let vn = match parts.next() {
                        None | Some("") => None,
                        Some(s) => Some(resolve(s, obj.normals.len(), here)?),
                    };
                    if parts.next().is_some() {
                        return Err(err("obj", here, format!("malformed face vertex '{w}'")));
                    }
                    corners.push(Corner { v, vt, vn });
                }
                for k in 1..corners.len() - 1 {
                    obj.faces.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            "mtllib" => obj.mtllib = rest.first().map(|s| s.to_string()),
            "usemtl" => {
                let name = rest.first().map(|s| s.to_string());
                if obj.material.is_some() && obj.material != name {
                    warn!("only the first material is used");
                } else {
                    obj.material = name;
                }
            }
            "o" | "g" | "s" => {}
            other => warn!("ignoring OBJ statement '{other}'"),
        }
    }
    if obj.faces.is_empty() {
        return Err(err("obj", offset, "no faces"));
    }
    Ok(obj)
}

fn current_material<'a>(
    out: &'a mut HashMap<String, Material>,
    current: &Option<String>,
    offset: usize,
    head: &str,
) -> Result<&'a mut Material> {
    let name = current
        .as_ref()
        .ok_or_else(|| err("mtl", offset, format!("'{head}' before newmtl")))?;
    Ok(out.entry(name.clone()).or_default())
}

pub fn parse_mtl(text: &str) -> Result<HashMap<String, Material>> {
    let mut out: HashMap<String, Material> = HashMap::new();
    let mut current: Option<String> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let line = line.split('#').next().unwrap_or("");
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, rest)) = words.split_first() else {
            continue;
        };
        match head {
            "newmtl" => {
                let name = rest.first().ok_or_else(|| err("mtl", here, "newmtl without a name"))?;
                out.entry(name.to_string()).or_default();
                current = Some(name.to_string());
            }
            "Kd" => {
                let kd = floats::<3>(rest, here, "Kd").map_err(|_| err("mtl", here, "invalid Kd"))?;
                current_material(&mut out, &current, here, head)?.diffuse = Some(kd);
            }
            "map_Kd" => {
                // options such as -s come first; the file name is last
                let file = rest.last().ok_or_else(|| err("mtl", here, "map_Kd without a file"))?;
                current_material(&mut out, &current, here, head)?.texture = Some(file.to_string());
            }
            _ => {}
        }
    }
    Ok(out)
}

fn vertex_normals(obj: &ObjData) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); obj.positions.len()];
    for f in &obj.faces {
        let [a, b, c] = f.map(|k| obj.positions[k.v]);
        // area weighted; outward for counter-clockwise winding seen from outside
        let n = (b - a).cross(&(c - a));
        for k in f {
            acc[k.v] += n;
        }
    }
    acc.into_iter()
        .map(|n| if n.norm() > 0.0 { n.normalize() } else { Vector3::z() })
        .collect()
}

/// Assembles a mesh, splitting vertices wherever position, uv or normal differ.
pub fn build_mesh(obj: &ObjData, texture: Option<Image>, diffuse: Option<Rgb>) -> Result<TexturedMesh> {
    let textured = texture.is_some();
    if textured && obj.faces.iter().flatten().any(|c| c.vt.is_none()) {
        return Err(Error::invalid("textured mesh has faces without UVs"));
    }
    let computed = if obj.faces.iter().flatten().any(|c| c.vn.is_none()) {
        Some(vertex_normals(obj))
    } else {
        None
    };
    let mut wrapped = false;
    let mut index: HashMap<Corner, usize> = HashMap::new();
    let (mut vertices, mut normals, mut uvs) = (Vec::new(), Vec::new(), Vec::new());
    let mut faces = Vec::with_capacity(obj.faces.len());
    for f in &obj.faces {
        let mut tri = [0; 3];
        for (slot, c) in tri.iter_mut().zip(f) {
            let key = if textured { *c } else { Corner { vt: None, ..*c } };
            *slot = match index.get(&key) {
                Some(&i) => i,
                None => {
                    let n = match c.vn {
                        Some(i) if obj.normals[i].norm() > 0.0 => obj.normals[i].normalize(),
                        Some(_) => return Err(Error::invalid("zero-length normal")),
                        None => computed.as_ref().expect("computed when any normal is missing")[c.v],
                    };
                    let uv = match key.vt {
                        Some(i) => {
                            let uv = obj.uvs[i];
                            if (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y) {
                                uv
                            } else {
                                wrapped = true;
                                uv.map(|t| t.rem_euclid(1.0))
                            }
                        }
                        None => Vector2::new(0.5, 0.5),
                    };
                    vertices.push(obj.positions[c.v]);
                    normals.push(n);
                    uvs.push(uv);
                    index.insert(key, vertices.len() - 1);
                    vertices.len() - 1
                }
            };
        }
        faces.push(tri);
    }
    if wrapped {
        warn!("uvs outside [0, 1] wrapped into range");
    }
    let texture = texture.unwrap_or_else(|| Grid::new(1, 1, diffuse.unwrap_or([1.0; 3])));
    TexturedMesh::new(vertices, faces, normals, uvs, texture)
}

pub fn load_mesh(path: &Path) -> Result<TexturedMesh> {
    let text = std::fs::read_to_string(path)?;
    let obj = parse_obj(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut material = Material::default();
    if let Some(lib) = &obj.mtllib {
        let mtl_path = dir.join(lib);
        let mats = parse_mtl(&std::fs::read_to_string(&mtl_path)?)?;
        let chosen = match &obj.material {
            Some(name) => mats.get(name).cloned(),
            None => {
                let mut names: Vec<_> = mats.keys().collect();
                names.sort();
                names.first().and_then(|n| mats.get(*n).cloned())
            }
        };
        material = chosen.ok_or_else(|| Error::invalid("OBJ material not found in its MTL library"))?;
    }
    let texture = match &material.texture {
        Some(file) => Some(png::load_rgb(&dir.join(file))?),
        None => None,
    };
    build_mesh(&obj, texture, material.diffuse)
}

/// Writes `obj_path`, a sibling `.mtl` and the texture PNG `texture_file`
/// in the same directory.
pub fn save_mesh(obj_path: &Path, mesh: &TexturedMesh, texture_file: &str) -> Result<()> {
    mesh.validate()?;
    let dir = obj_path.parent().unwrap_or(Path::new("."));
    let stem = obj_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid("OBJ path has no file name"))?;
    let mtl_name = format!("{stem}.mtl");

    let mut text = format!("mtllib {mtl_name}\nusemtl material0\n");
    for v in &mesh.vertices {
        let _ = writeln!(text, "v {} {} {}", v.x, v.y, v.z);
    }
    for uv in &mesh.uvs {
        let _ = writeln!(text, "vt {} {}", uv.x, 1.0 - uv.y);
    }
    for n in &mesh.normals {
        let _ = writeln!(text, "vn {} {} {}", n.x, n.y, n.z);
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        let _ = writeln!(text, "f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}");
    }
    std::fs::write(obj_path, text)?;
    std::fs::write(
        dir.join(&mtl_name),
        format!("newmtl material0\nKd 1 1 1\nmap_Kd {texture_file}\n"),
    )?;
    png::save_rgb(&dir.join(texture_file), &mesh.texture)
}
