//! File formats: PLY keypoints, tagged binary descriptors and global
//! features, plain-text poses, and the JSON scene manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose};
use crate::model::{FeatureCloud, Frame, FrameId, MetaShape};
use crate::retrieval::GlobalFeature;
use crate::synth::{OverlapEdge, SyntheticScene};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"IMRD";
pub const GLOBAL_MAGIC: &[u8; 4] = b"IMRG";
/// Descriptor norms further than this from 1 are reported on load.
pub const NORM_WARN_TOL: f64 = 1e-3;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        offset: offset as u64,
        message: message.into(),
    }
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => f64::from(b[0] as i8),
            Self::U8 => f64::from(b[0]),
            Self::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Self::I32 => f64::from(i32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::U32 => f64::from(u32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::F32 => f64::from(f32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(path, offset, "header not terminated by end_header"));
        };
        let line = std::str::from_utf8(&bytes[offset..offset + len])
            .map_err(|_| parse_err(path, offset, "header is not valid text"))?
            .trim_end_matches('\r');
        let at = offset;
        offset += len + 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        if first {
            if line != "ply" {
                return Err(parse_err(path, at, "missing `ply` magic line"));
            }
            first = false;
            continue;
        }
        match words.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, ..] => {
                return Err(parse_err(path, at, format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, at, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: (*name).to_owned(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, _] => {
                let (Some(c), Some(i)) = (Scalar::parse(count_ty), Scalar::parse(item_ty)) else {
                    return Err(parse_err(path, at, "unknown list property type"));
                };
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, at, "property before any element"));
                };
                el.properties.push(Property::List(c, i));
            }
            ["property", ty, name] => {
                let Some(s) = Scalar::parse(ty) else {
                    return Err(parse_err(path, at, format!("unknown property type `{ty}`")));
                };
                let Some(el) = elements.last_mut() else {
                    return Err(parse_err(path, at, "property before any element"));
                };
                el.properties.push(Property::Scalar((*name).to_owned(), s));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(path, at, format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, 0, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body: offset,
    })
}

/// Sequential reader over the PLY body in either encoding.
struct Body<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    format: PlyFormat,
}

impl Body<'_> {
    fn value(&mut self, ty: Scalar) -> Result<(f64, usize)> {
        match self.format {
            PlyFormat::BinaryLe => {
                let at = self.pos;
                let end = at + ty.size();
                if end > self.bytes.len() {
                    return Err(parse_err(self.path, at, "unexpected end of binary data"));
                }
                self.pos = end;
                Ok((ty.decode(&self.bytes[at..end]), at))
            }
            PlyFormat::Ascii => {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                let at = self.pos;
                while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                if at == self.pos {
                    return Err(parse_err(self.path, at, "unexpected end of ASCII data"));
                }
                let token = std::str::from_utf8(&self.bytes[at..self.pos]).unwrap_or("");
                let v: f64 = token
                    .parse()
                    .map_err(|_| parse_err(self.path, at, format!("bad number `{token}`")))?;
                Ok((v, at))
            }
        }
    }
}

/// Reads vertex x, y, z from an ASCII or binary little-endian PLY file.
pub fn read_ply_points(path: &Path) -> Result<Vec<Point3>> {
    let bytes = read(path)?;
    let header = parse_header(path, &bytes)?;
    let mut body = Body {
        path,
        bytes: &bytes,
        pos: header.body,
        format: header.format,
    };
    for el in &header.elements {
        if el.name != "vertex" {
            // Skip elements that precede the vertices.
            for _ in 0..el.count {
                for prop in &el.properties {
                    match prop {
                        Property::Scalar(_, ty) => {
                            body.value(*ty)?;
                        }
                        Property::List(count_ty, item_ty) => {
                            let (n, _) = body.value(*count_ty)?;
                            for _ in 0..n as usize {
                                body.value(*item_ty)?;
                            }
                        }
                    }
                }
            }
            continue;
        }
        let axis = |name: &str| -> Result<usize> {
            el.properties
                .iter()
                .position(|p| matches!(p, Property::Scalar(n, Scalar::F32 | Scalar::F64) if n == name))
                .ok_or_else(|| parse_err(path, 0, format!("vertex has no float `{name}` property")))
        };
        let slots = [axis("x")?, axis("y")?, axis("z")?];
        let mut points = Vec::with_capacity(el.count);
        let mut row = vec![(0.0, 0); el.properties.len()];
        for _ in 0..el.count {
            for (k, prop) in el.properties.iter().enumerate() {
                row[k] = match prop {
                    Property::Scalar(_, ty) => body.value(*ty)?,
                    Property::List(..) => {
                        return Err(parse_err(path, body.pos, "list properties on vertices are not supported"))
                    }
                };
            }
            let p = Point3::new(row[slots[0]].0, row[slots[1]].0, row[slots[2]].0);
            if let Some(k) = (0..3).find(|&k| !p[k].is_finite()) {
                return Err(parse_err(path, row[slots[k]].1, "non-finite vertex coordinate"));
            }
            points.push(p);
        }
        return Ok(points);
    }
    Err(parse_err(path, header.body, "file has no vertex element"))
}

/// Binary little-endian PLY with double-precision x, y, z.
pub fn write_ply_points(path: &Path, points: &[Point3]) -> Result<()> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )
    .into_bytes();
    for p in points {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path, &out)
}

/// ASCII PLY of the meta-shape with per-point origin frame and coverage.
pub fn write_meta_ply(path: &Path, meta: &MetaShape) -> Result<()> {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property int origin_frame\nproperty int coverage\nend_header\n",
        meta.points.len()
    );
    for p in &meta.points {
        let v = p.position;
        writeln!(out, "{} {} {} {} {}", v.x, v.y, v.z, p.origin_frame, p.coverage).unwrap();
    }
    write(path, out.as_bytes())
}

// ---------------------------------------------------------------- descriptors

fn read_u32(path: &Path, bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, at, "truncated header"))
}

fn read_f32s(path: &Path, bytes: &[u8], at: usize, n: usize) -> Result<Vec<f64>> {
    let end = at + n * 4;
    if bytes.len() != end {
        return Err(parse_err(
            path,
            bytes.len().min(end),
            format!("expected {} bytes of data, found {}", n * 4, bytes.len().saturating_sub(at)),
        ));
    }
    let values: Vec<f64> = bytes[at..end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(path, at + 4 * i, "non-finite value"));
    }
    Ok(values)
}

/// Row-major descriptors plus their dimension, as stored (not normalized).
pub fn read_descriptors(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = read(path)?;
    if bytes.get(..4) != Some(DESCRIPTOR_MAGIC) {
        return Err(parse_err(path, 0, "missing IMRD magic"));
    }
    let count = read_u32(path, &bytes, 4)? as usize;
    let dim = read_u32(path, &bytes, 8)? as usize;
    if dim == 0 {
        return Err(parse_err(path, 8, "descriptor dimension is zero"));
    }
    Ok((read_f32s(path, &bytes, 12, count * dim)?, dim))
}

pub fn write_descriptors(path: &Path, descriptors: &[f64], dim: usize) -> Result<()> {
    if dim == 0 || descriptors.len() % dim != 0 {
        return Err(Error::invalid("descriptor buffer is not a whole number of rows"));
    }
    let mut out = DESCRIPTOR_MAGIC.to_vec();
    out.extend_from_slice(&((descriptors.len() / dim) as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in descriptors {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write(path, &out)
}

pub fn read_global_feature(path: &Path) -> Result<GlobalFeature> {
    let bytes = read(path)?;
    if bytes.get(..4) != Some(GLOBAL_MAGIC) {
        return Err(parse_err(path, 0, "missing IMRG magic"));
    }
    let dim = read_u32(path, &bytes, 4)? as usize;
    GlobalFeature::from_unnormalized(read_f32s(path, &bytes, 8, dim)?)
}

pub fn write_global_feature(path: &Path, feature: &GlobalFeature) -> Result<()> {
    let mut out = GLOBAL_MAGIC.to_vec();
    out.extend_from_slice(&(feature.dim() as u32).to_le_bytes());
    for v in feature.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write(path, &out)
}

// ---------------------------------------------------------------- frames

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameFiles {
    pub id: FrameId,
    pub keypoints: PathBuf,
    pub descriptors: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_feature: Option<PathBuf>,
}

/// Loads keypoints and descriptors, L2-normalizing descriptors.
pub fn load_frame(files: &FrameFiles) -> Result<(Frame, Option<GlobalFeature>)> {
    let keypoints = read_ply_points(&files.keypoints)?;
    let (descriptors, dim) = read_descriptors(&files.descriptors)?;
    let rows = descriptors.len() / dim;
    if rows != keypoints.len() {
        return Err(Error::CountMismatch {
            what: "keypoint/descriptor",
            left: keypoints.len(),
            right: rows,
        });
    }
    let off_unit = descriptors
        .chunks_exact(dim)
        .filter(|d| (d.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() > NORM_WARN_TOL)
        .count();
    if off_unit > 0 {
        log::warn!(
            "{}: {off_unit} of {rows} descriptors are not unit length; normalizing",
            files.descriptors.display()
        );
    }
    let frame = Frame::with_normalized_descriptors(files.id, keypoints, descriptors, dim, None)?;
    let global = files.global_feature.as_deref().map(read_global_feature).transpose()?;
    Ok((frame, global))
}

// ---------------------------------------------------------------- poses

/// One line per frame: id followed by the 16 row-major matrix entries.
pub fn format_poses(poses: &BTreeMap<FrameId, Pose>) -> String {
    let mut out = String::new();
    for (id, pose) in poses {
        write!(out, "{id}").unwrap();
        for v in pose.to_row_major() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_poses(path: &Path, poses: &BTreeMap<FrameId, Pose>) -> Result<()> {
    write(path, format_poses(poses).as_bytes())
}

pub fn read_poses(path: &Path) -> Result<BTreeMap<FrameId, Pose>> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(path, e.valid_up_to(), "not UTF-8"))?;
    let mut poses = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(parse_err(path, at, format!("expected 17 fields, found {}", fields.len())));
        }
        let id: FrameId = fields[0]
            .parse()
            .map_err(|_| parse_err(path, at, format!("bad frame id `{}`", fields[0])))?;
        let mut m = [0.0; 16];
        for (slot, f) in m.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(path, at, format!("bad matrix entry `{f}`")))?;
        }
        let pose = Pose::from_row_major(&m).map_err(|e| parse_err(path, at, e.to_string()))?;
        if poses.insert(id, pose).is_some() {
            return Err(parse_err(path, at, format!("duplicate frame id {id}")));
        }
    }
    Ok(poses)
}

// ---------------------------------------------------------------- manifest

fn default_units() -> String {
    "meters".to_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_units")]
    pub units: String,
    pub frames: Vec<FrameFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_poses: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_graph: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub units: String,
    /// In manifest order; ground-truth poses attached when the manifest names them.
    pub frames: Vec<Frame>,
    /// Present only when every frame names a global-feature file.
    pub global_features: Option<Vec<GlobalFeature>>,
    pub gt_poses: Option<BTreeMap<FrameId, Pose>>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    bytes.push(b'\n');
    write(path, &bytes)
}

/// Loads a manifest; relative paths inside it resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<LoadedScene> {
    let manifest: Manifest = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &Path| base.join(p);

    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut globals = Vec::new();
    for entry in &manifest.frames {
        let files = FrameFiles {
            id: entry.id,
            keypoints: resolve(&entry.keypoints),
            descriptors: resolve(&entry.descriptors),
            global_feature: entry.global_feature.as_deref().map(resolve),
        };
        let (frame, global) = load_frame(&files)?;
        globals.extend(global);
        frames.push(frame);
    }
    let global_features = match globals.len() {
        0 => None,
        n if n == frames.len() => Some(globals),
        n => {
            return Err(Error::invalid(format!(
                "{}: {n} of {} frames name a global feature; give all or none",
                path.display(),
                frames.len()
            )))
        }
    };
    let gt_poses = manifest.gt_poses.as_deref().map(|p| read_poses(&resolve(p))).transpose()?;
    if let Some(gt) = &gt_poses {
        for f in &mut frames {
            f.gt_pose = gt.get(&f.id).copied();
        }
    }
    Ok(LoadedScene {
        units: manifest.units,
        frames,
        global_features,
        gt_poses,
    })
}

/// Writes every frame, the ground-truth poses, the overlap graph and a
/// manifest into `dir`. Returns the manifest path.
pub fn write_scene(dir: &Path, scene: &SyntheticScene, units: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scene.frames.len());
    for f in &scene.frames {
        let keypoints = PathBuf::from(format!("frame_{:03}.ply", f.id));
        let descriptors = PathBuf::from(format!("frame_{:03}.desc", f.id));
        write_ply_points(&dir.join(&keypoints), f.keypoints())?;
        write_descriptors(&dir.join(&descriptors), f.descriptors(), f.dim())?;
        entries.push(FrameFiles {
            id: f.id,
            keypoints,
            descriptors,
            global_feature: None,
        });
    }
    let gt = PathBuf::from("gt_poses.txt");
    write_poses(&dir.join(&gt), &scene.gt_poses())?;
    let graph = PathBuf::from("overlap_graph.json");
    write_json(&dir.join(&graph), &scene.overlaps)?;
    let manifest = Manifest {
        units: units.to_owned(),
        frames: entries,
        gt_poses: Some(gt),
        overlap_graph: Some(graph),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_overlap_graph(path: &Path) -> Result<Vec<OverlapEdge>> {
    read_json(path)
}
