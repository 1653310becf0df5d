//! On-disk formats: ASCII point clouds, the binary tensor archive used by
//! checkpoints, and small helpers for atomic writes and content hashes.
//!
//! Point files hold one point per line, `x y z [nx ny nz] [patch_id]
//! [part_label]`, with `#` comments. A `# columns: ...` comment names the
//! columns explicitly; without it the column count decides (3, 6, 7 or 8).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{estimate_normals_pca, GeometryError, PointCloud, Vec3, DEFAULT_PCA_NEIGHBORS};
use crate::network::hex;
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"MIDT";
const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    X,
    Y,
    Z,
    Nx,
    Ny,
    Nz,
    Patch,
    Part,
}

fn column(name: &str) -> Option<Column> {
    Some(match name {
        "x" => Column::X,
        "y" => Column::Y,
        "z" => Column::Z,
        "nx" => Column::Nx,
        "ny" => Column::Ny,
        "nz" => Column::Nz,
        "patch_id" => Column::Patch,
        "part_label" => Column::Part,
        _ => return None,
    })
}

fn default_columns(n: usize) -> Option<Vec<Column>> {
    use Column::*;
    Some(match n {
        3 => vec![X, Y, Z],
        6 => vec![X, Y, Z, Nx, Ny, Nz],
        7 => vec![X, Y, Z, Nx, Ny, Nz, Patch],
        8 => vec![X, Y, Z, Nx, Ny, Nz, Patch, Part],
        _ => return None,
    })
}

pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut names = vec!["x", "y", "z"];
    if cloud.has_normals() {
        names.extend(["nx", "ny", "nz"]);
    }
    if cloud.patch_ids.is_some() {
        names.push("patch_id");
    }
    if cloud.part_labels.is_some() {
        names.push("part_label");
    }
    let mut out = format!("# columns: {}\n", names.join(" "));
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        // `{:?}` prints the shortest representation that parses back exactly.
        out.push_str(&format!("{:?} {:?} {:?}", p.x, p.y, p.z));
        if cloud.has_normals() {
            let n = cloud.normals[i];
            out.push_str(&format!(" {:?} {:?} {:?}", n.x, n.y, n.z));
        }
        if let Some(ids) = &cloud.patch_ids {
            out.push_str(&format!(" {}", ids[i]));
        }
        if let Some(ids) = &cloud.part_labels {
            out.push_str(&format!(" {}", ids[i]));
        }
        out.push('\n');
    }
    out
}

pub fn parse_point_cloud(text: &str, path: &Path) -> Result<PointCloud, IoError> {
    let parse_err = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut columns: Option<Vec<Column>> = None;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut patches = Vec::new();
    let mut parts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(spec) = comment.trim().strip_prefix("columns:") {
                if !points.is_empty() {
                    return Err(parse_err(lineno, "column header after data".into()));
                }
                let cols = spec
                    .split_whitespace()
                    .map(|n| column(n).ok_or_else(|| parse_err(lineno, format!("unknown column `{n}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                for need in [Column::X, Column::Y, Column::Z] {
                    if !cols.contains(&need) {
                        return Err(parse_err(lineno, "columns must include x, y and z".into()));
                    }
                }
                let has_n = [Column::Nx, Column::Ny, Column::Nz].map(|c| cols.contains(&c));
                if has_n.iter().any(|&h| h) && !has_n.iter().all(|&h| h) {
                    return Err(parse_err(lineno, "normals need all of nx, ny, nz".into()));
                }
                columns = Some(cols);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if columns.is_none() {
            columns = Some(
                default_columns(fields.len())
                    .ok_or_else(|| parse_err(lineno, format!("cannot infer columns from {} fields", fields.len())))?,
            );
        }
        let cols = columns.as_ref().expect("set above");
        if fields.len() != cols.len() {
            return Err(parse_err(lineno, format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let mut p = Vec3::zeros();
        let mut n = Vec3::zeros();
        let (mut patch, mut part) = (0u32, 0u32);
        for (c, f) in cols.iter().zip(&fields) {
            let float = || {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(lineno, format!("invalid number `{f}`")))
            };
            let int = || f.parse::<u32>().map_err(|_| parse_err(lineno, format!("invalid label `{f}`")));
            match c {
                Column::X => p.x = float()?,
                Column::Y => p.y = float()?,
                Column::Z => p.z = float()?,
                Column::Nx => n.x = float()?,
                Column::Ny => n.y = float()?,
                Column::Nz => n.z = float()?,
                Column::Patch => patch = int()?,
                Column::Part => part = int()?,
            }
        }
        points.push(p);
        normals.push(n);
        patches.push(patch);
        parts.push(part);
    }
    let cols = columns.unwrap_or_default();
    let mut cloud = PointCloud::new(points);
    if cols.contains(&Column::Nx) {
        cloud.normals = normals;
    }
    if cols.contains(&Column::Patch) {
        cloud.patch_ids = Some(patches);
    }
    if cols.contains(&Column::Part) {
        cloud.part_labels = Some(parts);
    }
    Ok(cloud)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_point_cloud(&text, path)
}

/// Reads a cloud and estimates normals when the file has none.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let cloud = read_point_cloud(path)?;
    if cloud.has_normals() {
        return Ok(cloud);
    }
    estimate_normals_pca(&cloud, DEFAULT_PCA_NEIGHBORS).map_err(|source| IoError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_atomic(path, format_point_cloud(cloud).as_bytes())
}

/// Named `f32` tensors: magic, version, count, then per tensor a
/// length-prefixed UTF-8 name, rows, cols and little-endian values.
pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>, IoError> {
    let bad = |m: &str| IoError::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut r = BufReader::new(bytes);
    let u32_at = |r: &mut BufReader<&[u8]>| -> Result<u32, IoError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated tensor file"))?;
        Ok(u32::from_le_bytes(b))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated tensor file"))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("not a tensor archive"));
    }
    let version = u32_at(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(bad(&format!("unsupported tensor archive version {version}")));
    }
    let count = u32_at(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = u32_at(&mut r)? as usize;
        let cols = u32_at(&mut r)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?];
        r.read_exact(&mut raw).map_err(|_| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.fill_buf().map(|b| !b.is_empty()).unwrap_or(false) {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), IoError> {
    write_atomic(path, &encode_tensors(tensors))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes, path)
}
