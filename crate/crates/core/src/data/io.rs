//! IDX (big-endian, unsigned-byte payload) and label-first CSV files.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IDX_U8: u8 = 0x08;

/// Raw contents of an IDX file with an unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(format: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_idx(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(format_err("IDX", path, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err("IDX", path, format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != IDX_U8 {
        return Err(format_err(
            "IDX",
            path,
            format!("unsupported element type 0x{:02x} (only unsigned byte)", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err("IDX", path, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err("IDX", path, "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != expected {
        return Err(format_err(
            "IDX",
            path,
            format!("dims {dims:?} need {expected} payload bytes, found {payload}"),
        ));
    }
    Ok(IdxImages {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Loads an image IDX file and its label IDX file. Pixel bytes are scaled
/// to `[0, 1]`; every dimension after the first is flattened into the
/// feature vector. `n_classes` defaults to `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(format_err("IDX", labels, format!("label file must be 1-D, got dims {:?}", lab.dims)));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(format_err(
            "IDX",
            labels,
            format!("{} labels for {n} images", lab.dims[0]),
        ));
    }
    let dim: usize = img.dims[1..].iter().product::<usize>().max(1);
    let labels_v: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let c = n_classes.unwrap_or_else(|| labels_v.iter().max().map_or(2, |m| (m + 1).max(2)));
    let inputs = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(inputs, labels_v, dim, c).map_err(|e| format_err("IDX", images, e.to_string()))
}

/// Writes an image IDX file from a dataset whose inputs are multiples of
/// 1/255 in `[0, 1]`.
pub fn write_idx_images(path: &Path, data: &Dataset, dims: &[usize]) -> Result<()> {
    let mut full = vec![data.len()];
    full.extend_from_slice(dims);
    if dims.iter().product::<usize>() != data.dim() {
        return Err(Error::Shape(format!("dims {dims:?} do not match input dim {}", data.dim())));
    }
    let mut bytes = Vec::with_capacity(data.inputs().len());
    for &v in data.inputs() {
        let b = (v * 255.0).round();
        if !(0.0..=255.0).contains(&b) {
            return Err(Error::InvalidArgument(format!("value {v} is not a byte intensity")));
        }
        bytes.push(b as u8);
    }
    fs::write(path, encode_idx(&full, &bytes)).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, data: &Dataset) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len());
    for &y in data.labels() {
        let b = u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} does not fit a byte")))?;
        bytes.push(b);
    }
    fs::write(path, encode_idx(&[data.len()], &bytes)).map_err(|e| Error::io(path, e))
}

/// Loads a headerless CSV whose first column is the integer label and
/// remaining columns are features. Every row must have the same width.
pub fn load_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: usize = label_field.parse().map_err(|_| {
            format_err("CSV", path, format!("line {}: label {label_field:?} is not a nonnegative integer", lineno + 1))
        })?;
        let mut count = 0;
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err("CSV", path, format!("line {}: {f:?} is not a number", lineno + 1)))?;
            inputs.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(format_err(
                    "CSV",
                    path,
                    format!("line {} has {count} features, expected {w}", lineno + 1),
                ))
            }
            _ => {}
        }
        labels.push(label);
    }
    let dim = width.ok_or_else(|| format_err("CSV", path, "no rows"))?;
    if dim == 0 {
        return Err(format_err("CSV", path, "rows have no feature columns"));
    }
    let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(inputs, labels, dim, c).map_err(|e| format_err("CSV", path, e.to_string()))
}

/// Writes the label-first CSV form read by [`load_csv`], using the shortest
/// round-tripping decimal representation of every value.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for i in 0..data.len() {
        out.push_str(&data.labels()[i].to_string());
        for v in data.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
