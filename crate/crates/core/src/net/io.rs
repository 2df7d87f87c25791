//! Model file: 8-byte magic, one text header line listing every parameter
//! tensor and the total count, then the parameters as little-endian `f32`
//! in layer order (weight then bias), row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{param_name, Architecture, DescriptorNet};

pub const MODEL_MAGIC: &[u8; 8] = b"WLRNNET1";
const MAX_HEADER: usize = 4096;

fn header_line(arch: &Architecture) -> String {
    let mut parts: Vec<String> = arch
        .param_shapes()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dims: Vec<String> = s.iter().map(usize::to_string).collect();
            format!("{} {}", param_name(i), dims.join("x"))
        })
        .collect();
    parts.push(format!("total {}", arch.param_count()));
    parts.join(";") + "\n"
}

/// Writes the standard-format model file. Parameters are narrowed to `f32`.
pub fn save_net(net: &DescriptorNet, path: impl AsRef<Path>) -> Result<()> {
    let header = header_line(net.architecture());
    let mut bytes = Vec::with_capacity(8 + header.len() + 4 * net.param_count());
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(header.as_bytes());
    for p in net.params() {
        for &v in p.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

fn parse_header(text: &str, arch: &Architecture) -> Result<()> {
    let expected = arch.param_shapes();
    let mut shapes = Vec::new();
    let mut total = None;
    for entry in text.split(';') {
        let (name, value) = entry.split_once(' ').ok_or_else(|| Error::Format {
            offset: 8,
            message: format!("header entry {entry:?} has no value"),
        })?;
        if name == "total" {
            total = Some(value.parse::<usize>().map_err(|_| Error::Format {
                offset: 8,
                message: format!("bad total {value:?}"),
            })?);
            continue;
        }
        let dims = value
            .split('x')
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format {
                offset: 8,
                message: format!("bad shape {value:?} for {name}"),
            })?;
        shapes.push((name.to_string(), dims));
    }
    let Some(total) = total else {
        return format_err(8, "header lacks a total parameter count");
    };
    if total != arch.param_count() {
        return Err(Error::Shape(format!(
            "model declares {total} parameters, expected {}",
            arch.param_count()
        )));
    }
    if shapes.len() != expected.len() {
        return Err(Error::Shape(format!(
            "model lists {} parameter tensors, expected {}",
            shapes.len(),
            expected.len()
        )));
    }
    for (i, ((name, dims), want)) in shapes.iter().zip(&expected).enumerate() {
        if *name != param_name(i) || dims != want {
            return Err(Error::Shape(format!(
                "header entry {name} {dims:?} does not match {} {want:?}",
                param_name(i)
            )));
        }
    }
    let declared: usize = shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if declared != total {
        return Err(Error::Shape(format!(
            "layer shapes sum to {declared}, header total is {total}"
        )));
    }
    Ok(())
}

/// Reads a standard-architecture model file, rejecting anything that does
/// not describe exactly the 185,504-parameter network.
pub fn load_net(path: impl AsRef<Path>) -> Result<DescriptorNet> {
    let bytes = fs::read(path)?;
    let arch = Architecture::STANDARD;
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..8] != MODEL_MAGIC {
        return format_err(0, "missing WLRNNET1 magic");
    }
    let search_end = bytes.len().min(8 + MAX_HEADER);
    let Some(nl) = bytes[8..search_end].iter().position(|&b| b == b'\n') else {
        return format_err(8, "header line is unterminated");
    };
    let header = std::str::from_utf8(&bytes[8..8 + nl]).map_err(|_| Error::Format {
        offset: 8,
        message: "header is not UTF-8".into(),
    })?;
    parse_header(header, &arch)?;

    let payload_start = 8 + nl + 1;
    let payload = &bytes[payload_start..];
    let expected_len = 4 * arch.param_count();
    if payload.len() != expected_len {
        return format_err(
            payload_start + payload.len().min(expected_len),
            format!("parameter payload is {} bytes, expected {expected_len}", payload.len()),
        );
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut params = Vec::new();
    for (i, shape) in arch.param_shapes().iter().enumerate() {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        let t = Tensor::new(shape, data)?;
        t.check_finite(&param_name(i))?;
        params.push(t);
    }
    DescriptorNet::from_params(arch, params)
}
