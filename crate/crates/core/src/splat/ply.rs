//! Splat-viewer PLY export and import. The layout is the de-facto viewer
//! standard: binary little-endian float32 vertices carrying position,
//! (zero) normals, zeroth-order color harmonics, logit opacity, log
//! scales, and a w-first quaternion. Colors are stored as
//! (c - 0.5) / 0.2820948 so stock viewers shade correctly.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::decoder::GaussianSet;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::DISK_THICKNESS;

const SH0: f64 = 0.2820948;
const PROPS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

fn logit(a: f64) -> f64 {
    (a / (1.0 - a)).ln()
}

/// Writes the set in viewer layout. Disk-mode sets store the fixed third
/// thickness, so they reload as volumetric sets.
pub fn write_ply<T: Real>(gs: &GaussianSet<T>, path: &Path) -> Result<()> {
    gs.validate()?;
    let k = gs.count();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {k}\n"));
    for p in PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let get = |t: &Tensor<T>, i: usize, cols: usize, c: usize| t.data()[i * cols + c].to_f64();
    let mut row = [0f32; 17];
    for i in 0..k {
        for c in 0..3 {
            row[c] = get(&gs.mu, i, 3, c) as f32;
            row[3 + c] = 0.0;
            row[6 + c] = ((get(&gs.color, i, 3, c) - 0.5) / SH0) as f32;
        }
        row[9] = logit(get(&gs.opacity, i, 1, 0)) as f32;
        for c in 0..3 {
            let s = if gs.disk {
                if c < 2 {
                    get(&gs.scale, i, 2, c)
                } else {
                    DISK_THICKNESS
                }
            } else {
                get(&gs.scale, i, 3, c)
            };
            row[10 + c] = s.ln() as f32;
        }
        for c in 0..4 {
            row[13 + c] = get(&gs.rot, i, 4, c) as f32;
        }
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a viewer-layout PLY back into a volumetric GaussianSet.
pub fn read_ply<T: Real>(path: &Path) -> Result<GaussianSet<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::format("missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("non-utf8 header"))?;

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format("not a ply file"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format("bad vertex count"))?,
            );
        } else if let Some(rest) = line.strip_prefix("property ") {
            let mut it = rest.split_whitespace();
            if it.next() != Some("float") {
                return Err(Error::format(format!("unsupported property type: {rest}")));
            }
            props.push(it.next().unwrap_or("").to_string());
        } else if line == "format binary_little_endian 1.0"
            || line.starts_with("comment")
            || line == "end_header"
        {
            continue;
        } else if line.starts_with("element") {
            return Err(Error::format(format!("unsupported element: {line}")));
        }
    }
    let k = count.ok_or_else(|| Error::format("no vertex element"))?;
    let slot = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::format(format!("missing property {name}")))
    };
    let idx: Vec<usize> = PROPS.iter().map(|p| slot(p)).collect::<Result<_>>()?;
    let stride = props.len();

    let body = &bytes[header_end..];
    if body.len() != k * stride * 4 {
        return Err(Error::format(format!(
            "body has {} bytes, want {}",
            body.len(),
            k * stride * 4
        )));
    }
    let mut mu = Vec::with_capacity(k * 3);
    let mut scale = Vec::with_capacity(k * 3);
    let mut color = Vec::with_capacity(k * 3);
    let mut opacity = Vec::with_capacity(k);
    let mut rot = Vec::with_capacity(k * 4);
    let field = |i: usize, p: usize| -> f64 {
        let o = (i * stride + idx[p]) * 4;
        f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64
    };
    for i in 0..k {
        for c in 0..3 {
            mu.push(T::from_f64(field(i, c).clamp(-1.0, 1.0)));
            color.push(T::from_f64((field(i, 6 + c) * SH0 + 0.5).clamp(0.0, 1.0)));
            scale.push(T::from_f64(field(i, 10 + c).exp()));
        }
        let a = 1.0 / (1.0 + (-field(i, 9)).exp());
        opacity.push(T::from_f64(a.clamp(1e-7, 1.0 - 1e-7)));
        let q = [field(i, 13), field(i, 14), field(i, 15), field(i, 16)];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-9 {
            return Err(Error::format(format!("vertex {i} has a zero quaternion")));
        }
        rot.extend(q.iter().map(|v| T::from_f64(v / n)));
    }
    Ok(GaussianSet {
        mu: Tensor::from_vec(vec![k, 3], mu),
        scale: Tensor::from_vec(vec![k, 3], scale),
        color: Tensor::from_vec(vec![k, 3], color),
        opacity: Tensor::from_vec(vec![k, 1], opacity),
        rot: Tensor::from_vec(vec![k, 4], rot),
        disk: false,
    })
}
