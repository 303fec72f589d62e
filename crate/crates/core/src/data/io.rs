//! XYZ text and little-endian binary PLY point files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ply,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Xyz => "xyz",
            Format::Ply => "ply",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("xyz") => Ok(Format::Xyz),
            Some(e) if e.eq_ignore_ascii_case("ply") => Ok(Format::Ply),
            _ => Err(Error::contract(format!(
                "{}: unknown point file extension (expected .xyz or .ply)",
                path.display()
            ))),
        }
    }
}

/// One `x y z` line per point, 17 significant digits.
pub fn to_xyz(points: &[Point<f64>]) -> String {
    let mut s = String::with_capacity(points.len() * 72);
    for p in points {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    s
}

/// Blank lines and `#` comments are skipped; an input without points is an
/// error.
pub fn parse_xyz(text: &str, source_name: &str) -> Result<PointCloud<f64>> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(
                i + 1,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        for (v, f) in p.iter_mut().zip(&fields) {
            *v = f
                .parse()
                .map_err(|_| err(i + 1, format!("invalid number `{f}`")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("non-finite coordinate `{f}`")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(0, "no points".into()));
    }
    PointCloud::new(points)
}

pub fn to_ply(points: &[Point<f64>]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 24);
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads the layout written by [`to_ply`]; `float64` is accepted as a
/// synonym for `double`.
pub fn parse_ply(bytes: &[u8], source_name: &str) -> Result<PointCloud<f64>> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        *pos += end + 1;
        Some(
            String::from_utf8_lossy(&rest[..end])
                .trim_end_matches('\r')
                .to_string(),
        )
    };

    let mut lines = Vec::new();
    loop {
        let line = next_line(&mut pos)
            .ok_or_else(|| err(lines.len() + 1, "unterminated header".into()))?;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines[0] != "ply" {
        return Err(err(1, "missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut format_seen = false;
    for (i, line) in lines.iter().enumerate().skip(1) {
        let n = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(err(n, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", "vertex", c] => {
                if count.is_some() {
                    return Err(err(n, "duplicate vertex element".into()));
                }
                count = Some(
                    c.parse::<usize>()
                        .map_err(|_| err(n, format!("invalid vertex count `{c}`")))?,
                );
            }
            ["element", name, ..] => return Err(err(n, format!("unsupported element `{name}`"))),
            ["property", ty, name] => {
                if *ty != "double" && *ty != "float64" {
                    return Err(err(
                        n,
                        format!("property `{name}` has type `{ty}`, expected double"),
                    ));
                }
                props.push(name.to_string());
            }
            _ => return Err(err(n, format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(err(2, "missing `format binary_little_endian 1.0`".into()));
    }
    let count = count.ok_or_else(|| err(lines.len(), "missing `element vertex`".into()))?;
    if props != ["x", "y", "z"] {
        return Err(err(
            lines.len(),
            format!("expected properties x, y, z, found {props:?}"),
        ));
    }
    if count == 0 {
        return Err(err(lines.len(), "no points".into()));
    }
    let body = &bytes[pos..];
    if body.len() != count * 24 {
        return Err(err(
            lines.len(),
            format!(
                "vertex data holds {} bytes, expected {}",
                body.len(),
                count * 24
            ),
        ));
    }
    let points: Vec<Point<f64>> = body
        .chunks_exact(24)
        .map(|c| {
            let v = |k: usize| f64::from_le_bytes(c[8 * k..8 * k + 8].try_into().expect("8 bytes"));
            [v(0), v(1), v(2)]
        })
        .collect();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(err(lines.len(), "non-finite coordinate".into()));
    }
    PointCloud::new(points)
}

/// Format chosen by extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud<f64>> {
    let name = path.display().to_string();
    match Format::from_path(path)? {
        Format::Xyz => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_xyz(&text, &name)
        }
        Format::Ply => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_ply(&bytes, &name)
        }
    }
}

pub fn write_cloud(path: &Path, points: &[Point<f64>]) -> Result<()> {
    let bytes = match Format::from_path(path)? {
        Format::Xyz => to_xyz(points).into_bytes(),
        Format::Ply => to_ply(points),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
