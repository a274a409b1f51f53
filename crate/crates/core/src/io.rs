//! File formats: PFM for depth, 8-bit PNG for images, versioned JSON for
//! everything else.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{DepthMap, ImageBuffer, ScalarMap};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PFM: {reason}")]
    Pfm { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn pfm(path: &Path, reason: impl Into<String>) -> Self {
        Self::Pfm {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Single-channel little-endian PFM, rows stored bottom-up. Values are
/// written as `f32`.
pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(32 + map.len() * 4);
    write!(buf, "Pf\n{} {}\n-1.0\n", map.width, map.height).expect("write to Vec");
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            buf.extend_from_slice(&(map.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| IoError::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    // Three whitespace-terminated header tokens after the magic line.
    let mut line = String::new();
    while header.len() < 4 {
        line.clear();
        if r.read_line(&mut line).map_err(|e| IoError::io(path, e))? == 0 {
            return Err(IoError::pfm(path, "truncated header"));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "Pf" {
        return Err(IoError::pfm(
            path,
            format!("expected single-channel magic 'Pf', found '{}'", header[0]),
        ));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| IoError::pfm(path, format!("bad {what} '{s}'")))
    };
    let width = parse(&header[1], "width")?;
    let height = parse(&header[2], "height")?;
    let scale: f64 = header[3]
        .parse()
        .map_err(|_| IoError::pfm(path, format!("bad scale '{}'", header[3])))?;
    if scale == 0.0 {
        return Err(IoError::pfm(path, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| IoError::io(path, e))?;
    if bytes.len() != width * height * 4 {
        return Err(IoError::pfm(
            path,
            format!("expected {} data bytes, found {}", width * height * 4, bytes.len()),
        ));
    }
    let mut map = ScalarMap::zeros(width, height);
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (k % width, k / width);
        map.set(x, height - 1 - row, v as f64);
    }
    Ok(map)
}

/// 8-bit RGB PNG. Values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<(), IoError> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_png(path: &Path) -> Result<ImageBuffer, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImageBuffer::from_vec(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    ))
}

/// Image as it survives an 8-bit round trip.
pub fn quantize_image(img: &ImageBuffer) -> ImageBuffer {
    img.map(|v| quantize_u8(v) as f64 / 255.0)
}

/// Depth as it survives a PFM round trip.
pub fn quantize_depth(d: &DepthMap) -> DepthMap {
    d.map(|v| v as f32 as f64)
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

/// Parse a versioned JSON document. Errors carry the line and column and,
/// for missing or unknown fields, the field name.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str, expected_version: u32) -> Result<T, IoError> {
    let schema = |e: serde_json::Error| IoError::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(schema)?;
    match probe.schema_version {
        None => {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                line: 1,
                column: 1,
                message: "missing field `schema_version`".into(),
            })
        }
        Some(v) if v != expected_version => {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                line: 1,
                column: 1,
                message: format!("unsupported schema_version {v} (expected {expected_version})"),
            })
        }
        Some(_) => {}
    }
    serde_json::from_str(text).map_err(schema)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, expected_version: u32) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_json(path, &text, expected_version)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Record of one command invocation: enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// Full command line, program name excluded.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_secs: u64,
    pub elapsed_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_owned(),
            argv: Vec::new(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix_secs: started,
            elapsed_secs: 0.0,
        }
    }
}
