//! File formats: PFM rasters (grayscale depth, 3-channel normals), binary
//! PGM label/id rasters, and the JSON documents for decompositions, cameras,
//! loss weights, and fit reports.
//!
//! PFM follows the usual convention: `Pf`/`PF` magic, a dimensions line,
//! a scale line whose sign encodes endianness (negative = little-endian),
//! then rows bottom-to-top. Parse errors name the byte offset.

use std::fs;
use std::path::Path;

use crate::geometry::{ConvexPrimitive, Decomposition, Mat3, SceneTransform, Vec3};
use crate::losses::LossWeights;
use crate::metrics::FitReport;
use crate::render::{IdImage, NormalImage};
use crate::sampling::{Camera, DepthImage, SegImage, NUM_SEG_LABELS};
use crate::{Error, Result};

struct Scanner<'a> {
    data: &'a [u8],
    pos: usize,
    allow_comments: bool,
}

impl<'a> Scanner<'a> {
    fn new(data: &'a [u8], allow_comments: bool) -> Self {
        Self {
            data,
            pos: 0,
            allow_comments,
        }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    /// Next whitespace-delimited token; skips `#` comment lines when
    /// enabled.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.allow_comments && self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.data.len() {
            return self.fail("unexpected end of header");
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| Error::Parse {
            offset: start,
            message: "header token is not utf-8".into(),
        })
    }

    /// Consume the single whitespace byte separating the header from the
    /// binary body.
    fn binary_body(&mut self, needed: usize) -> Result<&'a [u8]> {
        if self.pos >= self.data.len() || !self.data[self.pos].is_ascii_whitespace() {
            return self.fail("expected whitespace before binary data");
        }
        self.pos += 1;
        let have = self.data.len() - self.pos;
        if have < needed {
            self.pos = self.data.len();
            return self.fail(format!("truncated body: need {needed} bytes, have {have}"));
        }
        let body = &self.data[self.pos..self.pos + needed];
        self.pos += needed;
        Ok(body)
    }

    fn parse_dim(&mut self) -> Result<u32> {
        let start_pos = self.pos;
        let tok = self.token()?;
        match tok.parse::<u32>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Parse {
                offset: start_pos,
                message: format!("bad dimension {tok:?}"),
            }),
        }
    }
}

fn pfm_floats(body: &[u8], little_endian: bool) -> Vec<f32> {
    body.chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect()
}

fn read_pfm(data: &[u8], expect_color: bool) -> Result<(u32, u32, Vec<f32>)> {
    let mut sc = Scanner::new(data, false);
    let magic = sc.token()?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad PFM magic {other:?}"),
            })
        }
    };
    if expect_color != (channels == 3) {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "expected {} PFM, found {magic:?}",
                if expect_color { "color (PF)" } else { "grayscale (Pf)" }
            ),
        });
    }
    let width = sc.parse_dim()?;
    let height = sc.parse_dim()?;
    let scale_pos = sc.pos;
    let scale: f64 = {
        let tok = sc.token()?;
        tok.parse().map_err(|_| Error::Parse {
            offset: scale_pos,
            message: format!("bad scale {tok:?}"),
        })?
    };
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse {
            offset: scale_pos,
            message: format!("scale {scale} must be nonzero"),
        });
    }
    let n = width as usize * height as usize * channels;
    let body = sc.binary_body(n * 4)?;
    let bottom_up = pfm_floats(body, scale < 0.0);
    // Flip to top-down row order.
    let row = width as usize * channels;
    let mut values = Vec::with_capacity(n);
    for v in (0..height as usize).rev() {
        values.extend_from_slice(&bottom_up[v * row..(v + 1) * row]);
    }
    Ok((width, height, values))
}

fn write_pfm(width: u32, height: u32, channels: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n-1.0\n", if channels == 3 { "PF" } else { "Pf" }, width, height)
        .into_bytes();
    let row = width as usize * channels;
    for v in (0..height as usize).rev() {
        for x in &values[v * row..(v + 1) * row] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Read a grayscale PFM depth raster (meters).
pub fn read_pfm_gray(path: &Path) -> Result<DepthImage> {
    let data = fs::read(path)?;
    let (w, h, values) = read_pfm(&data, false)?;
    DepthImage::new(w, h, values)
}

pub fn write_pfm_gray(path: &Path, depth: &DepthImage) -> Result<()> {
    fs::write(
        path,
        write_pfm(depth.width, depth.height, 1, depth.values()),
    )?;
    Ok(())
}

/// Read a 3-channel PFM raster as a normal image.
pub fn read_pfm_color(path: &Path) -> Result<NormalImage> {
    let data = fs::read(path)?;
    let (w, h, values) = read_pfm(&data, true)?;
    let pixels: Vec<[f64; 3]> = values
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    NormalImage::new(w, h, pixels)
}

pub fn write_pfm_color(path: &Path, normals: &NormalImage) -> Result<()> {
    let mut values = Vec::with_capacity(normals.data().len() * 3);
    for px in normals.data() {
        values.extend_from_slice(&[px[0] as f32, px[1] as f32, px[2] as f32]);
    }
    fs::write(path, write_pfm(normals.width, normals.height, 3, &values))?;
    Ok(())
}

fn read_pgm(data: &[u8]) -> Result<(u32, u32, Vec<u8>, usize)> {
    let mut sc = Scanner::new(data, true);
    let magic = sc.token()?;
    if magic != "P5" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad PGM magic {magic:?}"),
        });
    }
    let width = sc.parse_dim()?;
    let height = sc.parse_dim()?;
    let maxval_pos = sc.pos;
    let maxval = sc.token()?;
    if maxval != "255" {
        return Err(Error::Parse {
            offset: maxval_pos,
            message: format!("maxval {maxval:?} unsupported, need 255"),
        });
    }
    let n = width as usize * height as usize;
    let body_start = sc.pos + 1;
    let body = sc.binary_body(n)?;
    Ok((width, height, body.to_vec(), body_start))
}

fn write_pgm_bytes(width: u32, height: u32, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Read a segmentation PGM; labels above 40 are rejected with the byte
/// offset of the offending pixel.
pub fn read_seg_pgm(path: &Path) -> Result<SegImage> {
    let data = fs::read(path)?;
    let (w, h, labels, body_start) = read_pgm(&data)?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_SEG_LABELS) {
        return Err(Error::Parse {
            offset: body_start + i,
            message: format!("segmentation label {} outside 0..=40", labels[i]),
        });
    }
    SegImage::new(w, h, labels)
}

pub fn write_seg_pgm(path: &Path, seg: &SegImage) -> Result<()> {
    fs::write(path, write_pgm_bytes(seg.width, seg.height, seg.labels()))?;
    Ok(())
}

/// Read a part-id PGM (any byte value; 255 is the miss sentinel).
pub fn read_ids_pgm(path: &Path) -> Result<IdImage> {
    let data = fs::read(path)?;
    let (w, h, ids, _) = read_pgm(&data)?;
    IdImage::new(w, h, ids)
}

pub fn write_ids_pgm(path: &Path, ids: &IdImage) -> Result<()> {
    fs::write(path, write_pgm_bytes(ids.width, ids.height, ids.data()))?;
    Ok(())
}

/// On-disk schema of a decomposition. Version 1.
#[derive(serde::Serialize, serde::Deserialize)]
struct DecompositionFile {
    version: u32,
    normalization: TransformFile,
    sigma: f64,
    manhattan: [[f64; 3]; 3],
    convexes: Vec<ConvexFile>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TransformFile {
    scale: [f64; 3],
    offset: [f64; 3],
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ConvexFile {
    translation: [f64; 3],
    /// One row per axis.
    axes: [[f64; 3]; 3],
    offsets: [f64; 6],
    smoothness: f64,
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&Decomposition> for DecompositionFile {
    fn from(d: &Decomposition) -> Self {
        Self {
            version: 1,
            normalization: TransformFile {
                scale: arr3(&d.normalization.scale),
                offset: arr3(&d.normalization.offset),
            },
            sigma: d.sigma,
            manhattan: std::array::from_fn(|r| std::array::from_fn(|c| d.manhattan[(r, c)])),
            convexes: d
                .convexes
                .iter()
                .map(|c| ConvexFile {
                    translation: arr3(&c.translation),
                    axes: std::array::from_fn(|i| arr3(&c.axes[i])),
                    offsets: c.offsets,
                    smoothness: c.smoothness,
                })
                .collect(),
        }
    }
}

impl TryFrom<DecompositionFile> for Decomposition {
    type Error = Error;

    fn try_from(f: DecompositionFile) -> Result<Decomposition> {
        if f.version != 1 {
            return Err(Error::Input(format!(
                "unsupported decomposition version {}",
                f.version
            )));
        }
        let d = Decomposition {
            convexes: f
                .convexes
                .into_iter()
                .map(|c| ConvexPrimitive {
                    axes: std::array::from_fn(|i| vec3(c.axes[i])),
                    offsets: c.offsets,
                    translation: vec3(c.translation),
                    smoothness: c.smoothness,
                })
                .collect(),
            manhattan: Mat3::from_fn(|r, c| f.manhattan[r][c]),
            normalization: SceneTransform {
                scale: vec3(f.normalization.scale),
                offset: vec3(f.normalization.offset),
            },
            sigma: f.sigma,
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn read_decomposition(path: &Path) -> Result<Decomposition> {
    let data = fs::read_to_string(path)?;
    let file: DecompositionFile = serde_json::from_str(&data)?;
    file.try_into()
}

pub fn write_decomposition(path: &Path, decomp: &Decomposition) -> Result<()> {
    let file = DecompositionFile::from(decomp);
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let data = fs::read_to_string(path)?;
    let cam: Camera = serde_json::from_str(&data)?;
    cam.validate()?;
    Ok(cam)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cam)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<LossWeights> {
    let data = fs::read_to_string(path)?;
    let w: LossWeights = serde_json::from_str(&data)?;
    w.validate()?;
    Ok(w)
}

pub fn write_report(path: &Path, report: &FitReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
