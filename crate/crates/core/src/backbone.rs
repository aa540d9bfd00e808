//! Image features: the `TMRF` feature-dump format for precomputed backbone
//! outputs, a small trainable strided-convolution backbone, and the learnable
//! channel projection followed by bilinear upsampling.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result, TmrError};
use crate::numerics::{
    bilinear_resize, conv3x3_backward_strided, conv3x3_forward_strided, leaky_relu,
    leaky_relu_backward, linear_forward, Grid3, LayerParams, Real,
};

const FEATURE_MAGIC: &[u8; 4] = b"TMRF";
const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Precomputed,
    TinyBackbone,
}

/// Feature grid plus the pixel stride of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub grid: Grid3<T>,
    /// Image pixels per feature cell along both axes.
    pub stride: f64,
    pub source: FeatureSource,
    pub scale_id: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(grid: Grid3<T>, stride: f64, source: FeatureSource) -> Result<Self> {
        if !(stride > 0.0 && stride.is_finite()) {
            return arg_err(format!("feature stride must be positive, got {stride}"));
        }
        if grid.height() == 0 || grid.width() == 0 {
            return arg_err("feature map must have at least one cell");
        }
        Ok(Self {
            grid,
            stride,
            source,
            scale_id: 0,
        })
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn depth(&self) -> usize {
        self.grid.depth()
    }

    /// Image extent covered by the grid, `(width, height)` in pixels.
    pub fn image_extent(&self) -> (f64, f64) {
        (
            self.width() as f64 * self.stride,
            self.height() as f64 * self.stride,
        )
    }

    /// Pixel position of a cell center.
    pub fn cell_center_px(&self, y: usize, x: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) * self.stride,
            (y as f64 + 0.5) * self.stride,
        )
    }

    /// Bilinear resize to `new_h x new_w` cells; the stride follows the
    /// change in resolution.
    pub fn resized(&self, new_h: usize, new_w: usize) -> Result<Self> {
        let grid = bilinear_resize(&self.grid, new_h, new_w)?;
        let stride = self.stride * self.height() as f64 / new_h as f64;
        Ok(Self {
            grid,
            stride,
            source: self.source,
            scale_id: self.scale_id,
        })
    }
}

/// Writes a `TMRF` feature dump (little-endian f32 payload).
pub fn save_features<T: Real>(fm: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(fm, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_features<T: Real, W: Write>(fm: &FeatureMap<T>, out: &mut W) -> Result<()> {
    let (h, w, d) = fm.grid.dims();
    out.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, h as u32, w as u32, d as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(fm.stride as f32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(h * w * d * 4);
    for v in fm.grid.values() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_features<T: Real>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    let path = path.as_ref();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_features(&mut file).map_err(|e| match e {
        TmrError::Format { reason, .. } => TmrError::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn format_err<T>(reason: impl Into<String>) -> Result<T> {
    Err(TmrError::Format {
        path: "<stream>".into(),
        reason: reason.into(),
    })
}

pub fn read_features<T: Real, R: Read>(input: &mut R) -> Result<FeatureMap<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return format_err(format!("bad magic {magic:?}, expected TMRF"));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next_u32(input)?;
    if version != FEATURE_VERSION {
        return format_err(format!("unsupported feature version {version}"));
    }
    let h = next_u32(input)? as usize;
    let w = next_u32(input)? as usize;
    let d = next_u32(input)? as usize;
    let stride = f32::from_bits(next_u32(input)?) as f64;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| TmrError::Format {
            path: "<stream>".into(),
            reason: "feature dims overflow".into(),
        })?;
    let mut payload = vec![0u8; n * 4];
    input.read_exact(&mut payload)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    FeatureMap::new(
        Grid3::from_vec(h, w, d, values)?,
        stride,
        FeatureSource::Precomputed,
    )
}

/// Where native features come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BackboneMode {
    /// Features are read from `TMRF` dumps with this many channels.
    Precomputed { native_depth: usize },
    /// Trainable stack of stride-2 `conv3x3 -> LeakyReLU` stages.
    Tiny { widths: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    /// Channels after the learnable projection.
    pub projection_out: usize,
    /// Target cells along the longer axis; `None` keeps the native resolution.
    pub upsample_to: Option<usize>,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Tiny {
                widths: vec![16, 32, 64],
            },
            projection_out: 512,
            upsample_to: None,
            input_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn native_depth(&self) -> usize {
        match &self.mode {
            BackboneMode::Precomputed { native_depth } => *native_depth,
            BackboneMode::Tiny { widths } => *widths.last().unwrap_or(&self.input_channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_out == 0 {
            return config_err("projection_out must be positive");
        }
        if let BackboneMode::Tiny { widths } = &self.mode {
            if widths.is_empty() || widths.contains(&0) {
                return config_err("tiny backbone needs at least one non-empty stage");
            }
        }
        if self.upsample_to == Some(0) {
            return config_err("upsample_to must be positive");
        }
        Ok(())
    }
}

/// Stride-2 conv stages; downsampling factor is `2^stages`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyBackbone<T> {
    pub layers: Vec<LayerParams<T>>,
    pub slope: T,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTape<T> {
    /// Input of every stage (the image first).
    pub inputs: Vec<Grid3<T>>,
    /// Pre-activation output of every stage.
    pub preacts: Vec<Grid3<T>>,
}

impl<T: Real> TinyBackbone<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        widths: &[usize],
        slope: T,
        rng: &mut R,
    ) -> Self {
        let mut c_in = in_channels;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut p = LayerParams::conv3x3(format!("backbone.conv{i}"), c_in, w);
                p.init_he(rng, 1.0);
                c_in = w;
                p
            })
            .collect();
        Self { layers, slope }
    }

    pub fn downsample(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn out_depth(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out())
    }

    pub fn forward(&self, image: &Grid3<T>) -> Result<(FeatureMap<T>, BackboneTape<T>)> {
        let f = self.downsample();
        if image.height() % f != 0 || image.width() % f != 0 {
            return arg_err(format!(
                "image {}x{} is not divisible by the backbone downsampling factor {f}",
                image.height(),
                image.width()
            ));
        }
        let mut tape = BackboneTape {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
        };
        let mut x = image.clone();
        for layer in &self.layers {
            let z = conv3x3_forward_strided(&x, layer, 2)?;
            let a = leaky_relu(&z, self.slope);
            tape.inputs.push(x);
            tape.preacts.push(z);
            x = a;
        }
        let fm = FeatureMap::new(x, f as f64, FeatureSource::TinyBackbone)?;
        Ok((fm, tape))
    }

    /// Backpropagates the gradient of the native feature map into the conv layers.
    pub fn backward(&mut self, tape: &BackboneTape<T>, grad_features: &Grid3<T>) -> Result<()> {
        let mut g = grad_features.clone();
        for i in (0..self.layers.len()).rev() {
            let gz = leaky_relu_backward(&tape.preacts[i], &g, self.slope)?;
            g = conv3x3_backward_strided(&tape.inputs[i], &mut self.layers[i], &gz, 2)?;
        }
        Ok(())
    }
}

/// Output resolution for a native `h x w` map given the configured target.
pub fn upsampled_dims(h: usize, w: usize, upsample_to: Option<usize>) -> (usize, usize) {
    match upsample_to {
        None => (h, w),
        Some(t) => {
            let longest = h.max(w);
            if longest == t {
                (h, w)
            } else {
                let scale = t as f64 / longest as f64;
                (
                    ((h as f64 * scale).round() as usize).max(1),
                    ((w as f64 * scale).round() as usize).max(1),
                )
            }
        }
    }
}

/// Learnable channel projection followed by bilinear upsampling.
///
/// Both steps are linear and commute; projecting first is cheaper when the
/// map is upsampled.
pub fn project_and_upsample<T: Real>(
    fm: &FeatureMap<T>,
    cfg: &BackboneConfig,
    proj: &LayerParams<T>,
) -> Result<FeatureMap<T>> {
    if proj.c_in() != fm.depth() || proj.c_out() != cfg.projection_out {
        return config_err(format!(
            "projection {} maps {} -> {}, features have depth {} and config wants {}",
            proj.name,
            proj.c_in(),
            proj.c_out(),
            fm.depth(),
            cfg.projection_out
        ));
    }
    let projected = FeatureMap {
        grid: linear_forward(&fm.grid, proj)?,
        ..fm.clone()
    };
    let (h, w) = upsampled_dims(fm.height(), fm.width(), cfg.upsample_to);
    if (h, w) == (fm.height(), fm.width()) {
        Ok(projected)
    } else {
        projected.resized(h, w)
    }
}
