//! A single trainable convolution + ReLU unit.
//!
//! Stands in for a truncated pre-trained network: it maps an image patch to
//! a rectified [`FeatureMap`] and can be trained through the bilinear layer.
//! Convolution is cross-correlation (no kernel flip).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureMap, MapGradient};
use crate::error::{Error, Result};

/// An `height x width x channels` image with entries in `[0, 1]`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Scales 8-bit samples to `[0, 1]`.
    pub fn from_u8(height: usize, width: usize, channels: usize, raw: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            raw.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Ingests raw 8-bit samples and resizes to `target_h x target_w` with
    /// nearest-neighbour sampling. Aspect ratio is not preserved.
    pub fn ingest(
        height: usize,
        width: usize,
        channels: usize,
        raw: &[u8],
        target_h: usize,
        target_w: usize,
    ) -> Result<Self> {
        Self::from_u8(height, width, channels, raw)?.resize_nearest(target_h, target_w)
    }

    pub fn resize_nearest(&self, target_h: usize, target_w: usize) -> Result<Self> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::Shape("resize target must be positive".into()));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(target_h * target_w * c);
        for y in 0..target_h {
            let sy = (y * self.height) / target_h;
            for x in 0..target_w {
                let sx = (x * self.width) / target_w;
                let base = (sy * self.width + sx) * c;
                out.extend_from_slice(&self.values[base..base + c]);
            }
        }
        Self::new(target_h, target_w, c, out)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn at(&self, y: isize, x: isize, c: usize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.values[(y as usize * self.width + x as usize) * self.channels + c]
        }
    }
}

/// Kernel is laid out `[ky][kx][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            kernel_size,
            in_channels,
            out_channels,
            stride,
            padding,
            kernel,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-mean Gaussian kernel with std `sqrt(2 / (k * k * c_in))`, zero bias.
    pub fn he_init(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        if kernel_size == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape("kernel dimensions must be positive".into()));
        }
        let std = (2.0 / (kernel_size * kernel_size * in_channels) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = kernel_size * kernel_size * in_channels * out_channels;
        let kernel = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::new(
            kernel_size,
            in_channels,
            out_channels,
            stride,
            padding,
            kernel,
            vec![0.0; out_channels],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape("kernel dimensions must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let n = self.kernel_size * self.kernel_size * self.in_channels * self.out_channels;
        if self.kernel.len() != n || self.bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "kernel needs {n} weights and {} biases, got {} and {}",
                self.out_channels,
                self.kernel.len(),
                self.bias.len()
            )));
        }
        if self.kernel.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite convolution parameter".into()));
        }
        Ok(())
    }

    fn kidx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel_size + kx) * self.in_channels + ci) * self.out_channels + co
    }

    /// Output spatial size for an `height x width` input.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let span = |n: usize| {
            let padded = n + 2 * self.padding;
            if padded < self.kernel_size {
                None
            } else {
                Some((padded - self.kernel_size) / self.stride + 1)
            }
        };
        match (span(height), span(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "{}x{} kernel does not fit a {height}x{width} input with padding {}",
                self.kernel_size, self.kernel_size, self.padding
            ))),
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Gradients of the loss with respect to the input and both parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_input(x: &ImagePatch, p: &ConvParams) -> Result<(usize, usize)> {
    p.validate()?;
    if x.channels != p.in_channels {
        return Err(Error::Shape(format!(
            "image has {} channels, kernel expects {}",
            x.channels, p.in_channels
        )));
    }
    p.output_dims(x.height, x.width)
}

/// Pre-activation responses, `out_h x out_w x out_channels`.
pub fn conv_preactivation(x: &ImagePatch, p: &ConvParams) -> Result<(usize, usize, Vec<f64>)> {
    let (oh, ow) = check_input(x, p)?;
    let co_n = p.out_channels;
    let mut out = vec![0.0; oh * ow * co_n];
    for oy in 0..oh {
        for ox in 0..ow {
            let cell = &mut out[(oy * ow + ox) * co_n..(oy * ow + ox + 1) * co_n];
            cell.copy_from_slice(&p.bias);
            for ky in 0..p.kernel_size {
                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                for kx in 0..p.kernel_size {
                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                    for ci in 0..p.in_channels {
                        let v = x.at(iy, ix, ci);
                        if v == 0.0 {
                            continue;
                        }
                        let base = p.kidx(ky, kx, ci, 0);
                        for (o, w) in cell.iter_mut().zip(&p.kernel[base..base + co_n]) {
                            *o += v * w;
                        }
                    }
                }
            }
        }
    }
    Ok((oh, ow, out))
}

/// Cross-correlation plus bias, then `max(0, .)`.
pub fn conv_forward(x: &ImagePatch, p: &ConvParams) -> Result<FeatureMap> {
    let (oh, ow, mut pre) = conv_preactivation(x, p)?;
    pre.iter_mut().for_each(|v| *v = v.max(0.0));
    FeatureMap::rectified(oh, ow, p.out_channels, pre)
}

pub fn conv_backward(x: &ImagePatch, p: &ConvParams, g_out: &MapGradient) -> Result<ConvGrads> {
    let (oh, ow, pre) = conv_preactivation(x, p)?;
    if (g_out.height, g_out.width, g_out.channels) != (oh, ow, p.out_channels)
        || g_out.values.len() != pre.len()
    {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}x{}, output is {oh}x{ow}x{}",
            g_out.height, g_out.width, g_out.channels, p.out_channels
        )));
    }
    let co_n = p.out_channels;
    let mut g_in = vec![0.0; x.values.len()];
    let mut g_k = vec![0.0; p.kernel.len()];
    let mut g_b = vec![0.0; co_n];
    let mut masked = vec![0.0; co_n];
    for oy in 0..oh {
        for ox in 0..ow {
            let base_o = (oy * ow + ox) * co_n;
            let mut any = false;
            for co in 0..co_n {
                masked[co] = if pre[base_o + co] > 0.0 {
                    g_out.values[base_o + co]
                } else {
                    0.0
                };
                any |= masked[co] != 0.0;
                g_b[co] += masked[co];
            }
            if !any {
                continue;
            }
            for ky in 0..p.kernel_size {
                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                if iy < 0 || iy as usize >= x.height {
                    continue;
                }
                for kx in 0..p.kernel_size {
                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                    if ix < 0 || ix as usize >= x.width {
                        continue;
                    }
                    let in_base = (iy as usize * x.width + ix as usize) * x.channels;
                    for ci in 0..p.in_channels {
                        let v = x.values[in_base + ci];
                        let kb = p.kidx(ky, kx, ci, 0);
                        let mut acc = 0.0;
                        for co in 0..co_n {
                            g_k[kb + co] += v * masked[co];
                            acc += p.kernel[kb + co] * masked[co];
                        }
                        g_in[in_base + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        kernel: g_k,
        bias: g_b,
    })
}
