//! Bilinear encoding of convolutional feature maps.
//!
//! A descriptor is built in four steps: the outer products of the two
//! maps' per-location feature vectors are summed over all locations, the
//! resulting `C_A x C_B` matrix is flattened row-major, every entry goes
//! through a signed square root, and the vector is scaled to unit L2 norm.
//! Each step has an exact backward pass so the whole chain can be trained.
//!
//! Pooling sums over locations (it does not average), so the raw matrix
//! scales with the number of locations. Accumulation is done in `f64`;
//! finished descriptors are stored as `f32`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floor on `|x|` in the signed square root derivative,
/// `1 / (2 sqrt(max(|x|, eps)))`, so a zero entry yields a finite gradient.
/// Entries with `|x| >= eps` get the exact derivative. The forward pass is
/// not modified.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;

/// An `height x width x channels` grid of activations, stored location-major
/// with the channel index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    rectified: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        Self::build(height, width, channels, values, false)
    }

    /// Like [`FeatureMap::new`] but also requires every entry to be `>= 0`,
    /// as produced by a rectified layer.
    pub fn rectified(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::build(height, width, channels, values, true)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        let len = checked_volume(height, width, channels)?;
        Self::build(height, width, channels, vec![0.0; len], true)
    }

    fn build(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
        rectified: bool,
    ) -> Result<Self> {
        let len = checked_volume(height, width, channels)?;
        if values.len() != len {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} map needs {len} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation at index {pos}")));
        }
        if rectified {
            if let Some(pos) = values.iter().position(|&v| v < 0.0) {
                return Err(Error::Numeric(format!(
                    "negative activation {} at index {pos} in a rectified map",
                    values[pos]
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            rectified,
        })
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

    pub fn is_rectified(&self) -> bool {
        self.rectified
    }

    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Feature vector at location `l` (row-major over `height x width`).
    pub fn location(&self, l: usize) -> &[f64] {
        &self.values[l * self.channels..(l + 1) * self.channels]
    }

    pub fn locations(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels)
    }

    /// Rounds every value to the nearest `f32`, the precision of feature-map files.
    pub fn quantized_f32(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

fn checked_volume(height: usize, width: usize, channels: usize) -> Result<usize> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Shape(format!(
            "map dimensions must be positive, got {height}x{width}x{channels}"
        )));
    }
    height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Bounds(format!("{height}x{width}x{channels} overflows")))
}

/// Gradient with respect to a [`FeatureMap`]; same layout, no sign constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradient {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl MapGradient {
    pub fn zeros_like(map: &FeatureMap) -> Self {
        Self {
            height: map.height,
            width: map.width,
            channels: map.channels,
            values: vec![0.0; map.values.len()],
        }
    }

    /// Elementwise sum, used when both bilinear branches share one extractor.
    pub fn add(&self, other: &MapGradient) -> Result<MapGradient> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return Err(Error::Shape("cannot add gradients of different shapes".into()));
        }
        Ok(MapGradient {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        })
    }
}

/// Pooled outer-product matrix, `rows = C_A`, `cols = C_B`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl BilinearMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major flattening: entry `(i, j)` lands at `i * cols + j`.
    pub fn vectorize(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn transpose(&self) -> BilinearMatrix {
        let mut out = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        BilinearMatrix {
            rows: self.cols,
            cols: self.rows,
            values: out,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| self.values[i * self.cols + j] == self.values[j * self.cols + i]))
    }

    /// `x^T M y` for the square case with `y = x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.rows);
        assert_eq!(x.len(), self.cols);
        self.values
            .chunks_exact(self.cols)
            .zip(x)
            .map(|(row, xi)| xi * row.iter().zip(x).map(|(m, xj)| m * xj).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorStage {
    Raw,
    SqrtNormalized,
    L2Normalized,
}

/// A vectorized pooled matrix, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearDescriptor {
    pub values: Vec<f32>,
    pub stage: DescriptorStage,
}

impl BilinearDescriptor {
    pub fn new(values: Vec<f32>, stage: DescriptorStage) -> Self {
        Self { values, stage }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &BilinearDescriptor) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "descriptor dims differ: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }
}

fn check_spatial(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "spatial dims differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `result[i][j] = sum_l a_l[i] * b_l[j]`.
pub fn bilinear_pool(a: &FeatureMap, b: &FeatureMap) -> Result<BilinearMatrix> {
    check_spatial(a, b)?;
    let (rows, cols) = (a.channels, b.channels);
    let mut out = vec![0.0f64; rows * cols];
    for (al, bl) in a.locations().zip(b.locations()) {
        for (i, &ai) in al.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut out[i * cols..(i + 1) * cols];
            for (o, &bj) in row.iter_mut().zip(bl) {
                *o += ai * bj;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pooled matrix overflowed".into()));
    }
    Ok(BilinearMatrix {
        rows,
        cols,
        values: out,
    })
}

/// Gradients of [`bilinear_pool`]: `g_a[l] = G b_l`, `g_b[l] = G^T a_l`.
///
/// When both inputs come from one shared extractor the caller adds the two
/// results, which equals `(G + G^T) a_l` per location.
pub fn bilinear_pool_backward(
    a: &FeatureMap,
    b: &FeatureMap,
    g_out: &BilinearMatrix,
) -> Result<(MapGradient, MapGradient)> {
    check_spatial(a, b)?;
    if g_out.rows != a.channels || g_out.cols != b.channels {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            g_out.rows, g_out.cols, a.channels, b.channels
        )));
    }
    let mut g_a = MapGradient::zeros_like(a);
    let mut g_b = MapGradient::zeros_like(b);
    let cols = g_out.cols;
    for ((al, bl), (ga, gb)) in a.locations().zip(b.locations()).zip(
        g_a.values
            .chunks_exact_mut(a.channels)
            .zip(g_b.values.chunks_exact_mut(b.channels)),
    ) {
        for (i, row) in g_out.values.chunks_exact(cols).enumerate() {
            ga[i] = row.iter().zip(bl).map(|(g, b)| g * b).sum();
            let ai = al[i];
            if ai != 0.0 {
                for (gbj, g) in gb.iter_mut().zip(row) {
                    *gbj += g * ai;
                }
            }
        }
    }
    Ok((g_a, g_b))
}

/// Elementwise `sign(x) * sqrt(|x|)`.
///
/// Not idempotent: applying it twice yields a signed fourth root.
pub fn signed_sqrt(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| if x == 0.0 { 0.0 } else { x.signum() * x.abs().sqrt() })
        .collect()
}

pub fn signed_sqrt_backward(v: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if v.len() != g.len() {
        return Err(Error::Shape(format!(
            "signed sqrt backward: input has {} entries, gradient {}",
            v.len(),
            g.len()
        )));
    }
    Ok(v.iter()
        .zip(g)
        .map(|(&x, &gi)| gi / (2.0 * x.abs().max(SIGNED_SQRT_EPS).sqrt()))
        .collect())
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v / ||v||`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm2(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

/// `(g - z (z . g)) / ||v||` with `z = v / ||v||`; zero input gives zero gradient.
pub fn l2_normalize_backward(v: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if v.len() != g.len() {
        return Err(Error::Shape(format!(
            "l2 backward: input has {} entries, gradient {}",
            v.len(),
            g.len()
        )));
    }
    let n = norm2(v);
    if n == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let z: Vec<f64> = v.iter().map(|x| x / n).collect();
    let zg: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok(g.iter().zip(&z).map(|(gi, zi)| (gi - zi * zg) / n).collect())
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub pooled: BilinearMatrix,
    pub sqrt: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Full forward pass in double precision.
pub fn encode_traced(a: &FeatureMap, b: &FeatureMap) -> Result<EncodeTrace> {
    let pooled = bilinear_pool(a, b)?;
    let sqrt = signed_sqrt(pooled.values());
    let normalized = l2_normalize(&sqrt);
    Ok(EncodeTrace {
        pooled,
        sqrt,
        normalized,
    })
}

/// Backpropagates a gradient on the normalized descriptor to both input maps.
pub fn encode_backward(
    a: &FeatureMap,
    b: &FeatureMap,
    trace: &EncodeTrace,
    g_normalized: &[f64],
) -> Result<(MapGradient, MapGradient)> {
    let g_sqrt = l2_normalize_backward(&trace.sqrt, g_normalized)?;
    let g_raw = signed_sqrt_backward(trace.pooled.values(), &g_sqrt)?;
    let g_pooled = BilinearMatrix::new(trace.pooled.rows, trace.pooled.cols, g_raw)?;
    bilinear_pool_backward(a, b, &g_pooled)
}

/// Pool, flatten, signed square root, L2 normalize.
pub fn encode(a: &FeatureMap, b: &FeatureMap) -> Result<BilinearDescriptor> {
    let trace = encode_traced(a, b)?;
    Ok(BilinearDescriptor::new(
        trace.normalized.iter().map(|&v| v as f32).collect(),
        DescriptorStage::L2Normalized,
    ))
}

/// Symmetric encoding of many maps in parallel; output order follows input order.
pub fn encode_batch(maps: &[FeatureMap]) -> Result<Vec<BilinearDescriptor>> {
    maps.par_iter().map(|m| encode(m, m)).collect()
}

/// First-order baseline: the location-averaged feature vector, L2 normalized.
pub fn mean_pool_descriptor(map: &FeatureMap) -> BilinearDescriptor {
    let mut mean = vec![0.0f64; map.channels];
    for loc in map.locations() {
        for (m, v) in mean.iter_mut().zip(loc) {
            *m += v;
        }
    }
    let n = map.num_locations() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    BilinearDescriptor::new(
        l2_normalize(&mean).into_iter().map(|v| v as f32).collect(),
        DescriptorStage::L2Normalized,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, c: usize, v: &[f64]) -> FeatureMap {
        FeatureMap::new(h, w, c, v.to_vec()).unwrap()
    }

    /// Triple loop over explicit outer products.
    fn pool_oracle(a: &FeatureMap, b: &FeatureMap) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b.channels()]; a.channels()];
        for l in 0..a.num_locations() {
            for i in 0..a.channels() {
                for j in 0..b.channels() {
                    out[i][j] += a.location(l)[i] * b.location(l)[j];
                }
            }
        }
        out
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn pool_two_location_fixture() {
        let a = map(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = map(1, 2, 2, &[2.0, 3.0, 4.0, 5.0]);
        let oracle = pool_oracle(&a, &b);
        assert_eq!(oracle, vec![vec![2.0, 3.0], vec![4.0, 5.0]]);
        let m = bilinear_pool(&a, &b).unwrap();
        assert_eq!(m.values(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn pool_single_location_symmetric() {
        let a = map(1, 1, 2, &[1.0, 2.0]);
        let m = bilinear_pool(&a, &a).unwrap();
        assert_eq!(m.values(), &[1.0, 2.0, 2.0, 4.0]);
        assert!(m.is_symmetric());
    }

    #[test]
    fn pool_channel_counts_may_differ() {
        let a = map(1, 2, 1, &[1.0, 2.0]);
        let b = map(1, 2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let m = bilinear_pool(&a, &b).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 3));
        assert_eq!(m.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pool_rejects_spatial_mismatch() {
        let a = FeatureMap::zeros(2, 2, 1).unwrap();
        let b = FeatureMap::zeros(2, 3, 1).unwrap();
        assert!(matches!(bilinear_pool(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_activations_rejected() {
        let err = FeatureMap::new(1, 1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = FeatureMap::rectified(1, 1, 2, vec![1.0, -1.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn pool_overflow_is_numeric_error() {
        let a = map(1, 2, 1, &[1e200, 1e200]);
        assert!(matches!(bilinear_pool(&a, &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn pool_full_size_shape() {
        let a = FeatureMap::rectified(27, 27, 512, vec![0.01; 27 * 27 * 512]).unwrap();
        let m = bilinear_pool(&a, &a).unwrap();
        assert_eq!((m.rows(), m.cols()), (512, 512));
        let d = encode(&a, &a).unwrap();
        assert_eq!(d.dim(), 262_144);
    }

    #[test]
    fn pool_backward_single_location() {
        let a = map(1, 1, 2, &[1.0, 2.0]);
        let b = map(1, 1, 2, &[3.0, 4.0]);
        let g = BilinearMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (ga, gb) = bilinear_pool_backward(&a, &b, &g).unwrap();
        // Finite differences of sum_i Phi_ii = a . b.
        let fa = central_diff(|x| x[0] * 3.0 + x[1] * 4.0, &[1.0, 2.0], 1e-4);
        let fb = central_diff(|x| 1.0 * x[0] + 2.0 * x[1], &[3.0, 4.0], 1e-4);
        for k in 0..2 {
            assert!((ga.values[k] - fa[k]).abs() < 1e-8);
            assert!((gb.values[k] - fb[k]).abs() < 1e-8);
        }
        assert_eq!(ga.values, vec![3.0, 4.0]);
        assert_eq!(gb.values, vec![1.0, 2.0]);
    }

    #[test]
    fn pool_backward_zero_upstream() {
        let a = map(2, 1, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = BilinearMatrix::zeros(2, 2);
        let (ga, gb) = bilinear_pool_backward(&a, &a, &g).unwrap();
        assert!(ga.values.iter().chain(&gb.values).all(|&v| v == 0.0));
    }

    #[test]
    fn pool_backward_shared_input_matches_finite_differences() {
        let x0 = vec![0.3, 1.2, 0.7, 0.5, 2.0, 0.1];
        let gv = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75, 0.4, 0.9, -0.3];
        let g = BilinearMatrix::new(3, 3, gv.clone()).unwrap();
        let loss = |x: &[f64]| {
            let m = map(1, 2, 3, x);
            let p = bilinear_pool(&m, &m).unwrap();
            p.values().iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = central_diff(loss, &x0, 1e-5);
        let m = map(1, 2, 3, &x0);
        let (ga, gb) = bilinear_pool_backward(&m, &m, &g).unwrap();
        let summed = ga.add(&gb).unwrap();
        let gsym = {
            let t = g.transpose();
            BilinearMatrix::new(3, 3, g.values().iter().zip(t.values()).map(|(a, b)| a + b).collect())
                .unwrap()
        };
        for l in 0..2 {
            for i in 0..3 {
                let expect: f64 = (0..3).map(|j| gsym.get(i, j) * x0[l * 3 + j]).sum();
                assert!((summed.values[l * 3 + i] - expect).abs() < 1e-12);
            }
        }
        for (a, n) in summed.values.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn signed_sqrt_fixtures() {
        assert_eq!(signed_sqrt(&[4.0, -9.0, 0.0]), vec![2.0, -3.0, 0.0]);
        assert_eq!(signed_sqrt(&[0.25]), vec![0.5]);
        // Double application is a fourth root, not the identity.
        assert_eq!(signed_sqrt(&signed_sqrt(&[16.0])), vec![2.0]);
    }

    #[test]
    fn signed_sqrt_backward_fixtures() {
        let g = signed_sqrt_backward(&[4.0], &[1.0]).unwrap();
        let fd = central_diff(|x| signed_sqrt(x)[0], &[4.0], 1e-4)[0];
        assert!((g[0] - 0.25).abs() < 1e-9);
        assert!((g[0] - fd).abs() < 1e-8);
        let g0 = signed_sqrt_backward(&[0.0], &[1.0]).unwrap();
        assert!((g0[0] - 5000.0).abs() < 1e-9);
        let gz = signed_sqrt_backward(&[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(gz, vec![0.0, 0.0]);
        assert!(signed_sqrt_backward(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn l2_fixtures() {
        let z = l2_normalize(&[3.0, 4.0]);
        assert!((z[0] - 0.6).abs() < 1e-15 && (z[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.6, 0.8]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_backward_fixtures() {
        let g = l2_normalize_backward(&[3.0, 4.0], &[1.0, 0.0]).unwrap();
        let fd = central_diff(|x| l2_normalize(x)[0], &[3.0, 4.0], 1e-5);
        assert!((g[0] - 0.128).abs() < 1e-12 && (g[1] + 0.096).abs() < 1e-12);
        assert!((g[0] - fd[0]).abs() < 1e-8 && (g[1] - fd[1]).abs() < 1e-8);

        let radial = l2_normalize_backward(&[3.0, 4.0], &[6.0, 8.0]).unwrap();
        assert!(radial.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(l2_normalize_backward(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn encode_two_location_fixture() {
        let a = map(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = map(1, 2, 2, &[2.0, 3.0, 4.0, 5.0]);
        let d = encode(&a, &b).unwrap();
        let expected = l2_normalize(&signed_sqrt(&[2.0, 3.0, 4.0, 5.0]));
        assert_eq!(d.stage, DescriptorStage::L2Normalized);
        for (x, e) in d.values.iter().zip(&expected) {
            assert_eq!(*x, *e as f32);
        }
        assert!((d.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_zero_map_gives_zero_descriptor() {
        let a = FeatureMap::zeros(3, 3, 4).unwrap();
        let d = encode(&a, &a).unwrap();
        assert_eq!(d.dim(), 16);
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_pool_is_first_order() {
        let a = map(1, 2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let d = mean_pool_descriptor(&a);
        let s = 0.5f64.sqrt() as f32;
        assert_eq!(d.values, vec![s, s]);
    }

    fn small_map() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..=5, 1usize..=5, 1usize..=8, 1usize..=8).prop_flat_map(|(h, w, ca, cb)| {
            (
                Just(h),
                Just(w),
                Just(ca),
                Just(cb),
                prop::collection::vec(-2.0f64..2.0, h * w * ca),
                prop::collection::vec(-2.0f64..2.0, h * w * cb),
            )
        })
    }

    proptest! {
        #[test]
        fn pool_matches_oracle((h, w, ca, cb, va, vb) in small_map()) {
            let a = map(h, w, ca, &va);
            let b = map(h, w, cb, &vb);
            let m = bilinear_pool(&a, &b).unwrap();
            let oracle = pool_oracle(&a, &b);
            for i in 0..ca {
                for j in 0..cb {
                    prop_assert!((m.get(i, j) - oracle[i][j]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn pool_is_orderless((h, w, ca, cb, va, vb) in small_map(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let a = map(h, w, ca, &va);
            let b = map(h, w, cb, &vb);
            let mut order: Vec<usize> = (0..h * w).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pa: Vec<f64> = order.iter().flat_map(|&l| a.location(l).to_vec()).collect();
            let pb: Vec<f64> = order.iter().flat_map(|&l| b.location(l).to_vec()).collect();
            // Reshape as a single row so the permutation is a pure reordering.
            let m1 = bilinear_pool(&map(1, h * w, ca, &va), &map(1, h * w, cb, &vb)).unwrap();
            let m2 = bilinear_pool(&map(1, h * w, ca, &pa), &map(1, h * w, cb, &pb)).unwrap();
            for (x, y) in m1.values().iter().zip(m2.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_is_bilinear((h, w, ca, cb, va, vb) in small_map(), c in -3.0f64..3.0) {
            let a = map(h, w, ca, &va);
            let b = map(h, w, cb, &vb);
            let a2 = map(h, w, ca, &va.iter().rev().cloned().collect::<Vec<_>>());
            let sum = map(h, w, ca, &va.iter().zip(a2.values()).map(|(x, y)| x + y).collect::<Vec<_>>());
            let scaled = map(h, w, ca, &va.iter().map(|x| c * x).collect::<Vec<_>>());
            let p = bilinear_pool(&a, &b).unwrap();
            let p2 = bilinear_pool(&a2, &b).unwrap();
            let ps = bilinear_pool(&sum, &b).unwrap();
            let pc = bilinear_pool(&scaled, &b).unwrap();
            for k in 0..p.values().len() {
                prop_assert!((ps.values()[k] - p.values()[k] - p2.values()[k]).abs() < 1e-10);
                prop_assert!((pc.values()[k] - c * p.values()[k]).abs() < 1e-10);
            }
            // Linear in the second argument too.
            let bs = map(h, w, cb, &vb.iter().map(|x| c * x).collect::<Vec<_>>());
            let pb = bilinear_pool(&a, &bs).unwrap();
            for k in 0..p.values().len() {
                prop_assert!((pb.values()[k] - c * p.values()[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn symmetric_case_is_psd((h, w, ca, _cb, va, _vb) in small_map(), x in prop::collection::vec(-1.0f64..1.0, 8)) {
            let a = map(h, w, ca, &va);
            let m = bilinear_pool(&a, &a).unwrap();
            prop_assert!(m.is_symmetric());
            prop_assert!(m.quadratic_form(&x[..ca]) >= -1e-10);
        }

        #[test]
        fn scaling_input_scales_matrix_and_keeps_argmax(
            (h, w, ca, _cb, va, _vb) in small_map(), c in 0.1f64..10.0
        ) {
            let va: Vec<f64> = va.iter().map(|v| v.abs()).collect();
            let a = map(h, w, ca, &va);
            let s = map(h, w, ca, &va.iter().map(|v| c * v).collect::<Vec<_>>());
            let p = bilinear_pool(&a, &a).unwrap();
            let ps = bilinear_pool(&s, &s).unwrap();
            for (x, y) in p.values().iter().zip(ps.values()) {
                prop_assert!((y - c * c * x).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            let argmax = |v: &[f64]| {
                v.iter().enumerate().fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc }).0
            };
            let d = encode_traced(&a, &a).unwrap().normalized;
            let ds = encode_traced(&s, &s).unwrap().normalized;
            // Normalization removes the scale up to rounding; compare argmax on
            // well-separated maxima only.
            let mut sorted = d.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if sorted.len() > 1 && sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(argmax(&d), argmax(&ds));
            }
        }

        #[test]
        fn encoded_descriptors_have_unit_norm((h, w, ca, cb, va, vb) in small_map()) {
            let d = encode(&map(h, w, ca, &va), &map(h, w, cb, &vb)).unwrap();
            prop_assume!(d.values.iter().any(|&v| v != 0.0));
            prop_assert!((d.norm() - 1.0).abs() < 1e-6);
        }
    }
}
