//! One-vs-rest linear SVMs trained on gallery media.
//!
//! Each identity gets a binary classifier minimizing
//! `1/2 ||w||^2 + C * sum_i hinge(y_i, w . x_i + b)` with a seeded
//! stochastic subgradient method (step `1 / (lambda t)`, `lambda = 1 / (C n)`).
//! The bias is learned as the weight of a constant input feature.
//! After training, an affine rescale maps the median positive training
//! score to +1 and the median negative score to -1.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::BilinearDescriptor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub identity_id: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub rescale_a: f64,
    pub rescale_b: f64,
}

impl LinearModel {
    /// `w . x + b` before rescaling.
    pub fn raw_score(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "descriptor has {} dims, model for {} expects {}",
                x.len(),
                self.identity_id,
                self.weights.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(x)
            .map(|(w, &v)| w * v as f64)
            .sum::<f64>()
            + self.bias)
    }

    fn apply_rescale(&self, raw: f64) -> f64 {
        self.rescale_a * raw + self.rescale_b
    }
}

/// `rescale_a * (w . d + b) + rescale_b`.
pub fn score(model: &LinearModel, d: &BilinearDescriptor) -> Result<f64> {
    Ok(model.apply_rescale(model.raw_score(&d.values)?))
}

/// One classifier per enrolled identity, sorted by identity id.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryModelSet {
    models: Vec<LinearModel>,
    descriptor_dim: usize,
}

impl GalleryModelSet {
    pub fn new(mut models: Vec<LinearModel>, descriptor_dim: usize) -> Result<Self> {
        models.sort_by(|a, b| a.identity_id.cmp(&b.identity_id));
        if let Some(w) = models.windows(2).find(|w| w[0].identity_id == w[1].identity_id) {
            return Err(Error::Data(format!("duplicate identity id {:?}", w[0].identity_id)));
        }
        for m in &models {
            if m.weights.len() != descriptor_dim {
                return Err(Error::Shape(format!(
                    "model {} has {} weights, gallery dim is {descriptor_dim}",
                    m.identity_id,
                    m.weights.len()
                )));
            }
            if m.weights.iter().any(|v| !v.is_finite())
                || !m.bias.is_finite()
                || !m.rescale_b.is_finite()
                || !(m.rescale_a.is_finite() && m.rescale_a > 0.0)
            {
                return Err(Error::Numeric(format!(
                    "model {} has non-finite parameters or non-positive scale",
                    m.identity_id
                )));
            }
        }
        Ok(Self {
            models,
            descriptor_dim,
        })
    }

    pub fn models(&self) -> &[LinearModel] {
        &self.models
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn contains(&self, identity_id: &str) -> bool {
        self.models
            .binary_search_by(|m| m.identity_id.as_str().cmp(identity_id))
            .is_ok()
    }

    /// Rescaled score of `d` against every model.
    pub fn score_all(&self, d: &BilinearDescriptor) -> Result<BTreeMap<String, f64>> {
        self.models
            .iter()
            .map(|m| Ok((m.identity_id.clone(), score(m, d)?)))
            .collect()
    }

    /// Rounds all parameters to `f32`, the precision of gallery files.
    pub fn quantized_f32(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        Self {
            models: self
                .models
                .iter()
                .map(|m| LinearModel {
                    identity_id: m.identity_id.clone(),
                    weights: m.weights.iter().map(|&v| q(v)).collect(),
                    bias: q(m.bias),
                    rescale_a: q(m.rescale_a),
                    rescale_b: q(m.rescale_b),
                })
                .collect(),
            descriptor_dim: self.descriptor_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    /// Weight each class's hinge terms by `n / (2 n_class)`.
    pub balanced: bool,
    /// Keep the identity rescale instead of failing when an identity's median
    /// positive score does not exceed its median negative score.
    pub allow_degenerate: bool,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 100,
            balanced: false,
            allow_degenerate: false,
            seed: 0,
        }
    }
}

impl SvmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A trained binary classifier plus the primal objective after each epoch
/// (index 0 is the objective of the zero model).
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub objective_trace: Vec<f64>,
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * b as f64).sum()
}

fn objective(w: &[f64], b: f64, xs: &[&[f32]], ys: &[f64], cw: &[f64], c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .zip(cw)
        .map(|((x, y), k)| k * (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * loss
}

/// Trains one binary hinge-loss classifier. Labels are `+1.0` / `-1.0`.
pub fn train_binary_svm(xs: &[&[f32]], ys: &[f64], cfg: &SvmConfig, seed: u64) -> Result<BinaryFit> {
    cfg.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Data("need one label per sample and at least one sample".into()));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::Shape(format!("descriptor dims differ: {} vs {dim}", x.len())));
    }
    let n = xs.len();
    let n_pos = ys.iter().filter(|&&y| y > 0.0).count();
    let n_neg = n - n_pos;
    let class_weight: Vec<f64> = ys
        .iter()
        .map(|&y| {
            if !cfg.balanced {
                1.0
            } else if y > 0.0 {
                n as f64 / (2.0 * n_pos as f64)
            } else {
                n as f64 / (2.0 * n_neg as f64)
            }
        })
        .collect();

    let lambda = 1.0 / (cfg.c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut trace = vec![objective(&w, b, xs, ys, &class_weight, cfg.c)];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let shrink = 1.0 - eta * lambda;
            let margin = ys[i] * (dot(&w, xs[i]) + b);
            w.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
            if margin < 1.0 {
                let step = eta * ys[i] * class_weight[i];
                for (wv, &xv) in w.iter_mut().zip(xs[i]) {
                    *wv += step * xv as f64;
                }
                b += step;
            }
            let norm = (w.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
                b *= s;
            }
        }
        let obj = objective(&w, b, xs, ys, &class_weight, cfg.c);
        if !obj.is_finite() {
            return Err(Error::Numeric("SVM objective became non-finite".into()));
        }
        trace.push(obj);
    }
    Ok(BinaryFit {
        weights: w,
        bias: b,
        objective_trace: trace,
    })
}

fn median(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Data("median of an empty score list".into()));
    }
    let mut s = v.to_vec();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

/// Sets the affine rescale so the median positive score maps to +1 and the
/// median negative score maps to -1. Scores are the model's raw scores.
pub fn rescale_model(
    model: &LinearModel,
    pos_scores: &[f64],
    neg_scores: &[f64],
) -> Result<LinearModel> {
    let mp = median(pos_scores)?;
    let mn = median(neg_scores)?;
    if !(mp > mn) {
        return Err(Error::Degenerate(format!(
            "{}: median positive score {mp} does not exceed median negative score {mn}",
            model.identity_id
        )));
    }
    let a = 2.0 / (mp - mn);
    Ok(LinearModel {
        rescale_a: a,
        rescale_b: 1.0 - a * mp,
        ..model.clone()
    })
}

/// Trains one classifier per identity. Every sample is one medium; templates
/// are not pooled at this stage.
pub fn train_ovr_svm(samples: &[(String, BilinearDescriptor)], cfg: &SvmConfig) -> Result<GalleryModelSet> {
    cfg.validate()?;
    let identities: BTreeSet<&str> = samples.iter().map(|(id, _)| id.as_str()).collect();
    if identities.len() < 2 {
        return Err(Error::Protocol(format!(
            "one-vs-rest training needs at least 2 identities, got {}",
            identities.len()
        )));
    }
    let dim = samples[0].1.dim();
    if let Some((id, d)) = samples.iter().find(|(_, d)| d.dim() != dim) {
        return Err(Error::Shape(format!(
            "descriptor for {id} has {} dims, expected {dim}",
            d.dim()
        )));
    }
    let xs: Vec<&[f32]> = samples.iter().map(|(_, d)| d.values.as_slice()).collect();
    let ids: Vec<&str> = identities.into_iter().collect();
    let models = ids
        .par_iter()
        .enumerate()
        .map(|(k, &id)| {
            let ys: Vec<f64> = samples
                .iter()
                .map(|(sid, _)| if sid == id { 1.0 } else { -1.0 })
                .collect();
            let fit = train_binary_svm(&xs, &ys, cfg, derive_seed(cfg.seed, k as u64))?;
            let model = LinearModel {
                identity_id: id.to_string(),
                weights: fit.weights,
                bias: fit.bias,
                rescale_a: 1.0,
                rescale_b: 0.0,
            };
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (x, y) in xs.iter().zip(&ys) {
                let s = model.raw_score(x)?;
                if *y > 0.0 {
                    pos.push(s)
                } else {
                    neg.push(s)
                }
            }
            match rescale_model(&model, &pos, &neg) {
                Err(Error::Degenerate(_)) if cfg.allow_degenerate => Ok(model),
                other => other,
            }
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryModelSet::new(models, dim)
}

/// SplitMix64-style mixing so per-task seeds do not depend on scheduling.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::DescriptorStage;
    use proptest::prelude::*;

    fn desc(v: &[f32]) -> BilinearDescriptor {
        BilinearDescriptor::new(v.to_vec(), DescriptorStage::L2Normalized)
    }

    fn model(w: &[f64], b: f64, a: f64, b2: f64) -> LinearModel {
        LinearModel {
            identity_id: "m".into(),
            weights: w.to_vec(),
            bias: b,
            rescale_a: a,
            rescale_b: b2,
        }
    }

    #[test]
    fn score_fixtures() {
        assert_eq!(score(&model(&[0.0, 0.0], 0.0, 1.0, 0.0), &desc(&[4.0, -2.0])).unwrap(), 0.0);
        assert_eq!(score(&model(&[1.0, 0.0], 0.0, 2.0, -1.0), &desc(&[3.0, 5.0])).unwrap(), 5.0);
        assert!(matches!(
            score(&model(&[1.0], 0.0, 1.0, 0.0), &desc(&[1.0, 2.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rescale_fixtures() {
        let m = model(&[1.0], 0.0, 1.0, 0.0);
        // Solve a*2 + b = 1, a*(-0.5) + b = -1.
        let r = rescale_model(&m, &[2.0], &[-0.5]).unwrap();
        assert!((r.rescale_a - 0.8).abs() < 1e-15);
        assert!((r.rescale_b + 0.6).abs() < 1e-15);
        assert!((r.apply_rescale(2.0) - 1.0).abs() < 1e-15);
        assert!((r.apply_rescale(-0.5) + 1.0).abs() < 1e-15);

        let id = rescale_model(&m, &[0.0, 1.0, 5.0], &[-1.0]).unwrap();
        assert_eq!((id.rescale_a, id.rescale_b), (1.0, 0.0));

        assert!(matches!(rescale_model(&m, &[1.0], &[1.0]), Err(Error::Degenerate(_))));
        assert!(rescale_model(&m, &[], &[1.0]).is_err());
    }

    #[test]
    fn separable_1d_data() {
        let pts: Vec<(f32, f64)> = vec![(2.0, 1.0), (3.0, 1.0), (4.5, 1.0), (-2.0, -1.0), (-3.0, -1.0), (-5.0, -1.0)];
        let xs_owned: Vec<Vec<f32>> = pts.iter().map(|p| vec![p.0]).collect();
        let xs: Vec<&[f32]> = xs_owned.iter().map(|v| v.as_slice()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let fit = train_binary_svm(&xs, &ys, &SvmConfig::default(), 7).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((dot(&fit.weights, x) + fit.bias) * y > 0.0);
        }
        let t = &fit.objective_trace;
        assert_eq!(t.len(), 101);
        assert!(t.last().unwrap() <= &t[0]);
    }

    #[test]
    fn duplicated_samples_keep_sign_pattern() {
        let pts: Vec<(f32, f32, f64)> = vec![
            (1.0, 0.2, 1.0), (0.8, -0.1, 1.0), (1.2, 0.4, 1.0),
            (-1.0, 0.3, -1.0), (-0.7, -0.2, -1.0), (-1.3, 0.1, -1.0),
        ];
        let fit = |copies: usize| {
            let owned: Vec<Vec<f32>> = pts.iter().flat_map(|p| std::iter::repeat_n(vec![p.0, p.1], copies)).collect();
            let ys: Vec<f64> = pts.iter().flat_map(|p| std::iter::repeat_n(p.2, copies)).collect();
            let xs: Vec<&[f32]> = owned.iter().map(|v| v.as_slice()).collect();
            train_binary_svm(&xs, &ys, &SvmConfig::default(), 3).unwrap()
        };
        let (a, b) = (fit(1), fit(2));
        let held_out = [[0.5f32, 0.0], [-0.5, 0.0], [2.0, -1.0], [-2.0, 1.0], [0.3, 0.9]];
        for x in held_out {
            let sa = dot(&a.weights, &x) + a.bias;
            let sb = dot(&b.weights, &x) + b.bias;
            assert_eq!(sa > 0.0, sb > 0.0, "{x:?}: {sa} vs {sb}");
        }
    }

    #[test]
    fn ovr_yields_one_model_per_identity() {
        let samples: Vec<(String, BilinearDescriptor)> = (0..4)
            .flat_map(|k| {
                (0..3).map(move |j| {
                    let mut v = vec![0.05f32 * j as f32; 4];
                    v[k] = 1.0;
                    (format!("id{k}"), desc(&v))
                })
            })
            .collect();
        let set = train_ovr_svm(&samples, &SvmConfig::default()).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.descriptor_dim(), 4);
        for (k, m) in set.models().iter().enumerate() {
            assert_eq!(m.identity_id, format!("id{k}"));
            let own = score(m, &samples[k * 3].1).unwrap();
            let other = score(m, &samples[((k + 1) % 4) * 3].1).unwrap();
            assert!(own > other);
        }
        let again = train_ovr_svm(&samples, &SvmConfig::default()).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn ovr_error_paths() {
        let one = vec![("a".to_string(), desc(&[1.0])), ("a".to_string(), desc(&[0.5]))];
        assert!(matches!(train_ovr_svm(&one, &SvmConfig::default()), Err(Error::Protocol(_))));
        let mixed = vec![("a".to_string(), desc(&[1.0])), ("b".to_string(), desc(&[0.5, 1.0]))];
        assert!(matches!(train_ovr_svm(&mixed, &SvmConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn gallery_set_rejects_duplicates() {
        let m = model(&[1.0], 0.0, 1.0, 0.0);
        assert!(GalleryModelSet::new(vec![m.clone(), m], 1).is_err());
    }

    proptest! {
        #[test]
        fn rescale_hits_medians_and_preserves_order(
            pos in prop::collection::vec(-5.0f64..5.0, 1..30),
            neg in prop::collection::vec(-5.0f64..5.0, 1..30),
            shift in 0.01f64..3.0,
        ) {
            let pos: Vec<f64> = pos.iter().map(|p| p + 10.0 + shift).collect();
            let m = model(&[1.0], 0.0, 1.0, 0.0);
            let r = rescale_model(&m, &pos, &neg).unwrap();
            let mp = median(&pos.iter().map(|&s| r.apply_rescale(s)).collect::<Vec<_>>()).unwrap();
            let mn = median(&neg.iter().map(|&s| r.apply_rescale(s)).collect::<Vec<_>>()).unwrap();
            prop_assert!((mp - 1.0).abs() < 1e-9);
            prop_assert!((mn + 1.0).abs() < 1e-9);
            for w in pos.windows(2) {
                prop_assert_eq!(w[0] < w[1], r.apply_rescale(w[0]) < r.apply_rescale(w[1]));
            }
        }
    }
}
