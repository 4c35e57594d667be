//! Seeded synthetic datasets whose classes differ only in channel correlation.
//!
//! Identity `k` owns a mixing matrix `L_k` with unit-norm rows. Each location
//! vector of each medium is `L_k g + sigma * n` with `g, n ~ N(0, I)`, then
//! rectified. Every channel therefore has the same marginal distribution for
//! every identity, and location-averaged features carry no identity signal;
//! only the channel-channel correlation `L_k L_kᵀ` does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::extractor::{ConvParams, ImagePatch};
use crate::formats::save_feature_map;
use crate::protocol::metadata::{write_metadata, MediaItem, MediaKind, Split, Template};
use crate::train::finetune::{LabeledPatch, SoftmaxHead};
use crate::train::svm::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Identities that appear in gallery or probe sets.
    pub num_identities: usize,
    /// Extra identities, disjoint from the above, used only for the train role.
    pub train_identities: usize,
    pub templates_per_identity: usize,
    pub media_per_template: usize,
    /// `(height, width, channels)` of every feature map.
    pub map_dims: (usize, usize, usize),
    pub impostor_fraction: f64,
    /// Share of an enrolled identity's templates merged into its gallery template.
    pub gallery_fraction: f64,
    pub noise_sigma: f64,
    pub num_splits: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 8,
            train_identities: 4,
            templates_per_identity: 20,
            media_per_template: 2,
            map_dims: (10, 10, 8),
            impostor_fraction: 0.25,
            gallery_fraction: 0.5,
            noise_sigma: 0.1,
            num_splits: 10,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Number of impostor identities per split: `round(fraction * num_identities)`.
    pub fn impostor_count(&self) -> usize {
        (self.impostor_fraction * self.num_identities as f64).round() as usize
    }

    pub fn gallery_templates(&self) -> usize {
        ((self.gallery_fraction * self.templates_per_identity as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let (h, w, c) = self.map_dims;
        if self.num_identities == 0 || self.templates_per_identity == 0 || self.media_per_template == 0 {
            return cfg("identity, template and media counts must be positive".into());
        }
        if h == 0 || w == 0 || c == 0 {
            return cfg(format!("map dims must be positive, got {h}x{w}x{c}"));
        }
        if !(self.impostor_fraction > 0.0 && self.impostor_fraction < 1.0) {
            return cfg(format!("impostor_fraction must lie in (0,1), got {}", self.impostor_fraction));
        }
        let imp = self.impostor_count();
        if imp == 0 {
            return cfg(format!(
                "impostor_fraction {} over {} identities yields no impostor",
                self.impostor_fraction, self.num_identities
            ));
        }
        if imp + 2 > self.num_identities {
            return cfg(format!(
                "{imp} impostors leave fewer than 2 enrolled identities out of {}",
                self.num_identities
            ));
        }
        if !(self.gallery_fraction > 0.0 && self.gallery_fraction < 1.0) {
            return cfg(format!("gallery_fraction must lie in (0,1), got {}", self.gallery_fraction));
        }
        if self.gallery_templates() >= self.templates_per_identity {
            return cfg(format!(
                "gallery_fraction {} leaves no probe template out of {}",
                self.gallery_fraction, self.templates_per_identity
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return cfg(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.num_splits == 0 {
            return cfg("num_splits must be positive".into());
        }
        Ok(())
    }
}

/// Generated dataset held in memory; maps are keyed by media id.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub splits: Vec<Split>,
    pub maps: BTreeMap<String, FeatureMap>,
}

const STREAM_PATTERN: u64 = 1;
const STREAM_MEDIUM: u64 = 2;
const STREAM_SPLIT: u64 = 3;

fn subject_name(k: usize) -> String {
    format!("id{k:03}")
}

fn template_name(k: usize, t: usize) -> String {
    format!("{}_t{t:02}", subject_name(k))
}

fn media_name(k: usize, t: usize, m: usize) -> String {
    format!("{}_m{m}", template_name(k, t))
}

/// Row-normalized Gaussian mixing matrix, row-major `c x c`.
fn mixing_matrix(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut l: Vec<f64> = (0..c * c).map(|_| rng.sample(StandardNormal)).collect();
    for row in l.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    l
}

fn medium_map(cfg: &SynthConfig, mix: &[f64], rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let (h, w, c) = cfg.map_dims;
    let mut values = Vec::with_capacity(h * w * c);
    let mut g = vec![0.0f64; c];
    for _ in 0..h * w {
        g.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        for row in mix.chunks(c) {
            let signal: f64 = row.iter().zip(&g).map(|(a, b)| a * b).sum();
            let noise: f64 = rng.sample(StandardNormal);
            let v = (signal + cfg.noise_sigma * noise).max(0.0);
            values.push(v as f32 as f64);
        }
    }
    FeatureMap::rectified(h, w, c, values)
}

fn template_for(cfg: &SynthConfig, k: usize, t: usize) -> Template {
    let tid = template_name(k, t);
    Template {
        template_id: tid.clone(),
        subject_id: subject_name(k),
        media: (0..cfg.media_per_template)
            .map(|m| media_item(k, t, m, &tid))
            .collect(),
    }
}

fn media_item(k: usize, t: usize, m: usize, template_id: &str) -> MediaItem {
    let id = media_name(k, t, m);
    MediaItem {
        source_path: PathBuf::from(format!("media/{id}.bfm")),
        media_id: id,
        kind: if m == 0 { MediaKind::Still } else { MediaKind::Frame },
        template_id: template_id.to_string(),
    }
}

/// Builds the dataset in memory. Identities `0..num_identities` are eligible
/// for gallery and probe; the following `train_identities` fill the train role.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let total = cfg.num_identities + cfg.train_identities;
    let c = cfg.map_dims.2;
    let pattern_seed = derive_seed(cfg.seed, STREAM_PATTERN);
    let medium_seed = derive_seed(cfg.seed, STREAM_MEDIUM);

    let mut maps = BTreeMap::new();
    for k in 0..total {
        let mix = mixing_matrix(c, &mut ChaCha8Rng::seed_from_u64(derive_seed(pattern_seed, k as u64)));
        let id_seed = derive_seed(medium_seed, k as u64);
        for t in 0..cfg.templates_per_identity {
            for m in 0..cfg.media_per_template {
                let stream = (t * cfg.media_per_template + m) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(id_seed, stream));
                maps.insert(media_name(k, t, m), medium_map(cfg, &mix, &mut rng)?);
            }
        }
    }

    let train: Vec<Template> = (cfg.num_identities..total)
        .flat_map(|k| (0..cfg.templates_per_identity).map(move |t| (k, t)))
        .map(|(k, t)| template_for(cfg, k, t))
        .collect();

    let n_imp = cfg.impostor_count();
    let n_gal = cfg.gallery_templates();
    let split_seed = derive_seed(cfg.seed, STREAM_SPLIT);
    let mut splits = Vec::with_capacity(cfg.num_splits);
    for s in 1..=cfg.num_splits {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(split_seed, s as u64));
        let mut ids: Vec<usize> = (0..cfg.num_identities).collect();
        ids.shuffle(&mut rng);
        let (impostors, enrolled) = ids.split_at(n_imp);
        let mut enrolled = enrolled.to_vec();
        enrolled.sort_unstable();

        let mut gallery = Vec::new();
        let mut probe = Vec::new();
        for &k in &enrolled {
            let mut ts: Vec<usize> = (0..cfg.templates_per_identity).collect();
            ts.shuffle(&mut rng);
            let (gal, prb) = ts.split_at(n_gal);
            let mut gal = gal.to_vec();
            gal.sort_unstable();
            let gid = format!("{}_g{s:02}", subject_name(k));
            gallery.push(Template {
                template_id: gid.clone(),
                subject_id: subject_name(k),
                media: gal
                    .iter()
                    .flat_map(|&t| (0..cfg.media_per_template).map(move |m| (t, m)))
                    .map(|(t, m)| media_item(k, t, m, &gid))
                    .collect(),
            });
            probe.extend(prb.iter().map(|&t| template_for(cfg, k, t)));
        }
        for &k in impostors {
            probe.extend((0..cfg.templates_per_identity).map(|t| template_for(cfg, k, t)));
        }
        probe.sort_by(|a, b| a.template_id.cmp(&b.template_id));
        splits.push(Split {
            split_index: s as u32,
            train: train.clone(),
            gallery,
            probe,
        });
    }
    Ok(SynthDataset { splits, maps })
}

/// Writes `media/<media_id>.bfm` and `split_NN.csv` under `out_dir`, in a
/// fixed order.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let out = out_dir.as_ref();
    let ds = synth_dataset(cfg)?;
    let media_dir = out.join("media");
    fs::create_dir_all(&media_dir).map_err(|e| Error::io(&media_dir, e))?;
    for (id, map) in &ds.maps {
        save_feature_map(map, media_dir.join(format!("{id}.bfm")))?;
    }
    for s in &ds.splits {
        write_metadata(std::slice::from_ref(s), out.join(format!("split_{:02}.csv", s.split_index)))?;
    }
    Ok(ds)
}

/// Two-class image task separable only by second-order statistics.
///
/// Channel 0 is uniform noise `u`. Channel 1 follows `u` for class 0 and
/// `1 - u` for class 1, plus Gaussian noise, clipped to `[0, 1]`. Both classes
/// have identical per-channel marginals. Samples alternate labels 0, 1, 0, ...
pub fn second_order_image_task(
    n_per_class: usize,
    height: usize,
    width: usize,
    noise: f64,
    seed: u64,
) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for label in 0..2 {
            let mut values = Vec::with_capacity(height * width * 2);
            for _ in 0..height * width {
                let u: f64 = rng.random();
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
                let partner = if label == 0 { u } else { 1.0 - u };
                values.push(u);
                values.push((partner + e).clamp(0.0, 1.0));
            }
            let image = ImagePatch::new(height, width, 2, values).expect("values lie in [0,1]");
            out.push(LabeledPatch { image, label });
        }
    }
    out
}

/// The two-class fine-tuning benchmark: data plus a seeded starting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub kernel_size: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            n_per_class: 400,
            image_size: 8,
            noise: 0.05,
            kernel_size: 3,
            out_channels: 4,
            seed: 1,
        }
    }
}

impl ToyTaskConfig {
    /// Returns the He-initialized extractor, a zero softmax head sized for
    /// the symmetric bilinear descriptor, and the training data.
    pub fn build(&self) -> Result<(ConvParams, SoftmaxHead, Vec<LabeledPatch>)> {
        if self.n_per_class == 0 || self.image_size < self.kernel_size {
            return Err(Error::Config(format!(
                "toy task needs n_per_class > 0 and image_size >= kernel_size, got {} and {}",
                self.n_per_class, self.image_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        let ext = ConvParams::he_init(self.kernel_size, 2, self.out_channels, 1, 0, self.seed)?;
        let head = SoftmaxHead::zeros(2, self.out_channels * self.out_channels)?;
        let data = second_order_image_task(self.n_per_class, self.image_size, self.image_size, self.noise, self.seed);
        Ok((ext, head, data))
    }
}
