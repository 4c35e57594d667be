//! Open-set 1:N identification: template pooling, ranking, CMC and DET curves.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::BilinearDescriptor;
use crate::error::{Error, Result};
use crate::protocol::metadata::{Split, Template};
use crate::train::svm::GalleryModelSet;

/// Anything that scores a descriptor against every enrolled identity.
pub trait GalleryScorer {
    fn descriptor_dim(&self) -> usize;
    fn identity_count(&self) -> usize;
    fn contains(&self, identity_id: &str) -> bool;
    fn score_all(&self, d: &BilinearDescriptor) -> Result<BTreeMap<String, f64>>;
}

impl GalleryScorer for GalleryModelSet {
    fn descriptor_dim(&self) -> usize {
        GalleryModelSet::descriptor_dim(self)
    }

    fn identity_count(&self) -> usize {
        self.len()
    }

    fn contains(&self, identity_id: &str) -> bool {
        GalleryModelSet::contains(self, identity_id)
    }

    fn score_all(&self, d: &BilinearDescriptor) -> Result<BTreeMap<String, f64>> {
        GalleryModelSet::score_all(self, d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingStrategy {
    /// Score every medium, then take the per-identity maximum.
    #[default]
    ScorePooling,
    /// Elementwise maximum over media descriptors, then one scoring pass.
    FeaturePooling,
}

/// Elementwise maximum. The result is not re-normalized.
pub fn pool_features(descriptors: &[&BilinearDescriptor]) -> Result<BilinearDescriptor> {
    let (first, rest) = descriptors
        .split_first()
        .ok_or_else(|| Error::Data("cannot pool an empty descriptor list".into()))?;
    let mut out = (*first).clone();
    for d in rest {
        if d.dim() != out.dim() {
            return Err(Error::Shape(format!("descriptor dims differ: {} vs {}", out.dim(), d.dim())));
        }
        out.values.iter_mut().zip(&d.values).for_each(|(o, &v)| *o = o.max(v));
    }
    Ok(out)
}

/// Per-identity maximum across media; all maps must share one key set.
pub fn pool_scores(per_media: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, f64>> {
    let (first, rest) = per_media
        .split_first()
        .ok_or_else(|| Error::Data("cannot pool an empty score list".into()))?;
    let mut out = first.clone();
    for m in rest {
        if m.len() != out.len() || !m.keys().zip(out.keys()).all(|(a, b)| a == b) {
            return Err(Error::Data("per-media score maps have different identity sets".into()));
        }
        for (k, v) in m {
            let o = out.get_mut(k).expect("key sets checked equal");
            *o = o.max(*v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub template_id: String,
    /// `None` marks an impostor: the subject is not enrolled.
    pub true_subject_id: Option<String>,
    pub scores: BTreeMap<String, f64>,
    /// Descending score; ties by ascending identity id.
    pub ranked: Vec<String>,
}

impl ProbeResult {
    pub fn from_scores(template_id: String, true_subject_id: Option<String>, scores: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((id, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {v} for identity {id}")));
        }
        let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let ranked = ranked.into_iter().map(|(k, _)| k.clone()).collect();
        Ok(Self {
            template_id,
            true_subject_id,
            scores,
            ranked,
        })
    }

    pub fn max_score(&self) -> f64 {
        self.ranked.first().map_or(f64::NEG_INFINITY, |id| self.scores[id])
    }

    /// 1-based rank of the true identity, `None` for impostors.
    pub fn true_rank(&self) -> Option<usize> {
        let t = self.true_subject_id.as_ref()?;
        self.ranked.iter().position(|id| id == t).map(|p| p + 1)
    }

    pub fn true_score(&self) -> Option<f64> {
        self.true_subject_id.as_ref().and_then(|t| self.scores.get(t).copied())
    }
}

/// Scores one probe template. `descriptors[i]` belongs to `probe.media[i]`.
pub fn identify<G: GalleryScorer + ?Sized>(
    probe: &Template,
    gallery: &G,
    strategy: PoolingStrategy,
    descriptors: &[&BilinearDescriptor],
) -> Result<ProbeResult> {
    if gallery.identity_count() == 0 {
        return Err(Error::Protocol("gallery has no enrolled identities".into()));
    }
    if descriptors.len() != probe.media.len() {
        return Err(Error::Data(format!(
            "template {} has {} media but {} descriptors",
            probe.template_id,
            probe.media.len(),
            descriptors.len()
        )));
    }
    if let Some(d) = descriptors.iter().find(|d| d.dim() != gallery.descriptor_dim()) {
        return Err(Error::Shape(format!(
            "descriptor has {} dims, gallery expects {}",
            d.dim(),
            gallery.descriptor_dim()
        )));
    }
    let scores = match strategy {
        PoolingStrategy::ScorePooling => {
            let per_media = descriptors
                .iter()
                .map(|d| gallery.score_all(d))
                .collect::<Result<Vec<_>>>()?;
            pool_scores(&per_media)?
        }
        PoolingStrategy::FeaturePooling => gallery.score_all(&pool_features(descriptors)?)?,
    };
    let truth = gallery
        .contains(&probe.subject_id)
        .then(|| probe.subject_id.clone());
    ProbeResult::from_scores(probe.template_id.clone(), truth, scores)
}

/// Identifies every probe template of a split, in parallel; results are
/// ordered by template id.
pub fn identify_split<G: GalleryScorer + Sync + ?Sized>(
    split: &Split,
    gallery: &G,
    strategy: PoolingStrategy,
    descriptors: &HashMap<String, BilinearDescriptor>,
) -> Result<Vec<ProbeResult>> {
    let mut results = split
        .probe
        .par_iter()
        .map(|t| {
            let ds = t
                .media
                .iter()
                .map(|m| {
                    descriptors
                        .get(&m.media_id)
                        .ok_or_else(|| Error::Data(format!("no descriptor for medium {}", m.media_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            identify(t, gallery, strategy, &ds)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.template_id.cmp(&b.template_id));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmcCurve {
    /// Entry `r - 1` is the recall at rank `r`.
    pub recall_at_rank: Vec<f64>,
    pub mated_probe_count: usize,
}

impl CmcCurve {
    pub fn at_rank(&self, rank: usize) -> f64 {
        self.recall_at_rank[rank.clamp(1, self.recall_at_rank.len()) - 1]
    }
}

pub const DEFAULT_MAX_RANK: usize = 100;

pub fn compute_cmc(results: &[ProbeResult], max_rank: usize) -> Result<CmcCurve> {
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    let mated: Vec<Option<usize>> = results
        .iter()
        .filter(|r| r.true_subject_id.is_some())
        .map(ProbeResult::true_rank)
        .collect();
    if mated.is_empty() {
        return Err(Error::Protocol("no mated probes to compute CMC over".into()));
    }
    let mut hits = vec![0usize; max_rank];
    for rank in mated.iter().flatten() {
        if *rank <= max_rank {
            hits[rank - 1] += 1;
        }
    }
    let n = mated.len() as f64;
    let mut acc = 0;
    let recall_at_rank = hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect();
    Ok(CmcCurve {
        recall_at_rank,
        mated_probe_count: mated.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    /// Every impostor max score and mated true-identity score, plus ±∞.
    Auto,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fpir: f64,
    pub fnir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetCurve {
    /// Ascending threshold.
    pub points: Vec<DetPoint>,
    pub impostor_count: usize,
    pub mated_count: usize,
}

/// FPIR(t): impostors whose top score is ≥ t. FNIR(t): mated probes whose
/// true-identity score is < t, or, with `rank1_conditioned`, whose true
/// identity is also not ranked first.
pub fn compute_det(results: &[ProbeResult], thresholds: &Thresholds, rank1_conditioned: bool) -> Result<DetCurve> {
    let impostor_max: Vec<f64> = results
        .iter()
        .filter(|r| r.true_subject_id.is_none())
        .map(ProbeResult::max_score)
        .collect();
    let mated: Vec<(f64, bool)> = results
        .iter()
        .filter(|r| r.true_subject_id.is_some())
        .map(|r| (r.true_score().unwrap_or(f64::NEG_INFINITY), r.true_rank() == Some(1)))
        .collect();
    if impostor_max.is_empty() {
        return Err(Error::Protocol("DET needs at least one impostor probe".into()));
    }
    if mated.is_empty() {
        return Err(Error::Protocol("DET needs at least one mated probe".into()));
    }
    let mut ts: Vec<f64> = match thresholds {
        Thresholds::Auto => impostor_max
            .iter()
            .copied()
            .chain(mated.iter().map(|m| m.0))
            .chain([f64::NEG_INFINITY, f64::INFINITY])
            .collect(),
        Thresholds::Explicit(v) => {
            if v.iter().any(|t| t.is_nan()) {
                return Err(Error::Config("threshold list contains NaN".into()));
            }
            v.clone()
        }
    };
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let ni = impostor_max.len() as f64;
    let nm = mated.len() as f64;
    let points = ts
        .into_iter()
        .map(|t| {
            let fa = impostor_max.iter().filter(|&&s| s >= t).count();
            let miss = mated
                .iter()
                .filter(|&&(s, top)| s < t || (rank1_conditioned && !top))
                .count();
            DetPoint {
                threshold: t,
                fpir: fa as f64 / ni,
                fnir: miss as f64 / nm,
            }
        })
        .collect();
    Ok(DetCurve {
        points,
        impostor_count: impostor_max.len(),
        mated_count: mated.len(),
    })
}

/// FNIR at the smallest threshold whose FPIR ≤ `target`. When that FPIR is
/// strictly below the target, FNIR is interpolated linearly in FPIR against
/// the preceding (lower-threshold) point.
pub fn fnir_at_fpir(curve: &DetCurve, target: f64) -> f64 {
    let pts = &curve.points;
    let Some(i) = pts.iter().position(|p| p.fpir <= target) else {
        return pts.last().map_or(1.0, |p| p.fnir);
    };
    let p = pts[i];
    if p.fpir == target || i == 0 {
        return p.fnir;
    }
    let q = pts[i - 1];
    let frac = (target - p.fpir) / (q.fpir - p.fpir);
    p.fnir + frac * (q.fnir - p.fnir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    #[serde(rename = "fnir_at_fpir_0.1")]
    pub fnir_at_fpir_0_1: f64,
    #[serde(rename = "fnir_at_fpir_0.01")]
    pub fnir_at_fpir_0_01: f64,
}

impl Metrics {
    pub fn from_curves(cmc: &CmcCurve, det: &DetCurve) -> Self {
        Self {
            rank1: cmc.at_rank(1),
            rank5: cmc.at_rank(5),
            fnir_at_fpir_0_1: fnir_at_fpir(det, 0.1),
            fnir_at_fpir_0_01: fnir_at_fpir(det, 0.01),
        }
    }

    fn fields(&self) -> [f64; 4] {
        [self.rank1, self.rank5, self.fnir_at_fpir_0_1, self.fnir_at_fpir_0_01]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            rank1: f[0],
            rank5: f[1],
            fnir_at_fpir_0_1: f[2],
            fnir_at_fpir_0_01: f[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split_index: u32,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub splits: Vec<SplitMetrics>,
    pub mean: Metrics,
    /// Sample standard deviation (n - 1); 0 for a single split.
    pub std: Metrics,
}

impl EvalSummary {
    pub fn new(mut splits: Vec<SplitMetrics>) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Protocol("no splits to summarize".into()));
        }
        splits.sort_by_key(|s| s.split_index);
        let n = splits.len() as f64;
        let mut mean = [0.0; 4];
        for s in &splits {
            mean.iter_mut().zip(s.metrics.fields()).for_each(|(m, v)| *m += v / n);
        }
        let mut std = [0.0; 4];
        if splits.len() > 1 {
            for s in &splits {
                std.iter_mut()
                    .zip(s.metrics.fields())
                    .zip(mean)
                    .for_each(|((d, v), m)| *d += (v - m) * (v - m) / (n - 1.0));
            }
            std.iter_mut().for_each(|d| *d = d.sqrt());
        }
        Ok(Self {
            splits,
            mean: Metrics::from_fields(mean),
            std: Metrics::from_fields(std),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary is always serializable") + "\n"
    }
}

pub fn write_cmc_csv<W: Write>(cmc: &CmcCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "rank,recall")?;
    for (i, r) in cmc.recall_at_rank.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, r)?;
    }
    Ok(())
}

pub fn write_det_csv<W: Write>(det: &DetCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "threshold,fpir,fnir")?;
    for p in &det.points {
        writeln!(w, "{},{},{}", p.threshold, p.fpir, p.fnir)?;
    }
    Ok(())
}
