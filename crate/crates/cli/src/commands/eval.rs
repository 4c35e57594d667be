use std::fs::{self, File};
use std::io::BufWriter;

use anyhow::{Context, Result};

use bilin_core::eval::{
    compute_cmc, compute_det, identify_split, write_cmc_csv, write_det_csv, EvalSummary, Metrics, PoolingStrategy,
    SplitMetrics, Thresholds, DEFAULT_MAX_RANK,
};
use bilin_core::formats::load_gallery;

use super::{ensure_dir, load_descriptors, load_splits, path_string, split_file};
use crate::params::Params;
use crate::{EvalArgs, Pooling, Usage};

const KEYS: &[&str] = &["data", "descriptors", "models", "out", "pooling", "fnir_rank1", "max_rank"];
pub const SUMMARY_FILE: &str = "summary.json";

pub fn run(a: EvalArgs) -> Result<()> {
    let mut p = Params::new("eval", KEYS, a.config.as_deref())?;
    p.flag("data", Some(path_string(&a.data)));
    p.flag("descriptors", Some(path_string(&a.descriptors)));
    p.flag("models", Some(path_string(&a.models)));
    p.flag("out", Some(path_string(&a.out)));
    p.flag(
        "pooling",
        a.pooling.map(|m| match m {
            Pooling::Score => "score",
            Pooling::Feature => "feature",
        }),
    );
    p.flag("fnir_rank1", a.fnir_rank1.then_some(true));
    p.flag("max_rank", a.max_rank);
    let strategy = match p.get("pooling", "score".to_string())?.as_str() {
        "score" => PoolingStrategy::ScorePooling,
        "feature" => PoolingStrategy::FeaturePooling,
        other => return Err(Usage(format!("unknown pooling {other:?}; use score or feature")).into()),
    };
    let rank1_conditioned = p.get_bool("fnir_rank1", false)?;
    let max_rank = p.get("max_rank", DEFAULT_MAX_RANK)?;

    let splits = load_splits(&a.data)?;
    ensure_dir(&a.out)?;
    let mut per_split = Vec::with_capacity(splits.len());
    for s in &splits {
        let model_path = a.models.join(split_file(s.split_index, "bgm"));
        if !model_path.is_file() {
            return Err(Usage(format!(
                "missing gallery models {}; run `bilin train-gallery` first",
                model_path.display()
            ))
            .into());
        }
        let gallery = load_gallery(&model_path)?;
        let descs = load_descriptors(&a.descriptors, s.probe.iter().flat_map(|t| t.media.iter()))?;
        let results = identify_split(s, &gallery, strategy, &descs)?;
        let cmc = compute_cmc(&results, max_rank).with_context(|| format!("split {}", s.split_index))?;
        let det = compute_det(&results, &Thresholds::Auto, rank1_conditioned)
            .with_context(|| format!("split {}", s.split_index))?;

        let cmc_path = a.out.join(format!("cmc_{}", split_file(s.split_index, "csv")));
        let det_path = a.out.join(format!("det_{}", split_file(s.split_index, "csv")));
        write_cmc_csv(&cmc, BufWriter::new(File::create(&cmc_path)?)).context("writing CMC")?;
        write_det_csv(&det, BufWriter::new(File::create(&det_path)?)).context("writing DET")?;
        per_split.push(SplitMetrics {
            split_index: s.split_index,
            metrics: Metrics::from_curves(&cmc, &det),
        });
    }
    let summary = EvalSummary::new(per_split)?;
    fs::write(a.out.join(SUMMARY_FILE), summary.to_json()).context("writing summary")?;
    p.write_provenance(&a.out)?;
    let (m, sd) = (summary.mean, summary.std);
    println!(
        "rank-1 {:.3} ± {:.3}, rank-5 {:.3} ± {:.3}, FNIR@FPIR=0.1 {:.3} ± {:.3}, FNIR@FPIR=0.01 {:.3} ± {:.3}",
        m.rank1, sd.rank1, m.rank5, sd.rank5, m.fnir_at_fpir_0_1, sd.fnir_at_fpir_0_1, m.fnir_at_fpir_0_01, sd.fnir_at_fpir_0_01
    );
    Ok(())
}
