use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use walkdir::WalkDir;

use bilin_core::encoder::{encode, mean_pool_descriptor};
use bilin_core::formats::{load_feature_map, save_descriptor};
use bilin_core::BilinearDescriptor;

use super::{ensure_dir, path_string};
use crate::params::Params;
use crate::{EncodeArgs, EncodeMode, Usage};

const KEYS: &[&str] = &["input", "output", "mode"];
pub const MANIFEST_FILE: &str = "manifest.txt";

/// `.bfm` files under `root`, as sorted relative paths.
fn find_maps(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Usage(format!("input {} is not a directory", root.display())).into());
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e == "bfm") {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    out.sort();
    Ok(out)
}

fn encode_one(path: &Path, mode: EncodeMode) -> bilin_core::Result<BilinearDescriptor> {
    let map = load_feature_map(path)?;
    match mode {
        EncodeMode::Bilinear => encode(&map, &map),
        EncodeMode::FirstOrder => Ok(mean_pool_descriptor(&map)),
    }
}

pub fn run(a: EncodeArgs) -> Result<()> {
    let mut p = Params::new("encode", KEYS, a.config.as_deref())?;
    p.flag("input", Some(path_string(&a.input)));
    p.flag("output", Some(path_string(&a.output)));
    p.flag(
        "mode",
        a.mode.map(|m| match m {
            EncodeMode::Bilinear => "bilinear",
            EncodeMode::FirstOrder => "first-order",
        }),
    );
    let mode = match p.get("mode", "bilinear".to_string())?.as_str() {
        "bilinear" => EncodeMode::Bilinear,
        "first-order" => EncodeMode::FirstOrder,
        other => return Err(Usage(format!("unknown encode mode {other:?}")).into()),
    };

    let inputs = find_maps(&a.input)?;
    if inputs.is_empty() {
        return Err(Usage(format!("no .bfm feature maps under {}", a.input.display())).into());
    }
    let targets: Vec<PathBuf> = inputs.iter().map(|r| a.output.join(r.with_extension("bds"))).collect();
    let existing = targets.iter().filter(|t| t.exists()).count();
    if existing > 0 && !a.force {
        eprintln!(
            "notice: {existing} of {} descriptors already exist under {}; nothing written (use --force to overwrite)",
            targets.len(),
            a.output.display()
        );
        return Ok(());
    }

    let results: Vec<bilin_core::Result<BilinearDescriptor>> = inputs
        .par_iter()
        .map(|r| encode_one(&a.input.join(r), mode))
        .collect();
    let failures: Vec<(&PathBuf, &bilin_core::Error)> = inputs
        .iter()
        .zip(&results)
        .filter_map(|(r, res)| res.as_ref().err().map(|e| (r, e)))
        .collect();
    if !failures.is_empty() {
        for (r, e) in &failures {
            eprintln!("{}: {e}", r.display());
        }
        let n = failures.len();
        let first = results.into_iter().find_map(|r| r.err()).expect("at least one failure");
        return Err(anyhow::Error::new(first).context(format!("{n} of {} feature maps failed to encode", inputs.len())));
    }

    ensure_dir(&a.output)?;
    for (target, res) in targets.iter().zip(results) {
        if let Some(parent) = target.parent() {
            ensure_dir(parent)?;
        }
        save_descriptor(&res.expect("failures handled above"), target)?;
    }
    let manifest: String = inputs.iter().map(|r| format!("{}\n", r.display())).collect();
    fs::write(a.output.join(MANIFEST_FILE), manifest).context("writing manifest")?;
    p.write_provenance(&a.output)?;
    println!("encoded {} feature maps into {}", inputs.len(), a.output.display());
    Ok(())
}
