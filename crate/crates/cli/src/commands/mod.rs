//! One module per subcommand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;

use bilin_core::formats::load_descriptor;
use bilin_core::protocol::metadata::{load_metadata, LoadOptions, MediaItem, Split};
use bilin_core::BilinearDescriptor;

use crate::Usage;

pub mod encode;
pub mod eval;
pub mod finetune;
pub mod gallery;
pub mod plot;
pub mod synth;

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub(crate) fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Where `bilin encode` writes the descriptor for a medium.
pub(crate) fn descriptor_path(root: &Path, media: &MediaItem) -> PathBuf {
    root.join(media.source_path.with_extension("bds"))
}

pub(crate) fn load_splits(data: &Path) -> Result<Vec<Split>> {
    if !data.exists() {
        return Err(Usage(format!("dataset {} does not exist; create one with `bilin synth`", data.display())).into());
    }
    Ok(load_metadata(data, &LoadOptions::default())?)
}

/// Loads the descriptors of `media`, keyed by media id.
pub(crate) fn load_descriptors<'a>(
    root: &Path,
    media: impl Iterator<Item = &'a MediaItem>,
) -> Result<HashMap<String, BilinearDescriptor>> {
    let mut unique: Vec<&MediaItem> = media.collect();
    unique.sort_by(|a, b| a.media_id.cmp(&b.media_id));
    unique.dedup_by(|a, b| a.media_id == b.media_id);
    unique
        .par_iter()
        .map(|m| {
            let path = descriptor_path(root, m);
            if !path.is_file() {
                return Err(Usage(format!(
                    "missing descriptor {} for medium {}; run `bilin encode` over the dataset first",
                    path.display(),
                    m.media_id
                ))
                .into());
            }
            let d = load_descriptor(&path).with_context(|| format!("loading {}", path.display()))?;
            Ok((m.media_id.clone(), d))
        })
        .collect()
}

pub(crate) fn split_file(index: u32, ext: &str) -> String {
    format!("split_{index:02}.{ext}")
}
