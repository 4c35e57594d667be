use anyhow::{Context, Result};

use bilin_core::formats::save_gallery;
use bilin_core::train::svm::{derive_seed, train_ovr_svm, SvmConfig};

use super::{ensure_dir, load_descriptors, load_splits, path_string, split_file};
use crate::params::Params;
use crate::TrainGalleryArgs;

const KEYS: &[&str] = &["data", "descriptors", "out", "seed", "c", "epochs", "balanced", "allow_degenerate"];

pub fn run(a: TrainGalleryArgs) -> Result<()> {
    let mut p = Params::new("train-gallery", KEYS, a.config.as_deref())?;
    p.flag("data", Some(path_string(&a.data)));
    p.flag("descriptors", Some(path_string(&a.descriptors)));
    p.flag("out", Some(path_string(&a.out)));
    p.seed(a.seed)?;
    p.flag("c", a.c);
    p.flag("epochs", a.epochs);
    p.flag("balanced", a.balanced.then_some(true));
    p.flag("allow_degenerate", a.allow_degenerate.then_some(true));
    let d = SvmConfig::default();
    let base = SvmConfig {
        c: p.get("c", d.c)?,
        epochs: p.get("epochs", d.epochs)?,
        balanced: p.get_bool("balanced", d.balanced)?,
        allow_degenerate: p.get_bool("allow_degenerate", d.allow_degenerate)?,
        seed: p.get("seed", d.seed)?,
    };

    let splits = load_splits(&a.data)?;
    ensure_dir(&a.out)?;
    for s in &splits {
        let media = s.gallery.iter().flat_map(|t| t.media.iter());
        let descs = load_descriptors(&a.descriptors, media)?;
        let samples: Vec<_> = s
            .gallery
            .iter()
            .flat_map(|t| t.media.iter().map(move |m| (t.subject_id.clone(), m)))
            .map(|(id, m)| (id, descs[&m.media_id].clone()))
            .collect();
        let cfg = SvmConfig {
            seed: derive_seed(base.seed, s.split_index as u64),
            ..base.clone()
        };
        let models = train_ovr_svm(&samples, &cfg).with_context(|| {
            format!("split {}: gallery training failed (see --allow-degenerate for unseparable identities)", s.split_index)
        })?;
        save_gallery(&models, a.out.join(split_file(s.split_index, "bgm")))?;
        println!(
            "split {:02}: {} models over {} gallery media",
            s.split_index,
            models.len(),
            samples.len()
        );
    }
    p.write_provenance(&a.out)?;
    Ok(())
}
