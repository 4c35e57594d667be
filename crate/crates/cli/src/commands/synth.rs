use anyhow::Result;

use bilin_core::protocol::synth::{synth_generate, SynthConfig};

use super::{ensure_dir, path_string};
use crate::params::{parse_dims, Params};
use crate::SynthArgs;

const KEYS: &[&str] = &[
    "out",
    "seed",
    "num_identities",
    "train_identities",
    "templates_per_identity",
    "media_per_template",
    "map_dims",
    "impostor_fraction",
    "gallery_fraction",
    "noise_sigma",
    "num_splits",
];

pub fn config(a: &SynthArgs) -> Result<(SynthConfig, Params)> {
    let mut p = Params::new("synth", KEYS, a.config.as_deref())?;
    p.flag("out", Some(path_string(&a.out)));
    p.seed(a.seed)?;
    p.flag("num_identities", a.num_identities);
    p.flag("train_identities", a.train_identities);
    p.flag("templates_per_identity", a.templates_per_identity);
    p.flag("media_per_template", a.media_per_template);
    p.flag("map_dims", a.map_dims.as_ref());
    p.flag("impostor_fraction", a.impostor_fraction);
    p.flag("gallery_fraction", a.gallery_fraction);
    p.flag("noise_sigma", a.noise_sigma);
    p.flag("num_splits", a.num_splits);

    let d = SynthConfig::default();
    let (h, w, c) = d.map_dims;
    let cfg = SynthConfig {
        num_identities: p.get("num_identities", d.num_identities)?,
        train_identities: p.get("train_identities", d.train_identities)?,
        templates_per_identity: p.get("templates_per_identity", d.templates_per_identity)?,
        media_per_template: p.get("media_per_template", d.media_per_template)?,
        map_dims: parse_dims(&p.get("map_dims", format!("{h}x{w}x{c}"))?)?,
        impostor_fraction: p.get("impostor_fraction", d.impostor_fraction)?,
        gallery_fraction: p.get("gallery_fraction", d.gallery_fraction)?,
        noise_sigma: p.get("noise_sigma", d.noise_sigma)?,
        num_splits: p.get("num_splits", d.num_splits)?,
        seed: p.get("seed", d.seed)?,
    };
    Ok((cfg, p))
}

pub fn run(a: SynthArgs) -> Result<()> {
    let (cfg, p) = config(&a)?;
    cfg.validate()?;
    ensure_dir(&a.out)?;
    let ds = synth_generate(&cfg, &a.out)?;
    p.write_provenance(&a.out)?;
    println!(
        "wrote {} feature maps and {} splits to {}",
        ds.maps.len(),
        ds.splits.len(),
        a.out.display()
    );
    Ok(())
}
