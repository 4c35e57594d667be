use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use serde::Serialize;

use bilin_core::extractor::ConvParams;
use bilin_core::protocol::synth::ToyTaskConfig;
use bilin_core::train::finetune::{finetune_softmax, FinetuneOutcome, SoftmaxHead, TrainConfig};

use super::{ensure_dir, path_string};
use crate::params::Params;
use crate::FinetuneArgs;

const KEYS: &[&str] = &[
    "out",
    "seed",
    "epochs",
    "lr_lower",
    "lr_last",
    "lr_decay_factor",
    "dropout",
    "batch_size",
    "patience",
    "n_per_class",
    "image_size",
    "noise",
    "out_channels",
];

pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "loss.csv";

#[derive(Serialize)]
struct SavedModel<'a> {
    extractor: &'a ConvParams,
    head: &'a SoftmaxHead,
}

fn trace_csv(out: &FinetuneOutcome) -> String {
    let mut s = String::from("epoch,loss,accuracy,lr_lower,lr_last\n");
    for (e, (loss, acc)) in out.loss_trace.iter().zip(&out.accuracy_trace).enumerate() {
        let (lo, la) = match e.checked_sub(1).and_then(|i| out.lr_trace.get(i)) {
            Some((lo, la)) => (lo.to_string(), la.to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(s, "{e},{loss},{acc},{lo},{la}").expect("writing to a String");
    }
    s
}

pub fn run(a: FinetuneArgs) -> Result<()> {
    let mut p = Params::new("finetune", KEYS, a.config.as_deref())?;
    p.flag("out", Some(path_string(&a.out)));
    p.seed(a.seed)?;
    p.flag("epochs", a.epochs);
    p.flag("lr_lower", a.lr_lower);
    p.flag("lr_last", a.lr_last);
    p.flag("lr_decay_factor", a.lr_decay_factor);
    p.flag("dropout", a.dropout);
    p.flag("batch_size", a.batch_size);
    p.flag("patience", a.patience);
    p.flag("n_per_class", a.n_per_class);
    p.flag("image_size", a.image_size);
    p.flag("noise", a.noise);
    p.flag("out_channels", a.out_channels);

    let t = TrainConfig::default();
    let k = ToyTaskConfig::default();
    let seed = p.get("seed", k.seed)?;
    let train = TrainConfig {
        lr_lower: p.get("lr_lower", t.lr_lower)?,
        lr_last: p.get("lr_last", t.lr_last)?,
        lr_decay_factor: p.get("lr_decay_factor", t.lr_decay_factor)?,
        epochs: p.get("epochs", t.epochs)?,
        dropout_rate: p.get("dropout", t.dropout_rate)?,
        batch_size: p.get("batch_size", t.batch_size)?,
        patience: p.get("patience", t.patience)?,
        seed,
        ..t
    };
    let task = ToyTaskConfig {
        n_per_class: p.get("n_per_class", k.n_per_class)?,
        image_size: p.get("image_size", k.image_size)?,
        noise: p.get("noise", k.noise)?,
        out_channels: p.get("out_channels", k.out_channels)?,
        seed,
        ..k
    };
    train.validate()?;
    let (ext, head, data) = task.build()?;

    ensure_dir(&a.out)?;
    p.write_provenance(&a.out)?;
    let out = finetune_softmax(&ext, &head, &data, None, &train)?;
    let json = serde_json::to_string_pretty(&SavedModel {
        extractor: &out.extractor,
        head: &out.head,
    })?;
    fs::write(a.out.join(MODEL_FILE), json + "\n").context("writing model")?;
    fs::write(a.out.join(TRACE_FILE), trace_csv(&out)).context("writing loss trace")?;
    let first = out.loss_trace[0];
    let last = *out.loss_trace.last().expect("trace has the initial entry");
    println!(
        "loss {first:.4} -> {last:.4}, training accuracy {:.3} after {} epochs",
        out.accuracy_trace.last().expect("trace has the initial entry"),
        train.epochs
    );
    Ok(())
}
