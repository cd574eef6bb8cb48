use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ghl::datasets::data_dir;
use ghl::trainer::checkpoint::Checkpoint;
use ghl::trainer::metrics::{MetricsLayout, MetricsWriter};
use ghl::trainer::{train_on, DataSplits, TrainConfig};

use crate::manifest::{canonical_json, content_hash, RunManifest};
use crate::rundir;

pub const DEFAULT_CHECKPOINT: &str = "checkpoint.ckpt";

pub struct TrainArgs<'a> {
    pub config: &'a TrainConfig,
    pub name: &'a str,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    pub deterministic: bool,
    pub resume: bool,
    pub quiet: bool,
    /// Test hook: fail after this epoch's checkpoint, as if interrupted.
    pub stop_after: Option<usize>,
}

pub struct TrainResult {
    pub dir: PathBuf,
    pub final_record: ghl::trainer::MetricsRecord,
}

/// Keep the header and every row up to `epoch` of an existing table.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let row_epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
        if i == 0 || row_epoch.is_some_and(|e| e <= epoch) {
            kept.push_str(&line);
            kept.push_str("\r\n");
        }
    }
    std::fs::write(path, kept).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: TrainArgs) -> Result<TrainResult> {
    let hash = content_hash(&canonical_json(args.config)?);
    let dir = args.out_dir.clone().unwrap_or_else(|| rundir::default_dir(args.name, &hash));
    rundir::create(&dir)?;

    let ckpt_rel = args.config.checkpoint_path.clone().unwrap_or_else(|| DEFAULT_CHECKPOINT.into());
    let mut runtime = args.config.clone();
    runtime.checkpoint_path = Some(rundir::inside(&dir, &ckpt_rel)?);

    let resume = if args.resume {
        let path = runtime.checkpoint_path.as_ref().unwrap();
        let mut ckpt = Checkpoint::load(path)?;
        // the run directory may have moved since the checkpoint was written
        ckpt.config.checkpoint_path = runtime.checkpoint_path.clone();
        if ckpt.config != runtime {
            bail!("checkpoint {} was written with a different configuration", path.display());
        }
        Some(ckpt)
    } else {
        None
    };

    RunManifest::new("train", args.config, &dir, args.threads)?.write(&dir)?;
    let data = DataSplits::load(&runtime, &data_dir())?;
    let spec = runtime.arch.resolve(data.train.sample_shape(), data.train.classes)?;
    let layout = MetricsLayout {
        layers: spec.weighted_layers().map(|(i, _)| i).collect(),
        wall_clock: !args.deterministic,
    };

    let metrics_path = dir.join("metrics.csv");
    let timing_path = dir.join("timing.csv");
    let (mut metrics, mut timing) = match &resume {
        Some(ckpt) => {
            truncate_metrics(&metrics_path, ckpt.epoch)?;
            truncate_metrics(&timing_path, ckpt.epoch)?;
            let open = |p: &Path| OpenOptions::new().append(true).open(p).with_context(|| format!("opening {}", p.display()));
            (MetricsWriter::append(open(&metrics_path)?, layout), open(&timing_path)?)
        }
        None => {
            let create = |p: &Path| File::create(p).with_context(|| format!("creating {}", p.display()));
            let mut timing = create(&timing_path)?;
            write!(timing, "epoch,wall_seconds\r\n")?;
            (MetricsWriter::new(create(&metrics_path)?, layout)?, timing)
        }
    };

    let (quiet, stop_after) = (args.quiet, args.stop_after);
    let outcome = train_on(&runtime, &data, resume, &mut |r| {
        metrics.write(r)?;
        write!(timing, "{},{}\r\n", r.epoch, r.wall_seconds).map_err(|e| ghl::Error::State(format!("writing timing: {e}")))?;
        if !quiet {
            let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
            eprintln!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}{val}",
                r.epoch, r.train_loss, r.train_acc, r.test_acc
            );
        }
        if stop_after == Some(r.epoch) {
            return Err(ghl::Error::State(format!("stopped after epoch {} as requested", r.epoch)));
        }
        Ok(())
    })?;
    let final_record = match outcome.records.last() {
        Some(r) => r.clone(),
        None => bail!("nothing to train: the checkpoint already covers all {} epochs", runtime.epochs),
    };
    Ok(TrainResult { dir, final_record })
}
