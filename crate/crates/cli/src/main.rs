use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mainet::ablate::run_ablation;
use mainet::config::{Profile, RunConfig};
use mainet::data::{gen_synthetic, read_dataset, samples_from_recordings, write_dataset, ModalSample};
use mainet::fusion::{self, FusionMethod};
use mainet::model::{Model, ModelConfig};
use mainet::params::ParamStore;
use mainet::train::{evaluate, split_dataset, train, Split, TrainConfig};
use mainet::verify::run_checks;
use mainet::Error;

/// Multimodal feature fusion and evidential-reasoning decision fusion.
#[derive(Parser, Debug)]
#[command(name = "mainet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file with dotted keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (shorthand for --set seed=N)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "mainet-out")]
    out: PathBuf,
    /// Config override, key=value (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Size and budget preset: smoke, desk or full
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Number of samples (shorthand for --set data.n_samples=N)
    #[arg(long, global = true)]
    n: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic trimodal dataset into --out
    Gen,
    /// Window raw recordings into a dataset in --out
    Preprocess {
        /// A recording directory or a directory of recordings
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model on a dataset; checkpoints and epochs.csv go to --out
    Train {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Continue from the `last` checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one subset of a dataset
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint name inside the directory
        #[arg(long, default_value = "best")]
        stem: String,
        /// train, val, test or all
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Combine per-modality evidences from a CSV (sample_id, modality_id, p1..pN, w, r)
    Fuse {
        #[arg(long)]
        input: PathBuf,
        /// er, dst, pa or mv
        #[arg(long, default_value = "er")]
        method: String,
    },
    /// Train and compare modality subsets, fusion mechanisms and decision rules
    Ablate {
        /// Dataset directory; a synthetic set is generated when omitted
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the built-in oracle suite; the exit code counts failed checks
    Verify,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 3,
        Error::Malformed(_)
        | Error::Empty(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Image(_)
        | Error::Wav(_)
        | Error::Shape(_)
        | Error::Dimension { .. } => 4,
        _ => 1,
    }
}

fn load_config(c: &Common) -> mainet::Result<RunConfig> {
    let profile = Profile::parse(&c.profile)?;
    let text = match &c.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                Error::Config(format!("config file {} not found", p.display()))
            } else {
                Error::Io(e)
            }
        })?),
        None => None,
    };
    let mut overrides = Vec::new();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(n) = c.n {
        overrides.push(format!("data.n_samples={n}"));
    }
    overrides.extend(c.overrides.iter().cloned());
    RunConfig::build(profile, text.as_deref(), &overrides)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> mainet::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> mainet::Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn split_for(samples: &[ModalSample], tc: &TrainConfig) -> mainet::Result<Split> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    split_dataset(&labels, &tc.split, tc.seed)
}

fn run(cli: Cli) -> mainet::Result<u8> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.cmd {
        Cmd::Gen => {
            let synth = cfg.synth()?;
            prepare_out(out, &cfg)?;
            let samples = gen_synthetic(&synth)?;
            let m = write_dataset(out, &samples, synth.seed, &cfg.to_toml(), "synthetic")?;
            println!("wrote {} samples to {} (class counts {:?})", m.samples, out.display(), m.class_counts);
        }
        Cmd::Preprocess { input } => {
            let samples = samples_from_recordings(
                &input,
                cfg.float("preprocess.window_s"),
                cfg.float("preprocess.overlap"),
                &cfg.mel(),
                cfg.int("data.map_size"),
            )?;
            prepare_out(out, &cfg)?;
            let m = write_dataset(out, &samples, cfg.seed(), &cfg.to_toml(), &input.display().to_string())?;
            println!("wrote {} windows to {} (class counts {:?})", m.samples, out.display(), m.class_counts);
        }
        Cmd::Train { data, resume } => {
            let (samples, _) = read_dataset(&data)?;
            let (mcfg, tc) = (cfg.model()?, cfg.train()?);
            prepare_out(out, &cfg)?;
            let split = split_for(&samples, &tc)?;
            let mut model = Model::new(mcfg, tc.seed)?;
            eprintln!(
                "training {} parameters on {} / {} / {} samples",
                model.num_params(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            let summary = train(&mut model, &samples, &split, &tc, Some(out), resume, &mut |r| {
                eprintln!(
                    "epoch {:3}  lr {:.2e}  train loss {:.4} acc {:6.2}%  val loss {:.4} acc {:6.2}%",
                    r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
                )
            })?;
            let val = evaluate(&model, &samples, &split.val)?;
            write_json(
                &out.join("val_metrics.json"),
                &json!({ "config_hash": cfg.hash(), "best_epoch": summary.best_epoch, "metrics": val.metrics }),
            )?;
            println!("best epoch {}", summary.best_epoch);
            print!("{}", val.metrics.to_text());
        }
        Cmd::Eval {
            data,
            checkpoint,
            stem,
            subset,
        } => {
            let (samples, _) = read_dataset(&data)?;
            let (params, meta) = ParamStore::load(&checkpoint, &stem)?;
            let mcfg: ModelConfig = serde_json::from_value(meta["model"].clone())
                .map_err(|e| Error::Malformed(format!("checkpoint model config: {e}")))?;
            let tc: TrainConfig = match meta.get("train") {
                Some(t) => serde_json::from_value(t.clone())
                    .map_err(|e| Error::Malformed(format!("checkpoint train config: {e}")))?,
                None => cfg.train()?,
            };
            let split = split_for(&samples, &tc)?;
            let idx: Vec<usize> = match subset.as_str() {
                "train" => split.train,
                "val" => split.val,
                "test" => split.test,
                "all" => (0..samples.len()).collect(),
                other => return Err(Error::Config(format!("unknown subset `{other}`"))),
            };
            prepare_out(out, &cfg)?;
            let model = Model { cfg: mcfg, params };
            let ev = evaluate(&model, &samples, &idx)?;
            write_json(
                &out.join(format!("metrics_{subset}.json")),
                &json!({ "config_hash": cfg.hash(), "subset": subset, "samples": idx.len(), "loss": ev.loss, "metrics": ev.metrics }),
            )?;
            let text = ev.metrics.to_text();
            fs::write(out.join(format!("metrics_{subset}.txt")), &text)?;
            print!("{text}");
        }
        Cmd::Fuse { input, method } => {
            let method = FusionMethod::parse(&method)
                .ok_or_else(|| Error::Config(format!("unknown fusion method `{method}`")))?;
            if method == FusionMethod::Lf {
                return Err(Error::Config("learned fusion needs trained weights; use er, dst, pa or mv".into()));
            }
            let groups = fusion::read_evidence_csv(fs::File::open(&input)?)?;
            let mut records = Vec::with_capacity(groups.len());
            for g in &groups {
                let joint = fusion::fuse(method, &g.evidences, None)
                    .map_err(|e| Error::Malformed(format!("sample `{}`: {e}", g.sample_id)))?;
                records.push(json!({
                    "sample_id": g.sample_id,
                    "modalities": g.modalities,
                    "method": method.name(),
                    "joint": joint,
                    "decision": fusion::decide(&joint),
                }));
            }
            prepare_out(out, &cfg)?;
            let doc = json!({ "config_hash": cfg.hash(), "records": records });
            write_json(&out.join("fused.json"), &doc)?;
            println!("{}", serde_json::to_string_pretty(&doc["records"])?);
        }
        Cmd::Ablate { data } => {
            let samples = match data {
                Some(d) => read_dataset(&d)?.0,
                None => gen_synthetic(&cfg.synth()?)?,
            };
            let (mcfg, tc, plan) = (cfg.model()?, cfg.train()?, cfg.plan()?);
            prepare_out(out, &cfg)?;
            let split = split_for(&samples, &tc)?;
            let report = run_ablation(&samples, &split, &mcfg, &tc, plan, &mut |m| eprintln!("{m}"))?;
            let mut doc = serde_json::to_value(&report)?;
            doc["config_hash"] = json!(cfg.hash());
            write_json(&out.join("ablation.json"), &doc)?;
            let text = report.to_text();
            fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Cmd::Verify => {
            let checks = run_checks(cfg.seed());
            let mut failed = 0usize;
            for c in &checks {
                println!("{} {:<45} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            return Ok(failed.min(255) as u8);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
