mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use snnet_core::data::{build_dataset, Manifest, Split, MANIFEST_FILE};
use snnet_core::dsp::wav::{read_wav, write_wav};
use snnet_core::infer::Model;
use snnet_core::io::write_atomic;
use snnet_core::metrics::Summary;
use snnet_core::model::SnNet;
use snnet_core::nn::ParamStore;
use snnet_core::train::{log_csv, train_separation, train_stage1, train_stage2, Checkpoint, Clips, Stage};

use config::RunConfig;

const CHECKPOINT_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "snnet", version, about = "Two-branch speech/noise enhancement: data, training, and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of clean/noise/noisy WAV triples plus a manifest.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (branches), stage 2 (merge), or the separation network.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest; overrides the config's `manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Enhance a 16 kHz mono 16-bit WAV file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Split a two-source mixture into two WAV files.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out1: PathBuf,
        #[arg(long)]
        out2: PathBuf,
    },
    /// Score a checkpoint on the test split of a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-clip CSV report; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention matrices and interaction masks as CSV files.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn threads() -> usize {
    std::env::var("SNNET_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn synth_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let manifest = build_dataset(&cfg.data, out)?;
    println!("wrote {} clips and {}", manifest.entries.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(
    stage: Stage,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    manifest: Option<&Path>,
    init: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(m) = manifest {
        cfg.manifest = Some(m.to_path_buf());
    }
    let Some(mpath) = cfg.manifest.clone() else {
        bail!("no dataset manifest: pass --manifest or set `manifest` in the config");
    };
    let manifest = Manifest::read(&manifest_path(&mpath)).context("loading training manifest")?;
    let clips = Clips::<f32>::load(&manifest, Split::Train, cfg.train.clip_samples)?;
    write_atomic(&out.join(CONFIG_ECHO), cfg.to_json()?.as_bytes())?;
    let outcome = match stage {
        Stage::One => {
            let net = SnNet::enhancement(cfg.model.clone())?;
            let store: ParamStore<f32> = net.init(cfg.train.seed)?;
            train_stage1(&net, store, &clips, &cfg.train)?
        }
        Stage::Two => {
            let init = init.context("stage 2 needs --init")?;
            let ck = Checkpoint::<f32>::load(init).with_context(|| format!("loading {}", init.display()))?;
            train_stage2(ck, &clips, &cfg.train)?
        }
        Stage::Separation => {
            let net = SnNet::separation(cfg.model.clone())?;
            let store: ParamStore<f32> = net.init(cfg.train.seed)?;
            train_separation(&net, store, &clips, &cfg.train)?
        }
    };
    write_atomic(&out.join(LOG_FILE), log_csv(&outcome.records).as_bytes())?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    let first = outcome.records.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.records.last().map_or(f64::NAN, |r| r.loss);
    println!("stage {stage}: {} steps, loss {first:.6} -> {last:.6}", outcome.records.len());
    if let Some([keep, swap]) = outcome.permutations {
        println!("permutations: identity {keep}, swap {swap}");
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model<f32>> {
    let ck = Checkpoint::<f32>::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(Model::from_checkpoint(ck)?)
}

fn enhance(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let x = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let y = model.enhance(&x)?;
    write_wav(output, &y)?;
    Ok(())
}

fn separate(ckpt: &Path, input: &Path, out1: &Path, out2: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let x = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let [a, b] = model.separate(&x)?;
    write_wav(out1, &a)?;
    write_wav(out2, &b)?;
    Ok(())
}

fn fmt_summary(name: &str, s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{name}: mean {:.3} median {:.3}", s.mean, s.median),
        None => format!("{name}: n/a"),
    }
}

fn evaluate(ckpt: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(ckpt)?;
    let manifest = Manifest::read(&manifest_path(manifest))?;
    let report = model.evaluate(&manifest, Split::Test, threads())?;
    let csv = report.to_csv();
    match out {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    eprintln!("clips: {}", report.rows.len());
    eprintln!("{}", fmt_summary("ssnr_db", report.ssnr()));
    eprintln!("{}", fmt_summary("si_sdr_db", report.si_sdr()));
    eprintln!("{}", fmt_summary("si_sdri_db", report.si_sdri()));
    for name in ["pesq", "stoi", "csig", "cbak", "covl"] {
        eprintln!("{name}: n/a");
    }
    Ok(())
}

fn inspect(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::<f64>::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model = Model::from_checkpoint(ck)?;
    let x = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let mats = model.inspect(&x)?;
    for m in &mats {
        write_atomic(&out.join(format!("{}.csv", m.name)), m.to_csv().as_bytes())?;
    }
    println!("wrote {} matrices to {}", mats.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, seed, out } => synth_data(config.as_deref(), seed, &out),
        Command::Train { stage, config, seed, out, manifest, init } => {
            train(stage, config.as_deref(), seed, &out, manifest.as_deref(), init.as_deref())
        }
        Command::Enhance { ckpt, input, output } => enhance(&ckpt, &input, &output),
        Command::Separate { ckpt, input, out1, out2 } => separate(&ckpt, &input, &out1, &out2),
        Command::Evaluate { ckpt, manifest, out } => evaluate(&ckpt, &manifest, out.as_deref()),
        Command::Inspect { ckpt, input, out } => inspect(&ckpt, &input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Train { stage: Stage::Two, init: None, .. } = &cli.command {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "--stage 2 requires --init <CKPT>")
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
