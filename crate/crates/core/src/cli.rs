//! Command-line interface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::audio::Waveform;
use crate::checkpoint::load_checkpoint;
use crate::data::{generate_toy_corpus, materialize_test_set, read_specs, write_specs, Manifest, SourceBank, ToyCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_comparison, EvalReport};
use crate::model::AvSepNet;
use crate::nn::Parameterized;
use crate::separator::SeparatorConfig;
use crate::train::{train, TrainConfig};
use crate::visual::VisualFeatures;

#[derive(Debug, Parser)]
#[command(name = "avsep", version, about = "Audio-visual speech separation with incomplete visual cues")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic toy corpus with train/valid/test manifests.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with toy corpus settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Utterances per speaker held out for validation.
        #[arg(long, default_value_t = 2)]
        valid: usize,
        /// Utterances per speaker held out for testing.
        #[arg(long, default_value_t = 4)]
        test: usize,
    },
    /// Write a fixed-condition evaluation spec file.
    MakeSpecs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        speakers: usize,
        /// Speakers with a visual cue; defaults to all.
        #[arg(long)]
        guided: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        frame_mask_rate: f64,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on spec files; writes a JSONL report and prints a table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "spec", required = true)]
        specs: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        clip_seconds: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate one mixture; guided estimates follow the order of the visual files.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mix: PathBuf,
        #[arg(long = "visual")]
        visuals: Vec<PathBuf>,
        #[arg(long)]
        speakers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare evaluation reports, or print the parameter count with --params.
    Report {
        reports: Vec<PathBuf>,
        #[arg(long)]
        params: bool,
        /// Training config whose separator section is counted with --params.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Parameter totals grouped by component, plus notes on unstated hyperparameters.
pub fn param_report(cfg: &SeparatorConfig) -> Result<String> {
    let net = AvSepNet::<f32>::new(cfg)?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, p) in net.params() {
        let parts: Vec<&str> = name.split('.').collect();
        let key = match parts.as_slice() {
            ["separator", "blocks", _, sub, ..] => format!("separator.blocks.*.{sub}"),
            [a, b, ..] => format!("{a}.{b}"),
            _ => name.clone(),
        };
        *groups.entry(key).or_default() += p.len();
    }
    let counts = net.param_counts();
    let mut out = String::new();
    writeln!(
        out,
        "config: K={} L={} D={} R={} B={} heads={} ffn_width={} max_speakers={} visual_dim={} gav={} sai={} savi={}",
        cfg.kernel_size,
        cfg.chunk_size,
        cfg.dim,
        cfg.layers,
        cfg.blocks,
        cfg.heads,
        cfg.ffn_width,
        cfg.max_speakers,
        cfg.visual_dim,
        cfg.gav_enabled,
        cfg.sai_enabled,
        cfg.savi_enabled
    )
    .unwrap();
    for (k, v) in &groups {
        writeln!(out, "{k:<32} {v:>12}").unwrap();
    }
    writeln!(out, "{:<32} {:>12}", "encoder", counts.encoder).unwrap();
    writeln!(out, "{:<32} {:>12}", "decoder", counts.decoder).unwrap();
    writeln!(out, "{:<32} {:>12}", "separator", counts.separator).unwrap();
    writeln!(out, "{:<32} {:>12}", "total", counts.total).unwrap();
    writeln!(out, "target total: 24.3M; this build: {:.2}M ({:+.1}%)", counts.total as f64 / 1e6, 100.0 * (counts.total as f64 / 24.3e6 - 1.0)).unwrap();
    writeln!(out, "notes:").unwrap();
    writeln!(out, "  heads and feed-forward width are not published; 8 heads and a 4*D feed-forward layer are assumed").unwrap();
    writeln!(out, "  the cross-modal layers carry attention and layer norms only, without a feed-forward sublayer").unwrap();
    writeln!(out, "  attention projections have no bias; a visual projection exists only when visual_dim != D").unwrap();
    writeln!(out, "  the gap to the reference total is consistent with a slightly wider feed-forward or extra projections").unwrap();
    Ok(out)
}

fn run_synth(out: &Path, config: Option<&Path>, seed: Option<u64>, valid: usize, test: usize) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<ToyCorpusConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ToyCorpusConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    create_dir(out)?;
    let manifest = generate_toy_corpus(out, &cfg)?;
    let (tr, va, te) = manifest.split(valid, test)?;
    tr.write(out.join("train.jsonl"))?;
    va.write(out.join("valid.jsonl"))?;
    te.write(out.join("test.jsonl"))?;
    println!(
        "wrote {} utterances ({} train, {} valid, {} test) to {}",
        manifest.records.len(),
        tr.records.len(),
        va.records.len(),
        te.records.len(),
        out.display()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, specs: &[PathBuf], manifest: &Path, clip_seconds: f64, out: Option<&Path>) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let cfg = net.config().clone();
    let manifest = Manifest::read(manifest)?;
    let bank = SourceBank::load(&manifest, cfg.sample_rate)?;
    let mut all = Vec::new();
    for p in specs {
        all.extend(read_specs(p)?);
    }
    if !(clip_seconds > 0.0) {
        return Err(Error::InvalidInput("clip length must be positive".into()));
    }
    let clip = (clip_seconds * cfg.sample_rate as f64).round() as usize;
    let report = evaluate(&net, &all, &bank, clip, cfg.fps)?;
    let table = report.table();
    print!("{table}");
    if let Some(out) = out {
        report.write_jsonl(out)?;
        write_text(&out.with_extension("txt"), &table)?;
    }
    Ok(())
}

fn run_separate(checkpoint: &Path, mix: &Path, visuals: &[PathBuf], n: usize, out: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let cfg = net.config();
    if visuals.len() > n {
        return Err(Error::InvalidInput(format!("{} visual files for {n} speakers", visuals.len())));
    }
    let mix = Waveform::read_wav_at(mix, cfg.sample_rate)?;
    let tracks = visuals.iter().map(VisualFeatures::read).collect::<Result<Vec<_>>>()?;
    let v = if tracks.is_empty() {
        VisualFeatures::absent(n, 0, cfg.visual_dim, cfg.fps)
    } else {
        VisualFeatures::stack(&tracks, n)?
    };
    let est = net.separate(&mix, &v, n)?;
    create_dir(out)?;
    for (i, w) in est.iter().enumerate() {
        let p = out.join(format!("est_{}.wav", i + 1));
        w.write_wav(&p)?;
        let kind = if i < tracks.len() { "guided" } else { "unguided" };
        println!("{} ({kind})", p.display());
    }
    Ok(())
}

fn run_report(reports: &[PathBuf], params: bool, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if params {
        let cfg = match config {
            Some(p) => TrainConfig::load(p)?.separator,
            None => SeparatorConfig::default(),
        };
        let text = param_report(&cfg)?;
        print!("{text}");
        if let Some(out) = out {
            create_dir(out)?;
            write_text(&out.join("params.txt"), &text)?;
        }
        if reports.is_empty() {
            return Ok(());
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidInput("report needs at least one evaluation report or --params".into()));
    }
    let loaded = reports.iter().map(EvalReport::read_jsonl).collect::<Result<Vec<_>>>()?;
    let (text, drops) = render_comparison(&loaded)?;
    print!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        write_text(&out.join("report.txt"), &text)?;
        crate::data::write_jsonl(out.join("drop_rates.jsonl"), &drops)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, config, seed, valid, test } => run_synth(&out, config.as_deref(), seed, valid, test),
        Command::MakeSpecs { manifest, out, speakers, guided, frame_mask_rate, samples, seed } => {
            let m = Manifest::read(&manifest)?;
            let specs = materialize_test_set(&m, samples, speakers, guided.unwrap_or(speakers), frame_mask_rate, seed)?;
            write_specs(&out, &specs)?;
            println!("wrote {} specs to {}", specs.len(), out.display());
            Ok(())
        }
        Command::Train { config, seed, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.checkpoint_dir = o;
            }
            let outcome = train(&cfg, |e| {
                eprintln!(
                    "epoch {:>3} steps {:>6} train {:>8.3} valid {:>8.3} best {:>8.3} lr {:.3e} {:?} ({:.1}s)",
                    e.epoch, e.steps, e.train_loss, e.valid_loss, e.best_valid_loss, e.lr, e.event, e.seconds
                )
            })?;
            println!("best checkpoint: {}", outcome.best_checkpoint.display());
            Ok(())
        }
        Command::Eval { checkpoint, specs, manifest, clip_seconds, out } => {
            run_eval(&checkpoint, &specs, &manifest, clip_seconds, out.as_deref())
        }
        Command::Separate { checkpoint, mix, visuals, speakers, out } => {
            run_separate(&checkpoint, &mix, &visuals, speakers, &out)
        }
        Command::Report { reports, params, config, out } => run_report(&reports, params, config.as_deref(), out.as_deref()),
    }
}
