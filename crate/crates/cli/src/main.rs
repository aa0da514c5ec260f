//! `prsa`: synthesize data, train, infer, evaluate and plot.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prsa_core::config::{Profile, RunConfig, SuppressKind};
use prsa_core::dataset::sibling_annotations;
use prsa_core::pipeline::{
    cmd_eval, cmd_infer, cmd_plot, cmd_synth, cmd_train, curve_path, CONFIG_FILE,
};

#[derive(Parser)]
#[command(
    name = "prsa",
    version,
    about = "Temporal action proposals with region-based slot attention"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Built-in defaults to start from: thumos, anet or synthetic.
    #[arg(long, global = true, default_value = "thumos")]
    profile: Profile,
    /// Flat TOML file applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the resolved config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single `key=value` override; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Post-process: none, nms or soft_nms.
    #[arg(long, global = true)]
    suppress: Option<SuppressKind>,
    /// Worker threads for per-video inference.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (manifest, features, annotations).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, resolved config and JSON-lines log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to annotations.json beside the manifest.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate proposals for every manifest video.
    ///
    /// Without --config, the config.toml saved next to the checkpoint is used
    /// when present.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a proposal file; also writes the AR-vs-AN curve as CSV.
    Eval {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an AR-vs-AN curve CSV as SVG.
    Plot {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Global {
    fn resolve(&self, fallback_file: Option<&Path>) -> prsa_core::Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(s) = self.suppress {
            overrides.push(format!("suppress={s}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        let file = self.config.as_deref().or(fallback_file);
        RunConfig::load(self.profile, file, &overrides)
    }
}

fn annotations_for(manifest: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| sibling_annotations(manifest))
}

fn run(cli: Cli) -> prsa_core::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { out } => {
            let data = cmd_synth(&g.resolve(None)?, &out)?;
            eprintln!("wrote {} videos to {}", data.manifest.len(), out.display());
        }
        Command::Train {
            manifest,
            annotations,
            out,
            resume,
        } => {
            let config = g.resolve(None)?;
            let ann = annotations_for(&manifest, annotations);
            let outcome = cmd_train(
                &config,
                &manifest,
                &ann,
                &out,
                resume.as_deref(),
                &mut |r| {
                    eprintln!(
                        "epoch {:>3}  total {:.5}  L_b {:.5}  L_cls {:.5}  L_com {:.5}  ({:.1}s)",
                        r.epoch, r.total, r.boundary, r.cls, r.com, r.wall_time_s
                    );
                },
            )?;
            eprintln!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Infer {
            checkpoint,
            manifest,
            annotations,
            out,
        } => {
            let saved = checkpoint
                .parent()
                .map(|d| d.join(CONFIG_FILE))
                .filter(|p| p.is_file());
            let config = g.resolve(saved.as_deref())?;
            let ann = annotations_for(&manifest, annotations);
            let props = cmd_infer(&config, &checkpoint, &manifest, &ann, &out, g.jobs)?;
            let n: usize = props.values().map(Vec::len).sum();
            eprintln!(
                "{n} proposals for {} videos -> {}",
                props.len(),
                out.display()
            );
        }
        Command::Eval {
            proposals,
            annotations,
            out,
        } => {
            let config = g.resolve(None)?;
            let report = cmd_eval(&proposals, &annotations, &config.eval_config(), &out)?;
            for (an, ar) in &report.ar_at_an {
                println!("AR@{an:<5} {ar:.4}");
            }
            println!("AUC      {:.2}", report.auc);
            for (t, m) in &report.map {
                println!("mAP@{t}  {m:.4}");
            }
            eprintln!("curve: {}", curve_path(&out).display());
        }
        Command::Plot { curve, out } => cmd_plot(&curve, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 2 } else { 3 })
        }
    }
}
