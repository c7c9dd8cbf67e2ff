use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xsight::model::Mode;
use xsight::{Error, Result};

use crate::config::{Overrides, RunConfig};
use crate::pipeline;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "xsight", version, about = "Synthetic x-ray/report classifier with attribution-based detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source and target synthetic datasets
    GenData(Common),
    /// Train word vectors and pretrain the image encoder on the source domain
    Pretrain(Common),
    /// Fine-tune a classifier on the target domain
    Train(Common),
    /// Test accuracy of the trained checkpoint
    Eval(Common),
    /// Integrated-gradients detection for one case (JSON + SVG)
    Detect(CaseArgs),
    /// Token scores for one report (JSON + HTML, terminal heatmap on stdout)
    ExplainText(CaseArgs),
    /// Read-only HTTP API
    Serve(Common),
}

#[derive(Args, Debug)]
struct CaseArgs {
    #[arg(long)]
    case: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file with any subset of the run settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    /// multimodal | text-only | image-only
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Sight sensitivity quantile in [0, 1)
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Integrated-gradients steps
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let flags = Overrides {
            seed: self.seed,
            data_dir: self.data_dir.clone(),
            checkpoint: self.checkpoint.clone(),
            port: self.port,
            mode: self.mode,
            lr: self.lr,
            epochs: self.epochs,
            q: self.q,
            k_max: self.k_max,
            epsilon: self.epsilon,
            steps: self.steps,
        };
        let cfg = RunConfig::resolve(self.config.as_deref(), &flags)?;
        eprintln!("run config: {}", cfg.to_json());
        Ok(cfg)
    }
}

fn print_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::Io {
        path: "stdout".into(),
        source: e,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    print_line(&serde_json::to_string_pretty(value)?)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let (s, t) = pipeline::gen_data(&cfg)?;
            print_json(&serde_json::json!({
                "source": { "dir": cfg.source_dir(), "cases": s.cases.len() },
                "target": { "dir": cfg.target_dir(), "cases": t.cases.len() },
            }))
        }
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            print_json(&pipeline::pretrain(&cfg)?)
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            print_json(&pipeline::train(&cfg)?)
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            print_json(&pipeline::eval(&cfg)?)
        }
        Command::Detect(a) => {
            let cfg = a.common.resolve()?;
            let trained = pipeline::load_trained(&cfg)?;
            let out = pipeline::detect_case(&cfg, &trained, &a.case)?;
            print_json(&serde_json::json!({
                "case_id": a.case,
                "k": out.result.k,
                "points": out.result.points.len(),
                "json": out.json_path,
                "svg": out.svg_path,
            }))
        }
        Command::ExplainText(a) => {
            let cfg = a.common.resolve()?;
            let trained = pipeline::load_trained(&cfg)?;
            let out = pipeline::explain_case(&trained, &a.case)?;
            print_line(&xsight::render::render_text_heatmap_terminal(&out.tokens, &out.scores)?)?;
            print_json(&serde_json::json!({
                "case_id": a.case,
                "json": out.json_path,
                "html": out.html_path,
            }))
        }
        Command::Serve(c) => {
            let cfg = c.resolve()?;
            crate::serve::serve(&cfg)
        }
    }
}

/// Exit code for an error: bad input is a usage error, everything else a
/// runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Lookup(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
