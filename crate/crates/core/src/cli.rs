//! Command-line surface. Exit codes: 0 success, 1 engine error, 2 usage error.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};

use crate::config::EngineConfig;
use crate::engine::{self, EngineError, Workspace, CONFIG_FILE};
use crate::export::{export_other, ExportMode, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ENGINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser, PartialEq)]
#[command(name = "dataevolver", version, about = "Closed-loop visual data construction engine")]
pub struct Cli {
    /// Workspace root; every other path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, PartialEq)]
pub enum Command {
    /// Create the workspace skeleton with the demo config.
    Init,
    /// Run one dataset round.
    RunRound {
        #[arg(long, default_value = CONFIG_FILE)]
        config: PathBuf,
        #[arg(long)]
        round: Option<u32>,
    },
    /// Show the trace of one sample.
    Inspect {
        #[arg(long)]
        sample: String,
    },
    /// Write an export of a closed round.
    Export {
        #[arg(long)]
        mode: ExportMode,
        #[arg(long)]
        split: Option<Split>,
        /// Defaults to the latest closed round.
        #[arg(long)]
        round: Option<u32>,
        #[arg(long, default_value = CONFIG_FILE)]
        config: PathBuf,
    },
    /// Print round reports.
    Report(ReportArgs),
    /// Re-execute a logged inner loop and compare it with its trace.
    Replay {
        #[arg(long)]
        sample: String,
    },
}

#[derive(Debug, Args, PartialEq)]
#[group(required = true, multiple = false)]
pub struct ReportArgs {
    #[arg(long)]
    pub round: Option<u32>,
    #[arg(long)]
    pub all: bool,
}

impl clap::ValueEnum for ExportMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            ExportMode::ImagePairs,
            ExportMode::MultiView,
            ExportMode::VideoSequence,
            ExportMode::GeometryPackage,
            ExportMode::Trajectory,
            ExportMode::Preference,
            ExportMode::Diagnostics,
        ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for Split {
    fn value_variants<'a>() -> &'a [Self] {
        &Split::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

pub fn parse_args<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

fn load_config(ws: &Workspace, path: &std::path::Path) -> Result<EngineConfig, EngineError> {
    Ok(EngineConfig::load(&ws.resolve(path))?.from_env()?)
}

fn latest_round(ws: &Workspace) -> Result<u32, EngineError> {
    ws.store()
        .rounds()
        .iter()
        .filter(|r| r.is_closed())
        .map(|r| r.round_id)
        .max()
        .ok_or_else(|| EngineError::Workspace("no closed round".into()))
}

fn print_report(out: &mut dyn Write, r: &engine::RoundReport) -> std::io::Result<()> {
    let (f, i, d) = r.chain;
    writeln!(
        out,
        "round {} stage={} (F,I,D)=({},{},{}) verdict={}",
        r.round_id, r.stage, f as u8, i as u8, d as u8, r.verdict
    )?;
    writeln!(
        out,
        "  requests={} candidates={} accepted={} expansion={}",
        r.requests,
        r.candidates.len(),
        r.accepted,
        r.expansion.total()
    )?;
    for (m, v) in &r.summary.metrics {
        writeln!(out, "  {m}={v:.4}")?;
    }
    let e = &r.engine;
    writeln!(
        out,
        "  render_success={:.3} completeness={:.3} acceptance={:.3} geometry_valid={:.3} mean_rounds={} reliability={}",
        e.render_success_rate,
        e.artifact_completeness_rate,
        e.acceptance_rate,
        e.geometry_validity_rate,
        e.mean_correction_rounds.map_or("n/a".into(), |v| format!("{v:.3}")),
        e.review_reliability.map_or("n/a".into(), |v| format!("{v:.3}")),
    )?;
    for (s, n) in &r.manifest_rows {
        writeln!(out, "  {s}: {n} pairs")?;
    }
    write!(out, "{}", r.table.to_grid())?;
    Ok(())
}

fn run(cli: Cli, out: &mut dyn Write, stop: &AtomicBool) -> Result<(), EngineError> {
    let root = cli.workspace;
    if cli.command == Command::Init {
        Workspace::init(&root)?;
        writeln!(out, "initialized workspace {}", root.display())?;
        return Ok(());
    }
    let ws = Workspace::open(&root)?;
    match cli.command {
        Command::Init => unreachable!(),
        Command::RunRound { config, round } => {
            let cfg = load_config(&ws, &config)?;
            let report = engine::run_round(&ws, &cfg, round, stop)?;
            print_report(out, &report)?;
            writeln!(out, "report: {}", ws.report_path(report.round_id).display())?;
        }
        Command::Inspect { sample } => {
            let ins = engine::inspect(&ws, &sample)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&ins)?)?;
        }
        Command::Export {
            mode,
            split,
            round,
            config,
        } => {
            let cfg = load_config(&ws, &config)?;
            let round = match round {
                Some(r) => r,
                None => latest_round(&ws)?,
            };
            if mode == ExportMode::ImagePairs {
                for (s, path) in engine::export_pairs(&ws, &cfg, round, split)? {
                    writeln!(out, "{s}: {}", path.display())?;
                }
                return Ok(());
            }
            let samples = match mode {
                ExportMode::VideoSequence | ExportMode::Trajectory => {
                    engine::dense_samples(&ws, round, 45.0, 8.0)?
                }
                _ => engine::export_samples(&ws, round)?,
            };
            let manifest = export_other(mode, &samples, ws.store())?;
            let path = ws.export_dir(round).join(format!("{}.json", mode.as_str()));
            std::fs::create_dir_all(ws.export_dir(round))?;
            std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
            writeln!(
                out,
                "{}: {} rows, {} row errors -> {}",
                mode.as_str(),
                manifest.rows.len(),
                manifest.errors.len(),
                path.display()
            )?;
        }
        Command::Report(args) => {
            let reports = match args.round {
                Some(r) => vec![ws.load_report(r)?],
                None => ws.reports()?,
            };
            if reports.is_empty() {
                return Err(EngineError::Workspace("no closed round".into()));
            }
            for r in &reports {
                print_report(out, r)?;
            }
        }
        Command::Replay { sample } => {
            let r = engine::replay(&ws, &sample)?;
            writeln!(
                out,
                "replay ok: {} rounds, status {}",
                r.routes.len(),
                r.status.as_str()
            )?;
        }
    }
    Ok(())
}

/// Parse and execute; returns the process exit code.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write, stop: &AtomicBool) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    execute(cli, out, err, stop)
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write, stop: &AtomicBool) -> i32 {
    match run(cli, out, stop) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ENGINE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_forms() {
        let c = parse_args(["dataevolver", "run-round", "--config", "e.cfg"]).unwrap();
        assert_eq!(
            c.command,
            Command::RunRound {
                config: "e.cfg".into(),
                round: None
            }
        );
        let c = parse_args(["dataevolver", "report", "--round", "3"]).unwrap();
        assert_eq!(
            c.command,
            Command::Report(ReportArgs {
                round: Some(3),
                all: false
            })
        );
        let c = parse_args(["dataevolver", "--workspace", "/w", "export", "--mode", "geometry_package", "--split", "val"]).unwrap();
        assert_eq!(c.workspace, PathBuf::from("/w"));
        assert!(matches!(
            c.command,
            Command::Export {
                mode: ExportMode::GeometryPackage,
                split: Some(Split::Val),
                ..
            }
        ));
    }

    #[test]
    fn usage_errors_exit_two() {
        let stop = AtomicBool::new(false);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        for argv in [
            vec!["dataevolver", "frobnicate"],
            vec!["dataevolver", "inspect"],
            vec!["dataevolver", "report"],
            vec!["dataevolver", "report", "--round", "1", "--all"],
            vec!["dataevolver", "run-round", "--bogus"],
        ] {
            assert_eq!(main_with(argv, &mut out, &mut err, &stop), EXIT_USAGE);
        }
    }

    #[test]
    fn init_and_unknown_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ws = dir.path().join("ws");
        let stop = AtomicBool::new(false);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let w = ws.to_str().unwrap();
        assert_eq!(main_with(["dataevolver", "--workspace", w, "init"], &mut out, &mut err, &stop), 0);
        assert!(ws.join(CONFIG_FILE).is_file());
        assert_eq!(
            main_with(["dataevolver", "--workspace", w, "inspect", "--sample", "ghost"], &mut out, &mut err, &stop),
            EXIT_ENGINE
        );
        assert!(String::from_utf8_lossy(&err).contains("unknown sample"));
        let missing = dir.path().join("missing");
        assert_eq!(
            main_with(
                ["dataevolver", "--workspace", missing.to_str().unwrap(), "report", "--all"],
                &mut out,
                &mut err,
                &stop
            ),
            EXIT_ENGINE
        );
    }
}
