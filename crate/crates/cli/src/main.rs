use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dualoptim_core::diagnostics::{write_traces_csv, UpdateKind, DEFAULT_BURN_IN};
use dualoptim_core::harness::{
    parse_override, run_experiment, run_sweep, stream_similarities, summary_csv, summary_rows, Axis, RunConfig,
    RunReport, SummaryRow, SyntheticStream, PRESETS,
};
use dualoptim_core::optim::AdamWParams;
use dualoptim_core::theory::{default_grid, verify_grid, GridRow, GRID_TOLERANCE};

#[derive(Parser)]
#[command(name = "dualoptim", version, about = "Base + delta optimizer experiments on small deterministic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Output {
    /// Output directory, created if absent.
    #[arg(long, env = "DUALOPTIM_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check the closed-form state limits against simulation on the default grid.
    VerifyTheorem {
        #[command(flatten)]
        output: Output,
        /// Periods simulated per grid point.
        #[arg(long, default_value_t = 10_000)]
        periods: u64,
    },
    /// Run one experiment.
    Run {
        /// TOML run config; defaults apply to anything missing.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
        /// Record similarity traces.
        #[arg(long)]
        diagnostics: bool,
        /// Dotted `key=value` overrides, applied after the config file.
        overrides: Vec<String>,
    },
    /// Run the cartesian product of presets and axes.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
        /// Named axis (repeatable).
        #[arg(long = "preset", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        presets: Vec<String>,
        /// Ad-hoc axis `key=v1,v2,...` (repeatable).
        #[arg(long = "axis")]
        axes: Vec<String>,
        overrides: Vec<String>,
    },
    /// Similarity traces for a stored run directory, or for the synthetic
    /// conflicting stream.
    Diag {
        /// Directory written by `run` (reads its config.toml).
        run_dir: Option<PathBuf>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the synthetic stream instead of a stored run.
        #[arg(long, conflicts_with = "run_dir")]
        stream: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, value_enum, default_value_t = Kind::Momentum)]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Momentum,
    Direction,
}

impl From<Kind> for UpdateKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Momentum => UpdateKind::Momentum,
            Kind::Direction => UpdateKind::Direction,
        }
    }
}

/// Files are written to a staging directory inside `out` and moved into
/// place only when the command succeeds.
struct Staging {
    out: PathBuf,
    created_out: bool,
    dir: Option<tempfile::TempDir>,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let created_out = !out.exists();
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".staging")
            .tempdir_in(out)
            .with_context(|| format!("staging in {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            created_out,
            dir: Some(dir),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.as_ref().expect("staging open").path().join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {name}"))
    }

    fn commit(mut self) -> Result<()> {
        let dir = self.dir.take().expect("staging open");
        for entry in fs::read_dir(dir.path())? {
            let entry = entry?;
            let target = self.out.join(entry.file_name());
            if target.is_dir() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(entry.path(), &target).with_context(|| format!("moving {}", target.display()))?;
        }
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if let Some(dir) = self.dir.take() {
            drop(dir);
            if self.created_out {
                let _ = fs::remove_dir(&self.out);
            }
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let parsed = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(RunConfig::from_toml(&text, &parsed)?)
}

fn theorem_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(
        "beta,forget_freq,retain_freq,m,n,g,closed_base,closed_delta_f,closed_delta_r,sim_base,sim_delta_f,sim_delta_r,max_rel_error,pass\n",
    );
    for r in rows {
        let d = &r.dynamics;
        let (c, s) = (&r.closed_form, &r.simulated);
        out.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            d.beta, d.ff, d.fr, d.m, d.n, d.g, c.base, c.delta_f, c.delta_r, s.base, s.delta_f, s.delta_r, r.max_rel_error, r.pass
        ));
    }
    out
}

fn verify_theorem(out: &Path, periods: u64) -> Result<bool> {
    let stage = Staging::new(out)?;
    let rows = verify_grid(&default_grid(), periods)?;
    stage.write("theorem.csv", theorem_csv(&rows))?;
    stage.commit()?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "{} grid points, {failed} above {GRID_TOLERANCE:e}, max relative error {worst:.3e}",
        rows.len()
    );
    Ok(failed == 0)
}

fn traces_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_traces_csv(&mut buf, &report.traces)?;
    Ok(buf)
}

fn write_report(stage: &Staging, prefix: &str, report: &RunReport) -> Result<()> {
    stage.write(&format!("{prefix}losses.csv"), report.losses_csv())?;
    stage.write(&format!("{prefix}config.toml"), &report.config_echo)?;
    stage.write(&format!("{prefix}report.json"), report.to_json())?;
    if !report.traces.is_empty() {
        stage.write(&format!("{prefix}similarity.csv"), traces_csv(report)?)?;
    }
    Ok(())
}

fn print_row(row: &SummaryRow) {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
    println!(
        "{:<40} final L_f {} L_r {} diverged {} hash {}",
        row.label,
        f(row.final_loss_forget),
        f(row.final_loss_retain),
        row.diverged,
        row.content_hash.get(..12).unwrap_or("")
    );
}

fn run(config: Option<&Path>, out: &Path, diagnostics: bool, overrides: &[String]) -> Result<bool> {
    let mut all = Vec::new();
    if diagnostics {
        all.push("diagnostics.enabled=true".to_string());
    }
    all.extend_from_slice(overrides);
    let config = load_config(config, &all)?;
    let stage = Staging::new(out)?;
    let report = run_experiment(&config)?;
    write_report(&stage, "", &report)?;
    let row = SummaryRow::from_report(config.method.name.name(), &report);
    stage.write("summary.csv", summary_csv(std::slice::from_ref(&row))?)?;
    stage.commit()?;
    print_row(&row);
    Ok(!report.diverged)
}

fn safe_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn sweep(config: Option<&Path>, out: &Path, presets: &[String], axes: &[String], overrides: &[String]) -> Result<bool> {
    let mut all = vec!["diagnostics.enabled=true".to_string()];
    all.extend_from_slice(overrides);
    let base = load_config(config, &all)?;
    let mut grid: Vec<Axis> = presets.iter().map(|p| Axis::preset(p)).collect::<Result<_, _>>()?;
    for a in axes {
        grid.push(Axis::parse(a)?);
    }
    let stage = Staging::new(out)?;
    let results = run_sweep(&base, &grid)?;
    let rows = summary_rows(&results);
    for (i, r) in results.iter().enumerate() {
        if let Ok(report) = &r.outcome {
            write_report(&stage, &format!("runs/{i:03}_{}/", safe_name(&r.point.label)), report)?;
        }
    }
    stage.write("summary.csv", summary_csv(&rows)?)?;
    stage.commit()?;
    for row in &rows {
        if row.error.is_empty() {
            print_row(row);
        } else {
            println!("{:<40} error: {}", row.label, row.error);
        }
    }
    let failed = results.iter().filter(|r| r.failed()).count();
    println!("{} runs, {failed} failed", results.len());
    Ok(failed == 0)
}

fn diag_run(run_dir: &Path, out: &Path) -> Result<bool> {
    let config_path = run_dir.join("config.toml");
    let mut config = load_config(Some(&config_path), &[])?;
    config.diagnostics.enabled = true;
    let stage = Staging::new(out)?;
    let report = run_experiment(&config)?;
    if let Ok(stored) = fs::read_to_string(run_dir.join("report.json")) {
        let stored: serde_json::Value = serde_json::from_str(&stored).context("parsing report.json")?;
        if stored["params_digest"].as_str() != Some(report.params_digest.as_str()) {
            bail!("replay of {} does not reproduce its final parameters", run_dir.display());
        }
    }
    stage.write("similarity.csv", traces_csv(&report)?)?;
    stage.commit()?;
    for t in &report.traces {
        let mean = t.mean_after(config.diagnostics.burn_in);
        println!("{:<18} mean after burn-in {}", t.label, mean.map_or("-".into(), |m| format!("{m:.4}")));
    }
    Ok(!report.diverged)
}

fn diag_stream(out: &Path, seed: u64, steps: u64, kind: UpdateKind) -> Result<bool> {
    let stage = Staging::new(out)?;
    let traces = stream_similarities(&SyntheticStream::conflicting(seed), steps, AdamWParams::default(), kind)?;
    let mut buf = Vec::new();
    write_traces_csv(&mut buf, &traces)?;
    stage.write("stream_similarity.csv", buf)?;
    stage.commit()?;
    for t in &traces {
        let mean = t.mean_after(DEFAULT_BURN_IN);
        println!("{:<15} mean after burn-in {}", t.label, mean.map_or("-".into(), |m| format!("{m:.4}")));
    }
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::VerifyTheorem { output, periods } => verify_theorem(&output.out, periods),
        Command::Run {
            config,
            output,
            diagnostics,
            overrides,
        } => run(config.as_deref(), &output.out, diagnostics, &overrides),
        Command::Sweep {
            config,
            output,
            presets,
            axes,
            overrides,
        } => {
            if presets.is_empty() && axes.is_empty() {
                bail!("sweep needs at least one --preset or --axis");
            }
            sweep(config.as_deref(), &output.out, &presets, &axes, &overrides)
        }
        Command::Diag {
            run_dir,
            out,
            stream,
            seed,
            steps,
            kind,
        } => {
            if stream {
                let out = out.or_else(|| std::env::var_os("DUALOPTIM_OUT").map(PathBuf::from));
                diag_stream(&out.unwrap_or_else(|| PathBuf::from("out")), seed, steps, kind.into())
            } else {
                let Some(dir) = run_dir else {
                    bail!("diag needs a run directory or --stream");
                };
                let out = out.unwrap_or_else(|| dir.clone());
                diag_run(&dir, &out)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
