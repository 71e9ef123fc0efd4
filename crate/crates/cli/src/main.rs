//! `dracs`: plan, simulate, validate and render from a scenario file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use dracs::pipeline::{self, RunReport, SimulationSettings, SolutionArtifact, Timings};
use dracs::render;
use dracs::scenario::{BuiltScenario, Scenario};
use dracs::sim::{PathEnsemble, SimulationReport};
use dracs::Error;

const EXIT_PARSE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_VALIDATION: u8 = 5;

/// Paths drawn in the trajectory fan.
const FAN_PATHS: usize = 200;

#[derive(Parser)]
#[command(
    name = "dracs",
    version,
    about = "Distributionally robust adaptive covariance steering"
)]
struct Cli {
    /// Worker threads for the Monte Carlo loops (results do not depend on it).
    #[arg(long, global = true, env = "DRACS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the planning problem; writes solution.json and schedule.csv.
    Plan {
        scenario: PathBuf,
        #[arg(long, env = "DRACS_OUT", default_value = "out")]
        out: PathBuf,
        /// Relative optimality gap for branch and bound (overrides the scenario).
        #[arg(long)]
        gap_tol: Option<f64>,
    },
    /// Run the nominal and true ensembles under a planned schedule.
    Simulate {
        scenario: PathBuf,
        solution: PathBuf,
        #[arg(long, env = "DRACS_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation: run the true plant without the adaptive loop.
        #[arg(long)]
        no_l1: bool,
        /// Skip writing the raw ensembles.
        #[arg(long)]
        no_ensembles: bool,
    },
    /// Check a report; exit 0 iff every predicate passes.
    Validate { report: PathBuf },
    /// Draw the trajectory fan and the W2 chart as SVG.
    Render {
        report: PathBuf,
        /// Scenario holding the safe set and the projection pair.
        #[arg(long)]
        scenario: PathBuf,
        /// True-plant ensemble; defaults to true_paths.bin beside the report.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long, env = "DRACS_OUT", default_value = "out")]
        out: PathBuf,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_PARSE,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<Error>() {
            Ok(e) => e.into(),
            Err(error) => Failure {
                code: EXIT_PARSE,
                error,
            },
        }
    }
}

type CliResult = std::result::Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_PARSE);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Plan {
            scenario,
            out,
            gap_tol,
        } => plan(&scenario, &out, gap_tol),
        Command::Simulate {
            scenario,
            solution,
            out,
            paths,
            seed,
            no_l1,
            no_ensembles,
        } => simulate(
            &scenario,
            &solution,
            &out,
            paths,
            seed,
            no_l1,
            !no_ensembles,
        ),
        Command::Validate { report } => validate(&report),
        Command::Render {
            report,
            scenario,
            ensemble,
            out,
        } => render_cmd(&report, &scenario, ensemble, &out),
    }
}

fn load(path: &Path) -> Result<BuiltScenario, Failure> {
    let s = Scenario::load(path).map_err(|e| Failure {
        code: EXIT_PARSE,
        error: anyhow!(e).context(format!("loading {}", path.display())),
    })?;
    s.build().map_err(|e| Failure {
        code: EXIT_PARSE,
        error: anyhow!(e).context(format!("checking {}", path.display())),
    })
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn plan(scenario: &Path, out: &Path, gap_tol: Option<f64>) -> CliResult {
    let built = load(scenario)?;
    let mut options = built.bnb_options();
    if let Some(g) = gap_tol {
        if g.is_nan() || g < 0.0 {
            return Err(anyhow!("--gap-tol must be >= 0").into());
        }
        options.gap_tol = g;
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let t = Instant::now();
    let (sol, art) = pipeline::plan_with(&built, &options)?;
    let elapsed = t.elapsed().as_secs_f64();
    write(out, "solution.json", &art.to_json()?)?;
    write(out, "schedule.csv", &art.schedule_csv(built.dm.delta_t))?;
    println!("objective   {:.6}", sol.objective);
    println!("max margin  {:.3e}", sol.max_margin());
    println!("regions     {:?}", art.regions);
    println!(
        "nodes       {} ({} relaxations, {} big-M rounds)",
        sol.stats.nodes, sol.stats.relaxations, sol.big_m_rounds
    );
    println!("time        {elapsed:.2} s");
    println!("wrote       {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    scenario: &Path,
    solution: &Path,
    out: &Path,
    paths: Option<usize>,
    seed: Option<u64>,
    no_l1: bool,
    ensembles: bool,
) -> CliResult {
    let start = Instant::now();
    let built = load(scenario)?;
    let text = std::fs::read_to_string(solution)
        .with_context(|| format!("reading {}", solution.display()))?;
    let art = SolutionArtifact::from_json(&text)?;
    art.check_hash(&built)?;
    let mut settings = SimulationSettings::from_scenario(&built);
    if let Some(n) = paths {
        settings.n_paths = n;
    }
    if let Some(s) = seed {
        settings.seed = s;
    }
    settings.l1_enabled = !no_l1;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let t = Instant::now();
    let (nominal, truth, report) = pipeline::simulate(&built, &art, &settings)?;
    let sim_time = t.elapsed().as_secs_f64();
    write(out, "report.json", &report.to_json()?)?;
    write(out, "steps.csv", &pipeline::steps_csv(&report))?;
    if ensembles {
        nominal.write(
            &out.join("nominal_paths.bin"),
            &out.join("nominal_paths.json"),
            &built.hash,
        )?;
        truth.write(
            &out.join("true_paths.bin"),
            &out.join("true_paths.json"),
            &built.hash,
        )?;
    }
    let run = RunReport::new(
        &art,
        &report,
        Timings {
            simulate: sim_time,
            total: start.elapsed().as_secs_f64(),
        },
    );
    write(
        out,
        "run.json",
        &(serde_json::to_string_pretty(&run).context("run summary")? + "\n"),
    )?;
    let (w2, se) = report.max_w2();
    println!(
        "paths {}  seed {}  L1 {}",
        report.n_paths,
        report.seed,
        if report.l1_enabled { "on" } else { "off" }
    );
    println!("max W2 {w2:.4} ± {se:.4}  (rho {})", report.rho);
    println!("time   {sim_time:.2} s");
    println!("wrote  {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_report(path: &Path) -> Result<SimulationReport, Failure> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SimulationReport::from_json(&text)?)
}

fn validate(path: &Path) -> CliResult {
    let report = read_report(path)?;
    let preds = pipeline::predicates(&report);
    let width = preds.iter().map(|p| p.name.len()).max().unwrap_or(0);
    for p in &preds {
        let verdict = if p.pass { "PASS" } else { "FAIL" };
        println!("{verdict}  {:width$}  {}", p.name, p.detail);
    }
    if preds.iter().all(|p| p.pass) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_VALIDATION))
    }
}

fn render_cmd(report: &Path, scenario: &Path, ensemble: Option<PathBuf>, out: &Path) -> CliResult {
    let rep = read_report(report)?;
    let built = load(scenario)?;
    if rep.scenario_hash != built.hash {
        return Err(anyhow!(
            "report was produced for scenario {}, not {}",
            rep.scenario_hash,
            built.hash
        )
        .into());
    }
    let proj = built
        .scenario
        .render
        .projection
        .ok_or_else(|| anyhow!("scenario has no render.projection pair to draw"))?;
    let bin = ensemble.unwrap_or_else(|| report.with_file_name("true_paths.bin"));
    let sidecar = bin.with_extension("json");
    let (ens, meta) = PathEnsemble::read(&bin, &sidecar)
        .with_context(|| format!("reading ensemble {}", bin.display()))?;
    if meta.scenario_hash != built.hash {
        return Err(anyhow!("ensemble {} belongs to another scenario", bin.display()).into());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let fan = render::trajectory_fan_svg(&ens, &built.safe_set, proj, FAN_PATHS)?;
    let chart = render::w2_chart_svg(&rep)?;
    let a = write(out, "trajectories.svg", &fan)?;
    let b = write(out, "w2.svg", &chart)?;
    println!("wrote {} and {}", a.display(), b.display());
    Ok(ExitCode::SUCCESS)
}
