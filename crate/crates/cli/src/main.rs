use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ellreach::analysis::{self, GridSpec};
use ellreach::io::{self, MonteCarloStats, ProblemFile, ResultFile};
use ellreach::platoon::Simulation;
use ellreach::reach::{self, Policy};
use ellreach::synthesis;
use ellreach::{boundedness_diagnostic, BoundednessVerdict, DangerSet, Error, LtiSystem};

#[derive(Parser)]
#[command(
    name = "ellreach",
    version,
    about = "Ellipsoidal reachable-set bounds and safe actuator limits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum-volume ellipsoid bounding the reachable set.
    Analyze(SolveArgs),
    /// Tightened actuator bounds that keep the reachable set out of the danger set.
    Synthesize(SynthArgs),
    /// Monte-Carlo sample of the reachable set, written as CSV.
    Sample(SampleArgs),
    /// Closed-loop platoon simulation, written as CSV.
    Platoon(PlatoonArgs),
    /// Outline of a result ellipsoid projected on a coordinate plane.
    Ellipse(EllipseArgs),
}

#[derive(Args)]
struct Common {
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Print the per-a log.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Decay-rate grid as start:step:stop.
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// One common bound for every channel.
    #[arg(long)]
    equal_bounds: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Problem file; defaults to the input echoed in --result.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Result whose bounds drive the sample and whose ellipsoid is checked.
    #[arg(long, short)]
    result: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// uniform, bang-bang or mixed:<ratio>.
    #[arg(long)]
    policy: Option<Policy>,
    /// Write the statistics into this copy of the result file.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PlatoonArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Override the bounds in force, e.g. 0.03,0.05,0.03.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct EllipseArgs {
    #[arg(long, short)]
    result: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// 1-based coordinate pair, e.g. 1,2.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2])]
    plane: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::AllInfeasible { .. } => 2,
        _ => 1,
    }
}

fn warn_boundedness(sys: &LtiSystem) -> Result<(), Error> {
    let b = boundedness_diagnostic(sys)?;
    match b.verdict {
        BoundednessVerdict::Bounded => {}
        v => eprintln!(
            "warning: spectral radius {:.6} ({v:?}); the reachable set may be unbounded",
            b.spectral_radius
        ),
    }
    Ok(())
}

fn grid_override(problem: &mut io::Problem, grid: &Option<String>) -> Result<(), Error> {
    if let Some(g) = grid {
        problem.grid = GridSpec::parse(g)?;
    }
    Ok(())
}

fn print_log(log: &[io::LogEntry]) {
    for e in log {
        let vol = e.volume.map_or("-".to_string(), |v| format!("{v:.6e}"));
        match &e.gamma_hat {
            Some(g) => eprintln!("a={:<5} {:?} volume={vol} gamma_hat={g:?}", e.a, e.status),
            None => eprintln!("a={:<5} {:?} volume={vol}", e.a, e.status),
        }
    }
}

fn save(result: &ResultFile, output: &Option<PathBuf>) -> Result<(), Error> {
    match output {
        Some(path) => result.save(path),
        None => {
            print!("{}", result.to_toml()?);
            Ok(())
        }
    }
}

fn analyze(args: &SolveArgs) -> Result<(), Error> {
    let file = ProblemFile::load(&args.input)?;
    let mut problem = file.resolve()?;
    grid_override(&mut problem, &args.grid)?;
    warn_boundedness(&problem.system)?;
    let res = analysis::grid_search(
        &problem.system,
        &problem.bounds,
        &problem.analysis_options(args.common.threads),
    )?;
    let out = ResultFile::from_analysis(&with_grid(file, &problem), &problem.bounds, &res)?;
    if args.common.verbose {
        print_log(&out.log);
    }
    save(&out, &args.output)?;
    println!("a* = {}  volume = {:.6}", res.a_star, res.volume);
    Ok(())
}

/// Echoes a command-line grid override into the stored input.
fn with_grid(mut file: ProblemFile, problem: &io::Problem) -> ProblemFile {
    let block = file.analysis.get_or_insert_with(Default::default);
    block.grid = Some(io::GridField::Table(problem.grid));
    block.equal_bounds = problem.equal_bounds;
    file
}

fn synthesize(args: &SynthArgs) -> Result<(), Error> {
    let file = ProblemFile::load(&args.solve.input)?;
    let mut problem = file.resolve()?;
    grid_override(&mut problem, &args.solve.grid)?;
    problem.equal_bounds |= args.equal_bounds;
    let danger = problem.danger.clone().ok_or_else(|| Error::Validation {
        field: "danger".into(),
        reason: "synthesis needs a danger block (use danger = [] for none)".into(),
    })?;
    warn_boundedness(&problem.system)?;
    let opts = problem.synthesis_options(args.solve.common.threads);
    let res = if problem.equal_bounds {
        synthesis::equal_bound_synthesis(&problem.system, &problem.bounds, &danger, &opts)?
    } else {
        synthesis::synthesize(&problem.system, &problem.bounds, &danger, &opts)?
    };
    let out = ResultFile::from_synthesis(&with_grid(file, &problem), &res, problem.equal_bounds)?;
    if args.solve.common.verbose {
        print_log(&out.log);
    }
    save(&out, &args.solve.output)?;
    println!(
        "gamma_hat = {:?}  a* = {}  active = {:?}",
        res.gamma_hat, res.a_star, res.active
    );
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<(), Error> {
    let result = args.result.as_deref().map(ResultFile::load).transpose()?;
    let file = match (&args.input, &result) {
        (Some(path), _) => ProblemFile::load(path)?,
        (None, Some(r)) => r.input.clone(),
        (None, None) => {
            return Err(Error::Validation {
                field: "input".into(),
                reason: "give --input, --result or both".into(),
            })
        }
    };
    let problem = file.resolve()?;
    let mut cfg = problem.monte_carlo.clone();
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.n_traj = args.n_traj.unwrap_or(cfg.n_traj);
    cfg.horizon = args.horizon.unwrap_or(cfg.horizon);
    cfg.policy = args.policy.unwrap_or(cfg.policy);
    cfg.threads = args.common.threads;
    let bounds = match &result {
        Some(r) => r.bounds()?,
        None => problem.bounds.clone(),
    };
    warn_boundedness(&problem.system)?;
    let cloud = reach::sample(&problem.system, &bounds, &cfg)?;
    cloud.save_csv(&args.output)?;
    let containment = match &result {
        Some(r) => Some(cloud.containment(&r.ellipsoid()?)?),
        None => None,
    };
    let danger = problem.danger.clone().unwrap_or_else(DangerSet::default);
    let violations = cloud.danger_violations(&danger)?;
    let mut line = format!("visited = {}  stored = {}", cloud.visited, cloud.len());
    if let Some(c) = &containment {
        line.push_str(&format!(
            "  containment = {}  max_level = {:.6}",
            c.fraction, c.max_level
        ));
    }
    line.push_str(&format!("  danger_violations = {violations}"));
    println!("{line}");
    if let (Some(path), Some(mut r)) = (&args.stats, result) {
        let c = containment.expect("result implies containment");
        r.monte_carlo = Some(MonteCarloStats {
            n_traj: cfg.n_traj,
            horizon: cfg.horizon,
            seed: cfg.seed,
            policy: cfg.policy,
            visited: cloud.visited,
            containment_fraction: c.fraction,
            max_level: c.max_level,
            danger_violations: violations,
        });
        r.save(path)?;
    }
    Ok(())
}

fn platoon(args: &PlatoonArgs) -> Result<(), Error> {
    let problem = ProblemFile::load(&args.input)?.resolve()?;
    let mut setup = problem.platoon.ok_or_else(|| Error::Validation {
        field: "platoon".into(),
        reason: "missing [platoon] block".into(),
    })?;
    if let Some(g) = &args.gamma {
        setup.bounds = ellreach::InputBounds::new(g.clone())?;
    }
    let sim = Simulation::new(setup.params.clone())?;
    if args.verbose {
        eprintln!("K = {}", sim.gain);
    }
    let trace = sim.run(&setup.bounds, setup.attack.as_ref(), setup.duration, &setup.initial)?;
    trace.save_csv(&args.output)?;
    match trace.crash {
        Some(c) => println!(
            "crash: vehicles {} and {} at t = {} s",
            c.vehicles.0, c.vehicles.1, c.time
        ),
        None => println!("no crash over {} s; min gap {:.6} m", setup.duration, trace.min_gap()),
    }
    Ok(())
}

fn ellipse(args: &EllipseArgs) -> Result<(), Error> {
    let r = ResultFile::load(&args.result)?;
    let e = r.ellipsoid()?;
    let [i, j] = args.plane[..] else {
        return Err(Error::Validation {
            field: "plane".into(),
            reason: format!("expected two coordinates like 1,2, got {} values", args.plane.len()),
        });
    };
    if i == 0 || j == 0 {
        return Err(Error::Validation {
            field: "plane".into(),
            reason: "coordinates are 1-based".into(),
        });
    }
    let pts = io::ellipse_boundary(&e, i - 1, j - 1, args.samples)?;
    let file = std::fs::File::create(&args.output).map_err(|source| Error::Io {
        path: args.output.display().to_string(),
        source,
    })?;
    io::write_polyline(&pts, i - 1, j - 1, std::io::BufWriter::new(file))?;
    println!("{} points written to {}", pts.len() + 1, display(&args.output));
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Sample(a) => sample(a),
        Command::Platoon(a) => platoon(a),
        Command::Ellipse(a) => ellipse(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
