//! Command-line front end: key generation, private and baseline simulation,
//! privacy reports, instance verification, and a standalone cloud service.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use cloak_core::group::{sample_isomorphism, Isomorphism, Scenario, KEY_COND_LIMIT};
use cloak_core::instance::ProblemInstance;
use cloak_core::io::{key_from_json, key_to_json, objective_from_json, system_from_json, KeyFile};
use cloak_core::mpc::SolverConfig;
use cloak_core::objective::ControlObjective;
use cloak_core::privacy::{dim_pair_formula, uncertainty_dimension};
use cloak_core::protocol::{indistinguishable, replay_pair, run_session, Transport};
use cloak_core::sysmodel::{lift_system, BarePlant};

mod report;
use report::{write_outputs, CheckResult};

/// Verbosity from CLOAKCTL_LOG: "debug" > "info" > default (warnings only).
fn verbosity() -> u8 {
    match std::env::var("CLOAKCTL_LOG").ok().as_deref() {
        Some("debug") => 2,
        Some("info") => 1,
        _ => 0,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbosity() >= 1 { eprintln!($($arg)*); }
    };
}

#[derive(Parser)]
#[command(name = "cloakctl", version, about = "Privacy-preserving control over an untrusted cloud")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an encoding key for a system and write it to a key file.
    Keygen(KeygenArgs),
    /// Run a private closed-loop session and write transcript, report and
    /// trajectory files.
    Simulate(SimulateArgs),
    /// Run the non-private baseline (identity key) on the same instance.
    Direct(DirectArgs),
    /// Quantify the privacy of an instance as uncertainty-set dimensions.
    PrivacyReport(PrivacyArgs),
    /// Check an instance/key pair: dimensions, invertibility, replay
    /// indistinguishability and formula/oracle agreement.
    Verify(VerifyArgs),
    /// Run a standalone cloud service accepting TCP sessions.
    Serve(ServeArgs),
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    objective: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// Override the horizon by truncating the reference trajectories.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value = "in-process")]
    transport: String,
    /// Bind address for a locally spawned cloud (tcp transport).
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Connect to an external cloud instead of spawning one.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DirectArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    objective: PathBuf,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PrivacyArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    objective: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long = "side-k", default_value_t = 0)]
    side_k: usize,
    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    objective: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7700")]
    listen: String,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Keygen(args) => cmd_keygen(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Direct(args) => cmd_direct(args),
        Command::PrivacyReport(args) => cmd_privacy_report(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Serve(args) => cmd_serve(args),
    }
}

fn load_plant(path: &Path) -> Result<BarePlant> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading system file {}", path.display()))?;
    system_from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_objective(path: &Path, horizon: Option<usize>) -> Result<ControlObjective> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading objective file {}", path.display()))?;
    let obj = objective_from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    match horizon {
        None => Ok(obj),
        Some(h) if h == obj.horizon() => Ok(obj),
        Some(h) if h < obj.horizon() => {
            let x_ref = obj.x_ref()[..=h].to_vec();
            let u_ref = obj.u_ref()[..=h].to_vec();
            Ok(ControlObjective::new(
                obj.cost_matrix().clone(),
                x_ref,
                u_ref,
                obj.constraints().clone(),
                h,
            )?)
        }
        Some(h) => bail!(
            "requested horizon {h} exceeds the {} reference points in the objective file",
            obj.horizon() + 1
        ),
    }
}

fn load_key(path: &Path) -> Result<(Isomorphism, KeyFile)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading key file {}", path.display()))?;
    let file = key_from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let iso = file.into_isomorphism()?;
    Ok((iso, file))
}

/// Instances start from the origin of the bare state space.
fn build_instance(plant: BarePlant, obj: ControlObjective) -> Result<ProblemInstance> {
    let n = plant.n();
    Ok(ProblemInstance::new(plant, obj, DVector::zeros(n))?)
}

fn parse_transport(
    args_transport: &str,
    listen: &str,
    connect: &Option<String>,
) -> Result<Transport> {
    match args_transport {
        "in-process" => Ok(Transport::InProcess),
        "tcp" => Ok(match connect {
            Some(addr) => Transport::TcpConnect { addr: addr.clone() },
            None => Transport::TcpSpawn {
                addr: listen.to_string(),
            },
        }),
        other => bail!("unknown transport {other:?} (expected in-process or tcp)"),
    }
}

fn cmd_keygen(args: KeygenArgs) -> Result<i32> {
    let plant = load_plant(&args.system)?;
    let sys = lift_system(&plant)?;
    let scenario = Scenario::from_index(args.scenario)?;
    let (iso, info) = sample_isomorphism(scenario, &sys, args.seed)?;
    let file = KeyFile::from_parts(&iso, scenario, args.seed, &info);
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("key.json");
    fs::write(&path, key_to_json(&file)?)?;
    info!("wrote {}", path.display());
    if info.identity_fallback {
        eprintln!("warning: trivial symmetry group, wrote the identity key");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let plant = load_plant(&args.system)?;
    let obj = load_objective(&args.objective, args.horizon)?;
    let (key, key_file) = load_key(&args.key)?;
    let instance = build_instance(plant, obj)?;
    let transport = parse_transport(&args.transport, &args.listen, &args.connect)?;
    let cfg = SolverConfig::default();
    let result = run_session(&instance, &key, args.steps, &transport, &cfg)?;
    info!("session cost {:.6e}", result.cost);
    write_outputs(
        &args.out,
        &result,
        &instance,
        Some(key_file.scenario),
        &args.transport,
    )?;
    Ok(0)
}

fn cmd_direct(args: DirectArgs) -> Result<i32> {
    let plant = load_plant(&args.system)?;
    let obj = load_objective(&args.objective, args.horizon)?;
    let instance = build_instance(plant, obj)?;
    let (n, m, p) = instance.dims();
    let key = Isomorphism::identity(n, m, p);
    let cfg = SolverConfig::default();
    let result = run_session(&instance, &key, args.steps, &Transport::InProcess, &cfg)?;
    info!("baseline cost {:.6e}", result.cost);
    write_outputs(&args.out, &result, &instance, None, "in-process")?;
    Ok(0)
}

fn cmd_privacy_report(args: PrivacyArgs) -> Result<i32> {
    let plant = load_plant(&args.system)?;
    let obj = load_objective(&args.objective, None)?;
    let scenario = Scenario::from_index(args.scenario)?;
    let report = uncertainty_dimension(scenario, &plant, obj.constraints(), args.side_k)?;
    let json = serde_json::to_string_pretty(&report)?;
    if args.json {
        println!("{json}");
    } else {
        println!("scenario                     {}", report.scenario);
        println!("dim group                    {}", report.dim_group);
        println!("dim stabilizer (A,B)         {}", report.dim_stabilizer_pair);
        println!("dim stabilizer system        {}", report.dim_stabilizer_sys);
        println!("dim stabilizer instance      {}", report.dim_stabilizer_omega);
        println!("side knowledge rank          {}", report.side_knowledge_k);
        println!("uncertainty dimension        {}", report.uncertainty_dim);
        println!("scenario-1 lower bound       {}", report.scenario1_lower_bound);
        for note in &report.notes {
            println!("note: {note}");
        }
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("privacy_report.json"), json)?;
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let mut checks: Vec<CheckResult> = Vec::new();
    fn fail(name: &str, detail: String, checks: &mut Vec<CheckResult>) {
        checks.push(CheckResult {
            check: name.to_string(),
            pass: false,
            detail,
        });
    }

    let plant = load_plant(&args.system)?;
    let obj = load_objective(&args.objective, None)?;
    let (key, key_file) = load_key(&args.key)?;

    // dims: system, objective and key must agree
    let dims_ok = obj.n() == plant.n()
        && obj.input_dim() == plant.m()
        && key.dims() == (plant.n(), plant.m(), plant.p());
    checks.push(CheckResult {
        check: "dims".into(),
        pass: dims_ok,
        detail: format!(
            "system ({},{},{}), objective ({},{}), key {:?}",
            plant.n(),
            plant.m(),
            plant.p(),
            obj.n(),
            obj.input_dim(),
            key.dims()
        ),
    });

    // key-invertibility: bounded condition numbers
    let cond = key.condition_number();
    let key_ok = cond.is_finite() && cond <= KEY_COND_LIMIT;
    checks.push(CheckResult {
        check: "key-invertibility".into(),
        pass: key_ok,
        detail: format!("worst condition number {cond:.3e}"),
    });

    if dims_ok && key_ok {
        let instance = build_instance(plant.clone(), obj.clone())?;
        let cfg = SolverConfig::default();

        // formula vs numerical oracle on this system
        match (dim_pair_formula(&plant), lift_system(&plant)) {
            (Ok(formula), Ok(sys)) => {
                let oracle = cloak_core::group::stabilizer_subspace(&sys, false).dim;
                checks.push(CheckResult {
                    check: "formula-oracle".into(),
                    pass: formula == oracle,
                    detail: format!("formula {formula}, oracle {oracle}"),
                });
            }
            (Err(e), _) | (_, Err(e)) => fail("formula-oracle", e.to_string(), &mut checks),
        }

        // scenario-3 keys must fix the system
        if key_file.scenario == 3 {
            match lift_system(&plant).and_then(|sys| {
                let t = key.transform_system(&sys)?;
                let res = (t.a() - sys.a())
                    .abs()
                    .max()
                    .max((t.b() - sys.b()).abs().max());
                Ok(res.max((t.c() - sys.c()).abs().max()))
            }) {
                Ok(res) => checks.push(CheckResult {
                    check: "key-fixed-point".into(),
                    pass: res <= 1e-8,
                    detail: format!("residual {res:.3e}"),
                }),
                Err(e) => fail("key-fixed-point", e.to_string(), &mut checks),
            }
        }

        // replay indistinguishability on this instance
        match replay_pair(&instance, &key, args.steps, &Transport::InProcess, &cfg) {
            Ok((t1, t2)) => match indistinguishable(&t1, &t2) {
                Ok(same) => checks.push(CheckResult {
                    check: "replay-indistinguishability".into(),
                    pass: same,
                    detail: format!("{} rounds compared", t1.rounds()),
                }),
                Err(e) => fail("replay-indistinguishability", e.to_string(), &mut checks),
            },
            Err(e) => fail("replay-indistinguishability", e.to_string(), &mut checks),
        }

        // transport equivalence, transcript shape, solver health
        let t_in = run_session(&instance, &key, 3, &Transport::InProcess, &cfg);
        let t_tcp = run_session(
            &instance,
            &key,
            3,
            &Transport::TcpSpawn {
                addr: "127.0.0.1:0".into(),
            },
            &cfg,
        );
        match (t_in, t_tcp) {
            (Ok(a), Ok(b)) => {
                let same = a.transcript.to_jsonl()? == b.transcript.to_jsonl()?;
                checks.push(CheckResult {
                    check: "transport-equivalence".into(),
                    pass: same,
                    detail: "in-process vs tcp transcript bytes".into(),
                });
                checks.push(CheckResult {
                    check: "transcript-alternation".into(),
                    pass: a.transcript.validate_alternation().is_ok(),
                    detail: format!("{} entries", a.transcript.entries.len()),
                });
                let kkt_ok = a
                    .solver_diags
                    .iter()
                    .all(|d| d.kkt.stationarity <= 1e-6 && d.kkt.primal <= 1e-6);
                checks.push(CheckResult {
                    check: "solver-kkt".into(),
                    pass: kkt_ok,
                    detail: "per-step first-order residuals".into(),
                });
            }
            (Err(e), _) | (_, Err(e)) => fail("transport-equivalence", e.to_string(), &mut checks),
        }
    }

    println!("{}", serde_json::to_string_pretty(&checks)?);
    let all_pass = checks.iter().all(|c| c.pass);
    if !all_pass {
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.check.as_str())
            .collect();
        eprintln!("failed checks: {}", failed.join(", "));
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_serve(args: ServeArgs) -> Result<i32> {
    let listener =
        TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    eprintln!("cloud service listening on {}", listener.local_addr()?);
    cloak_core::protocol::serve(listener, SolverConfig::default())?;
    Ok(0)
}
