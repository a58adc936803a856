//! `coins` command-line interface.
//!
//! Exit codes: 0 ok, 1 other failure, 2 server unreachable, 3 configuration
//! error, 4 unknown id.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use coins::app::{App, AppConfig, TimeMode};
use coins::client::{Client, ClientError};
use coins::fleet::{table1, SeedFile};
use coins::repostore::WorkTree;
use coins::server::{self, HistogramQuery, SenseQuery};
use coins_core::config::{ConfigError, DeploymentConfig, DEPLOY_PATH};
use coins_core::radio::{Band, InterfererProfile};
use coins_core::run::{HookEvent, PipelineRun};

const DEFAULT_ADDR: &str = "127.0.0.1:7410";

#[derive(Parser)]
#[command(
    name = "coins",
    version,
    about = "Continuous integration for wireless testbeds"
)]
struct Cli {
    /// Server address.
    #[arg(long, global = true, env = "COINS_ADDR", default_value = DEFAULT_ADDR)]
    addr: String,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start the registry, pipeline, device daemons and radio medium.
    Serve(ServeArgs),
    /// Print the built-in fleet, or register the devices of a seed file.
    Seed {
        file: Option<PathBuf>,
        #[arg(long)]
        print: bool,
    },
    /// Commit a directory and trigger a run.
    Push {
        dir: PathBuf,
        #[arg(long = "ref", default_value = "refs/heads/main")]
        git_ref: String,
        #[arg(long, default_value = "dev@localhost")]
        author: String,
        #[arg(long)]
        parent: Option<String>,
        /// Wait up to this many seconds for the run to finish.
        #[arg(long)]
        wait: Option<u64>,
    },
    /// Tag a commit.
    Tag { commit: String, name: String },
    /// One-line run state.
    Status { run: String },
    /// Test report and notification of a run.
    Report { run: String },
    /// List devices.
    Devices {
        #[arg(long = "type")]
        node_type: Option<String>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        state: Option<String>,
    },
    /// Channel occupancy seen by a device.
    Sense(SenseArgs),
    /// PSD histogram CSV seen by a device.
    Histogram {
        #[command(flatten)]
        sense: SenseArgs,
        #[arg(long, default_value_t = 1.0)]
        bin_db: f64,
        #[arg(long)]
        slice_ms: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "coins-data")]
    data_dir: PathBuf,
    /// Seed fleet file; the built-in fleet if omitted.
    #[arg(long)]
    seed: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ADDR)]
    listen: SocketAddr,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// `fast` or a real-time factor such as `scaled:1`.
    #[arg(long, default_value = "fast", value_parser = parse_time)]
    time: TimeMode,
    /// JSON list of interferers present in every session.
    #[arg(long)]
    interferers: Option<PathBuf>,
    /// Device whose radio corrupts every frame.
    #[arg(long)]
    faulty: Vec<String>,
    /// Do not run the availability sweeper.
    #[arg(long)]
    no_sweep: bool,
}

#[derive(Args)]
struct SenseArgs {
    device: String,
    channel: u32,
    #[arg(long, default_value_t = 1000)]
    window_ms: u64,
    #[arg(long, value_parser = parse_band)]
    band: Option<Band>,
    #[arg(long, default_value_t = 0)]
    t0_ms: u64,
}

impl SenseArgs {
    fn query(&self) -> SenseQuery {
        SenseQuery {
            device: self.device.clone(),
            channel: self.channel,
            window_ms: self.window_ms,
            band: self.band,
            t0_ms: self.t0_ms,
        }
    }
}

fn parse_time(s: &str) -> Result<TimeMode, String> {
    match s.split_once(':') {
        None if s == "fast" => Ok(TimeMode::Fast),
        Some(("scaled", f)) => match f.parse::<f64>() {
            Ok(f) if f > 0.0 && f.is_finite() => Ok(TimeMode::Scaled(f)),
            _ => Err(format!("bad factor {f}")),
        },
        _ => Err("expected fast or scaled:<factor>".into()),
    }
}

fn parse_band(s: &str) -> Result<Band, String> {
    Band::parse(s).ok_or_else(|| format!("unknown band {s}"))
}

/// A failure with its exit code.
struct Failure(i32, String);

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure(e.exit_code(), e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn serve(a: ServeArgs) -> CmdResult {
    let fleet = match &a.seed {
        None => table1(),
        Some(p) => SeedFile::load(p).map_err(|e| Failure(3, format!("BadSeedFile: {e}")))?,
    };
    let mut cfg = AppConfig::new(&a.data_dir, fleet);
    cfg.rng_seed = a.rng_seed;
    cfg.time = a.time;
    cfg.faulty = a.faulty;
    cfg.sweeper = !a.no_sweep;
    if let Some(p) = &a.interferers {
        let raw = std::fs::read(p).map_err(|e| Failure(3, format!("{}: {e}", p.display())))?;
        cfg.ambient = serde_json::from_slice::<Vec<InterfererProfile>>(&raw)
            .map_err(|e| Failure(3, format!("{}: {e}", p.display())))?;
    }
    // Bind before seeding so a busy address fails fast.
    let probe = std::net::TcpListener::bind(a.listen).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => Failure(1, format!("AddressInUse: {}", a.listen)),
        _ => Failure(1, format!("cannot listen on {}: {e}", a.listen)),
    })?;
    drop(probe);
    let app = App::start(cfg).map_err(|e| match e {
        coins::app::AppError::BadSeed { .. } => Failure(3, format!("BadSeedFile: {e}")),
        e => Failure(1, e.to_string()),
    })?;
    let n = app.registry.len();
    let handle = server::spawn(app, a.listen).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => Failure(1, format!("AddressInUse: {}", a.listen)),
        _ => Failure(1, e.to_string()),
    })?;
    eprintln!("coins listening on http://{} with {n} devices", handle.addr);
    handle.join().map_err(|e| Failure(1, e.to_string()))
}

fn seed(cli: &Cli, file: Option<PathBuf>, print: bool) -> CmdResult {
    let Some(file) = file.filter(|_| !print) else {
        print!("{}", table1().to_json());
        return Ok(());
    };
    let f = SeedFile::load(&file).map_err(|e| Failure(3, format!("BadSeedFile: {e}")))?;
    let c = Client::new(&cli.addr);
    let mut ids = Vec::new();
    for d in &f.devices {
        ids.push((d.name.clone(), c.register(&d.descriptor())?.device_id));
    }
    if cli.json {
        print_json(&ids);
    } else {
        for (name, id) in ids {
            println!("{id} {name}");
        }
    }
    Ok(())
}

fn status_line(run: &PipelineRun) -> String {
    let verdict = run
        .verdict()
        .map(|v| v.to_string())
        .unwrap_or_else(|| "-".into());
    format!("{} {verdict}", run.state.label())
}

fn push(
    cli: &Cli,
    dir: PathBuf,
    git_ref: String,
    author: String,
    parent: Option<String>,
    wait: Option<u64>,
) -> CmdResult {
    let tree =
        WorkTree::from_dir(&dir).map_err(|e| Failure(3, format!("{}: {e}", dir.display())))?;
    let raw = tree.get(DEPLOY_PATH).ok_or_else(|| {
        Failure(
            3,
            format!("MissingConfig: {} has no {DEPLOY_PATH}", dir.display()),
        )
    })?;
    let text = std::str::from_utf8(raw)
        .map_err(|_| Failure(3, format!("ConfigSyntax: {DEPLOY_PATH} is not UTF-8")))?;
    DeploymentConfig::parse(text).map_err(|e| {
        let kind = match e {
            ConfigError::Missing(_) => "MissingConfig",
            ConfigError::Syntax { .. } => "ConfigSyntax",
            ConfigError::Invalid(_) => "ConfigInvalid",
        };
        Failure(3, format!("{kind}: {DEPLOY_PATH}: {e}"))
    })?;
    let c = Client::new(&cli.addr);
    let pushed = c.push(tree.into_files(), parent, Some(git_ref.clone()))?;
    let trig = c.hook(&HookEvent {
        commit: pushed.commit.clone(),
        git_ref,
        author,
        received_at: 0,
    })?;
    let Some(secs) = wait else {
        if cli.json {
            print_json(
                &serde_json::json!({"commit": pushed.commit, "run_id": trig.run_id, "coalesced": trig.coalesced}),
            );
        } else {
            println!("{}", trig.run_id);
        }
        return Ok(());
    };
    let deadline = Instant::now() + Duration::from_secs(secs);
    loop {
        let run = c.run(trig.run_id.as_str())?;
        if run.state.is_terminal() || Instant::now() >= deadline {
            if cli.json {
                print_json(&run);
            } else {
                println!("{} {}", trig.run_id, status_line(&run));
            }
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn report(cli: &Cli, run: &str) -> CmdResult {
    let c = Client::new(&cli.addr);
    let r = c.run(run)?;
    let note = c.notification(run).ok();
    if cli.json {
        print_json(&serde_json::json!({"report": r.report, "notification": note}));
        return Ok(());
    }
    println!("{} {}", r.run_id, status_line(&r));
    println!(
        "commit {} ref {} author {}",
        r.event.commit, r.event.git_ref, r.event.author
    );
    for (role, dev) in &r.reserved_devices {
        println!("device {role}={dev}");
    }
    if let Some(t) = &r.report {
        println!(
            "verdict {} cause {} attempts {} channel {}",
            t.verdict,
            t.cause.as_str(),
            t.attempts,
            t.channel
        );
        for h in &t.history {
            println!(
                "  attempt {} channel {} {} cause {}",
                h.attempt,
                h.channel,
                h.verdict,
                h.cause.as_str()
            );
        }
        for s in &t.subsets {
            let devs: Vec<String> = s.devices.iter().map(|(r, d)| format!("{r}={d}")).collect();
            println!(
                "  subset {} {} cause {} channel {} {}",
                s.index,
                s.verdict,
                s.cause.as_str(),
                s.channel,
                devs.join(" ")
            );
        }
        if !t.flagged_devices.is_empty() {
            println!("flagged {}", t.flagged_devices.join(" "));
        }
    }
    if let Some(n) = note {
        println!("notification {}", n.path.display());
    }
    Ok(())
}

fn run() -> CmdResult {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Seed { ref file, print } => seed(&cli, file.clone(), print),
        Cmd::Push {
            ref dir,
            ref git_ref,
            ref author,
            ref parent,
            wait,
        } => push(
            &cli,
            dir.clone(),
            git_ref.clone(),
            author.clone(),
            parent.clone(),
            wait,
        ),
        Cmd::Tag {
            ref commit,
            ref name,
        } => {
            let t = Client::new(&cli.addr).tag(commit, name)?;
            if cli.json {
                print_json(&t);
            } else {
                println!("{} {}", t.tag, t.commit);
            }
            Ok(())
        }
        Cmd::Status { ref run } => {
            let r = Client::new(&cli.addr).run(run)?;
            if cli.json {
                print_json(&r);
            } else {
                println!("{}", status_line(&r));
            }
            Ok(())
        }
        Cmd::Report { ref run } => report(&cli, run),
        Cmd::Devices {
            ref node_type,
            ref env,
            ref state,
        } => {
            let ds = Client::new(&cli.addr).devices(
                node_type.as_deref(),
                env.as_deref(),
                state.as_deref(),
            )?;
            if cli.json {
                print_json(&ds);
            } else {
                for d in ds {
                    let p = d.position;
                    println!(
                        "{} {} {} {} {} {:.1},{:.1},{:.1}",
                        d.device_id,
                        d.name,
                        d.node_type().as_str(),
                        d.environment.as_str(),
                        d.infra_state.as_str(),
                        p.x,
                        p.y,
                        p.z
                    );
                }
            }
            Ok(())
        }
        Cmd::Sense(ref a) => {
            let r = Client::new(&cli.addr).sense(&a.query())?;
            if cli.json {
                print_json(&r);
            } else {
                println!(
                    "{} {} ch {} occupancy {:.4} over {} samples ({} ms, mean {:.1} dBm)",
                    r.device,
                    r.band.name(),
                    r.channel,
                    r.occupancy,
                    r.samples,
                    r.window_ms,
                    r.mean_psd_dbm
                );
            }
            Ok(())
        }
        Cmd::Histogram {
            ref sense,
            bin_db,
            slice_ms,
            ref out,
        } => {
            let csv = Client::new(&cli.addr).histogram(&HistogramQuery {
                sense: sense.query(),
                bin_width_db: bin_db,
                slice_ms,
            })?;
            match out {
                Some(p) => std::fs::write(p, csv)
                    .map_err(|e| Failure(1, format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("coins: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
