//! The four subcommands: witness, simulate, serve, sweep.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;

use framecal_core::rng;
use framecal_core::tomography;
use framecal_core::transport::{serve, ServeOptions};
use framecal_core::{
    estimate, parse_state_spec, run_session, run_time_arrow_session, sample_run, witness_check,
    Decision, Estimate, FrameMap, MeasurementSchedule, Mode, Preset, Role, SessionConfig,
    SessionTranscript, WitnessMap,
};

use crate::report::{print_params, print_spectrum, print_verdict, RunReport};

// ---------------------------------------------------------------------------
// witness
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct WitnessArgs {
    /// State to test: a preset (`singlet`, `phi_minus`, `mixed`,
    /// `werner:P`, `bell_diagonal:C1,C2,C3`, `product:AX,AY,AZ;BX,BY,BZ`)
    /// or inline JSON with explicit a/b/c.
    #[arg(long)]
    pub state: String,
    /// Witness map to apply: spin-flip-alice, spin-flip-bob,
    /// time-reversal-alice, or time-reversal-bob.
    #[arg(long)]
    pub map: String,
    /// Write the machine-readable report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn cmd_witness(args: &WitnessArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let spec = parse_state_spec(&args.state)?;
    let map = WitnessMap::parse(&args.map)?;
    let params = spec.bloch_params()?;
    if !params.is_physical() {
        bail!("--state does not describe a positive density matrix");
    }

    let spectrum = witness_check(&params, map);
    let transformed = map.apply(&params);
    let est = Estimate::exact(transformed);
    let verdict = tomography::verdict(&est, Mode::Exact, 0.0, 0, 0);

    print_params("input state", &params);
    println!("map: {map}");
    print_params("reconstructed candidate", &transformed);
    print_spectrum(&spectrum);
    print_verdict(&verdict);

    let report = RunReport {
        command: "witness".to_string(),
        config: serde_json::json!({ "state": spec, "map": map }),
        seed: None,
        estimate: est,
        spectrum,
        verdict,
        transcript_digest: None,
        timing_ms: started.elapsed().as_millis() as u64,
    };
    if let Some(path) = &args.report {
        report.write_json(path)?;
    }
    Ok(report.exit_code())
}

// ---------------------------------------------------------------------------
// shared session plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Clone)]
pub struct SessionArgs {
    /// JSON file with the session configuration; flags override fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the true state (same syntax as `witness --state`).
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pairs measured per (axis, axis) cell; total pairs are 9x this.
    #[arg(long)]
    pub pairs_per_cell: Option<u64>,
    /// Decision mode: exact or statistical.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub z_threshold: Option<f64>,
    /// Write the machine-readable report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Export the transcript as JSON lines here.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

fn parse_mode(text: &str) -> anyhow::Result<Mode> {
    match text.trim().to_ascii_lowercase().as_str() {
        "exact" => Ok(Mode::Exact),
        "statistical" => Ok(Mode::Statistical),
        other => bail!("unknown mode '{other}' (expected exact or statistical)"),
    }
}

fn load_session_config(args: &SessionArgs) -> anyhow::Result<SessionConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("opening config {}", path.display()))?;
            serde_json::from_reader(file)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => {
            let state = args
                .state
                .as_deref()
                .context("either --config or --state is required")?;
            SessionConfig::new(parse_state_spec(state)?, args.seed.unwrap_or(0))
        }
    };
    if let Some(state) = &args.state {
        cfg.true_state = parse_state_spec(state)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(pairs) = args.pairs_per_cell {
        cfg.schedule.pairs_per_axis_combo = pairs;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(z) = args.z_threshold {
        cfg.z_threshold = z;
    }
    Ok(cfg)
}

fn report_session(
    command: &str,
    cfg: &SessionConfig,
    transcript: &SessionTranscript,
    args: &SessionArgs,
    started: Instant,
) -> anyhow::Result<i32> {
    println!("session: {}  (view: {})", transcript.session_id, transcript.point_of_view);
    print_params("reconstructed state", &transcript.estimate.params);
    let spectrum = transcript.estimate.params.to_matrix().spectrum();
    print_spectrum(&spectrum);
    print_verdict(&transcript.verdict);
    println!("transcript digest: {}", transcript.digest());

    if let Some(path) = &args.transcript {
        std::fs::write(path, transcript.to_jsonl())
            .with_context(|| format!("writing transcript to {}", path.display()))?;
    }
    let report = RunReport {
        command: command.to_string(),
        config: serde_json::to_value(cfg)?,
        seed: Some(cfg.seed),
        estimate: transcript.estimate.clone(),
        spectrum,
        verdict: transcript.verdict,
        transcript_digest: Some(transcript.digest()),
        timing_ms: started.elapsed().as_millis() as u64,
    };
    if let Some(path) = &args.report {
        report.write_json(path)?;
    }
    Ok(report.exit_code())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub session: SessionArgs,
}

pub fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let cfg = load_session_config(&args.session)?;
    // A pure time-arrow scenario goes through the dedicated entry point,
    // which enforces that the rotations carry no chirality mismatch.
    let time_arrow_only = (cfg.frame_alice.time_flip() || cfg.frame_bob.time_flip())
        && cfg.frame_alice.is_proper()
        && cfg.frame_bob.is_proper();
    let transcript = if time_arrow_only {
        run_time_arrow_session(&cfg)?
    } else {
        run_session(&cfg)?
    };
    report_session("simulate", &cfg, &transcript, &args.session, started)
}

// ---------------------------------------------------------------------------
// serve
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Which role this process plays: cecil, alice, or bob.
    #[arg(long)]
    pub role: String,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub port: u16,
    /// How long connecting roles retry while the source comes up.
    #[arg(long, default_value_t = 5_000)]
    pub retry_ms: u64,
    #[command(flatten)]
    pub session: SessionArgs,
}

pub fn cmd_serve(args: &ServeArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let role = Role::parse(&args.role)?;
    let cfg = load_session_config(&args.session)?;
    let mut opts = ServeOptions::new(args.host.clone(), args.port);
    opts.connect_retry_ms = args.retry_ms;
    let transcript = serve(role, &cfg, &opts)?;
    report_session("serve", &cfg, &transcript, &args.session, started)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated werner mixing parameters.
    #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub p_values: String,
    /// Comma-separated pairs-per-cell sizes.
    #[arg(long, default_value = "1000")]
    pub pairs_per_cell: String,
    /// Seeded trials per grid point.
    #[arg(long, default_value_t = 20)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5.0)]
    pub z_threshold: f64,
    #[arg(long, default_value_t = 200)]
    pub n_bootstrap: u32,
    /// Frame error under test: a witness map name, or `none` for the
    /// false-alarm baseline.
    #[arg(long, default_value = "spin-flip-bob")]
    pub map: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn frames_for_map(map: Option<WitnessMap>) -> (FrameMap, FrameMap) {
    match map {
        None => (FrameMap::identity(), FrameMap::identity()),
        Some(WitnessMap::SpinFlipAlice) => (FrameMap::space_reflected(), FrameMap::identity()),
        Some(WitnessMap::SpinFlipBob) => (FrameMap::identity(), FrameMap::space_reflected()),
        Some(WitnessMap::TimeReversalAlice) => (FrameMap::time_reversed(), FrameMap::identity()),
        Some(WitnessMap::TimeReversalBob) => (FrameMap::identity(), FrameMap::time_reversed()),
    }
}

fn parse_grid(text: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .with_context(|| format!("bad {what} value '{tok}'"))
        })
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<i32> {
    let p_values = parse_grid(&args.p_values, "p")?;
    let pair_grid: Vec<u64> = parse_grid(&args.pairs_per_cell, "pairs-per-cell")?
        .into_iter()
        .map(|v| v as u64)
        .collect();
    if args.trials == 0 {
        bail!("--trials must be positive");
    }
    let map = match args.map.trim() {
        "none" => None,
        other => Some(WitnessMap::parse(other)?),
    };
    let (f_alice, f_bob) = frames_for_map(map);

    let mut csv = String::from("p,N,trials,detect_rate,mean_min_eig,mean_std\n");
    let mut combo = 0u64;
    for &p in &p_values {
        let state = Preset::Werner { p }.bloch_params()?;
        for &n in &pair_grid {
            let schedule = MeasurementSchedule::round_robin(n);
            let mut detections = 0u32;
            let mut sum_min = 0.0;
            let mut sum_std = 0.0;
            for trial in 0..args.trials {
                let trial_seed = rng::derive_seed(
                    args.seed,
                    "sweep-trial",
                    combo * u64::from(args.trials) + u64::from(trial),
                );
                let (alice, bob) = sample_run(&state, &schedule, &f_alice, &f_bob, trial_seed)?;
                let est = estimate(&alice, &bob)?;
                let verdict = tomography::verdict(
                    &est,
                    Mode::Statistical,
                    args.z_threshold,
                    args.n_bootstrap,
                    rng::derive_seed(trial_seed, "bootstrap-stream", 0),
                );
                if verdict.decision == Decision::Incompatible {
                    detections += 1;
                }
                sum_min += verdict.min_eigenvalue;
                sum_std += verdict.min_eigenvalue_std;
            }
            let trials = f64::from(args.trials);
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p,
                n,
                args.trials,
                f64::from(detections) / trials,
                sum_min / trials,
                sum_std / trials,
            ));
            combo += 1;
        }
    }

    match &args.out {
        Some(path) => std::fs::write(path, csv.as_bytes())
            .with_context(|| format!("writing CSV to {}", path.display()))?,
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(0)
}
