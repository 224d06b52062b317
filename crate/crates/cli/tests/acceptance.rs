//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). Criteria with a
//! runtime budget measure and enforce it. Tests serialize on a global
//! lock so the timing budgets are not distorted by each other.
//!
//! Run with:
//!   cargo test -p framecal-cli --test acceptance -- --nocapture

use std::net::TcpListener;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use framecal_core::rng::derive_seed;
use framecal_core::{
    apply_frame_maps, run_session, separability_test, singlet_vector, spin_flip, time_reversal,
    witness_check, BlochParams, Decision, DensityMatrix, FlipSide, FrameMap, Matrix4c,
    MeasurementSchedule, Mode, Party, Preset, SessionConfig, StateSpec, WitnessMap,
    POSITIVITY_TOL,
};

static SUITE_LOCK: Mutex<()> = Mutex::new(());

fn criterion<F: FnOnce() + UnwindSafe>(number: u32, label: &str, body: F) {
    let guard = SUITE_LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    let started = Instant::now();
    let result = catch_unwind(body);
    let elapsed = started.elapsed();
    drop(guard);
    match result {
        Ok(()) => println!(
            "acceptance criterion {number} ({label}): PASS  [{:.2}s]",
            elapsed.as_secs_f64()
        ),
        Err(cause) => {
            println!(
                "acceptance criterion {number} ({label}): FAIL  [{:.2}s]",
                elapsed.as_secs_f64()
            );
            resume_unwind(cause);
        }
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_framecal"))
}

fn temp_path(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("framecal-acceptance-{}-{name}", std::process::id()))
}

/// Independent oracle: Bell-basis closed-form spectrum for a = b = 0,
/// c = diag(c1, c2, c3).
fn bell_diagonal_spectrum(c: [f64; 3]) -> [f64; 4] {
    let [c1, c2, c3] = c;
    let mut eigs = [
        (1.0 - c1 - c2 - c3) / 4.0,
        (1.0 - c1 + c2 + c3) / 4.0,
        (1.0 + c1 - c2 + c3) / 4.0,
        (1.0 + c1 + c2 - c3) / 4.0,
    ];
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

fn random_valid_state(rng: &mut ChaCha8Rng) -> BlochParams {
    let mut v = [Complex64::new(0.0, 0.0); 4];
    let mut norm_sq = 0.0;
    while norm_sq <= 1e-12 {
        norm_sq = 0.0;
        for entry in v.iter_mut() {
            *entry = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            norm_sq += entry.norm_sqr();
        }
    }
    let scale = 1.0 / norm_sq.sqrt();
    for entry in v.iter_mut() {
        *entry *= scale;
    }
    let w: f64 = rng.gen();
    let mixed = Matrix4c::outer(&v)
        .scale(w)
        .add(&Matrix4c::identity().scale((1.0 - w) / 4.0));
    DensityMatrix::from_entries(mixed)
        .expect("mixture is a density matrix")
        .to_bloch()
        .expect("valid state has bounded parameters")
}

fn random_proper_rotation(rng: &mut ChaCha8Rng) -> FrameMap {
    let mut q = [0.0f64; 4];
    let mut norm_sq = 0.0;
    while norm_sq <= 1e-12 {
        norm_sq = 0.0;
        for entry in q.iter_mut() {
            *entry = rng.sample(StandardNormal);
            norm_sq += *entry * *entry;
        }
    }
    let scale = 1.0 / norm_sq.sqrt();
    for entry in q.iter_mut() {
        *entry *= scale;
    }
    let [w, x, y, z] = q;
    FrameMap::new(
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ],
        false,
    )
    .expect("quaternion rotations are orthogonal")
}

fn detection_config(seed: u64, pairs_per_cell: u64, f_bob: FrameMap) -> SessionConfig {
    let mut cfg = SessionConfig::new(StateSpec::Preset(Preset::Singlet), seed);
    cfg.frame_bob = f_bob;
    cfg.schedule = MeasurementSchedule::round_robin(pairs_per_cell);
    cfg.mode = Mode::Statistical;
    cfg.z_threshold = 5.0;
    cfg.n_bootstrap = 500;
    cfg
}

#[test]
fn criterion_1_exact_flipped_singlet_reproduction() {
    criterion(1, "exact flipped-singlet reproduction", || {
        let report_path = temp_path("c1-report.json");
        let started = Instant::now();
        let out = bin()
            .args([
                "witness",
                "--state",
                "singlet",
                "--map",
                "spin-flip-alice",
                "--report",
                report_path.to_str().unwrap(),
            ])
            .output()
            .expect("witness runs");
        let elapsed = started.elapsed();
        assert_eq!(out.status.code(), Some(2), "incompatible must exit 2");
        assert!(
            elapsed < Duration::from_secs(1),
            "witness took {elapsed:?}, budget is 1s"
        );

        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        let min = report["verdict"]["min_eigenvalue"].as_f64().unwrap();
        assert!(
            (min + 0.5).abs() < 1e-10,
            "reported min eigenvalue {min} is not -0.5"
        );
        std::fs::remove_file(&report_path).ok();

        // The singlet vector is an eigenvector of the candidate with
        // eigenvalue -1/2: ⟨ψ|ρ'|ψ⟩ = -1/2.
        let singlet = Preset::Singlet.bloch_params().unwrap();
        let candidate = spin_flip(&singlet, FlipSide::Alice).to_matrix();
        let overlap = candidate.fidelity_with_pure(&singlet_vector()).unwrap();
        assert!(
            (overlap + 0.5).abs() < 1e-10,
            "⟨ψ|ρ'|ψ⟩ = {overlap}, expected -0.5"
        );
    });
}

#[test]
fn criterion_2_statistical_detection_at_desk_scale() {
    criterion(2, "statistical detection at desk scale", || {
        let started = Instant::now();
        let trials = 100u64;
        let mut detections = 0u32;
        let mut min_eig_sum = 0.0;
        for trial in 0..trials {
            let cfg = detection_config(
                derive_seed(0xD07, "criterion-2", trial),
                1000,
                FrameMap::space_reflected(),
            );
            let transcript = run_session(&cfg).expect("session runs");
            if transcript.verdict.decision == Decision::Incompatible {
                detections += 1;
            }
            min_eig_sum += transcript.verdict.min_eigenvalue;
        }
        let elapsed = started.elapsed();
        assert!(
            detections >= 99,
            "detected {detections}/100, need at least 99"
        );
        let mean_min = min_eig_sum / trials as f64;
        assert!(
            (mean_min + 0.5).abs() < 0.05,
            "mean min eigenvalue {mean_min}, expected within 0.05 of -0.5"
        );
        assert!(
            elapsed < Duration::from_secs(30),
            "100 trials took {elapsed:?}, budget is 30s"
        );
    });
}

#[test]
fn criterion_3_no_false_alarms() {
    criterion(3, "no false alarms", || {
        let states = [
            StateSpec::Preset(Preset::Singlet),
            StateSpec::Preset(Preset::PhiMinus),
            StateSpec::Preset(Preset::Werner { p: 0.5 }),
            StateSpec::Preset(Preset::Werner { p: 0.0 }),
        ];
        let mut false_alarms = 0u32;
        for (s, state) in states.into_iter().enumerate() {
            for trial in 0..100u64 {
                let mut cfg = detection_config(
                    derive_seed(0xFA15E, "criterion-3", s as u64 * 100 + trial),
                    1000,
                    FrameMap::identity(),
                );
                cfg.true_state = state;
                let transcript = run_session(&cfg).expect("session runs");
                if transcript.verdict.decision == Decision::Incompatible {
                    false_alarms += 1;
                }
            }
        }
        assert!(
            false_alarms <= 1,
            "{false_alarms}/400 false alarms, allowed at most 1"
        );
    });
}

#[test]
fn criterion_4_rotation_invisibility() {
    criterion(4, "rotation invisibility", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x207A7E);
        let states: Vec<BlochParams> =
            (0..100).map(|_| random_valid_state(&mut rng)).collect();
        let frames: Vec<(FrameMap, FrameMap)> = (0..1000)
            .map(|_| (random_proper_rotation(&mut rng), random_proper_rotation(&mut rng)))
            .collect();
        for (fa, fb) in &frames {
            let state = &states[rng.gen_range(0..states.len())];
            let mapped = apply_frame_maps(state, fa, fb).expect("rotations preserve validity");
            let min = mapped.to_matrix().spectrum().min_eigenvalue;
            assert!(
                min >= -POSITIVITY_TOL,
                "rotated frames produced min eigenvalue {min}"
            );
        }
        // Denser cross-check on a subset: every state against every
        // twentieth frame pair.
        for state in &states {
            for (fa, fb) in frames.iter().step_by(20) {
                let mapped = apply_frame_maps(state, fa, fb).unwrap();
                let min = mapped.to_matrix().spectrum().min_eigenvalue;
                assert!(min >= -POSITIVITY_TOL, "min eigenvalue {min}");
            }
        }
    });
}

#[test]
fn criterion_5_separability_boundary() {
    criterion(5, "separability boundary on werner family", || {
        for i in 0..=10u32 {
            let p = f64::from(i) / 10.0;
            let mut cfg = SessionConfig::new(
                StateSpec::Preset(Preset::Werner { p }),
                derive_seed(5, "criterion-5", u64::from(i)),
            );
            cfg.mode = Mode::Exact;
            cfg.frame_bob = FrameMap::space_reflected();
            let transcript = run_session(&cfg).expect("session runs");
            let expected_min = (1.0 - 3.0 * p) / 4.0;
            assert!(
                (transcript.verdict.min_eigenvalue - expected_min).abs() < 1e-10,
                "p = {p}: min {} vs (1-3p)/4 = {expected_min}",
                transcript.verdict.min_eigenvalue
            );
            let expected = if p > 1.0 / 3.0 {
                Decision::Incompatible
            } else {
                Decision::Compatible
            };
            assert_eq!(transcript.verdict.decision, expected, "p = {p}");

            // Dual route: the generic eigensolver agrees with the
            // Bell-basis closed form on the flipped candidate.
            let flipped = spin_flip(&Preset::Werner { p }.bloch_params().unwrap(), FlipSide::Bob);
            let solver = flipped.to_matrix().spectrum().eigenvalues;
            let oracle = bell_diagonal_spectrum([p, p, p]);
            for k in 0..4 {
                assert!(
                    (solver[k] - oracle[k]).abs() < 1e-10,
                    "p = {p}: solver {solver:?} vs closed form {oracle:?}"
                );
            }
        }
    });
}

#[test]
fn criterion_6_peres_horodecki_equivalence() {
    criterion(6, "witness fires iff nonseparable", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9E2E5);
        let mut nonseparable = 0u32;
        for _ in 0..10_000 {
            let state = random_valid_state(&mut rng);
            let separable = separability_test(&state).expect("valid state").separable;
            let fired = witness_check(&state, WitnessMap::TimeReversalAlice).min_eigenvalue
                < -POSITIVITY_TOL;
            assert_eq!(fired, !separable, "PPT and witness disagree");
            if !separable {
                nonseparable += 1;
            }
        }
        assert!(
            nonseparable > 1_000 && nonseparable < 9_000,
            "sample covers both classes ({nonseparable} nonseparable)"
        );
    });
}

#[test]
fn criterion_7_parity_time_spectral_equivalence() {
    criterion(7, "spin flip and partial transpose share spectra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x57EC);
        for _ in 0..10_000 {
            let state = random_valid_state(&mut rng);
            let flip = spin_flip(&state, FlipSide::Alice).to_matrix().spectrum();
            let pt = time_reversal(&state, Party::Alice).to_matrix().spectrum();
            for k in 0..4 {
                assert!(
                    (flip.eigenvalues[k] - pt.eigenvalues[k]).abs() < 1e-10,
                    "spectra differ: {:?} vs {:?}",
                    flip.eigenvalues,
                    pt.eigenvalues
                );
            }
        }
    });
}

#[test]
fn criterion_8_transport_equivalence() {
    criterion(8, "networked session equals in-process session", || {
        let started = Instant::now();
        let cfg = detection_config(0xC8, 500, FrameMap::space_reflected());
        let reference = run_session(&cfg).expect("in-process session");

        let config_path = temp_path("c8-config.json");
        std::fs::write(&config_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port()
            .to_string();

        let mut children = Vec::new();
        let mut report_paths = Vec::new();
        for role in ["cecil", "alice", "bob"] {
            let report_path = temp_path(&format!("c8-report-{role}.json"));
            let child = bin()
                .args([
                    "serve",
                    "--role",
                    role,
                    "--port",
                    &port,
                    "--config",
                    config_path.to_str().unwrap(),
                    "--report",
                    report_path.to_str().unwrap(),
                ])
                .stdout(std::process::Stdio::null())
                .spawn()
                .expect("role process spawns");
            children.push(child);
            report_paths.push(report_path);
        }
        for child in children.iter_mut() {
            let status = child.wait().expect("role process exits");
            assert_eq!(status.code(), Some(2), "every role sees incompatibility");
        }
        let elapsed = started.elapsed();
        assert!(
            elapsed < Duration::from_secs(60),
            "networked session took {elapsed:?}, budget is 60s"
        );

        let reports: Vec<serde_json::Value> = report_paths
            .iter()
            .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
            .collect();

        // The source's networked transcript digest is byte-identical to
        // the in-process digest.
        assert_eq!(
            reports[0]["transcript_digest"].as_str().unwrap(),
            reference.digest(),
            "transcript digests differ between transports"
        );
        // Every role reproduces the same estimate and verdict.
        let reference_estimate = serde_json::to_value(&reference.estimate).unwrap();
        let reference_verdict = serde_json::to_value(reference.verdict).unwrap();
        for report in &reports {
            assert_eq!(report["estimate"], reference_estimate);
            assert_eq!(report["verdict"], reference_verdict);
        }

        for path in report_paths {
            std::fs::remove_file(path).ok();
        }
        std::fs::remove_file(config_path).ok();
    });
}

#[test]
fn criterion_9_totally_correlated_state_is_conclusive() {
    criterion(9, "totally correlated state detects the flip", || {
        let mut cfg = SessionConfig::new(StateSpec::Preset(Preset::PhiMinus), 9);
        cfg.mode = Mode::Exact;
        cfg.frame_bob = FrameMap::space_reflected();
        let transcript = run_session(&cfg).expect("session runs");
        assert_eq!(transcript.verdict.decision, Decision::Incompatible);
        assert!(
            (transcript.verdict.min_eigenvalue + 0.5).abs() < 1e-10,
            "min eigenvalue {} is not -0.5",
            transcript.verdict.min_eigenvalue
        );
    });
}
