//! Acceptance suite: one line per criterion with the measured value and the
//! pinned tolerance. Runs without the libtest harness so the lines always
//! reach the terminal.
//!
//! Criteria 1-5, 9 and 10 are correctness properties and fail the run when
//! missed. Criteria 6-8 measure how the method behaves on the synthetic
//! benchmark; a miss there is reported as FAIL but does not abort the suite.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use cvgfk::checks;
use cvgfk::eval::{miou, miou_from_stats, ConfusionMatrix};
use cvgfk::experiment::{hypothesis_study, run_arm, Arm};
use cvgfk::scene::{generate_dataset, write_dataset, DatasetSpec, SceneFamily};
use cvgfk::segmodel::TrainConfig;

const ORACLE_TOL: f64 = 1e-8;
const ANGLE_TOL: f64 = 1e-9;
const LAMBDA_TOL: f64 = 1e-12;
const BOUND_SLACK: f64 = 1e-12;
const SELF_DISTANCE_TOL: f64 = 1e-9;
const UPPER_BOUND_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const MIN_GAIN: f64 = 0.03;
const MAX_PROMPT_DROP: f64 = -0.01;
const MIN_PEARSON: f64 = 0.2;
const BENCH_SEEDS: [u64; 3] = [11, 12, 13];

struct Outcome {
    id: u32,
    pass: bool,
    enforced: bool,
}

fn line(id: u32, name: &str, pass: bool, enforced: bool, detail: String) -> Outcome {
    let tag = match (pass, enforced) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (measured outcome, not enforced)",
    };
    println!("criterion {id:>2} {tag}: {name}: {detail}");
    Outcome { id, pass, enforced }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn kernel_oracle() -> Outcome {
    let t = Instant::now();
    let r = checks::kernel_oracle(100, 64, 16, 2001, 1).expect("kernel oracle");
    let el = t.elapsed();
    line(
        1,
        "kernel oracle",
        r.max_abs_diff <= ORACLE_TOL && el <= Duration::from_secs(60),
        true,
        format!(
            "max |Q_closed - Q_quad| = {:.2e} (tol {ORACLE_TOL:e}) over {} pairs, {:.1}s (limit 60s)",
            r.max_abs_diff,
            r.trials,
            secs(el)
        ),
    )
}

fn principal_angles() -> Outcome {
    let r = checks::angle_check().expect("angle check");
    line(
        2,
        "principal angles and lambda limits",
        r.planted_error <= ANGLE_TOL && r.identical_max <= ANGLE_TOL && r.lambda_error <= LAMBDA_TOL,
        true,
        format!(
            "planted error {:.2e}, identical max {:.2e} (tol {ANGLE_TOL:e}); lambda error {:.2e} (tol {LAMBDA_TOL:e})",
            r.planted_error, r.identical_max, r.lambda_error
        ),
    )
}

fn metric_bounds() -> Outcome {
    let r = checks::metric_bounds(10_000, 2).expect("metric bounds");
    line(
        3,
        "metric bounds",
        r.min_distance >= -BOUND_SLACK
            && r.max_distance <= 2.0 + BOUND_SLACK
            && r.max_self_distance <= SELF_DISTANCE_TOL,
        true,
        format!(
            "D in [{:.3e}, {:.12}] over {} kernels x {} pairs; max D(x,x) = {:.2e} (tol {SELF_DISTANCE_TOL:e})",
            r.min_distance, r.max_distance, r.kernels, r.pairs_per_kernel, r.max_self_distance
        ),
    )
}

fn upper_bound() -> Outcome {
    let r = checks::upper_bound(10_000, 1.5, 3).expect("upper bound");
    line(
        4,
        "unpaired upper bound at alpha = 1.5",
        r.max_violation <= UPPER_BOUND_TOL,
        true,
        format!(
            "max(lhs - rhs) = {:.4} with constant {} over {} tuples (tol {UPPER_BOUND_TOL:e})",
            r.max_violation, r.constant, r.n_checked
        ),
    )
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let r = checks::gradcheck(10, FD_STEP, 4).expect("gradient check");
    let el = t.elapsed();
    line(
        5,
        "adaptation gradient vs central differences",
        r.max_relative_error <= GRAD_TOL && el <= Duration::from_secs(30),
        true,
        format!(
            "max relative error {:.2e} (tol {GRAD_TOL:e}) over {} batches, {:.1}s (limit 30s)",
            r.max_relative_error,
            r.batches,
            secs(el)
        ),
    )
}

/// Mean target mIoU and mean prompt distance of each arm over the seeds.
fn benchmark() -> (Vec<(Arm, f64)>, f64, Duration) {
    let t = Instant::now();
    let family = SceneFamily::default();
    let base = TrainConfig::default();
    let mut sums = vec![0.0; Arm::ALL.len()];
    let mut prompt_distance = 0.0;
    for seed in BENCH_SEEDS {
        let dataset = generate_dataset(&family, &DatasetSpec::default(), seed).expect("benchmark dataset");
        for (k, arm) in Arm::ALL.into_iter().enumerate() {
            let (_, report) = run_arm(&dataset, arm, &base, seed).expect("training run");
            let score = report.target_test.expect("test split").miou;
            println!("    seed {seed} {arm:<21} target mIoU {score:.4}");
            sums[k] += score;
            if arm == Arm::GeodesicViewPrompt {
                prompt_distance += report.prompt_distance;
            }
        }
    }
    let n = BENCH_SEEDS.len() as f64;
    let means = Arm::ALL.into_iter().zip(sums.iter().map(|s| s / n)).collect();
    (means, prompt_distance / n, t.elapsed())
}

fn adaptation_criteria() -> [Outcome; 2] {
    let (means, prompt_distance, el) = benchmark();
    let get = |a: Arm| means.iter().find(|(m, _)| *m == a).unwrap().1;
    let (none, euc, geo, gvp) = (
        get(Arm::NoAdapt),
        get(Arm::Euclidean),
        get(Arm::Geodesic),
        get(Arm::GeodesicViewPrompt),
    );
    let gain = geo - none;
    let c6 = line(
        6,
        "geodesic adaptation gain",
        gain >= MIN_GAIN && geo >= euc && el <= Duration::from_secs(900),
        false,
        format!(
            "mean mIoU no-adapt {none:.4}, euclidean {euc:.4}, geodesic {geo:.4}; gain {:+.2} pts (need >= {:+.1}), \
             geodesic >= euclidean: {}; {:.0}s (limit 900s)",
            100.0 * gain,
            100.0 * MIN_GAIN,
            geo >= euc,
            secs(el)
        ),
    );
    let change = gvp - geo;
    let c7 = line(
        7,
        "view-condition prompt term",
        change >= MAX_PROMPT_DROP && prompt_distance > 0.0,
        false,
        format!(
            "mIoU geodesic+view-prompt {gvp:.4} vs geodesic {geo:.4}: {:+.2} pts (need >= {:+.1}); D_p = {prompt_distance:.4} (need > 0)",
            100.0 * change,
            100.0 * MAX_PROMPT_DROP
        ),
    );
    [c6, c7]
}

fn hypothesis() -> Outcome {
    let dataset = generate_dataset(&SceneFamily::default(), &DatasetSpec::paired(500), 21).expect("paired dataset");
    let cfg = TrainConfig::default();
    let r = hypothesis_study(&dataset, &cfg, 20_000, 5).expect("hypothesis study");
    let pearson = r.pearson_r.unwrap_or(f64::NAN);
    line(
        8,
        "image/segmentation distance relation on 500 paired scenes",
        pearson >= MIN_PEARSON,
        false,
        format!(
            "pearson r {pearson:.4} (need >= {MIN_PEARSON}) over {} pairs; alpha_hat {:.4} vs configured alpha {}",
            r.samples,
            r.alpha_hat.unwrap_or(f64::NAN),
            cfg.adapt.alpha
        ),
    )
}

fn miou_correctness() -> Outcome {
    let hand = miou_from_stats(&[(50, 100), (25, 100)]).expect("hand example").miou;
    // Class 1 never occurs in truth or prediction, so it is left out of the mean.
    let conf = ConfusionMatrix::from_counts(3, vec![2, 0, 1, 0, 0, 0, 1, 0, 1]).expect("confusion");
    let r = miou(&conf).expect("miou");
    let excluded = r.per_class_iou[1].is_none() && (r.miou - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-15;
    line(
        9,
        "mIoU correctness",
        hand == 0.375 && excluded,
        true,
        format!("hand example {hand} (need exactly 0.375); zero-union class excluded: {excluded}"),
    )
}

fn run_train(bin: &str, config: &Path, data: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(bin)
        .args(["train", "--config"])
        .arg(config)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .status()
        .expect("spawn cli");
    assert!(status.success(), "train exited with {status}");
    std::fs::read(out.join("curves.csv")).expect("curves.csv")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let family = SceneFamily {
        resolution: (32, 32),
        ..Default::default()
    };
    let spec = DatasetSpec {
        n_source: 32,
        n_source_test: 8,
        n_target: 32,
        n_target_test: 8,
        paired: false,
    };
    let data = dir.path().join("data");
    write_dataset(&generate_dataset(&family, &spec, 8).expect("dataset"), &data).expect("write dataset");
    let config = dir.path().join("config.json");
    let cfg = r#"{"arm": "geodesic-view-prompt", "seed": 9, "train": {"epochs": 3, "warmup_epochs": 1, "image_side": 8, "seg_side": 4}}"#;
    std::fs::write(&config, cfg).expect("config");
    let bin = env!("CARGO_BIN_EXE_cvgfk");
    let a = run_train(bin, &config, &data, &dir.path().join("a"));
    let b = run_train(bin, &config, &data, &dir.path().join("b"));
    let first = |csv: &[u8]| String::from_utf8_lossy(csv).lines().nth(1).unwrap_or("").to_string();
    let models_equal =
        std::fs::read(dir.path().join("a/model.gfkm")).ok() == std::fs::read(dir.path().join("b/model.gfkm")).ok();
    line(
        10,
        "training determinism",
        a == b && first(&a) == first(&b) && models_equal,
        true,
        format!(
            "first epoch [{}] identical: {}; curves.csv byte-identical: {}; model.gfkm byte-identical: {models_equal}",
            first(&a),
            first(&a) == first(&b),
            a == b
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters are accepted but the suite always runs whole.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut outcomes = vec![
        kernel_oracle(),
        principal_angles(),
        metric_bounds(),
        upper_bound(),
        gradient_check(),
    ];
    outcomes.extend(adaptation_criteria());
    outcomes.push(hypothesis());
    outcomes.push(miou_correctness());
    outcomes.push(determinism());
    outcomes.sort_by_key(|o| o.id);

    let passed = outcomes.iter().filter(|o| o.pass).count();
    let hard: Vec<u32> = outcomes
        .iter()
        .filter(|o| o.enforced && !o.pass)
        .map(|o| o.id)
        .collect();
    println!("acceptance: {passed}/{} criteria met", outcomes.len());
    if !hard.is_empty() {
        eprintln!("acceptance: enforced criteria failed: {hard:?}");
        std::process::exit(1);
    }
}
