use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use cvgfk::checks;
use cvgfk::error::Error;
use cvgfk::experiment::{arm_table, hypothesis_study, run_arm, ExperimentConfig, RunRecord};
use cvgfk::gfk::{CrossViewMetric, DenseMetric, GeodesicFlowKernel, KernelDiagnostics};
use cvgfk::io::{read_gfkm, sidecar_path, write_atomic, write_gfkm, write_json, write_sidecar, Provenance};
use cvgfk::prompt::{build_prompt, embed_prompt, Domain, PromptSpec};
use cvgfk::scene::{generate_dataset, load_dataset, write_dataset, DatasetSpec, SceneFamily, CLASS_NAMES};
use cvgfk::segmodel::{evaluate, SegModel};
use cvgfk::subspace::Subspace;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cvgfk",
    version,
    about = "Geodesic flow kernels and cross-view adaptation on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset generation.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// PCA subspaces.
    #[command(subcommand)]
    Subspace(SubspaceCmd),
    /// Geodesic flow kernels and distances.
    #[command(subcommand)]
    Gfk(GfkCmd),
    /// Prompt embeddings.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Train one arm on a dataset directory.
    Train(TrainArgs),
    /// Per-class IoU of a trained model on one split.
    Eval(EvalArgs),
    /// Numerical property checks.
    #[command(subcommand)]
    Check(CheckCmd),
    /// Aggregate run directories into one arm comparison table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum SceneCmd {
    Gen(SceneGenArgs),
}

#[derive(Args)]
struct SceneGenArgs {
    /// JSON scene configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "unpaired")]
    paired: bool,
    #[arg(long)]
    unpaired: bool,
    /// Scenes per split for a paired dataset.
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Contents of a `scene gen --config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SceneConfig {
    family: SceneFamily,
    dataset: DatasetSpec,
}

#[derive(Subcommand)]
enum SubspaceCmd {
    Fit(SubspaceFitArgs),
}

#[derive(Args)]
struct SubspaceFitArgs {
    /// GFKM matrix with one sample per row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dim: usize,
    /// Skip mean subtraction.
    #[arg(long)]
    no_center: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubspaceMeta {
    ambient_dim: usize,
    dim: usize,
    mean: Vec<f64>,
}

#[derive(Subcommand)]
enum GfkCmd {
    Build(GfkBuildArgs),
    Dist(GfkDistArgs),
}

#[derive(Args)]
struct GfkBuildArgs {
    /// Source basis written by `subspace fit`.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = cvgfk::gfk::SMALL_ANGLE_EPS)]
    small_angle_eps: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GfkDistArgs {
    #[arg(long)]
    kernel: PathBuf,
    /// Source vectors, one per row.
    #[arg(long)]
    a: PathBuf,
    /// Target vectors, one per row; row i is compared with row i of `--a`.
    #[arg(long)]
    b: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PromptCmd {
    Embed(PromptEmbedArgs),
}

#[derive(Args)]
struct PromptEmbedArgs {
    /// Comma-separated class names in canonical order.
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<String>,
    #[arg(long)]
    domain: Domain,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Leave out the view condition.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "target_test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Sidecar of `model.gfkm`: everything needed to run the model again.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    width: usize,
    height: usize,
    classes: usize,
    patch_radius: usize,
    prompt_features: usize,
    source_condition: Vec<f64>,
    target_condition: Vec<f64>,
}

#[derive(Subcommand)]
enum CheckCmd {
    /// Kernel metric stays inside [0, 2] and vanishes on identical inputs.
    Bounds {
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Triangle-inequality probe of the kernel distance.
    Triangle {
        #[arg(long, default_value_t = 10_000)]
        triples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Image/segmentation distance relation on a paired dataset.
    Hypothesis {
        #[arg(long)]
        data: PathBuf,
        /// Featurizer and centering settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        max_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scatter CSV of the sampled pairs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptation-loss gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form kernel against quadrature of the geodesic flow.
    KernelOracle {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        dmax: usize,
        #[arg(long, default_value_t = 16)]
        nmax: usize,
        #[arg(long, default_value_t = 2001)]
        points: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_numerical() {
            (EXIT_NUMERICAL, "numerical")
        } else {
            (EXIT_DATA, "data")
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn data_error(message: String) -> Failure {
    Failure {
        code: EXIT_DATA,
        kind: "data",
        message,
    }
}

fn check_failed(message: String) -> Failure {
    Failure {
        code: EXIT_NUMERICAL,
        kind: "numerical",
        message,
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let threads = std::env::var("GFK_THREADS").ok().and_then(|v| v.trim().parse().ok());
    cvgfk::par::init_threads(threads);

    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // Recorded without the binary's location so reruns from elsewhere match.
    let provenance_command = std::iter::once("cvgfk")
        .chain(argv.iter().skip(1).map(String::as_str))
        .collect::<Vec<_>>()
        .join(" ");
    match run(cli.command, &provenance_command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}

fn provenance(command: &str, seed: u64) -> Provenance {
    Provenance {
        command: command.to_string(),
        seed,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let text =
        std::fs::read_to_string(path).map_err(|_| data_error(format!("{what} not found: {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_error(format!("{what} {} is invalid: {e}", path.display())))
}

/// Reads the `body` fields of a sidecar written by [`write_sidecar`].
fn read_sidecar<T: for<'de> Deserialize<'de>>(artifact: &Path) -> CliResult<T> {
    read_json(&sidecar_path(artifact), "sidecar")
}

fn rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

fn run(command: Command, cmd: &str) -> CliResult {
    match command {
        Command::Scene(SceneCmd::Gen(a)) => scene_gen(a, cmd),
        Command::Subspace(SubspaceCmd::Fit(a)) => subspace_fit(a, cmd),
        Command::Gfk(GfkCmd::Build(a)) => gfk_build(a, cmd),
        Command::Gfk(GfkCmd::Dist(a)) => gfk_dist(a),
        Command::Prompt(PromptCmd::Embed(a)) => prompt_embed(a, cmd),
        Command::Train(a) => train(a, cmd),
        Command::Eval(a) => eval(a, cmd),
        Command::Check(c) => check(c, cmd),
        Command::Report(a) => report(a, cmd),
    }
}

fn scene_gen(a: SceneGenArgs, cmd: &str) -> CliResult {
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => SceneConfig::default(),
    };
    if a.paired {
        cfg.dataset = DatasetSpec::paired(a.scenes);
    } else if a.unpaired {
        cfg.dataset.paired = false;
    }
    let dataset = generate_dataset(&cfg.family, &cfg.dataset, a.seed)?;
    write_dataset(&dataset, &a.out)?;
    write_sidecar(&a.out.join("manifest.json"), &provenance(cmd, a.seed), &cfg)?;
    for s in &dataset.splits {
        println!("{}: {} views", s.meta.name, s.views.len());
    }
    Ok(())
}

fn subspace_fit(a: SubspaceFitArgs, cmd: &str) -> CliResult {
    let samples = read_gfkm(&a.input)?;
    let s = Subspace::fit(&samples, a.dim, !a.no_center)?;
    write_gfkm(&a.out, s.basis())?;
    let meta = SubspaceMeta {
        ambient_dim: s.ambient_dim(),
        dim: s.dim(),
        mean: s.mean().iter().copied().collect(),
    };
    write_sidecar(&a.out, &provenance(cmd, 0), &meta)?;
    Ok(())
}

fn load_subspace(path: &Path) -> CliResult<Subspace> {
    let basis = read_gfkm(path)?;
    let meta: SubspaceMeta = read_sidecar(path)?;
    Ok(Subspace::from_basis(basis, DVector::from_vec(meta.mean))?)
}

fn gfk_build(a: GfkBuildArgs, cmd: &str) -> CliResult {
    let (s, t) = (load_subspace(&a.source)?, load_subspace(&a.target)?);
    let k = GeodesicFlowKernel::build_with(&s, &t, a.small_angle_eps)?;
    write_gfkm(&a.out, k.q())?;
    write_sidecar(&a.out, &provenance(cmd, 0), &k.diagnostics())?;
    let omegas = k.omegas();
    println!(
        "Q {}x{}, principal angles in [{:.6}, {:.6}]",
        k.q().nrows(),
        k.q().ncols(),
        omegas.min(),
        omegas.max()
    );
    Ok(())
}

fn gfk_dist(a: GfkDistArgs) -> CliResult {
    let q = read_gfkm(&a.kernel)?;
    let diag: KernelDiagnostics = read_sidecar(&a.kernel)?;
    let metric = DenseMetric::new(
        q,
        DVector::from_vec(diag.source_mean),
        DVector::from_vec(diag.target_mean),
    )?;
    let (xa, xb) = (rows(&read_gfkm(&a.a)?), rows(&read_gfkm(&a.b)?));
    if xa.len() != xb.len() {
        return Err(data_error(format!(
            "--a has {} rows but --b has {}",
            xa.len(),
            xb.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "distance"]).map_err(Error::from)?;
    for (i, (u, v)) in xa.iter().zip(&xb).enumerate() {
        let d = metric.cross_distance(u, v)?;
        w.write_record([i.to_string(), d.to_string()]).map_err(Error::from)?;
    }
    emit_csv(w, a.out.as_deref())
}

fn emit_csv(w: csv::Writer<Vec<u8>>, out: Option<&Path>) -> CliResult {
    let bytes = w.into_inner().map_err(|e| data_error(e.to_string()))?;
    match out {
        Some(p) => write_atomic(p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn prompt_embed(a: PromptEmbedArgs, cmd: &str) -> CliResult {
    let spec = if a.plain {
        PromptSpec::plain(&a.classes, a.domain)
    } else {
        PromptSpec::view(&a.classes, a.domain)
    };
    let text = build_prompt(&spec)?;
    let v = embed_prompt(&text, a.dim)?;
    write_gfkm(&a.out, &DMatrix::from_row_slice(1, v.len(), v.as_slice()))?;
    write_sidecar(
        &a.out,
        &provenance(cmd, 0),
        &serde_json::json!({ "text": text, "dim": a.dim }),
    )?;
    println!("{text}");
    Ok(())
}

fn train(a: TrainArgs, cmd: &str) -> CliResult {
    let mut cfg: ExperimentConfig = read_json(&a.config, "config")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dataset = load_dataset(&a.data)?;
    let (model, report) = run_arm(&dataset, cfg.arm, &cfg.train, cfg.seed)?;
    let prov = provenance(cmd, cfg.seed);

    let model_path = a.out.join("model.gfkm");
    write_gfkm(
        &model_path,
        &DMatrix::from_row_slice(1, model.theta.len(), &model.theta),
    )?;
    let meta = ModelMeta {
        width: model.width,
        height: model.height,
        classes: model.classes,
        patch_radius: model.patch_radius,
        prompt_features: model.prompt_features,
        source_condition: report.source_condition.clone(),
        target_condition: report.target_condition.clone(),
    };
    write_sidecar(&model_path, &prov, &meta)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &report.epochs {
        w.serialize(e).map_err(Error::from)?;
    }
    let curves = a.out.join("curves.csv");
    emit_csv(w, Some(&curves))?;
    write_sidecar(&curves, &prov, &serde_json::json!({ "arm": cfg.arm }))?;

    if let Some(t) = &report.target_test {
        println!("{} seed {}: target mIoU {:.4}", cfg.arm, cfg.seed, t.miou);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let record = RunRecord {
        arm: cfg.arm,
        seed: cfg.seed,
        report,
    };
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({ "provenance": prov, "run": record }),
    )?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(SegModel, ModelMeta)> {
    let theta = read_gfkm(path)?;
    let meta: ModelMeta = read_sidecar(path)?;
    let mut model = SegModel::zeros(
        meta.width,
        meta.height,
        meta.classes,
        meta.patch_radius,
        meta.prompt_features,
    );
    if theta.len() != model.param_len() {
        return Err(data_error(format!(
            "model has {} parameters, its sidecar implies {}",
            theta.len(),
            model.param_len()
        )));
    }
    model.theta = theta.iter().copied().collect();
    Ok((model, meta))
}

fn eval(a: EvalArgs, cmd: &str) -> CliResult {
    let (model, meta) = load_model(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let split = dataset.split(&a.split)?;
    if !split.meta.labeled {
        return Err(data_error(format!("split {} has no labels", a.split)));
    }
    let cond = match split.meta.domain {
        Domain::Car => &meta.source_condition,
        Domain::Drone => &meta.target_condition,
    };
    let scores = cvgfk::eval::miou(&evaluate(&model, &split.views, cond)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "iou"]).map_err(Error::from)?;
    for (c, iou) in scores.per_class_iou.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
        w.write_record([name.to_string(), iou.map(|v| v.to_string()).unwrap_or_default()])
            .map_err(Error::from)?;
    }
    w.write_record(["miou".to_string(), scores.miou.to_string()])
        .map_err(Error::from)?;
    if let Some(out) = &a.out {
        let seed = read_sidecar::<serde_json::Value>(&a.model)?["provenance"]["seed"]
            .as_u64()
            .unwrap_or(0);
        emit_csv(w, Some(out))?;
        write_sidecar(out, &provenance(cmd, seed), &serde_json::json!({ "split": a.split }))?;
        println!("mIoU {:.4}", scores.miou);
        Ok(())
    } else {
        emit_csv(w, None)
    }
}

fn check(c: CheckCmd, cmd: &str) -> CliResult {
    match c {
        CheckCmd::KernelOracle {
            trials,
            dmax,
            nmax,
            points,
            tol,
            seed,
        } => {
            let r = checks::kernel_oracle(trials, dmax, nmax, points, seed)?;
            println!(
                "max |dQ| = {:.3e} over {} trials ({} points)",
                r.max_abs_diff, r.trials, r.quadrature_points
            );
            if r.max_abs_diff > tol {
                return Err(check_failed(format!("max |dQ| {:.3e} exceeds {tol:e}", r.max_abs_diff)));
            }
        }
        CheckCmd::Bounds { pairs, seed } => {
            let r = checks::metric_bounds(pairs, seed)?;
            println!(
                "distances in [{:.3e}, {:.15}] over {} kernels x {} pairs; max D(x,x) = {:.3e}",
                r.min_distance, r.max_distance, r.kernels, r.pairs_per_kernel, r.max_self_distance
            );
            let u = checks::upper_bound(pairs, 1.5, seed)?;
            println!(
                "upper bound (constant {}): max violation {:.6} over {}",
                u.constant, u.max_violation, u.n_checked
            );
            if r.min_distance < -1e-12
                || r.max_distance > 2.0 + 1e-12
                || r.max_self_distance > 1e-9
                || u.max_violation > 1e-9
            {
                return Err(check_failed("distance bounds violated".into()));
            }
        }
        CheckCmd::Triangle { triples, seed } => {
            let r = checks::triangle(triples, seed)?;
            println!(
                "triangle violations {:.4} of {} triples, worst margin {:.3e}",
                r.violation_rate, r.n_triples, r.worst_margin
            );
        }
        CheckCmd::Gradcheck {
            batches,
            step,
            tol,
            seed,
        } => {
            let r = checks::gradcheck(batches, step, seed)?;
            println!(
                "max relative gradient error {:.3e} over {} batches",
                r.max_relative_error, r.batches
            );
            if r.max_relative_error > tol {
                return Err(check_failed(format!("gradient error exceeds {tol:e}")));
            }
        }
        CheckCmd::Hypothesis {
            data,
            config,
            max_pairs,
            seed,
            out,
        } => {
            let cfg: ExperimentConfig = match &config {
                Some(p) => read_json(p, "config")?,
                None => ExperimentConfig::default(),
            };
            let dataset = load_dataset(&data)?;
            let r = hypothesis_study(&dataset, &cfg.train, max_pairs, seed)?;
            let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
            println!(
                "pairs {}: pearson r {}, alpha_hat {} (configured alpha {}), ols slope {} intercept {}",
                r.samples,
                show(r.pearson_r),
                show(r.alpha_hat),
                cfg.train.adapt.alpha,
                show(r.ols_slope),
                show(r.ols_intercept)
            );
            if let Some(out) = out {
                let mut w = csv::Writer::from_writer(Vec::new());
                for row in &r.rows {
                    w.serialize(row).map_err(Error::from)?;
                }
                emit_csv(w, Some(&out))?;
                let summary = serde_json::json!({
                    "pearson_r": r.pearson_r,
                    "alpha_hat": r.alpha_hat,
                    "ols_slope": r.ols_slope,
                    "ols_intercept": r.ols_intercept,
                    "samples": r.samples,
                    "degenerate": r.degenerate,
                    "alpha": cfg.train.adapt.alpha,
                });
                write_sidecar(&out, &provenance(cmd, seed), &summary)?;
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReportFile {
    run: RunRecord,
}

fn report(a: ReportArgs, cmd: &str) -> CliResult {
    let records = a
        .runs
        .iter()
        .map(|dir| read_json::<ReportFile>(&dir.join("report.json"), "run report").map(|f| f.run))
        .collect::<CliResult<Vec<_>>>()?;
    let table = arm_table(&records)?;
    let classes = table.iter().map(|r| r.per_class_iou.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["arm".to_string(), "runs".to_string()];
    header.extend((0..classes).map(|c| CLASS_NAMES.get(c).copied().unwrap_or("?").to_string()));
    header.push("miou".into());
    w.write_record(&header).map_err(Error::from)?;
    for row in &table {
        let mut rec = vec![row.arm.to_string(), row.runs.to_string()];
        rec.extend((0..classes).map(|c| {
            row.per_class_iou
                .get(c)
                .copied()
                .flatten()
                .map(|v| v.to_string())
                .unwrap_or_default()
        }));
        rec.push(row.miou.to_string());
        w.write_record(&rec).map_err(Error::from)?;
    }
    if let Some(out) = &a.out {
        let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        emit_csv(w, Some(out))?;
        let prov = provenance(cmd, seeds.first().copied().unwrap_or(0));
        write_sidecar(out, &prov, &serde_json::json!({ "run_seeds": seeds }))?;
        Ok(())
    } else {
        emit_csv(w, None)
    }
}
