//! The `akd` command line. [`run`] parses arguments and executes one
//! command; the binary only maps the result to an exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use akd_core::data::make_dataset;
use akd_core::distill::LossKind;
use akd_core::train::{self, DistillContext, DistillMode, SigmaSource};
use akd_core::uncertainty::MergeMode;
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::config::{CliConfig, FORMAT_VERSION};
use crate::error::{LabError, LabResult};
use crate::io::{self, MetricsFile, RatioRow, SigmaFile, StepRow, TimingFile, TraceRow};
use crate::{suite, verify};

#[derive(Debug, Parser)]
#[command(name = "akd", version, about = "Avatar knowledge distillation workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a teacher and write its weight file.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight file; metrics and the resolved config go next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill one student from a trained teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// baseline, avatars or akd.
        #[arg(long)]
        mode: Option<String>,
        /// mse or kl.
        #[arg(long)]
        loss: Option<String>,
        /// scalar, full, channel or spatial.
        #[arg(long)]
        merge: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the component and merge ablations over seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant battery; exits 1 if any check fails.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
    /// Single versus ensemble accuracy of a teacher over avatar counts.
    EnsembleEval {
        #[arg(long)]
        teacher: PathBuf,
        /// Avatar counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize the outputs found in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print and succeed; malformed arguments are usage
/// errors.
pub fn run<I, T>(args: I) -> LabResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(LabError::Usage(e.to_string().trim_end().to_string())),
    };
    execute(cli.command)
}

pub fn execute(command: Command) -> LabResult<()> {
    match command {
        Command::TrainTeacher { config, out, seed } => train_teacher(config.as_deref(), &out, seed),
        Command::Distill {
            teacher,
            mode,
            loss,
            merge,
            k,
            m,
            seed,
            out,
            config,
        } => distill(DistillArgs {
            teacher,
            mode,
            loss,
            merge,
            k,
            m,
            seed,
            out,
            config,
        }),
        Command::Ablate { config, seeds, out } => ablate(config.as_deref(), seeds, &out),
        Command::Verify { out } => run_verify(&out),
        Command::EnsembleEval {
            teacher,
            k,
            m,
            seeds,
            out,
            config,
        } => ensemble_eval(&teacher, k, m, seeds, &out, config.as_deref()),
        Command::Report { dir } => report(&dir),
    }
}

fn parse<T>(flag: &str, v: &str) -> LabResult<T>
where
    T: std::str::FromStr<Err = akd_core::Error>,
{
    v.parse().map_err(|e| LabError::Usage(format!("--{flag}: {e}")))
}

fn timing(path: &Path, command: &str, start: Instant, threads: usize) -> LabResult<()> {
    io::write_json(
        path,
        &TimingFile {
            format_version: FORMAT_VERSION,
            command: command.into(),
            wall_seconds: start.elapsed().as_secs_f64(),
            threads,
        },
    )
}

fn write_config(path: &Path, cfg: &CliConfig) -> LabResult<()> {
    fs::write(path, cfg.to_json()).map_err(LabError::io(path))
}

/// `dir/<stem>.<suffix>` next to the weight file `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "teacher".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn train_teacher(config: Option<&Path>, out: &Path, seed: Option<u64>) -> LabResult<()> {
    let start = Instant::now();
    let mut cfg = CliConfig::load_or_default(config)?;
    if let Some(s) = seed {
        cfg.train.teacher_seed = s;
    }
    cfg.validate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io::create_dir(dir)?;
    }
    let (teacher, metrics) = suite::build_teacher(&cfg, cfg.train.teacher_seed)?;
    io::save_teacher(out, &teacher)?;
    io::write_json(&sibling(out, "metrics.json"), &MetricsFile::new(&metrics, None))?;
    let trace: Vec<TraceRow> = metrics.epochs.iter().map(TraceRow::from).collect();
    io::write_csv(&sibling(out, "trace.csv"), &trace)?;
    write_config(&sibling(out, "config.json"), &cfg)?;
    timing(&sibling(out, "timing.json"), "train-teacher", start, 1)?;
    println!("teacher accuracy {:.4} -> {}", metrics.teacher_acc, out.display());
    Ok(())
}

struct DistillArgs {
    teacher: PathBuf,
    mode: Option<String>,
    loss: Option<String>,
    merge: Option<String>,
    k: Option<usize>,
    m: Option<f64>,
    seed: Option<u64>,
    out: PathBuf,
    config: Option<PathBuf>,
}

fn distill(a: DistillArgs) -> LabResult<()> {
    let start = Instant::now();
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    let d = &mut cfg.distill;
    if let Some(v) = &a.mode {
        d.mode = parse::<DistillMode>("mode", v)?;
    }
    if let Some(v) = &a.loss {
        d.loss = parse::<LossKind>("loss", v)?;
    }
    if let Some(v) = &a.merge {
        d.merge = parse::<MergeMode>("merge", v)?;
    }
    match d.mode {
        DistillMode::BaselineTeacherDistill if a.k.is_some() || a.m.is_some() || a.merge.is_some() => {
            return Err(LabError::Usage(
                "--mode baseline mimics the teacher directly; --k, --m and --merge do not apply".into(),
            ));
        }
        DistillMode::AvatarsEqual if a.merge.is_some() => {
            return Err(LabError::Usage("--merge applies only to --mode akd".into()));
        }
        _ => {}
    }
    if let Some(k) = a.k {
        d.k = k;
    }
    if let Some(m) = a.m {
        d.m = m;
    }
    if let Some(s) = a.seed {
        d.seed = s;
    }
    let teacher = io::load_teacher(&a.teacher)?;
    // the student trains on the teacher's data
    cfg.dataset = teacher.dataset.clone();
    cfg.validate()?;
    io::create_dir(&a.out)?;

    let exp = cfg.experiment(cfg.distill.seed);
    let data = make_dataset(&cfg.dataset.spec()).map_err(LabError::run("dataset"))?;
    let ctx = DistillContext::prepare(&teacher.network, &data).map_err(LabError::run("teacher features"))?;
    let metrics = train::distill_student(&ctx, &data, &exp).map_err(LabError::run(format!(
        "distill mode={} loss={} merge={} seed={}",
        exp.mode, exp.loss_kind, exp.merge_mode, exp.seed
    )))?;

    let akd = exp.mode == DistillMode::Akd;
    let sigma_shape = akd.then(|| exp.merge_mode.sigma_dims(ctx.feature_dims()).to_vec());
    write_config(&a.out.join("config.json"), &cfg)?;
    io::write_json(&a.out.join("metrics.json"), &MetricsFile::new(&metrics, sigma_shape))?;
    let trace: Vec<TraceRow> = metrics.epochs.iter().map(TraceRow::from).collect();
    io::write_csv(&a.out.join("trace.csv"), &trace)?;
    let steps: Vec<StepRow> = metrics
        .step_distill_losses
        .iter()
        .enumerate()
        .map(|(step, &distill_loss)| StepRow { step, distill_loss })
        .collect();
    io::write_csv(&a.out.join("steps.csv"), &steps)?;
    if akd && exp.sigma_source == SigmaSource::Precomputed {
        let sigma = ctx.sigma(exp.merge_mode).map_err(LabError::run("sigma"))?;
        io::write_json(&a.out.join("sigma.json"), &SigmaFile::from(&sigma))?;
    }
    timing(&a.out.join("timing.json"), "distill", start, 1)?;
    println!(
        "{} student accuracy {:.4} (teacher {:.4})",
        exp.mode,
        metrics.student_acc.unwrap_or(f64::NAN),
        metrics.teacher_acc
    );
    Ok(())
}

fn ablate(config: Option<&Path>, seeds: Option<usize>, out: &Path) -> LabResult<()> {
    let start = Instant::now();
    let mut cfg = CliConfig::load_or_default(config)?;
    if let Some(n) = seeds {
        cfg.ablation.seeds = n;
    }
    cfg.validate()?;
    let threads = suite::thread_count()?;
    if cfg.ablation.seeds < 10 {
        eprintln!("note: {} seeds; the sign tests need at least 10", cfg.ablation.seeds);
    }
    io::create_dir(out)?;
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64).map(|i| cfg.ablation.first_seed + i).collect();
    let (teacher, _) = suite::build_teacher(&cfg, cfg.train.teacher_seed)?;
    let result = suite::ablation(&cfg, &teacher, &seeds, threads)?;
    write_config(&out.join("config.json"), &cfg)?;
    io::write_csv(&out.join("results.csv"), &result.rows)?;
    io::write_json(&out.join("summary.json"), &result.summary)?;
    timing(&out.join("timing.json"), "ablate", start, threads)?;
    for r in &result.summary.rows {
        println!(
            "{:<10} {:<24} {:<8} {:.4} ± {:.4} (n = {})",
            r.suite, r.mode, r.merge_mode, r.mean_acc, r.std, r.n_seeds
        );
    }
    let p = &result.summary.sign_test_p;
    println!(
        "sign test p: akd>baseline {:.4}, akd>avatars {:.4}, avatars>baseline {:.4}",
        p.akd_vs_baseline, p.akd_vs_avatars_equal, p.avatars_equal_vs_baseline
    );
    Ok(())
}

/// Seed of the verification streams; fixed so reruns are byte-identical.
pub const VERIFY_SEED: u64 = 0;

fn run_verify(out: &Path) -> LabResult<()> {
    let start = Instant::now();
    io::create_dir(out)?;
    let report = verify::run(VERIFY_SEED);
    io::write_json(&out.join("verify.json"), &report)?;
    if let Some(g) = &report.grad_report {
        io::write_json(&out.join("grad_report.json"), &io::GradReportFile::from(g))?;
        let ratios: Vec<RatioRow> = g.ratio_samples.iter().map(RatioRow::from).collect();
        io::write_csv(&out.join("ratios.csv"), &ratios)?;
    }
    timing(&out.join("timing.json"), "verify", start, 1)?;
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<32} {:.3e} (tolerance {:.0e}) {}", c.name, c.value, c.tolerance, c.detail);
    }
    if report.passed {
        Ok(())
    } else {
        Err(LabError::Verification(report.failures().join(", ")))
    }
}

fn ensemble_eval(
    teacher: &Path,
    k: Option<Vec<usize>>,
    m: Option<f64>,
    seeds: Option<usize>,
    out: &Path,
    config: Option<&Path>,
) -> LabResult<()> {
    let start = Instant::now();
    let mut cfg = CliConfig::load_or_default(config)?;
    if let Some(k) = k {
        cfg.ensemble.k = k;
    }
    if let Some(m) = m {
        cfg.ensemble.m = m;
    }
    if let Some(n) = seeds {
        cfg.ensemble.seeds = n;
    }
    let teacher = io::load_teacher(teacher)?;
    cfg.dataset = teacher.dataset.clone();
    cfg.validate()?;
    if !(0.0..1.0).contains(&cfg.ensemble.m) {
        return Err(LabError::Usage(format!("--m must be in [0, 1), got {}", cfg.ensemble.m)));
    }
    io::create_dir(out)?;
    let seeds: Vec<u64> = (0..cfg.ensemble.seeds as u64).collect();
    let (rows, curve) = suite::ensemble_curve(&teacher, &cfg.ensemble.k, cfg.ensemble.m, &seeds)?;
    write_config(&out.join("config.json"), &cfg)?;
    io::write_csv(&out.join("curve.csv"), &curve)?;
    io::write_csv(&out.join("per_seed.csv"), &rows)?;
    timing(&out.join("timing.json"), "ensemble-eval", start, 1)?;
    for c in &curve {
        println!(
            "k = {:<3} single {:.4} ensemble {:.4} ± {:.4}",
            c.k, c.mean_single, c.mean_ensemble, c.std
        );
    }
    Ok(())
}

fn read_json(path: &Path) -> LabResult<Value> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn num(v: &Value, key: &str) -> String {
    match v.get(key) {
        Some(Value::Number(n)) => n.as_f64().map_or_else(|| n.to_string(), |x| format!("{x:.4}")),
        Some(other) => other.to_string(),
        None => "-".into(),
    }
}

/// Prints what it recognizes in `dir`: metrics, σ exports, ablation
/// summaries, ensemble curves and verification reports.
fn report(dir: &Path) -> LabResult<()> {
    if !dir.is_dir() {
        return Err(LabError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut found = false;
    let path = dir.join("metrics.json");
    if path.is_file() {
        found = true;
        let v = read_json(&path)?;
        println!(
            "metrics: seed {} teacher {} student {} final distill loss {}",
            num(&v, "seed"),
            num(&v, "teacher_acc"),
            num(&v, "student_acc"),
            num(&v, "final_distill_loss")
        );
    }
    let path = dir.join("sigma.json");
    if path.is_file() {
        found = true;
        let file: SigmaFile = serde_json::from_value(read_json(&path)?).map_err(|e| LabError::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let sigma = file.to_sigma().map_err(|detail| LabError::Format { path, detail })?;
        let vals = sigma.values().values();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "sigma: mode {} shape {:?} range [{lo:.4}, {hi:.4}] geometric mean {:.4}",
            sigma.mode(),
            sigma.values().dims(),
            sigma.geometric_mean()
        );
    }
    let path = dir.join("summary.json");
    if path.is_file() {
        found = true;
        let v = read_json(&path)?;
        for r in v.get("rows").and_then(Value::as_array).into_iter().flatten() {
            println!(
                "ablation: {} {} {} mean {} std {} n {}",
                r["suite"].as_str().unwrap_or("-"),
                r["mode"].as_str().unwrap_or("-"),
                r["merge_mode"].as_str().unwrap_or("-"),
                num(r, "mean_acc"),
                num(r, "std"),
                num(r, "n_seeds")
            );
        }
        if let Some(p) = v.get("sign_test_p") {
            println!(
                "sign test p: akd>baseline {} akd>avatars {} avatars>baseline {}",
                num(p, "akd_vs_baseline"),
                num(p, "akd_vs_avatars_equal"),
                num(p, "avatars_equal_vs_baseline")
            );
        }
    }
    let path = dir.join("curve.csv");
    if path.is_file() {
        found = true;
        let text = fs::read_to_string(&path).map_err(LabError::io(&path))?;
        for line in text.lines() {
            println!("curve: {line}");
        }
    }
    let path = dir.join("verify.json");
    if path.is_file() {
        found = true;
        let v = read_json(&path)?;
        for c in v.get("checks").and_then(Value::as_array).into_iter().flatten() {
            let ok = c["passed"].as_bool().unwrap_or(false);
            println!(
                "verify: {} {}",
                if ok { "PASS" } else { "FAIL" },
                c["name"].as_str().unwrap_or("-")
            );
        }
    }
    if !found {
        return Err(LabError::Usage(format!("no recognized outputs in {}", dir.display())));
    }
    Ok(())
}
