//! Seeded experiment suites: the component and merge ablations and the
//! ensemble working-capacity curve.

use akd_core::data::make_dataset;
use akd_core::train::{self, DistillContext, DistillMode, ExperimentConfig, RunMetrics};
use akd_core::uncertainty::MergeMode;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CliConfig, FORMAT_VERSION};
use crate::error::{LabError, LabResult};
use crate::io::TeacherFile;
use crate::stats::{self, SignTest};

/// Environment variable capping the ablation worker count.
pub const THREADS_ENV: &str = "AKD_THREADS";

/// Trains the configured teacher and fits its feature standardizer.
pub fn build_teacher(cfg: &CliConfig, seed: u64) -> LabResult<(TeacherFile, RunMetrics)> {
    let spec = cfg.dataset.spec();
    let (network, metrics) = train::train_teacher(&spec, cfg.network.teacher_width, &cfg.train.sgd(), seed)
        .map_err(LabError::run(format!("teacher training (seed {seed})")))?;
    let data = make_dataset(&spec).map_err(LabError::run("dataset"))?;
    let ctx = DistillContext::prepare(&network, &data).map_err(LabError::run("teacher features"))?;
    let teacher = TeacherFile {
        network,
        standardizer: ctx.standardizer().clone(),
        dataset: cfg.dataset.clone(),
    };
    Ok((teacher, metrics))
}

/// Worker count from `AKD_THREADS`, else the number of logical processors.
pub fn thread_count() -> LabResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(LabError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `components` or `merge`; the AKD run with the configured merge mode
    /// belongs to both.
    pub suite: &'static str,
    pub seed: u64,
    pub mode: &'static str,
    pub loss_kind: &'static str,
    pub merge_mode: &'static str,
    pub k: usize,
    pub m: f64,
    pub student_acc: f64,
    pub teacher_acc: f64,
    pub final_distill_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub suite: &'static str,
    pub mode: &'static str,
    pub merge_mode: &'static str,
    pub mean_acc: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignTests {
    pub akd_vs_baseline: SignTest,
    pub akd_vs_avatars_equal: SignTest,
    pub avatars_equal_vs_baseline: SignTest,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignTestP {
    pub akd_vs_baseline: f64,
    pub akd_vs_avatars_equal: f64,
    pub avatars_equal_vs_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub format_version: u32,
    pub seeds: Vec<u64>,
    pub teacher_acc: f64,
    pub rows: Vec<SummaryRow>,
    pub sign_test_p: SignTestP,
    pub sign_tests: SignTests,
    /// Merge mode with the highest mean; reported, not asserted.
    pub best_merge_mode: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub summary: AblationSummary,
}

/// One distinct run of the suite. `suites` lists the tables it feeds.
struct Job {
    seed: u64,
    cfg: ExperimentConfig,
    suites: &'static [&'static str],
}

fn jobs(cfg: &CliConfig, seeds: &[u64]) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in seeds {
        let base = cfg.experiment(seed);
        for mode in DistillMode::ALL {
            let suites: &'static [&'static str] = if mode == DistillMode::Akd {
                &["components", "merge"]
            } else {
                &["components"]
            };
            out.push(Job {
                seed,
                cfg: ExperimentConfig { mode, ..base.clone() },
                suites,
            });
        }
        for merge in MergeMode::ALL.into_iter().filter(|&m| m != base.merge_mode) {
            out.push(Job {
                seed,
                cfg: ExperimentConfig {
                    mode: DistillMode::Akd,
                    merge_mode: merge,
                    ..base.clone()
                },
                suites: &["merge"],
            });
        }
    }
    out
}

fn describe(cfg: &ExperimentConfig) -> String {
    format!(
        "mode={} loss={} merge={} k={} m={} seed={}",
        cfg.mode, cfg.loss_kind, cfg.merge_mode, cfg.avatars.count, cfg.avatars.dropout_ratio, cfg.seed
    )
}

/// Runs every configuration of both ablations for each seed on `threads`
/// workers. Rows come out in job order whatever the worker count.
pub fn ablation(cfg: &CliConfig, teacher: &TeacherFile, seeds: &[u64], threads: usize) -> LabResult<AblationResult> {
    if seeds.is_empty() {
        return Err(LabError::Usage("ablation needs at least one seed".into()));
    }
    let data = make_dataset(&teacher.dataset.spec()).map_err(LabError::run("dataset"))?;
    let ctx = DistillContext::prepare(&teacher.network, &data).map_err(LabError::run("teacher features"))?;
    let jobs = jobs(cfg, seeds);
    for j in &jobs {
        j.cfg.validate().map_err(LabError::run(describe(&j.cfg)))?;
    }
    let run = |j: &Job| -> LabResult<RunMetrics> {
        train::distill_student(&ctx, &data, &j.cfg).map_err(LabError::run(describe(&j.cfg)))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| LabError::Usage(format!("thread pool: {e}")))?;
    let metrics: Vec<RunMetrics> = pool.install(|| jobs.par_iter().map(run).collect::<LabResult<_>>())?;

    let mut rows = Vec::new();
    for suite in ["components", "merge"] {
        for (j, m) in jobs.iter().zip(&metrics).filter(|(j, _)| j.suites.contains(&suite)) {
            rows.push(row(suite, j, m));
        }
    }
    let summary = summarize(&rows, seeds, ctx.teacher_acc());
    Ok(AblationResult { rows, summary })
}

fn row(suite: &'static str, j: &Job, m: &RunMetrics) -> AblationRow {
    let akd = j.cfg.mode == DistillMode::Akd;
    let baseline = j.cfg.mode == DistillMode::BaselineTeacherDistill;
    AblationRow {
        suite,
        seed: j.seed,
        mode: j.cfg.mode.as_str(),
        loss_kind: j.cfg.loss_kind.as_str(),
        // σ ≡ 1 outside AKD; no merge applies
        merge_mode: if akd { j.cfg.merge_mode.as_str() } else { "none" },
        k: if baseline { 1 } else { j.cfg.avatars.count },
        m: if baseline { 0.0 } else { j.cfg.avatars.dropout_ratio },
        student_acc: m.student_acc.unwrap_or(f64::NAN),
        teacher_acc: m.teacher_acc,
        final_distill_loss: m.final_distill_loss.unwrap_or(f64::NAN),
    }
}

fn accs<'a>(rows: &'a [AblationRow], suite: &'a str, mode: &'a str, merge: &'a str) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.suite == suite && r.mode == mode && r.merge_mode == merge)
        .map(|r| r.student_acc)
        .collect()
}

fn summarize(rows: &[AblationRow], seeds: &[u64], teacher_acc: f64) -> AblationSummary {
    let mut groups: Vec<(&'static str, &'static str, &'static str)> = Vec::new();
    for r in rows {
        let key = (r.suite, r.mode, r.merge_mode);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let table = groups
        .iter()
        .map(|&(suite, mode, merge_mode)| {
            let xs = accs(rows, suite, mode, merge_mode);
            let (lo, hi) = stats::ci95(&xs);
            SummaryRow {
                suite,
                mode,
                merge_mode,
                mean_acc: stats::mean(&xs),
                std: stats::std_dev(&xs),
                n_seeds: xs.len(),
                ci95_low: lo,
                ci95_high: hi,
            }
        })
        .collect::<Vec<_>>();
    let of = |mode: DistillMode| {
        rows.iter()
            .filter(|r| r.suite == "components" && r.mode == mode.as_str())
            .map(|r| r.student_acc)
            .collect::<Vec<_>>()
    };
    let (b, a, k) = (
        of(DistillMode::BaselineTeacherDistill),
        of(DistillMode::AvatarsEqual),
        of(DistillMode::Akd),
    );
    let tests = SignTests {
        akd_vs_baseline: stats::sign_test(&k, &b),
        akd_vs_avatars_equal: stats::sign_test(&k, &a),
        avatars_equal_vs_baseline: stats::sign_test(&a, &b),
    };
    let best_merge_mode = table
        .iter()
        .filter(|r| r.suite == "merge")
        .fold(None::<&SummaryRow>, |best, r| match best {
            Some(b) if b.mean_acc >= r.mean_acc => Some(b),
            _ => Some(r),
        })
        .map_or("none", |r| r.merge_mode);
    AblationSummary {
        format_version: FORMAT_VERSION,
        seeds: seeds.to_vec(),
        teacher_acc,
        rows: table,
        sign_test_p: SignTestP {
            akd_vs_baseline: tests.akd_vs_baseline.p_value,
            akd_vs_avatars_equal: tests.akd_vs_avatars_equal.p_value,
            avatars_equal_vs_baseline: tests.avatars_equal_vs_baseline.p_value,
        },
        sign_tests: tests,
        best_merge_mode,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleRow {
    pub seed: u64,
    pub k: usize,
    pub m: f64,
    pub single_acc: f64,
    pub ensemble_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub k: usize,
    pub mean_single: f64,
    pub mean_ensemble: f64,
    pub std: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub n_seeds: usize,
}

/// Single versus ensemble accuracy of the teacher head on the test split
/// for each `k` and seed. Seeds key the avatar masks only; the single
/// accuracy does not depend on them.
pub fn ensemble_curve(teacher: &TeacherFile, ks: &[usize], m: f64, seeds: &[u64]) -> LabResult<(Vec<EnsembleRow>, Vec<CurveRow>)> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(LabError::Usage("ensemble evaluation needs at least one k and one seed".into()));
    }
    let data = make_dataset(&teacher.dataset.spec()).map_err(LabError::run("dataset"))?;
    let z = train::standardized_features(&teacher.network, &teacher.standardizer, &data.test)
        .map_err(LabError::run("teacher features"))?;
    let mut rows = Vec::with_capacity(ks.len() * seeds.len());
    let mut curve = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut single = Vec::with_capacity(seeds.len());
        let mut ens = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let r = train::ensemble_eval_on(&teacher.network, &teacher.standardizer, &z, &data.test.y, k, m, seed)
                .map_err(LabError::run(format!("ensemble k={k} m={m} seed={seed}")))?;
            rows.push(EnsembleRow {
                seed,
                k,
                m,
                single_acc: r.single_acc,
                ensemble_acc: r.ensemble_acc,
            });
            single.push(r.single_acc);
            ens.push(r.ensemble_acc);
        }
        let (lo, hi) = stats::ci95(&ens);
        curve.push(CurveRow {
            k,
            mean_single: stats::mean(&single),
            mean_ensemble: stats::mean(&ens),
            std: stats::std_dev(&ens),
            ci95_low: lo,
            ci95_high: hi,
            n_seeds: seeds.len(),
        });
    }
    Ok((rows, curve))
}
