//! On-disk formats: teacher weight files, σ exports, gradient reports and
//! the CSV tables. JSON documents carry `format_version`; CSV files start
//! with a header row.

use std::fs;
use std::path::Path;

use akd_core::distill::{GradReport, RatioSample};
use akd_core::nn::{BatchStandardize, Layer, Network};
use akd_core::train::{EpochTrace, RunMetrics};
use akd_core::uncertainty::SigmaTensor;
use akd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, FORMAT_VERSION};
use crate::error::{LabError, LabResult};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(LabError::io(path))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> LabResult<()> {
    let fail = |e: csv::Error| LabError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(LabError::io(path))
}

pub fn create_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(LabError::io(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// One layer of a weight file. `shape`/`values` hold the main weight;
/// parameterless layers leave them out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_var: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsEntry {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningStats {
    /// Standardization applied to the tapped teacher features before
    /// avatars are drawn.
    pub feature_standardizer: StatsEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub format_version: u32,
    pub layers: Vec<LayerEntry>,
    pub feature_tap_index: usize,
    pub running_stats: RunningStats,
    /// The data the teacher was trained on; distillation regenerates it.
    pub dataset: DatasetConfig,
}

/// A trained teacher with everything needed to distill from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFile {
    pub network: Network,
    pub standardizer: BatchStandardize,
    pub dataset: DatasetConfig,
}

fn param(p: &Tensor) -> ParamEntry {
    ParamEntry {
        shape: p.dims().to_vec(),
        values: p.values().to_vec(),
    }
}

fn layer_entry(layer: &Layer) -> LayerEntry {
    let mut e = LayerEntry {
        kind: layer.kind().to_string(),
        shape: Vec::new(),
        values: Vec::new(),
        bias: None,
        padding: None,
        keep: None,
        running_mean: None,
        running_var: None,
    };
    match layer {
        Layer::Linear { weight, bias } => {
            (e.shape, e.values) = (weight.dims().to_vec(), weight.values().to_vec());
            e.bias = Some(param(bias));
        }
        Layer::Conv2d { weight, bias, padding } => {
            (e.shape, e.values) = (weight.dims().to_vec(), weight.values().to_vec());
            e.bias = Some(param(bias));
            e.padding = Some(*padding);
        }
        Layer::BatchStandardize(bs) => {
            e.running_mean = Some(bs.running_mean().to_vec());
            e.running_var = Some(bs.running_var().to_vec());
        }
        Layer::Dropout { keep } => e.keep = Some(*keep),
        Layer::Relu | Layer::GlobalAvgPool => {}
    }
    e
}

impl WeightFile {
    pub fn from_teacher(t: &TeacherFile) -> WeightFile {
        WeightFile {
            format_version: FORMAT_VERSION,
            layers: t.network.layers().iter().map(layer_entry).collect(),
            feature_tap_index: t.network.feature_tap(),
            running_stats: RunningStats {
                feature_standardizer: StatsEntry {
                    mean: t.standardizer.running_mean().to_vec(),
                    var: t.standardizer.running_var().to_vec(),
                },
            },
            dataset: t.dataset.clone(),
        }
    }

    /// Rebuilds the teacher; errors name the offending layer or key.
    pub fn into_teacher(self) -> Result<TeacherFile, String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!(
                "format_version: expected {FORMAT_VERSION}, got {}",
                self.format_version
            ));
        }
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let kind = e.kind.clone();
                entry_layer(e).map_err(|d| format!("layers[{i}] ({kind}): {d}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut network = Network::from_layers(layers, self.feature_tap_index).map_err(|e| e.to_string())?;
        network.set_mode(akd_core::nn::Mode::Eval);
        let s = self.running_stats.feature_standardizer;
        let standardizer = BatchStandardize::from_stats(s.mean, s.var)
            .map_err(|e| format!("running_stats.feature_standardizer: {e}"))?;
        if Some(standardizer.channels()) != network.feature_channels() {
            return Err(format!(
                "running_stats.feature_standardizer: {} channels, feature tap has {:?}",
                standardizer.channels(),
                network.feature_channels()
            ));
        }
        Ok(TeacherFile {
            network,
            standardizer,
            dataset: self.dataset,
        })
    }
}

fn tensor(shape: Vec<usize>, values: Vec<f64>, what: &str) -> Result<Tensor, String> {
    Tensor::new(shape, values).map_err(|e| format!("{what}: {e}"))
}

fn required<T>(v: Option<T>, key: &str) -> Result<T, String> {
    v.ok_or_else(|| format!("missing `{key}`"))
}

fn entry_layer(e: LayerEntry) -> Result<Layer, String> {
    Ok(match e.kind.as_str() {
        "linear" | "conv2d" => {
            let weight = tensor(e.shape, e.values, "weight")?;
            let b = required(e.bias, "bias")?;
            let bias = tensor(b.shape, b.values, "bias")?;
            if e.kind == "linear" {
                Layer::Linear { weight, bias }
            } else {
                Layer::Conv2d {
                    weight,
                    bias,
                    padding: required(e.padding, "padding")?,
                }
            }
        }
        "relu" => Layer::Relu,
        "global_avg_pool" => Layer::GlobalAvgPool,
        "dropout" => Layer::Dropout {
            keep: required(e.keep, "keep")?,
        },
        "batch_standardize" => Layer::BatchStandardize(
            BatchStandardize::from_stats(
                required(e.running_mean, "running_mean")?,
                required(e.running_var, "running_var")?,
            )
            .map_err(|err| err.to_string())?,
        ),
        other => return Err(format!("unknown layer kind `{other}`")),
    })
}

pub fn save_teacher(path: &Path, teacher: &TeacherFile) -> LabResult<()> {
    write_json(path, &WeightFile::from_teacher(teacher))
}

/// Loads a weight file. A missing file is a usage error; a malformed one a
/// format error naming the key or layer.
pub fn load_teacher(path: &Path) -> LabResult<TeacherFile> {
    if !path.is_file() {
        return Err(LabError::Usage(format!("teacher file {} not found", path.display())));
    }
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let format = |detail: String| LabError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let file: WeightFile = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
    file.into_teacher().map_err(format)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaFile {
    pub format_version: u32,
    pub mode: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub floor: f64,
    pub normalized: bool,
}

impl From<&SigmaTensor> for SigmaFile {
    fn from(s: &SigmaTensor) -> Self {
        SigmaFile {
            format_version: FORMAT_VERSION,
            mode: s.mode().as_str().to_string(),
            shape: s.values().dims().to_vec(),
            values: s.values().values().to_vec(),
            floor: s.floor(),
            normalized: s.is_normalized(),
        }
    }
}

impl SigmaFile {
    pub fn to_sigma(&self) -> Result<SigmaTensor, String> {
        let mode = self.mode.parse().map_err(|e| format!("mode: {e}"))?;
        let values = Tensor::new(self.shape.clone(), self.values.clone()).map_err(|e| format!("values: {e}"))?;
        SigmaTensor::from_values(mode, values, self.normalized).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReportFile {
    pub format_version: u32,
    pub trials: usize,
    pub max_abs_err_autodiff: f64,
    pub worst_autodiff: String,
    pub max_rel_err_finite_diff: f64,
    pub worst_finite_diff: String,
    pub max_ratio_err_mse: f64,
    pub max_ratio_err_kl: f64,
    pub ratio_samples: usize,
}

impl From<&GradReport> for GradReportFile {
    fn from(r: &GradReport) -> Self {
        GradReportFile {
            format_version: FORMAT_VERSION,
            trials: r.trials,
            max_abs_err_autodiff: r.max_abs_err_autodiff,
            worst_autodiff: r.worst_autodiff.clone(),
            max_rel_err_finite_diff: r.max_rel_err_finite_diff,
            worst_finite_diff: r.worst_finite_diff.clone(),
            max_ratio_err_mse: r.max_ratio_err_mse,
            max_ratio_err_kl: r.max_ratio_err_kl,
            ratio_samples: r.ratio_samples.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub sigma: f64,
    pub ratio_mse: f64,
    pub ratio_kl: f64,
}

impl From<&RatioSample> for RatioRow {
    fn from(r: &RatioSample) -> Self {
        RatioRow {
            sigma: r.sigma,
            ratio_mse: r.ratio_mse,
            ratio_kl: r.ratio_kl,
        }
    }
}

/// Final numbers of one training run; the traces go to CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format_version: u32,
    pub seed: u64,
    pub teacher_acc: f64,
    pub student_acc: Option<f64>,
    pub final_task_loss: f64,
    pub final_distill_loss: Option<f64>,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_shape: Option<Vec<usize>>,
}

impl MetricsFile {
    pub fn new(m: &RunMetrics, sigma_shape: Option<Vec<usize>>) -> MetricsFile {
        MetricsFile {
            format_version: FORMAT_VERSION,
            seed: m.seed,
            teacher_acc: m.teacher_acc,
            student_acc: m.student_acc,
            final_task_loss: m.final_task_loss,
            final_distill_loss: m.final_distill_loss,
            epochs: m.epochs.len(),
            sigma_shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: Option<f64>,
}

impl From<&EpochTrace> for TraceRow {
    fn from(e: &EpochTrace) -> Self {
        TraceRow {
            epoch: e.epoch,
            task_loss: e.task_loss,
            distill_loss: e.distill_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub distill_loss: f64,
}

/// Wall-clock numbers, kept apart from the deterministic outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingFile {
    pub format_version: u32,
    pub command: String,
    pub wall_seconds: f64,
    pub threads: usize,
}
