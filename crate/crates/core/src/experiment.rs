//! Experiment configuration, the end-to-end toy pipeline and ablation
//! sweeps with CSV and SVG output.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GeodesicTable, MetricParams, MetricReport};
use crate::mixer::{CropParams, MixSpec};
use crate::net::checkpoint;
use crate::net::{MicroNet, NetConfig, TaskWeights};
use crate::rig::reference_atlas;
use crate::toy::{render_toy_frames, DatasetConfig, ToyData, ToyFrames};
use crate::train::{evaluate, train, write_loss_csv, EvalOptions, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Seed of crop box jitter when building pools.
    pub crop_seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 1500,
            crop_seed: 7,
            eval_batch: 16,
        }
    }
}

/// Every knob of a toy experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub mix: MixSpec,
    pub net: NetConfig,
    pub weights: TaskWeights,
    pub metrics: MetricParams,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            mix: MixSpec::default(),
            net: NetConfig::default(),
            weights: TaskWeights::default(),
            metrics: MetricParams::default(),
            training: TrainingConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.mix.validate()?;
        self.net.validate()?;
        self.weights.validate()?;
        self.metrics.validate()?;
        if self.training.steps == 0 || self.training.eval_batch == 0 {
            return Err(Error::Config("training steps and eval batch must be positive".into()));
        }
        if self.mix.crop_size != self.net.crop_size {
            return Err(Error::Config(format!(
                "mix.crop_size {} differs from net.crop_size {}",
                self.mix.crop_size, self.net.crop_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.mix.seed = seed;
        self.net.init_seed = seed;
        self.training.crop_seed = seed.wrapping_add(7);
        self
    }

    pub fn crop_params(&self) -> CropParams {
        CropParams::from_spec(&self.mix)
    }
}

/// Renders frames and builds crop pools.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(ToyFrames, ToyData)> {
    cfg.validate()?;
    let frames = render_toy_frames(&cfg.dataset)?;
    let data = frames.crops(&cfg.crop_params(), cfg.training.crop_seed)?;
    if data.sim_test.is_empty() || data.real_test.is_empty() {
        return Err(Error::EmptyPool("test"));
    }
    Ok((frames, data))
}

pub fn train_model(cfg: &ExperimentConfig, data: &ToyData, on_step: impl FnMut(&StepRecord)) -> Result<(MicroNet<f32>, Vec<StepRecord>)> {
    let mut net = MicroNet::new(cfg.net.clone())?;
    let log = train(&mut net, &data.sim_train, &data.real_train, &cfg.mix, &cfg.weights, cfg.training.steps, on_step)?;
    Ok((net, log))
}

/// Held-out metrics of both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReports {
    pub sim: MetricReport,
    pub real: MetricReport,
}

/// Held-out metrics of both domains; gps is scored on the reference atlas.
pub fn evaluate_model(cfg: &ExperimentConfig, net: &mut MicroNet<f32>, data: &ToyData) -> Result<DomainReports> {
    let table = GeodesicTable::new(reference_atlas()?)?;
    let opts = EvalOptions {
        metrics: cfg.metrics.clone(),
        disk_radius: cfg.mix.disk_radius,
        train_sim_fraction: cfg.mix.sim_fraction,
        batch_size: cfg.training.eval_batch,
        geodesics: Some(&table),
    };
    Ok(DomainReports {
        sim: evaluate(net, &data.sim_test, &opts)?,
        real: evaluate(net, &data.real_test, &opts)?,
    })
}

pub const CHECKPOINT_FILE: &str = "model.dsck";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const DATASET_DIR: &str = "dataset";

/// Dataset, training and evaluation into `out`: `dataset/`, `model.dsck`,
/// `loss.csv` and `report.json`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, write_dataset: bool) -> Result<DomainReports> {
    let (frames, data) = prepare_data(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    if write_dataset {
        frames.write(&out.join(DATASET_DIR))?;
    }
    let (mut net, log) = train_model(cfg, &data, |_| {})?;
    write_loss_csv(&log, &out.join(LOSS_FILE))?;
    checkpoint::save(&mut net, &out.join(CHECKPOINT_FILE))?;
    let reports = evaluate_model(cfg, &mut net, &data)?;
    write_json(&reports, &out.join(REPORT_FILE))?;
    Ok(reports)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    MixRatio,
    UvWeight,
    NormalWeight,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::MixRatio => "mix_ratio",
            AblationAxis::UvWeight => "uv_weight",
            AblationAxis::NormalWeight => "normal_weight",
        }
    }

    /// Copy of `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            AblationAxis::MixRatio => c.mix.sim_fraction = value,
            AblationAxis::UvWeight => c.weights.uv = value,
            AblationAxis::NormalWeight => c.weights.normal = value,
        }
        c
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix_ratio" => Ok(AblationAxis::MixRatio),
            "uv_weight" => Ok(AblationAxis::UvWeight),
            "normal_weight" => Ok(AblationAxis::NormalWeight),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// One trained model of a sweep. Dense metrics come from the held-out sim
/// domain, 2D metrics from both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub add: Option<f64>,
    pub uv_l2: Option<f64>,
    pub sim_iou: Option<f64>,
    pub sim_oks: Option<f64>,
    pub real_iou: Option<f64>,
    pub real_oks: Option<f64>,
    pub final_loss: f64,
}

impl AblationRow {
    pub fn from_reports(value: f64, r: &DomainReports, final_loss: f64) -> Self {
        AblationRow {
            value,
            add: r.sim.add_degrees,
            uv_l2: r.sim.uv_l2_mean,
            sim_iou: r.sim.iou_mean,
            sim_oks: r.sim.oks_mean,
            real_iou: r.real.iou_mean,
            real_oks: r.real.oks_mean,
            final_loss,
        }
    }

    fn columns(&self) -> [Option<f64>; 6] {
        [self.add, self.uv_l2, self.sim_iou, self.sim_oks, self.real_iou, self.real_oks]
    }
}

pub const ABLATION_COLUMNS: [&str; 6] = ["ADD", "L2", "IOU", "OKS", "REAL_IOU", "REAL_OKS"];

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn ablation_csv_header(axis: AblationAxis) -> String {
    format!("{},{},final_loss", axis.name(), ABLATION_COLUMNS.join(","))
}

pub fn ablation_csv_row(r: &AblationRow) -> String {
    let cells: Vec<String> = r.columns().iter().map(|&v| csv_cell(v)).collect();
    format!("{},{},{:.6}", r.value, cells.join(","), r.final_loss)
}

/// Trains one model per value on shared data and seeds. With `out`, rows
/// are appended to `ablation_<axis>.csv` as they finish and one SVG line
/// plot per metric is written at the end.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &ToyData,
    axis: AblationAxis,
    values: &[f64],
    out: Option<&Path>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    for &v in values {
        axis.apply(cfg, v).validate()?;
    }
    let mut csv = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let path = dir.join(format!("ablation_{}.csv", axis.name()));
            let mut f = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
            writeln!(f, "{}", ablation_csv_header(axis))?;
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let c = axis.apply(cfg, v);
        let (mut net, log) = train_model(&c, data, |_| {})?;
        let reports = evaluate_model(&c, &mut net, data)?;
        let row = AblationRow::from_reports(v, &reports, log.last().map_or(f64::NAN, |r| r.loss.total()));
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", ablation_csv_row(&row))?;
            f.flush()?;
        }
        progress(&row);
        rows.push(row);
    }
    if let Some(dir) = out {
        for (k, name) in ABLATION_COLUMNS.iter().enumerate() {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.columns()[k].map(|y| (r.value, y))).collect();
            let path = dir.join(format!("ablation_{}_{}.svg", axis.name(), name.to_lowercase()));
            std::fs::write(&path, line_plot_svg(axis.name(), name, &pts)).map_err(|e| Error::file(&path, e))?;
        }
    }
    Ok(rows)
}

/// Minimal SVG line plot with axis ranges and tick labels.
pub fn line_plot_svg(x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (360.0, 240.0, 48.0);
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 1.5 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 1.5 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {} V{} H{}" fill="none" stroke="black"/>"#,
        m / 2.0,
        h - m,
        w - m / 2.0
    );
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, h - m + 14.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, m - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">{y_label}</text>"#, h / 2.0, h / 2.0);
    if !pts.is_empty() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, sx(x), sy(y));
        }
    }
    s.push_str("</svg>\n");
    s
}
