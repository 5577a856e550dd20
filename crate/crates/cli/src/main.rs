use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densesim::experiment::{self, AblationAxis, ExperimentConfig};
use densesim::metrics::{evaluate_frame, GeodesicTable, MetricReport};
use densesim::mesh::{load_mesh, parse_landmarks};
use densesim::net::checkpoint;
use densesim::raster::{read_frame, ANNOTATION_FILE};
use densesim::rig::{load_figure, parameterize, reference_atlas, save_figure};
use densesim::toy::{make_raw_figures, render_toy_frames, render_toy_frames_with};
use densesim::train::{loss_csv_row, train, LOSS_CSV_HEADER};
use densesim::{Error, ErrorKind, Result, SkinnedFigure};

/// Synthetic dense pose data generation and sim/real toy training.
#[derive(Parser)]
#[command(name = "densesim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the reference atlas and rigged humanoids without uv.
    GenFigures {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of figures.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, visible_alias = "out-dir")]
        out: PathBuf,
    },
    /// Transfer the atlas uv onto a generated figure.
    TransferUv {
        #[arg(long, visible_alias = "ref")]
        reference: PathBuf,
        #[arg(long, visible_alias = "target")]
        figure: PathBuf,
        /// Landmark file replacing the figure's sidecar.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the two-domain toy dataset.
    GenDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Render these `figure_*.obj` figures instead of generating them.
        #[arg(long)]
        figures_dir: Option<PathBuf>,
        /// Training frames per domain.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        /// Vertical field of view in degrees.
        #[arg(long)]
        fov: Option<f64>,
        #[arg(long, visible_alias = "out-dir")]
        out: PathBuf,
    },
    /// Train a toy model and write its checkpoint, loss CSV and held-out report.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label frames against ground truth, or a checkpoint on
    /// the held-out toy sets.
    Eval {
        #[arg(long, requires_all = ["gt_dir", "ref_mesh"])]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        #[arg(long)]
        ref_mesh: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred_dir")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train one model per value of an axis and tabulate held-out metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// mix_ratio, uv_weight or normal_weight.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render label visualizations of one frame directory.
    Preview {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)
}

/// Frame directories below `root`, relative and sorted.
fn frame_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let dir = root.join(rel);
        if dir.join(ANNOTATION_FILE).is_file() {
            out.push(rel.to_path_buf());
            return Ok(());
        }
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if e.file_type()?.is_dir() {
                walk(root, &rel.join(e.file_name()), out)?;
            }
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(Error::Format(format!("{} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    walk(root, Path::new(""), &mut out)?;
    if out.is_empty() {
        return Err(Error::Format(format!("no frames below {}", root.display())));
    }
    Ok(out)
}

fn gen_figures(config: Option<&Path>, count: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = count {
        cfg.dataset.figures = n;
    }
    cfg.validate()?;
    create_dir(out)?;
    densesim::mesh::save_mesh(&reference_atlas()?, &out.join("reference.obj"))?;
    for (i, fig) in make_raw_figures(&cfg.dataset)?.iter().enumerate() {
        save_figure(fig, &out.join(format!("figure_{i:03}.obj")))?;
    }
    eprintln!("wrote reference atlas and {} figures to {}", cfg.dataset.figures, out.display());
    Ok(())
}

fn transfer(reference: &Path, figure: &Path, landmarks: Option<&Path>, out: &Path) -> Result<()> {
    let reference = load_mesh(reference)?;
    let mut fig = load_figure(figure)?;
    if let Some(path) = landmarks {
        let text = std::fs::read_to_string(path)?;
        fig.mesh.landmarks.clear();
        for (name, v) in parse_landmarks(&text)? {
            fig.mesh.add_landmark(name, v)?;
        }
    }
    let fig = parameterize(&fig, &reference)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_figure(&fig, out)
}

/// Figures of a `gen-figures` or `transfer-uv` directory, in file name
/// order. Figures without uv get it from `reference.obj` in the same
/// directory, or from the built-in atlas.
fn load_figures(dir: &Path) -> Result<Vec<SkinnedFigure>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        name.starts_with("figure_") && name.ends_with(".obj")
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no figure_*.obj in {}", dir.display())));
    }
    let reference = match dir.join("reference.obj") {
        p if p.is_file() => load_mesh(&p)?,
        _ => reference_atlas()?,
    };
    paths
        .iter()
        .map(|p| {
            let fig = load_figure(p)?;
            if fig.mesh.uv.is_some() {
                Ok(fig)
            } else {
                parameterize(&fig, &reference)
            }
        })
        .collect()
}

struct DatasetOverrides<'a> {
    figures_dir: Option<&'a Path>,
    count: Option<usize>,
    seed: Option<u64>,
    width: Option<u32>,
    height: Option<u32>,
    fov: Option<f64>,
}

fn gen_dataset(config: Option<&Path>, o: DatasetOverrides, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = o.seed {
        cfg = cfg.with_seed(s);
    }
    let d = &mut cfg.dataset;
    d.train_frames = o.count.unwrap_or(d.train_frames);
    d.width = o.width.unwrap_or(d.width);
    d.height = o.height.unwrap_or(d.height);
    d.fov_y = o.fov.unwrap_or(d.fov_y);
    let frames = match o.figures_dir {
        Some(dir) => {
            let figures = load_figures(dir)?;
            cfg.dataset.figures = figures.len();
            cfg.validate()?;
            render_toy_frames_with(&cfg.dataset, &figures)?
        }
        None => {
            cfg.validate()?;
            render_toy_frames(&cfg.dataset)?
        }
    };
    frames.write(out)?;
    eprintln!("wrote {} train and {} test frames per domain to {}", cfg.dataset.train_frames, cfg.dataset.test_frames, out.display());
    Ok(())
}

fn train_toy(config: Option<&Path>, steps: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = steps {
        cfg.training.steps = n;
    }
    cfg.validate()?;
    let (_, data) = experiment::prepare_data(&cfg)?;
    eprintln!("pools: {} sim / {} real training crops", data.sim_train.len(), data.real_train.len());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let csv_path = out.with_extension("csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    use std::io::Write;
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    let mut io_err = None;
    let mut net = densesim::net::MicroNet::new(cfg.net.clone())?;
    train(&mut net, &data.sim_train, &data.real_train, &cfg.mix, &cfg.weights, cfg.training.steps, |r| {
        if let Err(e) = writeln!(csv, "{}", loss_csv_row(r)) {
            io_err.get_or_insert(e);
        }
        if r.step % 100 == 0 {
            eprintln!("step {:5} loss {:.4}", r.step, r.loss.total());
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    checkpoint::save(&mut net, out)?;
    let reports = experiment::evaluate_model(&cfg, &mut net, &data)?;
    experiment::write_json(&reports, &out.with_extension("json"))?;
    eprintln!(
        "sim uv_l2 {:?}, sim oks {:?}, real oks {:?}",
        reports.sim.uv_l2_mean, reports.sim.oks_mean, reports.real.oks_mean
    );
    Ok(())
}

fn eval_frames(pred_dir: &Path, gt_dir: &Path, ref_mesh: &Path, config: Option<&Path>, report: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let table = GeodesicTable::new(load_mesh(ref_mesh)?)?;
    let mut images = Vec::new();
    let mut matches = Vec::new();
    let mut n_gt = 0;
    for rel in frame_dirs(gt_dir)? {
        let gt = read_frame(&gt_dir.join(&rel))?;
        let pred = read_frame(&pred_dir.join(&rel))?;
        let (per, m, n) = evaluate_frame(&rel.to_string_lossy(), &pred, &gt, &table, &cfg.metrics)?;
        images.extend(per);
        matches.extend(m);
        n_gt += n;
    }
    let out = MetricReport::aggregate(images, Some((&matches, n_gt)));
    out.validate()?;
    experiment::write_json(&out, report)?;
    eprintln!("gps {:?}, AP {:?}, AR {:?}", out.gps_mean, out.gps_ap, out.gps_ar);
    Ok(())
}

fn eval_checkpoint(ckpt: &Path, config: Option<&Path>, report: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    let mut net = checkpoint::load(ckpt)?;
    cfg.net = net.config.clone();
    cfg.validate()?;
    let (_, data) = experiment::prepare_data(&cfg)?;
    let reports = experiment::evaluate_model(&cfg, &mut net, &data)?;
    experiment::write_json(&reports, report)
}

fn ablate(config: Option<&Path>, axis: &str, values: &[f64], out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let axis: AblationAxis = axis.parse()?;
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let (_, data) = experiment::prepare_data(&cfg)?;
    let rows = experiment::run_ablation(&cfg, &data, axis, values, Some(out), |r| {
        eprintln!("{} = {}: {}", axis.name(), r.value, experiment::ablation_csv_row(r));
    })?;
    experiment::write_json(&rows, &out.join(format!("ablation_{}.json", axis.name())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenFigures { config, count, seed, out } => gen_figures(config.as_deref(), count, seed, &out),
        Command::TransferUv {
            reference,
            figure,
            landmarks,
            out,
        } => transfer(&reference, &figure, landmarks.as_deref(), &out),
        Command::GenDataset {
            config,
            figures_dir,
            count,
            seed,
            width,
            height,
            fov,
            out,
        } => {
            let o = DatasetOverrides {
                figures_dir: figures_dir.as_deref(),
                count,
                seed,
                width,
                height,
                fov,
            };
            gen_dataset(config.as_deref(), o, &out)
        }
        Command::TrainToy { config, steps, seed, out } => train_toy(config.as_deref(), steps, seed, &out),
        Command::Eval {
            pred_dir,
            gt_dir,
            ref_mesh,
            checkpoint,
            config,
            report,
        } => match (pred_dir, gt_dir, ref_mesh, checkpoint) {
            (Some(p), Some(g), Some(m), None) => eval_frames(&p, &g, &m, config.as_deref(), &report),
            (None, None, None, Some(c)) => eval_checkpoint(&c, config.as_deref(), &report),
            _ => Err(Error::Config("eval needs --pred-dir, --gt-dir and --ref-mesh, or --checkpoint".into())),
        },
        Command::Ablate { config, axis, values, out } => ablate(config.as_deref(), &axis, &values, &out),
        Command::Preview { frame, out } => {
            let f = read_frame(&frame)?;
            densesim::preview::render_previews(&f, &out).map(|_| ())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
