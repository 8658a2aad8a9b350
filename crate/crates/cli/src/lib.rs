//! The `ath` command line: dataset generation, training, indexing, query,
//! evaluation and the `(r, k)` sweep.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ath_core::data::{self, DataError, Dataset, Split};
use ath_core::hash_index::{HashIndex, IndexError};
use ath_core::network::{binarize, cam_heatmap, AthModel, ModelError};
use ath_core::pipeline::{self, PipelineError};
use ath_core::{checkpoint, Tensor};
use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.athm";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Data(DataError::Spec(_)) | CliError::Model(ModelError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ath", about = "Attention-based triplet hashing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// combined, triplet_only or ce_only.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Returned-list lengths; repeat or comma-separate.
    #[arg(long, global = true, value_delimiter = ',')]
    pub topn: Vec<usize>,
    /// Margin weight; a list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub r: Vec<f64>,
    /// Hash length; a list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write a CAM heat map of the query as PGM.
    #[arg(long, global = true)]
    pub heatmap: Option<PathBuf>,
    /// Allow `gen-data` to write into a non-empty directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with its train/test split to `--out`.
    GenData,
    /// Train on the train split; writes `model.athm` and `loss.csv` into `--out`.
    Train,
    /// Encode the train split with a checkpoint and save the index to `--out`.
    Index,
    /// Rank the gallery against one PGM image.
    Query { image: PathBuf },
    /// Score every test image against the index; CSV to `--out` or stdout.
    Evaluate,
    /// Train and evaluate every `(r, k)` cell; grid CSV to `--out` or stdout.
    Sweep,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn single<T: Copy>(values: &[T], flag: &str) -> Result<Option<T>, CliError> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(usage(format!("--{flag} takes a single value outside sweep"))),
    }
}

/// Defaults, then the config file, then `--set` overrides, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.set("mode", m)?;
    }
    if !cli.topn.is_empty() {
        cfg.topn = cli.topn.clone();
    }
    if matches!(cli.command, Command::Sweep) {
        if !cli.r.is_empty() {
            cfg.r_values = cli.r.clone();
        }
        if !cli.k.is_empty() {
            cfg.k_values = cli.k.clone();
        }
    } else {
        if let Some(r) = single(&cli.r, "r")? {
            cfg.r = r;
        }
        if let Some(k) = single(&cli.k, "k")? {
            cfg.k = Some(k);
        }
    }
    for (slot, flag) in [(&mut cfg.data, &cli.data), (&mut cfg.checkpoint, &cli.checkpoint), (&mut cfg.index, &cli.index)] {
        if let Some(p) = flag {
            *slot = Some(p.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| usage(format!("missing {what}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Split), CliError> {
    let dir = need(&cfg.data, "--data directory")?;
    Ok((data::load_dataset(dir)?, data::load_split(dir)?))
}

fn load_model(cfg: &RunConfig) -> Result<AthModel, CliError> {
    let model = checkpoint::load(need(&cfg.checkpoint, "--checkpoint")?)?;
    if let Some(k) = cfg.k {
        if k != model.config().k {
            return Err(usage(format!("config asks for k = {k} but the checkpoint has k = {}", model.config().k)));
        }
    }
    Ok(model)
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let spec = cfg.dataset_spec();
    spec.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|source| CliError::Io {
            path: out.display().to_string(),
            source,
        })?;
        if entries.next().is_some() && !force {
            return Err(CliError::Runtime(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    let ds = data::generate_dataset(&spec)?;
    let split = data::split_dataset(&ds, cfg.test_fraction, cfg.seed)?;
    data::save_dataset(out, &ds, Some(&split))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (ds, split) = load_data(cfg)?;
    let model_cfg = cfg.model_config(ds.image_size, ds.class_counts().len());
    let mut model = AthModel::new(model_cfg)?;
    let history = pipeline::train(&mut model, &ds, &split.train, cfg.mode, cfg.distance)?;
    write_file(&out.join(CHECKPOINT_FILE), &checkpoint::to_bytes(&model))?;
    write_file(&out.join(LOSS_FILE), pipeline::loss_csv(&history).as_bytes())?;
    Ok(())
}

pub fn index(cfg: &RunConfig, out: &Path) -> Result<usize, CliError> {
    let model = load_model(cfg)?;
    let (ds, split) = load_data(cfg)?;
    let idx = pipeline::build_index(&model, &ds, &split.train)?;
    write_file(out, &idx.to_bytes())?;
    Ok(idx.len())
}

/// Image id encoded in a dataset file name, if any.
fn id_from_path(path: &Path) -> Option<u32> {
    path.file_stem()?.to_str()?.strip_prefix("img_")?.parse().ok()
}

pub fn query(cfg: &RunConfig, image: &Path, heatmap: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let idx = HashIndex::load(need(&cfg.index, "--index")?)?;
    if idx.k() != model.config().k {
        return Err(CliError::Runtime(format!("index has k = {} but the checkpoint has k = {}", idx.k(), model.config().k)));
    }
    let (w, h, pixels) = data::load_pgm(image)?;
    let size = model.config().input_size;
    if w != size || h != size {
        return Err(CliError::Runtime(format!("{} is {w}x{h}; the model expects {size}x{size}", image.display())));
    }
    let out = model.infer(&Tensor::new(vec![1, 1, size, size], pixels).map_err(ModelError::from)?)?.remove(0);
    let exclude = id_from_path(image).filter(|id| idx.ids().contains(id));
    let hits = idx.search_excluding(&binarize(&out.hash_vec), cfg.topn[0], exclude)?;
    let mut text = String::from("rank,id,distance,label\n");
    for (i, hit) in hits.iter().enumerate() {
        text.push_str(&format!("{},{},{},{}\n", i + 1, hit.id, hit.distance, hit.label));
    }
    emit(None, &text, stdout)?;
    if let Some(path) = heatmap {
        let img = cam_heatmap(&out.dense_map, model.config().dense_side, size);
        write_file(path, &data::encode_pgm(img.width, img.height, &img.pixels))?;
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let (ds, split) = load_data(cfg)?;
    let idx = match &cfg.index {
        Some(p) => HashIndex::load(p)?,
        None => pipeline::build_index(&model, &ds, &split.train)?,
    };
    let report = pipeline::evaluate(&model, &idx, &ds, &split.test, &cfg.topn, cfg.ap_norm)?;
    Ok(report.to_csv())
}

pub fn sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let (ds, split) = load_data(cfg)?;
    let base = cfg.model_config(ds.image_size, ds.class_counts().len());
    let grid = pipeline::sweep(&base, &ds, &split, &cfg.r_values, &cfg.k_values, cfg.topn[0], cfg.threads)?;
    Ok(pipeline::sweep_csv(&cfg.r_values, &cfg.k_values, &grid))
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData => gen_data(&cfg, out.ok_or_else(|| usage("gen-data needs --out"))?, cli.force),
        Command::Train => train(&cfg, out.ok_or_else(|| usage("train needs --out"))?),
        Command::Index => {
            let n = index(&cfg, out.ok_or_else(|| usage("index needs --out"))?)?;
            writeln!(stdout, "indexed {n} images").map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })
        }
        Command::Query { image } => query(&cfg, image, cli.heatmap.as_deref(), stdout),
        Command::Evaluate => emit(out, &evaluate(&cfg)?, stdout),
        Command::Sweep => emit(out, &sweep(&cfg)?, stdout),
    }
}
