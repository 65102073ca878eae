//! Subcommand implementations, callable without going through argv.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use dsibh_core::dataio::{
    load_features, load_labels, save_features, save_labels, split, DatasetBundle, LabelMatrix, SynthSpec,
};
use dsibh_core::eval::{bit_agreement, heldout_mutual_information, Direction, EncodedSplit};
use dsibh_core::hamming::{encode, mean_average_precision, retrieve, Hit, MapReport, PackedCodeDB};
use dsibh_core::nets::Mlp;
use dsibh_core::trainer::{train_with_checkpoints, RoundLosses, TrainState};
use dsibh_core::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A failure with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format { .. } | Error::Json(_) => EXIT_IO,
            e if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn with_path<T>(r: dsibh_core::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

// ---------------------------------------------------------------- synth

pub const SYNTH_X1: &str = "x1.dsibf";
pub const SYNTH_X2: &str = "x2.dsibf";
pub const SYNTH_LABELS: &str = "labels.dsibf";

#[derive(Clone, Debug, Serialize)]
pub struct SynthOutput {
    pub rows: usize,
    pub files: Vec<PathBuf>,
}

/// Writes both feature files, the label file and a `synth.json` echo.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> CliResult<SynthOutput> {
    let data = dsibh_core::dataio::generate_synthetic::<f64>(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("{}: {e}", out_dir.display())))?;
    let files = vec![out_dir.join(SYNTH_X1), out_dir.join(SYNTH_X2), out_dir.join(SYNTH_LABELS)];
    with_path(save_features(&files[0], &data.x1), &files[0])?;
    with_path(save_features(&files[1], &data.x2), &files[1])?;
    with_path(save_labels(&files[2], &data.y), &files[2])?;
    let echo = out_dir.join("synth.json");
    write_json(&echo, spec)?;
    Ok(SynthOutput {
        rows: data.len(),
        files,
    })
}

// ---------------------------------------------------------------- train

pub const LABNET_FILE: &str = "labnet.dsibm";
pub const IMGNET_FILE: &str = "imgnet.dsibm";
pub const TXTNET_FILE: &str = "txtnet.dsibm";
pub const QUERY_X_DB: &str = "query_x.dsibc";
pub const QUERY_R_DB: &str = "query_r.dsibc";
pub const RETRIEVAL_X_DB: &str = "retrieval_x.dsibc";
pub const RETRIEVAL_R_DB: &str = "retrieval_r.dsibc";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitCounts {
    pub query: usize,
    pub train: usize,
    pub retrieval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeldoutMi {
    pub img: f64,
    pub txt: f64,
}

/// Everything `train` records; contains no timestamps so reruns compare
/// byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub config: ExperimentConfig,
    pub code_bits: usize,
    pub counts: SplitCounts,
    pub rounds_completed: usize,
    pub converged: bool,
    pub history: Vec<RoundLosses>,
    /// Keyed by direction (`x2r`, `r2x`).
    pub map: BTreeMap<String, MapReport>,
    /// `I(G; X)` per modality on the query rows.
    pub heldout_mi: HeldoutMi,
    /// Fraction of equal bits between the two modality codes on training pairs.
    pub bit_agreement: f64,
}

impl Metrics {
    pub fn map_for(&self, d: Direction) -> Option<f64> {
        self.map.get(d.key()).map(|r| r.map)
    }
}

/// A finished in-memory run.
pub struct Experiment {
    pub data: DatasetBundle<f64>,
    pub state: TrainState<f64>,
    pub codes: EncodedSplit,
    pub metrics: Metrics,
}

/// Loads data, splits, trains on the training rows and evaluates query vs
/// retrieval rows. Writes nothing unless `checkpoint_dir` is given.
pub fn run_experiment(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> CliResult<Experiment> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let data = split(data, cfg.split.query_count, cfg.split.train_count, cfg.split.seed)?;
    let train_rows = data.train_indices();
    let train_data = data.subset(&train_rows);
    let specs = cfg.encoder_specs(data.x1.cols(), data.x2.cols(), data.y.cols());
    let state = train_with_checkpoints(&train_data, &specs, &cfg.train, checkpoint_dir)?;
    let codes = EncodedSplit::build(&state.imgnet, &state.txtnet, &data)?;

    let mut map = BTreeMap::new();
    for &d in &cfg.directions {
        map.insert(d.key().to_string(), codes.map(d, cfg.report.radius)?);
    }
    let query = data.subset(&data.query_indices());
    let mi_batch = cfg.report.mi_batch_size.unwrap_or(cfg.train.batch_size);
    let heldout_mi = HeldoutMi {
        img: heldout_mutual_information(&state.imgnet, &query.x1, mi_batch, cfg.train.alpha)?,
        txt: heldout_mutual_information(&state.txtnet, &query.x2, mi_batch, cfg.train.alpha)?,
    };
    let agreement = bit_agreement(&state.imgnet, &train_data.x1, &state.txtnet, &train_data.x2)?;
    let metrics = Metrics {
        config: cfg.clone(),
        code_bits: cfg.train.code_bits,
        counts: SplitCounts {
            query: data.query_indices().len(),
            train: train_rows.len(),
            retrieval: data.retrieval_indices().len(),
        },
        rounds_completed: state.rounds_completed,
        converged: state.converged,
        history: state.history.clone(),
        map,
        heldout_mi,
        bit_agreement: agreement,
    };
    Ok(Experiment {
        data,
        state,
        codes,
        metrics,
    })
}

/// [`run_experiment`] plus every artifact under `cfg.output_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Metrics> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    write_json(&out.join(CONFIG_ECHO_FILE), cfg)?;
    let ckpt = (cfg.train.checkpoint_every > 0).then(|| out.join("checkpoints"));
    let run = run_experiment(cfg, ckpt.as_deref())?;

    for (name, net) in [
        (LABNET_FILE, &run.state.labnet),
        (IMGNET_FILE, &run.state.imgnet),
        (TXTNET_FILE, &run.state.txtnet),
    ] {
        let p = out.join(name);
        with_path(net.save(&p), &p)?;
    }
    for (name, db) in [
        (QUERY_X_DB, &run.codes.query_x),
        (QUERY_R_DB, &run.codes.query_r),
        (RETRIEVAL_X_DB, &run.codes.retrieval_x),
        (RETRIEVAL_R_DB, &run.codes.retrieval_r),
    ] {
        let p = out.join(name);
        with_path(db.save(&p), &p)?;
    }
    write_json(&out.join(METRICS_FILE), &run.metrics)?;
    Ok(run.metrics)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- encode

/// Encodes a feature file into a code DB; ids are row numbers. Without a
/// label file the DB carries zero-width labels.
pub fn cmd_encode(model: &Path, features: &Path, labels: Option<&Path>, out: &Path) -> CliResult<PackedCodeDB> {
    let net: Mlp<f64> = with_path(Mlp::load(model), model)?;
    let x = with_path(load_features::<f64>(features), features)?;
    check_model_input(&net, x.cols(), features)?;
    let y = match labels {
        Some(p) => with_path(load_labels(p), p)?,
        None => LabelMatrix::zeros(x.rows(), 0),
    };
    if y.rows() != x.rows() {
        return Err(CliError::io(format!(
            "{} has {} rows but {} has {}",
            features.display(),
            x.rows(),
            labels.map_or_else(String::new, |p| p.display().to_string()),
            y.rows()
        )));
    }
    let ids = (0..x.rows() as u64).collect();
    let db = encode(&net, &x, y, ids)?;
    with_path(db.save(out), out)?;
    Ok(db)
}

fn check_model_input(net: &Mlp<f64>, cols: usize, features: &Path) -> CliResult<()> {
    if net.input_dim() != cols {
        return Err(CliError::io(format!(
            "{}: model expects {} features per row, file has {cols}",
            features.display(),
            net.input_dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- retrieve

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryHits {
    pub query: usize,
    pub hits: Vec<Hit>,
}

/// Encodes each query row with `model` and ranks `db` against it.
pub fn cmd_retrieve(queries: &Path, model: &Path, db: &Path, k: usize) -> CliResult<Vec<QueryHits>> {
    let net: Mlp<f64> = with_path(Mlp::load(model), model)?;
    let x = with_path(load_features::<f64>(queries), queries)?;
    check_model_input(&net, x.cols(), queries)?;
    let db = with_path(PackedCodeDB::load(db), db)?;
    if net.code_bits() != db.code_bits() {
        return Err(CliError::io(format!(
            "model emits {} bits, database holds {}-bit codes",
            net.code_bits(),
            db.code_bits()
        )));
    }
    let q = encode(&net, &x, LabelMatrix::zeros(x.rows(), 0), (0..x.rows() as u64).collect())?;
    (0..q.len())
        .map(|i| {
            Ok(QueryHits {
                query: i,
                hits: retrieve(q.code(i), &db, Some(k))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub direction: String,
    pub bits: usize,
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "direction,bits,map,evaluated,skipped";

    pub fn csv(&self) -> String {
        format!("{},{},{:.6},{},{}", self.direction, self.bits, self.map, self.evaluated, self.skipped)
    }
}

impl fmt::Display for EvalRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} {:>5} {:>8.4} {:>8}",
            self.direction, self.bits, self.map, self.skipped
        )
    }
}

pub const EVAL_TABLE_HEADER: &str = "direction  bits      MAP  skipped";

pub fn cmd_eval(query_db: &Path, retrieval_db: &Path, direction: &str, radius: Option<usize>) -> CliResult<EvalRow> {
    let q = with_path(PackedCodeDB::load(query_db), query_db)?;
    let db = with_path(PackedCodeDB::load(retrieval_db), retrieval_db)?;
    if q.code_bits() != db.code_bits() {
        return Err(CliError::io(format!(
            "bit length mismatch: {} has {} bits, {} has {}",
            query_db.display(),
            q.code_bits(),
            retrieval_db.display(),
            db.code_bits()
        )));
    }
    let r = mean_average_precision(&q, &db, radius)?;
    Ok(EvalRow {
        direction: direction.to_string(),
        bits: q.code_bits(),
        map: r.map,
        evaluated: r.evaluated,
        skipped: r.skipped,
    })
}

/// Appends a row to a CSV file, writing the header for a new file.
pub fn append_csv(path: &Path, row: &EvalRow) -> CliResult<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EvalRow::CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&row.csv());
    text.push('\n');
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
