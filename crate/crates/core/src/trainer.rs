//! Alternating optimization of the label, image and text encoders.
//!
//! Each outer round runs three phases in a fixed order: label encoder steps
//! (refreshing the binary label codes after every step), then image encoder
//! steps, then text encoder steps. Only the phase's own network changes
//! during that phase. Rounds stop at `outer_rounds` or once the summed
//! phase losses change by less than `convergence_tol` (relative).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetBundle, LabelMatrix};
use crate::error::{Error, Result};
use crate::hamming::PackedCodeDB;
use crate::losses::{
    labnet_loss, modality_loss, similarity_from_labels, BandwidthRule, ClassCodeTable, LossWeights, ModalityBatch,
};
use crate::nets::{binarize, Mlp, NetSpec};
use crate::numkit::Matrix;
use crate::optim::{Optimizer, OptimizerKind};
use crate::renyi::AlphaOrder;
use crate::scalar::Scalar;

fn default_lr_lab() -> f64 {
    1e-3
}

fn default_lr_img() -> f64 {
    10f64.powf(-4.5)
}

fn default_lr_txt() -> f64 {
    10f64.powf(-3.5)
}

/// Every scalar knob of the alternating optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub code_bits: usize,
    pub alpha: AlphaOrder,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub lr_lab: f64,
    pub lr_img: f64,
    pub lr_txt: f64,
    /// Steps per phase; `None` means one pass over the training rows.
    pub iters_lab: Option<usize>,
    pub iters_img: Option<usize>,
    pub iters_txt: Option<usize>,
    pub outer_rounds: usize,
    pub convergence_tol: f64,
    pub optimizer: OptimizerKind,
    /// Rounds between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            code_bits: 16,
            alpha: AlphaOrder::TWO,
            beta: w.beta,
            gamma: w.gamma,
            eta: w.eta,
            batch_size: 128,
            lr_lab: default_lr_lab(),
            lr_img: default_lr_img(),
            lr_txt: default_lr_txt(),
            iters_lab: None,
            iters_img: None,
            iters_txt: None,
            outer_rounds: 50,
            convergence_tol: 1e-4,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            eta: self.eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.code_bits < 8 {
            return Err(Error::invalid(format!("code_bits must be >= 8, got {}", self.code_bits)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        for (name, lr) in [("lr_lab", self.lr_lab), ("lr_img", self.lr_img), ("lr_txt", self.lr_txt)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence_tol must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Architectures of the three encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpecs {
    pub lab: NetSpec,
    pub img: NetSpec,
    pub txt: NetSpec,
}

impl EncoderSpecs {
    /// Same hidden widths for all three nets, seeds derived from `seed`.
    pub fn uniform(d1: usize, d2: usize, label_dim: usize, hidden: Vec<usize>, code_bits: usize, seed: u64) -> Self {
        Self {
            lab: NetSpec::new(label_dim, hidden.clone(), code_bits, derive_seed(seed, 1)),
            img: NetSpec::new(d1, hidden.clone(), code_bits, derive_seed(seed, 2)),
            txt: NetSpec::new(d2, hidden, code_bits, derive_seed(seed, 3)),
        }
    }

    fn validate_against<T: Scalar>(&self, data: &DatasetBundle<T>, config: &TrainConfig) -> Result<()> {
        for (name, spec, dim) in [
            ("label", &self.lab, data.y.cols()),
            ("image", &self.img, data.x1.cols()),
            ("text", &self.txt, data.x2.cols()),
        ] {
            spec.validate()?;
            if spec.input_dim != dim {
                return Err(Error::invalid(format!(
                    "{name} encoder expects {} inputs, data has {dim}",
                    spec.input_dim
                )));
            }
            if spec.code_bits != config.code_bits {
                return Err(Error::invalid(format!(
                    "{name} encoder emits {} bits, config asks for {}",
                    spec.code_bits, config.code_bits
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix-style derivation of independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Lab,
    Img,
    Txt,
}

/// Mean minibatch losses of one outer round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLosses {
    pub round: usize,
    pub lab: f64,
    pub img: f64,
    pub txt: f64,
    pub img_cross_entropy: f64,
    pub img_mutual_information: f64,
    pub img_consistency: f64,
    pub txt_cross_entropy: f64,
    pub txt_mutual_information: f64,
    pub txt_consistency: f64,
}

impl RoundLosses {
    pub fn total(&self) -> f64 {
        self.lab + self.img + self.txt
    }

    pub fn phase(&self, p: Phase) -> f64 {
        match p {
            Phase::Lab => self.lab,
            Phase::Img => self.img,
            Phase::Txt => self.txt,
        }
    }
}

/// Networks, label codes and bookkeeping of a training run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub labnet: Mlp<T>,
    pub imgnet: Mlp<T>,
    pub txtnet: Mlp<T>,
    /// Binary label-encoder code of every training row.
    pub label_codes: Matrix<T>,
    /// Distinct label rows with their current codes.
    pub class_table: ClassCodeTable<T>,
    /// Class id of every training row.
    pub class_index: Vec<usize>,
    pub rounds_completed: usize,
    pub converged: bool,
    pub history: Vec<RoundLosses>,
}

/// Recomputes `sign(labnet(y_l))` for every training row.
///
/// The label encoder only ever sees the distinct label rows, so codes are
/// computed once per class and scattered.
pub fn refresh_label_codes<T: Scalar>(state: &mut TrainState<T>) -> Result<()> {
    let codes = binarize(&state.labnet.forward(&state.class_table.class_labels.to_matrix())?);
    state.label_codes = codes.select_rows(&state.class_index);
    state.class_table.class_codes = codes;
    Ok(())
}

/// Cycles through shuffled epochs of minibatches.
struct BatchStream {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        }
    }

    fn batches_per_epoch(n: usize, batch: usize) -> usize {
        let full = n / batch;
        let rem = n % batch;
        if rem >= 2 || full == 0 {
            full + 1
        } else {
            full
        }
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        let mut chunks: Vec<Vec<usize>> = order.chunks(self.batch).map(<[usize]>::to_vec).collect();
        // A trailing single row cannot form a Gram matrix; fold it in.
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        chunks.reverse();
        self.queue = chunks;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop().expect("refill yields at least one batch")
    }
}


struct ModalityContext<'a, T> {
    class_index: &'a [usize],
    label_codes: &'a Matrix<T>,
    table: &'a ClassCodeTable<T>,
    weights: LossWeights,
    order: AlphaOrder,
}

/// Mean (total, cross-entropy, MI, consistency) over the phase's steps.
#[allow(clippy::too_many_arguments)]
fn run_modality_phase<T: Scalar>(
    net: &mut Mlp<T>,
    opt: &mut Optimizer<T>,
    stream: &mut BatchStream,
    x: &Matrix<T>,
    ctx: &ModalityContext<'_, T>,
    iters: usize,
    lr: f64,
    round: usize,
    phase: Phase,
) -> Result<[f64; 4]> {
    let mut sums = [0.0; 4];
    for it in 0..iters {
        let idx = stream.next_batch();
        let features = x.select_rows(&idx);
        let class_index: Vec<usize> = idx.iter().map(|&i| ctx.class_index[i]).collect();
        let label_codes = ctx.label_codes.select_rows(&idx);
        let batch = ModalityBatch {
            features: &features,
            class_index: &class_index,
            label_codes: &label_codes,
        };
        let l = modality_loss(net, batch, ctx.table, &ctx.weights, ctx.order, BandwidthRule::Median)
            .map_err(|e| diverged_from(e, round, phase, it))?;
        let parts = [
            l.total.to_f64_lossy(),
            l.cross_entropy.to_f64_lossy(),
            l.mutual_information.to_f64_lossy(),
            l.consistency.to_f64_lossy(),
        ];
        check_finite(parts[0], round, phase, it)?;
        opt.step(net, &l.grad, T::lit(lr))?;
        if !net.is_finite() {
            return Err(Error::Diverged(format!("round {round} {phase:?} step {it}: parameters left finite range")));
        }
        for (s, p) in sums.iter_mut().zip(parts) {
            *s += p;
        }
    }
    Ok(sums.map(|s| if iters > 0 { s / iters as f64 } else { 0.0 }))
}

fn diverged_from(e: Error, round: usize, phase: Phase, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Diverged(format!("round {round} {phase:?} step {it}: {m}")),
        other => other,
    }
}

fn check_finite(v: f64, round: usize, phase: Phase, it: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("round {round} {phase:?} step {it}: loss is {v}")))
    }
}

/// Trains all three encoders on every row of `data`.
///
/// Pass `data.subset(&data.train_indices())` to train on a split's training
/// rows only.
pub fn train<T: Scalar>(data: &DatasetBundle<T>, specs: &EncoderSpecs, config: &TrainConfig) -> Result<TrainState<T>> {
    train_with_checkpoints(data, specs, config, None)
}

/// [`train`], writing a checkpoint directory every `checkpoint_every` rounds
/// when `checkpoint_dir` is given. On divergence a `diverged.json` snapshot
/// of the loss history is written there as well.
pub fn train_with_checkpoints<T: Scalar>(
    data: &DatasetBundle<T>,
    specs: &EncoderSpecs,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState<T>> {
    config.validate()?;
    specs.validate_against(data, config)?;
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("training needs at least two rows"));
    }

    let labnet = Mlp::init(&specs.lab)?;
    let imgnet = Mlp::init(&specs.img)?;
    let txtnet = Mlp::init(&specs.txt)?;
    let (class_labels, class_index) = data.y.unique_rows();
    let class_codes = binarize(&labnet.forward(&class_labels.to_matrix())?);

    // Initial label codes are random; the first label step overwrites them.
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10));
    let init_codes: Vec<T> = (0..n * config.code_bits)
        .map(|_| if init_rng.random_bool(0.5) { T::one() } else { -T::one() })
        .collect();

    let mut state = TrainState {
        labnet,
        imgnet,
        txtnet,
        label_codes: Matrix::new(n, config.code_bits, init_codes)?,
        class_table: ClassCodeTable {
            class_labels,
            class_codes,
        },
        class_index,
        rounds_completed: 0,
        converged: false,
        history: Vec::new(),
    };

    let result = run_rounds(&mut state, data, config, checkpoint_dir).map_err(|e| match e {
        Error::Numeric(m) => Error::Diverged(format!("round {}: {m}", state.rounds_completed)),
        other => other,
    });
    if let (Err(Error::Diverged(msg)), Some(dir)) = (&result, checkpoint_dir) {
        let snapshot = serde_json::json!({
            "error": msg,
            "rounds_completed": state.rounds_completed,
            "history": state.history,
            "config": config,
        });
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("diverged.json"), serde_json::to_vec_pretty(&snapshot)?)?;
    }
    result.map(|()| state)
}

fn run_rounds<T: Scalar>(
    state: &mut TrainState<T>,
    data: &DatasetBundle<T>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<()> {
    let n = data.len();
    let label_inputs: Matrix<T> = data.y.to_matrix();
    let epoch = BatchStream::batches_per_epoch(n, config.batch_size);
    let iters_lab = config.iters_lab.unwrap_or(epoch);
    let iters_img = config.iters_img.unwrap_or(epoch);
    let iters_txt = config.iters_txt.unwrap_or(epoch);
    let mut lab_stream = BatchStream::new(n, config.batch_size, derive_seed(config.seed, 20));
    let mut img_stream = BatchStream::new(n, config.batch_size, derive_seed(config.seed, 21));
    let mut txt_stream = BatchStream::new(n, config.batch_size, derive_seed(config.seed, 22));
    let mut lab_opt = Optimizer::new(config.optimizer, &state.labnet);
    let mut img_opt = Optimizer::new(config.optimizer, &state.imgnet);
    let mut txt_opt = Optimizer::new(config.optimizer, &state.txtnet);
    let eta = T::lit(config.eta);
    let mut prev_total: Option<f64> = None;

    for round in 0..config.outer_rounds {
        let mut lab_sum = 0.0;
        for it in 0..iters_lab {
            let idx = lab_stream.next_batch();
            let trace = state.labnet.forward_trace(&label_inputs.select_rows(&idx))?;
            let s = similarity_from_labels(&data.y.select_rows(&idx))?;
            let targets = state.label_codes.select_rows(&idx);
            let (loss, g_out) = labnet_loss(trace.output(), &targets, &s, eta)?;
            lab_sum += check_finite(loss.to_f64_lossy(), round, Phase::Lab, it)?;
            let grad = state.labnet.backward_trace(&trace, &g_out)?;
            lab_opt.step(&mut state.labnet, &grad, T::lit(config.lr_lab))?;
            if !state.labnet.is_finite() {
                return Err(Error::Diverged(format!("round {round} Lab step {it}: parameters left finite range")));
            }
            refresh_label_codes(state)?;
        }
        let lab = if iters_lab > 0 { lab_sum / iters_lab as f64 } else { 0.0 };

        let ctx = ModalityContext {
            class_index: &state.class_index,
            label_codes: &state.label_codes,
            table: &state.class_table,
            weights: config.weights(),
            order: config.alpha,
        };
        let img = run_modality_phase(
            &mut state.imgnet,
            &mut img_opt,
            &mut img_stream,
            &data.x1,
            &ctx,
            iters_img,
            config.lr_img,
            round,
            Phase::Img,
        )?;
        let txt = run_modality_phase(
            &mut state.txtnet,
            &mut txt_opt,
            &mut txt_stream,
            &data.x2,
            &ctx,
            iters_txt,
            config.lr_txt,
            round,
            Phase::Txt,
        )?;

        let losses = RoundLosses {
            round,
            lab,
            img: img[0],
            txt: txt[0],
            img_cross_entropy: img[1],
            img_mutual_information: img[2],
            img_consistency: img[3],
            txt_cross_entropy: txt[1],
            txt_mutual_information: txt[2],
            txt_consistency: txt[3],
        };
        let total = losses.total();
        state.history.push(losses);
        state.rounds_completed = round + 1;

        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && state.rounds_completed.is_multiple_of(config.checkpoint_every) {
                write_checkpoint(state, data, config, &dir.join(format!("round_{:04}", state.rounds_completed)))?;
            }
        }

        if let Some(prev) = prev_total {
            let change = (prev - total).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if change < config.convergence_tol {
                state.converged = true;
                break;
            }
        }
        prev_total = Some(total);
    }
    Ok(())
}

/// Label codes of the training rows as a code DB (ids are row indices).
pub fn label_code_db<T: Scalar>(state: &TrainState<T>, labels: &LabelMatrix) -> Result<PackedCodeDB> {
    let ids = (0..state.label_codes.rows() as u64).collect();
    PackedCodeDB::from_codes(&state.label_codes, labels.clone(), ids)
}

/// Writes the three model files, the label code dump and a config echo.
pub fn write_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    data: &DatasetBundle<T>,
    config: &TrainConfig,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    state.labnet.save(dir.join("labnet.dsibm"))?;
    state.imgnet.save(dir.join("imgnet.dsibm"))?;
    state.txtnet.save(dir.join("txtnet.dsibm"))?;
    label_code_db(state, &data.y)?.save(dir.join("label_codes.dsibc"))?;
    let echo = serde_json::json!({
        "rounds_completed": state.rounds_completed,
        "config": config,
    });
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&echo)?)?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};

    fn small_data() -> DatasetBundle<f64> {
        generate_synthetic(&SynthSpec {
            class_count: 3,
            samples_per_class: 12,
            d1: 6,
            d2: 5,
            label_dim: 3,
            noise_sigma: 0.1,
            multilabel_rate: 0.2,
            seed: 4,
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            code_bits: 8,
            batch_size: 10,
            outer_rounds: 3,
            convergence_tol: 0.0,
            lr_img: 1e-2,
            lr_txt: 1e-2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn specs(d: &DatasetBundle<f64>, c: &TrainConfig) -> EncoderSpecs {
        EncoderSpecs::uniform(d.x1.cols(), d.x2.cols(), d.y.cols(), vec![8], c.code_bits, 1)
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.beta, c.gamma, c.eta, c.batch_size), (0.1, 1.0, 1.0, 128));
        assert!((c.lr_img - 3.1622776601683795e-5).abs() < 1e-18);
        assert!((c.lr_txt - 3.1622776601683794e-4).abs() < 1e-17);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { code_bits: 4, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr_lab: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"code_bits": 32}"#).is_ok());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alpha": 1.0}"#).is_err());
    }

    #[test]
    fn batch_stream_covers_epoch_and_folds_singletons() {
        assert_eq!(BatchStream::batches_per_epoch(21, 10), 2);
        assert_eq!(BatchStream::batches_per_epoch(22, 10), 3);
        assert_eq!(BatchStream::batches_per_epoch(5, 10), 1);
        let mut s = BatchStream::new(21, 10, 3);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let d = small_data();
        let c = TrainConfig { outer_rounds: 0, ..small_config() };
        let s = train(&d, &specs(&d, &c), &c).unwrap();
        assert_eq!(s.rounds_completed, 0);
        assert!(s.history.is_empty());
        assert_eq!(s.labnet, Mlp::init(&specs(&d, &c).lab).unwrap());
        assert_eq!(s.imgnet, Mlp::init(&specs(&d, &c).img).unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let d = small_data();
        let c = small_config();
        let a = train(&d, &specs(&d, &c), &c).unwrap();
        let b = train(&d, &specs(&d, &c), &c).unwrap();
        assert_eq!(a.label_codes, b.label_codes);
        assert_eq!(a.imgnet, b.imgnet);
        assert_eq!(a.txtnet, b.txtnet);
        assert_eq!(a.history, b.history);
        assert!(a.label_codes.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn refresh_is_idempotent_and_matches_sign() {
        let d = small_data();
        let c = small_config();
        let mut s = train(&d, &specs(&d, &c), &c).unwrap();
        let before = s.label_codes.clone();
        refresh_label_codes(&mut s).unwrap();
        assert_eq!(s.label_codes, before);
        let direct = binarize(&s.labnet.forward(&d.y.to_matrix()).unwrap());
        assert_eq!(s.label_codes, direct);
    }

    #[test]
    fn zero_labnet_refreshes_to_all_plus_one() {
        let d = small_data();
        let c = TrainConfig { outer_rounds: 0, ..small_config() };
        let mut sp = specs(&d, &c);
        sp.lab.init_scale = 0.0;
        let mut s = train(&d, &sp, &c).unwrap();
        refresh_label_codes(&mut s).unwrap();
        assert!(s.label_codes.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn phases_touch_only_their_network() {
        let d = small_data();
        let base = TrainConfig { outer_rounds: 1, ..small_config() };
        let sp = specs(&d, &base);
        let init = train(&d, &sp, &TrainConfig { outer_rounds: 0, ..base.clone() }).unwrap();
        let only_img = TrainConfig { iters_lab: Some(0), iters_txt: Some(0), ..base.clone() };
        let s = train(&d, &sp, &only_img).unwrap();
        assert_ne!(s.imgnet, init.imgnet);
        assert_eq!(s.txtnet, init.txtnet);
        assert_eq!(s.labnet, init.labnet);
        let only_lab = TrainConfig { iters_img: Some(0), iters_txt: Some(0), ..base };
        let s = train(&d, &sp, &only_lab).unwrap();
        assert_ne!(s.labnet, init.labnet);
        assert_eq!(s.imgnet, init.imgnet);
        assert_eq!(s.txtnet, init.txtnet);
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let d = small_data();
        let c = small_config();
        let mut sp = specs(&d, &c);
        sp.img.input_dim += 1;
        assert!(train(&d, &sp, &c).is_err());
        let sp = EncoderSpecs::uniform(6, 5, 3, vec![8], 16, 1);
        assert!(train(&d, &sp, &c).is_err());
    }

    #[test]
    fn divergence_is_reported_with_snapshot() {
        let d = small_data();
        let c = TrainConfig { optimizer: OptimizerKind::Sgd, lr_lab: 1e300, outer_rounds: 2, ..small_config() };
        let dir = tempfile::tempdir().unwrap();
        let r = train_with_checkpoints(&d, &specs(&d, &c), &c, Some(dir.path()));
        assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
        assert!(dir.path().join("diverged.json").exists());
    }

    #[test]
    fn checkpoints_are_written() {
        let d = small_data();
        let c = TrainConfig { outer_rounds: 2, checkpoint_every: 1, ..small_config() };
        let dir = tempfile::tempdir().unwrap();
        let s = train_with_checkpoints(&d, &specs(&d, &c), &c, Some(dir.path())).unwrap();
        let ck = dir.path().join("round_0002");
        for f in ["labnet.dsibm", "imgnet.dsibm", "txtnet.dsibm", "label_codes.dsibc", "config.json"] {
            assert!(ck.join(f).exists(), "{f}");
        }
        assert_eq!(Mlp::<f64>::load(ck.join("imgnet.dsibm")).unwrap(), s.imgnet);
        let db = PackedCodeDB::load(ck.join("label_codes.dsibc")).unwrap();
        assert_eq!(db.to_signs::<f64>(), s.label_codes);
    }
}
