//! Training loop: pair sampling, code assignment with straight-through
//! gradients, Adam updates, EMA codebook tracking and per-epoch telemetry.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codebook::{covariance_loss_on_tape, usage_stats, DEFAULT_KAPPA};
use crate::error::{DmmError, Result};
use crate::etf::cross_entropy_on_tape;
use crate::losses::{recon_loss_on_tape, total_loss_on_tape, zreg_on_tape, LossTerms, LossWeights};
use crate::ndcore::{Tape, Tensor};
use crate::networks::{derive_seed, straight_through, Dims, DmmModel};
use crate::optim::Adam;
use crate::synthdata::DmmDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: Dims,
    pub weights: LossWeights,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, rate)` pairs; strictly increasing, starting at 0.
    pub lr_schedule: Vec<(usize, f32)>,
    pub seed: u64,
    pub kappa: f32,
    /// Freeze the codes at their initial value (no gradient, no EMA).
    pub fixed_codebook: bool,
    /// Train the probability head instead of keeping the fixed frame.
    pub learnable_classifier: bool,
    /// Minimize `ln(BCE)` per sample instead of the BCE itself.
    pub log_recon: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults. The commitment term sums over the code
    /// dimension, so β is the usual 0.25 divided by m to keep its pull per
    /// coordinate at the conventional strength.
    fn default() -> Self {
        let dims = Dims::default();
        let weights = LossWeights {
            beta: 0.25 / dims.code_dim as f32,
            ..LossWeights::default()
        };
        Self {
            dims,
            weights,
            epochs: 300,
            warmup_epochs: 20,
            batch_size: 32,
            lr_schedule: vec![(0, 1e-3), (150, 3e-4), (250, 1e-4)],
            seed: 0,
            kappa: DEFAULT_KAPPA,
            fixed_codebook: false,
            learnable_classifier: false,
            log_recon: false,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the original full-scale runs: 256 codes in
    /// `R^256`, batch 32, β = 0.25, γ = 0.01, 20 warm-up epochs and the
    /// four-step learning-rate schedule.
    pub fn paper_preset() -> Self {
        Self {
            dims: Dims {
                code_dim: 256,
                codes: 256,
                ..Dims::default()
            },
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.25,
                gamma: 0.01,
            },
            epochs: 1500,
            warmup_epochs: 20,
            batch_size: 32,
            lr_schedule: vec![(0, 1e-4), (300, 5e-5), (900, 1e-5), (1200, 5e-6)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.weights.validate()?;
        if self.dims.codes > self.dims.code_dim {
            return Err(DmmError::Config(format!(
                "the fixed frame needs codes ({}) <= code_dim ({})",
                self.dims.codes, self.dims.code_dim
            )));
        }
        if self.batch_size == 0 {
            return Err(DmmError::Config("batch_size must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(DmmError::Config(format!("kappa {} outside (0, 1)", self.kappa)));
        }
        validate_schedule(&self.lr_schedule)
    }

    pub fn is_warmup(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }
}

fn validate_schedule(schedule: &[(usize, f32)]) -> Result<()> {
    match schedule.first() {
        None => return Err(DmmError::Config("empty learning-rate schedule".into())),
        Some(&(e, _)) if e != 0 => {
            return Err(DmmError::Config(format!("learning-rate schedule starts at epoch {e}, not 0")))
        }
        _ => {}
    }
    if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(DmmError::Config("learning-rate schedule epochs must strictly increase".into()));
    }
    if let Some(&(e, r)) = schedule.iter().find(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
        return Err(DmmError::Config(format!("invalid learning rate {r} at epoch {e}")));
    }
    Ok(())
}

/// Rate of the last schedule entry starting at or before `epoch`.
pub fn lr_at(schedule: &[(usize, f32)], epoch: usize) -> Result<f32> {
    validate_schedule(schedule)?;
    Ok(schedule
        .iter()
        .take_while(|(start, _)| *start <= epoch)
        .last()
        .map(|&(_, r)| r)
        .expect("schedule starts at epoch 0"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub total: f32,
    pub recon: f32,
    pub ce: f32,
    pub zreg: f32,
    pub cov: f32,
    pub active_code_count: usize,
    pub mean_abs_pairwise_inner_product: f64,
    pub learning_rate: f32,
}

impl EpochTelemetry {
    pub const CSV_HEADER: &'static str =
        "epoch,total,recon,ce,zreg,cov,active_code_count,mean_abs_pairwise_inner_product,learning_rate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.total,
            self.recon,
            self.ce,
            self.zreg,
            self.cov,
            self.active_code_count,
            self.mean_abs_pairwise_inner_product,
            self.learning_rate
        )
    }
}

/// Appends telemetry rows to a CSV file, writing the header when the file
/// is new or empty.
pub struct TelemetryWriter {
    out: BufWriter<File>,
}

impl TelemetryWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| DmmError::io(path, e))?;
        let mut w = Self { out: BufWriter::new(file) };
        w.line(EpochTelemetry::CSV_HEADER, path)?;
        Ok(w)
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| DmmError::io(path, e))?;
        let fresh = file.metadata().map_err(|e| DmmError::io(path, e))?.len() == 0;
        let mut w = Self { out: BufWriter::new(file) };
        if fresh {
            w.line(EpochTelemetry::CSV_HEADER, path)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str, path: &Path) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| DmmError::io(path, e))
    }

    pub fn write(&mut self, row: &EpochTelemetry) -> Result<()> {
        writeln!(self.out, "{}", row.csv_row())
            .and_then(|_| self.out.flush())
            .map_err(|e| DmmError::io("telemetry", e))
    }
}

/// State dump attached to a non-finite loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f32,
    pub terms: LossTerms<f32>,
    pub batch_codes: Vec<usize>,
    pub max_abs_param: f32,
    pub codebook_counts: Vec<f32>,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "  learning rate: {}", self.learning_rate)?;
        writeln!(
            f,
            "  terms: recon {} ce {} zreg {} cov {}",
            self.terms.recon, self.terms.ce, self.terms.zreg, self.terms.cov
        )?;
        writeln!(f, "  batch codes: {:?}", self.batch_codes)?;
        writeln!(f, "  max |param|: {}", self.max_abs_param)?;
        write!(f, "  codebook counts: {:?}", self.codebook_counts)
    }
}

/// Dataset flattened for batch assembly.
pub struct TrainData {
    height: usize,
    width: usize,
    inputs: Vec<Vec<f32>>,
    labels: Vec<Vec<Vec<f32>>>,
    pairs: Vec<(usize, usize)>,
}

impl TrainData {
    pub fn new(ds: &DmmDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(DmmError::Config("training dataset is empty".into()));
        }
        let pairs = ds
            .entries()
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.labels.len()).map(move |k| (i, k)))
            .collect();
        Ok(Self {
            height: ds.height(),
            width: ds.width(),
            inputs: ds.entries().iter().map(|e| e.input.data().to_vec()).collect(),
            labels: ds
                .entries()
                .iter()
                .map(|e| e.labels.iter().map(|l| l.as_f32()).collect())
                .collect(),
            pairs,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `(inputs, labels)` as `B × H·W` tensors for `(entry, label)` pairs.
    pub fn batch(&self, pairs: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let p = self.height * self.width;
        let mut x = Vec::with_capacity(pairs.len() * p);
        let mut y = Vec::with_capacity(pairs.len() * p);
        for &(i, k) in pairs {
            let label = self
                .labels
                .get(i)
                .and_then(|ls| ls.get(k))
                .ok_or_else(|| DmmError::Contract(format!("pair ({i}, {k}) not in dataset")))?;
            x.extend_from_slice(&self.inputs[i]);
            y.extend_from_slice(label);
        }
        Ok((Tensor::matrix(pairs.len(), p, x)?, Tensor::matrix(pairs.len(), p, y)?))
    }
}

/// Loss terms and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub terms: LossTerms<f32>,
    pub total: f32,
    /// Code assigned to each row.
    pub indices: Vec<usize>,
    /// Pair-encoder features, one row per sample.
    pub features: Vec<Vec<f32>>,
    /// One buffer per tensor of [`DmmModel::network_tensors`].
    pub network: Vec<Vec<f32>>,
    /// Present only with a learnable classifier.
    pub classifier: Option<Vec<f32>>,
    /// Present unless the codebook is fixed.
    pub codes: Option<Vec<f32>>,
}

/// Forward and backward pass over one batch without touching any state.
pub fn batch_gradients(
    model: &DmmModel,
    config: &TrainConfig,
    x: &Tensor,
    y: &Tensor,
    warmup: bool,
) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, config.learnable_classifier, !config.fixed_codebook);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = bound.encode_pair(&mut tape, xv, yv)?;
    let (q, indices) = straight_through(&mut tape, z, &model.codebook)?;
    let (l, h) = bound.encode_input(&mut tape, xv)?;
    let y_hat = bound.generate(&mut tape, l, q)?;

    let recon = recon_loss_on_tape(&mut tape, y_hat, y, config.log_recon)?;
    let ce = cross_entropy_on_tape(&mut tape, h, bound.classifier, &indices)?;
    let selected = tape.value(q).clone();
    let zreg = zreg_on_tape(&mut tape, z, &selected)?;
    let cov = covariance_loss_on_tape(&mut tape, bound.codes, model.codebook.tau())?;
    let vars = LossTerms { recon, ce, zreg, cov };
    let total = total_loss_on_tape(&mut tape, vars, &config.weights, warmup)?;
    let terms = LossTerms {
        recon: tape.value(recon).item(),
        ce: tape.value(ce).item(),
        zreg: tape.value(zreg).item(),
        cov: tape.value(cov).item(),
    };
    let total_value = tape.value(total).item();
    let rows = tape.value(z).shape()[0];
    let features = (0..rows).map(|r| tape.value(z).row(r).to_vec()).collect();

    let mut out = BatchGradients {
        terms,
        total: total_value,
        indices,
        features,
        network: Vec::new(),
        classifier: None,
        codes: None,
    };
    if !total_value.is_finite() {
        return Ok(out);
    }
    tape.backward(total)?;
    let grad_of = |tape: &Tape, v| {
        tape.grad(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    };
    out.network = bound.network_vars().into_iter().map(|v| grad_of(&tape, v)).collect();
    if config.learnable_classifier {
        out.classifier = Some(grad_of(&tape, bound.classifier));
    }
    if !config.fixed_codebook {
        out.codes = Some(grad_of(&tape, bound.codes));
    }
    Ok(out)
}

/// Optimizer slots: every network tensor, then the classifier, then the
/// codes.
pub(crate) fn optimizer_sizes(model: &DmmModel) -> Vec<usize> {
    let mut sizes: Vec<usize> = model.network_tensors().iter().map(|t| t.numel()).collect();
    sizes.push(model.classifier.numel());
    sizes.push(model.codebook.codes().numel());
    sizes
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTelemetry {
    pub terms: LossTerms<f32>,
    pub total: f32,
    pub indices: Vec<usize>,
}

/// Owns the training state and advances it one step or epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    state: Checkpoint,
    steps_in_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DmmModel::new(config.dims.clone(), config.kappa, config.seed)?;
        let optimizer = Adam::new(&optimizer_sizes(&model));
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4));
        Ok(Self::from_checkpoint(Checkpoint {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
        }))
    }

    pub fn from_checkpoint(state: Checkpoint) -> Self {
        Self { state, steps_in_epoch: 0 }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn model(&self) -> &DmmModel {
        &self.state.model
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Uniform draws with replacement over `(entry, label)` pairs.
    pub fn sample_batch(&mut self, data: &TrainData) -> Vec<(usize, usize)> {
        let n = data.pair_count();
        (0..self.state.config.batch_size)
            .map(|_| data.pairs[self.state.rng.random_range(0..n)])
            .collect()
    }

    /// One optimizer step on the given pairs.
    pub fn step(&mut self, data: &TrainData, pairs: &[(usize, usize)], lr: f32, warmup: bool) -> Result<StepTelemetry> {
        let (x, y) = data.batch(pairs)?;
        let grads = batch_gradients(&self.state.model, &self.state.config, &x, &y, warmup)?;
        let finite = grads.total.is_finite()
            && grads
                .network
                .iter()
                .chain(&grads.classifier)
                .chain(&grads.codes)
                .all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(self.diagnostics(&grads, lr));
        }

        let Checkpoint {
            model,
            optimizer,
            config,
            ..
        } = &mut self.state;
        optimizer.begin_step();
        let mut slot = 0;
        for (t, g) in model.network_tensors_mut().into_iter().zip(&grads.network) {
            optimizer.update(slot, lr, t.data_mut(), g)?;
            slot += 1;
        }
        if let Some(g) = &grads.classifier {
            optimizer.update(slot, lr, model.classifier.data_mut(), g)?;
        }
        slot += 1;
        if let Some(g) = &grads.codes {
            let mut codes = model.codebook.codes().clone();
            optimizer.update(slot, lr, codes.data_mut(), g)?;
            model.codebook.set_codes(codes)?;
        }
        if !config.fixed_codebook {
            let assignments: Vec<(usize, &[f32])> = grads
                .indices
                .iter()
                .zip(&grads.features)
                .map(|(&j, z)| (j, z.as_slice()))
                .collect();
            model.codebook.ema_update(&assignments)?;
        }
        self.steps_in_epoch += 1;
        Ok(StepTelemetry {
            terms: grads.terms,
            total: grads.total,
            indices: grads.indices,
        })
    }

    fn diagnostics(&self, grads: &BatchGradients, lr: f32) -> DmmError {
        let model = &self.state.model;
        let max_abs_param = model
            .network_tensors()
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0f32, |m, v| m.max(v.abs()));
        DmmError::NonFinite(Box::new(Diagnostics {
            epoch: self.state.epoch,
            step: self.steps_in_epoch,
            learning_rate: lr,
            terms: grads.terms,
            batch_codes: grads.indices.clone(),
            max_abs_param,
            codebook_counts: model.codebook.counts().to_vec(),
        }))
    }

    /// Runs `⌈pairs / batch⌉` steps and advances the epoch counter.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochTelemetry> {
        let config = &self.state.config;
        let epoch = self.state.epoch;
        let lr = lr_at(&config.lr_schedule, epoch)?;
        let warmup = config.is_warmup(epoch);
        let steps = data.pair_count().div_ceil(config.batch_size);
        self.steps_in_epoch = 0;

        let mut sums = [0.0f64; 5];
        let mut used = BTreeSet::new();
        for _ in 0..steps {
            let pairs = self.sample_batch(data);
            let s = self.step(data, &pairs, lr, warmup)?;
            for (acc, v) in sums.iter_mut().zip([s.total, s.terms.recon, s.terms.ce, s.terms.zreg, s.terms.cov]) {
                *acc += v as f64;
            }
            used.extend(s.indices);
        }
        let used: Vec<usize> = used.into_iter().collect();
        let (active, mean_ip) = usage_stats(&used, &self.state.model.codebook)?;
        let mean = |k: usize| (sums[k] / steps as f64) as f32;
        self.state.epoch += 1;
        Ok(EpochTelemetry {
            epoch,
            total: mean(0),
            recon: mean(1),
            ce: mean(2),
            zreg: mean(3),
            cov: mean(4),
            active_code_count: active,
            mean_abs_pairwise_inner_product: mean_ip,
            learning_rate: lr,
        })
    }

    /// Runs the remaining epochs, handing each telemetry row to `on_epoch`.
    pub fn run<F>(&mut self, data: &TrainData, mut on_epoch: F) -> Result<Vec<EpochTelemetry>>
    where
        F: FnMut(&Trainer, &EpochTelemetry) -> Result<()>,
    {
        let mut rows = Vec::new();
        while !self.is_finished() {
            let row = self.run_epoch(data)?;
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Trains from scratch and returns the final state with every epoch's
/// telemetry.
pub fn train(config: TrainConfig, dataset: &DmmDataset) -> Result<(Checkpoint, Vec<EpochTelemetry>)> {
    let data = TrainData::new(dataset)?;
    let mut trainer = Trainer::new(config)?;
    let rows = trainer.run(&data, |_, _| Ok(()))?;
    Ok((trainer.into_checkpoint(), rows))
}
