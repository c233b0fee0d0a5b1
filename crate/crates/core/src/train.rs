//! The epoch loop: shuffling, mini-batch SGD, the center-loss fine-tuning
//! phase, divergence guard and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::binarize::{SignFn, SignSurrogate};
use crate::data::LabeledImageSet;
use crate::layers::{softmax_xent, CenterLoss, Mode};
use crate::model::{Network, Topology};
use crate::optim::{LrSchedule, Sgd};
use crate::rng::{keyed_rng, DOMAIN_DROPOUT, DOMAIN_INIT, DOMAIN_SHUFFLE};
use crate::tensor::Tensor4;
use crate::{Error, Result};

/// Surrogate used for the gradient of `sign`. Only `Gaussian` is
/// implemented; the others are accepted names that fail validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Gaussian,
    Clip,
    Poly,
}

impl GradientMode {
    pub fn name(self) -> &'static str {
        match self {
            GradientMode::Gaussian => "gaussian",
            GradientMode::Clip => "clip",
            GradientMode::Poly => "poly",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(GradientMode::Gaussian),
            "clip" => Some(GradientMode::Clip),
            "poly" => Some(GradientMode::Poly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub stages: Vec<usize>,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays; 0 keeps the rate constant.
    pub lr_decay_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Softmax-only epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub center_lambda: f64,
    pub center_alpha: f64,
    /// Fine-tuning epochs with the center loss added, run after `epochs`.
    pub center_epochs: usize,
    pub gradient_mode: GradientMode,
    pub surrogate_amplitude: f64,
    pub surrogate_sigma: f64,
    pub batch_norm: bool,
    pub dropout: f64,
    /// Zero-pad 28x28 images to 32x32 before the first layer.
    pub pad_to_32: bool,
    /// Training samples used to re-estimate batch-norm statistics after
    /// every epoch; 0 keeps the exponential running average.
    pub bn_recalibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = SignSurrogate::default();
        Self {
            k: 4,
            stages: vec![5, 10, 20, 40],
            lr0: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_period: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 64,
            seed: 1,
            center_lambda: 0.003,
            center_alpha: 0.5,
            center_epochs: 0,
            gradient_mode: GradientMode::Gaussian,
            surrogate_amplitude: s.amplitude,
            surrogate_sigma: s.sigma,
            batch_norm: true,
            dropout: 0.0,
            pad_to_32: false,
            bn_recalibration: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs + self.center_epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor)));
        }
        if self.gradient_mode != GradientMode::Gaussian {
            return Err(Error::Config(format!(
                "gradient_mode {} is reserved and not implemented",
                self.gradient_mode.name()
            )));
        }
        SignSurrogate::new(self.surrogate_amplitude, self.surrogate_sigma)?;
        CenterLoss::new(10, 1, self.center_lambda, self.center_alpha)?;
        self.topology(10).validate()
    }

    pub fn input_side(&self) -> usize {
        if self.pad_to_32 {
            32
        } else {
            28
        }
    }

    pub fn topology(&self, classes: usize) -> Topology {
        Topology {
            classes,
            batch_norm: self.batch_norm,
            dropout: self.dropout,
            input_side: self.input_side(),
            ..Topology::lenet(self.k, &self.stages)
        }
    }

    pub fn sign_fn(&self) -> Result<SignFn> {
        Ok(SignFn::Gaussian(SignSurrogate::new(self.surrogate_amplitude, self.surrogate_sigma)?))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            decay_factor: self.lr_decay_factor,
            decay_period: self.lr_decay_period,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.center_epochs
    }

    /// Pads a 28x28 set when `pad_to_32` is on.
    pub fn prepare_set(&self, set: &LabeledImageSet) -> Result<LabeledImageSet> {
        if set.side() == self.input_side() {
            Ok(set.clone())
        } else {
            set.padded(self.input_side())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Percent misclassified.
    pub fn error_rate(&self) -> f64 {
        100.0 * (1.0 - self.accuracy())
    }
}

/// Evaluates in eval mode (running batch-norm statistics, no dropout).
pub fn evaluate(net: &mut Network, set: &LabeledImageSet, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.topology().classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut predictions = Vec::with_capacity(set.len());
    let mut loss = 0.0;
    let batch_size = batch_size.max(1);
    let mut start = 0;
    while start < set.len() {
        let idx: Vec<usize> = (start..(start + batch_size).min(set.len())).collect();
        let (images, labels) = set.batch(&idx)?;
        let out = net.forward(&images, Mode::Eval, None::<&mut rand_chacha::ChaCha8Rng>)?;
        let (l, _) = softmax_xent(&out.logits, &labels)?;
        loss += l * idx.len() as f64;
        for (p, &y) in Network::argmax(&out.logits).into_iter().zip(&labels) {
            confusion[y][p] += 1;
            predictions.push(p);
        }
        start += batch_size;
    }
    let correct = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        loss: loss / set.len() as f64,
        correct,
        total: set.len(),
        confusion,
        predictions,
    })
}

/// Everything that evolves during training. Together with the config this
/// is sufficient to resume bit-identically: every random draw is keyed by
/// `(seed, epoch, batch)`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: Sgd,
    pub center: CenterLoss,
    /// Next epoch to run (zero-based).
    pub epoch: usize,
    /// Loss of the first training batch, the divergence guard's reference.
    pub initial_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh model initialized from `(seed, DOMAIN_INIT)`; input
    /// normalization is fitted on `train`.
    pub fn new(config: TrainConfig, train: &LabeledImageSet) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let topology = config.topology(10);
        let mut network = Network::new(topology, config.sign_fn()?)?;
        network.init(&mut keyed_rng(config.seed, DOMAIN_INIT, 0));
        let (mean, std) = config.prepare_set(train)?.pixel_stats();
        network.input_mean = mean;
        network.input_std = if std > 0.0 { std } else { 1.0 };
        let center = CenterLoss::new(10, network.topology().feature_dim()?, config.center_lambda, config.center_alpha)?;
        Ok(Self {
            state: TrainState {
                network,
                optimizer: Sgd::new(config.momentum, config.weight_decay),
                center,
                epoch: 0,
                initial_loss: None,
            },
            config,
        })
    }

    pub fn from_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if state.network.topology() != &config.topology(state.network.topology().classes) {
            return Err(Error::Topology("checkpoint topology does not match the configuration".into()));
        }
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.state.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.state.network
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.total_epochs()
    }

    /// Batch index lists for `epoch`, from a permutation keyed by
    /// `(seed, epoch)`. A trailing batch of one sample is dropped since
    /// batch statistics are undefined for it.
    pub fn epoch_batches(&self, epoch: usize, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(self.config.seed, DOMAIN_SHUFFLE, epoch as u64));
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    /// One SGD step on a batch. Returns the batch loss and the number of
    /// correct training-mode predictions.
    pub fn step(&mut self, images: &Tensor4, labels: &[usize], lr: f64, stream: u64, with_center: bool) -> Result<(f64, usize)> {
        let st = &mut self.state;
        st.network.zero_grad();
        let mut rng = keyed_rng(self.config.seed, DOMAIN_DROPOUT, stream);
        let out = st.network.forward(images, Mode::Train, Some(&mut rng))?;
        let (mut loss, d_logits) = softmax_xent(&out.logits, labels)?;
        let n = labels.len() as f64;
        let mut center_update = None;
        let d_features = if with_center {
            let c = st.center.compute(&out.features, labels)?;
            loss += c.loss / n;
            center_update = Some(c.center_update);
            Some(c.feature_grad.scale(1.0 / n))
        } else {
            None
        };
        let correct = Network::argmax(&out.logits).iter().zip(labels).filter(|(p, y)| p == y).count();
        st.network.backward(&d_logits, d_features.as_ref())?;
        st.optimizer.step(&mut st.network, lr)?;
        if let Some(u) = center_update {
            st.center.apply_update(&u);
        }
        Ok((loss, correct))
    }

    /// Runs the next epoch over `train` and returns its training metrics.
    pub fn run_epoch(&mut self, train: &LabeledImageSet) -> Result<EpochMetrics> {
        let epoch = self.state.epoch;
        let lr = self.config.schedule().lr(epoch);
        let with_center = epoch >= self.config.epochs;
        let batches = self.epoch_batches(epoch, train.len());
        if batches.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (images, labels) = train.batch(idx)?;
            let stream = ((epoch as u64) << 32) | b as u64;
            let (loss, c) = self.step(&images, &labels, lr, stream, with_center)?;
            let reference = *self.state.initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > 1e3 * reference {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss * idx.len() as f64;
            correct += c;
            seen += idx.len();
        }
        self.recalibrate(train)?;
        self.state.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            lr,
        })
    }

    /// Re-estimates batch-norm statistics on the first `bn_recalibration`
    /// training samples, in batches of 500.
    pub fn recalibrate(&mut self, train: &LabeledImageSet) -> Result<()> {
        let n = self.config.bn_recalibration.min(train.len());
        if n < 2 || !self.config.batch_norm {
            return Ok(());
        }
        let batches = (0..n)
            .step_by(500)
            .map(|start| (start..(start + 500).min(n)).collect::<Vec<_>>())
            .filter(|idx| idx.len() >= 2)
            .map(|idx| train.batch(&idx).map(|(images, _)| images))
            .collect::<Result<Vec<_>>>()?;
        self.state.network.recalibrate_batch_norm(&batches)
    }

    pub fn evaluate(&mut self, set: &LabeledImageSet) -> Result<Evaluation> {
        evaluate(&mut self.state.network, set, 256)
    }

    /// Runs all remaining epochs, reporting train and (optionally) test
    /// metrics after each one.
    pub fn fit(
        &mut self,
        train: &LabeledImageSet,
        test: Option<&LabeledImageSet>,
        mut on_epoch: impl FnMut(&Self, &[EpochMetrics]) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let m = self.run_epoch(train)?;
            let mut rows = vec![m];
            if let Some(test) = test {
                let e = self.evaluate(test)?;
                rows.push(EpochMetrics {
                    epoch: m.epoch,
                    split: Split::Test,
                    loss: e.loss,
                    accuracy: e.accuracy(),
                    lr: m.lr,
                });
            }
            on_epoch(self, &rows)?;
        }
        Ok(())
    }
}
