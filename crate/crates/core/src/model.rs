//! The LeNet backbone built from CBConv stages.
//!
//! Each stage is `CBConv -> max-pool 2x2 -> ReLU -> batch norm`, and the
//! flattened output of the last stage (all orientation channels) feeds a
//! full-precision classifier. The raw image is never binarized: it is
//! normalized and replicated `K` times to form the first feature map, and
//! only the first layer's weights are binarized. Every later stage
//! binarizes both its input and its weights.
//!
//! Batch norm sits at the end of a stage so that the `sign` of the next
//! stage sees a learnable threshold of the pooled responses rather than
//! non-negative ReLU outputs, which would all binarize to `+1`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::binarize::SignFn;
use crate::circulant::CirculantSpec;
use crate::layers::{BatchNorm, CBConvLayer, Dropout, Linear, MaxPool2x2, Mode, Relu};
use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

/// Architecture of a backbone; everything needed to rebuild the layer
/// stack from parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub k: usize,
    pub filter_side: usize,
    /// Feature maps per stage, e.g. `[5, 10, 20, 40]`.
    pub stages: Vec<usize>,
    /// Square input side in pixels.
    pub input_side: usize,
    pub classes: usize,
    pub batch_norm: bool,
    /// Dropout rate on the classifier input.
    pub dropout: f64,
}

impl Topology {
    pub fn lenet(k: usize, stages: &[usize]) -> Self {
        Self {
            k,
            filter_side: 3,
            stages: stages.to_vec(),
            input_side: 28,
            classes: 10,
            batch_norm: true,
            dropout: 0.0,
        }
    }

    /// Spatial side after every stage.
    pub fn stage_sides(&self) -> Result<Vec<usize>> {
        let mut side = self.input_side;
        let mut sides = Vec::with_capacity(self.stages.len());
        for (i, _) in self.stages.iter().enumerate() {
            // CBConv keeps the side (odd filter, pad = side / 2, stride 1)
            if side < 2 {
                return Err(Error::Topology(format!(
                    "stage {i} input is {side}x{side}, too small for 2x2 pooling"
                )));
            }
            side /= 2;
            sides.push(side);
        }
        Ok(sides)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let side = *self.stage_sides()?.last().ok_or_else(|| Error::Topology("no stages".into()))?;
        Ok(self.stages.last().copied().unwrap_or(0) * self.k * side * side)
    }

    /// Trainable convolution parameters: one `H x H` filter per
    /// `(output map, input map)` pair, independent of `K`.
    pub fn conv_parameter_count(&self) -> usize {
        let mut prev = 1;
        let mut total = 0;
        for &s in &self.stages {
            total += prev * s * self.filter_side * self.filter_side;
            prev = s;
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        CirculantSpec::new(self.k, self.filter_side)?;
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::Topology(format!("invalid stage widths {:?}", self.stages)));
        }
        if self.classes < 2 {
            return Err(Error::Topology(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Topology(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.stage_sides()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: CBConvLayer,
    pub pool: MaxPool2x2,
    pub relu: Relu,
    pub bn: Option<BatchNorm>,
}

/// Which parameter group a slice belongs to. Weight decay applies to
/// convolution and classifier weights only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }
}

/// Logits plus the penultimate features they were computed from.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor4,
    pub features: Tensor4,
}

#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    pub stages: Vec<Stage>,
    pub dropout: Dropout,
    pub fc: Linear,
    /// Input normalization `(x - mean) / std`, fitted on the training split.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Network {
    /// Builds an untrained network with all parameters zero.
    pub fn new(topology: Topology, sign: SignFn) -> Result<Self> {
        topology.validate()?;
        let spec = CirculantSpec::new(topology.k, topology.filter_side)?;
        let mut stages = Vec::with_capacity(topology.stages.len());
        let mut in_maps = 1;
        for (i, &maps) in topology.stages.iter().enumerate() {
            let conv = CBConvLayer::new(spec.clone(), in_maps, maps, 1, topology.filter_side / 2, i > 0, sign)?;
            let bn = topology.batch_norm.then(|| BatchNorm::new(maps * topology.k));
            stages.push(Stage {
                conv,
                pool: MaxPool2x2::new(),
                relu: Relu::new(),
                bn,
            });
            in_maps = maps;
        }
        let fc = Linear::new(topology.feature_dim()?, topology.classes);
        Ok(Self {
            dropout: Dropout::new(topology.dropout)?,
            topology,
            stages,
            fc,
            input_mean: 0.0,
            input_std: 1.0,
        })
    }

    /// Random initialization; see [`CBConvLayer::init_uniform`].
    pub fn init(&mut self, rng: &mut impl Rng) {
        for s in &mut self.stages {
            s.conv.init_uniform(rng);
        }
        self.fc.init_uniform(rng);
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_sign_fn(&mut self, sign: SignFn) {
        for s in &mut self.stages {
            s.conv.set_sign_fn(sign);
        }
    }

    /// Swaps the circulant spec of every stage (used by verification hooks).
    pub fn set_spec(&mut self, spec: CirculantSpec) -> Result<()> {
        for s in &mut self.stages {
            s.conv.set_spec(spec.clone())?;
        }
        Ok(())
    }

    /// Normalizes `(N, 1, S, S)` images and replicates them across the `K`
    /// channels of the first feature map.
    pub fn prepare_input(&self, images: &Tensor4) -> Result<Tensor4> {
        let s = images.shape();
        let side = self.topology.input_side;
        if s.c != 1 || s.h != side || s.w != side {
            return Err(Error::Geometry(format!(
                "network expects (N, 1, {side}, {side}) images, got {:?}",
                s.dims()
            )));
        }
        let k = self.topology.k;
        let mut out = Tensor4::zeros(Shape4::new(s.n, k, side, side)?);
        let inv = 1.0 / self.input_std;
        for n in 0..s.n {
            let src = images.plane(n, 0);
            for c in 0..k {
                for (o, &v) in out.plane_mut(n, c).iter_mut().zip(src) {
                    *o = (v - self.input_mean) * inv;
                }
            }
        }
        Ok(out)
    }

    /// Runs the stage stack on prepared input, returning flattened features.
    pub fn forward_features(&mut self, prepared: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut x = prepared.clone();
        for stage in &mut self.stages {
            x = stage.conv.forward(&x)?;
            x = stage.pool.forward(&x)?;
            x = stage.relu.forward(&x);
            if let Some(bn) = &mut stage.bn {
                x = bn.forward(&x, mode)?;
            }
        }
        Ok(x)
    }

    /// Full forward pass. `dropout_rng` is used only in training mode.
    pub fn forward<R: Rng>(&mut self, images: &Tensor4, mode: Mode, dropout_rng: Option<&mut R>) -> Result<ForwardOutput> {
        let prepared = self.prepare_input(images)?;
        let features = self.forward_features(&prepared, mode)?;
        let fc_in = match (mode, dropout_rng) {
            (Mode::Train, Some(rng)) => self.dropout.forward_train(&features, rng),
            _ => self.dropout.forward_eval(&features),
        };
        let logits = self.fc.forward(&fc_in)?;
        Ok(ForwardOutput { logits, features })
    }

    /// Back-propagates the logit gradient, plus an optional extra gradient
    /// on the penultimate features, accumulating all parameter gradients.
    pub fn backward(&mut self, d_logits: &Tensor4, d_features: Option<&Tensor4>) -> Result<()> {
        let d_fc_in = self.fc.backward(d_logits)?;
        let mut g = self.dropout.backward(&d_fc_in);
        if let Some(extra) = d_features {
            g.add_assign(extra)?;
        }
        for stage in self.stages.iter_mut().rev() {
            if let Some(bn) = &mut stage.bn {
                g = bn.backward(&g)?;
            }
            g = stage.relu.backward(&g)?;
            g = stage.pool.backward(&g)?;
            g = stage.conv.backward(&g)?;
        }
        Ok(())
    }

    /// Replaces the running batch-norm statistics by the plain average of
    /// the batch statistics over `batches` (training-mode forward passes,
    /// parameters untouched). The exponential average lags behind weights
    /// whose signs keep flipping; this gives eval mode the statistics of
    /// the final weights.
    pub fn recalibrate_batch_norm(&mut self, batches: &[Tensor4]) -> Result<()> {
        let saved: Vec<f64> = self.stages.iter().filter_map(|s| s.bn.as_ref().map(|b| b.momentum)).collect();
        for (i, images) in batches.iter().enumerate() {
            for bn in self.stages.iter_mut().filter_map(|s| s.bn.as_mut()) {
                bn.momentum = 1.0 / (i + 1) as f64;
            }
            let prepared = self.prepare_input(images)?;
            self.forward_features(&prepared, Mode::Train)?;
        }
        for (bn, m) in self.stages.iter_mut().filter_map(|s| s.bn.as_mut()).zip(saved) {
            bn.momentum = m;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.stages {
            s.conv.zero_grad();
            if let Some(bn) = &mut s.bn {
                bn.zero_grad();
            }
        }
        self.fc.zero_grad();
    }

    /// Visits every trainable parameter slice with its gradient, in a fixed
    /// order.
    pub fn visit_params(&mut self, mut f: impl FnMut(ParamKind, &mut [f64], &[f64])) {
        for s in &mut self.stages {
            let (w, g) = s.conv.params_grads_mut();
            f(ParamKind::ConvWeight, w, g);
            if let Some(bn) = &mut s.bn {
                f(ParamKind::BnGamma, &mut bn.gamma, &bn.grad_gamma);
                f(ParamKind::BnBeta, &mut bn.beta, &bn.grad_beta);
            }
        }
        f(ParamKind::FcWeight, &mut self.fc.weight, &self.fc.grad_weight);
        f(ParamKind::FcBias, &mut self.fc.bias, &self.fc.grad_bias);
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p, _| n += p.len());
        n
    }

    /// Predicted class per sample from logits; ties go to the lowest class.
    pub fn argmax(logits: &Tensor4) -> Vec<usize> {
        let classes = logits.shape().sample_len();
        (0..logits.shape().n)
            .map(|i| {
                let row = &logits.data()[i * classes..][..classes];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lenet_geometry() {
        let t = Topology::lenet(4, &[5, 10, 20, 40]);
        assert_eq!(t.stage_sides().unwrap(), vec![14, 7, 3, 1]);
        assert_eq!(t.feature_dim().unwrap(), 160);
        assert_eq!(t.conv_parameter_count(), 9 * (5 + 50 + 200 + 800));
        let t32 = Topology { input_side: 32, ..t.clone() };
        assert_eq!(t32.feature_dim().unwrap(), 640);
        let too_small = Topology { input_side: 8, ..t };
        assert!(too_small.validate().is_err());
    }

    #[test]
    fn conv_parameters_do_not_depend_on_k() {
        let mut counts = Vec::new();
        for k in [1, 2, 4, 8] {
            let mut net = Network::new(Topology::lenet(k, &[5, 10, 20, 40]), SignFn::default()).unwrap();
            let mut conv = 0;
            net.visit_params(|kind, p, _| {
                if kind == ParamKind::ConvWeight {
                    conv += p.len()
                }
            });
            counts.push(conv);
        }
        assert!(counts.iter().all(|&c| c == 9495));
    }

    #[test]
    fn recalibration_averages_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Network::new(Topology::lenet(2, &[2, 3]), SignFn::default()).unwrap();
        net.init(&mut rng);
        let s = Shape4::new(4, 1, 28, 28).unwrap();
        let batches: Vec<Tensor4> = (0..3)
            .map(|_| Tensor4::from_vec(s, (0..s.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        // oracle: mean over batches of the first stage's batch mean
        let mut expected = vec![0.0; 4];
        for b in &batches {
            let mut probe = net.clone();
            let x = probe.prepare_input(b).unwrap();
            let y = probe.stages[0].conv.forward(&x).unwrap();
            let y = probe.stages[0].pool.forward(&y).unwrap();
            let y = probe.stages[0].relu.forward(&y);
            let count = (y.shape().n * y.shape().plane_len()) as f64;
            for (c, e) in expected.iter_mut().enumerate() {
                *e += (0..4).map(|n| y.plane(n, c).iter().sum::<f64>()).sum::<f64>() / count / 3.0;
            }
        }
        net.recalibrate_batch_norm(&batches).unwrap();
        let bn = net.stages[0].bn.as_ref().unwrap();
        for (a, e) in bn.running_mean.iter().zip(&expected) {
            approx::assert_relative_eq!(a, e, max_relative = 1e-12);
        }
        assert_eq!(bn.momentum, 0.1);
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(Topology::lenet(4, &[5, 10, 20, 40]), SignFn::default()).unwrap();
        net.init(&mut rng);
        let images = Tensor4::filled(Shape4::new(3, 1, 28, 28).unwrap(), 0.5);
        let out = net.forward(&images, Mode::Train, Some(&mut rng)).unwrap();
        assert_eq!(out.logits.shape().dims(), [3, 10, 1, 1]);
        assert_eq!(out.features.shape().dims(), [3, 160, 1, 1]);
        let wrong = Tensor4::zeros(Shape4::new(1, 1, 32, 32).unwrap());
        assert!(net.forward(&wrong, Mode::Eval, None::<&mut ChaCha8Rng>).is_err());
    }
}
