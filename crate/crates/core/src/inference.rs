//! 1-bit inference model.
//!
//! Only the sign bits of the learned filters `W` are kept; the `K` rotated
//! copies are regenerated at load time (rotation is a permutation, so it
//! commutes with `sign`). Every stage after the first binarizes its input
//! and runs the XNOR/popcount convolution, the first stage consumes real
//! pixels through the float path. Batch norm and the classifier stay real.
//! Predictions are identical to [`Network`] in eval mode.

use alloc::format;
use alloc::vec::Vec;

use crate::binarize::{sign, xnor_popcount_conv, ConvGeometry, PackedBitTensor, SignFn};
use crate::circulant::CirculantSpec;
use crate::layers::{BatchNorm, CBConvLayer, Linear, MaxPool2x2, Mode, Relu};
use crate::model::{Network, Topology};
use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PackedModel {
    topology: Topology,
    pub input_mean: f64,
    pub input_std: f64,
    /// Sign bits of `W` per stage, shape `(out_maps, in_maps, H, H)`.
    pub filters: Vec<PackedBitTensor>,
    pub batch_norms: Vec<Option<BatchNorm>>,
    pub fc: Linear,
    first: CBConvLayer,
    kernels: Vec<PackedBitTensor>,
}

impl PackedModel {
    pub fn from_network(net: &Network) -> Result<Self> {
        let filters = net
            .stages
            .iter()
            .map(|s| {
                let c = &s.conv;
                let side = c.spec().filter_side();
                let shape = Shape4::new(c.out_maps(), c.in_maps(), side, side)?;
                Ok(PackedBitTensor::pack_signs(&Tensor4::from_vec_unchecked(shape, c.weights().to_vec())?))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch_norms = net.stages.iter().map(|s| s.bn.clone()).collect();
        Self::new(
            net.topology().clone(),
            net.input_mean,
            net.input_std,
            filters,
            batch_norms,
            net.fc.clone(),
        )
    }

    pub fn new(
        topology: Topology,
        input_mean: f64,
        input_std: f64,
        filters: Vec<PackedBitTensor>,
        batch_norms: Vec<Option<BatchNorm>>,
        fc: Linear,
    ) -> Result<Self> {
        topology.validate()?;
        let spec = CirculantSpec::new(topology.k, topology.filter_side)?;
        let k = topology.k;
        if filters.len() != topology.stages.len() || batch_norms.len() != topology.stages.len() {
            return Err(Error::Topology(format!(
                "{} stages, got {} filter banks and {} batch norms",
                topology.stages.len(),
                filters.len(),
                batch_norms.len()
            )));
        }
        let mut in_maps = 1;
        let mut first = None;
        let mut kernels = Vec::with_capacity(filters.len());
        for (i, (&maps, bank)) in topology.stages.iter().zip(&filters).enumerate() {
            let side = topology.filter_side;
            if bank.shape().dims() != [maps, in_maps, side, side] {
                return Err(Error::Topology(format!(
                    "stage {i} filter bank has shape {:?}, expected {:?}",
                    bank.shape().dims(),
                    [maps, in_maps, side, side]
                )));
            }
            match (&batch_norms[i], topology.batch_norm) {
                (Some(bn), true) if bn.channels() == maps * k && bn.tracked => {}
                (None, false) => {}
                _ => {
                    return Err(Error::Topology(format!(
                        "stage {i} batch norm is missing, untrained or has the wrong width"
                    )))
                }
            }
            let mut conv = CBConvLayer::new(spec.clone(), in_maps, maps, 1, side / 2, i > 0, SignFn::default())?;
            conv.weights_mut().copy_from_slice(&bank.unpack().into_vec());
            if i == 0 {
                first = Some(conv);
            } else {
                kernels.push(PackedBitTensor::pack(&conv.binarized_kernel())?);
            }
            in_maps = maps;
        }
        if fc.inputs != topology.feature_dim()? || fc.outputs != topology.classes {
            return Err(Error::Topology(format!(
                "classifier is {}x{}, expected {}x{}",
                fc.outputs,
                fc.inputs,
                topology.classes,
                topology.feature_dim()?
            )));
        }
        Ok(Self {
            first: first.ok_or_else(|| Error::Topology("no stages".into()))?,
            topology,
            input_mean,
            input_std,
            filters,
            batch_norms,
            fc,
            kernels,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Bytes of packed convolution sign bits.
    pub fn conv_payload_bytes(&self) -> usize {
        self.filters.iter().map(|f| f.len().div_ceil(8)).sum()
    }

    pub fn conv_weight_count(&self) -> usize {
        self.filters.iter().map(PackedBitTensor::len).sum()
    }

    /// Storage of the same filters as 32-bit floats over the packed payload.
    pub fn compression_ratio(&self) -> f64 {
        (4 * self.conv_weight_count()) as f64 / self.conv_payload_bytes() as f64
    }

    fn post_conv(&mut self, stage: usize, x: &Tensor4) -> Result<Tensor4> {
        let x = MaxPool2x2::new().forward(x)?;
        let x = Relu::new().forward(&x);
        match &mut self.batch_norms[stage] {
            Some(bn) => bn.forward(&x, Mode::Eval),
            None => Ok(x),
        }
    }

    /// Logits for `(N, 1, S, S)` images.
    pub fn logits(&mut self, images: &Tensor4) -> Result<Tensor4> {
        let s = images.shape();
        let side = self.topology.input_side;
        if s.c != 1 || s.h != side || s.w != side {
            return Err(Error::Geometry(format!(
                "model expects (N, 1, {side}, {side}) images, got {:?}",
                s.dims()
            )));
        }
        let k = self.topology.k;
        let mut prepared = Tensor4::zeros(Shape4::new(s.n, k, side, side)?);
        let inv = 1.0 / self.input_std;
        for n in 0..s.n {
            for c in 0..k {
                for (o, &v) in prepared.plane_mut(n, c).iter_mut().zip(images.plane(n, 0)) {
                    *o = (v - self.input_mean) * inv;
                }
            }
        }
        let mut x = self.first.forward(&prepared)?;
        x = self.post_conv(0, &x)?;
        let geometry = ConvGeometry {
            stride: 1,
            pad: self.topology.filter_side / 2,
        };
        for stage in 1..self.topology.stages.len() {
            let bits = PackedBitTensor::pack_signs(&x);
            x = xnor_popcount_conv(&bits, &self.kernels[stage - 1], geometry)?;
            x = self.post_conv(stage, &x)?;
        }
        self.fc.forward(&x)
    }

    pub fn predict(&mut self, images: &Tensor4) -> Result<Vec<usize>> {
        Ok(Network::argmax(&self.logits(images)?))
    }
}

/// Sign bits of a real filter bank, `sign(0) = +1`.
pub fn sign_bits(weights: &[f64], shape: Shape4) -> Result<PackedBitTensor> {
    PackedBitTensor::pack(&Tensor4::from_vec(shape, weights.iter().map(|&w| sign(w)).collect())?)
}
