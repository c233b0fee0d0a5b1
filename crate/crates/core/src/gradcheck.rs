//! Verification harness: the expand/fold adjointness identity and
//! end-to-end finite-difference checks of the network gradient with every
//! `sign` replaced by the smooth surrogate `(A/2) erf(x / sigma)`, whose
//! derivative is exactly the Gaussian used in training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{SignFn, SignSurrogate};
use crate::circulant::{CirculantSpec, LearnedFilter};
use crate::layers::{softmax_xent, CenterLoss, Mode};
use crate::model::{Network, Topology};
use crate::tensor::{Shape4, Tensor4};
use crate::Result;

/// Dot product accumulated with Neumaier compensation.
pub fn compensated_dot(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    compensated_sum(a.into_iter().zip(b).map(|(x, y)| x * y))
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(CheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Uniform on `[-1, 1]` restricted to multiples of `2^-20`. Products and
/// sums of a few hundred such values are exact in `f64`, which separates
/// the index logic under test from rounding.
pub fn dyadic_uniform(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-(1i64 << 20)..=(1i64 << 20)) as f64 / (1u64 << 20) as f64
}

/// `<expand_cif(w), G> == <w, fold_gradient(G)>` on random `w`, `G`.
pub fn adjointness_check(spec: &CirculantSpec, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = spec.plane_len();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = LearnedFilter::new(spec.filter_side(), (0..len).map(|_| dyadic_uniform(&mut rng)).collect())?;
        let grads: Vec<Vec<f64>> = (0..spec.k())
            .map(|_| (0..len).map(|_| dyadic_uniform(&mut rng)).collect())
            .collect();
        let cif = spec.expand_cif(&w)?;
        let lhs = compensated_dot(
            cif.sub_filters.iter().flatten().copied(),
            grads.iter().flatten().copied(),
        );
        let folded = spec.fold_gradient(&grads)?;
        let rhs = compensated_dot(w.weights.iter().copied(), folded.iter().copied());
        worst = worst.max(relative_error(lhs, rhs, 1e-300));
    }
    Ok(CheckResult {
        name: format!("adjointness K={}", spec.k()),
        checked: trials,
        max_rel_error: worst,
        tolerance: 1e-12,
    })
}

/// A network and batch for the end-to-end finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheck {
    pub k: usize,
    pub stages: Vec<usize>,
    pub input_side: usize,
    pub batch: usize,
    /// Adds the center loss (with random centers) to the objective.
    pub center_loss: bool,
    /// Coordinates to probe; `None` checks every parameter.
    pub max_coordinates: Option<usize>,
    /// Uses a fold whose inverse permutation is wrong (negative control).
    pub corrupt_fold: bool,
    pub step: f64,
    pub seed: u64,
}

impl NetworkCheck {
    /// A network of under 5k parameters.
    pub fn small(k: usize) -> Self {
        Self {
            k,
            stages: vec![3, 6],
            input_side: 12,
            batch: 3,
            center_loss: false,
            max_coordinates: None,
            corrupt_fold: false,
            step: 1e-5,
            seed: 17 + k as u64,
        }
    }

    /// The LeNet 5-10-20-40 backbone at 28x28, probed at sampled coordinates.
    /// The last stage is 1x1, so its batch norm sees only the batch; four
    /// samples keep it away from the two-sample case where every normalized
    /// value is +-1.
    pub fn full(k: usize) -> Self {
        Self {
            stages: vec![5, 10, 20, 40],
            input_side: 28,
            batch: 4,
            max_coordinates: Some(400),
            ..Self::small(k)
        }
    }

    /// Trainable parameters of the checked network.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.build()?.0.parameter_count())
    }

    fn build(&self) -> Result<(Network, Tensor4, Vec<usize>, CenterLoss)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let topology = Topology {
            input_side: self.input_side,
            ..Topology::lenet(self.k, &self.stages)
        };
        let mut net = Network::new(topology, SignFn::Smooth(SignSurrogate::default()))?;
        net.init(&mut rng);
        for s in &mut net.stages {
            if let Some(bn) = &mut s.bn {
                bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
                bn.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            }
        }
        if self.corrupt_fold {
            net.set_spec(CirculantSpec::new(self.k, 3)?.with_corrupted_inverse())?;
        }
        let shape = Shape4::new(self.batch, 1, self.input_side, self.input_side)?;
        let images = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let labels = (0..self.batch).map(|i| i % 10).collect();
        let dim = net.topology().feature_dim()?;
        let mut center = CenterLoss::new(10, dim, if self.center_loss { 0.5 } else { 0.0 }, 0.5)?;
        center.centers.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0));
        Ok((net, images, labels, center))
    }

    /// Runs the check: analytic gradient by back-propagation against
    /// central differences of the same loss.
    pub fn run(&self) -> Result<CheckResult> {
        let (mut net, images, labels, center) = self.build()?;
        let n = labels.len() as f64;
        let loss = |net: &mut Network| -> Result<(f64, Tensor4, Tensor4)> {
            let out = net.forward(&images, Mode::Train, None::<&mut ChaCha8Rng>)?;
            let (l, d_logits) = softmax_xent(&out.logits, &labels)?;
            let c = center.compute(&out.features, &labels)?;
            Ok((l + c.loss / n, d_logits, c.feature_grad.scale(1.0 / n)))
        };
        net.zero_grad();
        let (_, d_logits, d_features) = loss(&mut net)?;
        net.backward(&d_logits, self.center_loss.then_some(&d_features))?;
        let analytic = flat(&mut net, |_, g| g.to_vec());
        let total = analytic.len();
        let coords: Vec<usize> = match self.max_coordinates {
            Some(m) if m < total => {
                let mut picked = sample(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed), total, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..total).collect(),
        };
        let h = self.step;
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = get_param(&mut net, i);
            let mut at = |offset: f64| -> Result<f64> {
                set_param(&mut net, i, orig + offset);
                loss(&mut net).map(|r| r.0)
            };
            // fourth-order central difference
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            set_param(&mut net, i, orig);
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            worst = worst.max(relative_error(fd, analytic[i], 1e-6));
        }
        let mut name = format!("network K={} stages={:?} params={total}", self.k, self.stages);
        if self.center_loss {
            name.push_str(" +center");
        }
        if self.corrupt_fold {
            name.push_str(" corrupted-fold");
        }
        Ok(CheckResult {
            name,
            checked: coords.len(),
            max_rel_error: worst,
            tolerance: 1e-4,
        })
    }
}

fn flat(net: &mut Network, f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit_params(|_, p, g| out.extend(f(p, g)));
    out
}

fn with_param(net: &mut Network, index: usize, mut f: impl FnMut(&mut f64)) {
    let mut offset = 0;
    net.visit_params(|_, p, _| {
        if index >= offset && index < offset + p.len() {
            f(&mut p[index - offset]);
        }
        offset += p.len();
    });
}

fn get_param(net: &mut Network, index: usize) -> f64 {
    let mut v = 0.0;
    with_param(net, index, |p| v = *p);
    v
}

fn set_param(net: &mut Network, index: usize, value: f64) {
    with_param(net, index, |p| *p = value);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSize {
    Small,
    Full,
}

/// Adjointness and network checks for every supported `K`, plus one
/// center-loss variant. With `corrupt_fold` every network check uses the
/// corrupted inverse and is expected to fail.
pub fn run_suite(size: SuiteSize, corrupt_fold: bool) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for k in crate::circulant::SUPPORTED_ORIENTATIONS {
        let spec = CirculantSpec::new(k, 3)?;
        let spec = if corrupt_fold { spec.with_corrupted_inverse() } else { spec };
        report.checks.push(adjointness_check(&spec, 1000, 7 + k as u64)?);
    }
    let base = |k| match size {
        SuiteSize::Small => NetworkCheck::small(k),
        SuiteSize::Full => NetworkCheck::full(k),
    };
    for k in crate::circulant::SUPPORTED_ORIENTATIONS {
        report.checks.push(NetworkCheck { corrupt_fold, ..base(k) }.run()?);
    }
    report.checks.push(
        NetworkCheck {
            center_loss: true,
            corrupt_fold,
            ..base(4)
        }
        .run()?,
    );
    Ok(report)
}
