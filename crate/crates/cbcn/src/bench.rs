//! Popcount versus float convolution timings.
//!
//! Every shape runs three paths on the same random `+-1` input and kernel:
//! `direct` (nested loops), `im2col` (im2col + GEMM) and `popcount` (packs
//! the input, then XNOR/popcount against a pre-packed kernel). All three are
//! checked for exact equality before anything is timed.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use cbcn_core::binarize::{xnor_popcount_conv, ConvGeometry, PackedBitTensor};
use cbcn_core::rng::keyed_rng;
use cbcn_core::tensor::{conv2d, conv2d_im2col, Shape4, Tensor4};
use rand::Rng;

use crate::{Error, Result};

pub const HEADER: &str = "shape,path,ms_per_call,checksum";

const BENCH_DOMAIN: u64 = 0x6265_6e63;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub name: &'static str,
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub side: usize,
    pub kernel: usize,
}

impl BenchShape {
    const fn new(name: &'static str, batch: usize, in_channels: usize, out_channels: usize, side: usize, kernel: usize) -> Self {
        Self {
            name,
            batch,
            in_channels,
            out_channels,
            side,
            kernel,
        }
    }

    fn input_shape(&self) -> Result<Shape4> {
        Ok(Shape4::new(self.batch, self.in_channels, self.side, self.side)?)
    }

    fn kernel_shape(&self) -> Result<Shape4> {
        Ok(Shape4::new(self.out_channels, self.in_channels, self.kernel, self.kernel)?)
    }
}

/// Binarized LeNet stages 2 and 4 at K=4 plus wider 64- and 128-channel
/// layers.
pub const PRESET: &[BenchShape] = &[
    BenchShape::new("lenet-s2", 8, 20, 40, 14, 3),
    BenchShape::new("lenet-s4", 8, 80, 160, 3, 3),
    BenchShape::new("c64-3x3", 4, 64, 64, 16, 3),
    BenchShape::new("c128-3x3", 4, 128, 128, 8, 3),
    BenchShape::new("c128-5x5", 2, 128, 128, 8, 5),
];

/// Tiny shapes for smoke tests.
pub const QUICK: &[BenchShape] = &[
    BenchShape::new("tiny-3x3", 1, 3, 4, 6, 3),
    BenchShape::new("tiny-65ch", 1, 65, 2, 4, 3),
];

pub fn shapes(name: &str) -> Result<&'static [BenchShape]> {
    match name {
        "preset" => Ok(PRESET),
        "quick" => Ok(QUICK),
        _ => Err(Error::Config(format!("unknown shape set `{name}`, expected preset or quick"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: String,
    pub path: &'static str,
    pub ms_per_call: f64,
    pub checksum: i64,
}

fn random_signs(shape: Shape4, rng: &mut impl Rng) -> Result<Tensor4> {
    let data = (0..shape.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    Ok(Tensor4::from_vec(shape, data)?)
}

/// Sum of an integer-valued output.
fn checksum(t: &Tensor4) -> i64 {
    t.data().iter().map(|&v| v as i64).sum()
}

/// Mean wall time per call over at least `min_calls` calls and `budget`.
fn time_per_call(budget: Duration, min_calls: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let start = Instant::now();
    let mut calls = 0;
    while calls < min_calls || start.elapsed() < budget {
        f()?;
        calls += 1;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / calls as f64)
}

/// Runs one shape. Fails if the three paths disagree anywhere.
pub fn bench_shape(shape: &BenchShape, seed: u64, budget: Duration) -> Result<Vec<BenchRow>> {
    let mut rng = keyed_rng(seed, BENCH_DOMAIN, 0);
    let input = random_signs(shape.input_shape()?, &mut rng)?;
    let kernel = random_signs(shape.kernel_shape()?, &mut rng)?;
    let pad = shape.kernel / 2;
    let geometry = ConvGeometry { stride: 1, pad };
    let packed_kernel = PackedBitTensor::pack(&kernel)?;

    let direct = conv2d(&input, &kernel, 1, pad, -1.0)?;
    let im2col = conv2d_im2col(&input, &kernel, 1, pad, -1.0)?;
    let popcount = xnor_popcount_conv(&PackedBitTensor::pack(&input)?, &packed_kernel, geometry)?;
    for (path, out) in [("im2col", &im2col), ("popcount", &popcount)] {
        if out.data() != direct.data() {
            return Err(Error::Check(format!("{}: {path} output differs from the direct convolution", shape.name)));
        }
    }
    let sum = checksum(&direct);

    let direct_ms = time_per_call(budget, 2, || conv2d(&input, &kernel, 1, pad, -1.0).map(drop).map_err(Error::from))?;
    let im2col_ms = time_per_call(budget, 2, || {
        conv2d_im2col(&input, &kernel, 1, pad, -1.0).map(drop).map_err(Error::from)
    })?;
    let popcount_ms = time_per_call(budget, 2, || {
        let bits = PackedBitTensor::pack_signs(&input);
        xnor_popcount_conv(&bits, &packed_kernel, geometry).map(drop).map_err(Error::from)
    })?;
    Ok([("direct", direct_ms), ("im2col", im2col_ms), ("popcount", popcount_ms)]
        .into_iter()
        .map(|(path, ms)| BenchRow {
            shape: format!(
                "{}:{}x{}x{}x{}*{}x{}x{}x{}",
                shape.name,
                shape.batch,
                shape.in_channels,
                shape.side,
                shape.side,
                shape.out_channels,
                shape.in_channels,
                shape.kernel,
                shape.kernel
            ),
            path,
            ms_per_call: ms,
            checksum: sum,
        })
        .collect())
}

pub fn format_row(row: &BenchRow) -> String {
    format!("{},{},{:.4},{}", row.shape, row.path, row.ms_per_call, row.checksum)
}

/// CSV for a whole table, header included.
pub fn render(rows: &[BenchRow]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", format_row(row));
    }
    out
}

/// Float time over popcount time for each shape, using the faster float path.
pub fn speedups(rows: &[BenchRow]) -> Vec<(String, f64)> {
    rows.chunks(3)
        .filter_map(|c| {
            let get = |p: &str| c.iter().find(|r| r.path == p).map(|r| r.ms_per_call);
            let float = get("direct")?.min(get("im2col")?);
            Some((c[0].shape.clone(), float / get("popcount")?))
        })
        .collect()
}
