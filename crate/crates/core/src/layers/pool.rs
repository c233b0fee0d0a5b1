use alloc::vec::Vec;

use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

/// 2x2 max-pooling with stride 2. Odd trailing rows and columns are
/// dropped. Ties go to the first maximum in row-major order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Shape4, Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(input: Shape4) -> Result<Shape4> {
        if input.h < 2 || input.w < 2 {
            return Err(Error::Geometry(alloc::format!(
                "max-pool needs at least 2x2 input, got {}x{}",
                input.h,
                input.w
            )));
        }
        Shape4::new(input.n, input.c, input.h / 2, input.w / 2)
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let is = x.shape();
        let os = Self::output_shape(is)?;
        let mut out = Tensor4::zeros(os);
        let mut argmax = Vec::with_capacity(os.len());
        let data = x.data();
        let od = out.data_mut();
        let mut o = 0;
        for n in 0..is.n {
            for c in 0..is.c {
                for y in 0..os.h {
                    for xx in 0..os.w {
                        let mut best = is.flatten(n, c, 2 * y, 2 * xx);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = is.flatten(n, c, 2 * y + dy, 2 * xx + dx);
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                        od[o] = data[best];
                        argmax.push(best);
                        o += 1;
                    }
                }
            }
        }
        self.cache = Some((is, argmax));
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        let (is, argmax) = self.cache.as_ref().ok_or(Error::MissingCache)?;
        if upstream.len() != argmax.len() {
            return Err(Error::LengthMismatch {
                expected: argmax.len(),
                got: upstream.len(),
            });
        }
        let mut dx = Tensor4::zeros(*is);
        let d = dx.data_mut();
        for (&i, &g) in argmax.iter().zip(upstream.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}
