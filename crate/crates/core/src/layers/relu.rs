use crate::tensor::Tensor4;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Tensor4>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.input = Some(x.clone());
        x.map(|v| v.max(0.0))
    }

    pub fn backward(&self, upstream: &Tensor4) -> Result<Tensor4> {
        let x = self.input.as_ref().ok_or(Error::MissingCache)?;
        upstream.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn clamps_negatives() {
        let s = Shape4::new(1, 1, 1, 3).unwrap();
        let mut r = Relu::new();
        let x = Tensor4::from_vec(s, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(r.forward(&x).data(), &[0.0, 0.0, 3.0]);
        let g = r.backward(&Tensor4::filled(s, 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        assert!(Relu::new().backward(&x).is_err());
    }
}
