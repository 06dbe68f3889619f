use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Per-head projections of the sparse attention.
///
/// * `u`, `v`: `[N, d, C]`, query and key projections of the logits.
/// * `value`: `[N, d, C]`, the per-head value projection (applied to keys).
/// * `out`: `[N, C, d]`, maps each head's aggregate back to `C` channels.
///
/// Head-stacked, `u`, `v` and `value` read as `C x C` matrices whose row
/// `n * d + e` belongs to head `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub channels: usize,
    pub u: Tensor,
    pub v: Tensor,
    pub value: Tensor,
    pub out: Tensor,
}

impl AttentionParams {
    pub fn new(heads: usize, channels: usize, u: Tensor, v: Tensor, value: Tensor, out: Tensor) -> Result<Self> {
        let p = Self {
            heads,
            channels,
            u,
            v,
            value,
            out,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(heads: usize, channels: usize) -> Result<Self> {
        let d = head_dim(heads, channels)?;
        Self::new(
            heads,
            channels,
            Tensor::zeros(&[heads, d, channels]),
            Tensor::zeros(&[heads, d, channels]),
            Tensor::zeros(&[heads, d, channels]),
            Tensor::zeros(&[heads, channels, d]),
        )
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn random(heads: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = head_dim(heads, channels)?;
        let mut draw = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let u = draw(&[heads, d, channels], channels)?;
        let v = draw(&[heads, d, channels], channels)?;
        let value = draw(&[heads, d, channels], channels)?;
        let out = draw(&[heads, channels, d], d)?;
        Self::new(heads, channels, u, v, value, out)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = head_dim(self.heads, self.channels)?;
        let qkv = [self.heads, d, self.channels];
        for (name, t) in [("u", &self.u), ("v", &self.v), ("value", &self.value)] {
            if t.shape() != qkv {
                return shape_err(format!("{name} has shape {:?}, expected {qkv:?}", t.shape()));
            }
        }
        let o = [self.heads, self.channels, d];
        if self.out.shape() != o {
            return shape_err(format!("out has shape {:?}, expected {o:?}", self.out.shape()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len() + self.value.len() + self.out.len()
    }
}

pub(crate) fn head_dim(heads: usize, channels: usize) -> Result<usize> {
    if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
        return shape_err(format!("{channels} channels not divisible into {heads} heads"));
    }
    Ok(channels / heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_divisibility() {
        let p = AttentionParams::random(2, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.head_dim(), 4);
        assert_eq!(p.u.shape(), &[2, 4, 8]);
        assert_eq!(p.out.shape(), &[2, 8, 4]);
        assert_eq!(p.param_count(), 4 * 64);
        assert!(AttentionParams::zeros(3, 8).is_err());
        let mut bad = p.clone();
        bad.out = Tensor::zeros(&[2, 4, 8]);
        assert!(bad.validate().is_err());
    }
}
