use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, Var};

/// The learnable contextual vector `z*`, kept inside `[-1, 1]^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding<S> {
    params: ParamSet<S>,
    id: ParamId,
}

impl<S: Real> LatentEmbedding<S> {
    /// Uniform random initialization in `[-1, 1]^dim`.
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::from_values(&values)
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), "latent embedding needs at least one dimension");
        ensure!(values.iter().all(|v| v.is_finite()), "latent embedding values must be finite");
        let mut params = ParamSet::new();
        let id = params.push("z_star", Tensor::from_f64(&[1, values.len()], values)?);
        let mut z = Self { params, id };
        z.clamp();
        Ok(z)
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.id).len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.get(self.id).to_f64()
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Leaf for the `1 x dim` vector on `g`.
    pub fn var(&self, g: &mut Graph<S>) -> Result<Var> {
        g.param(&self.params, self.id)
    }

    /// Projects every component back into `[-1, 1]`.
    pub fn clamp(&mut self) {
        let (lo, hi) = (-S::one(), S::one());
        for v in self.params.get_mut(self.id).data_mut() {
            *v = v.max(lo).min(hi);
        }
    }

    pub fn add_to_checkpoint(&self, ckpt: &mut Checkpoint<S>) {
        ckpt.add_params("latent.", &self.params);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let t = ckpt.get("latent.z_star").ok_or_else(|| Error::Format("checkpoint has no latent.z_star".into()))?;
        Self::from_values(&t.to_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_clamped_into_the_unit_box() {
        let z = LatentEmbedding::<f64>::from_values(&[2.0, -3.0, 0.5]).unwrap();
        assert_eq!(z.values(), vec![1.0, -1.0, 0.5]);
        let r = LatentEmbedding::<f64>::random(16, 9).unwrap();
        assert!(r.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(r.values(), LatentEmbedding::<f64>::random(16, 9).unwrap().values());
    }
}
