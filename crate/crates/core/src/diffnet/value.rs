use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::mlp::Mlp;
use super::params::ParamVector;
use crate::error::{Error, Result};

/// State-value baseline `V(s, g)` with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    mlp: Mlp,
    params: ParamVector,
}

impl ValueNet {
    pub fn new<R: Rng>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mlp = Mlp::new(sizes)?;
        let params = ParamVector::new(mlp.layout(), mlp.init_params(rng, 1.0))?;
        Ok(Self { mlp, params })
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let mlp = Mlp::from_layout(params.layout())?;
        if mlp.output_dim() != 1 || &mlp.layout() != params.layout() {
            return Err(Error::Checkpoint("unexpected value-network layout".into()));
        }
        Ok(Self { mlp, params })
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::Shape("parameter layout differs from value network".into()));
        }
        Ok(Self {
            mlp: self.mlp.clone(),
            params,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn values(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let acts = self.mlp.forward(self.params.values(), inputs)?;
        Ok(acts.output().column(0).to_vec())
    }

    /// Weighted squared error `sum_i weight_i (V(x_i) - target_i)^2` and its gradient.
    pub fn weighted_sq_error(
        &self,
        inputs: ArrayView2<f64>,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(f64, ParamVector)> {
        let acts = self.mlp.forward(self.params.values(), inputs)?;
        let out = acts.output();
        let mut loss = 0.0;
        let mut d_out = Array2::zeros((out.nrows(), 1));
        for i in 0..out.nrows() {
            let r = out[[i, 0]] - targets[i];
            loss += weights[i] * r * r;
            d_out[[i, 0]] = 2.0 * weights[i] * r;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("critic loss".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        self.mlp
            .backward(self.params.values(), &acts, d_out, &mut grad);
        Ok((loss, self.params.with_values(grad)))
    }
}
