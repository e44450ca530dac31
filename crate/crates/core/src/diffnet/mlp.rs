//! Fully connected tanh network with a linear output layer, evaluated on
//! row-major batches. Parameters live in a caller-owned flat slice so the
//! same architecture can be evaluated at any point of parameter space.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::Layout;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Per-layer activations of one forward pass. `layers[0]` is the input,
/// the last entry is the (linear) output.
#[derive(Debug, Clone)]
pub struct Activations {
    layers: Vec<Array2<f64>>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("at least input and output")
    }

    pub fn batch_len(&self) -> usize {
        self.layers[0].nrows()
    }
}

impl Mlp {
    /// `sizes` = [input, hidden..., output].
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_len(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::new();
        for (i, w) in self.sizes.windows(2).enumerate() {
            layout.push(format!("l{i}.weight"), vec![w[0], w[1]]);
            layout.push(format!("l{i}.bias"), vec![w[1]]);
        }
        layout
    }

    /// Recovers the architecture from a layout written by [`Mlp::layout`].
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let mut sizes = Vec::new();
        let mut i = 0;
        while let Some(shape) = layout.shape(&format!("l{i}.weight")) {
            if shape.len() != 2 {
                return Err(Error::Checkpoint(format!("l{i}.weight is not a matrix")));
            }
            if sizes.is_empty() {
                sizes.push(shape[0]);
            } else if *sizes.last().unwrap() != shape[0] {
                return Err(Error::Checkpoint(format!("l{i}.weight input size mismatch")));
            }
            sizes.push(shape[1]);
            i += 1;
        }
        Mlp::new(sizes).map_err(|_| Error::Checkpoint("no dense layers in layout".into()))
    }

    // (weight offset, bias offset) per layer
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let wo = off;
                let bo = off + w[0] * w[1];
                off = bo + w[1];
                (wo, bo)
            })
            .collect()
    }

    /// Orthogonal initialization; `final_gain` scales the output layer.
    pub fn init_params<R: Rng>(&self, rng: &mut R, final_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_len()];
        let offsets = self.offsets();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let gain = if l + 1 == self.n_layers() {
                final_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let m = orthogonal(rng, w[0], w[1]);
            let (wo, _) = offsets[l];
            for (dst, v) in params[wo..wo + w[0] * w[1]].iter_mut().zip(m) {
                *dst = gain * v;
            }
        }
        params
    }

    pub fn forward(&self, params: &[f64], input: ArrayView2<f64>) -> Result<Activations> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let n = input.nrows();
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_owned());
        for (l, &(wo, bo)) in self.offsets().iter().enumerate() {
            let (d_in, d_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = ArrayView2::from_shape((d_in, d_out), &params[wo..wo + d_in * d_out]).unwrap();
            let b = &params[bo..bo + d_out];
            let mut z = Array2::from_shape_fn((n, d_out), |(_, j)| b[j]);
            general_mat_mul(1.0, &layers[l], &w, 1.0, &mut z);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z);
        }
        if layers.last().unwrap().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("network output".into()));
        }
        Ok(Activations { layers })
    }

    /// Accumulates `sum_i d_out[i] . d output_i / d params` into `grad`.
    pub fn backward(&self, params: &[f64], acts: &Activations, d_out: Array2<f64>, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_len());
        let offsets = self.offsets();
        let mut delta = d_out;
        for l in (0..self.n_layers()).rev() {
            let (d_in, d_o) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = offsets[l];
            let input = &acts.layers[l];
            {
                let mut gw =
                    ArrayViewMut2::from_shape((d_in, d_o), &mut grad[wo..wo + d_in * d_o]).unwrap();
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut gw);
            }
            for (g, s) in grad[bo..bo + d_o].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g += s;
            }
            if l > 0 {
                let w = ArrayView2::from_shape((d_in, d_o), &params[wo..wo + d_in * d_o]).unwrap();
                let mut next = Array2::zeros((delta.nrows(), d_in));
                general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut next);
                ndarray::Zip::from(&mut next)
                    .and(input)
                    .for_each(|d, &a| *d *= 1.0 - a * a);
                delta = next;
            }
        }
    }

    /// Directional derivative of the output along `tangent` (forward mode).
    pub fn jvp(&self, params: &[f64], acts: &Activations, tangent: &[f64]) -> Array2<f64> {
        debug_assert_eq!(tangent.len(), self.param_len());
        let n = acts.batch_len();
        let offsets = self.offsets();
        // tangent of the current layer input; zero for the network input
        let mut t_in: Option<Array2<f64>> = None;
        for (l, &(wo, bo)) in offsets.iter().enumerate() {
            let (d_in, d_o) = (self.sizes[l], self.sizes[l + 1]);
            let w = ArrayView2::from_shape((d_in, d_o), &params[wo..wo + d_in * d_o]).unwrap();
            let dw = ArrayView2::from_shape((d_in, d_o), &tangent[wo..wo + d_in * d_o]).unwrap();
            let db = &tangent[bo..bo + d_o];
            let mut dz = Array2::from_shape_fn((n, d_o), |(_, j)| db[j]);
            general_mat_mul(1.0, &acts.layers[l], &dw, 1.0, &mut dz);
            if let Some(t) = &t_in {
                general_mat_mul(1.0, t, &w, 1.0, &mut dz);
            }
            if l + 1 < self.n_layers() {
                ndarray::Zip::from(&mut dz)
                    .and(&acts.layers[l + 1])
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            t_in = Some(dz);
        }
        t_in.unwrap()
    }
}

// Entries of a `rows x cols` matrix with orthonormal rows or columns, row-major.
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    let (k, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    // k orthonormal vectors of length `len` via modified Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net_and_params(seed: u64) -> (Mlp, Vec<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(vec![3, 5, 4, 2]).unwrap();
        let params: Vec<f64> = (0..mlp.param_len()).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let x = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        (mlp, params, x)
    }

    #[test]
    fn layout_round_trips_architecture() {
        let mlp = Mlp::new(vec![16, 64, 64, 8]).unwrap();
        assert_eq!(mlp.layout().len(), mlp.param_len());
        assert_eq!(Mlp::from_layout(&mlp.layout()).unwrap(), mlp);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let (mlp, params, _) = net_and_params(0);
        let x = Array2::zeros((2, 4));
        assert!(matches!(mlp.forward(&params, x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = orthogonal(&mut rng, 6, 3);
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..6).map(|r| m[r * 3 + a] * m[r * 3 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let (mlp, params, x) = net_and_params(1);
        let acts = mlp.forward(&params, x.view()).unwrap();
        // loss = sum of c * output with fixed random c
        let c = Array2::from_shape_fn((6, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut grad = vec![0.0; mlp.param_len()];
        mlp.backward(&params, &acts, c.clone(), &mut grad);
        let loss = |p: &[f64]| -> f64 {
            let out = mlp.forward(p, x.view()).unwrap();
            (out.output() * &c).sum()
        };
        for i in 0..params.len() {
            let h = 1e-6;
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let dn = loss(&p);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let (mlp, params, x) = net_and_params(2);
        let acts = mlp.forward(&params, x.view()).unwrap();
        let v: Vec<f64> = (0..params.len()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let jv = mlp.jvp(&params, &acts, &v);
        let h = 1e-6;
        let plus: Vec<f64> = params.iter().zip(&v).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = params.iter().zip(&v).map(|(p, d)| p - h * d).collect();
        let fd = (mlp.forward(&plus, x.view()).unwrap().output()
            - mlp.forward(&minus, x.view()).unwrap().output())
            / (2.0 * h);
        for (a, b) in jv.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()));
        }
    }
}
