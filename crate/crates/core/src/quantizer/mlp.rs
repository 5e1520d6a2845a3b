use rand::Rng;

use crate::error::{Error, Result};

/// Fully connected network with ReLU between hidden layers and a linear
/// output. Parameters live in one flat vector: for each layer the row-major
/// `out x in` weight followed by the `out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        if params.len() != param_count(dims) {
            return Err(Error::invalid(format!(
                "MLP {dims:?} needs {} parameters, got {}",
                param_count(dims),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("MLP parameters must be finite"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid MLP layer dims {dims:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("checked at construction")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(weight, bias)` slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = param_count(&self.dims[..=l]);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut out: Vec<f64> = w
                .chunks_exact(self.dims[l])
                .zip(b)
                .map(|(row, bi)| crate::linalg::dot(row, &h) + bi)
                .collect();
            if l != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let z: Vec<f64> = w
                .chunks_exact(self.dims[l])
                .zip(b)
                .map(|(row, bi)| crate::linalg::dot(row, &h) + bi)
                .collect();
            let next = if l != last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        MlpCache { inputs, pre }
    }

    /// Accumulates parameter gradients into `grad` (same layout as
    /// [`Mlp::params`]) and returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut g = grad_out.to_vec();
        let last = self.num_layers() - 1;
        for l in (0..self.num_layers()).rev() {
            if l != last {
                for (gi, z) in g.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let (i_dim, o_dim) = (self.dims[l], self.dims[l + 1]);
            let off = param_count(&self.dims[..=l]);
            let input = &cache.inputs[l];
            let (gw, gb) = grad[off..off + i_dim * o_dim + o_dim].split_at_mut(i_dim * o_dim);
            for o in 0..o_dim {
                gb[o] += g[o];
                let row = &mut gw[o * i_dim..(o + 1) * i_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += g[o] * x;
                }
            }
            let (w, _) = self.layer(l);
            let mut g_in = vec![0.0; i_dim];
            for o in 0..o_dim {
                let row = &w[o * i_dim..(o + 1) * i_dim];
                for (gi, wv) in g_in.iter_mut().zip(row) {
                    *gi += g[o] * wv;
                }
            }
            g = g_in;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_only_between_hidden_layers() {
        // 1 -> 1 -> 1 with weights chosen so the hidden unit is negative
        let mlp = Mlp::from_params(&[1, 1, 1], vec![-1.0, 0.0, 2.0, -3.0]).unwrap();
        assert_eq!(mlp.forward(&[1.0]), vec![-3.0]);
        let single = Mlp::from_params(&[1, 1], vec![-1.0, 0.0]).unwrap();
        assert_eq!(single.forward(&[1.0]), vec![-1.0]);
    }

    #[test]
    fn cached_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[4, 5, 3, 2], &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 1.1];
        assert_eq!(mlp.forward_cached(&x).output(), mlp.forward(&x).as_slice());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let x = [0.5, -1.0, 0.25];
        // loss = sum of outputs weighted by c
        let c = [1.5, -0.7];
        let loss = |m: &Mlp| crate::linalg::dot(&m.forward(&x), &c);
        let cache = mlp.forward_cached(&x);
        let mut grad = vec![0.0; mlp.params().len()];
        let g_in = mlp.backward(&cache, &c, &mut grad);
        let h = 1e-5;
        for i in 0..grad.len() {
            let orig = mlp.params()[i];
            mlp.params_mut()[i] = orig + h;
            let up = loss(&mlp);
            mlp.params_mut()[i] = orig - h;
            let down = loss(&mlp);
            mlp.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (crate::linalg::dot(&mlp.forward(&xp), &c) - crate::linalg::dot(&mlp.forward(&xm), &c)) / (2.0 * h);
            assert!((fd - g_in[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::from_params(&[2], vec![]).is_err());
        assert!(Mlp::from_params(&[2, 1], vec![0.0; 2]).is_err());
        assert!(Mlp::from_params(&[2, 0], vec![]).is_err());
    }
}
