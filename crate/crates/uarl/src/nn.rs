//! Minimal feed-forward networks with hand-written backprop, plus Adam.
//!
//! Parameters live in one flat `Vec<f64>` (per layer: weight matrix in
//! row-major `[out][in]` order, then biases). Hidden layers use ReLU, the
//! output layer is linear. The explicit backward pass returns gradients with
//! respect to both parameters and inputs, which the actor update needs to
//! chain critic input-gradients through the policy network.


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded during a batched forward pass, consumed by `backward`.
pub struct ForwardCache {
    /// acts[0] is the input batch; acts[l] the post-activation output of layer l.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer (needed for the ReLU mask).
    zs: Vec<Vec<f64>>,
    n: usize,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Zero-initialized network with the given layer sizes (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// He-initialized network: W ~ N(0, 2/fan_in), b = 0.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut net = Self::zeros(sizes);
        let mut offset = 0;
        for w in net.sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            for p in net.params[offset..offset + fan_in * fan_out].iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * std;
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
    }

    /// Batched forward pass. `x` is `n` rows of `in_dim` values, row-major.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> (Vec<f64>, ForwardCache) {
        assert_eq!(x.len(), n * self.in_dim(), "input size mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());

        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + d_in * d_out];
            let biases = &self.params[offset + d_in * d_out..offset + d_in * d_out + d_out];
            offset += d_in * d_out + d_out;

            let input = &acts[l];
            let mut z = vec![0.0; n * d_out];
            for s in 0..n {
                let row_in = &input[s * d_in..(s + 1) * d_in];
                let row_out = &mut z[s * d_out..(s + 1) * d_out];
                for (o, out) in row_out.iter_mut().enumerate() {
                    let wrow = &weights[o * d_in..(o + 1) * d_in];
                    let mut acc = biases[o];
                    for (wi, xi) in wrow.iter().zip(row_in.iter()) {
                        acc += wi * xi;
                    }
                    *out = acc;
                }
            }
            let last = l == n_layers - 1;
            let a = if last {
                z.clone()
            } else {
                z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
            };
            zs.push(z);
            acts.push(a);
        }

        let out = acts.last().unwrap().clone();
        (out, ForwardCache { acts, zs, n })
    }

    /// Single-sample forward pass without caching.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let (out, _) = self.forward_batch(x, 1);
        out
    }

    /// Backpropagates `grad_out` (n x out_dim) through the cached pass.
    ///
    /// Parameter gradients are accumulated into `grad_params` (callers zero it
    /// when starting a fresh gradient); input gradients, when requested, are
    /// accumulated into the provided buffer of length n x in_dim.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        grad_params: &mut [f64],
        mut grad_inputs: Option<&mut [f64]>,
    ) {
        assert_eq!(grad_params.len(), self.params.len());
        let n = cache.n;
        let n_layers = self.sizes.len() - 1;
        assert_eq!(grad_out.len(), n * self.out_dim());

        // Layer parameter offsets, computed up front so we can walk backwards.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }

        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let d_in = self.sizes[l];
            let d_out = self.sizes[l + 1];
            let off = offsets[l];
            let weights = &self.params[off..off + d_in * d_out];

            // ReLU mask applies to hidden layers only (delta arrives post-mask
            // for the output layer, which is linear).
            if l < n_layers - 1 {
                let z = &cache.zs[l];
                for (d, &zv) in delta.iter_mut().zip(z.iter()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }

            let input = &cache.acts[l];
            {
                let (gw, gb) = grad_params[off..off + d_in * d_out + d_out].split_at_mut(d_in * d_out);
                for s in 0..n {
                    let drow = &delta[s * d_out..(s + 1) * d_out];
                    let xrow = &input[s * d_in..(s + 1) * d_in];
                    for (o, &d) in drow.iter().enumerate() {
                        let gwrow = &mut gw[o * d_in..(o + 1) * d_in];
                        for (g, &xi) in gwrow.iter_mut().zip(xrow.iter()) {
                            *g += d * xi;
                        }
                        gb[o] += d;
                    }
                }
            }

            if l == 0 {
                if let Some(gi) = grad_inputs.as_deref_mut() {
                    assert_eq!(gi.len(), n * d_in);
                    for s in 0..n {
                        let drow = &delta[s * d_out..(s + 1) * d_out];
                        let girow = &mut gi[s * d_in..(s + 1) * d_in];
                        for (o, &d) in drow.iter().enumerate() {
                            let wrow = &weights[o * d_in..(o + 1) * d_in];
                            for (g, &wi) in girow.iter_mut().zip(wrow.iter()) {
                                *g += d * wi;
                            }
                        }
                    }
                }
            } else {
                let mut next = vec![0.0; n * d_in];
                for s in 0..n {
                    let drow = &delta[s * d_out..(s + 1) * d_out];
                    let nrow = &mut next[s * d_in..(s + 1) * d_in];
                    for (o, &d) in drow.iter().enumerate() {
                        let wrow = &weights[o * d_in..(o + 1) * d_in];
                        for (g, &wi) in nrow.iter_mut().zip(wrow.iter()) {
                            *g += d * wi;
                        }
                    }
                }
                delta = next;
            }
        }
    }
}

/// Adam with the usual bias correction. One instance per parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// Central finite differences against the analytic parameter gradient of a
    /// scalar loss L = sum(outputs^2) on a small random batch.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(11, "nn-test", 0);
        let mut net = Mlp::init(&[3, 8, 8, 2], &mut rng);
        let n = 4;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

        let loss = |net: &Mlp| -> f64 {
            let (out, _) = net.forward_batch(&x, n);
            out.iter().map(|v| v * v).sum()
        };

        let (out, cache) = net.forward_batch(&x, n);
        let grad_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut analytic = vec![0.0; net.n_params()];
        net.backward(&cache, &grad_out, &mut analytic, None);

        let h = 1e-6;
        for i in 0..net.n_params() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let lp = loss(&net);
            net.params_mut()[i] = orig - h;
            let lm = loss(&net);
            net.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (analytic[i] - fd).abs();
            let tol = 1e-6 + 1e-4 * analytic[i].abs().max(fd.abs());
            assert!(err <= tol, "param {i}: analytic {} vs fd {}", analytic[i], fd);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = stream(12, "nn-test", 1);
        let net = Mlp::init(&[4, 6, 1], &mut rng);
        let mut x: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();

        let loss = |x: &[f64]| -> f64 {
            let (out, _) = net.forward_batch(x, 2);
            out.iter().sum()
        };

        let (_, cache) = net.forward_batch(&x, 2);
        let grad_out = vec![1.0; 2];
        let mut gp = vec![0.0; net.n_params()];
        let mut gi = vec![0.0; 8];
        net.backward(&cache, &grad_out, &mut gp, Some(&mut gi));

        let h = 1e-6;
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let lp = loss(&x);
            x[i] = orig - h;
            let lm = loss(&x);
            x[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((gi[i] - fd).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::init(&[3, 5, 1], &mut stream(3, "s", 0));
        let b = Mlp::init(&[3, 5, 1], &mut stream(3, "s", 0));
        let c = Mlp::init(&[3, 5, 1], &mut stream(4, "s", 0));
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
