use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{gaussian_log_prob_rows, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// Fully connected tanh network. Tensors alternate weight (in×out) and bias (1×out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub tensors: Vec<Array2<f64>>,
}

/// Gaussian draw orthonormalized along the shorter side, then scaled.
fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let transpose = rows < cols;
    let (n, k) = if transpose { (cols, rows) } else { (rows, cols) };
    // k orthonormal vectors of length n.
    let mut q = Array2::<f64>::zeros((n, k));
    for j in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _pass in 0..2 {
            for p in 0..j {
                let dot: f64 = (0..n).map(|i| v[i] * q[[i, p]]).sum();
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi -= dot * q[[i, p]];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for i in 0..n {
            q[[i, j]] = v[i] / norm;
        }
    }
    let q = q * gain;
    if transpose {
        q.reversed_axes()
    } else {
        q
    }
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], hidden_gain: f64, final_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes.len() - 1;
        let mut tensors = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let gain = if l + 1 == layers { final_gain } else { hidden_gain };
            tensors.push(orthogonal(sizes[l], sizes[l + 1], gain, rng));
            tensors.push(Array2::zeros((1, sizes[l + 1])));
        }
        Mlp { sizes: sizes.to_vec(), tensors }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let tensors = sizes
            .windows(2)
            .flat_map(|w| [Array2::zeros((w[0], w[1])), Array2::zeros((1, w[1]))])
            .collect();
        Mlp { sizes: sizes.to_vec(), tensors }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("network expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    /// Plain forward pass over a batch of rows.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let layers = self.tensors.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            h = h.dot(&self.tensors[2 * l]) + &self.tensors[2 * l + 1];
            if l + 1 < layers {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Record the tensors as parameter leaves starting at `first_slot`.
    pub fn bind(&self, tape: &mut Tape, first_slot: usize) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(first_slot + i, t)).collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let layers = vars.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = tape.linear(h, vars[2 * l], vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Diagonal Gaussian policy with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub trunk: Mlp,
    /// 1×D row, kept inside `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Array2<f64>,
}

/// Tape handles for a policy's parameters.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub trunk: Vec<Var>,
    pub log_std: Var,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(obs_dim: usize, hidden: &[usize], act_dim: usize, init_log_std: f64, rng: &mut R) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim).chain(hidden.iter().copied()).chain([act_dim]).collect();
        let mut p = GaussianPolicy {
            trunk: Mlp::new(&sizes, std::f64::consts::SQRT_2, 0.01, rng),
            log_std: Array2::from_elem((1, act_dim), init_log_std),
        };
        p.clamp_log_std();
        p
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Number of parameter tensors (trunk plus log_std).
    pub fn num_slots(&self) -> usize {
        self.trunk.tensors.len() + 1
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.trunk.tensors.iter().chain(std::iter::once(&self.log_std)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.trunk.tensors.iter_mut().chain(std::iter::once(&mut self.log_std)).collect()
    }

    /// Copy with one parameter entry shifted by `delta` (finite-difference probes).
    pub fn perturbed(&self, slot: usize, row: usize, col: usize, delta: f64) -> Self {
        let mut p = self.clone();
        p.tensors_mut()[slot][[row, col]] += delta;
        p
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.mapv_inplace(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    /// Action means for a batch of observations.
    pub fn forward(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        self.trunk.forward(obs)
    }

    pub fn log_prob(&self, obs: &Array2<f64>, action: &Array2<f64>) -> Result<Array2<f64>> {
        let mean = self.forward(obs)?;
        if action.dim() != mean.dim() {
            return Err(Error::Shape(format!("action batch {:?} vs mean {:?}", action.dim(), mean.dim())));
        }
        Ok(gaussian_log_prob_rows(&mean, &self.log_std, action))
    }

    /// Draw `mean + σ ⊙ ε` for every row; returns the actions and their log densities.
    pub fn sample<R: Rng>(&self, obs: &Array2<f64>, rng: &mut R) -> Result<(Array2<f64>, Array2<f64>)> {
        let mean = self.forward(obs)?;
        let std = self.log_std.mapv(f64::exp);
        let mut action = mean.clone();
        for mut row in action.rows_mut() {
            for (d, a) in row.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *a += std[[0, d]] * eps;
            }
        }
        let lp = gaussian_log_prob_rows(&mean, &self.log_std, &action);
        Ok((action, lp))
    }

    pub fn bind(&self, tape: &mut Tape) -> PolicyVars {
        let trunk = self.trunk.bind(tape, 0);
        let log_std = tape.param(self.trunk.tensors.len(), &self.log_std);
        PolicyVars { trunk, log_std }
    }

    /// Log densities (N×1) of `action` rows, recorded on the tape.
    pub fn log_prob_tape(&self, tape: &mut Tape, vars: &PolicyVars, obs: Array2<f64>, action: Array2<f64>) -> Result<Var> {
        let x = tape.constant(obs);
        let mean = self.trunk.forward_tape(tape, &vars.trunk, x)?;
        tape.gaussian_log_prob(mean, vars.log_std, action)
    }
}

/// State-value network with a scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new<R: Rng>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let sizes: Vec<usize> = std::iter::once(obs_dim).chain(hidden.iter().copied()).chain([1]).collect();
        ValueNet { net: Mlp::new(&sizes, std::f64::consts::SQRT_2, 1.0, rng) }
    }

    pub fn num_slots(&self) -> usize {
        self.net.tensors.len()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.net.tensors.iter_mut().collect()
    }

    pub fn perturbed(&self, slot: usize, row: usize, col: usize, delta: f64) -> Self {
        let mut v = self.clone();
        v.net.tensors[slot][[row, col]] += delta;
        v
    }

    /// Values as an N×1 column.
    pub fn forward(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        self.net.forward(obs)
    }

    pub fn forward_tape(&self, tape: &mut Tape, obs: Array2<f64>) -> Result<Var> {
        let vars = self.net.bind(tape, 0);
        let x = tape.constant(obs);
        self.net.forward_tape(tape, &vars, x)
    }
}

/// Stack equal-length rows into a matrix.
pub fn stack_rows<T: AsRef<[f64]>>(rows: &[T]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_ref()));
    }
    out
}
