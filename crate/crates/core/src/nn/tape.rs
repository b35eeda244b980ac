//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for the parameter leaves.

use std::f64::consts::PI;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::geometry::{log_logistic, logistic};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Parameter leaf bound to a slot of the parameter list, or a constant.
    Leaf(Option<usize>),
    /// `x·W + b` with `b` a row vector.
    Linear(Var, Var, Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Clip(Var, f64, f64),
    Min(Var, Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    /// Per-row diagonal Gaussian log density of a constant action batch.
    GaussianLogProb { mean: Var, log_std: Var, action: Array2<f64> },
    /// Output row `i` is `Σ_j w_ij · x[j]` for a column `x`.
    Combine { x: Var, rows: Vec<Vec<(usize, f64)>> },
    /// Heaviside step; forward only.
    Step,
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Leaf whose gradient is reported in slot `slot` by [`Tape::backward`].
    pub fn param(&mut self, slot: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Leaf(Some(slot)))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf(None))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.nrows() || bv.dim() != (1, wv.ncols()) {
            return Err(Error::Shape(format!("linear: x {:?}, W {:?}, b {:?}", xv.dim(), wv.dim(), bv.dim())));
        }
        let y = xv.dot(wv) + bv;
        Ok(self.push(y, Op::Linear(x, w, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) * c;
        self.push(y, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        self.push(y, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::ln);
        self.push(y, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(logistic);
        self.push(y, Op::Sigmoid(a))
    }

    /// Numerically stable `log σ(a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(log_logistic);
        self.push(y, Op::LogSigmoid(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(y, Op::Clip(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "min")?;
        let y = Zip::from(self.value(a)).and(self.value(b)).map_collect(|&x, &y| x.min(y));
        Ok(self.push(y, Op::Min(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v * v);
        self.push(y, Op::Square(a))
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean of an empty array".into()));
        }
        let y = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        Ok(self.push(y, Op::Mean(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Per-row `Σ_d −(a−μ)²/(2σ²) − log σ − ½log 2π`, giving an N×1 column.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, action: Array2<f64>) -> Result<Var> {
        let (m, ls) = (self.value(mean), self.value(log_std));
        if m.dim() != action.dim() || ls.dim() != (1, m.ncols()) {
            return Err(Error::Shape(format!(
                "gaussian_log_prob: mean {:?}, log_std {:?}, action {:?}",
                m.dim(),
                ls.dim(),
                action.dim()
            )));
        }
        let y = gaussian_log_prob_rows(m, ls, &action);
        Ok(self.push(y, Op::GaussianLogProb { mean, log_std, action }))
    }

    /// Sparse weighted sums of entries of a column vector.
    pub fn combine(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ncols() != 1 {
            return Err(Error::Shape(format!("combine expects a column, got {:?}", xv.dim())));
        }
        let n = xv.nrows();
        let mut y = Array2::zeros((rows.len(), 1));
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                if j >= n {
                    return Err(Error::Shape(format!("combine index {j} out of {n}")));
                }
                y[[i, 0]] += w * xv[[j, 0]];
            }
        }
        Ok(self.push(y, Op::Combine { x, rows }))
    }

    /// Heaviside step. Has no gradient; [`Tape::backward`] rejects graphs using it.
    pub fn step(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.push(y, Op::Step)
    }

    /// Gradients of the 1×1 node `loss` with respect to parameter slots
    /// `0..n_slots`. Slots that never appear receive `None`.
    pub fn backward(&self, loss: Var, n_slots: usize) -> Result<Vec<Option<Array2<f64>>>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).dim())));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: Vec<Option<Array2<f64>>> = vec![None; n_slots];

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf(Some(slot)) => {
                    if *slot >= n_slots {
                        return Err(Error::Shape(format!("parameter slot {slot} >= {n_slots}")));
                    }
                    match &mut out[*slot] {
                        Some(x) => *x += &g,
                        s => *s = Some(g),
                    }
                }
                Op::Leaf(None) => {}
                Op::Linear(x, w, b) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *w, xv.t().dot(&g));
                    acc(&mut grads, *x, g.dot(&wv.t()));
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(&node.value).map_collect(|&g, &s| g * s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    // d/dz log σ(z) = σ(−z)
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &z| g * logistic(-z));
                    acc(&mut grads, *a, d);
                }
                Op::Clip(a, lo, hi) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x < *lo || x > *hi { 0.0 } else { g });
                    acc(&mut grads, *a, d);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Zip::from(&g).and(av).and(bv).map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                    let gb = Zip::from(&g).and(av).and(bv).map_collect(|&g, &x, &y| if x <= y { 0.0 } else { g });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Square(a) => acc(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::Mean(a) => {
                    let v = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(v.dim(), g[[0, 0]] / v.len() as f64));
                }
                Op::Sum(a) => {
                    let v = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(v.dim(), g[[0, 0]]));
                }
                Op::GaussianLogProb { mean, log_std, action } => {
                    let (m, ls) = (self.value(*mean), self.value(*log_std));
                    let inv_var = ls.mapv(|l| (-2.0 * l).exp());
                    let diff = action - m;
                    // ∂/∂μ = (a−μ)/σ², ∂/∂logσ = (a−μ)²/σ² − 1
                    let gm = &diff * &inv_var * &g;
                    let z2 = &diff * &diff * &inv_var;
                    let gl = ((z2 - 1.0) * &g).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *mean, gm);
                    acc(&mut grads, *log_std, gl);
                }
                Op::Combine { x, rows } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (r, row) in rows.iter().enumerate() {
                        for &(j, w) in row {
                            d[[j, 0]] += w * g[[r, 0]];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Step => return Err(Error::Unsupported("step")),
            }
        }
        Ok(out)
    }
}

/// Row-wise diagonal Gaussian log density (N×1).
pub fn gaussian_log_prob_rows(mean: &Array2<f64>, log_std: &Array2<f64>, action: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((mean.nrows(), 1));
    for (i, (m, a)) in mean.rows().into_iter().zip(action.rows()).enumerate() {
        let mut s = 0.0;
        for d in 0..m.len() {
            let l = log_std[[0, d]];
            let z = (a[d] - m[d]) * (-l).exp();
            s += -0.5 * z * z - l - HALF_LN_2PI;
        }
        out[[i, 0]] = s;
    }
    out
}

/// `½ log 2π`, exposed for closed-form checks.
pub fn half_ln_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grad_of(tape: &Tape, loss: Var, slots: usize) -> Vec<Array2<f64>> {
        tape.backward(loss, slots).unwrap().into_iter().map(Option::unwrap).collect()
    }

    #[test]
    fn half_norm_squared_gradient_is_identity() {
        let theta = array![[0.3, -1.2], [2.0, 0.5]];
        let mut t = Tape::new();
        let p = t.param(0, &theta);
        let sq = t.square(p);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        assert_eq!(grad_of(&t, loss, 1)[0], theta);
    }

    #[test]
    fn clip_is_flat_outside() {
        let mut t = Tape::new();
        let x = t.param(0, &array![[1.5, 1.0, 0.5]]);
        let c = t.clip(x, 0.8, 1.2);
        let loss = t.sum(c);
        assert_eq!(grad_of(&t, loss, 1)[0], array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn step_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(0, &array![[1.0]]);
        let s = t.step(x);
        let loss = t.sum(s);
        assert!(matches!(t.backward(loss, 1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.constant(array![[1.0], [2.0]]);
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.backward(a, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_half_log_two_pi() {
        assert!((HALF_LN_2PI - half_ln_two_pi()).abs() < 1e-16);
    }

    /// Central finite differences of a scalar function of one parameter array.
    fn fd_check(theta: &Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let p = t.param(0, theta);
        let loss = f(&mut t, p);
        let g = grad_of(&t, loss, 1).remove(0);
        let h = 1e-6;
        for idx in 0..theta.len() {
            let (r, c) = (idx / theta.ncols(), idx % theta.ncols());
            let eval = |delta: f64| {
                let mut th = theta.clone();
                th[[r, c]] += delta;
                let mut t = Tape::new();
                let p = t.param(0, &th);
                let l = f(&mut t, p);
                t.scalar(l)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (num - g[[r, c]]).abs() / num.abs().max(g[[r, c]].abs()).max(1e-8);
            assert!(err < 1e-6, "entry {idx}: analytic {} numeric {num}", g[[r, c]]);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let theta = array![[0.3, -0.7, 1.1], [0.2, 0.9, -1.4]];
        fd_check(&theta, |t, p| {
            let a = t.tanh(p);
            let b = t.sigmoid(p);
            let c = t.mul(a, b).unwrap();
            let d = t.log_sigmoid(c);
            let e = t.exp(p);
            let f = t.log(e);
            let g = t.min(d, f).unwrap();
            let h = t.sub(g, a).unwrap();
            t.mean(h).unwrap()
        });
    }

    #[test]
    fn linear_and_gaussian_match_finite_differences() {
        let x = array![[0.5, -0.3], [1.2, 0.7], [-0.4, 0.1]];
        let act = array![[0.1, 0.2], [-0.3, 0.5], [0.0, -0.8]];
        let w = array![[0.4, -0.2], [0.3, 0.8]];
        fd_check(&w, |t, p| {
            let xv = t.constant(x.clone());
            let b = t.constant(array![[0.05, -0.1]]);
            let m = t.linear(xv, p, b).unwrap();
            let ls = t.constant(array![[-0.3, 0.2]]);
            let lp = t.gaussian_log_prob(m, ls, act.clone()).unwrap();
            t.mean(lp).unwrap()
        });
        fd_check(&array![[-0.3, 0.2]], |t, p| {
            let m = t.constant(array![[0.0, 0.1], [0.2, 0.3], [0.3, 0.3]]);
            let lp = t.gaussian_log_prob(m, p, act.clone()).unwrap();
            let rows = vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)]];
            let c = t.combine(lp, rows).unwrap();
            t.sum(c)
        });
    }
}
