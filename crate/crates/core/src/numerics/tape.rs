//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a node holding its
//! output value and whatever it needs to form vector-Jacobian products; [`Tape::backward`] walks
//! the nodes once in reverse and returns gradients for every node registered with
//! [`Tape::param`].

use std::collections::BTreeMap;

use super::batchnorm::{scale_shift, standardize, BatchStats, BN_EPSILON};
use super::matrix::{bce_with_logit, sigmoid};
use super::{Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Source of normalization statistics for [`Tape::batchnorm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize by the statistics of the current batch.
    Batch,
    /// Normalize by fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        self.push(value, Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).add_row_broadcast(self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.push(out, Op::Relu(x))
    }

    /// Which inputs of every recorded ReLU are active, in recording order. Two passes with equal
    /// patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).sigmoid();
        self.push(out, Op::Sigmoid(x))
    }

    /// Batch normalization with learnable `gamma`/`beta`. With [`NormStats::Batch`] the batch
    /// statistics used are returned so the caller can fold them into running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>), NumericsError> {
        let input = self.value(x);
        let (xhat, inv_std, batch) = match stats {
            NormStats::Batch => {
                let s = BatchStats::of(input)?;
                let (xhat, inv_std) = standardize(input, &s.mean, &s.var, BN_EPSILON);
                (xhat, inv_std, Some(s))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != input.cols() || var.len() != input.cols() {
                    return Err(NumericsError::shape(
                        "batchnorm",
                        input.shape(),
                        (1, mean.len()),
                    ));
                }
                let (xhat, inv_std) = standardize(input, mean, var, BN_EPSILON);
                (xhat, inv_std, None)
            }
        };
        let out = scale_shift(&xhat, self.value(gamma), self.value(beta))?;
        let batch_stats = batch.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, batch))
    }

    /// `Σ_i w_i · BCE(y_i, σ(z_i))` over a column of logits, as a `1 x 1` node.
    pub fn weighted_bce(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Var, NumericsError> {
        let z = self.value(logits);
        if z.cols() != 1 || targets.len() != z.rows() || weights.len() != z.rows() {
            return Err(NumericsError::shape(
                "weighted_bce",
                z.shape(),
                (targets.len(), weights.len()),
            ));
        }
        let mut total = 0.0;
        for ((&zi, &yi), &wi) in z.data().iter().zip(&targets).zip(&weights) {
            if wi != 0.0 {
                total += wi * bce_with_logit(yi, zi);
            }
        }
        Ok(self.push(
            Matrix::scalar(total),
            Op::WeightedBce {
                logits,
                targets,
                weights,
            },
        ))
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    ///
    /// Every parameter leaf appears in the result; leaves the output does not depend on get
    /// zero gradients.
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients, NumericsError> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(NumericsError::shape("backward seed", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddBias(x, bias) => {
                    let gb = g.sum_rows();
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), "relu_backward", |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, "sigmoid_backward", |gi, s| {
                        gi * s * (1.0 - s)
                    })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, d) = xhat.shape();
                    let gamma_v = self.value(*gamma);
                    let mut ggamma = Matrix::zeros(1, d);
                    let gbeta = g.sum_rows();
                    let mut gxhat = Matrix::zeros(n, d);
                    for r in 0..n {
                        for c in 0..d {
                            let gi = g.get(r, c);
                            ggamma.data_mut()[c] += gi * xhat.get(r, c);
                            gxhat.set(r, c, gi * gamma_v.get(0, c));
                        }
                    }
                    let gx = if *batch_stats {
                        let nf = n as f64;
                        let sum_g = gxhat.sum_rows();
                        let mut sum_gx = vec![0.0; d];
                        for r in 0..n {
                            for (c, s) in sum_gx.iter_mut().enumerate() {
                                *s += gxhat.get(r, c) * xhat.get(r, c);
                            }
                        }
                        let mut gx = Matrix::zeros(n, d);
                        for r in 0..n {
                            for c in 0..d {
                                let v = inv_std[c] / nf
                                    * (nf * gxhat.get(r, c)
                                        - sum_g.get(0, c)
                                        - xhat.get(r, c) * sum_gx[c]);
                                gx.set(r, c, v);
                            }
                        }
                        gx
                    } else {
                        let mut gx = gxhat;
                        for r in 0..n {
                            for (v, s) in gx.row_mut(r).iter_mut().zip(inv_std) {
                                *v *= s;
                            }
                        }
                        gx
                    };
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, ggamma)?;
                    accumulate(&mut grads, *beta, gbeta)?;
                }
                Op::WeightedBce {
                    logits,
                    targets,
                    weights,
                } => {
                    let upstream = g.get(0, 0);
                    let z = self.value(*logits);
                    let gz: Vec<f64> = z
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&zi, &yi), &wi)| {
                            if wi == 0.0 {
                                0.0
                            } else {
                                upstream * wi * (sigmoid(zi) - yi)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::column(gz))?;
                }
            }
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let (r, c) = node.value.shape();
                let g = grads[idx].take().unwrap_or_else(|| Matrix::zeros(r, c));
                if let Some(prev) = out.insert(name.clone(), g) {
                    // the same name registered twice: sum contributions
                    let cur = out.get_mut(name).expect("just inserted");
                    cur.add_assign(&prev)?;
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<(), NumericsError> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Matrix) {
        self.0.insert(name.into(), g);
    }

    /// L2 norm over all blocks whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, m)| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::scalar(3.0));
        let x = tape.constant(Matrix::scalar(2.0));
        let f = tape.matmul(x, w).unwrap();
        let g = tape.backward(f, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::scalar(0.0));
        let f = tape.sigmoid(w);
        let g = tape.backward(f, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn seed_shape_mismatch() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::zeros(2, 2));
        let f = tape.relu(w);
        assert!(tape.backward(f, &Matrix::scalar(1.0)).is_err());
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::scalar(1.0));
        let _unused = tape.param("u", Matrix::zeros(2, 3));
        let f = tape.sigmoid(w);
        let g = tape.backward(f, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.get("u").unwrap(), &Matrix::zeros(2, 3));
    }

    fn mlp_loss(
        w1: &Matrix,
        b1: &Matrix,
        gamma: &Matrix,
        beta: &Matrix,
        w2: &Matrix,
        b2: &Matrix,
        x: &Matrix,
        y: &[f64],
        weights: &[f64],
        batch_norm: bool,
    ) -> (Tape, Var) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let w1v = t.param("w1", w1.clone());
        let b1v = t.param("b1", b1.clone());
        let gv = t.param("gamma", gamma.clone());
        let bv = t.param("beta", beta.clone());
        let w2v = t.param("w2", w2.clone());
        let b2v = t.param("b2", b2.clone());
        let h = t.matmul(xv, w1v).unwrap();
        let h = t.add_bias(h, b1v).unwrap();
        let h = t.relu(h);
        let h = if batch_norm {
            t.batchnorm(h, gv, bv, NormStats::Batch).unwrap().0
        } else {
            let mean = vec![0.1; h_width(w1)];
            let var = vec![0.7; h_width(w1)];
            t.batchnorm(h, gv, bv, NormStats::Fixed { mean: &mean, var: &var })
                .unwrap()
                .0
        };
        let z = t.matmul(h, w2v).unwrap();
        let z = t.add_bias(z, b2v).unwrap();
        let loss = t.weighted_bce(z, y.to_vec(), weights.to_vec()).unwrap();
        (t, loss)
    }

    fn h_width(w1: &Matrix) -> usize {
        w1.cols()
    }

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences with h = 1e-5 against the tape, every coordinate.
    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let (n, d, h) = (6, 4, 5);
            let x = rand_m(&mut rng, n, d, 1.0);
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
            let weights: Vec<f64> = (0..n).map(|i| if i % 3 == 2 { 0.0 } else { 0.3 }).collect();
            let mut params = vec![
                rand_m(&mut rng, d, h, 1.0),
                rand_m(&mut rng, 1, h, 0.5),
                rand_m(&mut rng, 1, h, 1.5),
                rand_m(&mut rng, 1, h, 0.5),
                rand_m(&mut rng, h, 1, 1.0),
                rand_m(&mut rng, 1, 1, 0.5),
            ];
            let names = ["w1", "b1", "gamma", "beta", "w2", "b2"];
            let bn = trial % 2 == 0;
            let eval = |p: &[Matrix]| {
                let (t, l) = mlp_loss(&p[0], &p[1], &p[2], &p[3], &p[4], &p[5], &x, &y, &weights, bn);
                (t.value(l).get(0, 0), t, l)
            };
            let (_, tape, loss) = eval(&params);
            let grads = tape.backward(loss, &Matrix::scalar(1.0)).unwrap();
            for (pi, name) in names.iter().enumerate() {
                for k in 0..params[pi].data().len() {
                    let orig = params[pi].data()[k];
                    let step = 1e-5;
                    params[pi].data_mut()[k] = orig + step;
                    let up = eval(&params).0;
                    params[pi].data_mut()[k] = orig - step;
                    let down = eval(&params).0;
                    params[pi].data_mut()[k] = orig;
                    let fd = (up - down) / (2.0 * step);
                    let an = grads.get(name).unwrap().data()[k];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "trial {trial} {name}[{k}]: fd {fd} vs tape {an}"
                    );
                }
            }
        }
    }
}
