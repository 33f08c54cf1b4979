//! Reverse-mode differentiation over a per-forward computation trace.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the trace in reverse and
//! stores each node's gradient in its tensor's grad buffer. A new graph is
//! built for every forward pass.

use crate::error::{CabmError, Result};
use crate::quant::{self, FULL_PRECISION_BITS};
use crate::tensor::{self, ConvSpec, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    PixelShuffle(Var, usize),
    /// Activation fake quantization; `bits` holds one width per sample.
    FakeQuant {
        input: Var,
        alpha: Var,
        bits: Vec<u32>,
    },
    /// Per-tensor weight quantization, straight-through in backward.
    WeightQuant(Var),
    /// Softmax over the channel axis of an `(N, K, 1, 1)` tensor.
    Softmax(Var),
    /// `sum_k probs[n, k] * branches[k][n]`.
    Mix {
        probs: Var,
        branches: Vec<Var>,
    },
    /// Mean absolute error against a constant target.
    L1 {
        input: Var,
        target: Tensor<T>,
    },
    /// `sum_i input[i] * coeffs[i]`.
    Dot {
        input: Var,
        coeffs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Computation trace of one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| CabmError::Autodiff(format!("unknown variable {}", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient stored by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = {
            let x = &self.node(input)?.value;
            let w = &self.node(weight)?.value;
            let b = &self.node(bias)?.value;
            tensor::conv2d(x, w, b.data(), &spec)?
        };
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = tensor::relu(&self.node(x)?.value);
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let av = &self.node(a)?.value;
            let bv = &self.node(b)?.value;
            av.require_same_shape(bv, "add")?;
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
            Tensor::from_vec(av.shape(), data)?
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v * c);
        Ok(self.push(out, Op::Scale(x, c)))
    }

    pub fn pixel_shuffle(&mut self, x: Var, scale: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(&self.node(x)?.value, scale)?;
        Ok(self.push(out, Op::PixelShuffle(x, scale)))
    }

    /// Fake-quantizes `input` against the scalar bound held in `alpha`.
    /// `bits` has one entry per sample, or a single entry for the whole batch.
    pub fn fake_quant(&mut self, input: Var, alpha: Var, bits: &[u32]) -> Result<Var> {
        let x = &self.node(input)?.value;
        let a = &self.node(alpha)?.value;
        if a.numel() != 1 {
            return Err(CabmError::shape("fake_quant", "alpha must be a scalar"));
        }
        let n = x.shape()[0];
        let bits: Vec<u32> = match bits.len() {
            1 => vec![bits[0]; n],
            len if len == n => bits.to_vec(),
            len => {
                return Err(CabmError::shape(
                    "fake_quant",
                    format!("{len} bit widths for batch of {n}"),
                ))
            }
        };
        let alpha_v = a.data()[0].as_f64();
        for &b in &bits {
            if b != FULL_PRECISION_BITS {
                quant::step_size(alpha_v, b)?;
            }
        }
        let per = x.numel() / n.max(1);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::from_f64_lossy(quant::quantize_scalar(v.as_f64(), alpha_v, bits[i / per])))
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(out, Op::FakeQuant { input, alpha, bits }))
    }

    pub fn weight_quant(&mut self, w: Var, bit: u32) -> Result<Var> {
        let spec = quant::WeightQuantSpec::new(bit)?;
        let out = quant::quantize_weight(&self.node(w)?.value, spec);
        Ok(self.push(out, Op::WeightQuant(w)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let [n, k, h, w] = v.shape();
        if h != 1 || w != 1 {
            return Err(CabmError::shape("softmax", "expects (N, K, 1, 1)"));
        }
        let mut data = Vec::with_capacity(n * k);
        for row in v.data().chunks(k) {
            data.extend(softmax_row(row));
        }
        let out = Tensor::from_vec([n, k, 1, 1], data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn mix(&mut self, probs: Var, branches: &[Var]) -> Result<Var> {
        let p = &self.node(probs)?.value;
        let [n, k, _, _] = p.shape();
        if branches.len() != k || p.numel() != n * k {
            return Err(CabmError::shape(
                "mix",
                format!("{} branches for {k} probabilities", branches.len()),
            ));
        }
        let shape = self.node(branches[0])?.value.shape();
        if shape[0] != n {
            return Err(CabmError::shape("mix", "batch size mismatch"));
        }
        let per = shape[1] * shape[2] * shape[3];
        let mut acc = vec![0f64; n * per];
        for (ki, &b) in branches.iter().enumerate() {
            let bv = &self.node(b)?.value;
            if bv.shape() != shape {
                return Err(CabmError::shape("mix", "branch shapes differ"));
            }
            for (i, (a, v)) in acc.iter_mut().zip(bv.data()).enumerate() {
                *a += p.data()[(i / per) * k + ki].as_f64() * v.as_f64();
            }
        }
        let out = Tensor::from_vec(shape, acc.into_iter().map(T::from_f64_lossy).collect())?;
        Ok(self.push(
            out,
            Op::Mix {
                probs,
                branches: branches.to_vec(),
            },
        ))
    }

    pub fn l1_loss(&mut self, input: Var, target: &Tensor<T>) -> Result<Var> {
        let x = &self.node(input)?.value;
        x.require_same_shape(target, "l1_loss")?;
        let mean = mean_abs_diff(x, target);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(mean)),
            Op::L1 {
                input,
                target: target.clone(),
            },
        ))
    }

    pub fn dot(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.numel() != coeffs.len() {
            return Err(CabmError::shape("dot", "coefficient count"));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Dot { input, coeffs }))
    }

    /// Back-propagates from the scalar `loss`, seeding its gradient with `seed`.
    pub fn backward_with_seed(&mut self, loss: Var, seed: T) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(CabmError::Autodiff(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(CabmError::Autodiff("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with_seed(loss, T::one())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let (gx, gw, gb) =
                    tensor::conv2d_backward(self.value(*input), self.value(*weight), spec, g)?;
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                accumulate(grads, *bias, gb);
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > T::zero() { *gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|v| *v * *c).collect());
            }
            Op::PixelShuffle(x, s) => {
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                accumulate(grads, *x, tensor::pixel_unshuffle(&gt, *s)?.into_data());
            }
            Op::FakeQuant { input, alpha, bits } => {
                let x = self.value(*input);
                let a = self.value(*alpha).data()[0].as_f64();
                let per = x.numel() / bits.len().max(1);
                let mut ga = 0.0;
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .enumerate()
                    .map(|(i, (v, gv))| {
                        let (dx, da) = quant::ste_element(gv.as_f64(), v.as_f64(), a, bits[i / per]);
                        ga += da;
                        T::from_f64_lossy(dx)
                    })
                    .collect();
                accumulate(grads, *input, gx);
                accumulate(grads, *alpha, vec![T::from_f64_lossy(ga)]);
            }
            Op::WeightQuant(w) => accumulate(grads, *w, g.to_vec()),
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for (p, gr) in node.value.data().chunks(k).zip(g.chunks(k)) {
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    gx.extend(
                        p.iter()
                            .zip(gr)
                            .map(|(pi, gi)| T::from_f64_lossy(pi.as_f64() * (gi.as_f64() - inner))),
                    );
                }
                accumulate(grads, *x, gx);
            }
            Op::Mix { probs, branches } => {
                let p = self.value(*probs);
                let k = branches.len();
                let n = p.shape()[0];
                let per = g.len() / n.max(1);
                let mut gp = vec![0f64; n * k];
                for (ki, &b) in branches.iter().enumerate() {
                    let bv = self.value(b);
                    let mut gb = Vec::with_capacity(g.len());
                    for (i, (gv, v)) in g.iter().zip(bv.data()).enumerate() {
                        let pi = p.data()[(i / per) * k + ki];
                        gb.push(*gv * pi);
                        gp[(i / per) * k + ki] += gv.as_f64() * v.as_f64();
                    }
                    accumulate(grads, b, gb);
                }
                accumulate(grads, *probs, gp.into_iter().map(T::from_f64_lossy).collect());
            }
            Op::L1 { input, target } => {
                let x = self.value(*input);
                let scale = g[0].as_f64() / x.numel() as f64;
                let gx = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a.as_f64() - b.as_f64();
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        T::from_f64_lossy(s * scale)
                    })
                    .collect();
                accumulate(grads, *input, gx);
            }
            Op::Dot { input, coeffs } => {
                accumulate(grads, *input, coeffs.iter().map(|c| *c * g[0]).collect());
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64_lossy(e / sum)).collect()
}

pub(crate) fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut g = Graph::<f32>::new();
        assert!(matches!(g.backward(Var(0)), Err(CabmError::Autodiff(_))));
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err(), "non-scalar loss");
    }

    #[test]
    fn l1_at_minimum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::same(2, 2, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rand_tensor([1, 2, 4, 4], &mut rng));
        let w = g.leaf(rand_tensor(spec.weight_shape(), &mut rng));
        let b = g.leaf(rand_tensor([1, 2, 1, 1], &mut rng));
        let y = g.conv2d(x, w, b, spec).unwrap();
        let target = g.value(y).clone();
        let loss = g.l1_loss(y, &target).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_l1_gradient() {
        let spec = ConvSpec::new(1, 1, 1, 1, 0).unwrap();
        for &(wv, xv, h) in &[(0.5f64, 2.0, 3.0), (1.5, 2.0, 0.5), (-1.0, 0.7, 0.0)] {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::scalar(xv));
            let w = g.leaf(Tensor::scalar(wv));
            let b = g.leaf(Tensor::scalar(0.0));
            let y = g.conv2d(x, w, b, spec).unwrap();
            let loss = g.l1_loss(y, &Tensor::scalar(h)).unwrap();
            g.backward(loss).unwrap();
            let expected = (wv * xv - h).signum() * xv;
            assert_eq!(g.grad(w).unwrap()[0], expected);
        }
    }

    /// Central finite differences on every leaf of a graph built by `f`.
    fn check_gradients(
        leaves: Vec<Tensor<f64>>,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.backward(loss).unwrap();
        let eval = |ls: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
            let l = f(&mut g, &vs);
            g.value(l).data()[0]
        };
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(vars[li]).map(|s| s.to_vec()).unwrap_or(vec![0.0; leaf.numel()]);
            for i in 0..leaf.numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[i] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-4, "leaf {li}[{i}]: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn softmax_mix_dot_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = rand_tensor([2, 3, 1, 1], &mut rng);
        let branches: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor([2, 1, 2, 2], &mut rng)).collect();
        let coeffs: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cp: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut leaves = vec![logits];
        leaves.extend(branches);
        check_gradients(leaves, move |g, v| {
            let p = g.softmax(v[0]).unwrap();
            let m = g.mix(p, &v[1..4]).unwrap();
            let s = g.scale(m, 1.7).unwrap();
            let d1 = g.dot(s, coeffs.clone()).unwrap();
            let d2 = g.dot(p, cp.clone()).unwrap();
            g.add(d1, d2).unwrap()
        });
    }

    #[test]
    fn conv_relu_shuffle_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::same(2, 4, 3).unwrap();
        let x = rand_tensor([2, 2, 3, 3], &mut rng);
        let w = rand_tensor(spec.weight_shape(), &mut rng);
        let b = rand_tensor([1, 4, 1, 1], &mut rng);
        let coeffs: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check_gradients(vec![x, w, b], move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], spec).unwrap();
            let r = g.relu(y).unwrap();
            let s = g.pixel_shuffle(r, 2).unwrap();
            g.dot(s, coeffs.clone()).unwrap()
        });
    }

    #[test]
    fn fake_quant_gradient_matches_ste() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([2, 1, 1, 2], vec![0.3, -2.0, 1.5, -0.1]).unwrap());
        let a = g.leaf(Tensor::scalar(1.0));
        let q = g.fake_quant(x, a, &[4, 32]).unwrap();
        assert_eq!(g.value(q).data()[1], -1.0);
        assert_eq!(g.value(q).data()[2], 1.5, "sample 1 is full precision");
        let loss = g.dot(q, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 3.0, 4.0]);
        assert_eq!(g.grad(a).unwrap(), &[-2.0]);
    }
}
