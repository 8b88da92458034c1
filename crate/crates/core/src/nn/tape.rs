//! A small reverse-mode tape over 2-D row-major tensors.
//!
//! Only the operations the dense classifier needs are recorded: affine maps,
//! rectifiers and a mean softmax cross-entropy head. Gradients can also be
//! seeded directly at any node, which is how attack losses with analytic
//! logit gradients hook in.

use std::iter::Sum;

use num_traits::Float;

pub trait Scalar: Float + Sum + Default + Send + Sync + std::fmt::Debug + 'static {}

impl<T: Float + Sum + Default + Send + Sync + std::fmt::Debug + 'static> Scalar for T {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 { 1 } else { self.shape[0] }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `x · Wᵀ + b`, with `W` stored `[out, in]`.
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    /// Mean over rows of `−log softmax(z)[label]`; probabilities cached.
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let chunks = n / LANES;
    for k in 0..chunks {
        let xa = &a[k * LANES..(k + 1) * LANES];
        let xb = &b[k * LANES..(k + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..n {
        tail = tail + a[i] * b[i];
    }
    let mut total = T::zero();
    for v in acc {
        total = total + v;
    }
    total + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf held constant (no gradient is accumulated for it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, inputs) = (xv.rows(), xv.cols());
        let outputs = wv.rows();
        assert_eq!(wv.cols(), inputs, "affine: input width mismatch");
        assert_eq!(bv.data.len(), outputs, "affine: bias width mismatch");
        let mut out = Vec::with_capacity(batch * outputs);
        for r in 0..batch {
            let xr = xv.row(r);
            for o in 0..outputs {
                out.push(dot(xr, wv.row(o)) + bv.data[o]);
            }
        }
        let needs = [x, w, b].iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Tensor::new(vec![batch, outputs], out), Op::Affine { x, w, b }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = xv.shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(shape, data), Op::Relu(x), needs)
    }

    /// Mean cross-entropy over the batch rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let zv = self.value(logits);
        let (batch, classes) = (zv.rows(), zv.cols());
        assert_eq!(labels.len(), batch, "one label per row");
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = zv.row(r);
            let top = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - top).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            total = total + sum.ln() - (row[label] - top);
            probs.extend(exps.iter().map(|&e| e / sum));
        }
        let mean = total / T::from(batch).unwrap();
        let needs = self.nodes[logits.0].needs_grad;
        self.push(
            Tensor::new(vec![1], vec![mean]),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            needs,
        )
    }

    /// Propagates `seed` (shaped like `root`) back through the tape.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.data.len(), self.value(root).data.len(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, inputs, outputs) = (xv.rows(), xv.cols(), wv.rows());
                    if self.nodes[x.0].needs_grad {
                        let mut gx = vec![T::zero(); batch * inputs];
                        for r in 0..batch {
                            let gxr = &mut gx[r * inputs..(r + 1) * inputs];
                            for o in 0..outputs {
                                let gy = upstream.data[r * outputs + o];
                                if gy != T::zero() {
                                    axpy(gy, wv.row(o), gxr);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(xv.shape.clone(), gx));
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut gw = vec![T::zero(); outputs * inputs];
                        for r in 0..batch {
                            let xr = xv.row(r);
                            for o in 0..outputs {
                                let gy = upstream.data[r * outputs + o];
                                if gy != T::zero() {
                                    axpy(gy, xr, &mut gw[o * inputs..(o + 1) * inputs]);
                                }
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::new(wv.shape.clone(), gw));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![T::zero(); outputs];
                        for r in 0..batch {
                            for o in 0..outputs {
                                gb[o] = gb[o] + upstream.data[r * outputs + o];
                            }
                        }
                        let shape = self.value(*b).shape.clone();
                        accumulate(&mut grads, *b, Tensor::new(shape, gb));
                    }
                }
                Op::Relu(x) => {
                    // The subgradient at exactly 0 is 0.
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&upstream.data)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape.clone(), data));
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let zv = self.value(*logits);
                    let classes = zv.cols();
                    let scale = upstream.data[0] / T::from(labels.len()).unwrap();
                    let mut data: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        let i = r * classes + label;
                        data[i] = data[i] - scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(zv.shape.clone(), data));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a = *a + *b;
            }
        }
        slot => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds affine -> relu -> affine -> CE and returns the scalar loss.
    fn build(tape: &mut Tape<f64>, params: &[Tensor<f64>; 5], labels: &[usize]) -> (Var, [Var; 5]) {
        let vars = [
            tape.input(params[0].clone()),
            tape.input(params[1].clone()),
            tape.input(params[2].clone()),
            tape.input(params[3].clone()),
            tape.input(params[4].clone()),
        ];
        let h = tape.affine(vars[0], vars[1], vars[2]);
        let h = tape.relu(h);
        let z = tape.affine(h, vars[3], vars[4]);
        (tape.softmax_cross_entropy(z, labels), vars)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels = [1, 0, 2];
        let params = [
            random(&mut rng, vec![3, 5]),
            random(&mut rng, vec![4, 5]),
            random(&mut rng, vec![4]),
            random(&mut rng, vec![3, 4]),
            random(&mut rng, vec![3]),
        ];
        let mut tape = Tape::new();
        let (loss, vars) = build(&mut tape, &params, &labels);
        let grads = tape.backward(loss, Tensor::new(vec![1], vec![1.0]));
        for (slot, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).unwrap();
            for k in 0..params[slot].data.len() {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p[slot].data[k] += delta;
                    let mut t = Tape::new();
                    let (l, _) = build(&mut t, &p, &labels);
                    t.value(l).data[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data[k];
                assert!((fd - an).abs() <= 1e-7 * an.abs().max(1e-2), "slot {slot}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let g = tape.backward(y, Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]));
        assert_eq!(g.get(x).unwrap().data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let b = tape.constant(Tensor::new(vec![1], vec![0.5]));
        let y = tape.affine(x, w, b);
        assert_eq!(tape.value(y).data, vec![11.5]);
        let g = tape.backward(y, Tensor::new(vec![1, 1], vec![2.0]));
        assert_eq!(g.get(x).unwrap().data, vec![6.0, 8.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let b = vec![1.0; 19];
        assert_eq!(dot(&a, &b), 171.0);
    }
}
