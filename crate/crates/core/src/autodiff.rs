//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is an append-only record of primitive operations; node ids are
//! topologically ordered by construction, so the backward sweep is a single
//! reverse pass. Values are computed eagerly at record time with the same
//! kernels [`Tape::replay`] uses, which makes replay bit-exact.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// a·b with a: n×k, b: k×m.
    MatMul { a: NodeId, b: NodeId },
    /// a·bᵀ with a: n×k, b: m×k.
    MatMulBt { a: NodeId, b: NodeId },
    /// Elementwise sum of same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast bias add: x is n×m, bias is a length-m vector.
    AddBias { x: NodeId, bias: NodeId },
    /// Elementwise add of a constant tensor (not differentiated through).
    AddConst { x: NodeId, c: Tensor<S> },
    /// Hadamard product of same-shape tensors.
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    Relu { x: NodeId },
    /// Sum of all entries, yielding a scalar.
    Sum { x: NodeId },
    /// Mean over the batch of label-smoothed softmax cross-entropy.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: S,
    },
    /// Temperature-softened KL(teacher ‖ student) scaled by T², batch mean.
    LwfDistill {
        logits: NodeId,
        teacher_probs: Tensor<S>,
        temperature: S,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    trainable: bool,
}

/// Gradients of one scalar loss with respect to every tape node.
#[derive(Debug)]
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `id`; `None` for nodes the backward pass never reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.index()].value
    }

    pub fn trainable_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.index() < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "node id {} is not on this record (len {})",
                id.index(),
                self.nodes.len()
            )))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }, false))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(value, Op::MatMulBt { a, b }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }, false))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(bias)?;
        let value = add_bias_forward(self.value(x), self.value(bias))?;
        Ok(self.push(value, Op::AddBias { x, bias }, false))
    }

    pub fn add_const(&mut self, x: NodeId, c: Tensor<S>) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).add(&c)?;
        Ok(self.push(value, Op::AddConst { x, c }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).scale(c);
        Ok(self.push(value, Op::Scale { x, c }, false))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(S::zero()));
        Ok(self.push(value, Op::Relu { x }, false))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, false))
    }

    /// Batch-mean softmax cross-entropy with label smoothing in [0, 1).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: S,
    ) -> Result<NodeId> {
        self.check(logits)?;
        let value = self.value(logits);
        let (n, c) = value.dims2()?;
        if targets.len() != n {
            return Err(Error::contract(format!(
                "{} targets for a batch of {n} logits rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        if smoothing < S::zero() || smoothing >= S::one() {
            return Err(Error::contract(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let loss = cross_entropy_forward(value, targets, smoothing);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
            false,
        ))
    }

    /// Distillation loss against fixed teacher probabilities (already
    /// temperature-softened, rows summing to one).
    pub fn lwf_distill(
        &mut self,
        logits: NodeId,
        teacher_probs: Tensor<S>,
        temperature: S,
    ) -> Result<NodeId> {
        self.check(logits)?;
        if temperature <= S::zero() {
            return Err(Error::contract(format!(
                "distillation temperature {temperature} must be positive"
            )));
        }
        let value = self.value(logits);
        if value.shape() != teacher_probs.shape() {
            return Err(Error::ShapeMismatch {
                op: "lwf_distill",
                left: value.shape().to_vec(),
                right: teacher_probs.shape().to_vec(),
            });
        }
        let loss = lwf_forward(value, &teacher_probs, temperature)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LwfDistill {
                logits,
                teacher_probs,
                temperature,
            },
            false,
        ))
    }

    /// Reverse-mode gradients of a scalar loss node. Every trainable node
    /// gets an entry; nodes the loss never touches get zeros.
    pub fn grad(&self, loss: NodeId) -> Result<Gradients<S>> {
        self.check(loss)
            .map_err(|_| Error::contract("record does not contain the loss node"))?;
        if !self.nodes[loss.index()].value.is_scalar() {
            return Err(Error::contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.index()].value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        slots[loss.index()] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.index()).rev() {
            let Some(g) = slots[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = g.matmul_bt(self.value(*b))?;
                    let db = self.value(*a).matmul_ta(&g)?;
                    accumulate(&mut slots[a.index()], da);
                    accumulate(&mut slots[b.index()], db);
                }
                Op::MatMulBt { a, b } => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_ta(self.value(*a))?;
                    accumulate(&mut slots[a.index()], da);
                    accumulate(&mut slots[b.index()], db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut slots[a.index()], g.clone());
                    accumulate(&mut slots[b.index()], g);
                }
                Op::AddBias { x, bias } => {
                    let (n, m) = g.dims2()?;
                    let mut db = vec![S::zero(); m];
                    for row in 0..n {
                        for col in 0..m {
                            db[col] += g.data()[row * m + col];
                        }
                    }
                    accumulate(&mut slots[bias.index()], Tensor::new(vec![m], db)?);
                    accumulate(&mut slots[x.index()], g);
                }
                Op::AddConst { x, .. } => {
                    accumulate(&mut slots[x.index()], g);
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(*b), "mul", |gv, bv| gv * bv)?;
                    let db = g.zip_map(self.value(*a), "mul", |gv, av| gv * av)?;
                    accumulate(&mut slots[a.index()], da);
                    accumulate(&mut slots[b.index()], db);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut slots[x.index()], g.scale(*c));
                }
                Op::Relu { x } => {
                    let dx = g.zip_map(self.value(*x), "relu", |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                    accumulate(&mut slots[x.index()], dx);
                }
                Op::Sum { x } => {
                    let gv = g.scalar_value()?;
                    let shape = self.value(*x).shape().to_vec();
                    let dx = Tensor::new(shape.clone(), vec![gv; self.value(*x).numel()])?;
                    accumulate(&mut slots[x.index()], dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let gv = g.scalar_value()?;
                    let dx = cross_entropy_backward(self.value(*logits), targets, *smoothing, gv)?;
                    accumulate(&mut slots[logits.index()], dx);
                }
                Op::LwfDistill {
                    logits,
                    teacher_probs,
                    temperature,
                } => {
                    let gv = g.scalar_value()?;
                    let dx = lwf_backward(self.value(*logits), teacher_probs, *temperature, gv)?;
                    accumulate(&mut slots[logits.index()], dx);
                }
            }
        }

        // Trainable parameters unreachable from the loss get zero gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && slots[i].is_none() {
                slots[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { slots })
    }

    /// Recompute every non-leaf node from current leaf values and return all
    /// node values in tape order. With untouched leaves this reproduces the
    /// recorded values bit-exactly.
    pub fn replay(&self) -> Result<Vec<Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul { a, b } => values[a.index()].matmul(&values[b.index()])?,
                Op::MatMulBt { a, b } => values[a.index()].matmul_bt(&values[b.index()])?,
                Op::Add { a, b } => values[a.index()].add(&values[b.index()])?,
                Op::AddBias { x, bias } => {
                    add_bias_forward(&values[x.index()], &values[bias.index()])?
                }
                Op::AddConst { x, c } => values[x.index()].add(c)?,
                Op::Mul { a, b } => {
                    values[a.index()].zip_map(&values[b.index()], "mul", |x, y| x * y)?
                }
                Op::Scale { x, c } => values[x.index()].scale(*c),
                Op::Relu { x } => values[x.index()].map(|v| v.max(S::zero())),
                Op::Sum { x } => Tensor::scalar(
                    values[x.index()]
                        .data()
                        .iter()
                        .fold(S::zero(), |acc, &v| acc + v),
                ),
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    smoothing,
                } => Tensor::scalar(cross_entropy_forward(
                    &values[logits.index()],
                    targets,
                    *smoothing,
                )),
                Op::LwfDistill {
                    logits,
                    teacher_probs,
                    temperature,
                } => Tensor::scalar(lwf_forward(
                    &values[logits.index()],
                    teacher_probs,
                    *temperature,
                )?),
            };
            values.push(value);
        }
        Ok(values)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, delta: Tensor<S>) {
    match slot {
        Some(existing) => {
            *existing = existing
                .add(&delta)
                .expect("gradient shapes agree by construction");
        }
        None => *slot = Some(delta),
    }
}

fn add_bias_forward<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, m) = x.dims2()?;
    if bias.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    for row in 0..n {
        for col in 0..m {
            data[row * m + col] += bias.data()[col];
        }
    }
    Tensor::new(vec![n, m], data)
}

/// Row-wise softmax with the max-subtraction stabilization.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c) = logits.dims2()?;
    let mut data = vec![S::zero(); n * c];
    for row in 0..n {
        let src = &logits.data()[row * c..(row + 1) * c];
        let max = src.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
        let mut total = S::zero();
        for col in 0..c {
            let e = (src[col] - max).exp();
            data[row * c + col] = e;
            total += e;
        }
        for col in 0..c {
            data[row * c + col] /= total;
        }
    }
    Tensor::new(vec![n, c], data)
}

fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
    let log_z = row
        .iter()
        .fold(S::zero(), |acc, &v| acc + (v - max).exp())
        .ln()
        + max;
    row.iter().map(|&v| v - log_z).collect()
}

fn cross_entropy_forward<S: Scalar>(logits: &Tensor<S>, targets: &[usize], smoothing: S) -> S {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let uniform = smoothing / S::from_f64(c as f64);
    let on_target = S::one() - smoothing;
    let mut total = S::zero();
    for row in 0..n {
        let lp = log_softmax_row(&logits.data()[row * c..(row + 1) * c]);
        let mut loss = -on_target * lp[targets[row]];
        if smoothing > S::zero() {
            for &v in &lp {
                loss -= uniform * v;
            }
        }
        total += loss;
    }
    total / S::from_f64(n as f64)
}

fn cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    smoothing: S,
    upstream: S,
) -> Result<Tensor<S>> {
    let (n, c) = logits.dims2()?;
    let uniform = smoothing / S::from_f64(c as f64);
    let on_target = S::one() - smoothing;
    let scale = upstream / S::from_f64(n as f64);
    let probs = softmax_rows(logits)?;
    let mut data = probs.into_data();
    for row in 0..n {
        for col in 0..c {
            let target = if col == targets[row] {
                on_target + uniform
            } else {
                uniform
            };
            data[row * c + col] = (data[row * c + col] - target) * scale;
        }
    }
    Tensor::new(vec![n, c], data)
}

/// T²-scaled batch-mean KL(teacher ‖ softmax(logits / T)).
pub(crate) fn lwf_forward<S: Scalar>(
    student_logits: &Tensor<S>,
    teacher_probs: &Tensor<S>,
    temperature: S,
) -> Result<S> {
    let (n, c) = student_logits.dims2()?;
    let mut total = S::zero();
    for row in 0..n {
        let scaled: Vec<S> = student_logits.data()[row * c..(row + 1) * c]
            .iter()
            .map(|&v| v / temperature)
            .collect();
        let lq = log_softmax_row(&scaled);
        for col in 0..c {
            let p = teacher_probs.data()[row * c + col];
            if p > S::zero() {
                total += p * (p.ln() - lq[col]);
            }
        }
    }
    Ok(temperature * temperature * total / S::from_f64(n as f64))
}

fn lwf_backward<S: Scalar>(
    student_logits: &Tensor<S>,
    teacher_probs: &Tensor<S>,
    temperature: S,
    upstream: S,
) -> Result<Tensor<S>> {
    let (n, c) = student_logits.dims2()?;
    let softened = student_logits.map(|v| v / temperature);
    let q = softmax_rows(&softened)?;
    let scale = upstream * temperature / S::from_f64(n as f64);
    let mut data = q.into_data();
    for i in 0..n * c {
        data[i] = (data[i] - teacher_probs.data()[i]) * scale;
    }
    Tensor::new(vec![n, c], data)
}

/// Central-difference gradient of `loss_fn` at `params`:
/// `(f(w + eps·eᵢ) − f(w − eps·eᵢ)) / (2·eps)` per coordinate.
///
/// This is the reference oracle for [`Tape::grad`]; it only ever evaluates
/// the loss as a black box.
pub fn finite_diff_grad<S: Scalar>(
    mut loss_fn: impl FnMut(&Tensor<S>) -> Result<S>,
    params: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    if eps <= S::zero() {
        return Err(Error::contract(format!("eps {eps} must be positive")));
    }
    let two = S::from_f64(2.0);
    let mut grad = vec![S::zero(); params.numel()];
    let mut probe = params.clone();
    for i in 0..params.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = loss_fn(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = loss_fn(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss during finite differences at coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (two * eps);
    }
    Tensor::new(params.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    type T = Tensor<f64>;

    fn random(rng: &mut Rng, shape: &[usize]) -> T {
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Relative-with-absolute-floor gradient comparison.
    fn assert_grad_close(analytic: &T, numeric: &T, rel: f64, abs: f64) {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let tol = abs.max(rel * a.abs().max(n.abs()));
            assert!(
                (a - n).abs() <= tol,
                "coordinate {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Gradcheck one parameter tensor of an arbitrary tape program.
    fn gradcheck(build: impl Fn(&mut Tape<f64>, T) -> (NodeId, NodeId), init: T) {
        let mut tape = Tape::new();
        let (param, loss) = build(&mut tape, init.clone());
        let grads = tape.grad(loss).unwrap();
        let analytic = grads.get(param).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let mut t = Tape::new();
                let (_, l) = build(&mut t, p.clone());
                t.value(l).scalar_value()
            },
            &init,
            1e-5,
        )
        .unwrap();
        assert_grad_close(analytic, &numeric, 1e-4, 1e-7);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let w = tape.param(T::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(T::new(vec![2], vec![1.0, 2.0]).unwrap());
        let v = tape.param(T::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(T::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.grad(w).is_err());
    }

    #[test]
    fn foreign_loss_node_is_a_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(T::scalar(1.0));
        let loss = tape.sum(w).unwrap();
        let other = Tape::<f64>::new();
        assert!(other.grad(loss).is_err());
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff_grad(
            |p| Ok(p.data()[0] * p.data()[0]),
            &T::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| Ok(7.5), &T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 1e-5)
            .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_relu_away_from_zero() {
        let g = finite_diff_grad(
            |p| Ok(p.data().iter().map(|&v| v.max(0.0)).sum()),
            &T::new(vec![2], vec![2.0, -2.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!(g.data()[1].abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_nonpositive_eps() {
        assert!(finite_diff_grad(|p| Ok(p.data()[0]), &T::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn finite_diff_reports_non_finite_loss() {
        let err = finite_diff_grad(|_| Ok(f64::NAN), &T::scalar(1.0), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = Rng::stream(21, "ad/matmul");
        let fixed = random(&mut rng, &[4, 3]);
        let init = random(&mut rng, &[2, 4]);
        gradcheck(
            move |tape, p| {
                let a = tape.param(p);
                let b = tape.leaf(fixed.clone());
                let prod = tape.matmul(a, b).unwrap();
                let loss = tape.sum(prod).unwrap();
                (a, loss)
            },
            init,
        );
    }

    #[test]
    fn matmul_bt_gradcheck_both_sides() {
        let mut rng = Rng::stream(22, "ad/matmul_bt");
        let fixed = random(&mut rng, &[5, 3]);
        let init = random(&mut rng, &[2, 3]);
        gradcheck(
            {
                let fixed = fixed.clone();
                move |tape, p| {
                    let a = tape.param(p);
                    let b = tape.leaf(fixed.clone());
                    let prod = tape.matmul_bt(a, b).unwrap();
                    let loss = tape.sum(prod).unwrap();
                    (a, loss)
                }
            },
            init.clone(),
        );
        let init_b = random(&mut rng, &[5, 3]);
        gradcheck(
            move |tape, p| {
                let a = tape.leaf(init.clone());
                let b = tape.param(p);
                let prod = tape.matmul_bt(a, b).unwrap();
                let loss = tape.sum(prod).unwrap();
                (b, loss)
            },
            init_b,
        );
    }

    #[test]
    fn bias_relu_chain_gradcheck() {
        let mut rng = Rng::stream(23, "ad/bias_relu");
        let x = random(&mut rng, &[3, 4]);
        let init = random(&mut rng, &[4]);
        gradcheck(
            move |tape, p| {
                let xin = tape.leaf(x.clone());
                let bias = tape.param(p);
                let pre = tape.add_bias(xin, bias).unwrap();
                let act = tape.relu(pre).unwrap();
                let loss = tape.sum(act).unwrap();
                (bias, loss)
            },
            init,
        );
    }

    #[test]
    fn cross_entropy_gradcheck_with_and_without_smoothing() {
        let mut rng = Rng::stream(24, "ad/ce");
        for smoothing in [0.0, 0.1] {
            let init = random(&mut rng, &[3, 4]);
            gradcheck(
                move |tape, p| {
                    let logits = tape.param(p);
                    let loss = tape
                        .softmax_cross_entropy(logits, &[0, 2, 3], smoothing)
                        .unwrap();
                    (logits, loss)
                },
                init,
            );
        }
    }

    #[test]
    fn lwf_distill_gradcheck() {
        let mut rng = Rng::stream(25, "ad/lwf");
        let teacher_logits = random(&mut rng, &[3, 4]);
        let softened = teacher_logits.map(|v| v / 2.0);
        let teacher = softmax_rows(&softened).unwrap();
        let init = random(&mut rng, &[3, 4]);
        gradcheck(
            move |tape, p| {
                let logits = tape.param(p);
                let loss = tape.lwf_distill(logits, teacher.clone(), 2.0).unwrap();
                (logits, loss)
            },
            init,
        );
    }

    #[test]
    fn scale_add_const_gradcheck() {
        let mut rng = Rng::stream(26, "ad/scale");
        let anchor = random(&mut rng, &[2, 3]);
        let init = random(&mut rng, &[2, 3]);
        gradcheck(
            move |tape, p| {
                let x = tape.param(p);
                let shifted = tape.add_const(x, anchor.scale(-1.0)).unwrap();
                let sq = tape.mul(shifted, shifted).unwrap();
                let total = tape.sum(sq).unwrap();
                let loss = tape.scale(total, 0.5).unwrap();
                (x, loss)
            },
            init,
        );
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = Rng::stream(27, "ad/mlp");
        let x = random(&mut rng, &[4, 3]);
        let w2 = random(&mut rng, &[2, 5]);
        let targets = vec![0, 1, 0, 1];
        let init_w1 = random(&mut rng, &[5, 3]);
        gradcheck(
            move |tape, p| {
                let xin = tape.leaf(x.clone());
                let w1 = tape.param(p);
                let w2n = tape.leaf(w2.clone());
                let h = tape.matmul_bt(xin, w1).unwrap();
                let h = tape.relu(h).unwrap();
                let logits = tape.matmul_bt(h, w2n).unwrap();
                let loss = tape.softmax_cross_entropy(logits, &targets, 0.0).unwrap();
                (w1, loss)
            },
            init_w1,
        );
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let mut rng = Rng::stream(28, "ad/replay");
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[3, 4]));
        let w = tape.param(random(&mut rng, &[2, 4]));
        let b = tape.param(random(&mut rng, &[2]));
        let h = tape.matmul_bt(x, w).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let h = tape.relu(h).unwrap();
        let loss = tape.softmax_cross_entropy(h, &[0, 1, 0], 0.05).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, value) in replayed.iter().enumerate() {
            assert_eq!(value.data(), tape.value(NodeId(i)).data(), "node {i}");
        }
        assert!(tape.value(loss).scalar_value().unwrap().is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::stream(29, "ad/softmax");
        let logits = random(&mut rng, &[4, 6]);
        let probs = softmax_rows(&logits).unwrap();
        for row in 0..4 {
            let total: f64 = probs.data()[row * 6..(row + 1) * 6].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
