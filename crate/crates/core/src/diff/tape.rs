use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[doc(hidden)]
    pub fn from_index_for_tests() -> Self {
        Var(0)
    }
}

/// Forward/backward rule of a differentiable operation.
///
/// `backward` receives the saved inputs and output plus the upstream
/// gradient, and returns one gradient per input (`None` where `needs` is
/// false).
pub trait Kernel<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    kernel: Option<Arc<dyn Kernel<T>>>,
    inputs: Vec<Var>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. Operations whose inputs do not require gradients are evaluated but
/// not recorded for the backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and gradients so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: value.detached(),
            kernel: None,
            inputs: Vec::new(),
            requires_grad: false,
            param: None,
        })
    }

    /// Records a leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: value.detached(),
            kernel: None,
            inputs: Vec::new(),
            requires_grad: true,
            param: None,
        })
    }

    /// Binds parameter `index` of `store` as a leaf. Frozen parameters are
    /// bound as constants.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let t = store.tensor(index);
        let requires_grad = t.requires_grad();
        self.push(Node {
            value: t.detached(),
            kernel: None,
            inputs: Vec::new(),
            requires_grad,
            param: Some(index),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `kernel` on the given inputs and records it when any input
    /// requires gradients.
    pub fn apply(&mut self, kernel: Arc<dyn Kernel<T>>, inputs: &[Var]) -> Result<Var, DiffError> {
        let out = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            kernel.forward(&ins)?
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite(kernel.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value: out,
            kernel: if requires_grad { Some(kernel) } else { None },
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            requires_grad,
            param: None,
        }))
    }

    /// Reverse pass from a scalar loss. Gradients are retained on the tape
    /// until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.consumed {
            return Err(DiffError::AlreadyBackpropagated);
        }
        if self.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(kernel) = &node.kernel else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = kernel.backward(&ins, &node.value, &g, &needs);
            for (input, ig) in node.inputs.iter().zip(in_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<(), DiffError> {
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(p) = node.param else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(idx) {
                store.tensor_mut(p).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Checks every recorded kernel's backward rule against central
    /// differences of its own forward, using a random cotangent.
    ///
    /// At most `coords` input coordinates per input are probed.
    pub fn check_kernels(&self, h: f64, tol: f64, coords: usize, seed: u64) -> Vec<KernelCheck> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for node in &self.nodes {
            let Some(kernel) = &node.kernel else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<Tensor<T>> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].value.clone())
                .collect();
            let cot: Vec<T> = (0..node.value.len())
                .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
                .collect();
            let ins: Vec<&Tensor<T>> = inputs.iter().collect();
            let analytic = kernel.backward(&ins, &node.value, &cot, &needs);
            let mut worst = 0.0f64;
            for (i, need) in needs.iter().enumerate() {
                if !need {
                    continue;
                }
                let Some(a) = &analytic[i] else {
                    worst = f64::INFINITY;
                    continue;
                };
                let len = inputs[i].len();
                let probe: Vec<usize> = if len <= coords {
                    (0..len).collect()
                } else {
                    (0..coords).map(|_| rng.gen_range(0..len)).collect()
                };
                let scale = a.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()));
                let mut max_err = 0.0f64;
                let mut max_num = 0.0f64;
                for j in probe {
                    let eval = |delta: f64| -> Option<f64> {
                        let mut pert = inputs.clone();
                        let d = &mut pert[i].data_mut()[j];
                        *d = T::from_f64(d.to_f64() + delta);
                        let refs: Vec<&Tensor<T>> = pert.iter().collect();
                        let y = kernel.forward(&refs).ok()?;
                        Some(
                            y.data()
                                .iter()
                                .zip(&cot)
                                .map(|(a, b)| a.to_f64() * b.to_f64())
                                .sum(),
                        )
                    };
                    let (Some(p), Some(m)) = (eval(h), eval(-h)) else { continue };
                    let num = (p - m) / (2.0 * h);
                    max_num = max_num.max(num.abs());
                    max_err = max_err.max((num - a[j].to_f64()).abs());
                }
                let denom = scale.max(max_num).max(1e-12);
                worst = worst.max(max_err / denom);
            }
            out.push(KernelCheck {
                op: kernel.name().to_string(),
                max_rel_err: worst,
                passed: worst <= tol,
            });
        }
        out
    }
}

/// Result of probing one recorded kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a named tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    /// Gives every trainable tensor a (zero) gradient buffer if it has none.
    pub fn ensure_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad() && t.grad().is_none() {
                let z = vec![T::ZERO; t.len()];
                t.accumulate_grad(&z).expect("matching length");
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}
