use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations on this thread currently record a graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl GradModeGuard {
    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard(prev)
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::set(false);
    f()
}

fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::set(enabled);
    f()
}

/// Everything a backward rule needs to know about one recorded node.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Tensor],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not lead to any requested leaf.
    pub needs: &'a [bool],
}

/// Backward rule of a recorded operation.
///
/// Rules should build their results from `Tensor` operations so that the
/// result is itself differentiable when the caller asked for `create_graph`.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

pub(crate) struct GradFn {
    op: Box<dyn Backward>,
    inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Immutable dense row-major tensor, cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.grad_fn.as_ref().map(|g| g.op.name()))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: &[usize], requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// A constant that never receives gradients.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape, true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(vec![v; numel(shape)], shape)
    }

    /// Output of an operation. Records `op` only when grad mode is on and
    /// some input requires a gradient.
    pub fn from_op(data: Vec<f64>, shape: &[usize], op: impl Backward + 'static, inputs: Vec<Tensor>) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(data, shape, true, Some(GradFn { op: Box::new(op), inputs }))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.data.clone(), &self.inner.shape)
    }

    /// Same values as a fresh gradient leaf.
    pub fn detach_param(&self) -> Tensor {
        Tensor::param(self.inner.data.clone(), &self.inner.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn grad_fn(&self) -> Option<&GradFn> {
        self.inner.grad_fn.as_ref()
    }
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors in `wrt` that `output` does not depend on get zero gradients. With
/// `create_graph` the returned gradients carry a graph of their own and can be
/// differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, &seed, wrt, create_graph)
}

/// Vector-Jacobian product: gradients of `<seed, output>`.
pub fn grad_with_seed(output: &Tensor, seed: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    let wanted: HashMap<u64, usize> = wrt.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();

    // Post-order over the nodes that require grad.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<u64, bool> = HashMap::new();
    if output.requires_grad() {
        let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&t.id()) {
                continue;
            }
            visited.insert(t.id(), false);
            stack.push((t.clone(), true));
            if let Some(gf) = t.grad_fn() {
                for input in &gf.inputs {
                    if input.requires_grad() && !visited.contains_key(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
    }

    // A node is relevant when a requested tensor is reachable from it.
    let mut relevant: HashMap<u64, bool> = HashMap::with_capacity(order.len());
    for t in &order {
        let mut r = wanted.contains_key(&t.id());
        if let Some(gf) = t.grad_fn() {
            for input in &gf.inputs {
                if relevant.get(&input.id()).copied().unwrap_or(false) {
                    r = true;
                }
            }
        }
        relevant.insert(t.id(), r);
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if relevant.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), if create_graph { seed.clone() } else { seed.detach() });
    }

    with_grad_mode(create_graph, || {
        for t in order.iter().rev() {
            let Some(gf) = t.grad_fn() else { continue };
            if !relevant[&t.id()] {
                continue;
            }
            let Some(g) = grads.get(&t.id()).cloned() else { continue };
            let needs: Vec<bool> = gf
                .inputs
                .iter()
                .map(|i| i.requires_grad() && relevant.get(&i.id()).copied().unwrap_or(false))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let ctx = BackwardCtx { inputs: &gf.inputs, output: t, grad: &g, needs: &needs };
            let input_grads = gf.op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{} returned wrong arity", gf.op.name());
            for ((input, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(ig), true) = (ig, *need) else { continue };
                assert_eq!(
                    ig.shape(),
                    input.shape(),
                    "{} produced a gradient of the wrong shape",
                    gf.op.name()
                );
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
    });

    wrt.iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect()
}

impl Tensor {
    /// Names of every recorded operation reachable from this tensor, in no
    /// particular order. Empty for constants and leaves.
    pub fn graph_ops(&self) -> Vec<&'static str> {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        let mut names = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = t.grad_fn() {
                names.push(gf.op.name());
                stack.extend(gf.inputs.iter().cloned());
            }
        }
        names
    }
}
