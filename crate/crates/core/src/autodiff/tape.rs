use super::Tensor;

pub type VarId = usize;

/// Context handed to a node's backward closure.
pub struct BackCtx<'a> {
    pub upstream: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

struct Node {
    inputs: Vec<VarId>,
    /// Returns one cotangent per input, aligned with `inputs`.
    backward: Box<dyn Fn(&BackCtx<'_>) -> Vec<Tensor>>,
}

/// Wengert list: an arena of values plus one optional node per value.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Option<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Inserts an input (parameter or data) the tape does not differentiate
    /// through but may differentiate with respect to.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.values.push(value);
        self.nodes.push(None);
        self.values.len() - 1
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an operation; used by the primitives in [`super::ops`].
    pub(crate) fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<VarId>,
        backward: Box<dyn Fn(&BackCtx<'_>) -> Vec<Tensor>>,
    ) -> VarId {
        debug_assert!(inputs.iter().all(|&i| i < self.values.len()));
        self.values.push(value);
        self.nodes.push(Some(Node { inputs, backward }));
        self.values.len() - 1
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per
    /// variable; untouched slots are `None`.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(
            self.values[root].numel(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.values[root].shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(node) = &self.nodes[id] else { continue };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let ctx = BackCtx {
                upstream: &upstream,
                inputs: node.inputs.iter().map(|&i| &self.values[i]).collect(),
                output: &self.values[id],
            };
            let input_grads = (node.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
            grads[id] = Some(upstream);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the leaf never influenced the root.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
