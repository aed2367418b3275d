//! Network assembly helpers shared by the Basis, Coef, and recognition nets:
//! conv→BN→activation blocks, MLP stacks, and Kaiming-style initialization.

use crate::autodiff::{ops, ActKind, BnState, BoundParams, Mode, ParamStore, Tape, Tensor, VarId};
use crate::error::Result;
use crate::rng::seeded;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A stack of conv→BN→activation blocks with shared activation kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlockSpec>,
    pub act: ActKind,
}

fn kaiming_std(fan_in: usize, act: ActKind) -> f64 {
    let gain = match act {
        ActKind::Relu => 2.0_f64.sqrt(),
        _ => 1.0,
    };
    gain / (fan_in as f64).sqrt()
}

impl ConvStack {
    /// Registers conv weights/biases and BN affine parameters under
    /// `prefix.blockN.*`.
    pub fn init_params(
        &self,
        in_ch: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) {
        let mut cin = in_ch;
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            store.insert(
                format!("{prefix}.block{i}.conv.w"),
                Tensor::randn(
                    rng,
                    vec![b.out_ch, cin, b.kernel, b.kernel],
                    kaiming_std(fan_in, self.act),
                ),
            );
            store.insert(
                format!("{prefix}.block{i}.bn.gamma"),
                Tensor::new(vec![b.out_ch], vec![1.0; b.out_ch]),
            );
            store.insert(
                format!("{prefix}.block{i}.bn.beta"),
                Tensor::zeros(vec![b.out_ch]),
            );
            cin = b.out_ch;
        }
    }

    pub fn bn_states(&self, momentum: f64) -> Vec<BnState> {
        self.blocks
            .iter()
            .map(|b| BnState::new(b.out_ch, momentum))
            .collect()
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        self.blocks.last().map(|b| b.out_ch).unwrap_or(in_ch)
    }

    /// Spatial extent after all strides (SAME padding: `ceil(dim/s)` each).
    pub fn out_hw(&self, mut hw: (usize, usize)) -> (usize, usize) {
        for b in &self.blocks {
            hw = (hw.0.div_ceil(b.stride), hw.1.div_ceil(b.stride));
        }
        hw
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        input: VarId,
        bn: &mut [BnState],
        mode: Mode,
    ) -> Result<VarId> {
        debug_assert_eq!(bn.len(), self.blocks.len());
        let mut x = input;
        for (i, b) in self.blocks.iter().enumerate() {
            let w = bound.id(&format!("{prefix}.block{i}.conv.w"));
            // Bias is omitted: batch norm directly after the convolution
            // cancels any per-channel additive constant.
            let bias = tape.leaf(Tensor::zeros(vec![b.out_ch]));
            x = ops::conv2d_same(tape, x, w, bias, b.stride)?;
            let gamma = bound.id(&format!("{prefix}.block{i}.bn.gamma"));
            let beta = bound.id(&format!("{prefix}.block{i}.bn.beta"));
            x = ops::batchnorm(tape, x, gamma, beta, &mut bn[i], mode)?;
            x = ops::activation(tape, x, self.act);
        }
        Ok(x)
    }
}

/// Fully-connected stack: hidden layers with activation, linear final layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub out: usize,
    pub act: ActKind,
}

impl MlpSpec {
    pub fn init_params(
        &self,
        in_dim: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) {
        let mut din = in_dim;
        for (i, &width) in self.hidden.iter().enumerate() {
            store.insert(
                format!("{prefix}.fc{i}.w"),
                Tensor::randn(rng, vec![width, din], kaiming_std(din, self.act)),
            );
            store.insert(format!("{prefix}.fc{i}.b"), Tensor::zeros(vec![width]));
            din = width;
        }
        store.insert(
            format!("{prefix}.out.w"),
            Tensor::randn(rng, vec![self.out, din], kaiming_std(din, ActKind::Identity)),
        );
        store.insert(format!("{prefix}.out.b"), Tensor::zeros(vec![self.out]));
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        input: VarId,
    ) -> Result<VarId> {
        let mut x = input;
        for i in 0..self.hidden.len() {
            let w = bound.id(&format!("{prefix}.fc{i}.w"));
            let b = bound.id(&format!("{prefix}.fc{i}.b"));
            x = ops::fully_connected(tape, x, w, b)?;
            x = ops::activation(tape, x, self.act);
        }
        let w = bound.id(&format!("{prefix}.out.w"));
        let b = bound.id(&format!("{prefix}.out.b"));
        ops::fully_connected(tape, x, w, b)
    }
}

/// Deterministic parameter init stream for a named network.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    seeded(seed)
}
