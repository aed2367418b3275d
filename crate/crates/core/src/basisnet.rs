//! The Basis CNN: input-specific reduced basis functions finished by the
//! differentiable Galerkin-projection activation, with a Frobenius
//! condition-number regularizer for training stability.
//!
//! The network maps the free-node input field through stride-1 conv→BN→act
//! blocks (no pooling) to `N` channels via a linear 1×1 convolution; each
//! output channel, flattened, is one basis column of `P ∈ R^{N_free × N}`.

use crate::autodiff::{
    adam_step, cosine_lr, ops, ActKind, AdamState, BnState, CosineSchedule, Mode, ParamStore,
    Tape, Tensor, VarId,
};
use crate::dataset::{Dataset, TrainSample};
use crate::error::{Error, Result};
use crate::fem::{relative_test_mean_error, FemSystem};
use crate::galerkin::{
    self, cond_frobenius_grad, galerkin_vjp, prepare_cache, pullback_an_to_p, GalerkinCache,
};
use crate::nn::{init_rng, ConvBlockSpec, ConvStack};
use crate::rng::{derive_seed, seeded};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Architecture and training hyperparameters of a Basis CNN.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisNetCfg {
    /// Free-node input extent (height, width).
    pub input_hw: (usize, usize),
    /// Channel width per conv block, stride 1 everywhere.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub n_basis: usize,
    /// Stability weight on the squared Frobenius condition number.
    pub lambda_g: f64,
    pub activation: ActKind,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_floor: f64,
    pub bn_momentum: f64,
    /// 1-norm condition estimate above which a sample is skipped.
    pub cond_skip_threshold: f64,
    /// Abort when more than this fraction of an epoch is skipped.
    pub max_skip_fraction: f64,
}

impl BasisNetCfg {
    /// Published architecture: 25×25 kernels, channels 32..128, N = 10.
    pub fn paper_default(input_hw: (usize, usize)) -> Self {
        BasisNetCfg {
            input_hw,
            channels: vec![32, 32, 64, 64, 128, 128],
            kernel: 25,
            n_basis: 10,
            lambda_g: 1e-6,
            activation: ActKind::Relu,
            batch: 32,
            epochs: 100,
            lr0: 1e-4,
            lr_floor: 0.0,
            bn_momentum: 0.9,
            cond_skip_threshold: galerkin::COND_SKIP_THRESHOLD,
            max_skip_fraction: 0.5,
        }
    }

    /// Desk-scale variant: 7×7 kernels, channels 8..32, N = 5 on a 15×15
    /// free grid.
    pub fn desk_default() -> Self {
        BasisNetCfg {
            input_hw: (15, 15),
            channels: vec![8, 8, 16, 16, 32, 32],
            kernel: 7,
            n_basis: 5,
            lambda_g: 1e-6,
            activation: ActKind::Relu,
            batch: 32,
            epochs: 100,
            lr0: 1e-3,
            lr_floor: 0.0,
            bn_momentum: 0.9,
            cond_skip_threshold: galerkin::COND_SKIP_THRESHOLD,
            max_skip_fraction: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_basis == 0 {
            return Err(Error::InvalidConfig("n_basis must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("kernel must be odd".into()));
        }
        if self.lambda_g < 0.0 {
            return Err(Error::InvalidConfig("lambda_g must be >= 0".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("need at least one conv block".into()));
        }
        Ok(())
    }

    fn stack(&self) -> ConvStack {
        ConvStack {
            blocks: self
                .channels
                .iter()
                .map(|&c| ConvBlockSpec {
                    out_ch: c,
                    kernel: self.kernel,
                    stride: 1,
                })
                .collect(),
            act: self.activation,
        }
    }
}

/// Learned basis columns for one input sample.
#[derive(Clone, Debug)]
pub struct BasisMatrix {
    /// N_free × N.
    pub p: DMatrix<f64>,
}

impl BasisMatrix {
    /// Columns whose norm collapsed to numerical zero.
    pub fn degenerate_columns(&self) -> Vec<usize> {
        (0..self.p.ncols())
            .filter(|&j| self.p.column(j).norm() < 1e-12)
            .collect()
    }
}

/// Basis CNN with parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct BasisNet {
    pub cfg: BasisNetCfg,
    pub params: ParamStore,
    pub bn: Vec<BnState>,
}

const PREFIX: &str = "basis";
const HEAD_W: &str = "basis.head.w";
const HEAD_B: &str = "basis.head.b";

impl BasisNet {
    pub fn init(cfg: BasisNetCfg, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let stack = cfg.stack();
        stack.init_params(1, PREFIX, &mut params, &mut rng);
        let c_last = stack.out_channels(1);
        // Final 1×1 convolution to N channels, linear (no BN, no activation).
        params.insert(
            HEAD_W,
            Tensor::randn(
                &mut rng,
                vec![cfg.n_basis, c_last, 1, 1],
                1.0 / (c_last as f64).sqrt(),
            ),
        );
        params.insert(HEAD_B, Tensor::zeros(vec![cfg.n_basis]));
        let bn = stack.bn_states(cfg.bn_momentum);
        Ok(BasisNet { cfg, params, bn })
    }

    /// Conv trunk plus 1×1 head on an already-bound tape; (B,1,H,W) → (B,N,H,W).
    fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &crate::autodiff::BoundParams,
        input: VarId,
        bn: &mut [BnState],
        mode: Mode,
    ) -> Result<VarId> {
        let stack = self.cfg.stack();
        let trunk = stack.forward(tape, bound, PREFIX, input, bn, mode)?;
        ops::conv2d_same(tape, trunk, bound.id(HEAD_W), bound.id(HEAD_B), 1)
    }

    /// Eval-mode forward for a batch of inputs; returns one basis matrix per
    /// sample. Deterministic: uses running BN statistics.
    pub fn basis_batch(&self, inputs: &Tensor) -> Result<Vec<BasisMatrix>> {
        let (b, _, h, w) = inputs.dims4();
        let (ch, cw) = self.cfg.input_hw;
        if (h, w) != (ch, cw) {
            return Err(Error::ShapeMismatch {
                context: "basis_forward",
                expected: format!("{ch}x{cw}"),
                got: format!("{h}x{w}"),
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.leaf(inputs.clone());
        let mut bn = self.bn.clone();
        let out = self.forward_bound(&mut tape, &bound, input, &mut bn, Mode::Eval)?;
        let val = tape.value(out);
        Ok((0..b).map(|bi| extract_basis(val, bi)).collect())
    }

    /// Single-sample convenience wrapper over [`basis_batch`](Self::basis_batch).
    pub fn basis_forward(&self, k_free: &[f64]) -> Result<BasisMatrix> {
        let (h, w) = self.cfg.input_hw;
        if k_free.len() != h * w {
            return Err(Error::ShapeMismatch {
                context: "basis_forward",
                expected: format!("{}", h * w),
                got: format!("{}", k_free.len()),
            });
        }
        let input = Tensor::new(vec![1, 1, h, w], k_free.to_vec());
        Ok(self.basis_batch(&input)?.remove(0))
    }

    /// Eval-mode Galerkin prediction `û` for one sample.
    pub fn predict(&self, sample: &TrainSample) -> Result<DVector<f64>> {
        let basis = self.basis_forward(&sample.k_free)?;
        let (u_hat, _) = galerkin::galerkin_activation(&basis.p, &sample.sys.a, &sample.sys.f)?;
        Ok(u_hat)
    }
}

/// Reads sample `b`'s basis matrix out of a (B,N,H,W) activation tensor.
fn extract_basis(t: &Tensor, b: usize) -> BasisMatrix {
    let (_, n, h, w) = t.dims4();
    let m = h * w;
    let mut p = DMatrix::zeros(m, n);
    for j in 0..n {
        let base = (b * n + j) * m;
        for i in 0..m {
            p[(i, j)] = t.data()[base + i];
        }
    }
    BasisMatrix { p }
}

/// Per-batch Galerkin factorizations plus the skip mask.
pub struct GalerkinBatch {
    pub caches: Vec<Option<GalerkinCache>>,
    pub mask: Vec<bool>,
    pub systems: Vec<Rc<FemSystem>>,
}

/// Factorizes `PᵀAP` for every sample of the batch; ill-conditioned samples
/// are masked out instead of failing the step.
pub fn prepare_galerkin_batch(
    p4: &Tensor,
    systems: Vec<Rc<FemSystem>>,
    skip_threshold: f64,
) -> GalerkinBatch {
    let (b, _, _, _) = p4.dims4();
    debug_assert_eq!(b, systems.len());
    let mut caches = Vec::with_capacity(b);
    let mut mask = Vec::with_capacity(b);
    for (bi, sys) in systems.iter().enumerate() {
        let basis = extract_basis(p4, bi);
        match prepare_cache(&basis.p, &sys.a, &sys.f, skip_threshold, false) {
            Ok(cache) => {
                caches.push(Some(cache));
                mask.push(true);
            }
            Err(_) => {
                caches.push(None);
                mask.push(false);
            }
        }
    }
    GalerkinBatch {
        caches,
        mask,
        systems,
    }
}

/// Tape op: per-sample Galerkin solve `û_b = P_b (P_bᵀA_bP_b)⁻¹ P_bᵀF_b`.
/// Skipped samples produce zero rows and zero gradient.
pub fn galerkin_solve_op(tape: &mut Tape, p4: VarId, batch: Rc<GalerkinBatch>) -> VarId {
    let (b, n, h, w) = tape.value(p4).dims4();
    let m = h * w;
    let mut out = vec![0.0; b * m];
    for bi in 0..b {
        if let Some(cache) = &batch.caches[bi] {
            let basis = extract_basis(tape.value(p4), bi);
            let u_hat = &basis.p * &cache.u_n;
            out[bi * m..(bi + 1) * m].copy_from_slice(u_hat.as_slice());
        }
    }
    let batch_b = batch.clone();
    tape.push(
        Tensor::new(vec![b, m], out),
        vec![p4],
        Box::new(move |ctx| {
            let up = ctx.upstream.data();
            let mut dp = vec![0.0; b * n * m];
            for bi in 0..b {
                let Some(cache) = &batch_b.caches[bi] else {
                    continue;
                };
                let basis = extract_basis(ctx.inputs[0], bi);
                let sys = &batch_b.systems[bi];
                let g = DVector::from_column_slice(&up[bi * m..(bi + 1) * m]);
                let grad = galerkin_vjp(cache, &basis.p, &sys.a, &sys.f, &g)
                    .expect("cache matches forward");
                for j in 0..n {
                    let base = (bi * n + j) * m;
                    for i in 0..m {
                        dp[base + i] = grad[(i, j)];
                    }
                }
            }
            vec![Tensor::new(vec![b, n, h, w], dp)]
        }),
    )
}

/// Tape op: per-sample Frobenius condition number of `PᵀAP` (0 when skipped).
pub fn galerkin_cond_op(tape: &mut Tape, p4: VarId, batch: Rc<GalerkinBatch>) -> VarId {
    let (b, n, h, w) = tape.value(p4).dims4();
    let m = h * w;
    let conds: Vec<f64> = batch
        .caches
        .iter()
        .map(|c| c.as_ref().map(|c| c.cond_f).unwrap_or(0.0))
        .collect();
    let batch_b = batch.clone();
    tape.push(
        Tensor::new(vec![b], conds),
        vec![p4],
        Box::new(move |ctx| {
            let up = ctx.upstream.data();
            let mut dp = vec![0.0; b * n * m];
            for bi in 0..b {
                let Some(cache) = &batch_b.caches[bi] else {
                    continue;
                };
                if up[bi] == 0.0 {
                    continue;
                }
                let basis = extract_basis(ctx.inputs[0], bi);
                let sys = &batch_b.systems[bi];
                let (_, grad_an) = cond_frobenius_grad(&cache.a_n)
                    .expect("cache holds an invertible A_N");
                let grad = pullback_an_to_p(&basis.p, &sys.a, &(up[bi] * grad_an));
                for j in 0..n {
                    let base = (bi * n + j) * m;
                    for i in 0..m {
                        dp[base + i] = grad[(i, j)];
                    }
                }
            }
            vec![Tensor::new(vec![b, n, h, w], dp)]
        }),
    )
}

/// Assembles the training loss on the tape:
/// `(1/B)Σ h²‖u − û‖² + λ_G (1/B)Σ cond_F(A_N)²` over unskipped samples.
fn loss_on_tape(
    tape: &mut Tape,
    p4: VarId,
    samples: &[&TrainSample],
    h2: f64,
    lambda_g: f64,
    skip_threshold: f64,
) -> (VarId, Rc<GalerkinBatch>) {
    let systems: Vec<Rc<FemSystem>> = samples.iter().map(|s| s.sys.clone()).collect();
    let batch = Rc::new(prepare_galerkin_batch(tape.value(p4), systems, skip_threshold));
    let mask = Rc::new(batch.mask.clone());
    let targets = Rc::new(
        samples
            .iter()
            .map(|s| s.u.as_slice().to_vec())
            .collect::<Vec<_>>(),
    );
    let u_hat = galerkin_solve_op(tape, p4, batch.clone());
    let mse = ops::masked_mse_mean(tape, u_hat, targets, mask.clone(), h2);
    let loss = if lambda_g > 0.0 {
        let cond = galerkin_cond_op(tape, p4, batch.clone());
        let c2 = ops::masked_mean_square(tape, cond, mask);
        ops::add_scaled(tape, mse, c2, lambda_g)
    } else {
        mse
    };
    (loss, batch)
}

/// Training-loss value for a batch of samples (train-mode batch norm).
pub fn basis_loss(net: &mut BasisNet, samples: &[&TrainSample], lambda_g: f64) -> Result<f64> {
    let (h, w) = net.cfg.input_hw;
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let input = tape.leaf(batch_input(samples, h, w));
    let mut bn = net.bn.clone();
    let p4 = net.forward_bound(&mut tape, &bound, input, &mut bn, Mode::Train)?;
    let h2 = net.cfg_h2(samples);
    let (loss, _) =
        loss_on_tape(&mut tape, p4, samples, h2, lambda_g, net.cfg.cond_skip_threshold);
    Ok(tape.value(loss).item())
}

impl BasisNet {
    fn cfg_h2(&self, samples: &[&TrainSample]) -> f64 {
        let h = samples[0].sys.grid.h();
        h * h
    }
}

fn batch_input(samples: &[&TrainSample], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        debug_assert_eq!(s.k_free.len(), h * w);
        data.extend_from_slice(&s.k_free);
    }
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eps_test: f64,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_eps: f64,
}

/// Trains the Basis CNN with Adam under a cosine schedule; retains the
/// checkpoint with the best held-out error. Deterministic per seed.
pub fn train_basis(
    train: &Dataset,
    test: &Dataset,
    cfg: &BasisNetCfg,
    seed: u64,
) -> Result<(BasisNet, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig("train/test sets must be nonempty".into()));
    }
    let mut net = BasisNet::init(cfg.clone(), derive_seed(seed, 0))?;
    let steps_per_epoch = (train.len() / cfg.batch).max(1);
    let schedule = CosineSchedule {
        lr0: cfg.lr0,
        total_steps: cfg.epochs * steps_per_epoch,
        floor: cfg.lr_floor,
    };
    let mut adam = AdamState::new();
    let mut history = TrainHistory {
        best_eps: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<(ParamStore, Vec<BnState>)> = None;
    let (h, w) = cfg.input_hw;
    let h2 = {
        let gh = train.grid.h();
        gh * gh
    };

    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded(derive_seed(seed, 1 + epoch as u64)));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut skipped = 0usize;
        let mut seen = 0usize;
        let mut lr = schedule.lr0;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue; // batch norm needs at least two samples
            }
            let samples: Vec<&TrainSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape);
            let input = tape.leaf(batch_input(&samples, h, w));
            let mut bn = std::mem::take(&mut net.bn);
            let p4 = net.forward_bound(&mut tape, &bound, input, &mut bn, Mode::Train)?;
            net.bn = bn;
            let (loss, gal) = loss_on_tape(
                &mut tape,
                p4,
                &samples,
                h2,
                cfg.lambda_g,
                cfg.cond_skip_threshold,
            );
            skipped += gal.mask.iter().filter(|&&k| !k).count();
            seen += samples.len();
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss);
            let grad_map = bound.collect_grads(&net.params, &grads);
            lr = cosine_lr(global_step, &schedule)?;
            adam_step(&mut net.params, &grad_map, &mut adam, lr);
            global_step += 1;
            epoch_loss += loss_val;
            batches += 1;
        }
        if seen > 0 && (skipped as f64) / (seen as f64) > cfg.max_skip_fraction {
            return Err(Error::TrainingAborted(format!(
                "epoch {epoch}: {skipped}/{seen} samples skipped for ill-conditioned A_N"
            )));
        }

        let eps_test = evaluate_eps(&net, test)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            eps_test,
            lr,
            skipped,
        });
        if eps_test < history.best_eps {
            history.best_eps = eps_test;
            history.best_epoch = epoch;
            best = Some((net.params.clone(), net.bn.clone()));
        }
    }

    if let Some((params, bn)) = best {
        net.params = params;
        net.bn = bn;
    }
    Ok((net, history))
}

/// Relative test mean error of eval-mode Galerkin predictions; samples whose
/// reduced system is singular contribute their full reference norm.
pub fn evaluate_eps(net: &BasisNet, test: &Dataset) -> Result<f64> {
    let (h, w) = net.cfg.input_hw;
    let mut preds = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    for chunk in test.samples.chunks(256) {
        let samples: Vec<&TrainSample> = chunk.iter().collect();
        let input = batch_input(&samples, h, w);
        let bases = net.basis_batch(&input)?;
        for (s, basis) in samples.iter().zip(bases) {
            let pred = match galerkin::galerkin_activation(&basis.p, &s.sys.a, &s.sys.f) {
                Ok((u_hat, _)) => u_hat,
                Err(_) => DVector::zeros(s.u.len()),
            };
            preds.push(pred);
            refs.push(s.u.clone());
        }
    }
    relative_test_mean_error(&preds, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::fd_check_scalar;
    use crate::fem::{assemble_darcy, solve_linear, ElementKind, FieldNodal, Grid2D};
    use crate::fields::{sample_binomial_field, BinomialProcessCfg};

    fn tiny_dataset(n: usize, grid_n: usize, seed: u64) -> Dataset {
        let grid = Grid2D::new(grid_n, grid_n, ElementKind::Quad).unwrap();
        let cfg = BinomialProcessCfg {
            n: 2,
            r: 0.15,
            kappa0: 1.0,
            kappa1: 50.0,
        };
        let mut ds = Dataset::new(grid.clone());
        for i in 0..n {
            let k = sample_binomial_field(&cfg, &grid, derive_seed(seed, i as u64)).unwrap();
            let sys = assemble_darcy(&k, &grid).unwrap();
            let (u, _) = solve_linear(&sys, 1e-11).unwrap();
            ds.push(&k, u, sys);
        }
        ds
    }

    fn tiny_cfg(grid_n: usize) -> BasisNetCfg {
        let f = grid_n - 2;
        BasisNetCfg {
            input_hw: (f, f),
            channels: vec![4],
            kernel: 3,
            n_basis: 2,
            lambda_g: 1e-6,
            activation: ActKind::Tanh,
            batch: 4,
            epochs: 2,
            lr0: 1e-3,
            lr_floor: 0.0,
            bn_momentum: 0.9,
            cond_skip_threshold: 1e12,
            max_skip_fraction: 0.5,
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let net = BasisNet::init(BasisNetCfg::desk_default(), 1).unwrap();
        let k: Vec<f64> = (0..225).map(|i| 1.0 + (i % 7) as f64).collect();
        let b1 = net.basis_forward(&k).unwrap();
        let b2 = net.basis_forward(&k).unwrap();
        assert_eq!(b1.p.shape(), (225, 5));
        assert_eq!(b1.p, b2.p);
        assert!(b1.p.iter().all(|v| v.is_finite()));
        assert!(b1.degenerate_columns().is_empty());
    }

    #[test]
    fn full_gradient_gate_matches_finite_differences() {
        // conv → BN → 1×1 conv → σ_G + λ_G·cond_F² on a 9-free-node grid.
        let ds = tiny_dataset(3, 5, 7);
        let cfg = tiny_cfg(5);
        let net = BasisNet::init(cfg.clone(), 3).unwrap();
        let samples: Vec<&TrainSample> = ds.samples.iter().collect();
        let h2 = {
            let h = ds.grid.h();
            h * h
        };
        let leaves: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
        let samples_rc: Rc<Vec<TrainSample>> =
            Rc::new(samples.iter().map(|s| (*s).clone()).collect());
        let net_cfg = cfg.clone();
        let input_t = batch_input(&samples, 3, 3);
        let build = move |tape: &mut Tape, ids: &[VarId]| {
            let mut store = ParamStore::new();
            for (name, &id) in names.iter().zip(ids) {
                store.insert(name.clone(), tape.value(id).clone());
            }
            // Rebind so forward uses the probe values on this tape.
            let net = BasisNet {
                cfg: net_cfg.clone(),
                params: store,
                bn: net_cfg.stack().bn_states(net_cfg.bn_momentum),
            };
            // Manual bound map aligned with the probe ids.
            let bound = ManualBound {
                names: names.clone(),
                ids: ids.to_vec(),
            };
            let input = tape.leaf(input_t.clone());
            let mut bn = net.bn.clone();
            let p4 = forward_with(&net, tape, &bound, input, &mut bn, Mode::Train).unwrap();
            let sample_refs: Vec<&TrainSample> = samples_rc.iter().collect();
            let (loss, _) = loss_on_tape(
                tape,
                p4,
                &sample_refs,
                h2,
                net_cfg.lambda_g,
                net_cfg.cond_skip_threshold,
            );
            loss
        };
        let err = fd_check_scalar(&leaves, build, 1e-5);
        assert!(err < 1e-5, "full gradient gate: max rel error {err}");
    }

    // Test-only adapter: BoundParams built from explicit ids.
    struct ManualBound {
        names: Vec<String>,
        ids: Vec<VarId>,
    }

    impl ManualBound {
        fn id(&self, name: &str) -> VarId {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .unwrap_or_else(|| panic!("missing {name}"));
            self.ids[idx]
        }
    }

    fn forward_with(
        net: &BasisNet,
        tape: &mut Tape,
        bound: &ManualBound,
        input: VarId,
        bn: &mut [BnState],
        mode: Mode,
    ) -> Result<VarId> {
        let stack = net.cfg.stack();
        let mut x = input;
        for (i, b) in stack.blocks.iter().enumerate() {
            let w = bound.id(&format!("{PREFIX}.block{i}.conv.w"));
            let bias = tape.leaf(Tensor::zeros(vec![b.out_ch]));
            x = ops::conv2d_same(tape, x, w, bias, b.stride)?;
            let gamma = bound.id(&format!("{PREFIX}.block{i}.bn.gamma"));
            let beta = bound.id(&format!("{PREFIX}.block{i}.bn.beta"));
            x = ops::batchnorm(tape, x, gamma, beta, &mut bn[i], mode)?;
            x = ops::activation(tape, x, stack.act);
        }
        ops::conv2d_same(tape, x, bound.id(HEAD_W), bound.id(HEAD_B), 1)
    }

    #[test]
    fn loss_additivity_in_lambda() {
        let ds = tiny_dataset(4, 5, 9);
        let cfg = tiny_cfg(5);
        let mut net = BasisNet::init(cfg, 5).unwrap();
        let samples: Vec<&TrainSample> = ds.samples.iter().collect();
        let l0 = basis_loss(&mut net, &samples, 0.0).unwrap();
        let l1 = basis_loss(&mut net, &samples, 1e-3).unwrap();
        // Difference is exactly λ·mean(cond²).
        let (h, w) = net.cfg.input_hw;
        let input = batch_input(&samples, h, w);
        // Train-mode forward for the cond values (same BN stats as the loss).
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape);
        let inp = tape.leaf(input);
        let mut bn = net.bn.clone();
        let p4 = net
            .forward_bound(&mut tape, &bound, inp, &mut bn, Mode::Train)
            .unwrap();
        let systems: Vec<Rc<FemSystem>> = samples.iter().map(|s| s.sys.clone()).collect();
        let gal = prepare_galerkin_batch(tape.value(p4), systems, 1e12);
        let mean_c2: f64 = gal
            .caches
            .iter()
            .flatten()
            .map(|c| c.cond_f * c.cond_f)
            .sum::<f64>()
            / gal.caches.len() as f64;
        assert!(
            ((l1 - l0) - 1e-3 * mean_c2).abs() < 1e-9 * (1.0 + mean_c2),
            "additivity: {l0} {l1} {mean_c2}"
        );
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        // One-column basis equal to the solution: misfit 0 with λ = 0.
        let ds = tiny_dataset(2, 5, 11);
        let samples: Vec<&TrainSample> = ds.samples.iter().collect();
        let mut tape = Tape::new();
        let n_free = samples[0].u.len();
        let mut data = Vec::new();
        for s in &samples {
            data.extend_from_slice(s.u.as_slice());
        }
        let p4 = tape.leaf(Tensor::new(vec![2, 1, 3, 3], data));
        let _ = n_free;
        let (loss, _) = loss_on_tape(&mut tape, p4, &samples, 1.0, 0.0, 1e12);
        assert!(tape.value(loss).item() < 1e-18);
    }

    #[test]
    fn training_loop_is_deterministic_and_improves() {
        let ds = tiny_dataset(20, 5, 13);
        let (train, test) = ds.split(16).unwrap();
        let mut cfg = tiny_cfg(5);
        cfg.epochs = 3;
        let (net_a, hist_a) = train_basis(&train, &test, &cfg, 42).unwrap();
        let (net_b, hist_b) = train_basis(&train, &test, &cfg, 42).unwrap();
        // Bitwise-identical across reruns.
        for ((na, ta), (nb, tb)) in net_a.params.iter().zip(net_b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(hist_a.epochs[0].train_loss, hist_b.epochs[0].train_loss);
        assert_eq!(hist_a.epochs.len(), 3);
        // Loss moved (training does something).
        assert_ne!(hist_a.epochs[0].train_loss, hist_a.epochs[2].train_loss);
    }
}
