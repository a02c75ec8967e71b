//! Independent verification: central finite-difference gradient checks and a
//! battery of closed-form invariant probes. Shared by the unit tests, the
//! `selftest` subcommand and the acceptance suite, so every consumer runs the
//! same checks with the same tolerances.

use crate::attention::{
    attention_logits, l2_normalize_rows, lp_normalize_rows, AttentionConfig, AttentionLayer,
    AttentionVariant, DEFAULT_NORM_EPSILON,
};
use crate::data::{make_folds, BatchSampler};
use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig, LAYER_NORM_EPS};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// The norm orders exercised by the experiment grid.
pub const SWEEP_PS: [f64; 7] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

// ---- finite-difference harness ------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Base step; scaled by max(1, |w|) per coordinate.
    pub h: f64,
    /// Floor for the relative-error denominator.
    pub floor: f64,
    /// Coordinates probed per parameter tensor (all of them if smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-5,
            // central differences carry ~eps*|f|/h ~ 1e-11 of cancellation
            // noise; the floor must sit well above noise/tolerance so that
            // near-zero gradients are compared absolutely, not against noise
            floor: 1e-6,
            coords_per_param: 6,
            seed: 0x5EED,
        }
    }
}

/// Pass/fail threshold on the gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-3;

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < GRAD_REL_TOL
    }
}

/// Anything whose scalar output can be differentiated against its parameter
/// store: the harness perturbs coordinates through `store_mut` and compares
/// `grads` with central differences of `eval`.
pub trait FdTarget {
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    /// Scalar objective at the current parameter values.
    fn eval(&mut self) -> Result<f64>;
    /// Analytic gradients at the current values, one buffer per parameter in
    /// store order (zeros for parameters the graph never touches).
    fn grads(&mut self) -> Result<Vec<Vec<f64>>>;
}

fn collect_grads(store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    store
        .iter()
        .map(|(_, p)| match &p.grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.value.numel()],
        })
        .collect()
}

pub fn fd_run<T: FdTarget>(target: &mut T, cfg: &FdConfig) -> Result<FdReport> {
    let analytic = target.grads()?;
    let meta: Vec<(ParamId, String, usize)> = target
        .store_mut()
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::from("no coordinates checked"),
    };
    for (pi, (id, name, numel)) in meta.iter().enumerate() {
        let take = cfg.coords_per_param.min(*numel);
        let coords: Vec<usize> = if take == *numel {
            (0..*numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, *numel, take).into_vec()
        };
        for c in coords {
            let orig = target.store_mut().value(*id).data()[c];
            let h = cfg.h * orig.abs().max(1.0);
            target.store_mut().value_mut(*id).data_mut()[c] = orig + h;
            let f_plus = target.eval()?;
            target.store_mut().value_mut(*id).data_mut()[c] = orig - h;
            let f_minus = target.eval()?;
            target.store_mut().value_mut(*id).data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst =
                    format!("{name}[{c}]: analytic {a:.9e}, numeric {numeric:.9e}, rel {rel:.3e}");
            }
        }
    }
    Ok(report)
}

// ---- concrete targets ----------------------------------------------------------

/// One attention block, scalar objective = sum(output * fixed_weights).
pub struct AttentionTarget {
    pub store: ParamStore<f64>,
    pub layer: AttentionLayer,
    pub x_id: ParamId,
    pub weights: Tensor<f64>,
    pub batch: usize,
    pub seq: usize,
}

impl AttentionTarget {
    fn objective(&self, tape: &mut Tape<f64>) -> Result<crate::tensor::tape::Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout off; rng unused
        let x = tape.param(&self.store, self.x_id);
        let out =
            self.layer
                .forward(&self.store, tape, x, self.batch, self.seq, false, &mut rng)?;
        let w = tape.constant(self.weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum_all(prod))
    }
}

impl FdTarget for AttentionTarget {
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn eval(&mut self) -> Result<f64> {
        let mut tape = Tape::inference();
        let root = self.objective(&mut tape)?;
        Ok(tape.value(root).item())
    }

    fn grads(&mut self) -> Result<Vec<Vec<f64>>> {
        self.store.zero_grads();
        let mut tape = Tape::new();
        let root = self.objective(&mut tape)?;
        tape.backward(root)?;
        tape.export_grads(&mut self.store)?;
        let out = collect_grads(&self.store);
        self.store.zero_grads();
        Ok(out)
    }
}

/// A whole model, scalar objective = language-model loss on one fixed batch.
pub struct ModelTarget {
    pub model: GptModel<f64>,
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
}

impl FdTarget for ModelTarget {
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.model.store
    }

    fn eval(&mut self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::inference();
        let loss = self
            .model
            .loss(&mut tape, &self.ids, &self.targets, 1, false, &mut rng)?;
        Ok(tape.value(loss).item())
    }

    fn grads(&mut self) -> Result<Vec<Vec<f64>>> {
        self.model.store.zero_grads();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let loss = self
            .model
            .loss(&mut tape, &self.ids, &self.targets, 1, false, &mut rng)?;
        tape.backward(loss)?;
        tape.export_grads(&mut self.model.store)?;
        let out = collect_grads(&self.model.store);
        self.model.store.zero_grads();
        Ok(out)
    }
}

// ---- probe-point construction --------------------------------------------------

/// For p < 2 the |v|^p kink at v = 0 ruins finite differences, so the probe
/// point must keep every q/k component at least this far from zero.
pub const QK_COMPONENT_GUARD: f64 = 0.05;

/// Push q/k projections away from zero: alternating unit biases dominate a
/// shrunken weight matrix, so each component sits near +-1.
fn guard_qk_projections(store: &mut ParamStore<f64>, prefix: &str) {
    for name in [format!("{prefix}.b_q"), format!("{prefix}.b_k")] {
        let id = store.find(&name).expect("projection bias exists");
        for (j, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    for name in [format!("{prefix}.w_q"), format!("{prefix}.w_k")] {
        let id = store.find(&name).expect("projection weight exists");
        for v in store.value_mut(id).data_mut() {
            *v *= 0.1;
        }
    }
}

/// Smallest |component| across the q and k projections of block 0, computed
/// from the store through the same ops the model applies (embed, layer norm,
/// linear). Verifies that a guarded probe point really is away from the kink.
fn model_qk_min_component(model: &GptModel<f64>, ids: &[u32]) -> Result<f64> {
    let store = &model.store;
    let find = |n: &str| {
        store
            .find(n)
            .ok_or_else(|| Error::Contract(format!("parameter {n} not found")))
    };
    let mut tape = Tape::<f64>::inference();
    let wte = tape.param(store, find("wte")?);
    let wpe = tape.param(store, find("wpe")?);
    let tok = tape.embedding_lookup(wte, ids)?;
    let pos_ids: Vec<u32> = (0..ids.len() as u32).collect();
    let pos = tape.embedding_lookup(wpe, &pos_ids)?;
    let x = tape.add(tok, pos)?;
    let g = tape.param(store, find("block0.ln1.gain")?);
    let b = tape.param(store, find("block0.ln1.bias")?);
    let xn = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
    let mut min_abs = f64::INFINITY;
    for (wn, bn) in [
        ("block0.attn.w_q", "block0.attn.b_q"),
        ("block0.attn.w_k", "block0.attn.b_k"),
    ] {
        let w = tape.param(store, find(wn)?);
        let bb = tape.param(store, find(bn)?);
        let prod = tape.matmul(xn, w)?;
        let qk = tape.add_row(prod, bb)?;
        for &v in tape.data_of(qk) {
            min_abs = min_abs.min(v.abs());
        }
    }
    Ok(min_abs)
}

/// Same probe for a standalone attention block whose input is a store entry.
fn attention_qk_min_component(target: &AttentionTarget) -> f64 {
    let mut tape = Tape::<f64>::inference();
    let x = tape.param(&target.store, target.x_id);
    let mut min_abs = f64::INFINITY;
    for (w, b) in [
        (target.layer.w_q, target.layer.b_q),
        (target.layer.w_k, target.layer.b_k),
    ] {
        let wv = tape.param(&target.store, w);
        let bv = tape.param(&target.store, b);
        let prod = tape.matmul(x, wv).expect("probe matmul");
        let qk = tape.add_row(prod, bv).expect("probe bias add");
        for &v in tape.data_of(qk) {
            min_abs = min_abs.min(v.abs());
        }
    }
    min_abs
}

/// Build the standalone attention-block target for a gradient check.
pub fn attention_grad_target(config: AttentionConfig, seed: u64) -> Result<AttentionTarget> {
    let d_model = config.heads * config.head_dim;
    let (batch, seq) = (1usize, 4usize);
    let guard = config.variant == AttentionVariant::Lp && config.p < 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let layer = AttentionLayer::init(&mut store, "attn", d_model, config, 0.02, &mut rng)?;
    if guard {
        guard_qk_projections(&mut store, "attn");
    }
    // input components in +-[0.5, 1.5]: informative and, under the guarded
    // projections, keeps q/k far from the |v|^p kink
    let x_data: Vec<f64> = (0..batch * seq * d_model)
        .map(|_| {
            let mag = 0.5 + rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let x_id = store.register(
        "input.x",
        Tensor::new(vec![batch * seq, d_model], x_data)?,
        false,
    )?;
    let weights = Tensor::randn(vec![batch * seq, d_model], 1.0, &mut rng);
    let target = AttentionTarget {
        store,
        layer,
        x_id,
        weights,
        batch,
        seq,
    };
    if guard {
        let min_abs = attention_qk_min_component(&target);
        if min_abs < QK_COMPONENT_GUARD {
            return Err(Error::Contract(format!(
                "guarded probe point still has a q/k component at {min_abs:.4}"
            )));
        }
    }
    Ok(target)
}

/// Build the tiny-model target (1 layer, d=8, T=4) for a gradient check.
pub fn model_grad_target(variant: AttentionVariant, p: f64, seed: u64) -> Result<ModelTarget> {
    let config = ModelConfig::new(1, 2, 8, 4, 11, 0.0, variant, p, seed)?;
    let mut model = GptModel::<f64>::init(config)?;
    let ids = vec![1u32, 5, 9, 3];
    let targets = vec![5u32, 9, 3, 0];
    if variant == AttentionVariant::Lp && p < 2.0 {
        guard_qk_projections(&mut model.store, "block0.attn");
        let min_abs = model_qk_min_component(&model, &ids)?;
        if min_abs < QK_COMPONENT_GUARD {
            return Err(Error::Contract(format!(
                "guarded probe point still has a q/k component at {min_abs:.4}"
            )));
        }
    }
    Ok(ModelTarget {
        model,
        ids,
        targets,
    })
}

// ---- invariant battery ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: false,
            detail: detail.into(),
        }
    }
}

fn normalize_batch(rows: usize, dk: usize, p: f64, scale: f64, data: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::<f64>::inference();
    let scaled: Vec<f64> = data.iter().map(|v| v * scale).collect();
    let x = tape.leaf(Tensor::new(vec![rows, dk], scaled)?);
    let out = lp_normalize_rows(&mut tape, x, p, DEFAULT_NORM_EPSILON)?;
    Ok(tape.data_of(out).to_vec())
}

/// Unit norm and scale invariance of the row normalizer (1,000 vectors split
/// over d_k in {4, 64}; each tested at every sweep p and scale).
pub fn check_unit_norms(seed: u64) -> Result<CheckOutcome> {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_norm = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut vectors = 0usize;
    for dk in [4usize, 64] {
        let rows = 500usize;
        vectors += rows;
        let base = Tensor::<f64>::randn(vec![rows, dk], 1.7, &mut rng).into_data();
        for p in SWEEP_PS {
            let reference = normalize_batch(rows, dk, p, 1.0, &base)?;
            for (r, row) in reference.chunks(dk).enumerate() {
                let norm = row
                    .iter()
                    .map(|v| v.abs().powf(p))
                    .sum::<f64>()
                    .powf(1.0 / p);
                let dev = (norm - 1.0).abs();
                worst_norm = worst_norm.max(dev);
                if dev > TOL {
                    return Ok(CheckOutcome::fail(
                        "unit-norm",
                        format!("dk {dk}, p {p}, row {r}: |norm - 1| = {dev:.3e} > {TOL:e}"),
                    ));
                }
            }
            for c in [1e-3, 1.0, 1e3] {
                let scaled = normalize_batch(rows, dk, p, c, &base)?;
                for (i, (a, b)) in reference.iter().zip(&scaled).enumerate() {
                    let dev = (a - b).abs();
                    worst_scale = worst_scale.max(dev);
                    if dev > TOL {
                        return Ok(CheckOutcome::fail(
                            "scale-invariance",
                            format!(
                                "dk {dk}, p {p}, c {c:e}, component {i}: |diff| = {dev:.3e} > {TOL:e}"
                            ),
                        ));
                    }
                }
            }
        }
    }
    Ok(CheckOutcome::pass(
        "unit-norm+scale-invariance",
        format!(
            "{vectors} vectors x {} p values: max |norm-1| {worst_norm:.3e}, max scale drift {worst_scale:.3e} (tol {TOL:e})",
            SWEEP_PS.len()
        ),
    ))
}

/// lp at p=2 must match the independently coded l2 route, both on raw rows
/// and through full attention layers sharing the same weights.
pub fn check_p2_reduction(seed: u64) -> Result<CheckOutcome> {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;

    // raw rows
    let rows = 64usize;
    let dk = 8usize;
    let data = Tensor::<f64>::randn(vec![rows, dk], 2.0, &mut rng).into_data();
    let mut tape = Tape::<f64>::inference();
    let x = tape.leaf(Tensor::new(vec![rows, dk], data.clone())?);
    let via_lp = lp_normalize_rows(&mut tape, x, 2.0, DEFAULT_NORM_EPSILON)?;
    let x2 = tape.leaf(Tensor::new(vec![rows, dk], data)?);
    let via_l2 = l2_normalize_rows(&mut tape, x2, DEFAULT_NORM_EPSILON)?;
    for (a, b) in tape.data_of(via_lp).iter().zip(tape.data_of(via_l2)) {
        worst = worst.max((a - b).abs());
    }

    // full layers sharing parameters
    let d_model = 8usize;
    let (batch, seq) = (2usize, 5usize);
    let mut store = ParamStore::<f64>::new();
    let layer_lp = AttentionLayer::init(
        &mut store,
        "attn",
        d_model,
        AttentionConfig::lp(2.0, 2, 4, 0.0)?,
        0.02,
        &mut rng,
    )?;
    let layer_qk = AttentionLayer {
        config: AttentionConfig::qknorm(2, 4, 0.0)?,
        ..layer_lp.clone()
    };
    let x_data = Tensor::<f64>::randn(vec![batch * seq, d_model], 1.0, &mut rng);
    let mut tape = Tape::<f64>::inference();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let xv = tape.leaf(x_data.clone());
    let out_lp = layer_lp.forward(&store, &mut tape, xv, batch, seq, false, &mut dummy)?;
    let xv2 = tape.leaf(x_data);
    let out_qk = layer_qk.forward(&store, &mut tape, xv2, batch, seq, false, &mut dummy)?;
    for (a, b) in tape.data_of(out_lp).iter().zip(tape.data_of(out_qk)) {
        worst = worst.max((a - b).abs());
    }

    if worst <= TOL {
        Ok(CheckOutcome::pass(
            "p2-reduction",
            format!("lp(p=2) vs qknorm: max |diff| {worst:.3e} (tol {TOL:e})"),
        ))
    } else {
        Ok(CheckOutcome::fail(
            "p2-reduction",
            format!("lp(p=2) vs qknorm diverge: max |diff| {worst:.3e} > {TOL:e}"),
        ))
    }
}

/// |alpha * q_hat . k_hat| <= alpha * d_k^max(0, 1-2/p) + 1e-4 over random pairs.
pub fn check_logit_bound(pairs_per_p: usize, seed: u64) -> Result<CheckOutcome> {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_margin = f64::INFINITY;
    let mut checked = 0usize;
    for p in SWEEP_PS {
        for dk in [4usize, 64] {
            let rows = pairs_per_p / 2;
            let alpha = (dk as f64).sqrt();
            let bound = alpha * (dk as f64).powf((1.0 - 2.0 / p).max(0.0)) + TOL;
            let q = Tensor::<f64>::randn(vec![rows, dk], 3.0, &mut rng).into_data();
            let k = Tensor::<f64>::randn(vec![rows, dk], 0.3, &mut rng).into_data();
            let qh = normalize_batch(rows, dk, p, 1.0, &q)?;
            let kh = normalize_batch(rows, dk, p, 1.0, &k)?;
            for r in 0..rows {
                let dot: f64 = (0..dk).map(|j| qh[r * dk + j] * kh[r * dk + j]).sum();
                let s = (alpha * dot).abs();
                checked += 1;
                worst_margin = worst_margin.min(bound - s);
                if s > bound {
                    return Ok(CheckOutcome::fail(
                        "logit-bound",
                        format!("p {p}, dk {dk}, pair {r}: |s| = {s:.6} exceeds bound {bound:.6}"),
                    ));
                }
            }
        }
    }
    Ok(CheckOutcome::pass(
        "logit-bound",
        format!("{checked} (q,k) pairs: smallest margin to bound {worst_margin:.3e}"),
    ))
}

/// Gradient fidelity of the standalone attention block for every variant and
/// sweep p.
pub fn check_attention_gradients() -> Result<CheckOutcome> {
    let fd = FdConfig::default();
    let mut total = 0usize;
    let mut worst: Option<(String, f64, String)> = None;
    let mut cases: Vec<(String, AttentionConfig)> = vec![
        ("standard".into(), AttentionConfig::standard(2, 4, 0.0)?),
        ("qknorm".into(), AttentionConfig::qknorm(2, 4, 0.0)?),
    ];
    for p in SWEEP_PS {
        cases.push((format!("lp p={p}"), AttentionConfig::lp(p, 2, 4, 0.0)?));
    }
    for (label, config) in cases {
        let mut target = attention_grad_target(config, 0xA77)?;
        let report = fd_run(&mut target, &fd)?;
        total += report.checked;
        if !report.passes() {
            return Ok(CheckOutcome::fail(
                "attention-grad",
                format!("{label}: {}", report.worst),
            ));
        }
        if worst.as_ref().is_none_or(|w| report.max_rel_err > w.1) {
            worst = Some((label, report.max_rel_err, report.worst));
        }
    }
    let (label, rel, at) = worst.unwrap();
    Ok(CheckOutcome::pass(
        "attention-grad",
        format!("{total} coordinates; worst case {label}: rel {rel:.3e} ({at})"),
    ))
}

/// Gradient fidelity of the full tiny model (1 layer, d=8, T=4) for every
/// variant and sweep p.
pub fn check_model_gradients() -> Result<CheckOutcome> {
    let fd = FdConfig {
        coords_per_param: 3,
        ..FdConfig::default()
    };
    let mut total = 0usize;
    let mut worst: Option<(String, f64, String)> = None;
    let mut cases: Vec<(String, AttentionVariant, f64)> = vec![
        ("standard".into(), AttentionVariant::Standard, 2.0),
        ("qknorm".into(), AttentionVariant::QkNorm, 2.0),
    ];
    for p in SWEEP_PS {
        cases.push((format!("lp p={p}"), AttentionVariant::Lp, p));
    }
    for (label, variant, p) in cases {
        let mut target = model_grad_target(variant, p, 0xB0B)?;
        let report = fd_run(&mut target, &fd)?;
        total += report.checked;
        if !report.passes() {
            return Ok(CheckOutcome::fail(
                "model-grad",
                format!("{label}: {}", report.worst),
            ));
        }
        if worst.as_ref().is_none_or(|w| report.max_rel_err > w.1) {
            worst = Some((label, report.max_rel_err, report.worst));
        }
    }
    let (label, rel, at) = worst.unwrap();
    Ok(CheckOutcome::pass(
        "model-grad",
        format!("{total} coordinates; worst case {label}: rel {rel:.3e} ({at})"),
    ))
}

/// Perturbing position t+1 must not change any logit at positions <= t
/// (bitwise, dropout off), across all variants.
pub fn check_causality(inputs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let t_ctx = 8usize;
    let vocab = 11usize;
    let variants = [
        (AttentionVariant::Standard, 2.0),
        (AttentionVariant::QkNorm, 2.0),
        (AttentionVariant::Lp, 3.0),
    ];
    let per_variant = inputs.div_ceil(variants.len());
    let mut checked = 0usize;
    for (variant, p) in variants {
        let config = ModelConfig::new(1, 2, 8, t_ctx, vocab, 0.0, variant, p, 99)?;
        let model = GptModel::<f32>::init(config)?;
        for _ in 0..per_variant {
            let ids: Vec<u32> = (0..t_ctx).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let t = rng.gen_range(0..t_ctx - 1);
            let mut perturbed = ids.clone();
            perturbed[t + 1] =
                (perturbed[t + 1] + 1 + rng.gen_range(0..vocab as u32 - 1)) % vocab as u32;
            let mut tape_a = Tape::<f32>::inference();
            let la = model.forward(&mut tape_a, &ids, 1, false, &mut dummy)?;
            let mut tape_b = Tape::<f32>::inference();
            let lb = model.forward(&mut tape_b, &perturbed, 1, false, &mut dummy)?;
            let a = tape_a.data_of(la);
            let b = tape_b.data_of(lb);
            for pos in 0..=t {
                for v in 0..vocab {
                    let (x, y) = (a[pos * vocab + v], b[pos * vocab + v]);
                    if x.to_bits() != y.to_bits() {
                        return Ok(CheckOutcome::fail(
                            "causality",
                            format!(
                                "{}: editing position {} changed logit[{pos}][{v}] from {x} to {y}",
                                variant.label(),
                                t + 1
                            ),
                        ));
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(CheckOutcome::pass(
        "causality",
        format!("{checked} perturbed inputs across 3 variants: prefixes bitwise identical"),
    ))
}

/// A uniform-logit model must score exactly ln(65) on any 65-symbol stream.
pub fn check_uniform_loss() -> Result<CheckOutcome> {
    const TOL: f64 = 1e-4;
    let expected = 65f64.ln(); // 4.174387269895637
    let config = ModelConfig::new(1, 2, 8, 4, 65, 0.0, AttentionVariant::Lp, 2.0, 1)?;
    let mut model = GptModel::<f32>::init(config)?;
    for param in model.store.iter_mut() {
        for v in param.value.data_mut() {
            *v = 0.0;
        }
    }
    let mut tape = Tape::<f32>::inference();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let loss = model.loss(
        &mut tape,
        &[7, 3, 64, 0],
        &[3, 64, 0, 12],
        1,
        false,
        &mut dummy,
    )?;
    let got = tape.value(loss).item() as f64;
    let dev = (got - expected).abs();
    if dev <= TOL {
        Ok(CheckOutcome::pass(
            "uniform-loss",
            format!("uniform logits score {got:.7} vs ln(65) = {expected:.7} (|diff| {dev:.2e})"),
        ))
    } else {
        Ok(CheckOutcome::fail(
            "uniform-loss",
            format!("uniform logits score {got:.7}, expected ln(65) = {expected:.7} +- {TOL:e}"),
        ))
    }
}

/// K=10 contiguous folds partition the stream exactly (checked at the Tiny
/// Shakespeare length).
pub fn check_fold_partition() -> Result<CheckOutcome> {
    let n = 1_115_394usize;
    let k = 10usize;
    let folds = make_folds(n, k)?;
    if folds.len() != k {
        return Ok(CheckOutcome::fail("fold-partition", "wrong fold count"));
    }
    let mut cursor = 0usize;
    let base = n / k;
    for (i, f) in folds.iter().enumerate() {
        if f.val_start != cursor {
            return Ok(CheckOutcome::fail(
                "fold-partition",
                format!("fold {i} starts at {} instead of {cursor}", f.val_start),
            ));
        }
        let len = f.val_len();
        if len != base && len != base + 1 {
            return Ok(CheckOutcome::fail(
                "fold-partition",
                format!("fold {i} has length {len}, expected {base} or {}", base + 1),
            ));
        }
        if len == base + 1 && i >= n % k {
            return Ok(CheckOutcome::fail(
                "fold-partition",
                format!("remainder token landed on fold {i}, not the lowest-indexed folds"),
            ));
        }
        cursor = f.val_end;
    }
    if cursor != n {
        return Ok(CheckOutcome::fail(
            "fold-partition",
            format!("folds cover [0, {cursor}), stream has {n} tokens"),
        ));
    }
    Ok(CheckOutcome::pass(
        "fold-partition",
        format!(
            "{k} contiguous folds cover {n} tokens exactly, lengths {base}/{}",
            base + 1
        ),
    ))
}

/// No train window may intersect the validation span: exhaustive over every
/// reachable offset at corpus scale, plus 10,000 actual draws decoded from
/// token values on an index-coded stream.
pub fn check_fold_leakage(seed: u64) -> Result<CheckOutcome> {
    let context = 256usize;

    // exhaustive at corpus scale
    let n = 1_115_394usize;
    let tokens = Arc::new(vec![0u16; n]);
    let mut exhaustive = 0usize;
    for fold in make_folds(n, 10)? {
        let sampler = BatchSampler::new(tokens.clone(), &fold, 1, context, seed)?;
        for off in sampler.all_offsets() {
            let lo = off;
            let hi = off + context + 1; // exclusive end, includes the target shift
            if hi > fold.val_start && lo < fold.val_end {
                return Ok(CheckOutcome::fail(
                    "fold-leakage",
                    format!(
                        "fold {}: reachable window [{lo}, {hi}) overlaps val [{}, {})",
                        fold.fold_index, fold.val_start, fold.val_end
                    ),
                ));
            }
            exhaustive += 1;
        }
    }

    // 10,000 live draws on a stream where token value == absolute index
    let n_small = 60_000usize;
    let indexed: Arc<Vec<u16>> = Arc::new((0..n_small as u16).collect());
    let mut drawn = 0usize;
    for fold in make_folds(n_small, 10)? {
        let mut sampler = BatchSampler::new(indexed.clone(), &fold, 10, context, seed ^ 1)?;
        for _ in 0..100 {
            let (inputs, targets) = sampler.sample();
            for w in 0..10 {
                let row = &inputs[w * context..(w + 1) * context];
                let lo = row[0] as usize;
                let hi = lo + context + 1;
                if row.iter().enumerate().any(|(j, &v)| v as usize != lo + j) {
                    return Ok(CheckOutcome::fail(
                        "fold-leakage",
                        "sampled window is not contiguous".to_string(),
                    ));
                }
                if targets[w * context] as usize != lo + 1 {
                    return Ok(CheckOutcome::fail(
                        "fold-leakage",
                        "targets are not the one-shifted inputs".to_string(),
                    ));
                }
                if hi > fold.val_start && lo < fold.val_end {
                    return Ok(CheckOutcome::fail(
                        "fold-leakage",
                        format!(
                            "fold {}: sampled window [{lo}, {hi}) overlaps val [{}, {})",
                            fold.fold_index, fold.val_start, fold.val_end
                        ),
                    ));
                }
                drawn += 1;
            }
        }
    }

    Ok(CheckOutcome::pass(
        "fold-leakage",
        format!("{exhaustive} reachable offsets and {drawn} live draws: none touch the val span"),
    ))
}

/// The logits produced through the tape match the closed-form bound and the
/// alpha wiring: a pair of identical unit vectors scores exactly alpha.
pub fn check_alpha_wiring() -> Result<CheckOutcome> {
    let dk = 4usize;
    let alpha_value = 3.25f64;
    for p in SWEEP_PS {
        let mut tape = Tape::<f64>::inference();
        let data = vec![0.3, -0.4, 0.5, -0.6];
        let q = tape.leaf(Tensor::new(vec![1, dk], data.clone())?);
        let k = tape.leaf(Tensor::new(vec![1, dk], data)?);
        let qh = lp_normalize_rows(&mut tape, q, p, DEFAULT_NORM_EPSILON)?;
        let kh = lp_normalize_rows(&mut tape, k, p, DEFAULT_NORM_EPSILON)?;
        let alpha = tape.leaf(Tensor::scalar(alpha_value));
        let s = attention_logits(&mut tape, AttentionVariant::Lp, qh, kh, Some(alpha), dk)?;
        let got = tape.data_of(s)[0];
        // identical vectors: q_hat . k_hat = ||v||_2^2 / ||v||_p^2
        let v = [0.3f64, -0.4, 0.5, -0.6];
        let l2: f64 = v.iter().map(|x| x * x).sum();
        let lp: f64 = v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p);
        let expected = alpha_value * l2 / (lp * lp);
        if (got - expected).abs() > 1e-9 {
            return Ok(CheckOutcome::fail(
                "alpha-wiring",
                format!("p {p}: logit {got:.12} != alpha * cos_p {expected:.12}"),
            ));
        }
    }
    Ok(CheckOutcome::pass(
        "alpha-wiring",
        format!(
            "logit of an identical pair equals alpha * ||v||_2^2/||v||_p^2 at alpha {alpha_value}"
        ),
    ))
}

type Check = Box<dyn FnOnce() -> Result<CheckOutcome>>;

/// Run every invariant check; one outcome per line for the selftest command.
pub fn run_battery() -> Vec<CheckOutcome> {
    let checks: Vec<(&str, Check)> = vec![
        (
            "unit-norm+scale-invariance",
            Box::new(|| check_unit_norms(11)),
        ),
        ("p2-reduction", Box::new(|| check_p2_reduction(22))),
        ("logit-bound", Box::new(|| check_logit_bound(10_000, 33))),
        ("alpha-wiring", Box::new(check_alpha_wiring)),
        ("attention-grad", Box::new(check_attention_gradients)),
        ("model-grad", Box::new(check_model_gradients)),
        ("causality", Box::new(|| check_causality(100, 44))),
        ("uniform-loss", Box::new(check_uniform_loss)),
        ("fold-partition", Box::new(check_fold_partition)),
        ("fold-leakage", Box::new(|| check_fold_leakage(55))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(outcome) => outcome,
            Err(e) => CheckOutcome::fail(name, format!("errored: {e}")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_the_floor_near_zero() {
        assert_eq!(rel_err(0.0, 0.0, 1e-8), 0.0);
        assert!(rel_err(1e-12, -1e-12, 1e-8) < 1e-3);
        assert!((rel_err(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fd_harness_catches_a_broken_gradient() {
        // a target whose reported gradient is deliberately wrong
        struct Liar {
            store: ParamStore<f64>,
            id: ParamId,
        }
        impl FdTarget for Liar {
            fn store_mut(&mut self) -> &mut ParamStore<f64> {
                &mut self.store
            }
            fn eval(&mut self) -> Result<f64> {
                let w = self.store.value(self.id).data();
                Ok(w.iter().map(|v| v * v).sum())
            }
            fn grads(&mut self) -> Result<Vec<Vec<f64>>> {
                let w = self.store.value(self.id).data();
                Ok(vec![w.iter().map(|v| 3.0 * v).collect()]) // should be 2v
            }
        }
        let mut store = ParamStore::new();
        let id = store
            .register(
                "w",
                Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
                false,
            )
            .unwrap();
        let mut liar = Liar { store, id };
        let report = fd_run(&mut liar, &FdConfig::default()).unwrap();
        assert!(
            !report.passes(),
            "a 1.5x-off gradient must fail: {report:?}"
        );
    }

    #[test]
    fn fd_harness_accepts_a_correct_gradient() {
        struct Honest {
            store: ParamStore<f64>,
            id: ParamId,
        }
        impl FdTarget for Honest {
            fn store_mut(&mut self) -> &mut ParamStore<f64> {
                &mut self.store
            }
            fn eval(&mut self) -> Result<f64> {
                let w = self.store.value(self.id).data();
                Ok(w.iter().map(|v| v * v * v).sum())
            }
            fn grads(&mut self) -> Result<Vec<Vec<f64>>> {
                let w = self.store.value(self.id).data();
                Ok(vec![w.iter().map(|v| 3.0 * v * v).collect()])
            }
        }
        let mut store = ParamStore::new();
        let id = store
            .register(
                "w",
                Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
                false,
            )
            .unwrap();
        let mut honest = Honest { store, id };
        let report = fd_run(&mut honest, &FdConfig::default()).unwrap();
        assert!(report.passes(), "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn guarded_probe_points_really_avoid_the_kink() {
        for p in [1.0, 1.5] {
            let target =
                attention_grad_target(AttentionConfig::lp(p, 2, 4, 0.0).unwrap(), 0xA77).unwrap();
            assert!(attention_qk_min_component(&target) >= QK_COMPONENT_GUARD);
            let mt = model_grad_target(AttentionVariant::Lp, p, 0xB0B).unwrap();
            assert!(model_qk_min_component(&mt.model, &mt.ids).unwrap() >= QK_COMPONENT_GUARD);
        }
    }

    #[test]
    fn quick_battery_members_pass() {
        // the cheap members; the expensive ones run in the integration suites
        for outcome in [
            check_p2_reduction(7).unwrap(),
            check_uniform_loss().unwrap(),
            check_fold_partition().unwrap(),
            check_alpha_wiring().unwrap(),
        ] {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
