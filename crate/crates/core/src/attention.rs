//! The three attention variants under one roof.
//!
//! `standard` is scaled dot-product attention, QK^T/sqrt(d_k). `qknorm`
//! l2-normalizes each head's query and key rows before the dot product and
//! multiplies by a learnable positive scale alpha. `lp` generalizes the
//! normalization to an arbitrary lp norm (p >= 1):
//!
//! ```text
//! s_ij = alpha * (q_i / ||q_i||_p) . (k_j / ||k_j||_p)
//! ```
//!
//! qknorm is kept as its own code path (squares and a square root) rather
//! than delegating to the lp route at p = 2, so the two can cross-check each
//! other in tests.

use crate::error::{Error, Result};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which scoring rule the layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Standard,
    QkNorm,
    Lp,
}

impl AttentionVariant {
    /// Stable label used in run ids, CSV columns and CLI flags.
    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::Standard => "standard",
            AttentionVariant::QkNorm => "qknorm",
            AttentionVariant::Lp => "lp",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionVariant::Standard),
            "qknorm" => Ok(AttentionVariant::QkNorm),
            "lp" => Ok(AttentionVariant::Lp),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?} (expected standard, qknorm or lp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Norm order for the lp variant. Ignored by standard; qknorm behaves
    /// as p = 2 through its own code path.
    pub p: f64,
    /// Initial value of the learnable logit scale (qknorm/lp only).
    pub alpha_init: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    /// Floor applied to norm denominators: max(norm, norm_epsilon).
    pub norm_epsilon: f64,
}

pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

impl AttentionConfig {
    /// Default logit scale: sqrt(d_k), comparable to standard attention.
    pub fn default_alpha_init(head_dim: usize) -> f64 {
        (head_dim as f64).sqrt()
    }

    pub fn standard(heads: usize, head_dim: usize, dropout: f64) -> Result<Self> {
        AttentionConfig {
            variant: AttentionVariant::Standard,
            p: 2.0,
            alpha_init: Self::default_alpha_init(head_dim),
            heads,
            head_dim,
            dropout,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
        .validated()
    }

    pub fn qknorm(heads: usize, head_dim: usize, dropout: f64) -> Result<Self> {
        AttentionConfig {
            variant: AttentionVariant::QkNorm,
            p: 2.0,
            alpha_init: Self::default_alpha_init(head_dim),
            heads,
            head_dim,
            dropout,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
        .validated()
    }

    pub fn lp(p: f64, heads: usize, head_dim: usize, dropout: f64) -> Result<Self> {
        AttentionConfig {
            variant: AttentionVariant::Lp,
            p,
            alpha_init: Self::default_alpha_init(head_dim),
            heads,
            head_dim,
            dropout,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
        .validated()
    }

    pub fn with_alpha_init(mut self, alpha_init: f64) -> Result<Self> {
        self.alpha_init = alpha_init;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "heads and head_dim must be positive, got {} and {}",
                self.heads, self.head_dim
            )));
        }
        if self.variant == AttentionVariant::Lp && (!self.p.is_finite() || self.p < 1.0) {
            return Err(Error::Config(format!(
                "p must be a finite real >= 1, got {}",
                self.p
            )));
        }
        if !self.alpha_init.is_finite() || self.alpha_init <= 0.0 {
            return Err(Error::Config(format!(
                "alpha_init must be positive, got {}",
                self.alpha_init
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.norm_epsilon.is_finite() || self.norm_epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "norm_epsilon must be positive, got {}",
                self.norm_epsilon
            )));
        }
        Ok(())
    }

    /// True when the variant carries a learnable alpha.
    pub fn uses_alpha(&self) -> bool {
        self.variant != AttentionVariant::Standard
    }
}

/// Divide each trailing-axis row of `x` by max(||row||_p, epsilon).
///
/// The norm is composed from differentiable primitives
/// (abs -> pow(p) -> sum -> pow(1/p)), never via exp/log of |x|, so
/// gradients are exact and finite everywhere, including zero rows.
pub fn lp_normalize_rows<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: f64,
    epsilon: f64,
) -> Result<Var> {
    if !p.is_finite() || p < 1.0 {
        return Err(Error::Config(format!(
            "p must be a finite real >= 1, got {p}"
        )));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "norm epsilon must be positive, got {epsilon}"
        )));
    }
    let a = tape.abs(x);
    let powed = tape.pow_scalar(a, p);
    let mass = tape.sum_last_axis(powed);
    let norm = tape.pow_scalar(mass, 1.0 / p);
    let safe = tape.clamp_min(norm, epsilon);
    let inv = tape.pow_scalar(safe, -1.0);
    tape.mul_last_axis(x, inv)
}

/// l2 normalization written directly (squares and a square root); the
/// qknorm variant goes through here so the lp path can be checked against it.
pub fn l2_normalize_rows<S: Scalar>(tape: &mut Tape<S>, x: Var, epsilon: f64) -> Result<Var> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "norm epsilon must be positive, got {epsilon}"
        )));
    }
    let sq = tape.mul(x, x)?;
    let mass = tape.sum_last_axis(sq);
    let norm = tape.sqrt(mass);
    let safe = tape.clamp_min(norm, epsilon);
    let inv = tape.pow_scalar(safe, -1.0);
    tape.mul_last_axis(x, inv)
}

/// Score matrix for already-normalized q/k (standard takes raw q/k).
/// Accepts `[T, d_k]` or `[N, T, d_k]`; returns `[T, T]` or `[N, T, T]`.
/// `alpha` is required for qknorm/lp and must be a positive scalar var.
pub fn attention_logits<S: Scalar>(
    tape: &mut Tape<S>,
    variant: AttentionVariant,
    q_hat: Var,
    k_hat: Var,
    alpha: Option<Var>,
    head_dim: usize,
) -> Result<Var> {
    let qsh = tape.value(q_hat).shape().to_vec();
    let ksh = tape.value(k_hat).shape().to_vec();
    if qsh != ksh || (qsh.len() != 2 && qsh.len() != 3) || *qsh.last().unwrap() != head_dim {
        return Err(Error::ShapeMismatch {
            op: "attention_logits",
            lhs: qsh,
            rhs: ksh,
        });
    }
    let two_d = qsh.len() == 2;
    let (q3, k3) = if two_d {
        let t = qsh[0];
        (
            tape.reshape(q_hat, vec![1, t, head_dim])?,
            tape.reshape(k_hat, vec![1, t, head_dim])?,
        )
    } else {
        (q_hat, k_hat)
    };
    let kt = tape.transpose_last_two(k3)?;
    let raw = tape.bmm(q3, kt)?;
    let scores = match variant {
        AttentionVariant::Standard => tape.scale(raw, 1.0 / (head_dim as f64).sqrt()),
        AttentionVariant::QkNorm | AttentionVariant::Lp => {
            let alpha = alpha.ok_or_else(|| {
                Error::Config(format!(
                    "variant {} requires an alpha scale",
                    variant.label()
                ))
            })?;
            tape.mul_scalar_var(raw, alpha)?
        }
    };
    if two_d {
        let t = qsh[0];
        tape.reshape(scores, vec![t, t])
    } else {
        Ok(scores)
    }
}

/// Stable inverse of softplus: returns raw with softplus(raw) = y for y > 0.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y), stable for every positive y
    y + (-(-y).exp()).ln_1p()
}

/// One multi-head causal attention layer with a variant-dependent scoring
/// rule. Owns its projection parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    /// Unconstrained pre-activation; effective alpha = softplus(alpha_raw).
    pub alpha_raw: Option<ParamId>,
}

impl AttentionLayer {
    /// Register all parameters under `prefix`. `out_proj_std` lets the model
    /// shrink the residual projection by 1/sqrt(2*n_layer).
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_model: usize,
        config: AttentionConfig,
        out_proj_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.heads * config.head_dim != d_model {
            return Err(Error::Config(format!(
                "heads ({}) * head_dim ({}) must equal d_model ({d_model})",
                config.heads, config.head_dim
            )));
        }
        let dd = vec![d_model, d_model];
        let w_q = store.register(
            format!("{prefix}.w_q"),
            Tensor::randn(dd.clone(), 0.02, rng),
            true,
        )?;
        let b_q = store.register(format!("{prefix}.b_q"), Tensor::zeros(vec![d_model]), false)?;
        let w_k = store.register(
            format!("{prefix}.w_k"),
            Tensor::randn(dd.clone(), 0.02, rng),
            true,
        )?;
        let b_k = store.register(format!("{prefix}.b_k"), Tensor::zeros(vec![d_model]), false)?;
        let w_v = store.register(
            format!("{prefix}.w_v"),
            Tensor::randn(dd.clone(), 0.02, rng),
            true,
        )?;
        let b_v = store.register(format!("{prefix}.b_v"), Tensor::zeros(vec![d_model]), false)?;
        let w_o = store.register(
            format!("{prefix}.w_o"),
            Tensor::randn(dd, out_proj_std, rng),
            true,
        )?;
        let b_o = store.register(format!("{prefix}.b_o"), Tensor::zeros(vec![d_model]), false)?;
        let alpha_raw = if config.uses_alpha() {
            Some(store.register(
                format!("{prefix}.alpha_raw"),
                Tensor::scalar(crate::tensor::sc(inverse_softplus(config.alpha_init))),
                false,
            )?)
        } else {
            None
        };
        Ok(AttentionLayer {
            config,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            alpha_raw,
        })
    }

    /// Causal multi-head attention over `x: [batch*seq, d_model]` (rows in
    /// batch-major order). Applies attention dropout and residual dropout
    /// when `train` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar, R: Rng>(
        &self,
        store: &ParamStore<S>,
        tape: &mut Tape<S>,
        x: Var,
        batch: usize,
        seq: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.heads * cfg.head_dim;
        let xsh = tape.value(x).shape();
        if xsh != [batch * seq, d] {
            return Err(Error::InvalidShape {
                op: "causal_multihead_attention",
                shape: xsh.to_vec(),
                detail: format!("expected [batch*seq={}, d={d}]", batch * seq),
            });
        }

        let project = |tape: &mut Tape<S>, w: ParamId, b: ParamId, x: Var| -> Result<Var> {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let prod = tape.matmul(x, wv)?;
            tape.add_row(prod, bv)
        };
        let q = project(tape, self.w_q, self.b_q, x)?;
        let k = project(tape, self.w_k, self.b_k, x)?;
        let v = project(tape, self.w_v, self.b_v, x)?;

        // per-head layout [batch*heads, seq, head_dim]
        let qh = tape.split_heads(q, batch, seq, cfg.heads)?;
        let kh = tape.split_heads(k, batch, seq, cfg.heads)?;
        let vh = tape.split_heads(v, batch, seq, cfg.heads)?;

        let alpha = match self.alpha_raw {
            Some(pid) => {
                let raw = tape.param(store, pid);
                Some(tape.softplus(raw))
            }
            None => None,
        };
        let (q_hat, k_hat) = match cfg.variant {
            AttentionVariant::Standard => (qh, kh),
            AttentionVariant::QkNorm => (
                l2_normalize_rows(tape, qh, cfg.norm_epsilon)?,
                l2_normalize_rows(tape, kh, cfg.norm_epsilon)?,
            ),
            AttentionVariant::Lp => (
                lp_normalize_rows(tape, qh, cfg.p, cfg.norm_epsilon)?,
                lp_normalize_rows(tape, kh, cfg.p, cfg.norm_epsilon)?,
            ),
        };
        let scores = attention_logits(tape, cfg.variant, q_hat, k_hat, alpha, cfg.head_dim)?;
        let masked = tape.causal_mask(scores)?;
        let mut weights = tape.softmax_rows(masked);
        if train {
            weights = tape.dropout(weights, cfg.dropout, rng)?;
        }
        let ctx = tape.bmm(weights, vh)?;
        let merged = tape.merge_heads(ctx, batch, seq, cfg.heads)?;
        let mut out = project(tape, self.w_o, self.b_o, merged)?;
        if train {
            out = tape.dropout(out, cfg.dropout, rng)?;
        }
        Ok(out)
    }
}
