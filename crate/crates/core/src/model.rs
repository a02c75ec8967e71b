//! nanoGPT-style decoder-only transformer.
//!
//! Token + learned absolute position embeddings, a stack of pre-norm blocks
//! (causal self-attention then a GELU MLP, each added residually), a final
//! layer norm and a language-model head tied to the token embedding by
//! default. The attention variant (standard / qknorm / lp) is carried by the
//! config and decides nothing outside the attention layer itself.

use crate::attention::{AttentionConfig, AttentionLayer, AttentionVariant};
use crate::error::{Error, Result};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attention: AttentionConfig,
    pub seed: u64,
    /// Share the token embedding with the LM head (reference default).
    pub tie_lm_head: bool,
}

impl ModelConfig {
    /// Assemble a config, deriving the per-head attention geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_layer: usize,
        n_head: usize,
        d_model: usize,
        context_len: usize,
        vocab_size: usize,
        dropout: f64,
        variant: AttentionVariant,
        p: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_head == 0 || !d_model.is_multiple_of(n_head) {
            return Err(Error::Config(format!(
                "d_model ({d_model}) must be divisible by n_head ({n_head})"
            )));
        }
        let head_dim = d_model / n_head;
        let attention = match variant {
            AttentionVariant::Standard => AttentionConfig::standard(n_head, head_dim, dropout)?,
            AttentionVariant::QkNorm => AttentionConfig::qknorm(n_head, head_dim, dropout)?,
            AttentionVariant::Lp => AttentionConfig::lp(p, n_head, head_dim, dropout)?,
        };
        let cfg = ModelConfig {
            n_layer,
            n_head,
            d_model,
            context_len,
            vocab_size,
            dropout,
            attention,
            seed,
            tie_lm_head: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration studied in the experiments: 6 layers, 6 heads,
    /// d=384, context 256, dropout 0.2, 65-character vocabulary.
    pub fn paper(variant: AttentionVariant, p: f64, seed: u64) -> Result<Self> {
        Self::new(6, 6, 384, 256, 65, 0.2, variant, p, seed)
    }

    /// Small configuration for smoke training: 2 layers, 2 heads, d=64,
    /// context 64.
    pub fn tiny(variant: AttentionVariant, p: f64, seed: u64) -> Result<Self> {
        Self::new(2, 2, 64, 64, 65, 0.2, variant, p, seed)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 {
            return Err(Error::Config("n_layer must be positive".into()));
        }
        if self.n_head == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Config(format!(
                "d_model ({}) must be positive and divisible by n_head ({})",
                self.d_model, self.n_head
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.attention.validate()?;
        if self.attention.heads != self.n_head || self.attention.head_dim != self.head_dim() {
            return Err(Error::Config(format!(
                "attention geometry ({} heads x {}) disagrees with n_head={} d_model={}",
                self.attention.heads, self.attention.head_dim, self.n_head, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttentionLayer,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

pub struct GptModel<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    /// Present only when the head is untied from the embedding.
    lm_head: Option<ParamId>,
}

impl<S: Scalar> GptModel<S> {
    /// Deterministic initialization from the config seed: all weights
    /// Normal(0, 0.02) except residual projections, which are shrunk by
    /// 1/sqrt(2*n_layer); biases zero; layer-norm gains one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::<S>::new();
        let d = config.d_model;
        let resid_std = 0.02 / (2.0 * config.n_layer as f64).sqrt();

        let wte = store.register(
            "wte",
            Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng),
            false,
        )?;
        let wpe = store.register(
            "wpe",
            Tensor::randn(vec![config.context_len, d], 0.02, &mut rng),
            false,
        )?;
        let mut blocks = Vec::with_capacity(config.n_layer);
        for i in 0..config.n_layer {
            let ln1_g = store.register(
                format!("block{i}.ln1.gain"),
                Tensor::full(vec![d], S::one()),
                false,
            )?;
            let ln1_b =
                store.register(format!("block{i}.ln1.bias"), Tensor::zeros(vec![d]), false)?;
            let attn = AttentionLayer::init(
                &mut store,
                &format!("block{i}.attn"),
                d,
                config.attention,
                resid_std,
                &mut rng,
            )?;
            let ln2_g = store.register(
                format!("block{i}.ln2.gain"),
                Tensor::full(vec![d], S::one()),
                false,
            )?;
            let ln2_b =
                store.register(format!("block{i}.ln2.bias"), Tensor::zeros(vec![d]), false)?;
            let fc_w = store.register(
                format!("block{i}.mlp.fc_w"),
                Tensor::randn(vec![d, 4 * d], 0.02, &mut rng),
                true,
            )?;
            let fc_b = store.register(
                format!("block{i}.mlp.fc_b"),
                Tensor::zeros(vec![4 * d]),
                false,
            )?;
            let proj_w = store.register(
                format!("block{i}.mlp.proj_w"),
                Tensor::randn(vec![4 * d, d], resid_std, &mut rng),
                true,
            )?;
            let proj_b = store.register(
                format!("block{i}.mlp.proj_b"),
                Tensor::zeros(vec![d]),
                false,
            )?;
            blocks.push(Block {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                fc_w,
                fc_b,
                proj_w,
                proj_b,
            });
        }
        let lnf_g = store.register("final_norm.gain", Tensor::full(vec![d], S::one()), false)?;
        let lnf_b = store.register("final_norm.bias", Tensor::zeros(vec![d]), false)?;
        let lm_head = if config.tie_lm_head {
            None
        } else {
            Some(store.register(
                "lm_head",
                Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng),
                true,
            )?)
        };
        Ok(GptModel {
            config,
            store,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.total_elements()
    }

    /// Forward pass over `ids` laid out batch-major as `[batch, T]`.
    /// Returns logits shaped `[batch, T, vocab]` on the given tape.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        ids: &[u32],
        batch: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::Contract(format!(
                "ids length {} is not a positive multiple of batch {batch}",
                ids.len()
            )));
        }
        let t = ids.len() / batch;
        if t > self.config.context_len {
            return Err(Error::Contract(format!(
                "sequence length {t} exceeds context length {}",
                self.config.context_len
            )));
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Decoding {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let cfg_dropout = self.config.dropout;

        let wte = tape.param(&self.store, self.wte);
        let wpe = tape.param(&self.store, self.wpe);
        let tok = tape.embedding_lookup(wte, ids)?;
        let pos_ids: Vec<u32> = (0..ids.len()).map(|r| (r % t) as u32).collect();
        let pos = tape.embedding_lookup(wpe, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        if train {
            x = tape.dropout(x, cfg_dropout, rng)?;
        }

        for block in &self.blocks {
            let g1 = tape.param(&self.store, block.ln1_g);
            let b1 = tape.param(&self.store, block.ln1_b);
            let normed1 = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let attn_out = block
                .attn
                .forward(&self.store, tape, normed1, batch, t, train, rng)?;
            x = tape.add(x, attn_out)?;

            let g2 = tape.param(&self.store, block.ln2_g);
            let b2 = tape.param(&self.store, block.ln2_b);
            let normed2 = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let fc_w = tape.param(&self.store, block.fc_w);
            let fc_b = tape.param(&self.store, block.fc_b);
            let hidden = tape.matmul(normed2, fc_w)?;
            let hidden = tape.add_row(hidden, fc_b)?;
            let act = tape.gelu(hidden);
            let proj_w = tape.param(&self.store, block.proj_w);
            let proj_b = tape.param(&self.store, block.proj_b);
            let mlp = tape.matmul(act, proj_w)?;
            let mut mlp = tape.add_row(mlp, proj_b)?;
            if train {
                mlp = tape.dropout(mlp, cfg_dropout, rng)?;
            }
            x = tape.add(x, mlp)?;
        }

        let gf = tape.param(&self.store, self.lnf_g);
        let bf = tape.param(&self.store, self.lnf_b);
        let x = tape.layer_norm(x, gf, bf, LAYER_NORM_EPS)?;
        let head = match self.lm_head {
            Some(id) => tape.param(&self.store, id),
            None => tape.param(&self.store, self.wte), // tied: second binding
        };
        let logits = tape.matmul_nt(x, head)?;
        tape.reshape(logits, vec![batch, t, self.config.vocab_size])
    }

    /// Mean next-token cross-entropy over all positions.
    pub fn loss<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        ids: &[u32],
        targets: &[u32],
        batch: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if targets.len() != ids.len() {
            return Err(Error::Contract(format!(
                "targets length {} does not match inputs length {}",
                targets.len(),
                ids.len()
            )));
        }
        let logits = self.forward(tape, ids, batch, train, rng)?;
        let flat = tape.reshape(logits, vec![ids.len(), self.config.vocab_size])?;
        tape.cross_entropy(flat, targets)
    }

    /// Autoregressive sampling with context-window truncation.
    /// `temperature <= 1e-7` selects greedy argmax decoding.
    pub fn generate<R: Rng>(
        &self,
        prompt: &[u32],
        n_tokens: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Config("generation prompt must be non-empty".into()));
        }
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be a finite non-negative real, got {temperature}"
            )));
        }
        let vocab = self.config.vocab_size;
        let mut out = prompt.to_vec();
        for _ in 0..n_tokens {
            let start = out.len().saturating_sub(self.config.context_len);
            let window = &out[start..];
            let mut tape = Tape::<S>::inference();
            let logits = self.forward(&mut tape, window, 1, false, rng)?;
            let data = tape.data_of(logits);
            let row = &data[(window.len() - 1) * vocab..window.len() * vocab];
            let next = if temperature <= 1e-7 {
                argmax(row) as u32
            } else {
                sample_row(row, temperature, rng) as u32
            };
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row<S: Scalar, R: Rng>(row: &[S], temperature: f64, rng: &mut R) -> usize {
    // softmax with temperature, in f64 for a stable CDF
    let scaled: Vec<f64> = row.iter().map(|&v| v.to_f64() / temperature).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamManifest>,
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this parameter inside the payload section.
    offset: u64,
}

const CHECKPOINT_FORMAT: &str = "lpattn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl<S: Scalar> GptModel<S> {
    /// Write config + parameter manifest as one JSON line, then every
    /// parameter as raw little-endian f32, in registration order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.store.len());
        let mut offset = 0u64;
        for (_, p) in self.store.iter() {
            manifest.push(ParamManifest {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += (p.value.numel() * 4) as u64;
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: manifest,
        };
        let mut buf = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
        buf.push(b'\n');
        for (_, p) in self.store.iter() {
            for &v in p.value.data() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint file; the manifest must match the
    /// layout implied by the stored config exactly.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let newline = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unrecognized format tag {:?}",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut model = GptModel::<S>::init(header.config)?;
        if header.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "manifest has {} parameters, config implies {}",
                header.params.len(),
                model.store.len()
            )));
        }
        let payload = &raw[newline + 1..];
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
        for (entry, id) in header.params.iter().zip(ids) {
            let (name, shape, numel) = {
                let p = model.store.get(id);
                (p.name.clone(), p.value.shape().to_vec(), p.value.numel())
            };
            if entry.name != name || entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {:?} {:?} does not match expected {:?} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "payload truncated: parameter {:?} needs bytes [{start}, {end})",
                    entry.name
                )));
            }
            let dst = model.store.value_mut(id).data_mut();
            for (j, chunk) in payload[start..end].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                dst[j] = sc(v as f64);
            }
        }
        Ok(model)
    }
}

/// Write and re-read the checkpoint; useful as an integrity check.
pub fn checkpoint_roundtrip_is_bit_exact(model: &GptModel<f32>, dir: &Path) -> Result<bool> {
    let path = dir.join("roundtrip.ckpt");
    model.save_checkpoint(&path)?;
    let loaded = GptModel::<f32>::load_checkpoint(&path)?;
    for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Ok(false);
        }
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            if x.to_bits() != y.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
