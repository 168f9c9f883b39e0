//! Masked-LM backbone: token embeddings, a pre-norm transformer encoder, a
//! tied MLM head, and verbalizer-based class distributions at the mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub mask_token: usize,
    /// Standard deviation of token embedding initialization.
    pub init_std: f64,
    /// Standard deviation of position embedding initialization.
    pub position_std: f64,
}

impl BackboneConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize, mask_token: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 64,
            mask_token,
            init_std: 0.02,
            position_std: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::InvalidConfig("dim must be even for the bidirectional prompt encoder".into()));
        }
        if self.mask_token >= self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "mask token {} outside vocabulary of {}",
                self.mask_token, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Per-class label-word ids. Class probability is the mean probability of
/// its words, renormalized over the label space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Verbalizer {
    words: Vec<Vec<usize>>,
}

impl Verbalizer {
    pub fn new(words: Vec<Vec<usize>>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[Vec<usize>] {
        &self.words
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn validate(&self, num_classes: usize, vocab_size: usize) -> Result<()> {
        if self.words.len() != num_classes {
            return Err(Error::Verbalizer(format!(
                "{} word lists for {num_classes} classes",
                self.words.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (class, list) in self.words.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Verbalizer(format!("class {class} has no label words")));
            }
            for &w in list {
                if w >= vocab_size {
                    return Err(Error::TokenOutOfRange { id: w, vocab_size });
                }
                if !seen.insert(w) {
                    return Err(Error::Verbalizer(format!("token {w} is shared between classes")));
                }
            }
        }
        Ok(())
    }

    /// Number of single-word mappings available (the longest list).
    pub fn num_mappings(&self) -> usize {
        self.words.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// The single-word verbalizer using each class's `j`-th word (cycling).
    pub fn mapping(&self, j: usize) -> Verbalizer {
        Verbalizer::new(self.words.iter().map(|l| vec![l[j % l.len()]]).collect())
    }
}

pub struct EncodedOutput {
    pub hidden: Var,
    pub mask_output: Var,
}

/// The surface the prompting framework needs from a masked language model.
pub trait MaskedLm {
    fn config(&self) -> &BackboneConfig;

    fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var>;

    fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var, mask_position: usize) -> Result<EncodedOutput>;

    fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, mask_output: Var) -> Var;

    fn param_ids(&self) -> Vec<ParamId>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.register_normal(format!("{name}.weight"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng),
            bias: store.register_zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Mat::from_vec(1, dim, vec![1.0; dim])),
            bias: store.register_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    qkv: Linear,
    out: Linear,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Small pre-norm transformer encoder with learned positions and an MLM head
/// tied to the token embedding table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerBackbone {
    config: BackboneConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    mlm_bias: ParamId,
}

impl TransformerBackbone {
    pub fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let token_embedding = store.register_normal("backbone.tokens", config.vocab_size, d, config.init_std, rng);
        let position_embedding = store.register_normal("backbone.positions", config.max_len, d, config.position_std, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("backbone.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
                    qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
                    out: Linear::new(store, &format!("{name}.out"), d, d, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                    ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, config.ffn_dim, rng),
                    ffn_out: Linear::new(store, &format!("{name}.ffn_out"), config.ffn_dim, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "backbone.final_norm", d);
        let mlm_bias = store.register_zeros("backbone.mlm_bias", 1, config.vocab_size);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            mlm_bias,
        })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, layer: &EncoderLayer, x: Var) -> Var {
        let d = self.config.dim;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let qkv = layer.qkv.apply(g, store, x);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * head_dim, head_dim);
            let k = g.slice_cols(qkv, d + h * head_dim, head_dim);
            let v = g.slice_cols(qkv, 2 * d + h * head_dim, head_dim);
            let scores = g.matmul_nt(q, k);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            contexts.push(g.matmul(weights, v));
        }
        let ctx = g.concat_cols(&contexts);
        layer.out.apply(g, store, ctx)
    }
}

impl MaskedLm for TransformerBackbone {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let table = g.param(store, self.token_embedding);
        Ok(g.gather_rows(table, ids))
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var, mask_position: usize) -> Result<EncodedOutput> {
        let (len, dim) = g.shape(input);
        if len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        if dim != self.config.dim {
            return Err(Error::Shape(format!("input width {dim}, backbone width {}", self.config.dim)));
        }
        if mask_position >= len {
            return Err(Error::Shape(format!("mask position {mask_position} outside length {len}")));
        }
        let positions = g.param(store, self.position_embedding);
        let positions = g.slice_rows(positions, 0, len);
        let mut x = g.add(input, positions);
        for layer in &self.layers {
            let normed = layer.attn_norm.apply(g, store, x);
            let attended = self.attention(g, store, layer, normed);
            x = g.add(x, attended);
            let normed = layer.ffn_norm.apply(g, store, x);
            let hidden = layer.ffn_in.apply(g, store, normed);
            let hidden = g.gelu(hidden);
            let out = layer.ffn_out.apply(g, store, hidden);
            x = g.add(x, out);
        }
        let hidden = self.final_norm.apply(g, store, x);
        let mask_output = g.slice_rows(hidden, mask_position, 1);
        Ok(EncodedOutput { hidden, mask_output })
    }

    fn mlm_logits(&self, g: &mut Graph, store: &ParamStore, mask_output: Var) -> Var {
        let table = g.param(store, self.token_embedding);
        let bias = g.param(store, self.mlm_bias);
        let logits = g.matmul_nt(mask_output, table);
        g.add_row(logits, bias)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            ids.extend(l.attn_norm.ids());
            ids.extend(l.qkv.ids());
            ids.extend(l.out.ids());
            ids.extend(l.ffn_norm.ids());
            ids.extend(l.ffn_in.ids());
            ids.extend(l.ffn_out.ids());
        }
        ids.extend(self.final_norm.ids());
        ids.push(self.mlm_bias);
        ids
    }
}

/// Class probabilities ŷ (1×|Y|) from vocabulary logits (1×V).
pub fn class_distribution(g: &mut Graph, logits: Var, verbalizer: &Verbalizer) -> Result<Var> {
    let vocab = g.shape(logits).1;
    let mut flat = Vec::new();
    let mut columns = Vec::new();
    for (class, list) in verbalizer.words().iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Verbalizer(format!("class {class} has no label words")));
        }
        for &w in list {
            if w >= vocab {
                return Err(Error::TokenOutOfRange { id: w, vocab_size: vocab });
            }
            flat.push(w);
            columns.push((class, 1.0 / list.len() as f64));
        }
    }
    let probs = g.softmax_rows(logits);
    let picked = g.gather_cols(probs, &flat);
    let mut averaging = Mat::zeros(flat.len(), verbalizer.num_classes());
    for (row, (class, w)) in columns.into_iter().enumerate() {
        averaging.set(row, class, w);
    }
    let averaging = g.constant(averaging);
    let per_class = g.matmul(picked, averaging);
    Ok(g.normalize_rows(per_class))
}
