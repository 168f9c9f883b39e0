//! Prompt encoders (BiLSTM + MLP over pseudo-token embeddings), attention
//! fusion of prompt sequences, type-level embeddings and the gated mix, and
//! assembly of the backbone input sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::backbone::MaskedLm;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::templates::{PromptOwner, Slot, TokenLayout};

/// Trainable pseudo-token embeddings of one template owner.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoTable {
    pub owner: PromptOwner,
    pub table: ParamId,
    pub count: usize,
}

impl PseudoTable {
    pub fn new<R: Rng>(store: &mut ParamStore, owner: PromptOwner, count: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.register_normal(format!("pseudo.{}", owner.key()), count, dim, 0.1, rng);
        Self { owner, table, count }
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.table)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LstmDirection {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
}

impl LstmDirection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let std = (1.0 / hidden as f64).sqrt();
        Self {
            input: store.register_normal(format!("{name}.input"), dim, 4 * hidden, std, rng),
            recurrent: store.register_normal(format!("{name}.recurrent"), hidden, 4 * hidden, std, rng),
            bias: store.register_zeros(format!("{name}.bias"), 1, 4 * hidden),
        }
    }

    /// Hidden states in input order; `reverse` runs the recurrence backwards.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, hidden: usize, reverse: bool) -> Vec<Var> {
        let steps = g.shape(x).0;
        let w_in = g.param(store, self.input);
        let w_rec = g.param(store, self.recurrent);
        let bias = g.param(store, self.bias);
        let projected = g.affine(x, w_in, bias);
        let mut h = g.constant(Mat::zeros(1, hidden));
        let mut c = g.constant(Mat::zeros(1, hidden));
        let mut out = vec![None; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.slice_rows(projected, t, 1);
            let rec = g.matmul(h, w_rec);
            let gates = g.add(xt, rec);
            let i = g.slice_cols(gates, 0, hidden);
            let f = g.slice_cols(gates, hidden, hidden);
            let cand = g.slice_cols(gates, 2 * hidden, hidden);
            let o = g.slice_cols(gates, 3 * hidden, hidden);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let squashed = g.tanh(c);
            h = g.mul(o, squashed);
            out[t] = Some(h);
        }
        out.into_iter().map(|v| v.expect("every step visited")).collect()
    }

    fn ids(&self) -> [ParamId; 3] {
        [self.input, self.recurrent, self.bias]
    }
}

/// Encoder network φ: bidirectional LSTM with `d/2` units per direction,
/// then `Linear → tanh → Linear`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptEncoderParams {
    pub owner: PromptOwner,
    dim: usize,
    forward: LstmDirection,
    backward: LstmDirection,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl PromptEncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, owner: PromptOwner, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("prompt encoder width {dim} must be even and positive")));
        }
        let name = format!("encoder.{}", owner.key());
        let half = dim / 2;
        let std = (1.0 / dim as f64).sqrt();
        Ok(Self {
            dim,
            forward: LstmDirection::new(store, &format!("{name}.lstm_fwd"), dim, half, rng),
            backward: LstmDirection::new(store, &format!("{name}.lstm_bwd"), dim, half, rng),
            hidden_w: store.register_normal(format!("{name}.mlp1.weight"), dim, dim, std, rng),
            hidden_b: store.register_zeros(format!("{name}.mlp1.bias"), 1, dim),
            out_w: store.register_normal(format!("{name}.mlp2.weight"), dim, dim, std, rng),
            out_b: store.register_zeros(format!("{name}.mlp2.bias"), 1, dim),
            owner,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(10);
        ids.extend(self.forward.ids());
        ids.extend(self.backward.ids());
        ids.extend([self.hidden_w, self.hidden_b, self.out_w, self.out_b]);
        ids
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }

    /// Encode an `I×d` pseudo-embedding sequence into an `I×d` prompt sequence.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, pseudo: Var) -> Result<Var> {
        let (steps, width) = g.shape(pseudo);
        if width != self.dim {
            return Err(Error::Shape(format!("pseudo width {width}, encoder width {}", self.dim)));
        }
        if steps == 0 {
            return Ok(g.constant(Mat::zeros(0, self.dim)));
        }
        let half = self.dim / 2;
        let fwd = self.forward.run(g, store, pseudo, half, false);
        let bwd = self.backward.run(g, store, pseudo, half, true);
        let rows: Vec<Var> = fwd.into_iter().zip(bwd).map(|(f, b)| g.concat_cols(&[f, b])).collect();
        let states = g.concat_rows(&rows);
        let w1 = g.param(store, self.hidden_w);
        let b1 = g.param(store, self.hidden_b);
        let hidden = g.affine(states, w1, b1);
        let hidden = g.tanh(hidden);
        let w2 = g.param(store, self.out_w);
        let b2 = g.param(store, self.out_b);
        Ok(g.affine(hidden, w2, b2))
    }

    /// Encode the pseudo slots of `layout` using `table` as their embeddings.
    pub fn encode_layout(&self, g: &mut Graph, store: &ParamStore, table: &PseudoTable, layout: &TokenLayout) -> Result<Var> {
        let count = layout.pseudo_count();
        if count != table.count {
            return Err(Error::Shape(format!("layout has {count} pseudo slots, table has {}", table.count)));
        }
        if let Some(owner) = layout.pseudo_owner() {
            if *owner != table.owner {
                return Err(Error::InvalidTemplate(format!("layout pseudo owner {owner:?}, table owner {:?}", table.owner)));
            }
        }
        let pseudo = table.lookup(g, store);
        self.encode(g, store, pseudo)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Two-way softmax between aligned positions.
    #[default]
    Positional,
    /// Each position attends over the concatenation of both sequences.
    Full,
}

/// Attention pooling of two aligned prompt sequences with a learned query.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAttention {
    pub query: ParamId,
    pub mode: FusionMode,
    dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, mode: FusionMode) -> Self {
        Self {
            query: store.register_zeros(format!("fusion.{name}.query"), 1, dim),
            mode,
            dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.query]
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a), g.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("fusing sequences of shape {sa:?} and {sb:?}")));
        }
        if sa.1 != self.dim {
            return Err(Error::Shape(format!("sequence width {}, fusion width {}", sa.1, self.dim)));
        }
        if sa.0 == 0 {
            return Ok(a);
        }
        let q = g.param(store, self.query);
        let scale = 1.0 / (self.dim as f64).sqrt();
        match self.mode {
            FusionMode::Positional => {
                let score_a = g.matmul_nt(a, q);
                let score_b = g.matmul_nt(b, q);
                let scores = g.concat_cols(&[score_a, score_b]);
                let scores = g.scale(scores, scale);
                let w = g.softmax_rows(scores);
                let wa = g.slice_cols(w, 0, 1);
                let wb = g.slice_cols(w, 1, 1);
                let pa = g.mul_col(a, wa);
                let pb = g.mul_col(b, wb);
                Ok(g.add(pa, pb))
            }
            FusionMode::Full => {
                let keys = g.concat_rows(&[a, b]);
                let mean = g.add(a, b);
                let mean = g.scale(mean, 0.5);
                let queries = g.add_row(mean, q);
                let scores = g.matmul_nt(queries, keys);
                let scores = g.scale(scores, scale);
                let w = g.softmax_rows(scores);
                Ok(g.matmul(w, keys))
            }
        }
    }
}

/// H^m = SelfAtt(task prompt, universal prompt).
pub fn fuse_similar(g: &mut Graph, store: &ParamStore, att: &SelfAttention, task_seq: Var, universal_seq: Var) -> Result<Var> {
    att.fuse(g, store, task_seq, universal_seq)
}

/// Mean over members of SelfAtt(PE_r(member template), PE_r(type template)).
/// `member_seqs` are the type encoder's outputs over each member's template.
pub fn intra_type_embed(
    g: &mut Graph,
    store: &ParamStore,
    att: &SelfAttention,
    member_seqs: &[Var],
    type_seq: Var,
) -> Result<Var> {
    if member_seqs.is_empty() {
        return Err(Error::EmptyGroup("intra-type embedding over no member templates".into()));
    }
    let mut total: Option<Var> = None;
    for &m in member_seqs {
        let fused = att.fuse(g, store, m, type_seq)?;
        total = Some(match total {
            Some(t) => g.add(t, fused),
            None => fused,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, 1.0 / member_seqs.len() as f64))
}

/// SelfAtt(PE_r(type template), PE_*(universal template)).
pub fn inter_type_embed(g: &mut Graph, store: &ParamStore, att: &SelfAttention, type_seq: Var, universal_seq: Var) -> Result<Var> {
    att.fuse(g, store, type_seq, universal_seq)
}

/// Trainable balance θ_r with α_r = sigmoid(θ_r); scalar or per dimension.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gate {
    pub theta: ParamId,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, per_dimension: bool) -> Self {
        let width = if per_dimension { dim } else { 1 };
        Self {
            theta: store.register_zeros(format!("gate.{name}.theta"), 1, width),
        }
    }

    pub fn alpha(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.theta).as_slice().iter().map(|&t| crate::autograd::sigmoid(t)).collect()
    }
}

/// α·intra + (1−α)·inter, α = sigmoid(θ).
pub fn gate_combine(g: &mut Graph, intra: Var, inter: Var, theta: Var) -> Result<Var> {
    let shape = g.shape(intra);
    if shape != g.shape(inter) {
        return Err(Error::Shape(format!("gating {shape:?} against {:?}", g.shape(inter))));
    }
    let alpha = g.sigmoid(theta);
    let beta = g.one_minus(alpha);
    match g.shape(theta) {
        (1, 1) => {
            let a = g.scale_by(intra, alpha);
            let b = g.scale_by(inter, beta);
            Ok(g.add(a, b))
        }
        (1, w) if w == shape.1 => {
            let a = g.mul_row(intra, alpha);
            let b = g.mul_row(inter, beta);
            Ok(g.add(a, b))
        }
        other => Err(Error::Shape(format!("gate parameter {other:?} for width {}", shape.1))),
    }
}

/// Build the backbone input: pseudo slots take `prompt` rows in order, text
/// and description slots take word embeddings, the mask slot takes the mask
/// token's embedding.
pub fn assemble_input<B: MaskedLm + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    backbone: &B,
    prompt: Var,
    layout: &TokenLayout,
) -> Result<Var> {
    let pseudo = layout.pseudo_count();
    let (rows, width) = g.shape(prompt);
    if rows != pseudo {
        return Err(Error::Shape(format!("{rows} prompt vectors for {pseudo} pseudo slots")));
    }
    if width != backbone.config().dim {
        return Err(Error::Shape(format!("prompt width {width}, backbone width {}", backbone.config().dim)));
    }
    let mask = backbone.config().mask_token;
    let ids: Vec<usize> = layout
        .slots
        .iter()
        .filter_map(|s| match s {
            Slot::Pseudo { .. } => None,
            Slot::Mask => Some(mask),
            other => other.token(),
        })
        .collect();
    let words = backbone.embed_tokens(g, store, &ids)?;
    let (mut next_word, mut next_prompt) = (0, 0);
    let picks: Vec<(Var, usize)> = layout
        .slots
        .iter()
        .map(|s| match s {
            Slot::Pseudo { .. } => {
                next_prompt += 1;
                (prompt, next_prompt - 1)
            }
            _ => {
                next_word += 1;
                (words, next_word - 1)
            }
        })
        .collect();
    Ok(g.pick_rows(&picks))
}
