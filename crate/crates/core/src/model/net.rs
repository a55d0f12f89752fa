//! Parameters, forward pass and hand-written backward pass.
//!
//! Layout: activations are `(batch * seq) x features` matrices with row
//! index `b * seq + t`. Blocks are pre-norm GPT-2 style: LN -> causal
//! multi-head attention -> residual, LN -> GELU feed-forward -> residual,
//! with a final LN before the output projection.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::manifest::hash_bytes;
use crate::rng::{mix, rng_from_seed, LabRng};

use super::{ModelConfig, ModelError};

const LN_EPS: f64 = 1e-5;

/// Kind and size of the trainable input/output projections.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HeadSpec {
    /// linear projections between W-bit states and the embedding space
    Binary { width: usize },
    /// token embedding table plus linear vocabulary projection
    Chess { vocab_size: usize },
}

impl HeadSpec {
    pub fn output_width(&self) -> usize {
        match self {
            HeadSpec::Binary { width } => *width,
            HeadSpec::Chess { vocab_size } => *vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Binary {
        w_in: Array2<f64>,
        b_in: Array2<f64>,
        w_out: Array2<f64>,
        b_out: Array2<f64>,
    },
    Chess {
        embed: Array2<f64>,
        w_out: Array2<f64>,
        b_out: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub head: HeadParams,
    /// learned absolute positional embeddings, context_len x d
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
}

macro_rules! visit_params {
    ($self:expr, $f:expr) => {{
        let f = &mut $f;
        match &mut $self.head {
            HeadParams::Binary {
                w_in,
                b_in,
                w_out,
                b_out,
            } => {
                f("head.w_in", w_in);
                f("head.b_in", b_in);
                f("head.w_out", w_out);
                f("head.b_out", b_out);
            }
            HeadParams::Chess { embed, w_out, b_out } => {
                f("head.embed", embed);
                f("head.w_out", w_out);
                f("head.b_out", b_out);
            }
        }
        f("pos", &mut $self.pos);
        for (i, b) in $self.blocks.iter_mut().enumerate() {
            let names = [
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g",
                "ln2_b", "w1", "b1", "w2", "b2",
            ];
            let tensors: [&mut Array2<f64>; 16] = [
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ];
            for (name, t) in names.iter().zip(tensors) {
                f(&format!("block{i}.{name}"), t);
            }
        }
        f("lnf_g", &mut $self.lnf_g);
        f("lnf_b", &mut $self.lnf_b);
    }};
}

impl Params {
    /// Tensors in a fixed canonical order, mutable.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, *mut Array2<f64>)> = Vec::new();
        visit_params!(self, |name: &str, t: &mut Array2<f64>| {
            out.push((name.to_string(), t as *mut _));
        });
        // pointers collected from disjoint fields of self
        out.into_iter()
            .map(|(n, p)| (n, unsafe { &mut *p }))
            .collect()
    }

    /// Tensors in the same canonical order, shared.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = Vec::new();
        match &self.head {
            HeadParams::Binary {
                w_in,
                b_in,
                w_out,
                b_out,
            } => {
                out.push(("head.w_in".into(), w_in));
                out.push(("head.b_in".into(), b_in));
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
            }
            HeadParams::Chess { embed, w_out, b_out } => {
                out.push(("head.embed".into(), embed));
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
            }
        }
        out.push(("pos".into(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            let entries: [(&str, &Array2<f64>); 16] = [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ];
            for (name, t) in entries {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out
    }

    pub fn zeros_like(&self) -> Params {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Params {
            head: match &self.head {
                HeadParams::Binary {
                    w_in,
                    b_in,
                    w_out,
                    b_out,
                } => HeadParams::Binary {
                    w_in: z(w_in),
                    b_in: z(b_in),
                    w_out: z(w_out),
                    b_out: z(b_out),
                },
                HeadParams::Chess { embed, w_out, b_out } => HeadParams::Chess {
                    embed: z(embed),
                    w_out: z(w_out),
                    b_out: z(b_out),
                },
            },
            pos: z(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: z(&b.ln1_g),
                    ln1_b: z(&b.ln1_b),
                    wq: z(&b.wq),
                    bq: z(&b.bq),
                    wk: z(&b.wk),
                    bk: z(&b.bk),
                    wv: z(&b.wv),
                    bv: z(&b.bv),
                    wo: z(&b.wo),
                    bo: z(&b.bo),
                    ln2_g: z(&b.ln2_g),
                    ln2_b: z(&b.ln2_b),
                    w1: z(&b.w1),
                    b1: z(&b.b1),
                    w2: z(&b.w2),
                    b2: z(&b.b2),
                })
                .collect(),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
        }
    }

    /// SHA-256 over every non-head tensor's little-endian bytes in canonical
    /// order: the freezing contract witness.
    pub fn backbone_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.tensors() {
            if name.starts_with("head.") {
                continue;
            }
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hash_bytes(&bytes)
    }
}

/// A configured model: architecture plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head_spec: HeadSpec,
    pub params: Params,
}

fn normal(rng: &mut LabRng, std: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_matrix(rng: &mut LabRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

impl Model {
    pub fn new(config: ModelConfig, head_spec: HeadSpec) -> Result<Model, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = rng_from_seed(mix(config.seed, 0x90de1));
        let head = Self::init_head(&head_spec, d, &mut rng);
        let pos = init_matrix(&mut rng, config.context_len, d, 0.01);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                wq: init_matrix(&mut rng, d, d, 0.02),
                bq: Array2::zeros((1, d)),
                wk: init_matrix(&mut rng, d, d, 0.02),
                bk: Array2::zeros((1, d)),
                wv: init_matrix(&mut rng, d, d, 0.02),
                bv: Array2::zeros((1, d)),
                wo: init_matrix(&mut rng, d, d, 0.02),
                bo: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                w1: init_matrix(&mut rng, d, config.d_ff, 0.02),
                b1: Array2::zeros((1, config.d_ff)),
                w2: init_matrix(&mut rng, config.d_ff, d, 0.02),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Model {
            params: Params {
                head,
                pos,
                blocks,
                lnf_g: Array2::ones((1, d)),
                lnf_b: Array2::zeros((1, d)),
            },
            config,
            head_spec,
        })
    }

    fn init_head(spec: &HeadSpec, d: usize, rng: &mut LabRng) -> HeadParams {
        match spec {
            HeadSpec::Binary { width } => HeadParams::Binary {
                w_in: init_matrix(rng, *width, d, 0.02),
                b_in: Array2::zeros((1, d)),
                w_out: init_matrix(rng, d, *width, 0.02),
                b_out: Array2::zeros((1, *width)),
            },
            HeadSpec::Chess { vocab_size } => HeadParams::Chess {
                embed: init_matrix(rng, *vocab_size, d, 0.02),
                w_out: init_matrix(rng, d, *vocab_size, 0.02),
                b_out: Array2::zeros((1, *vocab_size)),
            },
        }
    }

    /// Fresh head parameters for this model's dimensions, for finetuning.
    pub fn fresh_head(spec: &HeadSpec, d_model: usize, seed: u64) -> HeadParams {
        let mut rng = rng_from_seed(mix(seed, 0x43ad));
        Self::init_head(spec, d_model, &mut rng)
    }
}

/// One forward batch: binary row features or token ids, row-major
/// `(batch * seq)`.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Binary {
        rows: Array2<f64>,
        batch: usize,
        seq: usize,
    },
    Tokens {
        ids: Vec<u32>,
        batch: usize,
        seq: usize,
    },
}

impl BatchInput {
    pub fn batch(&self) -> usize {
        match self {
            BatchInput::Binary { batch, .. } | BatchInput::Tokens { batch, .. } => *batch,
        }
    }

    pub fn seq(&self) -> usize {
        match self {
            BatchInput::Binary { seq, .. } | BatchInput::Tokens { seq, .. } => *seq,
        }
    }
}

/// Attention weights of the final query position, per layer and head:
/// entry `l * n_heads + h` is a `batch x seq` matrix whose rows are that
/// head's final-position attention distribution.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub final_row: Vec<Array2<f64>>,
    pub n_layers: usize,
    pub n_heads: usize,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// softmax probabilities per (batch item, head), each seq x seq
    probs: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    ln2: LnCache,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

pub struct Cache {
    blocks: Vec<BlockCache>,
    h_last: Array2<f64>,
    lnf: LnCache,
    hf: Array2<f64>,
    drop_masks: Option<Vec<Array2<f64>>>,
}

impl Cache {
    /// Hidden states after the last block, before the final norm.
    pub fn h_last(&self) -> &Array2<f64> {
        &self.h_last
    }
}

pub struct ForwardOut {
    /// per-position logits, `(batch * seq) x output_width`
    pub logits: Array2<f64>,
    pub cache: Cache,
    pub attention: Option<AttentionTrace>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    y *= &g.broadcast(y.raw_dim()).unwrap().to_owned();
    y += &b.broadcast(y.raw_dim()).unwrap().to_owned();
    (y, LnCache { xhat, inv_std })
}

/// dy -> (dx, dg, db)
fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array2<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let dg = (dy * &cache.xhat)
        .sum_axis(Axis(0))
        .insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, (dy_row, xhat_row)) in dy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
        let mut dxhat: Vec<f64> = dy_row
            .iter()
            .zip(g.row(0))
            .map(|(dyv, gv)| dyv * gv)
            .collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(xhat_row.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        for (j, dv) in dxhat.iter_mut().enumerate() {
            *dv = cache.inv_std[i] * (*dv - mean_dxhat - xhat_row[j] * mean_dxhat_xhat);
        }
        dx.row_mut(i).assign(&ndarray::Array1::from(dxhat));
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(x: &mut Array2<f64>, b: &Array2<f64>) {
    for mut row in x.rows_mut() {
        row += &b.row(0);
    }
}

/// Token/feature embedding plus positional embeddings.
fn embed_input(model: &Model, input: &BatchInput) -> Result<Array2<f64>, ModelError> {
    let (batch, seq) = (input.batch(), input.seq());
    if seq > model.config.context_len {
        return Err(ModelError::Shape(format!(
            "sequence length {seq} exceeds context_len {}",
            model.config.context_len
        )));
    }
    let d = model.config.d_model;
    let mut h = match (input, &model.params.head) {
        (BatchInput::Binary { rows, .. }, HeadParams::Binary { w_in, b_in, .. }) => {
            if rows.ncols() != w_in.nrows() {
                return Err(ModelError::Shape(format!(
                    "input width {} does not match head width {}",
                    rows.ncols(),
                    w_in.nrows()
                )));
            }
            if rows.nrows() != batch * seq {
                return Err(ModelError::Shape("row count != batch * seq".into()));
            }
            let mut h = rows.dot(w_in);
            add_bias(&mut h, b_in);
            h
        }
        (BatchInput::Tokens { ids, .. }, HeadParams::Chess { embed, .. }) => {
            if ids.len() != batch * seq {
                return Err(ModelError::Shape("id count != batch * seq".into()));
            }
            let mut h = Array2::zeros((ids.len(), d));
            for (r, &id) in ids.iter().enumerate() {
                if id as usize >= embed.nrows() {
                    return Err(ModelError::Shape(format!("token id {id} out of vocab")));
                }
                h.row_mut(r).assign(&embed.row(id as usize));
            }
            h
        }
        _ => {
            return Err(ModelError::Shape(
                "input kind does not match head kind".into(),
            ))
        }
    };
    for b in 0..batch {
        for t in 0..seq {
            let mut row = h.row_mut(b * seq + t);
            row += &model.params.pos.row(t);
        }
    }
    Ok(h)
}

/// Full forward pass. `dropout_seed` enables inverted dropout with the
/// model's configured rate (training only); None means evaluation mode.
pub fn forward(
    model: &Model,
    input: &BatchInput,
    capture_attention: bool,
    dropout_seed: Option<u64>,
) -> Result<ForwardOut, ModelError> {
    let (batch, seq) = (input.batch(), input.seq());
    let cfg = &model.config;
    let (n_heads, d) = (cfg.n_heads, cfg.d_model);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let p_drop = cfg.dropout;
    let mut drop_rng = dropout_seed.map(rng_from_seed);
    let mut drop_masks: Vec<Array2<f64>> = Vec::new();
    let mut apply_dropout = |x: &mut Array2<f64>, rng: &mut Option<LabRng>| {
        if let Some(rng) = rng.as_mut() {
            if p_drop > 0.0 {
                let keep = 1.0 - p_drop;
                let mask =
                    Array2::from_shape_fn(x.raw_dim(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                *x *= &mask;
                drop_masks.push(mask);
            }
        }
    };

    let mut h = embed_input(model, input)?;
    apply_dropout(&mut h, &mut drop_rng);

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut attn_trace: Vec<Array2<f64>> = Vec::new();
    for block in &model.params.blocks {
        let h_in = h.clone();
        let (a, ln1) = layer_norm(&h, &block.ln1_g, &block.ln1_b);
        let mut q = a.dot(&block.wq);
        add_bias(&mut q, &block.bq);
        let mut k = a.dot(&block.wk);
        add_bias(&mut k, &block.bk);
        let mut v = a.dot(&block.wv);
        add_bias(&mut v, &block.bv);

        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(batch * n_heads);
        let mut attn_concat = Array2::zeros((batch * seq, d));
        for b in 0..batch {
            let row0 = b * seq;
            for hd in 0..n_heads {
                let c0 = hd * dh;
                let qs = q.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let ks = k.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let vs = v.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let mut scores = qs.dot(&ks.t());
                scores *= scale;
                for i in 0..seq {
                    for j in i + 1..seq {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                // row softmax
                for mut row in scores.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
                let out = scores.dot(&vs);
                attn_concat
                    .slice_mut(s![row0..row0 + seq, c0..c0 + dh])
                    .assign(&out);
                probs.push(scores);
            }
        }
        if capture_attention {
            // re-group per (layer, head): batch x seq rows of final query
            for hd in 0..n_heads {
                let mut m = Array2::zeros((batch, seq));
                for b in 0..batch {
                    m.row_mut(b)
                        .assign(&probs[b * n_heads + hd].row(seq - 1));
                }
                attn_trace.push(m);
            }
        }
        let mut attn_proj = attn_concat.dot(&block.wo);
        add_bias(&mut attn_proj, &block.bo);
        apply_dropout(&mut attn_proj, &mut drop_rng);
        let h_mid = &h_in + &attn_proj;

        let (a2, ln2) = layer_norm(&h_mid, &block.ln2_g, &block.ln2_b);
        let mut ff_pre = a2.dot(&block.w1);
        add_bias(&mut ff_pre, &block.b1);
        let ff_act = ff_pre.mapv(gelu);
        let mut ff_out = ff_act.dot(&block.w2);
        add_bias(&mut ff_out, &block.b2);
        apply_dropout(&mut ff_out, &mut drop_rng);
        h = &h_mid + &ff_out;

        blocks.push(BlockCache {
            ln1,
            q,
            k,
            v,
            probs,
            attn_concat,
            ln2,
            ff_pre,
            ff_act,
        });
    }

    let h_last = h;
    let (hf, lnf) = layer_norm(&h_last, &model.params.lnf_g, &model.params.lnf_b);
    let (w_out, b_out) = match &model.params.head {
        HeadParams::Binary { w_out, b_out, .. } | HeadParams::Chess { w_out, b_out, .. } => {
            (w_out, b_out)
        }
    };
    let mut logits = hf.dot(w_out);
    add_bias(&mut logits, b_out);

    let attention = if capture_attention {
        Some(AttentionTrace {
            final_row: attn_trace,
            n_layers: cfg.n_layers,
            n_heads,
        })
    } else {
        None
    };
    Ok(ForwardOut {
        logits,
        cache: Cache {
            blocks,
            h_last,
            lnf,
            hf,
            drop_masks: if drop_masks.is_empty() {
                None
            } else {
                Some(drop_masks)
            },
        },
        attention,
    })
}

/// Backpropagate `dlogits` through the cached forward pass; returns
/// gradients in a Params-shaped container.
pub fn backward(
    model: &Model,
    input: &BatchInput,
    cache: &Cache,
    dlogits: &Array2<f64>,
) -> Params {
    let (batch, seq) = (input.batch(), input.seq());
    let cfg = &model.config;
    let (n_heads, d) = (cfg.n_heads, cfg.d_model);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = model.params.zeros_like();

    // dropout masks are consumed in reverse order of application
    let mut mask_iter = cache
        .drop_masks
        .as_ref()
        .map(|m| m.iter().rev())
        .into_iter()
        .flatten();
    let mut pop_mask = |dx: &mut Array2<f64>| {
        if let Some(mask) = mask_iter.next() {
            *dx *= mask;
        }
    };

    // output projection
    let (w_out, _) = match &model.params.head {
        HeadParams::Binary { w_out, b_out, .. } | HeadParams::Chess { w_out, b_out, .. } => {
            (w_out, b_out)
        }
    };
    let dhf = dlogits.dot(&w_out.t());
    let dw_out = cache.hf.t().dot(dlogits);
    let db_out = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    match &mut grads.head {
        HeadParams::Binary { w_out, b_out, .. } | HeadParams::Chess { w_out, b_out, .. } => {
            *w_out = dw_out;
            *b_out = db_out;
        }
    }
    let (mut dh_stream, dgf, dbf) = layer_norm_backward(&dhf, &model.params.lnf_g, &cache.lnf);
    grads.lnf_g = dgf;
    grads.lnf_b = dbf;

    for (bi, block) in model.params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // feed-forward branch
        let mut dff_out = dh_stream.clone();
        pop_mask(&mut dff_out);
        gb.b2 = dff_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        gb.w2 = bc.ff_act.t().dot(&dff_out);
        let mut dff_pre = dff_out.dot(&block.w2.t());
        ndarray::Zip::from(&mut dff_pre)
            .and(&bc.ff_pre)
            .for_each(|g, &x| *g *= gelu_grad(x));
        gb.b1 = dff_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        // a2 = ln2(h_mid)
        let a2 = {
            let mut a = bc.ln2.xhat.clone();
            a *= &block.ln2_g.broadcast(a.raw_dim()).unwrap().to_owned();
            a += &block.ln2_b.broadcast(a.raw_dim()).unwrap().to_owned();
            a
        };
        gb.w1 = a2.t().dot(&dff_pre);
        let da2 = dff_pre.dot(&block.w1.t());
        let (dh_mid_ln, dg2, db2) = layer_norm_backward(&da2, &block.ln2_g, &bc.ln2);
        gb.ln2_g = dg2;
        gb.ln2_b = db2;
        let dh_mid = &dh_stream + &dh_mid_ln;

        // attention branch
        let mut dattn_proj = dh_mid.clone();
        pop_mask(&mut dattn_proj);
        gb.bo = dattn_proj.sum_axis(Axis(0)).insert_axis(Axis(0));
        gb.wo = bc.attn_concat.t().dot(&dattn_proj);
        let dattn_concat = dattn_proj.dot(&block.wo.t());

        let mut dq = Array2::zeros((batch * seq, d));
        let mut dk = Array2::zeros((batch * seq, d));
        let mut dv = Array2::zeros((batch * seq, d));
        for b in 0..batch {
            let row0 = b * seq;
            for hd in 0..n_heads {
                let c0 = hd * dh;
                let p = &bc.probs[b * n_heads + hd];
                let dout = dattn_concat.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let vs = bc.v.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let qs = bc.q.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let ks = bc.k.slice(s![row0..row0 + seq, c0..c0 + dh]);
                let dp = dout.dot(&vs.t());
                dv.slice_mut(s![row0..row0 + seq, c0..c0 + dh])
                    .assign(&p.t().dot(&dout));
                // softmax backward (masked entries have p = 0)
                let mut ds = &dp * p;
                for i in 0..seq {
                    let rowsum = ds.row(i).sum();
                    for j in 0..seq {
                        ds[[i, j]] -= p[[i, j]] * rowsum;
                    }
                }
                ds *= scale;
                dq.slice_mut(s![row0..row0 + seq, c0..c0 + dh])
                    .assign(&ds.dot(&ks));
                dk.slice_mut(s![row0..row0 + seq, c0..c0 + dh])
                    .assign(&ds.t().dot(&qs));
            }
        }
        // a = ln1(h_in); q/k/v = a.wq/wk/wv + b
        let a = {
            let mut a = bc.ln1.xhat.clone();
            a *= &block.ln1_g.broadcast(a.raw_dim()).unwrap().to_owned();
            a += &block.ln1_b.broadcast(a.raw_dim()).unwrap().to_owned();
            a
        };
        gb.bq = dq.sum_axis(Axis(0)).insert_axis(Axis(0));
        gb.bk = dk.sum_axis(Axis(0)).insert_axis(Axis(0));
        gb.bv = dv.sum_axis(Axis(0)).insert_axis(Axis(0));
        gb.wq = a.t().dot(&dq);
        gb.wk = a.t().dot(&dk);
        gb.wv = a.t().dot(&dv);
        let da = dq.dot(&block.wq.t()) + dk.dot(&block.wk.t()) + dv.dot(&block.wv.t());
        let (dh_in_ln, dg1, db1) = layer_norm_backward(&da, &block.ln1_g, &bc.ln1);
        gb.ln1_g = dg1;
        gb.ln1_b = db1;
        dh_stream = &dh_mid + &dh_in_ln;
    }

    // embedding dropout
    pop_mask(&mut dh_stream);

    // positional embeddings
    for b in 0..batch {
        for t in 0..seq {
            let mut row = grads.pos.row_mut(t);
            row += &dh_stream.row(b * seq + t);
        }
    }
    // input projection / embedding table
    match (input, &mut grads.head) {
        (BatchInput::Binary { rows, .. }, HeadParams::Binary { w_in, b_in, .. }) => {
            *w_in = rows.t().dot(&dh_stream);
            *b_in = dh_stream.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        (BatchInput::Tokens { ids, .. }, HeadParams::Chess { embed, .. }) => {
            for (r, &id) in ids.iter().enumerate() {
                let mut row = embed.row_mut(id as usize);
                row += &dh_stream.row(r);
            }
        }
        _ => unreachable!("input/head mismatch caught in forward"),
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(width: usize, seed: u64) -> Model {
        Model::new(
            ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                context_len: 8,
                input_width: width,
                dropout: 0.0,
                seed,
            },
            HeadSpec::Binary { width },
        )
        .unwrap()
    }

    fn random_binary_input(width: usize, batch: usize, seq: usize, seed: u64) -> BatchInput {
        let mut rng = rng_from_seed(seed);
        BatchInput::Binary {
            rows: Array2::from_shape_fn((batch * seq, width), |_| {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    0.0
                }
            }),
            batch,
            seq,
        }
    }

    #[test]
    fn causality_perturbing_later_rows_leaves_earlier_logits() {
        let model = tiny_model(10, 1);
        let input = random_binary_input(10, 2, 6, 2);
        let base = forward(&model, &input, false, None).unwrap();
        let BatchInput::Binary { rows, batch, seq } = input else {
            unreachable!()
        };
        let mut rows2 = rows.clone();
        // flip every bit of row t = 4 of batch item 0
        for j in 0..10 {
            rows2[[4, j]] = 1.0 - rows2[[4, j]];
        }
        let out2 = forward(
            &model,
            &BatchInput::Binary {
                rows: rows2,
                batch,
                seq,
            },
            false,
            None,
        )
        .unwrap();
        for t in 0..4 {
            for j in 0..10 {
                assert_eq!(base.logits[[t, j]], out2.logits[[t, j]], "t {t} j {j}");
            }
        }
        assert!((0..10).any(|j| base.logits[[4, j]] != out2.logits[[4, j]]));
    }

    #[test]
    fn zero_weight_model_gives_zero_logits() {
        let mut model = tiny_model(6, 3);
        for (_, t) in model.params.tensors_mut() {
            t.fill(0.0);
        }
        let input = random_binary_input(6, 1, 4, 4);
        let out = forward(&model, &input, false, None).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = tiny_model(10, 5);
        let input = random_binary_input(10, 3, 8, 6);
        let out = forward(&model, &input, true, None).unwrap();
        let trace = out.attention.unwrap();
        assert_eq!(trace.final_row.len(), 2 * 2);
        for m in &trace.final_row {
            for row in m.rows() {
                let sum: f64 = row.sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        // every cached prob row sums to 1
        for bc in &out.cache.blocks {
            for p in &bc.probs {
                for row in p.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_checked() {
        let model = tiny_model(7, 9);
        let input = random_binary_input(7, 2, 5, 1);
        let a = forward(&model, &input, false, None).unwrap();
        let b = forward(&model, &input, false, None).unwrap();
        assert_eq!(a.logits, b.logits);
        let bad = random_binary_input(9, 2, 5, 1);
        assert!(forward(&model, &bad, false, None).is_err());
        let too_long = random_binary_input(7, 1, 20, 1);
        assert!(forward(&model, &too_long, false, None).is_err());
    }

    #[test]
    fn backbone_hash_ignores_head() {
        let mut model = tiny_model(5, 11);
        let h0 = model.params.backbone_hash();
        match &mut model.params.head {
            HeadParams::Binary { w_in, .. } => w_in.fill(9.0),
            _ => unreachable!(),
        }
        assert_eq!(model.params.backbone_hash(), h0);
        model.params.pos[[0, 0]] += 1.0;
        assert_ne!(model.params.backbone_hash(), h0);
    }
}
