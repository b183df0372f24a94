//! Self-attentive next-item encoder and the tied full-catalog scoring head.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ItemId;
use crate::engine::{EngineError, Graph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LPOCKPT1";
/// Stand-in for minus infinity in masked attention logits.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("empty history")]
    EmptyHistory,
    #[error("history of length {len} exceeds the maximum of {max}")]
    HistoryTooLong { len: usize, max: usize },
    #[error("item {item} is not in a catalog of {num_items}")]
    InvalidItem { item: usize, num_items: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub num_items: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidDims(m));
        if self.d == 0 || self.heads == 0 {
            return bad("d and heads must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if self.blocks == 0 || self.max_len == 0 || self.num_items == 0 {
            return bad("blocks, max_len and num_items must be positive".into());
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const BLOCK_TENSORS: [&str; 12] =
    ["w_q", "w_k", "w_v", "w_o", "ln1_gain", "ln1_bias", "w_1", "b_1", "w_2", "b_2", "ln2_gain", "ln2_bias"];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// All trainable tensors. The item table has `num_items + 1` rows; the last
/// is the padding row and stays zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub item_embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<BlockParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Draws every matrix uniformly in `[-1/sqrt(d), 1/sqrt(d)]`; biases start at
/// zero, layer-norm gains at one.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (dims.d, dims.d_ff());
    let bound = 1.0 / (d as f64).sqrt();
    let mut item_embedding = uniform(&mut rng, &[dims.num_items + 1, d], bound);
    item_embedding.row_mut(dims.num_items).fill(0.0);
    let positional = uniform(&mut rng, &[dims.max_len, d], bound);
    let blocks = (0..dims.blocks)
        .map(|_| BlockParams {
            w_q: uniform(&mut rng, &[d, d], bound),
            w_k: uniform(&mut rng, &[d, d], bound),
            w_v: uniform(&mut rng, &[d, d], bound),
            w_o: uniform(&mut rng, &[d, d], bound),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_1: uniform(&mut rng, &[d, f], bound),
            b_1: Tensor::zeros(&[f]),
            w_2: uniform(&mut rng, &[f, d], bound),
            b_2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams { dims, seed, item_embedding, positional, blocks })
}

impl ModelParams {
    /// Tensors in a fixed order shared by [`ModelParams::names`],
    /// [`ModelParams::tensors_mut`] and [`BoundParams::vars`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.item_embedding, &self.positional];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_embedding, &mut self.positional];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["item_embedding".to_string(), "positional".to_string()];
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_TENSORS.iter().map(|n| format!("block{i}.{n}")));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(dims: ModelDims, seed: u64, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let template = init_params(dims, 0)?;
        let expected: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if tensors.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!("{} tensors, expected {}", tensors.len(), expected.len())));
        }
        for (i, (t, s)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Checkpoint(format!("tensor {i} has shape {:?}, expected {s:?}", t.shape())));
            }
        }
        let mut out = template;
        out.seed = seed;
        for (slot, t) in out.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(out)
    }

    /// Records every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Vec<_>>();
        BoundParams::from_vars(self.dims, &vars).expect("tensor count matches dims")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Binary checkpoint: magic, a little-endian u64 header length, a JSON
    /// header (dims, seed, names, shapes), then every value as little-endian
    /// f64 in tensor order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            dims: self.dims,
            seed: self.seed,
            names: self.names(),
            shapes: self.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in self.tensors() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(ModelError::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        header.dims.validate()?;
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in header.shapes {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            input.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_tensors(header.dims, header.seed, tensors)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Eval-mode scores over the catalog for each history.
    pub fn score_histories(&self, histories: &[&[ItemId]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let h = encode(&mut g, &bound, histories, EncodeOptions::EVAL, &mut NoDropout)?;
        let s = score_all(&mut g, &bound, h)?;
        let n = self.dims.num_items;
        Ok(g.value(s).data().chunks(n).map(|r| r.to_vec()).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    seed: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Graph handles for a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub dims: ModelDims,
    pub item_embedding: Var,
    pub positional: Var,
    pub blocks: Vec<BoundBlock>,
}

impl BoundParams {
    /// Wraps handles given in [`ModelParams::tensors`] order.
    pub fn from_vars(dims: ModelDims, vars: &[Var]) -> Result<Self, ModelError> {
        if vars.len() != 2 + 12 * dims.blocks {
            return Err(ModelError::InvalidDims(format!("{} handles for {} blocks", vars.len(), dims.blocks)));
        }
        let blocks = vars[2..]
            .chunks(12)
            .map(|v| BoundBlock {
                w_q: v[0],
                w_k: v[1],
                w_v: v[2],
                w_o: v[3],
                ln1_gain: v[4],
                ln1_bias: v[5],
                w_1: v[6],
                b_1: v[7],
                w_2: v[8],
                b_2: v[9],
                ln2_gain: v[10],
                ln2_bias: v[11],
            })
            .collect();
        Ok(Self { dims, item_embedding: vars[0], positional: vars[1], blocks })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.item_embedding, self.positional];
        for b in &self.blocks {
            out.extend([
                b.w_q, b.w_k, b.w_v, b.w_o, b.ln1_gain, b.ln1_bias, b.w_1, b.b_1, b.w_2, b.b_2, b.ln2_gain, b.ln2_bias,
            ]);
        }
        out
    }
}

/// An rng for eval-mode calls, where dropout never draws.
pub struct NoDropout;

impl rand::RngCore for NoDropout {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout is disabled in eval mode")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout is disabled in eval mode")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("dropout is disabled in eval mode")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
        unreachable!("dropout is disabled in eval mode")
    }
}

/// Dropout probability applied after the attention and feed-forward
/// sublayers when encoding in training mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    pub dropout: f64,
    pub train: bool,
}

impl EncodeOptions {
    pub const EVAL: Self = Self { dropout: 0.0, train: false };
}

/// Sequence representations `[batch, d]`: the last-position output of the
/// encoder for each history. Histories are left-padded to `max_len`.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    histories: &[&[ItemId]],
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<Var, ModelError> {
    encode_impl(g, p, histories, opts, rng, true)
}

fn encode_impl<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    histories: &[&[ItemId]],
    opts: EncodeOptions,
    rng: &mut R,
    last_only: bool,
) -> Result<Var, ModelError> {
    let dims = p.dims;
    let (l, d, heads, dh) = (dims.max_len, dims.d, dims.heads, dims.head_dim());
    let b = histories.len();
    if b == 0 {
        return Err(ModelError::EmptyHistory);
    }
    let pad = dims.num_items;
    let mut ids = Vec::with_capacity(b * l);
    // key_is_pad[b * l + j]
    let mut key_is_pad = Vec::with_capacity(b * l);
    for h in histories {
        if h.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        if h.len() > l {
            return Err(ModelError::HistoryTooLong { len: h.len(), max: l });
        }
        if let Some(bad) = h.iter().find(|i| i.0 >= dims.num_items) {
            return Err(ModelError::InvalidItem { item: bad.0, num_items: dims.num_items });
        }
        let n_pad = l - h.len();
        ids.extend(std::iter::repeat_n(pad, n_pad));
        ids.extend(h.iter().map(|i| i.0));
        key_is_pad.extend((0..l).map(|j| j < n_pad));
    }

    let e = g.embedding_lookup(p.item_embedding, &ids)?;
    let e = g.reshape(e, &[b, l, d])?;
    let mut x = g.add(e, p.positional)?;

    for (bi, blk) in p.blocks.iter().enumerate() {
        let final_block = bi + 1 == p.blocks.len();
        // Only the last position of the final block reaches the output, so
        // its queries (and everything after attention) can be restricted to
        // that row.
        let lq = if final_block && last_only { 1 } else { l };
        let xq = if lq == l {
            x
        } else {
            let flat = g.reshape(x, &[b * l, d])?;
            let rows: Vec<usize> = (0..b).map(|i| i * l + l - 1).collect();
            let last = g.index_select(flat, &rows)?;
            g.reshape(last, &[b, 1, d])?
        };

        let q = g.matmul(xq, blk.w_q, false)?;
        let k = g.matmul(x, blk.w_k, false)?;
        let v = g.matmul(x, blk.w_v, false)?;
        let q = split_heads(g, q, b, lq, heads, dh)?;
        let k = split_heads(g, k, b, l, heads, dh)?;
        let v = split_heads(g, v, b, l, heads, dh)?;

        let logits = g.matmul(q, k, true)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let mut mask = Vec::with_capacity(b * heads * lq * l);
        for bb in 0..b {
            for _ in 0..heads {
                for qi in 0..lq {
                    let pos = qi + (l - lq);
                    for kj in 0..l {
                        let future = kj > pos;
                        let padded = key_is_pad[bb * l + kj] && kj != pos;
                        mask.push(future || padded);
                    }
                }
            }
        }
        let logits = g.mask_fill(logits, mask, MASKED_LOGIT)?;
        let attn = g.softmax_rows(logits);
        let ctx = g.matmul(attn, v, false)?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        let out = g.matmul(ctx, blk.w_o, false)?;
        let out = g.dropout(out, opts.dropout, opts.train, rng);
        let res = g.add(xq, out)?;
        let y = g.layer_norm(res, blk.ln1_gain, blk.ln1_bias)?;

        let hdn = g.matmul(y, blk.w_1, false)?;
        let hdn = g.add(hdn, blk.b_1)?;
        let hdn = g.relu(hdn);
        let ff = g.matmul(hdn, blk.w_2, false)?;
        let ff = g.add(ff, blk.b_2)?;
        let ff = g.dropout(ff, opts.dropout, opts.train, rng);
        let res = g.add(y, ff)?;
        x = g.layer_norm(res, blk.ln2_gain, blk.ln2_bias)?;
        if lq == 1 {
            return Ok(g.reshape(x, &[b, d])?);
        }
    }
    let flat = g.reshape(x, &[b * l, d])?;
    let rows: Vec<usize> = (0..b).map(|i| i * l + l - 1).collect();
    Ok(g.index_select(flat, &rows)?)
}

/// `[b, t, heads*dh]` to `[b, heads, t, dh]`.
fn split_heads(g: &mut Graph, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var, EngineError> {
    let x = g.reshape(x, &[b, t, heads, dh])?;
    g.transpose(x, 1, 2)
}

/// Dot-product scores `[batch, num_items]` of each representation against
/// every real item embedding (the padding row is excluded).
pub fn score_all(g: &mut Graph, p: &BoundParams, h: Var) -> Result<Var, ModelError> {
    let rows: Vec<usize> = (0..p.dims.num_items).collect();
    let items = g.index_select(p.item_embedding, &rows)?;
    Ok(g.matmul(h, items, true)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{finite_diff_check, CoordSample};
    use rand_chacha::ChaCha8Rng;

    fn dims(d: usize, heads: usize, max_len: usize, num_items: usize) -> ModelDims {
        ModelDims { d, heads, blocks: 1, max_len, num_items }
    }

    fn ids(v: &[usize]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    fn encode_eval(p: &ModelParams, hist: &[ItemId], last_only: bool) -> Vec<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let h = encode_impl(&mut g, &bound, &[hist], EncodeOptions::EVAL, &mut NoDropout, last_only).unwrap();
        g.value(h).data().to_vec()
    }

    #[test]
    fn init_is_deterministic_with_zero_padding() {
        let dm = dims(8, 2, 5, 30);
        let a = init_params(dm, 4).unwrap();
        assert_eq!(a, init_params(dm, 4).unwrap());
        assert_ne!(a, init_params(dm, 5).unwrap());
        assert!(a.item_embedding.row(30).iter().all(|&v| v == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.tensors().iter().all(|t| t.data().iter().all(|v| v.abs() <= bound || *v == 1.0)));
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(init_params(dims(8, 3, 5, 10), 0), Err(ModelError::InvalidDims(_))));
    }

    #[test]
    fn hand_forward_on_two_dims() {
        let dm = dims(2, 1, 3, 4);
        let mut p = init_params(dm, 1).unwrap();
        for b in &mut p.blocks {
            for t in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_1, &mut b.w_2] {
                t.data_mut().fill(0.0);
            }
        }
        let x0 = p.item_embedding.row(2)[0] + p.positional.row(2)[0];
        let x1 = p.item_embedding.row(2)[1] + p.positional.row(2)[1];
        // Zero sublayers leave two layer norms of e + p. In two dimensions a
        // layer norm maps (a, b) to +-(a-b)/2 / sqrt((a-b)^2/4 + eps).
        let ln = |a: f64, b: f64| {
            let half = (a - b) / 2.0;
            let s = (half * half + 1e-8).sqrt();
            (half / s, -half / s)
        };
        let (y0, y1) = ln(x0, x1);
        let (z0, z1) = ln(y0, y1);
        let h = encode_eval(&p, &ids(&[2]), true);
        assert!((h[0] - z0).abs() < 1e-12 && (h[1] - z1).abs() < 1e-12, "{h:?} vs {z0},{z1}");
    }

    #[test]
    fn padding_positions_do_not_leak() {
        let dm = dims(8, 2, 6, 20);
        let p = init_params(dm, 2).unwrap();
        let hist = ids(&[3, 7, 1]);
        let base = encode_eval(&p, &hist, true);
        let mut q = p.clone();
        for r in 0..3 {
            q.positional.row_mut(r).iter_mut().for_each(|v| *v += 0.37 * (r + 1) as f64);
        }
        assert_eq!(encode_eval(&q, &hist, true), base);
    }

    #[test]
    fn invariant_to_amount_of_left_padding() {
        let short = init_params(dims(8, 2, 4, 20), 3).unwrap();
        let mut long = init_params(dims(8, 2, 9, 20), 9).unwrap();
        long.item_embedding = short.item_embedding.clone();
        long.blocks = short.blocks.clone();
        for r in 0..4 {
            let src = short.positional.row(r).to_vec();
            long.positional.row_mut(5 + r).copy_from_slice(&src);
        }
        let hist = ids(&[5, 2, 19]);
        let a = encode_eval(&short, &hist, true);
        let b = encode_eval(&long, &hist, true);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn last_position_query_matches_full_attention() {
        for blocks in [1, 2] {
            let dm = ModelDims { d: 8, heads: 4, blocks, max_len: 5, num_items: 15 };
            let p = init_params(dm, 6).unwrap();
            for hist in [ids(&[1]), ids(&[4, 4, 9]), ids(&[0, 1, 2, 3, 14])] {
                let fast = encode_eval(&p, &hist, true);
                let full = encode_eval(&p, &hist, false);
                for (a, b) in fast.iter().zip(&full) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batched_rows_match_single_histories() {
        let p = init_params(dims(8, 2, 5, 12), 8).unwrap();
        let hs = [ids(&[1, 2]), ids(&[3, 4, 5, 6, 7]), ids(&[11])];
        let refs: Vec<&[ItemId]> = hs.iter().map(|h| h.as_slice()).collect();
        let batch = p.score_histories(&refs).unwrap();
        for (h, row) in hs.iter().zip(&batch) {
            assert_eq!(&p.score_histories(&[h.as_slice()]).unwrap()[0], row);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let p = init_params(dims(8, 2, 5, 12), 8).unwrap();
        let h = ids(&[1, 5, 9]);
        assert_eq!(encode_eval(&p, &h, true), encode_eval(&p, &h, true));
    }

    #[test]
    fn history_validation() {
        let p = init_params(dims(4, 1, 3, 5), 0).unwrap();
        assert!(matches!(p.score_histories(&[&[]]), Err(ModelError::EmptyHistory)));
        assert!(matches!(p.score_histories(&[&ids(&[0, 1, 2, 3])]), Err(ModelError::HistoryTooLong { .. })));
        assert!(matches!(p.score_histories(&[&ids(&[5])]), Err(ModelError::InvalidItem { .. })));
    }

    #[test]
    fn scores_are_dot_products() {
        let dm = dims(4, 2, 3, 9);
        let p = init_params(dm, 12).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let h = g.constant(Tensor::matrix(1, 4, vec![0.3, -1.2, 0.5, 2.0]).unwrap());
        let s = score_all(&mut g, &bound, h).unwrap();
        let s = g.value(s).data().to_vec();
        assert_eq!(s.len(), 9);
        for (y, &got) in s.iter().enumerate() {
            let mut want = 0.0;
            for j in 0..4 {
                want += [0.3, -1.2, 0.5, 2.0][j] * p.item_embedding.row(y)[j];
            }
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_representation_scores_zero_and_self_match_is_max() {
        let dm = dims(4, 2, 3, 9);
        let mut p = init_params(dm, 12).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let s = score_all(&mut g, &bound, z).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));

        let hv = vec![0.6, 0.6, -0.6, 0.6];
        p.item_embedding.row_mut(5).copy_from_slice(&hv);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let h = g.constant(Tensor::matrix(1, 4, hv).unwrap());
        let s = score_all(&mut g, &bound, h).unwrap();
        let s = g.value(s).data();
        let best = (0..9).max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
        assert_eq!(best, 5);
        assert!((s[5] - 1.44).abs() < 1e-12);
    }

    #[test]
    fn permuting_items_permutes_scores() {
        let dm = dims(8, 2, 4, 10);
        let p = init_params(dm, 21).unwrap();
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 2, 8, 5, 6, 4];
        let mut q = p.clone();
        for (old, &new) in perm.iter().enumerate() {
            let row = p.item_embedding.row(old).to_vec();
            q.item_embedding.row_mut(new).copy_from_slice(&row);
        }
        let h = ids(&[1, 4, 6]);
        let hq: Vec<ItemId> = h.iter().map(|i| ItemId(perm[i.0])).collect();
        let a = &p.score_histories(&[&h]).unwrap()[0];
        let b = &q.score_histories(&[&hq]).unwrap()[0];
        for (old, &new) in perm.iter().enumerate() {
            assert!((a[old] - b[new]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_params(ModelDims { d: 8, heads: 2, blocks: 2, max_len: 5, num_items: 13 }, 77).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let back = ModelParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        buf[0] = b'X';
        assert!(matches!(ModelParams::read_checkpoint(&buf[..]), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn cross_entropy_gradient_over_all_parameters() {
        let dm = dims(8, 2, 5, 50);
        let p = init_params(dm, 5).unwrap();
        let hist = [ids(&[3, 17, 42]), ids(&[1, 2, 3, 4, 5])];
        let targets = [9usize, 33];
        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let check = finite_diff_check(
            |g, vars| {
                let bound = BoundParams::from_vars(dm, vars).unwrap();
                let refs: Vec<&[ItemId]> = hist.iter().map(|h| h.as_slice()).collect();
                let h = encode(g, &bound, &refs, EncodeOptions::EVAL, &mut NoDropout).unwrap();
                let s = score_all(g, &bound, h).unwrap();
                let lse = g.log_sum_exp_rows(s)?;
                let picked = g.gather(s, &targets, 1)?;
                let nll = g.sub(lse, picked)?;
                Ok(g.reduce_sum(nll))
            },
            &params,
            1e-5,
            CoordSample::Random { count: 600, seed: 3 },
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn training_dropout_draws_from_rng() {
        let p = init_params(dims(8, 2, 5, 12), 8).unwrap();
        let run = |seed| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let opts = EncodeOptions { dropout: 0.5, train: true };
            let h = encode(&mut g, &bound, &[&ids(&[1, 2, 3])], opts, &mut rng).unwrap();
            g.value(h).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
