//! Cross-modal joint-embedding model: a GRU caption encoder and a linear
//! image projector into a shared unit sphere, trained with a hardest-negative
//! triplet ranking loss. Also home to moderately hard negative mining and
//! recall@k evaluation.
//!
//! Two forward paths exist on purpose: a plain evaluation path used for
//! mining, rewards and recall (the model is frozen there), and a tape path
//! used only while training the retriever itself. Tests pin them against each
//! other.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::graphgrad::{NodeId, Tape, TapeError, Tensor};
use crate::linalg;
use crate::rltrain::{clip_global_norm, AdamConfig, OptimizerState};
use crate::shapeworld::{ImageRecord, Vocabulary};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("empty caption")]
    EmptyCaption,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("feature dimension {got} does not match configured {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("embedding collapsed to zero norm")]
    ZeroNorm,
    #[error("positive index {index} out of range for batch of {len}")]
    BadPositive { index: usize, len: usize },
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("mining range is invalid: lo {lo}, hi {hi}")]
    BadRange { lo: usize, hi: usize },
    #[error("requested {count} negatives but the clamped rank range holds {width}")]
    RangeTooNarrow { count: usize, width: usize },
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("recall needs 1 <= k <= {candidates}, got {k}")]
    BadK { k: usize, candidates: usize },
    #[error("query image id {0} is not among the candidates")]
    UnknownQueryId(String),
    #[error("no labeled records to train on")]
    NoLabeledData,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optimizer(#[from] crate::rltrain::RlError),
}

/// Model dimensions. Desk-scale defaults are 32/64/32 over 64-dim image
/// features; a full-scale configuration of the same architecture would sit
/// around 300/1024/1024 over 2048-dim features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrieverDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub joint: usize,
    pub image: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    pub dims: RetrieverDims,
    pub word_embedding: Tensor, // [V, E]
    pub w_update: Tensor,       // [H, E]
    pub u_update: Tensor,       // [H, H]
    pub b_update: Tensor,       // [H]
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
    pub caption_proj: Tensor, // [J, H]
    /// Image projection is bias-free so rankings are exactly invariant to a
    /// positive rescaling of raw features.
    pub image_proj: Tensor, // [J, D]
}

const TENSOR_NAMES: [&str; 12] = [
    "word_embedding",
    "w_update",
    "u_update",
    "b_update",
    "w_reset",
    "u_reset",
    "b_reset",
    "w_cand",
    "u_cand",
    "b_cand",
    "caption_proj",
    "image_proj",
];

impl RetrieverParams {
    pub fn init(dims: RetrieverDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape.to_vec(), values).expect("valid init shape")
        };
        let (v, e, h, j, d) = (dims.vocab, dims.embed, dims.hidden, dims.joint, dims.image);
        RetrieverParams {
            dims,
            word_embedding: uniform(&[v, e]),
            w_update: uniform(&[h, e]),
            u_update: uniform(&[h, h]),
            b_update: Tensor::zeros(&[h]),
            w_reset: uniform(&[h, e]),
            u_reset: uniform(&[h, h]),
            b_reset: Tensor::zeros(&[h]),
            w_cand: uniform(&[h, e]),
            u_cand: uniform(&[h, h]),
            b_cand: Tensor::zeros(&[h]),
            caption_proj: uniform(&[j, h]),
            image_proj: uniform(&[j, d]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.word_embedding,
            &self.w_update,
            &self.u_update,
            &self.b_update,
            &self.w_reset,
            &self.u_reset,
            &self.b_reset,
            &self.w_cand,
            &self.u_cand,
            &self.b_cand,
            &self.caption_proj,
            &self.image_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.word_embedding,
            &mut self.w_update,
            &mut self.u_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.u_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.u_cand,
            &mut self.b_cand,
            &mut self.caption_proj,
            &mut self.image_proj,
        ]
    }

    pub fn write_to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<(), CheckpointError> {
        let dims = Tensor::vector(vec![
            self.dims.vocab as f64,
            self.dims.embed as f64,
            self.dims.hidden as f64,
            self.dims.joint as f64,
            self.dims.image as f64,
        ])
        .expect("dims tensor");
        ckpt.push("retriever.dims", dims)?;
        for (name, tensor) in TENSOR_NAMES.iter().zip(self.tensors()) {
            ckpt.push(&format!("retriever.{name}"), tensor.clone())?;
        }
        Ok(())
    }

    pub fn read_from_checkpoint(ckpt: &Checkpoint) -> Result<Self, RetrieverError> {
        let d = ckpt.require_shaped("retriever.dims", &[5])?;
        let v = d.values();
        let dims = RetrieverDims {
            vocab: v[0] as usize,
            embed: v[1] as usize,
            hidden: v[2] as usize,
            joint: v[3] as usize,
            image: v[4] as usize,
        };
        let mut params = RetrieverParams::init(dims, 0);
        let (v, e, h, j, dd) = (dims.vocab, dims.embed, dims.hidden, dims.joint, dims.image);
        let shapes: [(&str, Vec<usize>); 12] = [
            ("word_embedding", vec![v, e]),
            ("w_update", vec![h, e]),
            ("u_update", vec![h, h]),
            ("b_update", vec![h]),
            ("w_reset", vec![h, e]),
            ("u_reset", vec![h, h]),
            ("b_reset", vec![h]),
            ("w_cand", vec![h, e]),
            ("u_cand", vec![h, h]),
            ("b_cand", vec![h]),
            ("caption_proj", vec![j, h]),
            ("image_proj", vec![j, dd]),
        ];
        for ((name, shape), slot) in shapes.iter().zip(params.tensors_mut()) {
            *slot = ckpt.require_shaped(&format!("retriever.{name}"), shape)?.clone();
        }
        Ok(params)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), RetrieverError> {
        if tokens.is_empty() {
            return Err(RetrieverError::EmptyCaption);
        }
        for &t in tokens {
            if t as usize >= self.dims.vocab {
                return Err(RetrieverError::TokenOutOfRange { id: t, vocab: self.dims.vocab });
            }
        }
        Ok(())
    }

    /// GRU over the embedded tokens, final hidden state projected to the
    /// joint space and scaled to unit norm.
    pub fn encode_caption(&self, tokens: &[u32]) -> Result<Vec<f64>, RetrieverError> {
        self.check_tokens(tokens)?;
        let e = self.dims.embed;
        let mut h = vec![0.0; self.dims.hidden];
        for &tok in tokens {
            let x = &self.word_embedding.values()[tok as usize * e..(tok as usize + 1) * e];
            h = self.gru_step(x, &h);
        }
        let c = linalg::matvec(&self.caption_proj, &h);
        normalize(c)
    }

    fn gru_step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut z = linalg::matvec(&self.w_update, x);
        linalg::add_assign(&mut z, &linalg::matvec(&self.u_update, h));
        linalg::add_assign(&mut z, self.b_update.values());
        let mut r = linalg::matvec(&self.w_reset, x);
        linalg::add_assign(&mut r, &linalg::matvec(&self.u_reset, h));
        linalg::add_assign(&mut r, self.b_reset.values());
        for v in z.iter_mut() {
            *v = linalg::sigmoid(*v);
        }
        for v in r.iter_mut() {
            *v = linalg::sigmoid(*v);
        }
        let gated: Vec<f64> = r.iter().zip(h).map(|(rv, hv)| rv * hv).collect();
        let mut n = linalg::matvec(&self.w_cand, x);
        linalg::add_assign(&mut n, &linalg::matvec(&self.u_cand, &gated));
        linalg::add_assign(&mut n, self.b_cand.values());
        for v in n.iter_mut() {
            *v = v.tanh();
        }
        n.iter().zip(&z).zip(h).map(|((nv, zv), hv)| (1.0 - zv) * nv + zv * hv).collect()
    }

    /// Linear projection of raw image features onto the unit sphere.
    pub fn encode_image(&self, features: &[f64]) -> Result<Vec<f64>, RetrieverError> {
        if features.len() != self.dims.image {
            return Err(RetrieverError::FeatureDim {
                expected: self.dims.image,
                got: features.len(),
            });
        }
        normalize(linalg::matvec(&self.image_proj, features))
    }
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>, RetrieverError> {
    let norm = linalg::l2_norm(&v);
    if norm == 0.0 {
        return Err(RetrieverError::ZeroNorm);
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Inner product of two unit-norm embeddings.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    linalg::dot(a, b)
}

// ---------------------------------------------------------------------------
// Tape forward path (used when training the retriever)
// ---------------------------------------------------------------------------

/// Parameter leaves bound to one tape, in `tensors()` order.
pub struct RetrieverBinding {
    ids: Vec<NodeId>,
}

impl RetrieverBinding {
    pub fn bind(params: &RetrieverParams, tape: &mut Tape) -> Self {
        let ids = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        RetrieverBinding { ids }
    }

    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn id(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

pub fn encode_caption_on_tape(
    params: &RetrieverParams,
    binding: &RetrieverBinding,
    tape: &mut Tape,
    tokens: &[u32],
) -> Result<NodeId, RetrieverError> {
    params.check_tokens(tokens)?;
    let [emb, wz, uz, bz, wr, ur, br, wn, un, bn, cproj, _] =
        [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11].map(|i| binding.id(i));
    let mut h = tape.leaf(Tensor::zeros(&[params.dims.hidden]));
    for &tok in tokens {
        let x = tape.gather_rows(emb, &[tok as usize])?;
        let z = {
            let a = tape.matmul(wz, x)?;
            let b = tape.matmul(uz, h)?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, bz)?;
            tape.sigmoid(s)?
        };
        let r = {
            let a = tape.matmul(wr, x)?;
            let b = tape.matmul(ur, h)?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, br)?;
            tape.sigmoid(s)?
        };
        let n = {
            let gated = tape.mul(r, h)?;
            let a = tape.matmul(wn, x)?;
            let b = tape.matmul(un, gated)?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, bn)?;
            tape.tanh(s)?
        };
        // h' = n + z * (h - n)
        let neg_n = tape.scalar_mul(n, -1.0)?;
        let h_minus_n = tape.add(h, neg_n)?;
        let delta = tape.mul(z, h_minus_n)?;
        h = tape.add(n, delta)?;
    }
    let c = tape.matmul(cproj, h)?;
    Ok(tape.l2_normalize(c)?)
}

pub fn encode_image_on_tape(
    params: &RetrieverParams,
    binding: &RetrieverBinding,
    tape: &mut Tape,
    features: &[f64],
) -> Result<NodeId, RetrieverError> {
    if features.len() != params.dims.image {
        return Err(RetrieverError::FeatureDim { expected: params.dims.image, got: features.len() });
    }
    let f = tape.leaf(Tensor::vector(features.to_vec())?);
    let proj = tape.matmul(binding.id(11), f)?;
    Ok(tape.l2_normalize(proj)?)
}

// ---------------------------------------------------------------------------
// Retrieval losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Triplet ranking with the hardest in-batch negative (max over j).
    VsePp,
    /// Triplet ranking summed over all negatives.
    Vse0,
    /// Temperature-scaled softmax over the similarity row.
    Softmax,
}

fn validate_loss_args(
    kind: LossKind,
    n: usize,
    positive: usize,
    margin: f64,
    temperature: f64,
) -> Result<(), RetrieverError> {
    if positive >= n {
        return Err(RetrieverError::BadPositive { index: positive, len: n });
    }
    match kind {
        LossKind::VsePp | LossKind::Vse0 if margin <= 0.0 || !margin.is_finite() => {
            Err(RetrieverError::BadMargin(margin))
        }
        LossKind::Softmax if temperature <= 0.0 || !temperature.is_finite() => {
            Err(RetrieverError::BadTemperature(temperature))
        }
        _ => Ok(()),
    }
}

/// Loss over a precomputed similarity row; the plain twin of
/// [`retrieval_loss_on_tape`], used where nothing is differentiated.
pub fn retrieval_loss_value(
    kind: LossKind,
    sims: &[f64],
    positive: usize,
    margin: f64,
    temperature: f64,
) -> Result<f64, RetrieverError> {
    validate_loss_args(kind, sims.len(), positive, margin, temperature)?;
    let s_pos = sims[positive];
    match kind {
        LossKind::VsePp => Ok(sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != positive)
            .map(|(_, &s)| (margin - s_pos + s).max(0.0))
            .fold(0.0, f64::max)),
        LossKind::Vse0 => Ok(sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != positive)
            .map(|(_, &s)| (margin - s_pos + s).max(0.0))
            .sum()),
        LossKind::Softmax => {
            // log-sum-exp of (s_j - s_i)/T; the all-equal row gives exactly ln n
            let deltas: Vec<f64> = sims.iter().map(|s| (s - s_pos) / temperature).collect();
            let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(max + deltas.iter().map(|d| (d - max).exp()).sum::<f64>().ln())
        }
    }
}

/// Differentiable retrieval loss for one caption against the batch images.
pub fn retrieval_loss_on_tape(
    tape: &mut Tape,
    kind: LossKind,
    caption: NodeId,
    images: &[NodeId],
    positive: usize,
    margin: f64,
    temperature: f64,
) -> Result<NodeId, RetrieverError> {
    validate_loss_args(kind, images.len(), positive, margin, temperature)?;
    let sims: Vec<NodeId> = images
        .iter()
        .map(|&v| {
            let prod = tape.mul(caption, v)?;
            tape.sum(prod)
        })
        .collect::<Result<_, TapeError>>()?;

    match kind {
        LossKind::VsePp | LossKind::Vse0 => {
            let margin_leaf = tape.leaf(Tensor::scalar(margin)?);
            let neg_pos = tape.scalar_mul(sims[positive], -1.0)?;
            let mut hinges = Vec::new();
            for (j, &s) in sims.iter().enumerate() {
                if j == positive {
                    continue;
                }
                let t = tape.add(s, neg_pos)?;
                let t = tape.add(t, margin_leaf)?;
                hinges.push(tape.clamp_min_zero(t)?);
            }
            if hinges.is_empty() {
                return Ok(tape.leaf(Tensor::scalar(0.0)?));
            }
            if kind == LossKind::VsePp {
                // max realized as selection of the largest forward value; ties
                // go to the earliest negative.
                let mut best = hinges[0];
                for &h in &hinges[1..] {
                    if tape.value(h).item() > tape.value(best).item() {
                        best = h;
                    }
                }
                Ok(best)
            } else {
                let mut total = hinges[0];
                for &h in &hinges[1..] {
                    total = tape.add(total, h)?;
                }
                Ok(total)
            }
        }
        LossKind::Softmax => {
            let mut row = tape.scalar_mul(sims[0], 1.0 / temperature)?;
            for &s in &sims[1..] {
                let scaled = tape.scalar_mul(s, 1.0 / temperature)?;
                row = tape.concat(row, scaled)?;
            }
            let lsm = tape.log_softmax(row)?;
            let picked = tape.slice(lsm, positive, 1)?;
            Ok(tape.scalar_mul(picked, -1.0)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RetrieverTrainConfig {
    pub embed: usize,
    pub hidden: usize,
    pub joint: usize,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub t_max: usize,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            embed: 32,
            hidden: 64,
            joint: 32,
            margin: 0.2,
            epochs: 15,
            batch_size: 32,
            lr: 2e-3,
            grad_clip: 5.0,
            seed: 0,
            t_max: 16,
        }
    }
}

#[derive(Debug)]
pub struct RetrieverTrainOutcome {
    pub params: RetrieverParams,
    /// Validation caption-to-image recall@1 after each epoch.
    pub val_recall_history: Vec<f64>,
    pub best_epoch: usize,
}

/// Train the joint embedding on (ground-truth caption, image) pairs with the
/// hardest-negative triplet loss, returning the parameters with the best
/// validation recall@1. Validation queries use each record's first caption.
pub fn train_retriever(
    labeled: &[&ImageRecord],
    validation: &[&ImageRecord],
    vocab: &Vocabulary,
    cfg: &RetrieverTrainConfig,
) -> Result<RetrieverTrainOutcome, RetrieverError> {
    if labeled.is_empty() || labeled.iter().any(|r| !r.is_labeled()) {
        return Err(RetrieverError::NoLabeledData);
    }
    let d_img = labeled[0].features.len();
    let dims = RetrieverDims {
        vocab: vocab.size(),
        embed: cfg.embed,
        hidden: cfg.hidden,
        joint: cfg.joint,
        image: d_img,
    };
    let mut params = RetrieverParams::init(dims, cfg.seed);
    let mut opt = OptimizerState::new(&params.tensors(), AdamConfig::constant(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);

    let encoded: Vec<Vec<Vec<u32>>> = labeled
        .iter()
        .map(|r| r.captions.iter().map(|c| vocab.encode(c, cfg.t_max)).collect())
        .collect();

    let mut best: Option<(f64, usize, RetrieverParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = crate::shapeworld::shuffled_indices(labeled.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            let mut tape = Tape::new();
            let binding = RetrieverBinding::bind(&params, &mut tape);
            let mut caption_nodes = Vec::with_capacity(chunk.len());
            let mut image_nodes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let caption_idx = rng.gen_range(0..encoded[i].len());
                let c =
                    encode_caption_on_tape(&params, &binding, &mut tape, &encoded[i][caption_idx])?;
                let v = encode_image_on_tape(&params, &binding, &mut tape, &labeled[i].features)?;
                caption_nodes.push(c);
                image_nodes.push(v);
            }
            let mut total: Option<NodeId> = None;
            for (i, &c) in caption_nodes.iter().enumerate() {
                let loss = retrieval_loss_on_tape(
                    &mut tape,
                    LossKind::VsePp,
                    c,
                    &image_nodes,
                    i,
                    cfg.margin,
                    1.0,
                )?;
                total = Some(match total {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = tape.scalar_mul(total, 1.0 / chunk.len() as f64)?;
            tape.backward(mean)?;
            let mut grads: Vec<Tensor> = binding
                .leaf_ids()
                .iter()
                .map(|&id| tape.grad(id).expect("backward ran").clone())
                .collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.update(&mut params.tensors_mut(), &grad_refs)?;
        }

        let recall = if validation.is_empty() {
            0.0
        } else {
            let queries: Vec<(String, Vec<u32>)> = validation
                .iter()
                .map(|r| (r.id.clone(), vocab.encode(&r.captions[0], cfg.t_max)))
                .collect();
            let candidates: Vec<(String, Vec<f64>)> =
                validation.iter().map(|r| (r.id.clone(), r.features.clone())).collect();
            recall_at_k(&params, &queries, &candidates, &[1])?[0]
        };
        history.push(recall);
        if best.as_ref().map_or(true, |(b, _, _)| recall > *b) {
            best = Some((recall, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(RetrieverTrainOutcome { params: best_params, val_recall_history: history, best_epoch })
}

// ---------------------------------------------------------------------------
// Mining and recall
// ---------------------------------------------------------------------------

/// Precomputed unit embeddings for a fixed image pool.
#[derive(Debug, Clone)]
pub struct ImageIndex {
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl ImageIndex {
    pub fn build(params: &RetrieverParams, records: &[&ImageRecord]) -> Result<Self, RetrieverError> {
        let mut ids = Vec::with_capacity(records.len());
        let mut embeddings = Vec::with_capacity(records.len());
        for r in records {
            ids.push(r.id.clone());
            embeddings.push(params.encode_image(&r.features)?);
        }
        Ok(ImageIndex { ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    /// Pool indices sorted by similarity to the query embedding, descending;
    /// ties keep pool order.
    pub fn ranked(&self, query_embedding: &[f64]) -> Vec<usize> {
        let sims: Vec<f64> =
            self.embeddings.iter().map(|e| similarity(query_embedding, e)).collect();
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        idx
    }
}

/// 1-based inclusive rank window for moderately hard negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningRange {
    lo: usize,
    hi: usize,
}

impl MiningRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self, RetrieverError> {
        if lo == 0 || lo >= hi {
            return Err(RetrieverError::BadRange { lo, hi });
        }
        Ok(MiningRange { lo, hi })
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    /// Intersect with [1, pool]; an empty intersection falls back to the
    /// whole pool.
    pub fn clamped(&self, pool: usize) -> (usize, usize) {
        let lo = self.lo.max(1);
        let hi = self.hi.min(pool);
        if lo > hi {
            (1, pool)
        } else {
            (lo, hi)
        }
    }
}

/// Rank the pool against a ground-truth caption and draw `count` distinct
/// images uniformly from the clamped rank window.
pub fn mine_hard_negatives(
    params: &RetrieverParams,
    query: &[u32],
    pool: &ImageIndex,
    range: MiningRange,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, RetrieverError> {
    if pool.is_empty() {
        return Err(RetrieverError::EmptyPool);
    }
    let query_embedding = params.encode_caption(query)?;
    let ranked = pool.ranked(&query_embedding);
    let (lo, hi) = range.clamped(pool.len());
    let width = hi - lo + 1;
    if count > width {
        return Err(RetrieverError::RangeTooNarrow { count, width });
    }
    // Partial Fisher-Yates over the rank window.
    let mut window: Vec<usize> = (lo..=hi).collect();
    for k in 0..count {
        let j = rng.gen_range(k..window.len());
        window.swap(k, j);
    }
    Ok(window[..count].iter().map(|&rank| pool.ids()[ranked[rank - 1]].clone()).collect())
}

/// Caption-to-image recall@k. Queries pair an image id with caption tokens;
/// rank ties are broken by stable candidate order.
pub fn recall_at_k(
    params: &RetrieverParams,
    queries: &[(String, Vec<u32>)],
    candidates: &[(String, Vec<f64>)],
    ks: &[usize],
) -> Result<Vec<f64>, RetrieverError> {
    if candidates.is_empty() {
        return Err(RetrieverError::EmptyPool);
    }
    for &k in ks {
        if k == 0 || k > candidates.len() {
            return Err(RetrieverError::BadK { k, candidates: candidates.len() });
        }
    }
    let mut position = std::collections::HashMap::new();
    for (i, (id, _)) in candidates.iter().enumerate() {
        position.insert(id.as_str(), i);
    }
    let embeddings: Vec<Vec<f64>> = candidates
        .iter()
        .map(|(_, f)| params.encode_image(f))
        .collect::<Result<_, _>>()?;

    let mut hits = vec![0usize; ks.len()];
    for (id, tokens) in queries {
        let own = *position
            .get(id.as_str())
            .ok_or_else(|| RetrieverError::UnknownQueryId(id.clone()))?;
        let c = params.encode_caption(tokens)?;
        let sims: Vec<f64> = embeddings.iter().map(|e| similarity(&c, e)).collect();
        let own_sim = sims[own];
        let rank = 1 + sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own_sim || (s == own_sim && j < own))
            .count();
        for (slot, &k) in hits.iter_mut().zip(ks) {
            if rank <= k {
                *slot += 1;
            }
        }
    }
    let n = queries.len().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}
