//! LSTM caption decoder over image features.
//!
//! Image features condition the decoder through two linear maps that set the
//! initial hidden and cell state; decoding then starts from BOS. As with the
//! retriever there are two forward paths: the tape path carries gradients for
//! cross-entropy training and for the sampled-caption log-probabilities the
//! policy-gradient step differentiates, while greedy and beam decoding run on
//! the plain path.
//!
//! Sampling draws from the model distribution over the full vocabulary, so
//! its summed log-probability is exactly the teacher-forced log-likelihood of
//! the sampled sequence; greedy and beam search never select PAD or BOS.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::graphgrad::{NodeId, Tape, TapeError, Tensor};
use crate::linalg;
use crate::rltrain::{clip_global_norm, AdamConfig, OptimizerState};
use crate::shapeworld::{ImageRecord, Vocabulary, BOS, EOS, PAD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionerError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty target caption")]
    EmptyTarget,
    #[error("feature dimension {got} does not match configured {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("t_max must be at least 1")]
    BadTMax,
    #[error("beam width must be at least 1")]
    BadBeamWidth,
    #[error("no labeled records to train on")]
    NoLabeledData,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optimizer(#[from] crate::rltrain::RlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionerDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub image: usize,
}

/// Gate rows in the fused LSTM weight follow the order input, forget, cell
/// candidate, output; the forget slice is `[hidden, 2*hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams {
    pub dims: CaptionerDims,
    pub word_embedding: Tensor, // [V, E]
    pub h0_proj: Tensor,        // [H, D]
    pub c0_proj: Tensor,        // [H, D]
    pub lstm_w: Tensor,         // [4H, E + H]
    pub lstm_b: Tensor,         // [4H]
    pub out_w: Tensor,          // [V, H]
    pub out_b: Tensor,          // [V]
}

const TENSOR_NAMES: [&str; 7] =
    ["word_embedding", "h0_proj", "c0_proj", "lstm_w", "lstm_b", "out_w", "out_b"];

impl CaptionerParams {
    /// Uniform +-0.08 init with the forget-gate bias set to exactly 1.0.
    pub fn init(dims: CaptionerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape.to_vec(), values).expect("valid init shape")
        };
        let (v, e, h, d) = (dims.vocab, dims.embed, dims.hidden, dims.image);
        let mut lstm_b = uniform(&[4 * h]);
        for bias in &mut lstm_b.values_mut()[h..2 * h] {
            *bias = 1.0;
        }
        CaptionerParams {
            dims,
            word_embedding: uniform(&[v, e]),
            h0_proj: uniform(&[h, d]),
            c0_proj: uniform(&[h, d]),
            lstm_w: uniform(&[4 * h, e + h]),
            lstm_b,
            out_w: uniform(&[v, h]),
            out_b: uniform(&[v]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.word_embedding,
            &self.h0_proj,
            &self.c0_proj,
            &self.lstm_w,
            &self.lstm_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.word_embedding,
            &mut self.h0_proj,
            &mut self.c0_proj,
            &mut self.lstm_w,
            &mut self.lstm_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn write_to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<(), CheckpointError> {
        let dims = Tensor::vector(vec![
            self.dims.vocab as f64,
            self.dims.embed as f64,
            self.dims.hidden as f64,
            self.dims.image as f64,
        ])
        .expect("dims tensor");
        ckpt.push("captioner.dims", dims)?;
        for (name, tensor) in TENSOR_NAMES.iter().zip(self.tensors()) {
            ckpt.push(&format!("captioner.{name}"), tensor.clone())?;
        }
        Ok(())
    }

    pub fn read_from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CaptionerError> {
        let d = ckpt.require_shaped("captioner.dims", &[4])?;
        let v = d.values();
        let dims = CaptionerDims {
            vocab: v[0] as usize,
            embed: v[1] as usize,
            hidden: v[2] as usize,
            image: v[3] as usize,
        };
        let (v, e, h, dd) = (dims.vocab, dims.embed, dims.hidden, dims.image);
        let mut params = CaptionerParams::init(dims, 0);
        let shapes: [(&str, Vec<usize>); 7] = [
            ("word_embedding", vec![v, e]),
            ("h0_proj", vec![h, dd]),
            ("c0_proj", vec![h, dd]),
            ("lstm_w", vec![4 * h, e + h]),
            ("lstm_b", vec![4 * h]),
            ("out_w", vec![v, h]),
            ("out_b", vec![v]),
        ];
        for ((name, shape), slot) in shapes.iter().zip(params.tensors_mut()) {
            *slot = ckpt.require_shaped(&format!("captioner.{name}"), shape)?.clone();
        }
        Ok(params)
    }

    fn check_token(&self, id: u32) -> Result<(), CaptionerError> {
        if id as usize >= self.dims.vocab {
            return Err(CaptionerError::TokenOutOfRange { id, vocab: self.dims.vocab });
        }
        Ok(())
    }

    fn check_features(&self, features: &[f64]) -> Result<(), CaptionerError> {
        if features.len() != self.dims.image {
            return Err(CaptionerError::FeatureDim {
                expected: self.dims.image,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Initial decoder state from image features (linear maps, no squashing).
    pub fn init_state(&self, features: &[f64]) -> Result<DecoderState, CaptionerError> {
        self.check_features(features)?;
        Ok(DecoderState {
            h: linalg::matvec(&self.h0_proj, features),
            c: linalg::matvec(&self.c0_proj, features),
        })
    }

    /// One LSTM step on the plain path: log-probabilities over the full
    /// vocabulary plus the next state. Pure function of its inputs.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        prev_word: u32,
    ) -> Result<(Vec<f64>, DecoderState), CaptionerError> {
        self.check_token(prev_word)?;
        let e = self.dims.embed;
        let h = self.dims.hidden;
        let emb = &self.word_embedding.values()[prev_word as usize * e..(prev_word as usize + 1) * e];
        let mut x = Vec::with_capacity(e + h);
        x.extend_from_slice(emb);
        x.extend_from_slice(&state.h);
        let mut gates = linalg::matvec(&self.lstm_w, &x);
        linalg::add_assign(&mut gates, self.lstm_b.values());
        let mut new_c = Vec::with_capacity(h);
        let mut new_h = Vec::with_capacity(h);
        for i in 0..h {
            let input = linalg::sigmoid(gates[i]);
            let forget = linalg::sigmoid(gates[h + i]);
            let cand = gates[2 * h + i].tanh();
            let output = linalg::sigmoid(gates[3 * h + i]);
            let c = forget * state.c[i] + input * cand;
            new_h.push(output * c.tanh());
            new_c.push(c);
        }
        let mut logits = linalg::matvec(&self.out_w, &new_h);
        linalg::add_assign(&mut logits, self.out_b.values());
        Ok((linalg::log_softmax(&logits), DecoderState { h: new_h, c: new_c }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Tape forward path
// ---------------------------------------------------------------------------

/// Parameter leaves bound to one tape, in `tensors()` order.
pub struct CaptionerBinding {
    ids: Vec<NodeId>,
}

impl CaptionerBinding {
    pub fn bind(params: &CaptionerParams, tape: &mut Tape) -> Self {
        let ids = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        CaptionerBinding { ids }
    }

    pub fn from_leaves(ids: Vec<NodeId>) -> Self {
        CaptionerBinding { ids }
    }

    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn id(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

pub struct TapeState {
    pub h: NodeId,
    pub c: NodeId,
}

pub fn init_state_on_tape(
    params: &CaptionerParams,
    binding: &CaptionerBinding,
    tape: &mut Tape,
    features: &[f64],
) -> Result<TapeState, CaptionerError> {
    params.check_features(features)?;
    let f = tape.leaf(Tensor::vector(features.to_vec())?);
    Ok(TapeState { h: tape.matmul(binding.id(1), f)?, c: tape.matmul(binding.id(2), f)? })
}

/// One LSTM step on the tape; returns log-probabilities over V and the next
/// state, both differentiable.
pub fn decode_step_on_tape(
    params: &CaptionerParams,
    binding: &CaptionerBinding,
    tape: &mut Tape,
    state: &TapeState,
    prev_word: u32,
) -> Result<(NodeId, TapeState), CaptionerError> {
    params.check_token(prev_word)?;
    let h = params.dims.hidden;
    let emb = tape.gather_rows(binding.id(0), &[prev_word as usize])?;
    let x = tape.concat(emb, state.h)?;
    let pre = tape.matmul(binding.id(3), x)?;
    let gates = tape.add(pre, binding.id(4))?;
    let input = {
        let s = tape.slice(gates, 0, h)?;
        tape.sigmoid(s)?
    };
    let forget = {
        let s = tape.slice(gates, h, h)?;
        tape.sigmoid(s)?
    };
    let cand = {
        let s = tape.slice(gates, 2 * h, h)?;
        tape.tanh(s)?
    };
    let output = {
        let s = tape.slice(gates, 3 * h, h)?;
        tape.sigmoid(s)?
    };
    let kept = tape.mul(forget, state.c)?;
    let written = tape.mul(input, cand)?;
    let new_c = tape.add(kept, written)?;
    let squashed = tape.tanh(new_c)?;
    let new_h = tape.mul(output, squashed)?;
    let proj = tape.matmul(binding.id(5), new_h)?;
    let logits = tape.add(proj, binding.id(6))?;
    let logprobs = tape.log_softmax(logits)?;
    Ok((logprobs, TapeState { h: new_h, c: new_c }))
}

// ---------------------------------------------------------------------------
// Cross-entropy loss
// ---------------------------------------------------------------------------

/// Teacher-forced negative log-likelihood of `target` (BOS prepended, EOS
/// appended as the final prediction target).
pub fn xent_loss(
    params: &CaptionerParams,
    binding: &CaptionerBinding,
    tape: &mut Tape,
    features: &[f64],
    target: &[u32],
) -> Result<NodeId, CaptionerError> {
    xent_loss_scheduled(params, binding, tape, features, target, 0.0, None)
}

/// Cross-entropy with scheduled sampling: with probability `p_feedback` the
/// input at each step after BOS is drawn from the model's own distribution at
/// the previous step instead of the ground-truth word. The prediction targets
/// are unchanged.
pub fn xent_loss_scheduled(
    params: &CaptionerParams,
    binding: &CaptionerBinding,
    tape: &mut Tape,
    features: &[f64],
    target: &[u32],
    p_feedback: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, CaptionerError> {
    if target.is_empty() {
        return Err(CaptionerError::EmptyTarget);
    }
    for &t in target {
        params.check_token(t)?;
    }
    let mut state = init_state_on_tape(params, binding, tape, features)?;
    let mut input = BOS;
    let mut total: Option<NodeId> = None;
    for step in 0..=target.len() {
        let (logprobs, next) = decode_step_on_tape(params, binding, tape, &state, input)?;
        let expected = if step < target.len() { target[step] } else { EOS };
        let picked = tape.slice(logprobs, expected as usize, 1)?;
        total = Some(match total {
            Some(t) => tape.add(t, picked)?,
            None => picked,
        });
        state = next;
        if step < target.len() {
            input = target[step];
            if p_feedback > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    if r.gen_range(0.0..1.0) < p_feedback {
                        input = sample_index(tape.value(logprobs).values(), r) as u32;
                    }
                }
            }
        }
    }
    Ok(tape.scalar_mul(total.expect("nonempty target"), -1.0)?)
}

fn sample_index(logprobs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return i;
        }
    }
    logprobs.len() - 1
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// A caption sampled from the policy with its differentiable log-probability.
pub struct SampledCaption {
    /// Emitted tokens, at most one trailing EOS, never more than `t_max`.
    pub tokens: Vec<u32>,
    /// Scalar node: sum of the per-step log-probabilities.
    pub sum_logprob: NodeId,
    pub step_logprobs: Vec<f64>,
}

/// Draw one caption from the model distribution, recording it on the tape so
/// the summed log-probability can be back-propagated.
pub fn sample_caption(
    params: &CaptionerParams,
    binding: &CaptionerBinding,
    tape: &mut Tape,
    features: &[f64],
    rng: &mut ChaCha8Rng,
    t_max: usize,
) -> Result<SampledCaption, CaptionerError> {
    if t_max == 0 {
        return Err(CaptionerError::BadTMax);
    }
    let mut state = init_state_on_tape(params, binding, tape, features)?;
    let mut input = BOS;
    let mut tokens = Vec::new();
    let mut step_logprobs = Vec::new();
    let mut total: Option<NodeId> = None;
    for _ in 0..t_max {
        let (logprobs, next) = decode_step_on_tape(params, binding, tape, &state, input)?;
        let word = sample_index(tape.value(logprobs).values(), rng) as u32;
        let picked = tape.slice(logprobs, word as usize, 1)?;
        step_logprobs.push(tape.value(picked).item());
        total = Some(match total {
            Some(t) => tape.add(t, picked)?,
            None => picked,
        });
        tokens.push(word);
        state = next;
        if word == EOS {
            break;
        }
        input = word;
    }
    Ok(SampledCaption { tokens, sum_logprob: total.expect("t_max >= 1"), step_logprobs })
}

/// Greedy argmax decoding; PAD and BOS are never selected, ties go to the
/// lowest token id, a trailing EOS is kept when emitted.
pub fn greedy_decode(
    params: &CaptionerParams,
    features: &[f64],
    t_max: usize,
) -> Result<Vec<u32>, CaptionerError> {
    if t_max == 0 {
        return Err(CaptionerError::BadTMax);
    }
    let mut state = params.init_state(features)?;
    let mut input = BOS;
    let mut tokens = Vec::new();
    for _ in 0..t_max {
        let (logprobs, next) = params.decode_step(&state, input)?;
        let word = argmax_allowed(&logprobs) as u32;
        tokens.push(word);
        state = next;
        if word == EOS {
            break;
        }
        input = word;
    }
    Ok(tokens)
}

fn argmax_allowed(logprobs: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in logprobs.iter().enumerate() {
        if i as u32 == PAD || i as u32 == BOS {
            continue;
        }
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    best
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    logprob: f64,
    state: DecoderState,
}

/// Length-synchronous beam search over summed log-probabilities. Hypotheses
/// that emit EOS retire; the best finished hypothesis wins, falling back to
/// the best live one at `t_max`. Ties break by token-id lexicographic order.
pub fn beam_search(
    params: &CaptionerParams,
    features: &[f64],
    beam_width: usize,
    t_max: usize,
) -> Result<Vec<u32>, CaptionerError> {
    if beam_width == 0 {
        return Err(CaptionerError::BadBeamWidth);
    }
    if t_max == 0 {
        return Err(CaptionerError::BadTMax);
    }
    let initial = params.init_state(features)?;
    let mut live = vec![Beam { tokens: Vec::new(), logprob: 0.0, state: initial }];
    let mut finished: Vec<Beam> = Vec::new();
    for _ in 0..t_max {
        let mut candidates: Vec<Beam> = Vec::with_capacity(live.len() * params.dims.vocab);
        for beam in &live {
            let input = beam.tokens.last().copied().unwrap_or(BOS);
            let (logprobs, next) = params.decode_step(&beam.state, input)?;
            for (w, &lp) in logprobs.iter().enumerate() {
                if w as u32 == PAD || w as u32 == BOS {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(w as u32);
                candidates.push(Beam { tokens, logprob: beam.logprob + lp, state: next.clone() });
            }
        }
        candidates.sort_by(|a, b| {
            b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens))
        });
        live = Vec::with_capacity(beam_width);
        for candidate in candidates.into_iter().take(beam_width) {
            if candidate.tokens.last() == Some(&EOS) {
                finished.push(candidate);
            } else {
                live.push(candidate);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let best = if finished.is_empty() { live } else { finished }
        .into_iter()
        .min_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)))
        .expect("at least one hypothesis");
    Ok(best.tokens)
}

/// Total log-probability of a fixed token sequence on the plain path (the
/// sequence is scored as emitted, including a trailing EOS if present).
pub fn sequence_logprob(
    params: &CaptionerParams,
    features: &[f64],
    tokens: &[u32],
) -> Result<f64, CaptionerError> {
    let mut state = params.init_state(features)?;
    let mut input = BOS;
    let mut total = 0.0;
    for &tok in tokens {
        let (logprobs, next) = params.decode_step(&state, input)?;
        total += logprobs[tok as usize];
        state = next;
        input = tok;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// MLE pretraining
// ---------------------------------------------------------------------------

/// Scheduled-sampling probability schedule: starts at 0, grows by `step`
/// every `every` epochs, capped at `cap`.
#[derive(Debug, Clone)]
pub struct SsSchedule {
    pub step: f64,
    pub every: usize,
    pub cap: f64,
}

impl Default for SsSchedule {
    fn default() -> Self {
        SsSchedule { step: 0.05, every: 5, cap: 0.25 }
    }
}

impl SsSchedule {
    pub fn probability(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return 0.0;
        }
        (self.step * (epoch / self.every) as f64).min(self.cap)
    }
}

#[derive(Debug, Clone)]
pub struct MleConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub t_max: usize,
    pub schedule: SsSchedule,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            embed: 32,
            hidden: 64,
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            grad_clip: 5.0,
            seed: 0,
            t_max: 16,
            schedule: SsSchedule::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleEpochStats {
    pub epoch: usize,
    pub train_loss_per_token: f64,
    pub val_loss_per_token: f64,
    pub feedback_probability: f64,
}

#[derive(Debug)]
pub struct MleOutcome {
    pub params: CaptionerParams,
    pub history: Vec<MleEpochStats>,
    pub best_epoch: usize,
}

/// Teacher-forced validation loss per target token (perplexity = exp of it).
pub fn validation_loss_per_token(
    params: &CaptionerParams,
    records: &[&ImageRecord],
    vocab: &Vocabulary,
    t_max: usize,
) -> Result<f64, CaptionerError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for record in records {
        for caption in &record.captions {
            let target = vocab.encode(caption, t_max);
            if target.is_empty() {
                continue;
            }
            let mut state = params.init_state(&record.features)?;
            let mut input = BOS;
            for step in 0..=target.len() {
                let (logprobs, next) = params.decode_step(&state, input)?;
                let expected = if step < target.len() { target[step] } else { EOS };
                total -= logprobs[expected as usize];
                tokens += 1;
                state = next;
                if step < target.len() {
                    input = target[step];
                }
            }
        }
    }
    Ok(total / tokens.max(1) as f64)
}

/// Maximum-likelihood pretraining with scheduled sampling; returns the
/// parameters with the best validation loss.
pub fn pretrain_mle(
    train: &[&ImageRecord],
    validation: &[&ImageRecord],
    vocab: &Vocabulary,
    cfg: &MleConfig,
) -> Result<MleOutcome, CaptionerError> {
    if train.is_empty() || train.iter().any(|r| !r.is_labeled()) {
        return Err(CaptionerError::NoLabeledData);
    }
    let dims = CaptionerDims {
        vocab: vocab.size(),
        embed: cfg.embed,
        hidden: cfg.hidden,
        image: train[0].features.len(),
    };
    let mut params = CaptionerParams::init(dims, cfg.seed);
    let mut opt = OptimizerState::new(&params.tensors(), AdamConfig::constant(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);

    let encoded: Vec<Vec<Vec<u32>>> = train
        .iter()
        .map(|r| r.captions.iter().map(|c| vocab.encode(c, cfg.t_max)).collect())
        .collect();

    let mut best: Option<(f64, usize, CaptionerParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let p_feedback = cfg.schedule.probability(epoch);
        let order = crate::shapeworld::shuffled_indices(train.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let binding = CaptionerBinding::bind(&params, &mut tape);
            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let caption_idx = rng.gen_range(0..encoded[i].len());
                let target = &encoded[i][caption_idx];
                let loss = xent_loss_scheduled(
                    &params,
                    &binding,
                    &mut tape,
                    &train[i].features,
                    target,
                    p_feedback,
                    Some(&mut rng),
                )?;
                epoch_loss += tape.value(loss).item();
                epoch_tokens += target.len() + 1;
                total = Some(match total {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty chunk");
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

        let val_loss = if validation.is_empty() {
            epoch_loss / epoch_tokens.max(1) as f64
        } else {
            validation_loss_per_token(&params, validation, vocab, cfg.t_max)?
        };
        history.push(MleEpochStats {
            epoch,
            train_loss_per_token: epoch_loss / epoch_tokens.max(1) as f64,
            val_loss_per_token: val_loss,
            feedback_probability: p_feedback,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(MleOutcome { params: best_params, history, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgrad::grad_check;

    fn tiny_dims(vocab: usize) -> CaptionerDims {
        CaptionerDims { vocab, embed: 5, hidden: 6, image: 4 }
    }

    fn features() -> Vec<f64> {
        vec![0.4, -1.1, 0.7, 0.2]
    }

    #[test]
    fn init_is_deterministic_with_unit_forget_bias() {
        let a = CaptionerParams::init(tiny_dims(9), 3);
        let b = CaptionerParams::init(tiny_dims(9), 3);
        assert_eq!(a, b);
        let h = a.dims.hidden;
        assert!(a.lstm_b.values()[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(a.lstm_b.values()[..h].iter().all(|&v| v.abs() < 0.08 && v != 1.0));
        assert_eq!(a.lstm_w.shape(), &[24, 11]);
    }

    #[test]
    fn gate_shape_matches_dims() {
        let p = CaptionerParams::init(CaptionerDims { vocab: 50, embed: 8, hidden: 64, image: 4 }, 0);
        assert_eq!(p.lstm_w.shape(), &[256, 72]);
    }

    #[test]
    fn decode_step_is_a_distribution_and_pure() {
        let p = CaptionerParams::init(tiny_dims(9), 1);
        let state = p.init_state(&features()).unwrap();
        let (lp1, s1) = p.decode_step(&state, BOS).unwrap();
        let (lp2, s2) = p.decode_step(&state, BOS).unwrap();
        assert_eq!(lp1, lp2);
        assert_eq!(s1, s2);
        let mass: f64 = lp1.iter().map(|v| v.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9, "probability mass {mass}");
        assert!(matches!(p.decode_step(&state, 99), Err(CaptionerError::TokenOutOfRange { .. })));
    }

    #[test]
    fn zeroed_output_projection_gives_uniform_distribution() {
        let mut p = CaptionerParams::init(tiny_dims(9), 1);
        for v in p.out_w.values_mut() {
            *v = 0.0;
        }
        for v in p.out_b.values_mut() {
            *v = 0.0;
        }
        let state = p.init_state(&features()).unwrap();
        let (lp, _) = p.decode_step(&state, BOS).unwrap();
        let expect = -(9.0f64).ln();
        for &v in &lp {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_eval_steps_agree() {
        let p = CaptionerParams::init(tiny_dims(9), 5);
        let f = features();
        let eval_state = p.init_state(&f).unwrap();
        let (eval_lp, eval_next) = p.decode_step(&eval_state, 4).unwrap();
        let mut tape = Tape::new();
        let binding = CaptionerBinding::bind(&p, &mut tape);
        let state = init_state_on_tape(&p, &binding, &mut tape, &f).unwrap();
        let (lp, next) = decode_step_on_tape(&p, &binding, &mut tape, &state, 4).unwrap();
        for (a, b) in tape.value(lp).values().iter().zip(&eval_lp) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(next.h).values().iter().zip(&eval_next.h) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(next.c).values().iter().zip(&eval_next.c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_xent_is_length_times_log_vocab() {
        let mut p = CaptionerParams::init(tiny_dims(9), 1);
        for v in p.out_w.values_mut() {
            *v = 0.0;
        }
        for v in p.out_b.values_mut() {
            *v = 0.0;
        }
        let target = vec![4u32, 5, 6]; // 4 predictions including the EOS target
        let mut tape = Tape::new();
        let binding = CaptionerBinding::bind(&p, &mut tape);
        let loss = xent_loss(&p, &binding, &mut tape, &features(), &target).unwrap();
        let expect = 4.0 * (9.0f64).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let dims = tiny_dims(7);
        let p0 = CaptionerParams::init(dims, 11);
        let point: Vec<f64> =
            p0.tensors().iter().flat_map(|t| t.values().iter().cloned()).collect();
        let target = vec![4u32, 6, 5];
        let f = features();
        let err = grad_check(
            move |b| {
                let mut params = CaptionerParams::init(dims, 11);
                let shapes: Vec<Vec<usize>> =
                    params.tensors().iter().map(|t| t.shape().to_vec()).collect();
                let mut ids = Vec::new();
                for s in &shapes {
                    ids.push(b.leaf(s)?);
                }
                let tape = b.tape();
                for (slot, &id) in params.tensors_mut().into_iter().zip(&ids) {
                    *slot = tape.value(id).clone();
                }
                let binding = CaptionerBinding::from_leaves(ids);
                xent_loss(&params, &binding, tape, &f, &target).map_err(|e| match e {
                    CaptionerError::Tape(te) => te,
                    other => panic!("unexpected error {other}"),
                })
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn xent_decreases_under_plain_gradient_descent() {
        let p0 = CaptionerParams::init(tiny_dims(9), 2);
        let target = vec![4u32, 5, 6, 4];
        let f = features();
        let mut params = p0;
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let binding = CaptionerBinding::bind(&params, &mut tape);
            let loss = xent_loss(&params, &binding, &mut tape, &f, &target).unwrap();
            let value = tape.value(loss).item();
            assert!(value < last, "loss {value} did not decrease from {last}");
            last = value;
            tape.backward(loss).unwrap();
            let grads: Vec<Tensor> = binding
                .leaf_ids()
                .iter()
                .map(|&id| tape.grad(id).unwrap().clone())
                .collect();
            for (slot, grad) in params.tensors_mut().into_iter().zip(&grads) {
                for (v, g) in slot.values_mut().iter_mut().zip(grad.values()) {
                    *v -= 1e-3 * g;
                }
            }
        }
    }

    #[test]
    fn forced_one_hot_model_sampling_is_deterministic() {
        let mut p = CaptionerParams::init(tiny_dims(9), 3);
        for v in p.out_w.values_mut() {
            *v = 0.0;
        }
        for v in p.out_b.values_mut() {
            *v = 0.0;
        }
        p.out_b.values_mut()[5] = 1e6; // token 5 forever, EOS never
        let f = features();
        let mut tape = Tape::new();
        let binding = CaptionerBinding::bind(&p, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = sample_caption(&p, &binding, &mut tape, &f, &mut rng, 6).unwrap();
        assert_eq!(sampled.tokens, vec![5; 6]);
        assert!(tape.value(sampled.sum_logprob).item().abs() < 1e-6);
        let greedy = greedy_decode(&p, &f, 6).unwrap();
        assert_eq!(greedy, sampled.tokens);
    }

    #[test]
    fn sampled_logprob_bookkeeping_is_consistent() {
        let p = CaptionerParams::init(tiny_dims(9), 8);
        let f = features();
        let mut tape = Tape::new();
        let binding = CaptionerBinding::bind(&p, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sampled = sample_caption(&p, &binding, &mut tape, &f, &mut rng, 16).unwrap();
        let total: f64 = sampled.step_logprobs.iter().sum();
        assert!((tape.value(sampled.sum_logprob).item() - total).abs() < 1e-12);
        assert!(sampled.tokens.len() <= 16);
        let eos_count = sampled.tokens.iter().filter(|&&t| t == EOS).count();
        assert!(eos_count <= 1);
        if eos_count == 1 {
            assert_eq!(*sampled.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn sampled_gradient_equals_teacher_forced_gradient() {
        // backward through the sampled sum-log-prob vs xent on the same
        // sequence: identical magnitudes, opposite sign
        let p = CaptionerParams::init(tiny_dims(9), 4);
        let f = features();
        let mut tape = Tape::new();
        let binding = CaptionerBinding::bind(&p, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sampled = sample_caption(&p, &binding, &mut tape, &f, &mut rng, 5).unwrap();
        tape.backward(sampled.sum_logprob).unwrap();
        let sample_grads: Vec<Tensor> = binding
            .leaf_ids()
            .iter()
            .map(|&id| tape.grad(id).unwrap().clone())
            .collect();

        // the sampled sequence as teacher-forced target: strip trailing EOS
        // (xent appends it back), keep everything else
        let mut target = sampled.tokens.clone();
        let truncated_without_eos = target.last() != Some(&EOS);
        if !truncated_without_eos {
            target.pop();
        }
        if truncated_without_eos {
            return; // xent always appends an EOS target; lengths would differ
        }
        let mut tape2 = Tape::new();
        let binding2 = CaptionerBinding::bind(&p, &mut tape2);
        let loss = xent_loss(&p, &binding2, &mut tape2, &f, &target).unwrap();
        tape2.backward(loss).unwrap();
        for (&id, sg) in binding2.leaf_ids().iter().zip(&sample_grads) {
            let xg = tape2.grad(id).unwrap();
            for (a, b) in xg.values().iter().zip(sg.values()) {
                assert!((a + b).abs() < 1e-10, "grad mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn first_word_sampling_frequency_matches_step_distribution() {
        let p = CaptionerParams::init(tiny_dims(7), 9);
        let f = features();
        let state = p.init_state(&f).unwrap();
        let (logprobs, _) = p.decode_step(&state, BOS).unwrap();
        let probs: Vec<f64> = logprobs.iter().map(|v| v.exp()).collect();
        let draws = 100_000usize;
        let mut counts = vec![0usize; 7];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..draws {
            let mut tape = Tape::new();
            let binding = CaptionerBinding::bind(&p, &mut tape);
            let sampled = sample_caption(&p, &binding, &mut tape, &f, &mut rng, 1).unwrap();
            counts[sampled.tokens[0] as usize] += 1;
        }
        for (w, (&c, &q)) in counts.iter().zip(&probs).enumerate() {
            let mean = c as f64 / draws as f64;
            let sigma = (q * (1.0 - q) / draws as f64).sqrt();
            assert!(
                (mean - q).abs() <= 3.0 * sigma + 1e-9,
                "word {w}: freq {mean} vs prob {q} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        for seed in 0..100 {
            let p = CaptionerParams::init(tiny_dims(8), seed);
            let f: Vec<f64> = (0..4).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.5)).sin()).collect();
            let g = greedy_decode(&p, &f, 6).unwrap();
            let b = beam_search(&p, &f, 1, 6).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn decoded_outputs_never_contain_pad_or_bos() {
        for seed in 0..50 {
            let p = CaptionerParams::init(tiny_dims(8), 1000 + seed);
            let f: Vec<f64> = (0..4).map(|i| ((seed as f64 + 2.0) * (i as f64 + 0.3)).cos()).collect();
            for tokens in [greedy_decode(&p, &f, 8).unwrap(), beam_search(&p, &f, 3, 8).unwrap()] {
                assert!(tokens.iter().all(|&t| t != PAD && t != BOS));
                assert!(tokens.len() <= 8);
            }
        }
    }

    /// Exhaustive enumeration of every possible emission sequence, scored on
    /// the plain path; mirrors the beam objective independently.
    fn enumerate_best(params: &CaptionerParams, f: &[f64], t_max: usize) -> (Vec<u32>, f64) {
        fn recurse(
            params: &CaptionerParams,
            state: &DecoderState,
            input: u32,
            prefix: &mut Vec<u32>,
            logprob: f64,
            t_max: usize,
            best: &mut Option<(Vec<u32>, f64)>,
            all_finished: &mut Vec<(Vec<u32>, f64)>,
        ) {
            if prefix.len() == t_max {
                return;
            }
            let (logprobs, next) = params.decode_step(state, input).unwrap();
            for w in 0..logprobs.len() as u32 {
                if w == PAD || w == BOS {
                    continue;
                }
                prefix.push(w);
                let lp = logprob + logprobs[w as usize];
                if w == EOS {
                    all_finished.push((prefix.clone(), lp));
                    if best.as_ref().map_or(true, |(_, b)| lp > *b) {
                        *best = Some((prefix.clone(), lp));
                    }
                } else {
                    recurse(params, &next, w, prefix, lp, t_max, best, all_finished);
                }
                prefix.pop();
            }
        }
        let state = params.init_state(f).unwrap();
        let mut best = None;
        let mut finished = Vec::new();
        let mut prefix = Vec::new();
        recurse(params, &state, BOS, &mut prefix, 0.0, t_max, &mut best, &mut finished);
        best.expect("some finished sequence exists")
    }

    #[test]
    fn beam_two_beats_greedy_on_a_toy_where_greedy_is_suboptimal() {
        // deterministic search for a model where greedy is strictly
        // suboptimal; the first hit is frozen by construction
        let mut found = None;
        for seed in 0..2000 {
            let p = CaptionerParams::init(CaptionerDims { vocab: 6, embed: 4, hidden: 5, image: 3 }, seed);
            let f: Vec<f64> = (0..3).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.7)).sin() * 2.0).collect();
            let greedy = greedy_decode(&p, &f, 4).unwrap();
            if greedy.last() != Some(&EOS) {
                continue;
            }
            let greedy_score = sequence_logprob(&p, &f, &greedy).unwrap();
            let beam2 = beam_search(&p, &f, 2, 4).unwrap();
            if beam2.last() != Some(&EOS) {
                continue;
            }
            let beam_score = sequence_logprob(&p, &f, &beam2).unwrap();
            if beam_score > greedy_score + 1e-9 {
                found = Some((p, f, greedy, beam2, greedy_score, beam_score));
                break;
            }
        }
        let (p, f, greedy, beam2, greedy_score, beam_score) =
            found.expect("a toy with suboptimal greedy exists in the search space");
        // independent enumeration confirms the comparison and that beam-2
        // found a sequence at least as good as anything greedy produced
        let (best_seq, best_score) = enumerate_best(&p, &f, 4);
        assert!(beam_score > greedy_score);
        assert!(best_score >= beam_score - 1e-12);
        assert_ne!(greedy, beam2);
        assert_eq!(
            sequence_logprob(&p, &f, &best_seq).unwrap(),
            best_score
        );
    }

    #[test]
    fn schedule_matches_stated_values() {
        let s = SsSchedule::default();
        for e in 0..5 {
            assert_eq!(s.probability(e), 0.0);
        }
        assert_eq!(s.probability(5), 0.05);
        assert_eq!(s.probability(9), 0.05);
        assert_eq!(s.probability(10), 0.10);
        assert_eq!(s.probability(24), 0.20);
        assert_eq!(s.probability(25), 0.25);
        assert_eq!(s.probability(100), 0.25);
    }

    #[test]
    fn overfits_a_tiny_set_to_low_perplexity() {
        use crate::shapeworld::{generate, partition, GenerateConfig, Vocabulary};
        let cfg = GenerateConfig {
            n_labeled: 50,
            n_unlabeled: 0,
            n_val: 2,
            n_test: 1,
            d_img: 32,
            noise_level: 0.05,
            seed: 23,
            ..GenerateConfig::default()
        };
        let (mut records, split) = generate(&cfg).unwrap();
        // one caption per image so the mapping is deterministic and the
        // perplexity floor is 1
        for r in records.iter_mut() {
            r.captions.truncate(1);
        }
        let part = partition(&records, &split).unwrap();
        let corpus: Vec<Vec<String>> =
            part.labeled.iter().flat_map(|r| r.captions.iter().cloned()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let mcfg = MleConfig {
            embed: 12,
            hidden: 24,
            epochs: 120,
            batch_size: 10,
            lr: 8e-3,
            seed: 1,
            schedule: SsSchedule { step: 0.0, every: 5, cap: 0.0 },
            ..MleConfig::default()
        };
        let out = pretrain_mle(&part.labeled, &part.labeled, &vocab, &mcfg).unwrap();
        let loss = validation_loss_per_token(&out.params, &part.labeled, &vocab, 16).unwrap();
        let perplexity = loss.exp();
        assert!(perplexity < 1.1, "training perplexity {perplexity}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        use crate::shapeworld::{generate, partition, GenerateConfig, Vocabulary};
        let cfg = GenerateConfig {
            n_labeled: 12,
            n_unlabeled: 0,
            n_val: 4,
            n_test: 1,
            d_img: 32,
            noise_level: 0.1,
            seed: 2,
            ..GenerateConfig::default()
        };
        let (records, split) = generate(&cfg).unwrap();
        let part = partition(&records, &split).unwrap();
        let corpus: Vec<Vec<String>> =
            part.labeled.iter().flat_map(|r| r.captions.iter().cloned()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let mcfg = MleConfig { embed: 8, hidden: 12, epochs: 6, seed: 9, ..MleConfig::default() };
        let a = pretrain_mle(&part.labeled, &part.validation, &vocab, &mcfg).unwrap();
        let b = pretrain_mle(&part.labeled, &part.validation, &vocab, &mcfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = CaptionerParams::init(tiny_dims(9), 13);
        let mut ckpt = Checkpoint::new();
        p.write_to_checkpoint(&mut ckpt).unwrap();
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let q = CaptionerParams::read_from_checkpoint(&loaded).unwrap();
        assert_eq!(p, q);
    }
}
