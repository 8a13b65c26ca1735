//! Self-critical REINFORCE training loop over mixed labeled/unlabeled
//! batches, plus the Adam optimizer and its cosine warm-restart schedule
//! shared by all training phases.
//!
//! Each step samples one caption per image, scores it (consensus plus
//! weighted self-retrieval for labeled images, retrieval only for unlabeled
//! ones), subtracts the reward of the greedy caption as baseline, and ascends
//! `(r - b) * log p` through the sampled caption's tape. The retrieval model
//! is frozen throughout: it only ever produces reward values, never receives
//! gradients.

use crate::captioner::{
    greedy_decode, sample_caption, CaptionerBinding, CaptionerError, CaptionerParams,
};
use crate::graphgrad::{NodeId, Tape, TapeError, Tensor};
use crate::retriever::{
    mine_hard_negatives, ImageIndex, MiningRange, RetrieverError, RetrieverParams,
};
use crate::reward::{CorpusStats, RewardConfig, RewardContext, RewardError};
use crate::shapeworld::{ImageRecord, Vocabulary};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerShape(String),
    #[error("batch of {batch} needs {required} labeled records, only {available} exist")]
    NotEnoughLabeled { batch: usize, required: usize, available: usize },
    #[error("unlabeled pool too small: {required} distinct mined images required, {available} reachable")]
    PoolTooSmall { required: usize, available: usize },
    #[error("training mode needs a non-empty unlabeled pool")]
    MissingUnlabeledPool,
    #[error("batch ratio must have a positive labeled share")]
    BadRatio,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: mean reward {mean_reward}, mean baseline {mean_baseline}")]
    NonFiniteLoss { step: u64, mean_reward: f64, mean_baseline: f64 },
    #[error(transparent)]
    Captioner(#[from] CaptionerError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

// ---------------------------------------------------------------------------
// Adam with cosine annealing and warm restarts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps per cosine cycle; 0 disables the schedule (constant lr).
    pub cosine_period: usize,
    /// Cycle length multiplier applied at each restart.
    pub restart_mult: f64,
    pub min_lr: f64,
}

impl AdamConfig {
    pub fn constant(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine_period: 0,
            restart_mult: 1.0,
            min_lr: 0.0,
        }
    }

    pub fn with_restarts(lr: f64, period: usize, mult: f64) -> Self {
        AdamConfig { cosine_period: period, restart_mult: mult, ..AdamConfig::constant(lr) }
    }
}

/// First/second moment accumulators over a fixed parameter ordering.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use. With the schedule enabled this
    /// is cosine annealing from `lr` to `min_lr`, returning to `lr` at every
    /// restart; cycle lengths grow by `restart_mult`.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.cosine_period == 0 {
            return c.lr;
        }
        let mut remaining = self.step as f64;
        let mut period = c.cosine_period as f64;
        while remaining >= period {
            remaining -= period;
            period *= c.restart_mult.max(1.0);
        }
        let phase = remaining / period;
        c.min_lr + 0.5 * (c.lr - c.min_lr) * (1.0 + (std::f64::consts::PI * phase).cos())
    }

    /// One bias-corrected Adam update over all parameters.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), RlError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(RlError::OptimizerShape(format!(
                "expected {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = self.config.clone();
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.shape() != grad.shape() || param.shape() != m.shape() {
                return Err(RlError::OptimizerShape(format!(
                    "param {:?} vs grad {:?} vs moment {:?}",
                    param.shape(),
                    grad.shape(),
                    m.shape()
                )));
            }
            let pv = param.values_mut();
            let gv = grad.values();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for i in 0..pv.len() {
                mv[i] = c.beta1 * mv[i] + (1.0 - c.beta1) * gv[i];
                vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * gv[i] * gv[i];
                let m_hat = mv[i] / bias1;
                let v_hat = vv[i] / bias2;
                pv[i] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().flat_map(|g| g.values().iter()).map(|v| v * v).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.values_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

/// Labeled-to-unlabeled proportion of one mini-batch, e.g. 1:1 or 1:2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchRatio {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl BatchRatio {
    /// Split a batch size by the ratio; the labeled share is rounded to the
    /// nearest integer and kept in [1, batch-1] while unlabeled data is in
    /// play.
    pub fn split(&self, batch_size: usize) -> (usize, usize) {
        if self.unlabeled == 0 {
            return (batch_size, 0);
        }
        let total = (self.labeled + self.unlabeled) as f64;
        let n_l = ((batch_size as f64 * self.labeled as f64 / total).round() as usize)
            .clamp(1, batch_size.saturating_sub(1).max(1));
        (n_l, batch_size - n_l)
    }
}

/// One planned mini-batch: labeled ids, mined unlabeled ids, and the caption
/// index used as each labeled image's mining query.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub query_captions: Vec<usize>,
}

/// Sample the labeled half uniformly and fill the unlabeled half by mining
/// moderately hard negatives of one randomly chosen ground-truth caption per
/// labeled image, deduplicating and re-mining until the batch is full.
#[allow(clippy::too_many_arguments)]
pub fn compose_batch(
    labeled: &[&ImageRecord],
    encoded_captions: &[Vec<Vec<u32>>],
    pool: Option<&ImageIndex>,
    retriever: &RetrieverParams,
    ratio: BatchRatio,
    batch_size: usize,
    range: MiningRange,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan, RlError> {
    if ratio.labeled == 0 {
        return Err(RlError::BadRatio);
    }
    if batch_size == 0 {
        return Err(RlError::EmptyBatch);
    }
    let (n_l, n_u) = match pool {
        Some(p) if ratio.unlabeled > 0 && !p.is_empty() => ratio.split(batch_size),
        _ => (batch_size, 0),
    };
    if n_l > labeled.len() {
        return Err(RlError::NotEnoughLabeled {
            batch: batch_size,
            required: n_l,
            available: labeled.len(),
        });
    }

    // labeled half: sample without replacement
    let mut indices: Vec<usize> = (0..labeled.len()).collect();
    for k in 0..n_l {
        let j = rng.gen_range(k..indices.len());
        indices.swap(k, j);
    }
    let picked: Vec<usize> = indices[..n_l].to_vec();
    let labeled_ids: Vec<String> = picked.iter().map(|&i| labeled[i].id.clone()).collect();
    let query_captions: Vec<usize> =
        picked.iter().map(|&i| rng.gen_range(0..encoded_captions[i].len())).collect();

    let mut unlabeled_ids: Vec<String> = Vec::new();
    if n_u > 0 {
        let pool = pool.expect("pool checked above");
        let per_query = n_u.div_ceil(n_l);
        let mut taken: HashSet<String> = HashSet::new();
        for (&idx, &cap) in picked.iter().zip(&query_captions) {
            let mined = mine_hard_negatives(
                retriever,
                &encoded_captions[idx][cap],
                pool,
                range,
                per_query,
                rng,
            )?;
            for id in mined {
                if unlabeled_ids.len() < n_u && taken.insert(id.clone()) {
                    unlabeled_ids.push(id);
                }
            }
        }
        // refill after deduplication by walking each query's rank window in a
        // shuffled order, skipping anything already taken
        if unlabeled_ids.len() < n_u {
            let (lo, hi) = range.clamped(pool.len());
            let mut reachable: HashSet<&str> = HashSet::new();
            let mut walks: Vec<Vec<&str>> = Vec::with_capacity(n_l);
            for (&idx, &cap) in picked.iter().zip(&query_captions) {
                let embedding = retriever.encode_caption(&encoded_captions[idx][cap])?;
                let ranked = pool.ranked(&embedding);
                let mut window: Vec<&str> =
                    (lo..=hi).map(|rank| pool.ids()[ranked[rank - 1]].as_str()).collect();
                for k in 0..window.len() {
                    let j = rng.gen_range(k..window.len());
                    window.swap(k, j);
                }
                reachable.extend(window.iter().copied());
                walks.push(window);
            }
            if reachable.len() < n_u {
                return Err(RlError::PoolTooSmall { required: n_u, available: reachable.len() });
            }
            let mut cursors = vec![0usize; walks.len()];
            'fill: loop {
                let mut progressed = false;
                for (walk, cursor) in walks.iter().zip(cursors.iter_mut()) {
                    while *cursor < walk.len() {
                        let id = walk[*cursor];
                        *cursor += 1;
                        if taken.insert(id.to_string()) {
                            unlabeled_ids.push(id.to_string());
                            progressed = true;
                            break;
                        }
                    }
                    if unlabeled_ids.len() == n_u {
                        break 'fill;
                    }
                }
                if !progressed {
                    return Err(RlError::PoolTooSmall {
                        required: n_u,
                        available: unlabeled_ids.len(),
                    });
                }
            }
        }
    }

    Ok(BatchPlan { labeled: labeled_ids, unlabeled: unlabeled_ids, query_captions })
}

// ---------------------------------------------------------------------------
// REINFORCE step
// ---------------------------------------------------------------------------

/// One image inside a policy-gradient step; `references` is `None` for
/// unlabeled images, which therefore can never contribute a consensus term.
pub struct StepImage<'a> {
    pub id: &'a str,
    pub features: &'a [f64],
    pub references: Option<&'a [Vec<u32>]>,
}

#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub mean_advantage: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// How many images had a consensus score evaluated; always the labeled
    /// count.
    pub consensus_evals: usize,
}

/// Sample one caption per image, reward it, subtract the greedy baseline and
/// apply one optimizer update. The retriever parameters are read-only.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_step(
    params: &mut CaptionerParams,
    retriever: &RetrieverParams,
    batch: &[StepImage],
    stats: &CorpusStats,
    reward_cfg: &RewardConfig,
    opt: &mut OptimizerState,
    grad_clip: f64,
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepDiagnostics, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let batch_embeddings: Vec<Vec<f64>> = batch
        .iter()
        .map(|image| retriever.encode_image(image.features))
        .collect::<Result<_, _>>()?;
    let ctx = RewardContext {
        retriever,
        stats,
        config: reward_cfg,
        batch_embeddings: &batch_embeddings,
    };

    let mut tape = Tape::new();
    let binding = CaptionerBinding::bind(params, &mut tape);
    let mut diagnostics = StepDiagnostics {
        lr: opt.current_lr(),
        n_labeled: batch.iter().filter(|i| i.references.is_some()).count(),
        n_unlabeled: batch.iter().filter(|i| i.references.is_none()).count(),
        ..StepDiagnostics::default()
    };

    let inv_n = 1.0 / batch.len() as f64;
    let mut total: Option<NodeId> = None;
    for (position, image) in batch.iter().enumerate() {
        let sampled = sample_caption(params, &binding, &mut tape, image.features, rng, t_max)?;
        let greedy = greedy_decode(params, image.features, t_max)?;
        let (reward, baseline) = match image.references {
            Some(refs) => (
                ctx.labeled_reward(&sampled.tokens, refs, position)?,
                ctx.labeled_reward(&greedy, refs, position)?,
            ),
            None => (
                ctx.unlabeled_reward(&sampled.tokens, position)?,
                ctx.unlabeled_reward(&greedy, position)?,
            ),
        };
        if image.references.is_some() {
            diagnostics.consensus_evals += 1;
        }
        let advantage = reward - baseline;
        diagnostics.mean_reward += reward * inv_n;
        diagnostics.mean_baseline += baseline * inv_n;
        diagnostics.mean_advantage += advantage * inv_n;
        let term = tape.scalar_mul(sampled.sum_logprob, -advantage * inv_n)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty batch");
    diagnostics.loss = tape.value(total).item();
    if !diagnostics.loss.is_finite()
        || !diagnostics.mean_reward.is_finite()
        || !diagnostics.mean_baseline.is_finite()
    {
        return Err(RlError::NonFiniteLoss {
            step: opt.step_count(),
            mean_reward: diagnostics.mean_reward,
            mean_baseline: diagnostics.mean_baseline,
        });
    }
    tape.backward(total)?;
    let mut grads: Vec<Tensor> = binding
        .leaf_ids()
        .iter()
        .map(|&id| tape.grad(id).expect("backward ran").clone())
        .collect();
    diagnostics.grad_norm = clip_global_norm(&mut grads, grad_clip);
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.update(&mut params.tensors_mut(), &grad_refs)?;
    Ok(diagnostics)
}

// ---------------------------------------------------------------------------
// Full training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Consensus reward only (alpha = 0), labeled data only.
    Baseline,
    /// Composite reward on fully labeled batches.
    SrFl,
    /// Composite reward on mixed batches with mined unlabeled images.
    SrPl,
}

#[derive(Debug, Clone)]
pub struct RlTrainConfig {
    pub mode: TrainingMode,
    pub reward: RewardConfig,
    pub batch_size: usize,
    pub ratio: BatchRatio,
    pub mining_range: MiningRange,
    pub epochs: usize,
    /// 0 derives one pass over the labeled set per epoch.
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub t_max: usize,
    /// Report wall_time_s as 0.0 so reruns are byte-identical.
    pub zero_wall_time: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub val_cider: f64,
    pub val_recall_at_1: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RlOutcome {
    pub params: CaptionerParams,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Greedy-decode the validation set and score it: mean consensus score under
/// the training-reference statistics plus generated-caption recall@1.
pub fn evaluate_captioner(
    params: &CaptionerParams,
    retriever: &RetrieverParams,
    records: &[&ImageRecord],
    vocab: &Vocabulary,
    stats: &CorpusStats,
    reward_cfg: &RewardConfig,
    t_max: usize,
) -> Result<(f64, f64), RlError> {
    if records.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut total_cider = 0.0;
    let mut queries = Vec::with_capacity(records.len());
    for record in records {
        let tokens = greedy_decode(params, &record.features, t_max)?;
        let refs: Vec<Vec<u32>> =
            record.captions.iter().map(|c| vocab.encode(c, t_max)).collect();
        total_cider +=
            crate::reward::cider_d(&tokens, &refs, stats, &reward_cfg.cider)?;
        queries.push((record.id.clone(), crate::reward::retrieval_query(&tokens)));
    }
    let candidates: Vec<(String, Vec<f64>)> =
        records.iter().map(|r| (r.id.clone(), r.features.clone())).collect();
    let recall = crate::retriever::recall_at_k(retriever, &queries, &candidates, &[1])?[0];
    Ok((total_cider / records.len() as f64, recall))
}

/// Policy-gradient fine-tuning from a pretrained captioner with a frozen
/// retriever; returns the parameters of the epoch with the best validation
/// consensus score.
#[allow(clippy::too_many_arguments)]
pub fn train_rl(
    mle_params: &CaptionerParams,
    retriever: &RetrieverParams,
    labeled: &[&ImageRecord],
    unlabeled: &[&ImageRecord],
    validation: &[&ImageRecord],
    vocab: &Vocabulary,
    cfg: &RlTrainConfig,
) -> Result<RlOutcome, RlError> {
    if labeled.is_empty() {
        return Err(RlError::NotEnoughLabeled { batch: cfg.batch_size, required: 1, available: 0 });
    }
    let use_pool = cfg.mode == TrainingMode::SrPl;
    if use_pool && unlabeled.is_empty() {
        return Err(RlError::MissingUnlabeledPool);
    }

    let encoded: Vec<Vec<Vec<u32>>> = labeled
        .iter()
        .map(|r| r.captions.iter().map(|c| vocab.encode(c, cfg.t_max)).collect())
        .collect();
    let stats = CorpusStats::build(&encoded, cfg.reward.cider.n_max)?;
    let by_id: HashMap<&str, (&ImageRecord, usize)> = labeled
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), (*r, i)))
        .collect();
    let pool_records: HashMap<&str, &ImageRecord> =
        unlabeled.iter().map(|r| (r.id.as_str(), *r)).collect();
    let pool_index =
        if use_pool { Some(ImageIndex::build(retriever, unlabeled)?) } else { None };

    let ratio = if use_pool { cfg.ratio } else { BatchRatio { labeled: 1, unlabeled: 0 } };
    let (n_l, _) = ratio.split(cfg.batch_size);
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        labeled.len().div_ceil(n_l.max(1))
    };

    let mut params = mle_params.clone();
    let mut opt = OptimizerState::new(&params.tensors(), cfg.adam.clone());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(5);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(6);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CaptionerParams)> = None;
    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut reward_sum = 0.0;
        let mut baseline_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let plan = compose_batch(
                labeled,
                &encoded,
                pool_index.as_ref(),
                retriever,
                ratio,
                cfg.batch_size,
                cfg.mining_range,
                &mut batch_rng,
            )?;
            let mut batch: Vec<StepImage> = Vec::with_capacity(cfg.batch_size);
            for id in &plan.labeled {
                let (record, idx) = by_id[id.as_str()];
                batch.push(StepImage {
                    id: &record.id,
                    features: &record.features,
                    references: Some(&encoded[idx]),
                });
            }
            for id in &plan.unlabeled {
                let record = pool_records[id.as_str()];
                batch.push(StepImage {
                    id: &record.id,
                    features: &record.features,
                    references: None,
                });
            }
            let diag = reinforce_step(
                &mut params,
                retriever,
                &batch,
                &stats,
                &cfg.reward,
                &mut opt,
                cfg.grad_clip,
                cfg.t_max,
                &mut sample_rng,
            )?;
            reward_sum += diag.mean_reward;
            baseline_sum += diag.mean_baseline;
        }
        let (val_cider, val_recall) = evaluate_captioner(
            &params,
            retriever,
            validation,
            vocab,
            &stats,
            &cfg.reward,
            cfg.t_max,
        )?;
        history.push(EpochMetrics {
            epoch,
            mean_reward: reward_sum / steps_per_epoch.max(1) as f64,
            mean_baseline: baseline_sum / steps_per_epoch.max(1) as f64,
            val_cider,
            val_recall_at_1: val_recall,
            lr: opt.current_lr(),
            wall_time_s: if cfg.zero_wall_time {
                0.0
            } else {
                epoch_start.elapsed().as_secs_f64()
            },
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_cider > *b) {
            best = Some((val_cider, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(RlOutcome { params: best_params, history, best_epoch })
}
