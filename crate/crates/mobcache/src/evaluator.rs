//! Latent-space evaluator: a small attention-based scorer trained with
//! similarity labels from the teacher, used at inference to judge candidate
//! branch steps.

use crate::cache::CacheIndex;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::domain::{context_features, cosine_unit, LatentStep, CONTEXT_FEATURE_DIM, EMBED_DIM};
use crate::nn::{
    add_acc, dot, init_uniform, matvec, matvec_t, outer_acc, sgd_update, sigmoid, softmax,
    tanh_vec,
};
use crate::rng::{mix, stream};
use crate::teacher::TeacherBackend;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;
use thiserror::Error;

/// Width of every internal representation.
pub const HIDDEN_DIM: usize = 64;
/// Positional tags are depth / 9 (the maximum chain length).
const POS_SCALE: f64 = 9.0;
const CKPT_TAG: &str = "branch-evaluator";

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty cache")]
    EmptyCache,
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("need at least {min} examples, got {got}")]
    TooFewExamples { min: usize, got: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("teacher failure: {0}")]
    Teacher(String),
}

/// Scorer parameters. One projected-attention block plus a feed-forward
/// head; all blocks are flat row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorModel {
    /// context projection, H x F
    pub w_ctx: Vec<f64>,
    /// step projection, H x D (shared by prefix steps and the candidate)
    pub w_step: Vec<f64>,
    /// head hidden layer, H x H
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    /// head output row, H
    pub w_out: Vec<f64>,
    /// head output bias, length 1
    pub b_out: Vec<f64>,
}

impl EvaluatorModel {
    /// Uniform [-0.1, 0.1] initialization from a fixed seed.
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(mix(&[seed, 0xe7a1]));
        Self {
            w_ctx: init_uniform(&mut rng, HIDDEN_DIM * CONTEXT_FEATURE_DIM, 0.1),
            w_step: init_uniform(&mut rng, HIDDEN_DIM * EMBED_DIM, 0.1),
            w_hidden: init_uniform(&mut rng, HIDDEN_DIM * HIDDEN_DIM, 0.1),
            b_hidden: init_uniform(&mut rng, HIDDEN_DIM, 0.1),
            w_out: init_uniform(&mut rng, HIDDEN_DIM, 0.1),
            b_out: init_uniform(&mut rng, 1, 0.1),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn blocks(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("w_ctx", &self.w_ctx),
            ("w_step", &self.w_step),
            ("w_hidden", &self.w_hidden),
            ("b_hidden", &self.b_hidden),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("w_ctx", &mut self.w_ctx),
            ("w_step", &mut self.w_step),
            ("w_hidden", &mut self.w_hidden),
            ("b_hidden", &mut self.b_hidden),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<(), EvaluatorError> {
        let blocks: Vec<(&str, &[f64])> =
            self.blocks().into_iter().map(|(n, b)| (n, b.as_slice())).collect();
        save_checkpoint(path, CKPT_TAG, &blocks)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvaluatorError> {
        let blocks = load_checkpoint(path, CKPT_TAG)?;
        let mut model = Self::init(0);
        for (name, data) in blocks {
            let slot = match name.as_str() {
                "w_ctx" => &mut model.w_ctx,
                "w_step" => &mut model.w_step,
                "w_hidden" => &mut model.w_hidden,
                "b_hidden" => &mut model.b_hidden,
                "w_out" => &mut model.w_out,
                "b_out" => &mut model.b_out,
                other => {
                    return Err(EvaluatorError::DimensionMismatch(format!(
                        "unknown block {other}"
                    )))
                }
            };
            if slot.len() != data.len() {
                return Err(EvaluatorError::DimensionMismatch(format!(
                    "block {name}: {} values, expected {}",
                    data.len(),
                    slot.len()
                )));
            }
            *slot = data;
        }
        Ok(model)
    }
}

/// Zero-initialized gradient accumulator matching the model layout.
#[derive(Debug, Clone)]
pub struct EvaluatorGrad {
    pub w_ctx: Vec<f64>,
    pub w_step: Vec<f64>,
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl EvaluatorGrad {
    pub fn zeros() -> Self {
        Self {
            w_ctx: vec![0.0; HIDDEN_DIM * CONTEXT_FEATURE_DIM],
            w_step: vec![0.0; HIDDEN_DIM * EMBED_DIM],
            w_hidden: vec![0.0; HIDDEN_DIM * HIDDEN_DIM],
            b_hidden: vec![0.0; HIDDEN_DIM],
            w_out: vec![0.0; HIDDEN_DIM],
            b_out: vec![0.0; 1],
        }
    }

    fn scale(&mut self, s: f64) {
        for block in [
            &mut self.w_ctx,
            &mut self.w_step,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ] {
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        [
            &self.w_ctx,
            &self.w_step,
            &self.w_hidden,
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ]
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
    }

    fn block_mut(&mut self, name: &str) -> &mut Vec<f64> {
        match name {
            "w_ctx" => &mut self.w_ctx,
            "w_step" => &mut self.w_step,
            "w_hidden" => &mut self.w_hidden,
            "b_hidden" => &mut self.b_hidden,
            "w_out" => &mut self.w_out,
            "b_out" => &mut self.b_out,
            other => panic!("unknown block {other}"),
        }
    }
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct EvaluatorExample {
    pub context_features: Vec<f64>,
    pub prefix: Vec<Vec<f64>>,
    pub candidate: Vec<f64>,
    pub label: f64,
    /// Whether the candidate is the chain's true next node (kept for held-out
    /// discrimination checks; not used by the loss).
    pub is_true_next: bool,
}

struct Forward {
    ctx_proj: Vec<f64>,
    prefix_proj: Vec<Vec<f64>>,
    cand_proj: Vec<f64>,
    attn_weights: Vec<f64>,
    combined: Vec<f64>,
    hidden: Vec<f64>,
    sigma: f64,
}

fn check_dims(
    ctx_features: &[f64],
    prefix: &[&[f64]],
    candidate: &[f64],
) -> Result<(), EvaluatorError> {
    if ctx_features.len() != CONTEXT_FEATURE_DIM {
        return Err(EvaluatorError::DimensionMismatch(format!(
            "context features {} != {CONTEXT_FEATURE_DIM}",
            ctx_features.len()
        )));
    }
    if prefix.is_empty() {
        return Err(EvaluatorError::DimensionMismatch("empty prefix".into()));
    }
    for (i, p) in prefix.iter().enumerate() {
        if p.len() != EMBED_DIM {
            return Err(EvaluatorError::DimensionMismatch(format!(
                "prefix step {i} dimension {} != {EMBED_DIM}",
                p.len()
            )));
        }
    }
    if candidate.len() != EMBED_DIM {
        return Err(EvaluatorError::DimensionMismatch(format!(
            "candidate dimension {} != {EMBED_DIM}",
            candidate.len()
        )));
    }
    Ok(())
}

fn forward(model: &EvaluatorModel, ctx_features: &[f64], prefix: &[&[f64]], candidate: &[f64]) -> Forward {
    let ctx_proj = matvec(&model.w_ctx, ctx_features, HIDDEN_DIM, CONTEXT_FEATURE_DIM);
    let prefix_proj: Vec<Vec<f64>> = prefix
        .iter()
        .map(|r| matvec(&model.w_step, r, HIDDEN_DIM, EMBED_DIM))
        .collect();
    let cand_proj = matvec(&model.w_step, candidate, HIDDEN_DIM, EMBED_DIM);

    // scaled dot-product attention with the candidate as query; keys and the
    // query carry a depth/9 positional tag as one extra coordinate
    let scale = 1.0 / ((HIDDEN_DIM + 1) as f64).sqrt();
    let cand_pos = prefix.len() as f64 / POS_SCALE;
    let scores: Vec<f64> = prefix_proj
        .iter()
        .enumerate()
        .map(|(i, p)| (dot(&cand_proj, p) + cand_pos * (i as f64 / POS_SCALE)) * scale)
        .collect();
    let attn_weights = softmax(&scores);
    let mut attn = vec![0.0; HIDDEN_DIM];
    for (w, p) in attn_weights.iter().zip(&prefix_proj) {
        for (a, v) in attn.iter_mut().zip(p) {
            *a += w * v;
        }
    }

    let combined: Vec<f64> = (0..HIDDEN_DIM)
        .map(|i| ctx_proj[i] + attn[i] + cand_proj[i])
        .collect();
    let pre = matvec(&model.w_hidden, &combined, HIDDEN_DIM, HIDDEN_DIM);
    let hidden = tanh_vec(&(0..HIDDEN_DIM).map(|i| pre[i] + model.b_hidden[i]).collect::<Vec<_>>());
    let z = dot(&model.w_out, &hidden) + model.b_out[0];
    Forward { ctx_proj, prefix_proj, cand_proj, attn_weights, combined, hidden, sigma: sigmoid(z) }
}

/// Plausibility score of `candidate` as the next step after `prefix`.
pub fn score(
    model: &EvaluatorModel,
    ctx_features: &[f64],
    prefix: &[LatentStep],
    candidate: &[f64],
) -> Result<f64, EvaluatorError> {
    let refs: Vec<&[f64]> = prefix.iter().map(|s| s.embedding.as_slice()).collect();
    check_dims(ctx_features, &refs, candidate)?;
    Ok(forward(model, ctx_features, &refs, candidate).sigma)
}

/// Gradient of `(sigma - label)^2` for one example; returns (loss, sigma).
fn backward(
    model: &EvaluatorModel,
    example: &EvaluatorExample,
    grad: &mut EvaluatorGrad,
) -> (f64, f64) {
    let prefix: Vec<&[f64]> = example.prefix.iter().map(|p| p.as_slice()).collect();
    let f = forward(model, &example.context_features, &prefix, &example.candidate);
    let err = f.sigma - example.label;
    let loss = err * err;

    let g_z = 2.0 * err * f.sigma * (1.0 - f.sigma);
    // output layer
    for i in 0..HIDDEN_DIM {
        grad.w_out[i] += g_z * f.hidden[i];
    }
    grad.b_out[0] += g_z;
    // hidden layer
    let g_pre: Vec<f64> = (0..HIDDEN_DIM)
        .map(|i| g_z * model.w_out[i] * (1.0 - f.hidden[i] * f.hidden[i]))
        .collect();
    outer_acc(&mut grad.w_hidden, &g_pre, &f.combined);
    add_acc(&mut grad.b_hidden, &g_pre);
    let g_combined = matvec_t(&model.w_hidden, &g_pre, HIDDEN_DIM, HIDDEN_DIM);

    // combined = ctx_proj + attn + cand_proj
    outer_acc(&mut grad.w_ctx, &g_combined, &example.context_features);
    let mut g_cand_proj = g_combined.clone();

    // attention backward
    let scale = 1.0 / ((HIDDEN_DIM + 1) as f64).sqrt();
    let g_attn = &g_combined;
    let g_a: Vec<f64> = f.prefix_proj.iter().map(|p| dot(g_attn, p)).collect();
    let weighted: f64 = f.attn_weights.iter().zip(&g_a).map(|(w, g)| w * g).sum();
    let g_scores: Vec<f64> = f
        .attn_weights
        .iter()
        .zip(&g_a)
        .map(|(w, g)| w * (g - weighted))
        .collect();
    for (i, p) in f.prefix_proj.iter().enumerate() {
        // value path + key path into each projected prefix step
        let g_p: Vec<f64> = (0..HIDDEN_DIM)
            .map(|d| f.attn_weights[i] * g_attn[d] + g_scores[i] * scale * f.cand_proj[d])
            .collect();
        outer_acc(&mut grad.w_step, &g_p, &example.prefix[i]);
        // query path accumulates into the candidate projection
        for d in 0..HIDDEN_DIM {
            g_cand_proj[d] += g_scores[i] * scale * p[d];
        }
    }
    outer_acc(&mut grad.w_step, &g_cand_proj, &example.candidate);

    let _ = f.ctx_proj;
    (loss, f.sigma)
}

/// Loss-curve record of one training run.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Full-dataset MSE; index 0 is the pre-training value.
    pub mse: Vec<f64>,
}

impl TrainingReport {
    pub fn initial(&self) -> f64 {
        self.mse[0]
    }

    pub fn final_mse(&self) -> f64 {
        *self.mse.last().unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,mse")?;
        for (epoch, mse) in self.mse.iter().enumerate() {
            writeln!(f, "{epoch},{mse}")?;
        }
        Ok(())
    }
}

fn dataset_mse(model: &EvaluatorModel, examples: &[EvaluatorExample]) -> f64 {
    let mut total = 0.0;
    for e in examples {
        let prefix: Vec<&[f64]> = e.prefix.iter().map(|p| p.as_slice()).collect();
        let sigma = forward(model, &e.context_features, &prefix, &e.candidate).sigma;
        total += (sigma - e.label) * (sigma - e.label);
    }
    total / examples.len() as f64
}

/// Mini-batch gradient descent on the squared error, batch 32. Plain SGD so
/// gradient checks stay exact.
pub fn train(
    model: &mut EvaluatorModel,
    examples: &[EvaluatorExample],
    epochs: usize,
    lr: f64,
) -> Result<TrainingReport, EvaluatorError> {
    const MIN_EXAMPLES: usize = 100;
    const BATCH: usize = 32;
    if examples.len() < MIN_EXAMPLES {
        return Err(EvaluatorError::TooFewExamples { min: MIN_EXAMPLES, got: examples.len() });
    }
    let mut mse = vec![dataset_mse(model, examples)];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..epochs {
        let mut rng = stream(mix(&[0x7a41, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let mut grad = EvaluatorGrad::zeros();
            for &i in chunk {
                backward(model, &examples[i], &mut grad);
            }
            grad.scale(1.0 / chunk.len() as f64);
            sgd_update(&mut model.w_ctx, &grad.w_ctx, lr);
            sgd_update(&mut model.w_step, &grad.w_step, lr);
            sgd_update(&mut model.w_hidden, &grad.w_hidden, lr);
            sgd_update(&mut model.b_hidden, &grad.b_hidden, lr);
            sgd_update(&mut model.w_out, &grad.w_out, lr);
            sgd_update(&mut model.b_out, &grad.b_out, lr);
        }
        let epoch_mse = dataset_mse(model, examples);
        if !epoch_mse.is_finite()
            || model.blocks().iter().any(|(_, b)| b.iter().any(|v| !v.is_finite()))
        {
            return Err(EvaluatorError::NonFiniteLoss {
                epoch,
                detail: format!("mse={epoch_mse}"),
            });
        }
        mse.push(epoch_mse);
    }
    Ok(TrainingReport { mse })
}

/// Builds similarity-based labels from the cache and teacher: positives are
/// the chains' true next nodes, negatives are random nodes from other chains,
/// and every label is the cosine of the candidate against the teacher's own
/// continuation, mapped to [0, 1]. Positives and negatives alternate, so the
/// class balance is 1/2 by construction.
pub fn build_labels(
    cache: &CacheIndex,
    teacher: &dyn TeacherBackend,
    n_examples: usize,
    seed: u64,
) -> Result<Vec<EvaluatorExample>, EvaluatorError> {
    if cache.chain_count() < 2 {
        // negatives need at least one other chain to draw from
        return Err(EvaluatorError::EmptyCache);
    }
    let chain_ids: Vec<_> = cache.entries().map(|e| e.chain_id).collect();
    let all_nodes: Vec<_> = chain_ids
        .iter()
        .flat_map(|&c| cache.main_path(c).unwrap().into_iter().map(move |n| (c, n)))
        .collect();

    let mut out = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let mut rng = stream(mix(&[seed, i as u64, 0x1a6e1]));
        let chain_id = chain_ids[rng.gen_range(0..chain_ids.len())];
        let entry = cache.entry(chain_id).unwrap();
        let steps = cache.chain_steps(chain_id).unwrap();
        let t = rng.gen_range(1..steps.len());
        let prefix: Vec<Vec<f64>> = steps[..t].iter().map(|s| s.embedding.clone()).collect();
        let prefix_latents = &steps[..t];

        let teacher_next = teacher
            .generate_next_step(&entry.context, prefix_latents, mix(&[seed, i as u64, 0x4e7]))
            .map_err(|e| EvaluatorError::Teacher(e.to_string()))?;

        let is_true_next = i % 2 == 0;
        let candidate = if is_true_next {
            steps[t].embedding.clone()
        } else {
            // random node from another chain
            loop {
                let &(c, n) = &all_nodes[rng.gen_range(0..all_nodes.len())];
                if c != chain_id {
                    break cache.node(n).unwrap().embedding.embedding.clone();
                }
            }
        };

        let label = cosine_unit(&candidate, &teacher_next.embedding);
        out.push(EvaluatorExample {
            context_features: context_features(&entry.context),
            prefix,
            candidate,
            label,
            is_true_next,
        });
    }
    Ok(out)
}

/// Compares the analytic gradient of `(sigma - b)^2` against central finite
/// differences for every parameter; returns the maximum relative error.
pub fn gradient_check(model: &EvaluatorModel, example: &EvaluatorExample, epsilon: f64) -> f64 {
    let mut grad = EvaluatorGrad::zeros();
    backward(model, example, &mut grad);

    let loss_of = |m: &EvaluatorModel| {
        let prefix: Vec<&[f64]> = example.prefix.iter().map(|p| p.as_slice()).collect();
        let sigma = forward(m, &example.context_features, &prefix, &example.candidate).sigma;
        (sigma - example.label) * (sigma - example.label)
    };

    let mut max_rel = 0.0f64;
    let mut work = model.clone();
    let block_names: Vec<&'static str> = model.blocks().iter().map(|(n, _)| *n).collect();
    for name in block_names {
        let len = grad.block_mut(name).len();
        for idx in 0..len {
            let original = work.blocks_mut().into_iter().find(|(n, _)| *n == name).unwrap().1[idx];
            {
                let b = work.blocks_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
                b[idx] = original + epsilon;
            }
            let up = loss_of(&work);
            {
                let b = work.blocks_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
                b[idx] = original - epsilon;
            }
            let down = loss_of(&work);
            {
                let b = work.blocks_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
                b[idx] = original;
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grad.block_mut(name)[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    max_rel
}

/// Rank-based AUC of positive scores over negative scores.
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positives.len() as f64 * negatives.len() as f64)
}
