//! Lightweight student decoder: projects latent chains, emits activity tokens
//! step by step, and trains by cross-entropy distillation from the reference
//! decoder plus a KL constraint tying its predicted jump-length distribution
//! to the teacher's.

use crate::cache::CacheIndex;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::domain::{
    encode_tokens, vocab, DomainError, LatentStep, TokenSequence, DIST_BINS, EMBED_DIM,
    KIND_COUNT, MAX_ACTIVITIES, MIN_ACTIVITIES, TIME_BUCKETS,
};
use crate::nn::{add_acc, init_uniform, matvec, matvec_t, outer_acc, sgd_update, softmax, tanh_vec};
use crate::rng::{mix, stream};
use crate::teacher::{decode_step_reference, StepSemantics, TeacherError};
use rand::seq::SliceRandom;
use std::path::Path;
use thiserror::Error;

pub const HIDDEN_DIM: usize = 64;
/// Jump-length law bins; matches the token grammar's distance bins.
pub const LAW_BINS: usize = DIST_BINS;
/// Additive smoothing for the teacher law distribution.
pub const LAW_SMOOTHING: f64 = 1e-3;
const CKPT_TAG: &str = "student-decoder";

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("reference decode failed: {0}")]
    Reference(String),
}

/// Student decoder parameters: two-layer projector, tanh recurrence, three
/// per-step classifier heads, and the law head over mean-pooled states.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentDecoder {
    pub proj_w1: Vec<f64>, // H x D
    pub proj_b1: Vec<f64>, // H
    pub proj_w2: Vec<f64>, // H x H
    pub proj_b2: Vec<f64>, // H
    pub rec_wh: Vec<f64>,  // H x H
    pub rec_wx: Vec<f64>,  // H x H
    pub rec_b: Vec<f64>,   // H
    pub kind_w: Vec<f64>,  // 8 x H
    pub kind_b: Vec<f64>,  // 8
    pub time_w: Vec<f64>,  // 48 x H
    pub time_b: Vec<f64>,  // 48
    pub dist_w: Vec<f64>,  // 10 x H
    pub dist_b: Vec<f64>,  // 10
    pub law_w: Vec<f64>,   // 10 x H
    pub law_b: Vec<f64>,   // 10
}

impl StudentDecoder {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(mix(&[seed, 0xdec0]));
        let h = HIDDEN_DIM;
        Self {
            proj_w1: init_uniform(&mut rng, h * EMBED_DIM, 0.1),
            proj_b1: init_uniform(&mut rng, h, 0.1),
            proj_w2: init_uniform(&mut rng, h * h, 0.1),
            proj_b2: init_uniform(&mut rng, h, 0.1),
            rec_wh: init_uniform(&mut rng, h * h, 0.1),
            rec_wx: init_uniform(&mut rng, h * h, 0.1),
            rec_b: init_uniform(&mut rng, h, 0.1),
            kind_w: init_uniform(&mut rng, KIND_COUNT * h, 0.1),
            kind_b: init_uniform(&mut rng, KIND_COUNT, 0.1),
            time_w: init_uniform(&mut rng, TIME_BUCKETS * h, 0.1),
            time_b: init_uniform(&mut rng, TIME_BUCKETS, 0.1),
            dist_w: init_uniform(&mut rng, DIST_BINS * h, 0.1),
            dist_b: init_uniform(&mut rng, DIST_BINS, 0.1),
            law_w: init_uniform(&mut rng, LAW_BINS * h, 0.1),
            law_b: init_uniform(&mut rng, LAW_BINS, 0.1),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn blocks(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("proj_w1", &self.proj_w1),
            ("proj_b1", &self.proj_b1),
            ("proj_w2", &self.proj_w2),
            ("proj_b2", &self.proj_b2),
            ("rec_wh", &self.rec_wh),
            ("rec_wx", &self.rec_wx),
            ("rec_b", &self.rec_b),
            ("kind_w", &self.kind_w),
            ("kind_b", &self.kind_b),
            ("time_w", &self.time_w),
            ("time_b", &self.time_b),
            ("dist_w", &self.dist_w),
            ("dist_b", &self.dist_b),
            ("law_w", &self.law_w),
            ("law_b", &self.law_b),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("proj_w1", &mut self.proj_w1),
            ("proj_b1", &mut self.proj_b1),
            ("proj_w2", &mut self.proj_w2),
            ("proj_b2", &mut self.proj_b2),
            ("rec_wh", &mut self.rec_wh),
            ("rec_wx", &mut self.rec_wx),
            ("rec_b", &mut self.rec_b),
            ("kind_w", &mut self.kind_w),
            ("kind_b", &mut self.kind_b),
            ("time_w", &mut self.time_w),
            ("time_b", &mut self.time_b),
            ("dist_w", &mut self.dist_w),
            ("dist_b", &mut self.dist_b),
            ("law_w", &mut self.law_w),
            ("law_b", &mut self.law_b),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        let blocks: Vec<(&str, &[f64])> =
            self.blocks().into_iter().map(|(n, b)| (n, b.as_slice())).collect();
        save_checkpoint(path, CKPT_TAG, &blocks)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        let blocks = load_checkpoint(path, CKPT_TAG)?;
        let mut model = Self::init(0);
        for (name, data) in blocks {
            let slots = model.blocks_mut();
            let slot = slots
                .into_iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| DecoderError::DimensionMismatch(format!("unknown block {name}")))?
                .1;
            if slot.len() != data.len() {
                return Err(DecoderError::DimensionMismatch(format!(
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

/// Gradient accumulator mirroring the parameter layout.
#[derive(Debug, Clone)]
pub struct DecoderGrad {
    pub proj_w1: Vec<f64>,
    pub proj_b1: Vec<f64>,
    pub proj_w2: Vec<f64>,
    pub proj_b2: Vec<f64>,
    pub rec_wh: Vec<f64>,
    pub rec_wx: Vec<f64>,
    pub rec_b: Vec<f64>,
    pub kind_w: Vec<f64>,
    pub kind_b: Vec<f64>,
    pub time_w: Vec<f64>,
    pub time_b: Vec<f64>,
    pub dist_w: Vec<f64>,
    pub dist_b: Vec<f64>,
    pub law_w: Vec<f64>,
    pub law_b: Vec<f64>,
}

impl DecoderGrad {
    pub fn zeros() -> Self {
        let h = HIDDEN_DIM;
        Self {
            proj_w1: vec![0.0; h * EMBED_DIM],
            proj_b1: vec![0.0; h],
            proj_w2: vec![0.0; h * h],
            proj_b2: vec![0.0; h],
            rec_wh: vec![0.0; h * h],
            rec_wx: vec![0.0; h * h],
            rec_b: vec![0.0; h],
            kind_w: vec![0.0; KIND_COUNT * h],
            kind_b: vec![0.0; KIND_COUNT],
            time_w: vec![0.0; TIME_BUCKETS * h],
            time_b: vec![0.0; TIME_BUCKETS],
            dist_w: vec![0.0; DIST_BINS * h],
            dist_b: vec![0.0; DIST_BINS],
            law_w: vec![0.0; LAW_BINS * h],
            law_b: vec![0.0; LAW_BINS],
        }
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("proj_w1", &mut self.proj_w1),
            ("proj_b1", &mut self.proj_b1),
            ("proj_w2", &mut self.proj_w2),
            ("proj_b2", &mut self.proj_b2),
            ("rec_wh", &mut self.rec_wh),
            ("rec_wx", &mut self.rec_wx),
            ("rec_b", &mut self.rec_b),
            ("kind_w", &mut self.kind_w),
            ("kind_b", &mut self.kind_b),
            ("time_w", &mut self.time_w),
            ("time_b", &mut self.time_b),
            ("dist_w", &mut self.dist_w),
            ("dist_b", &mut self.dist_b),
            ("law_w", &mut self.law_w),
            ("law_b", &mut self.law_b),
        ]
    }
}

/// One distillation example: a latent chain, the teacher's token output for
/// it, and the teacher's smoothed jump-length distribution.
#[derive(Debug, Clone)]
pub struct DistillationExample {
    pub steps: Vec<LatentStep>,
    pub teacher_tokens: TokenSequence,
    pub p_teacher: Vec<f64>,
}

impl DistillationExample {
    pub fn new(steps: Vec<LatentStep>, teacher_tokens: TokenSequence) -> Result<Self, DecoderError> {
        if teacher_tokens.activity_count() != steps.len() {
            return Err(DecoderError::DimensionMismatch(format!(
                "{} activities in tokens vs {} latent steps",
                teacher_tokens.activity_count(),
                steps.len()
            )));
        }
        let p_teacher = teacher_law_distribution(&teacher_tokens)?;
        Ok(Self { steps, teacher_tokens, p_teacher })
    }

    /// Builds the example by reference-decoding the latent chain, i.e. what
    /// the teacher itself would emit for it.
    pub fn from_steps(steps: Vec<LatentStep>) -> Result<Self, DecoderError> {
        let activities: Vec<_> = steps
            .iter()
            .map(|s| decode_step_reference(s).map(StepSemantics::to_activity))
            .collect::<Result<_, TeacherError>>()
            .map_err(|e| DecoderError::Reference(e.to_string()))?;
        let tokens = encode_tokens(&activities)?;
        Self::new(steps, tokens)
    }
}

/// Smoothed, renormalized histogram of a sequence's distance-bin tokens.
pub fn teacher_law_distribution(tokens: &TokenSequence) -> Result<Vec<f64>, DecoderError> {
    tokens.validate()?;
    let mut mass = vec![LAW_SMOOTHING; LAW_BINS];
    for (_, _, dist) in tokens.triples() {
        mass[dist] += 1.0;
    }
    let total: f64 = mass.iter().sum();
    for m in &mut mass {
        *m /= total;
    }
    Ok(mass)
}

struct Forward {
    proj_hidden: Vec<Vec<f64>>, // tanh layer of the projector, per step
    x: Vec<Vec<f64>>,           // projected steps
    h: Vec<Vec<f64>>,           // recurrent states
    kind_probs: Vec<Vec<f64>>,
    time_probs: Vec<Vec<f64>>,
    dist_probs: Vec<Vec<f64>>,
    hbar: Vec<f64>,
    law_probs: Vec<f64>,
}

fn check_steps(steps: &[LatentStep]) -> Result<(), DecoderError> {
    if !(MIN_ACTIVITIES..=MAX_ACTIVITIES).contains(&steps.len()) {
        return Err(DecoderError::DimensionMismatch(format!(
            "{} steps, expected 2..=9",
            steps.len()
        )));
    }
    for (i, s) in steps.iter().enumerate() {
        if s.embedding.len() != EMBED_DIM {
            return Err(DecoderError::DimensionMismatch(format!(
                "step {i} dimension {} != {EMBED_DIM}",
                s.embedding.len()
            )));
        }
    }
    Ok(())
}

fn forward(model: &StudentDecoder, steps: &[LatentStep]) -> Forward {
    let h_dim = HIDDEN_DIM;
    let t_len = steps.len();
    let mut proj_hidden = Vec::with_capacity(t_len);
    let mut x = Vec::with_capacity(t_len);
    let mut h: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut kind_probs = Vec::with_capacity(t_len);
    let mut time_probs = Vec::with_capacity(t_len);
    let mut dist_probs = Vec::with_capacity(t_len);

    let zero = vec![0.0; h_dim];
    for (t, step) in steps.iter().enumerate() {
        let ph_pre = matvec(&model.proj_w1, &step.embedding, h_dim, EMBED_DIM);
        let ph = tanh_vec(
            &(0..h_dim).map(|i| ph_pre[i] + model.proj_b1[i]).collect::<Vec<_>>(),
        );
        let xt_lin = matvec(&model.proj_w2, &ph, h_dim, h_dim);
        let xt: Vec<f64> = (0..h_dim).map(|i| xt_lin[i] + model.proj_b2[i]).collect();

        let prev = if t == 0 { &zero } else { &h[t - 1] };
        let wh = matvec(&model.rec_wh, prev, h_dim, h_dim);
        let wx = matvec(&model.rec_wx, &xt, h_dim, h_dim);
        let ht = tanh_vec(
            &(0..h_dim).map(|i| wh[i] + wx[i] + model.rec_b[i]).collect::<Vec<_>>(),
        );

        let kp = softmax(
            &add_bias(&matvec(&model.kind_w, &ht, KIND_COUNT, h_dim), &model.kind_b),
        );
        let tp = softmax(
            &add_bias(&matvec(&model.time_w, &ht, TIME_BUCKETS, h_dim), &model.time_b),
        );
        let dp = softmax(
            &add_bias(&matvec(&model.dist_w, &ht, DIST_BINS, h_dim), &model.dist_b),
        );

        proj_hidden.push(ph);
        x.push(xt);
        h.push(ht);
        kind_probs.push(kp);
        time_probs.push(tp);
        dist_probs.push(dp);
    }

    let mut hbar = vec![0.0; h_dim];
    for ht in &h {
        for (a, v) in hbar.iter_mut().zip(ht) {
            *a += v / t_len as f64;
        }
    }
    let law_probs = softmax(&add_bias(&matvec(&model.law_w, &hbar, LAW_BINS, h_dim), &model.law_b));

    Forward { proj_hidden, x, h, kind_probs, time_probs, dist_probs, hbar, law_probs }
}

fn add_bias(v: &[f64], b: &[f64]) -> Vec<f64> {
    v.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Greedy per-head argmax decoding into a grammar-valid sequence.
pub fn decode(model: &StudentDecoder, steps: &[LatentStep]) -> Result<TokenSequence, DecoderError> {
    check_steps(steps)?;
    let f = forward(model, steps);
    let mut tokens = Vec::with_capacity(steps.len() * 4 + 2);
    tokens.push(vocab::BOS);
    for t in 0..steps.len() {
        tokens.push(vocab::KIND_BASE + argmax(&f.kind_probs[t]) as u16);
        tokens.push(vocab::TIME_BASE + argmax(&f.time_probs[t]) as u16);
        tokens.push(vocab::DIST_BASE + argmax(&f.dist_probs[t]) as u16);
        tokens.push(vocab::SEP);
    }
    tokens.push(vocab::EOS);
    Ok(TokenSequence { tokens })
}

/// Predicted jump-length law distribution for a chain.
pub fn predicted_law(model: &StudentDecoder, steps: &[LatentStep]) -> Result<Vec<f64>, DecoderError> {
    check_steps(steps)?;
    Ok(forward(model, steps).law_probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn kl_divergence(z: &[f64], p: &[f64]) -> f64 {
    z.iter()
        .zip(p)
        .map(|(&zi, &pi)| if zi > 0.0 { zi * (zi / pi).ln() } else { 0.0 })
        .sum()
}

/// Accumulated losses and gradients over a batch.
struct BatchAccumulation {
    ce_sum: f64,
    kl_sum: f64,
    token_count: usize,
}

/// Per-example backward pass. CE gradients are weighted by `w_ce` (one over
/// the batch token count) and KL gradients by `w_kl` (lambda over the batch
/// example count), matching the batch loss
/// `L = ce_sum / tokens + lambda * kl_sum / examples`.
fn backward(
    model: &StudentDecoder,
    example: &DistillationExample,
    w_ce: f64,
    w_kl: f64,
    grad: &mut DecoderGrad,
) -> (f64, f64) {
    let h_dim = HIDDEN_DIM;
    let steps = &example.steps;
    let t_len = steps.len();
    let f = forward(model, steps);
    let targets: Vec<(usize, usize, usize)> = example.teacher_tokens.triples().collect();

    let mut ce = 0.0;
    for t in 0..t_len {
        let (k, tb, d) = targets[t];
        ce -= f.kind_probs[t][k].ln() + f.time_probs[t][tb].ln() + f.dist_probs[t][d].ln();
    }
    let kl = kl_divergence(&f.law_probs, &example.p_teacher);

    // law head backward
    let g_law_logits: Vec<f64> = (0..LAW_BINS)
        .map(|j| {
            let z = f.law_probs[j];
            w_kl * z * ((z / example.p_teacher[j]).ln() - kl)
        })
        .collect();
    outer_acc(&mut grad.law_w, &g_law_logits, &f.hbar);
    add_acc(&mut grad.law_b, &g_law_logits);
    let g_hbar = matvec_t(&model.law_w, &g_law_logits, LAW_BINS, h_dim);

    // backward through time
    let zero = vec![0.0; h_dim];
    let mut g_h_next: Vec<f64> = vec![0.0; h_dim]; // W_h^T g_pre_{t+1}
    for t in (0..t_len).rev() {
        let (k, tb, d) = targets[t];
        let mut g_h = g_h_next.clone();
        // mean-pool share of the law gradient
        for i in 0..h_dim {
            g_h[i] += g_hbar[i] / t_len as f64;
        }
        // classifier heads: softmax CE gradient = p - onehot
        let mut g_logits_kind = f.kind_probs[t].clone();
        g_logits_kind[k] -= 1.0;
        for g in &mut g_logits_kind {
            *g *= w_ce;
        }
        let mut g_logits_time = f.time_probs[t].clone();
        g_logits_time[tb] -= 1.0;
        for g in &mut g_logits_time {
            *g *= w_ce;
        }
        let mut g_logits_dist = f.dist_probs[t].clone();
        g_logits_dist[d] -= 1.0;
        for g in &mut g_logits_dist {
            *g *= w_ce;
        }
        outer_acc(&mut grad.kind_w, &g_logits_kind, &f.h[t]);
        add_acc(&mut grad.kind_b, &g_logits_kind);
        outer_acc(&mut grad.time_w, &g_logits_time, &f.h[t]);
        add_acc(&mut grad.time_b, &g_logits_time);
        outer_acc(&mut grad.dist_w, &g_logits_dist, &f.h[t]);
        add_acc(&mut grad.dist_b, &g_logits_dist);
        let head_back = |w: &[f64], g: &[f64], rows: usize| matvec_t(w, g, rows, h_dim);
        let gk = head_back(&model.kind_w, &g_logits_kind, KIND_COUNT);
        let gt = head_back(&model.time_w, &g_logits_time, TIME_BUCKETS);
        let gd = head_back(&model.dist_w, &g_logits_dist, DIST_BINS);
        for i in 0..h_dim {
            g_h[i] += gk[i] + gt[i] + gd[i];
        }

        // recurrence backward
        let g_pre: Vec<f64> =
            (0..h_dim).map(|i| g_h[i] * (1.0 - f.h[t][i] * f.h[t][i])).collect();
        let prev = if t == 0 { &zero } else { &f.h[t - 1] };
        outer_acc(&mut grad.rec_wh, &g_pre, prev);
        outer_acc(&mut grad.rec_wx, &g_pre, &f.x[t]);
        add_acc(&mut grad.rec_b, &g_pre);
        g_h_next = matvec_t(&model.rec_wh, &g_pre, h_dim, h_dim);

        // projector backward
        let g_x = matvec_t(&model.rec_wx, &g_pre, h_dim, h_dim);
        outer_acc(&mut grad.proj_w2, &g_x, &f.proj_hidden[t]);
        add_acc(&mut grad.proj_b2, &g_x);
        let g_ph_lin = matvec_t(&model.proj_w2, &g_x, h_dim, h_dim);
        let g_ph: Vec<f64> = (0..h_dim)
            .map(|i| g_ph_lin[i] * (1.0 - f.proj_hidden[t][i] * f.proj_hidden[t][i]))
            .collect();
        outer_acc(&mut grad.proj_w1, &g_ph, &steps[t].embedding);
        add_acc(&mut grad.proj_b1, &g_ph);
    }

    (ce, kl)
}

/// One teacher-forced gradient-descent update on a batch. Returns
/// `(L_distill, L_law, L_total)` with `L_total = L_distill + lambda * L_law`
/// holding exactly.
pub fn train_step(
    model: &mut StudentDecoder,
    batch: &[DistillationExample],
    lambda: f64,
    lr: f64,
) -> Result<(f64, f64, f64), DecoderError> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    if batch.is_empty() {
        return Err(DecoderError::DimensionMismatch("empty batch".into()));
    }
    for e in batch {
        check_steps(&e.steps)?;
    }
    let token_count: usize = batch.iter().map(|e| 3 * e.steps.len()).sum();
    let w_ce = 1.0 / token_count as f64;
    let w_kl = lambda / batch.len() as f64;

    let mut grad = DecoderGrad::zeros();
    let mut acc = BatchAccumulation { ce_sum: 0.0, kl_sum: 0.0, token_count };
    for e in batch {
        let (ce, kl) = backward(model, e, w_ce, w_kl, &mut grad);
        acc.ce_sum += ce;
        acc.kl_sum += kl;
    }
    let l_distill = acc.ce_sum / acc.token_count as f64;
    let l_law = acc.kl_sum / batch.len() as f64;
    let l_total = l_distill + lambda * l_law;
    if !l_total.is_finite() {
        return Err(DecoderError::NonFiniteLoss { step: 0, detail: format!("total={l_total}") });
    }

    for (name, g) in grad.blocks_mut() {
        let slots = model.blocks_mut();
        let p = slots.into_iter().find(|(n, _)| *n == name).unwrap().1;
        sgd_update(p, g, lr);
    }
    Ok((l_distill, l_law, l_total))
}

/// Per-epoch loss row of a decoder training run.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLossRow {
    pub epoch: usize,
    pub l_distill: f64,
    pub l_law: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderTrainingReport {
    /// Index 0 is the pre-training evaluation.
    pub rows: Vec<DecoderLossRow>,
}

impl DecoderTrainingReport {
    pub fn initial_total(&self) -> f64 {
        self.rows[0].l_total
    }

    pub fn final_total(&self) -> f64 {
        self.rows.last().unwrap().l_total
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,l_distill,l_law,l_total")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.epoch, r.l_distill, r.l_law, r.l_total)?;
        }
        Ok(())
    }
}

/// Full-dataset losses without updating parameters.
pub fn evaluate_losses(
    model: &StudentDecoder,
    examples: &[DistillationExample],
    lambda: f64,
) -> (f64, f64, f64) {
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0usize;
    for e in examples {
        let f = forward(model, &e.steps);
        for (t, (k, tb, d)) in e.teacher_tokens.triples().enumerate() {
            ce_sum -= f.kind_probs[t][k].ln() + f.time_probs[t][tb].ln() + f.dist_probs[t][d].ln();
        }
        kl_sum += kl_divergence(&f.law_probs, &e.p_teacher);
        tokens += 3 * e.steps.len();
    }
    let l_distill = ce_sum / tokens as f64;
    let l_law = kl_sum / examples.len() as f64;
    (l_distill, l_law, l_distill + lambda * l_law)
}

/// Mini-batch training loop, batch 32, seeded shuffling.
pub fn train(
    model: &mut StudentDecoder,
    examples: &[DistillationExample],
    epochs: usize,
    lr: f64,
    lambda: f64,
) -> Result<DecoderTrainingReport, DecoderError> {
    const BATCH: usize = 32;
    let (d0, l0, t0) = evaluate_losses(model, examples, lambda);
    let mut rows = vec![DecoderLossRow { epoch: 0, l_distill: d0, l_law: l0, l_total: t0 }];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..epochs {
        let mut rng = stream(mix(&[0xdec0de, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let batch: Vec<DistillationExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            train_step(model, &batch, lambda, lr)?;
        }
        let (d, l, t) = evaluate_losses(model, examples, lambda);
        if !t.is_finite() {
            return Err(DecoderError::NonFiniteLoss { step: epoch, detail: format!("total={t}") });
        }
        rows.push(DecoderLossRow { epoch: epoch + 1, l_distill: d, l_law: l, l_total: t });
    }
    Ok(DecoderTrainingReport { rows })
}

/// Distillation examples for every cached chain (reference-decoded targets).
pub fn examples_from_cache(
    cache: &CacheIndex,
    limit: usize,
) -> Result<Vec<DistillationExample>, DecoderError> {
    let mut out = Vec::new();
    for entry in cache.entries().take(limit) {
        let steps = cache
            .chain_steps(entry.chain_id)
            .map_err(|e| DecoderError::Reference(e.to_string()))?;
        out.push(DistillationExample::from_steps(steps)?);
    }
    Ok(out)
}

/// Fraction of content tokens the student reproduces exactly.
pub fn token_accuracy(
    model: &StudentDecoder,
    examples: &[DistillationExample],
) -> Result<f64, DecoderError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in examples {
        let decoded = decode(model, &e.steps)?;
        for (got, want) in decoded.triples().zip(e.teacher_tokens.triples()) {
            correct += (got.0 == want.0) as usize
                + (got.1 == want.1) as usize
                + (got.2 == want.2) as usize;
            total += 3;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean held-out KL between the law head and the teacher distribution.
pub fn held_out_law_kl(model: &StudentDecoder, examples: &[DistillationExample]) -> f64 {
    let mut total = 0.0;
    for e in examples {
        let f = forward(model, &e.steps);
        total += kl_divergence(&f.law_probs, &e.p_teacher);
    }
    total / examples.len() as f64
}

/// Analytic-vs-finite-difference check of `L_total` on one example, over
/// every parameter including the law head.
pub fn gradient_check_decoder(
    model: &StudentDecoder,
    example: &DistillationExample,
    lambda: f64,
    epsilon: f64,
) -> f64 {
    let tokens = 3 * example.steps.len();
    let mut grad = DecoderGrad::zeros();
    backward(model, example, 1.0 / tokens as f64, lambda, &mut grad);

    let loss_of = |m: &StudentDecoder| {
        let (d, l, _) = evaluate_losses(m, std::slice::from_ref(example), lambda);
        d + lambda * l
    };

    let mut max_rel = 0.0f64;
    let mut work = model.clone();
    let names: Vec<&'static str> = model.blocks().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = {
            let mut g = grad.blocks_mut();
            g.iter_mut().find(|(n, _)| *n == name).unwrap().1.len()
        };
        for idx in 0..len {
            let original = {
                let slots = work.blocks_mut();
                slots.into_iter().find(|(n, _)| *n == name).unwrap().1[idx]
            };
            let set = |w: &mut StudentDecoder, v: f64| {
                let slots = w.blocks_mut();
                slots.into_iter().find(|(n, _)| *n == name).unwrap().1[idx] = v;
            };
            set(&mut work, original + epsilon);
            let up = loss_of(&work);
            set(&mut work, original - epsilon);
            let down = loss_of(&work);
            set(&mut work, original);
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = {
                let mut g = grad.blocks_mut();
                g.iter_mut().find(|(n, _)| *n == name).unwrap().1[idx]
            };
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    max_rel
}
