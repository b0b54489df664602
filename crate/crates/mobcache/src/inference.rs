//! Trajectory generation engine: context matching against the cache, then
//! follow / explore / generate-new strategy selection, student decoding, and
//! gravity-model geolocation.
//!
//! Every user draws from an RNG stream seeded by `(global_seed, user_id)`, so
//! results are independent of batch size and worker scheduling.

use crate::cache::{CacheError, CacheIndex, ChainId, NodeId};
use crate::decoder::{decode as student_decode, DecoderError, StudentDecoder};
use crate::domain::{
    context_features, cosine_unit, DomainError, LatentStep, Provenance, ReasoningChain,
    SimulationContext, TokenSequence, Trajectory, MAX_ACTIVITIES,
};
use crate::evaluator::{score as evaluator_score, EvaluatorModel};
use crate::geo::{materialize, City, GeoError, GravityParams};
use crate::rng::{mix, stream};
use crate::teacher::{encode_tokens_from_steps, TeacherBackend, TeacherError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("geolocation failure: {0}")]
    Geolocation(#[from] GeoError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Knobs of the inference engine.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InferenceConfig {
    /// Probability that a cache hit explores instead of following.
    pub exploration_rate: f64,
    /// Minimum context similarity for a cache hit.
    pub context_threshold: f64,
    /// Candidate nodes fetched per branch point.
    pub candidate_k: usize,
    /// Minimum evaluator score to accept a splice.
    pub score_threshold: f64,
    /// Depth window around the successor depth for candidate retrieval.
    pub depth_window: usize,
    /// Search rounds are sampled uniformly from this inclusive range.
    pub rounds_min: usize,
    pub rounds_max: usize,
    pub global_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            exploration_rate: 0.5,
            context_threshold: 0.85,
            candidate_k: 8,
            score_threshold: 0.6,
            depth_window: 1,
            rounds_min: 1,
            rounds_max: 3,
            global_seed: 0,
        }
    }
}

/// Which path produced a user's chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Followed,
    Explored,
    Generated,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Followed => "followed",
            Strategy::Explored => "explored",
            Strategy::Generated => "generated",
        })
    }
}

/// Per-user accounting row emitted by every simulation run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunRecord {
    pub user_id: u64,
    pub strategy: Strategy,
    /// Local wall-clock seconds (decode, search, geolocation).
    pub wall_s: f64,
    /// Simulated backend seconds for the charged steps.
    pub simulated_backend_s: f64,
    /// Tokens in the emitted sequence.
    pub output_tokens: u64,
    /// Backend steps billed for this user.
    pub charged_steps: u64,
    pub match_similarity: Option<f64>,
    /// For explored users: whether the first explored chain decoded with
    /// strictly increasing times, before any repair.
    pub pre_repair_monotone: Option<bool>,
}

/// How one user's chain was obtained.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub chain: ReasoningChain,
    /// (depth in the new chain, donor node id) per accepted splice.
    pub splice_points: Vec<(usize, NodeId)>,
    pub backend_steps_charged: u64,
}

/// Scores a candidate next step against a context and prefix. The trained
/// evaluator, the raw-similarity ablation, and test stubs all implement this.
pub trait BranchScorer: Send + Sync {
    fn score(&self, ctx_features: &[f64], prefix: &[LatentStep], candidate: &[f64]) -> f64;
}

impl BranchScorer for EvaluatorModel {
    fn score(&self, ctx_features: &[f64], prefix: &[LatentStep], candidate: &[f64]) -> f64 {
        evaluator_score(self, ctx_features, prefix, candidate).expect("well-formed inputs")
    }
}

/// Naive similarity scorer (the evaluator ablation): cosine of the candidate
/// against the last prefix step, mapped to [0, 1].
#[derive(Debug, Clone, Copy, Default)]
pub struct RawCosineScorer;

impl BranchScorer for RawCosineScorer {
    fn score(&self, _ctx: &[f64], prefix: &[LatentStep], candidate: &[f64]) -> f64 {
        match prefix.last() {
            Some(last) => cosine_unit(&last.embedding, candidate),
            None => 0.0,
        }
    }
}

/// Seeded random scorer used to measure how much the trained evaluator
/// matters; deterministic per candidate.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer(pub u64);

impl BranchScorer for RandomScorer {
    fn score(&self, _ctx: &[f64], _prefix: &[LatentStep], candidate: &[f64]) -> f64 {
        let mut acc = self.0;
        for v in candidate {
            acc = crate::rng::splitmix64(acc ^ v.to_bits());
        }
        stream(acc).gen()
    }
}

/// Constant scorer stub.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl BranchScorer for ConstantScorer {
    fn score(&self, _ctx: &[f64], _prefix: &[LatentStep], _candidate: &[f64]) -> f64 {
        self.0
    }
}

/// Maps a latent chain to its token sequence. The student decoder charges no
/// backend steps; the reference decoder (the decoder ablation) bills the
/// generative backend per step.
pub trait ChainDecoder: Send + Sync {
    fn decode_chain(&self, steps: &[LatentStep]) -> Result<TokenSequence, SimError>;

    fn backend_steps(&self, _chain_len: usize) -> u64 {
        0
    }
}

impl ChainDecoder for StudentDecoder {
    fn decode_chain(&self, steps: &[LatentStep]) -> Result<TokenSequence, SimError> {
        Ok(student_decode(self, steps)?)
    }
}

/// Decodes with the exact reference inversion, charging backend steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceChainDecoder;

impl ChainDecoder for ReferenceChainDecoder {
    fn decode_chain(&self, steps: &[LatentStep]) -> Result<TokenSequence, SimError> {
        Ok(encode_tokens_from_steps(steps)?)
    }

    fn backend_steps(&self, chain_len: usize) -> u64 {
        chain_len as u64
    }
}

/// Deferred cache writes produced while workers hold a read-only snapshot.
#[derive(Debug, Clone)]
enum Mutation {
    InsertChain(ReasoningChain),
    Splice { at: NodeId, step: LatentStep },
}

#[derive(Clone)]
struct WorkingStep {
    step: LatentStep,
    source: Option<NodeId>,
}

struct ExploreResult {
    steps: Vec<WorkingStep>,
    splice_points: Vec<(usize, NodeId)>,
    charged: u64,
    mutations: Vec<Mutation>,
}

struct UserSim {
    trajectory: Trajectory,
    outcome: StrategyOutcome,
    record: RunRecord,
    mutations: Vec<Mutation>,
}

/// Everything immutable a simulation run needs.
pub struct Simulator<'a> {
    pub teacher: &'a dyn TeacherBackend,
    pub scorer: &'a dyn BranchScorer,
    pub decoder: &'a dyn ChainDecoder,
    pub city: &'a City,
    pub gravity: &'a GravityParams,
    pub config: InferenceConfig,
}

/// Result of a batch run; trajectories and records are in input order.
#[derive(Debug)]
pub struct BatchResult {
    pub trajectories: Vec<Trajectory>,
    pub outcomes: Vec<StrategyOutcome>,
    pub records: Vec<RunRecord>,
    pub elapsed_s: f64,
}

/// True when decoded start-time buckets are strictly increasing.
pub fn tokens_monotone(tokens: &TokenSequence) -> bool {
    let buckets: Vec<usize> = tokens.triples().map(|(_, t, _)| t).collect();
    buckets.windows(2).all(|w| w[1] > w[0])
}

impl<'a> Simulator<'a> {
    /// Simulates one user against the live cache: the match sees all prior
    /// insertions and this user's writes are applied immediately.
    pub fn simulate_user(
        &self,
        cache: &mut CacheIndex,
        ctx: &SimulationContext,
    ) -> Result<(Trajectory, StrategyOutcome, RunRecord), SimError> {
        let sim = self.simulate_core(cache, ctx)?;
        apply_mutations(cache, &sim.mutations)?;
        Ok((sim.trajectory, sim.outcome, sim.record))
    }

    /// Simulates a population with `batch_size` concurrent workers over an
    /// immutable snapshot taken at entry; generated chains and accepted
    /// splices are committed to the live cache between batches. Matching
    /// always runs against the entry snapshot, which makes the output
    /// independent of the batch size.
    pub fn batch_simulate(
        &self,
        cache: &mut CacheIndex,
        contexts: &[SimulationContext],
        batch_size: usize,
    ) -> Result<BatchResult, SimError> {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let snapshot = cache.clone();
        let start = Instant::now();
        let mut trajectories = Vec::with_capacity(contexts.len());
        let mut outcomes = Vec::with_capacity(contexts.len());
        let mut records = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(batch_size) {
            let sims = self.run_chunk(&snapshot, chunk, batch_size)?;
            for sim in sims {
                apply_mutations(cache, &sim.mutations)?;
                trajectories.push(sim.trajectory);
                outcomes.push(sim.outcome);
                records.push(sim.record);
            }
        }
        Ok(BatchResult { trajectories, outcomes, records, elapsed_s: start.elapsed().as_secs_f64() })
    }

    #[cfg(feature = "parallel")]
    fn run_chunk(
        &self,
        snapshot: &CacheIndex,
        chunk: &[SimulationContext],
        batch_size: usize,
    ) -> Result<Vec<UserSim>, SimError> {
        if batch_size == 1 {
            return chunk.iter().map(|ctx| self.simulate_core(snapshot, ctx)).collect();
        }
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(batch_size)
            .build()
            .expect("worker pool");
        pool.install(|| {
            chunk
                .par_iter()
                .map(|ctx| self.simulate_core(snapshot, ctx))
                .collect()
        })
    }

    #[cfg(not(feature = "parallel"))]
    fn run_chunk(
        &self,
        snapshot: &CacheIndex,
        chunk: &[SimulationContext],
        _batch_size: usize,
    ) -> Result<Vec<UserSim>, SimError> {
        chunk.iter().map(|ctx| self.simulate_core(snapshot, ctx)).collect()
    }

    fn simulate_core(&self, view: &CacheIndex, ctx: &SimulationContext) -> Result<UserSim, SimError> {
        let start = Instant::now();
        let cfg = &self.config;
        let mut rng = stream(mix(&[cfg.global_seed, ctx.profile.user_id]));
        let ctx_feats = context_features(ctx);

        let matched = view.match_context(ctx, cfg.context_threshold);
        let mut mutations = Vec::new();
        let mut pre_repair_monotone = None;

        let (strategy, steps, splice_points, charged, tokens) = match matched {
            None => {
                let (chain, tokens, charged) = self.generate(ctx, &mut rng, &mut mutations)?;
                (Strategy::Generated, chain, Vec::new(), charged, tokens)
            }
            Some((chain_id, _similarity)) => {
                let explore = rng.gen::<f64>() < cfg.exploration_rate;
                if explore {
                    let mut attempt = self.explore(view, chain_id, ctx, &ctx_feats, &mut rng)?;
                    let mut tokens = self.decode_working(&attempt.steps)?;
                    let first_monotone = tokens_monotone(&tokens);
                    pre_repair_monotone = Some(first_monotone);
                    if !first_monotone {
                        // one retry with a fresh branch point, then regenerate
                        let retry = self.explore(view, chain_id, ctx, &ctx_feats, &mut rng)?;
                        let retry_tokens = self.decode_working(&retry.steps)?;
                        if tokens_monotone(&retry_tokens) {
                            attempt = retry;
                            tokens = retry_tokens;
                        } else {
                            let (chain, tokens, charged) =
                                self.generate(ctx, &mut rng, &mut mutations)?;
                            let sim = self.finish(
                                ctx, start, Strategy::Generated, chain, Vec::new(), charged,
                                tokens, matched.map(|m| m.1), pre_repair_monotone, mutations,
                                &mut rng,
                            )?;
                            return Ok(sim);
                        }
                    }
                    mutations.extend(attempt.mutations);
                    (Strategy::Explored, attempt.steps, attempt.splice_points, attempt.charged, tokens)
                } else {
                    let steps: Vec<WorkingStep> = view
                        .main_path(chain_id)?
                        .into_iter()
                        .map(|id| WorkingStep {
                            step: view.node(id).unwrap().embedding.clone(),
                            source: Some(id),
                        })
                        .collect();
                    let tokens = self.decode_working(&steps)?;
                    if tokens_monotone(&tokens) {
                        (Strategy::Followed, steps, Vec::new(), 0, tokens)
                    } else {
                        // a followed chain that decodes out of order is a
                        // cache-quality failure; regenerate
                        let (chain, tokens, charged) = self.generate(ctx, &mut rng, &mut mutations)?;
                        (Strategy::Generated, chain, Vec::new(), charged, tokens)
                    }
                }
            }
        };

        self.finish(
            ctx,
            start,
            strategy,
            steps,
            splice_points,
            charged,
            tokens,
            matched.map(|m| m.1),
            pre_repair_monotone,
            mutations,
            &mut rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        ctx: &SimulationContext,
        start: Instant,
        strategy: Strategy,
        steps: Vec<WorkingStep>,
        splice_points: Vec<(usize, NodeId)>,
        charged: u64,
        tokens: TokenSequence,
        match_similarity: Option<f64>,
        pre_repair_monotone: Option<bool>,
        mutations: Vec<Mutation>,
        rng: &mut ChaCha8Rng,
    ) -> Result<UserSim, SimError> {
        // the decoder ablation bills backend steps per decoded chain
        let charged = charged + self.decoder.backend_steps(steps.len());
        let trajectory = materialize(ctx, &tokens, self.city, self.gravity, rng)?;
        let provenance: Vec<Provenance> = steps
            .iter()
            .map(|s| match s.source {
                Some(id) => Provenance::SplicedFrom(id.0),
                None => Provenance::Generated,
            })
            .collect();
        let chain = ReasoningChain::new(
            ctx.clone(),
            steps.into_iter().map(|s| s.step).collect(),
            provenance,
        )?;
        let record = RunRecord {
            user_id: ctx.profile.user_id,
            strategy,
            wall_s: start.elapsed().as_secs_f64(),
            simulated_backend_s: charged as f64 * self.teacher.cost_model().per_step_latency_s,
            output_tokens: tokens.len() as u64,
            charged_steps: charged,
            match_similarity,
            pre_repair_monotone,
        };
        Ok(UserSim {
            trajectory,
            outcome: StrategyOutcome { strategy, chain, splice_points, backend_steps_charged: charged },
            record,
            mutations,
        })
    }

    fn decode_working(&self, steps: &[WorkingStep]) -> Result<TokenSequence, SimError> {
        let latents: Vec<LatentStep> = steps.iter().map(|s| s.step.clone()).collect();
        self.decoder.decode_chain(&latents)
    }

    /// Miss path: full teacher rollout, queued for insertion. If the student
    /// decodes the fresh chain out of order, the teacher's own token output
    /// is used so the result is always a valid trajectory.
    fn generate(
        &self,
        ctx: &SimulationContext,
        rng: &mut ChaCha8Rng,
        mutations: &mut Vec<Mutation>,
    ) -> Result<(Vec<WorkingStep>, TokenSequence, u64), SimError> {
        let chain_seed = rng.gen::<u64>();
        let (chain, teacher_tokens) = self.teacher.generate_chain(ctx, chain_seed)?;
        mutations.push(Mutation::InsertChain(chain.clone()));
        let charged = chain.len() as u64;
        let steps: Vec<WorkingStep> = chain
            .steps
            .into_iter()
            .map(|step| WorkingStep { step, source: None })
            .collect();
        let student_tokens = self.decode_working(&steps)?;
        let tokens = if tokens_monotone(&student_tokens) { student_tokens } else { teacher_tokens };
        Ok((steps, tokens, charged))
    }

    /// Branch search: pick a random branch point, fetch candidate successor
    /// nodes, keep the best-scoring one if it clears the threshold (taking
    /// the donor chain's continuation), otherwise generate the remainder.
    fn explore(
        &self,
        view: &CacheIndex,
        base: ChainId,
        ctx: &SimulationContext,
        ctx_feats: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<ExploreResult, SimError> {
        let cfg = &self.config;
        let mut steps: Vec<WorkingStep> = view
            .main_path(base)?
            .into_iter()
            .map(|id| WorkingStep { step: view.node(id).unwrap().embedding.clone(), source: Some(id) })
            .collect();
        let base_len = steps.len();
        let mut splice_points = Vec::new();
        let mut mutations = Vec::new();
        let mut charged = 0u64;

        let rounds = rng.gen_range(cfg.rounds_min..=cfg.rounds_max);
        for _ in 0..rounds {
            // a branch point must leave room for the spliced successor, so
            // the last admissible depth is MAX_ACTIVITIES - 2
            let eligible: Vec<usize> = (1..steps.len().min(MAX_ACTIVITIES - 1))
                .filter(|&t| steps[t].source.is_some())
                .collect();
            if eligible.is_empty() {
                break;
            }
            let t = eligible[rng.gen_range(0..eligible.len())];
            let anchor = steps[t].source.unwrap();
            let candidates = view.retrieve_candidates(anchor, cfg.candidate_k, cfg.depth_window)?;
            let prefix: Vec<LatentStep> = steps[..=t].iter().map(|s| s.step.clone()).collect();
            let best = candidates
                .iter()
                .map(|c| {
                    let emb = &view.node(c.node_id).unwrap().embedding.embedding;
                    (self.scorer.score(ctx_feats, &prefix, emb), c.node_id)
                })
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| b.1.cmp(&a.1)));

            match best {
                Some((score, donor)) if score >= cfg.score_threshold => {
                    mutations.push(Mutation::Splice {
                        at: anchor,
                        step: view.node(donor)?.embedding.clone(),
                    });
                    steps.truncate(t + 1);
                    steps.push(WorkingStep {
                        step: view.node(donor)?.embedding.clone(),
                        source: Some(donor),
                    });
                    splice_points.push((t + 1, donor));
                    for id in view.continuation(donor)? {
                        if steps.len() >= MAX_ACTIVITIES {
                            break;
                        }
                        steps.push(WorkingStep {
                            step: view.node(id)?.embedding.clone(),
                            source: Some(id),
                        });
                    }
                }
                _ => {
                    // all scores low (or no candidates): teacher-generate the
                    // remainder and charge those steps
                    let target = base_len.max(t + 2).min(MAX_ACTIVITIES);
                    steps.truncate(t + 1);
                    let gen_seed = rng.gen::<u64>();
                    while steps.len() < target {
                        let prefix: Vec<LatentStep> =
                            steps.iter().map(|s| s.step.clone()).collect();
                        match self.teacher.generate_next_step(ctx, &prefix, gen_seed) {
                            Ok(step) => {
                                steps.push(WorkingStep { step, source: None });
                                charged += 1;
                            }
                            // the policy ran past the end of the day
                            Err(TeacherError::Domain(DomainError::OutOfRange { .. })) => break,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    break;
                }
            }
        }
        Ok(ExploreResult { steps, splice_points, charged, mutations })
    }
}

fn apply_mutations(cache: &mut CacheIndex, mutations: &[Mutation]) -> Result<(), SimError> {
    for m in mutations {
        match m {
            Mutation::InsertChain(chain) => {
                cache.insert(chain)?;
            }
            Mutation::Splice { at, step } => {
                cache.splice(*at, step)?;
            }
        }
    }
    Ok(())
}
