//! Quality metrics (five JSD comparisons), coverage and diversity analyses,
//! a rule-based plausibility audit, and efficiency measurement.

use crate::domain::{
    context_features, context_similarity, distance_bin_bounds, euclid_km, ActivityKind,
    SimulationContext, Trajectory, DIST_BINS, MAX_TRAVEL_KM,
};
use crate::geo::{materialize, City, GravityParams};
use crate::inference::{RunRecord, Strategy};
use crate::rng::{mix, stream};
use crate::teacher::{BackendCostModel, TeacherBackend};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("histogram edges mismatch")]
    EdgeMismatch,
    #[error("histogram invalid: {0}")]
    InvalidHistogram(String),
    #[error("too few activities: {0}")]
    TooFewActivities(usize),
    #[error("empty run")]
    EmptyRun,
    #[error("empty trajectory set")]
    EmptySet,
}

/// Versioned binning constants. JSD values depend on these, so they are part
/// of the metric definition.
pub mod bins {
    use super::*;

    /// 24 one-hour stay-duration bins over a day.
    pub fn stay_duration_edges() -> Vec<f64> {
        (0..=24).map(|i| i as f64 * 60.0).collect()
    }

    /// 10 log-spaced jump-length bins matching the token grammar.
    pub fn jump_length_edges() -> Vec<f64> {
        let mut edges: Vec<f64> = (0..DIST_BINS).map(|b| distance_bin_bounds(b).0).collect();
        edges.push(MAX_TRAVEL_KM);
        edges
    }

    /// 20 linear radius-of-gyration bins over [0, 15] km.
    pub fn radius_edges() -> Vec<f64> {
        (0..=20).map(|i| i as f64 * 0.75).collect()
    }
}

/// A normalized histogram over explicit bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Builds a histogram from raw values; out-of-range values clamp into the
    /// first/last bin. Mass is normalized to sum 1.
    pub fn from_values(values: &[f64], edges: &[f64]) -> Result<Self, MetricsError> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::InvalidHistogram("edges must be strictly increasing".into()));
        }
        if values.is_empty() {
            return Err(MetricsError::InvalidHistogram("no values".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0.0; bins];
        for &v in values {
            let mut idx = match edges[..bins].binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
                Ok(i) => i,
                Err(0) => 0,
                Err(i) => i - 1,
            };
            if idx >= bins {
                idx = bins - 1;
            }
            counts[idx] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        for c in &mut counts {
            *c /= total;
        }
        Ok(Self { edges: edges.to_vec(), mass: counts })
    }

    /// Wraps categorical masses (cells, bins) with implicit integer edges.
    pub fn from_mass(mass: Vec<f64>) -> Result<Self, MetricsError> {
        let total: f64 = mass.iter().sum();
        if total <= 0.0 || mass.iter().any(|m| *m < 0.0 || !m.is_finite()) {
            return Err(MetricsError::InvalidHistogram("mass must be nonnegative with positive sum".into()));
        }
        let edges = (0..=mass.len()).map(|i| i as f64).collect();
        let mass = mass.iter().map(|m| m / total).collect();
        Ok(Self { edges, mass })
    }
}

/// Jensen-Shannon divergence in base-2 logs, range [0, 1].
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.edges != q.edges {
        return Err(MetricsError::EdgeMismatch);
    }
    Ok(jsd_mass(&p.mass, &q.mass))
}

/// JSD over two aligned probability vectors.
pub fn jsd_mass(p: &[f64], q: &[f64]) -> f64 {
    fn kl_to_mix(a: &[f64], m: &[f64]) -> f64 {
        a.iter()
            .zip(m)
            .map(|(&ai, &mi)| if ai > 0.0 { ai * (ai / mi).log2() } else { 0.0 })
            .sum()
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a + b) / 2.0).collect();
    let v = (kl_to_mix(p, &m) + kl_to_mix(q, &m)) / 2.0;
    v.clamp(0.0, 1.0)
}

/// Root-mean-square distance of a trajectory's points from their centroid.
pub fn radius_of_gyration(traj: &Trajectory) -> f64 {
    let points: Vec<_> = traj.activities.iter().filter_map(|a| a.location).collect();
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let ms = points
        .iter()
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / n;
    ms.sqrt()
}

/// Minutes between consecutive activity starts.
pub fn stay_durations(traj: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    if traj.activities.len() < 2 {
        return Err(MetricsError::TooFewActivities(traj.activities.len()));
    }
    Ok(traj
        .activities
        .windows(2)
        .map(|w| w[1].start_minute as f64 - w[0].start_minute as f64)
        .collect())
}

/// Km between consecutive activity locations.
pub fn jump_lengths(traj: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    if traj.activities.len() < 2 {
        return Err(MetricsError::TooFewActivities(traj.activities.len()));
    }
    Ok(traj
        .activities
        .windows(2)
        .map(|w| euclid_km(w[0].location.unwrap(), w[1].location.unwrap()))
        .collect())
}

/// Pooled stop durations across a trajectory set (headline variant).
pub fn pooled_stay_durations(trajs: &[Trajectory]) -> Result<Vec<f64>, MetricsError> {
    let mut out = Vec::new();
    for t in trajs {
        out.extend(stay_durations(t)?);
    }
    Ok(out)
}

/// Mean stop duration per trajectory (the motivation-figure variant).
pub fn mean_stay_durations(trajs: &[Trajectory]) -> Result<Vec<f64>, MetricsError> {
    trajs
        .iter()
        .map(|t| {
            let d = stay_durations(t)?;
            Ok(d.iter().sum::<f64>() / d.len() as f64)
        })
        .collect()
}

/// Pooled jump lengths across a trajectory set.
pub fn pooled_jump_lengths(trajs: &[Trajectory]) -> Result<Vec<f64>, MetricsError> {
    let mut out = Vec::new();
    for t in trajs {
        out.extend(jump_lengths(t)?);
    }
    Ok(out)
}

/// Per-trajectory radii of gyration.
pub fn radii(trajs: &[Trajectory]) -> Vec<f64> {
    trajs.iter().map(radius_of_gyration).collect()
}

/// Normalized visit counts per 1 km grid cell.
pub fn locfreq_distribution(trajs: &[Trajectory], city: &City) -> Result<Histogram, MetricsError> {
    if trajs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let side = city.grid_side();
    let mut counts = vec![0.0; side * side];
    for t in trajs {
        for a in &t.activities {
            counts[city.cell_of(a.location.unwrap())] += 1.0;
        }
    }
    Histogram::from_mass(counts)
}

/// JSD between origin-destination pair distributions over the union support.
pub fn od_similarity(
    trajs_a: &[Trajectory],
    trajs_b: &[Trajectory],
    city: &City,
) -> Result<f64, MetricsError> {
    if trajs_a.is_empty() || trajs_b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let count = |trajs: &[Trajectory]| -> BTreeMap<(usize, usize), f64> {
        let mut map = BTreeMap::new();
        for t in trajs {
            for w in t.activities.windows(2) {
                let od = (
                    city.cell_of(w[0].location.unwrap()),
                    city.cell_of(w[1].location.unwrap()),
                );
                *map.entry(od).or_insert(0.0) += 1.0;
            }
        }
        map
    };
    let ca = count(trajs_a);
    let cb = count(trajs_b);
    let mut support: Vec<(usize, usize)> = ca.keys().chain(cb.keys()).copied().collect();
    support.sort_unstable();
    support.dedup();
    let ta: f64 = ca.values().sum();
    let tb: f64 = cb.values().sum();
    let pa: Vec<f64> = support.iter().map(|k| ca.get(k).copied().unwrap_or(0.0) / ta).collect();
    let pb: Vec<f64> = support.iter().map(|k| cb.get(k).copied().unwrap_or(0.0) / tb).collect();
    Ok(jsd_mass(&pa, &pb))
}

/// Visit counts of generated trajectories on the reference set's top-k cells.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub cells: Vec<usize>,
    pub reference_counts: Vec<u64>,
    pub generated_counts: Vec<u64>,
}

pub fn top_k_coverage(
    trajs_ref: &[Trajectory],
    trajs_gen: &[Trajectory],
    city: &City,
    k: usize,
) -> Result<CoverageReport, MetricsError> {
    if trajs_ref.is_empty() || trajs_gen.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let visits = |trajs: &[Trajectory]| {
        let side = city.grid_side();
        let mut counts = vec![0u64; side * side];
        for t in trajs {
            for a in &t.activities {
                counts[city.cell_of(a.location.unwrap())] += 1;
            }
        }
        counts
    };
    let ref_counts = visits(trajs_ref);
    let gen_counts = visits(trajs_gen);
    // top-k reference cells by count, ties by cell index
    let mut order: Vec<usize> = (0..ref_counts.len()).collect();
    order.sort_by(|&a, &b| ref_counts[b].cmp(&ref_counts[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(CoverageReport {
        reference_counts: order.iter().map(|&c| ref_counts[c]).collect(),
        generated_counts: order.iter().map(|&c| gen_counts[c]).collect(),
        cells: order,
    })
}

/// Rule-based plausibility violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AuditViolation {
    MonotonicityViolation,
    FirstActivityAwayFromHome,
    WeekendWorkViolation,
    ConsecutiveRepeat,
    JumpTooLong,
}

/// Checks a trajectory against the fixed plausibility rule set.
pub fn plausibility_audit(traj: &Trajectory) -> Vec<AuditViolation> {
    let mut violations = Vec::new();
    let acts = &traj.activities;

    if acts.windows(2).any(|w| w[1].start_minute <= w[0].start_minute) {
        violations.push(AuditViolation::MonotonicityViolation);
    }
    if let Some(first) = acts.first() {
        let near_home = first
            .location
            .map(|l| euclid_km(l, traj.context.profile.home) <= 2.0)
            .unwrap_or(false);
        if first.kind != ActivityKind::Home && !near_home {
            violations.push(AuditViolation::FirstActivityAwayFromHome);
        }
    }
    if traj.context.is_weekend && acts.iter().any(|a| a.kind == ActivityKind::Work) {
        violations.push(AuditViolation::WeekendWorkViolation);
    }
    if acts.windows(2).any(|w| {
        w[0].kind == w[1].kind
            && w[0].location.is_some()
            && w[0].location == w[1].location
    }) {
        violations.push(AuditViolation::ConsecutiveRepeat);
    }
    let jumps_ok = acts
        .windows(2)
        .filter_map(|w| Some(euclid_km(w[0].location?, w[1].location?)))
        .all(|d| d <= MAX_TRAVEL_KM);
    if !jumps_ok {
        violations.push(AuditViolation::JumpTooLong);
    }
    violations
}

/// Efficiency summary in the shape of the benchmark table columns.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    pub trajectories: usize,
    pub inference_time_s_per_traj: f64,
    pub tokens_per_s: f64,
    pub throughput_traj_per_s: f64,
    pub cost_usd_per_traj_api: f64,
    pub cost_usd_per_traj_gpu: f64,
    pub hit_rate: f64,
    pub followed_fraction: f64,
    pub explored_fraction: f64,
    pub generated_fraction: f64,
}

/// Aggregates per-user run records into the efficiency report.
///
/// `batch_elapsed_s` is the measured wall-clock of a batch run; when absent,
/// throughput falls back to the sequential rate.
pub fn measure_efficiency(
    records: &[RunRecord],
    cost: &BackendCostModel,
    batch_elapsed_s: Option<f64>,
) -> Result<EfficiencyReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let n = records.len() as f64;
    let total_seconds: f64 = records.iter().map(|r| r.wall_s + r.simulated_backend_s).sum();
    let total_tokens: u64 = records.iter().map(|r| r.output_tokens).sum();
    let charged_tokens: u64 = records.iter().map(|r| r.charged_steps * cost.tokens_per_activity).sum();

    let followed = records.iter().filter(|r| r.strategy == Strategy::Followed).count() as f64;
    let explored = records.iter().filter(|r| r.strategy == Strategy::Explored).count() as f64;
    let generated = records.iter().filter(|r| r.strategy == Strategy::Generated).count() as f64;

    let inference_time = total_seconds / n;
    Ok(EfficiencyReport {
        trajectories: records.len(),
        inference_time_s_per_traj: inference_time,
        tokens_per_s: if total_seconds > 0.0 { total_tokens as f64 / total_seconds } else { 0.0 },
        throughput_traj_per_s: match batch_elapsed_s {
            Some(elapsed) if elapsed > 0.0 => n / elapsed,
            _ => {
                if total_seconds > 0.0 {
                    n / total_seconds
                } else {
                    0.0
                }
            }
        },
        cost_usd_per_traj_api: charged_tokens as f64 * cost.api_usd_per_1m_output_tokens / 1e6 / n,
        cost_usd_per_traj_gpu: inference_time * cost.gpu_usd_per_hour / 3600.0,
        hit_rate: (followed + explored) / n,
        followed_fraction: followed / n,
        explored_fraction: explored / n,
        generated_fraction: generated / n,
    })
}

/// Group-based baseline: cluster contexts into archetypes, generate a small
/// trajectory pool per archetype with the teacher, hand every user a
/// uniformly sampled pool member.
pub fn group_baseline(
    contexts: &[SimulationContext],
    archetype_count: usize,
    samples_per_group: usize,
    seed: u64,
    teacher: &dyn TeacherBackend,
    city: &City,
    gravity: &GravityParams,
) -> Result<Vec<Trajectory>, MetricsError> {
    assert!(archetype_count >= 1 && samples_per_group >= 1);
    if contexts.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let k = archetype_count.min(contexts.len());
    let medoids = k_medoids(contexts, k, seed);

    // one shared trajectory pool per archetype, generated from the medoid
    let mut pools: Vec<Vec<Trajectory>> = Vec::with_capacity(k);
    for (g, &medoid) in medoids.iter().enumerate() {
        let mut pool = Vec::with_capacity(samples_per_group);
        for s in 0..samples_per_group {
            let chain_seed = mix(&[seed, g as u64, s as u64, 0xba5e]);
            let ctx = &contexts[medoid];
            let (_, tokens) = teacher
                .generate_chain(ctx, chain_seed)
                .expect("teacher rollout");
            let mut rng = stream(mix(&[chain_seed, 0x9e0]));
            let traj = materialize(ctx, &tokens, city, gravity, &mut rng).expect("materialize pool member");
            pool.push(traj);
        }
        pools.push(pool);
    }

    // assign users to their nearest archetype and hand out pool members
    let mut out = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let (best_group, _) = medoids
            .iter()
            .enumerate()
            .map(|(g, &m)| (g, context_similarity(ctx, &contexts[m])))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let mut rng = stream(mix(&[seed, ctx.profile.user_id, 0xa551]));
        let pick = rng.gen_range(0..pools[best_group].len());
        let shared = &pools[best_group][pick];
        out.push(Trajectory {
            context: ctx.clone(),
            activities: shared.activities.clone(),
        });
    }
    Ok(out)
}

/// Seeded k-medoids on context features, cosine distance. Returns indices of
/// the medoid contexts.
fn k_medoids(contexts: &[SimulationContext], k: usize, seed: u64) -> Vec<usize> {
    let features: Vec<Vec<f64>> = contexts.iter().map(context_features).collect();
    let dist = |a: usize, b: usize| 1.0 - crate::domain::cosine_unit(&features[a], &features[b]);

    // farthest-point initialization from a seeded start
    let mut rng = stream(mix(&[seed, 0x6d0]));
    let mut medoids = vec![rng.gen_range(0..contexts.len())];
    while medoids.len() < k {
        let next = (0..contexts.len())
            .max_by(|&a, &b| {
                let da = medoids.iter().map(|&m| dist(a, m)).fold(f64::INFINITY, f64::min);
                let db = medoids.iter().map(|&m| dist(b, m)).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        if medoids.contains(&next) {
            break;
        }
        medoids.push(next);
    }

    for _ in 0..3 {
        // assignment
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); medoids.len()];
        for i in 0..contexts.len() {
            let g = medoids
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| dist(i, a).partial_cmp(&dist(i, b)).unwrap())
                .map(|(g, _)| g)
                .unwrap();
            clusters[g].push(i);
        }
        // medoid update: member minimizing summed in-cluster distance
        for (g, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let best = members
                .iter()
                .min_by(|&&a, &&b| {
                    let sa: f64 = members.iter().map(|&m| dist(a, m)).sum();
                    let sb: f64 = members.iter().map(|&m| dist(b, m)).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .copied()
                .unwrap();
            medoids[g] = best;
        }
    }
    medoids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Activity, GeoPoint, Profile};
    use crate::geo::generate_city;
    use crate::teacher::SyntheticTeacher;

    fn ctx(user_id: u64, date: &str) -> SimulationContext {
        let profile = Profile::new(
            user_id,
            35,
            2,
            (user_id % 12) as u8,
            GeoPoint::new(10.0, 10.0),
            GeoPoint::new(20.0, 18.0),
        )
        .unwrap();
        SimulationContext::new(profile, date.parse().unwrap(), 1)
    }

    fn located(minutes: &[u16], points: &[(f64, f64)], kinds: &[ActivityKind], date: &str) -> Trajectory {
        let activities = minutes
            .iter()
            .zip(points)
            .zip(kinds)
            .map(|((&m, &(x, y)), &k)| Activity {
                start_minute: m,
                kind: k,
                travel_km: 1.0,
                location: Some(GeoPoint::new(x, y)),
            })
            .collect();
        Trajectory { context: ctx(1, date), activities }
    }

    /// Independent JSD oracle straight from the definition.
    fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let m = (p[i] + q[i]) / 2.0;
            if p[i] > 0.0 {
                total += 0.5 * p[i] * (p[i] / m).log2();
            }
            if q[i] > 0.0 {
                total += 0.5 * q[i] * (q[i] / m).log2();
            }
        }
        total
    }

    #[test]
    fn jsd_boundary_cases() {
        let p = Histogram::from_mass(vec![0.3, 0.7]).unwrap();
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = Histogram::from_mass(vec![1.0, 0.0]).unwrap();
        let b = Histogram::from_mass(vec![0.0, 1.0]).unwrap();
        assert_eq!(jsd(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn jsd_half_vs_point_mass() {
        let p = Histogram::from_mass(vec![0.5, 0.5]).unwrap();
        let q = Histogram::from_mass(vec![1.0, 0.0]).unwrap();
        let v = jsd(&p, &q).unwrap();
        assert!((v - 0.311_278_124_459_132_8).abs() < 1e-12);
        assert!((v - jsd_oracle(&p.mass, &q.mass)).abs() < 1e-15);
    }

    #[test]
    fn jsd_matches_oracle_on_random_pairs() {
        let mut rng = stream(17);
        for _ in 0..1000 {
            let n = rng.gen_range(2..20);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let p = mk(&mut rng);
            let q = mk(&mut rng);
            let got = jsd_mass(&p, &q);
            let want = jsd_oracle(&p, &q);
            assert!((got - want).abs() < 1e-12);
            assert!((got - jsd_mass(&q, &p)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn edge_mismatch_detected() {
        let p = Histogram::from_values(&[1.0, 2.0], &[0.0, 1.5, 3.0]).unwrap();
        let q = Histogram::from_values(&[1.0, 2.0], &[0.0, 2.0, 3.0]).unwrap();
        assert!(matches!(jsd(&p, &q), Err(MetricsError::EdgeMismatch)));
    }

    #[test]
    fn radius_examples() {
        let t = located(
            &[10, 100],
            &[(5.0, 5.0), (5.0, 5.0)],
            &[ActivityKind::Home, ActivityKind::Home],
            "2019-11-04",
        );
        assert_eq!(radius_of_gyration(&t), 0.0);
        let t = located(
            &[10, 100],
            &[(4.0, 5.0), (6.0, 5.0)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        );
        assert!((radius_of_gyration(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn radius_matches_brute_force_and_is_rigid_invariant() {
        let mut rng = stream(23);
        for _ in 0..200 {
            let n = rng.gen_range(2..9);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)))
                .collect();
            let minutes: Vec<u16> = (0..n as u16).map(|i| i * 100 + 5).collect();
            let kinds = vec![ActivityKind::Leisure; n];
            let t = located(&minutes, &pts, &kinds, "2019-11-04");

            // brute-force re-computation
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
            let want = (pts
                .iter()
                .map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2))
                .sum::<f64>()
                / n as f64)
                .sqrt();
            assert!((radius_of_gyration(&t) - want).abs() < 1e-12);

            // rigid motion: rotate by a random angle about origin + translate
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let moved: Vec<(f64, f64)> = pts
                .iter()
                .map(|p| {
                    (
                        p.0 * theta.cos() - p.1 * theta.sin() + dx,
                        p.0 * theta.sin() + p.1 * theta.cos() + dy,
                    )
                })
                .collect();
            let t2 = located(&minutes, &moved, &kinds, "2019-11-04");
            assert!((radius_of_gyration(&t2) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn stay_duration_arithmetic() {
        let t = located(
            &[480, 540, 720],
            &[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)],
            &[ActivityKind::Home, ActivityKind::Work, ActivityKind::Dining],
            "2019-11-04",
        );
        assert_eq!(stay_durations(&t).unwrap(), vec![60.0, 180.0]);
        assert_eq!(jump_lengths(&t).unwrap().len(), 2);
        let d = jump_lengths(&t).unwrap();
        assert!((d[0] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn locfreq_point_mass_and_disjoint_sets() {
        let city = generate_city(1, 25);
        let a = vec![located(
            &[10, 200],
            &[(5.5, 5.5), (5.2, 5.7)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        )];
        let ha = locfreq_distribution(&a, &city).unwrap();
        assert_eq!(ha.mass.iter().filter(|&&m| m > 0.0).count(), 1);
        let b = vec![located(
            &[10, 200],
            &[(20.5, 20.5), (20.2, 20.7)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        )];
        let hb = locfreq_distribution(&b, &city).unwrap();
        assert_eq!(jsd(&ha, &hb).unwrap(), 1.0);
    }

    #[test]
    fn locfreq_matches_independent_counting() {
        let teacher = SyntheticTeacher::default();
        let city = generate_city(3, 60);
        let gravity = GravityParams::default();
        let mut trajs = Vec::new();
        for u in 0..1000u64 {
            let c = ctx(u, "2019-11-06");
            let (_, tokens) = teacher.generate_chain(&c, u).unwrap();
            let mut rng = stream(u);
            trajs.push(materialize(&c, &tokens, &city, &gravity, &mut rng).unwrap());
        }
        let h = locfreq_distribution(&trajs, &city).unwrap();
        // independent counting pass
        let mut counts = vec![0u64; 900];
        for t in &trajs {
            for a in &t.activities {
                let p = a.location.unwrap();
                let cx = (p.x.floor() as usize).min(29);
                let cy = (p.y.floor() as usize).min(29);
                counts[cy * 30 + cx] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        for (got, want) in h.mass.iter().zip(&counts) {
            assert!((got - *want as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn od_similarity_identity_and_asymmetry() {
        let city = generate_city(4, 25);
        let a = vec![located(
            &[10, 200, 400],
            &[(5.5, 5.5), (10.5, 10.5), (15.5, 15.5)],
            &[ActivityKind::Home, ActivityKind::Work, ActivityKind::Dining],
            "2019-11-04",
        )];
        assert_eq!(od_similarity(&a, &a, &city).unwrap(), 0.0);
        // reversed flows occupy different OD cells
        let rev = vec![located(
            &[10, 200, 400],
            &[(15.5, 15.5), (10.5, 10.5), (5.5, 5.5)],
            &[ActivityKind::Home, ActivityKind::Work, ActivityKind::Dining],
            "2019-11-04",
        )];
        assert!(od_similarity(&a, &rev, &city).unwrap() > 0.0);
    }

    #[test]
    fn od_matches_brute_force() {
        let teacher = SyntheticTeacher::default();
        let city = generate_city(5, 50);
        let gravity = GravityParams::default();
        let mk = |base: u64| -> Vec<Trajectory> {
            (0..200u64)
                .map(|u| {
                    let c = ctx(base + u, "2019-11-06");
                    let (_, tokens) = teacher.generate_chain(&c, base + u).unwrap();
                    materialize(&c, &tokens, &city, &gravity, &mut stream(base + u)).unwrap()
                })
                .collect()
        };
        let a = mk(0);
        let b = mk(10_000);
        let got = od_similarity(&a, &b, &city).unwrap();

        // brute-force oracle with dense maps
        let count = |trajs: &[Trajectory]| {
            let mut m = std::collections::HashMap::new();
            for t in trajs {
                for w in t.activities.windows(2) {
                    let key = (city.cell_of(w[0].location.unwrap()), city.cell_of(w[1].location.unwrap()));
                    *m.entry(key).or_insert(0u64) += 1;
                }
            }
            m
        };
        let ca = count(&a);
        let cb = count(&b);
        let mut keys: Vec<_> = ca.keys().chain(cb.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let ta: u64 = ca.values().sum();
        let tb: u64 = cb.values().sum();
        let pa: Vec<f64> = keys.iter().map(|k| *ca.get(k).unwrap_or(&0) as f64 / ta as f64).collect();
        let pb: Vec<f64> = keys.iter().map(|k| *cb.get(k).unwrap_or(&0) as f64 / tb as f64).collect();
        assert!((got - jsd_oracle(&pa, &pb)).abs() < 1e-12);
    }

    #[test]
    fn coverage_hand_counted_toy() {
        let city = generate_city(6, 25);
        // ref: cell of (0.5, 0.5) x3 visits, (1.5, 0.5) x2, (2.5, 0.5) x1
        let r = vec![
            located(&[10, 100, 300], &[(0.5, 0.5), (0.5, 0.6), (1.5, 0.5)], &[ActivityKind::Home, ActivityKind::Dining, ActivityKind::Work], "2019-11-04"),
            located(&[10, 100, 300], &[(0.5, 0.4), (1.5, 0.4), (2.5, 0.5)], &[ActivityKind::Home, ActivityKind::Dining, ActivityKind::Work], "2019-11-04"),
        ];
        let g = vec![located(
            &[10, 100],
            &[(0.5, 0.5), (2.5, 0.5)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        )];
        let report = top_k_coverage(&r, &g, &city, 3).unwrap();
        assert_eq!(report.cells, vec![0, 1, 2]);
        assert_eq!(report.reference_counts, vec![3, 2, 1]);
        assert_eq!(report.generated_counts, vec![1, 0, 1]);

        // generated = reference reproduces the counts
        let same = top_k_coverage(&r, &r, &city, 3).unwrap();
        assert_eq!(same.reference_counts, same.generated_counts);

        // generated visiting none of the top cells yields zeros
        let far = vec![located(
            &[10, 100],
            &[(25.5, 25.5), (26.5, 25.5)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        )];
        let none = top_k_coverage(&r, &far, &city, 3).unwrap();
        assert!(none.generated_counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn audit_rules_fire() {
        // decreasing times
        let t = located(
            &[500, 400],
            &[(10.0, 10.0), (12.0, 10.0)],
            &[ActivityKind::Home, ActivityKind::Dining],
            "2019-11-04",
        );
        assert!(plausibility_audit(&t).contains(&AuditViolation::MonotonicityViolation));

        // weekend work
        let t = located(
            &[100, 500],
            &[(10.0, 10.0), (20.0, 18.0)],
            &[ActivityKind::Home, ActivityKind::Work],
            "2019-11-02",
        );
        assert!(plausibility_audit(&t).contains(&AuditViolation::WeekendWorkViolation));

        // consecutive same-kind same-location
        let t = located(
            &[100, 500],
            &[(10.0, 10.0), (10.0, 10.0)],
            &[ActivityKind::Home, ActivityKind::Home],
            "2019-11-04",
        );
        assert!(plausibility_audit(&t).contains(&AuditViolation::ConsecutiveRepeat));

        // first activity far from home and not home-kind
        let t = located(
            &[100, 500],
            &[(25.0, 25.0), (10.0, 10.0)],
            &[ActivityKind::Dining, ActivityKind::Home],
            "2019-11-04",
        );
        assert!(plausibility_audit(&t).contains(&AuditViolation::FirstActivityAwayFromHome));
    }

    #[test]
    fn teacher_rollouts_pass_audit() {
        let teacher = SyntheticTeacher::default();
        let city = generate_city(8, 60);
        let gravity = GravityParams::default();
        let mut passed = 0u64;
        let n = 10_000u64;
        for u in 0..n {
            let date = if u % 3 == 0 { "2019-11-02" } else { "2019-11-04" };
            let c = ctx(u, date);
            let (_, tokens) = teacher.generate_chain(&c, u).unwrap();
            let traj = materialize(&c, &tokens, &city, &gravity, &mut stream(u)).unwrap();
            if plausibility_audit(&traj).is_empty() {
                passed += 1;
            }
        }
        let rate = passed as f64 / n as f64;
        assert!(rate >= 0.99, "pass rate {rate}");
    }

    #[test]
    fn efficiency_arithmetic() {
        let cost = BackendCostModel::default();
        let records: Vec<RunRecord> = (0..100)
            .map(|u| RunRecord {
                user_id: u,
                strategy: Strategy::Followed,
                wall_s: 1.2,
                simulated_backend_s: 0.8,
                output_tokens: 0,
                charged_steps: 0,
                match_similarity: Some(1.0),
                pre_repair_monotone: None,
            })
            .collect();
        let report = measure_efficiency(&records, &cost, None).unwrap();
        // 2.0 s/trajectory on the gpu model: 2 * 0.5 / 3600
        assert!((report.cost_usd_per_traj_gpu - 2.777_777_777_777_778e-4).abs() < 1e-15);
        assert_eq!(report.tokens_per_s, 0.0);
        assert_eq!(report.hit_rate, 1.0);

        // 180 output-token equivalents per trajectory on the api model
        let records: Vec<RunRecord> = (0..10)
            .map(|u| RunRecord {
                user_id: u,
                strategy: Strategy::Generated,
                wall_s: 0.0,
                simulated_backend_s: 1.0,
                output_tokens: 200,
                charged_steps: 45, // 45 * 4 = 180 token equivalents
                match_similarity: None,
                pre_repair_monotone: None,
            })
            .collect();
        let report = measure_efficiency(&records, &cost, None).unwrap();
        assert!((report.cost_usd_per_traj_api - 1.8e-3).abs() < 1e-18);
        assert!(matches!(measure_efficiency(&[], &cost, None), Err(MetricsError::EmptyRun)));
    }

    #[test]
    fn group_baseline_pools_are_shared() {
        let teacher = SyntheticTeacher::default();
        let city = generate_city(9, 40);
        let gravity = GravityParams::default();
        let contexts: Vec<SimulationContext> = (0..300).map(|u| ctx(u, "2019-11-04")).collect();

        let trajs = group_baseline(&contexts, 5, 1, 7, &teacher, &city, &gravity).unwrap();
        assert_eq!(trajs.len(), contexts.len());
        // pool size 1: at most 5 distinct activity sequences
        let mut distinct: Vec<&Vec<Activity>> = Vec::new();
        for t in &trajs {
            if !distinct.iter().any(|d| **d == t.activities) {
                distinct.push(&t.activities);
            }
        }
        assert!(distinct.len() <= 5);

        let trajs = group_baseline(&contexts, 4, 3, 7, &teacher, &city, &gravity).unwrap();
        let mut distinct: Vec<&Vec<Activity>> = Vec::new();
        for t in &trajs {
            if !distinct.iter().any(|d| **d == t.activities) {
                distinct.push(&t.activities);
            }
        }
        assert!(distinct.len() <= 12);
    }
}
