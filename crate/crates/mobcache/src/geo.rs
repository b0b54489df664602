//! Synthetic city generation and gravity-model assignment of decoded
//! activities to concrete locations.

use crate::domain::{
    decode_tokens, distance_bin, distance_bin_bounds, euclid_km, ActivityKind, DomainError,
    GeoPoint, SimulationContext, TokenSequence, Trajectory, CITY_SIZE_KM, KIND_COUNT,
};
use crate::rng::{mix, stream};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("no POI of kind {0:?}")]
    NoPoiOfKind(ActivityKind),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// A point of interest with a gravity attractiveness weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub location: GeoPoint,
    pub category: ActivityKind,
    pub attractiveness: f64,
}

/// A 30x30 km synthetic city on a 1 km analysis grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct City {
    pub city_id: u64,
    pub bounds_km: f64,
    pub cell_km: f64,
    pub pois: Vec<Poi>,
}

impl City {
    pub fn pois_of(&self, kind: ActivityKind) -> impl Iterator<Item = &Poi> {
        self.pois.iter().filter(move |p| p.category == kind)
    }

    /// Grid cells per side.
    pub fn grid_side(&self) -> usize {
        (self.bounds_km / self.cell_km).round() as usize
    }

    /// Index of the 1 km cell containing a point.
    pub fn cell_of(&self, p: GeoPoint) -> usize {
        let side = self.grid_side();
        let cx = ((p.x / self.cell_km).floor() as usize).min(side - 1);
        let cy = ((p.y / self.cell_km).floor() as usize).min(side - 1);
        cy * side + cx
    }
}

/// Distance band used when conditioning gravity draws on a decoded distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandTolerance {
    /// Half the width of the decoded distance bin (the default).
    HalfBinWidth,
    /// A fixed tolerance in km.
    FixedKm(f64),
}

/// Gravity-model parameters: weight = attractiveness / max(d, 0.1)^beta.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GravityParams {
    pub beta: f64,
    pub band_tolerance: BandTolerance,
}

impl Default for GravityParams {
    fn default() -> Self {
        Self { beta: 2.0, band_tolerance: BandTolerance::HalfBinWidth }
    }
}

impl GravityParams {
    fn tolerance_for(&self, target_km: f64) -> f64 {
        match self.band_tolerance {
            BandTolerance::FixedKm(v) => v,
            BandTolerance::HalfBinWidth => {
                let (lo, hi) = distance_bin_bounds(distance_bin(target_km));
                (hi - lo) / 2.0
            }
        }
    }
}

/// Places POIs with a seeded clustered point process: a few cluster centers
/// per category, gaussian spread around them, log-normal attractiveness.
pub fn generate_city(seed: u64, n_pois_per_category: usize) -> City {
    assert!(n_pois_per_category >= 20, "need at least 20 POIs per category");
    let mut pois = Vec::with_capacity(KIND_COUNT * n_pois_per_category);
    for kind in ActivityKind::ALL {
        let mut rng = stream(mix(&[seed, kind.index() as u64, 0x9e0]));
        let n_clusters = rng.gen_range(3..=5);
        let centers: Vec<GeoPoint> = (0..n_clusters)
            .map(|_| GeoPoint::new(rng.gen_range(2.0..28.0), rng.gen_range(2.0..28.0)))
            .collect();
        let spread = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..n_pois_per_category {
            let c = centers[rng.gen_range(0..centers.len())];
            let x = (c.x + spread.sample(&mut rng)).clamp(0.0, CITY_SIZE_KM);
            let y = (c.y + spread.sample(&mut rng)).clamp(0.0, CITY_SIZE_KM);
            let attractiveness = (rng.gen_range(-0.5f64..0.5) * 2.0).exp();
            pois.push(Poi { location: GeoPoint::new(x, y), category: kind, attractiveness });
        }
    }
    City { city_id: seed, bounds_km: CITY_SIZE_KM, cell_km: 1.0, pois }
}

/// Normalized gravity weights over a candidate POI set seen from `origin`.
fn gravity_weights(origin: GeoPoint, candidates: &[&Poi], beta: f64) -> Vec<f64> {
    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|p| p.attractiveness / euclid_km(origin, p.location).max(0.1).powf(beta))
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Samples a destination of the given kind whose distance from `origin` is
/// close to `target_km`, weighting in-band POIs by attractiveness over
/// distance^beta. An empty band widens twice-over up to 3 times before
/// falling back to the POI with the smallest distance error.
pub fn gravity_assign(
    origin: GeoPoint,
    kind: ActivityKind,
    target_km: f64,
    city: &City,
    params: &GravityParams,
    rng: &mut impl Rng,
) -> Result<GeoPoint, GeoError> {
    let all: Vec<&Poi> = city.pois_of(kind).collect();
    if all.is_empty() {
        return Err(GeoError::NoPoiOfKind(kind));
    }

    let mut tolerance = params.tolerance_for(target_km);
    let mut band: Vec<&Poi> = Vec::new();
    for _ in 0..4 {
        band = all
            .iter()
            .copied()
            .filter(|p| (euclid_km(origin, p.location) - target_km).abs() <= tolerance)
            .collect();
        if !band.is_empty() {
            break;
        }
        tolerance *= 2.0;
    }
    if band.is_empty() {
        // widened band still empty: nearest in distance error, ties by index
        let best = all
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let ea = (euclid_km(origin, a.location) - target_km).abs();
                let eb = (euclid_km(origin, b.location) - target_km).abs();
                ea.partial_cmp(&eb).unwrap()
            })
            .map(|(_, p)| p)
            .unwrap();
        return Ok(best.location);
    }

    let weights = gravity_weights(origin, &band, params.beta);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (poi, w) in band.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(poi.location);
        }
    }
    Ok(band.last().unwrap().location)
}

/// Turns decoded tokens into a geolocated trajectory: home/work kinds pin to
/// the profile, other kinds go through the gravity model conditioned on the
/// decoded distance, and travel distances are recomputed from the final
/// locations.
pub fn materialize(
    ctx: &SimulationContext,
    tokens: &TokenSequence,
    city: &City,
    params: &GravityParams,
    rng: &mut impl Rng,
) -> Result<Trajectory, GeoError> {
    let mut activities = decode_tokens(tokens)?;
    let mut origin = ctx.profile.home;
    for activity in &mut activities {
        let location = match activity.kind {
            ActivityKind::Home => ctx.profile.home,
            ActivityKind::Work => ctx.profile.workplace,
            kind => gravity_assign(origin, kind, activity.travel_km, city, params, rng)?,
        };
        activity.travel_km = euclid_km(origin, location);
        activity.location = Some(location);
        origin = location;
    }
    Ok(Trajectory::new(ctx.clone(), activities)?)
}
