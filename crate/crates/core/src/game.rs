//! Two-stage leader/follower incentive game between parking-lot operators
//! (leaders, posting a reward rate per unit of shared compute and time) and
//! parked vehicles (followers, choosing how much compute to share).
//!
//! Followers' best responses are linear in the posted reward, which reduces
//! each leader's expected profit to `mu * (g r^2 - r^3) / sum(r)`. The
//! leaders' stage is solved three ways: the closed-form reaction map,
//! projected best-response dynamics driven by central differences, and an
//! exhaustive grid search used as an independent oracle.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A parked vehicle acting as a follower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleProfile {
    /// Preference `p` for each lot, in `(0, 1)`.
    pub preferences: Vec<f64>,
    /// Reserved parking time in minutes.
    pub duration: f64,
    /// Energy coefficient with the hardware scale folded out.
    pub energy_coeff: f64,
    /// On-board computing capability in GHz. Reported only.
    #[serde(default)]
    pub capability: f64,
}

impl VehicleProfile {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.preferences.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!("preference {p} outside (0, 1)")));
        }
        if !(self.duration > 0.0 && self.energy_coeff > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "vehicle needs positive duration and energy coefficient, got d={} kappa={}",
                self.duration, self.energy_coeff
            )));
        }
        Ok(())
    }
}

/// A parking-lot operator acting as a leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PloProfile {
    /// Revenue `g` per unit of compute and time.
    pub revenue: f64,
    /// Workload `w` (giga-cycles) each recruited vehicle must process.
    pub workload: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Expected-arrival limit `n`; `None` means unconstrained.
    #[serde(default)]
    pub capacity: Option<f64>,
    /// Penalty factor on expected arrivals above capacity.
    pub penalty: f64,
}

impl PloProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.r_min && self.r_min < self.r_max && self.r_max <= self.revenue) {
            return Err(Error::InvalidArgument(format!(
                "reward bounds must satisfy 0 < r_min < r_max <= g, got [{}, {}] with g={}",
                self.r_min, self.r_max, self.revenue
            )));
        }
        if self.workload <= 0.0 || !self.workload.is_finite() {
            return Err(Error::InvalidArgument(format!("workload must be positive, got {}", self.workload)));
        }
        if self.capacity.is_some_and(|n| n < 0.0) || self.penalty < 0.0 {
            return Err(Error::InvalidArgument("capacity and penalty must be non-negative".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.r_min, self.r_max)
    }
}

/// Leaders' joint strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_positive(&values)?;
        Ok(Self(values))
    }

    /// Every entry inside its leader's `[r_min, r_max]`.
    pub fn within(values: Vec<f64>, plos: &[PloProfile]) -> Result<Self> {
        if values.len() != plos.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rewards for {} leaders",
                values.len(),
                plos.len()
            )));
        }
        for (j, (r, p)) in values.iter().zip(plos).enumerate() {
            if !(p.r_min..=p.r_max).contains(r) {
                return Err(Error::InvalidArgument(format!(
                    "reward {r} of leader {j} outside [{}, {}]",
                    p.r_min, p.r_max
                )));
            }
        }
        Self::new(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for RewardVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_positive(r: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::Empty("reward vector"));
    }
    match r.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        Some(index) => Err(Error::NonPositiveReward {
            index,
            value: r[index],
        }),
        None => Ok(()),
    }
}

/// Probability that a vehicle picks each lot: `r_j / sum(r)`.
pub fn pairing_probabilities(r: &[f64]) -> Result<Vec<f64>> {
    check_positive(r)?;
    let total: f64 = r.iter().sum();
    Ok(r.iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    /// Slope `p d / (2 kappa w)` of the response in the reward.
    pub lambda: f64,
    /// Optimal compute share `lambda * r`.
    pub compute: f64,
}

/// Compute share maximising the vehicle's utility towards lot `lot`.
pub fn vehicle_best_response(
    vehicle: &VehicleProfile,
    lot: usize,
    plo: &PloProfile,
    reward: f64,
) -> Result<BestResponse> {
    if !(reward > 0.0) {
        return Err(Error::NonPositiveReward {
            index: lot,
            value: reward,
        });
    }
    let lambda = response_slope(vehicle, lot, plo)?;
    Ok(BestResponse {
        lambda,
        compute: lambda * reward,
    })
}

fn response_slope(vehicle: &VehicleProfile, lot: usize, plo: &PloProfile) -> Result<f64> {
    if vehicle.energy_coeff == 0.0 || plo.workload == 0.0 {
        return Err(Error::SingularProfile(format!(
            "kappa={} w={} leaves the response unbounded",
            vehicle.energy_coeff, plo.workload
        )));
    }
    let p = *vehicle.preferences.get(lot).ok_or_else(|| {
        Error::DimensionMismatch(format!(
            "vehicle has {} preferences, lot index {lot}",
            vehicle.preferences.len()
        ))
    })?;
    Ok(p * vehicle.duration / (2.0 * vehicle.energy_coeff * plo.workload))
}

/// `p r f d - kappa f^2 w`.
pub fn vehicle_utility(vehicle: &VehicleProfile, lot: usize, plo: &PloProfile, reward: f64, compute: f64) -> f64 {
    let p = vehicle.preferences[lot];
    p * reward * compute * vehicle.duration - vehicle.energy_coeff * compute * compute * plo.workload
}

/// Leaders and followers of one game instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub plos: Vec<PloProfile>,
    pub vehicles: Vec<VehicleProfile>,
}

impl Game {
    pub fn new(plos: Vec<PloProfile>, vehicles: Vec<VehicleProfile>) -> Result<Self> {
        if plos.is_empty() {
            return Err(Error::Empty("leaders"));
        }
        for p in &plos {
            p.validate()?;
        }
        for v in &vehicles {
            v.validate()?;
            if v.preferences.len() != plos.len() {
                return Err(Error::DimensionMismatch(format!(
                    "vehicle has {} preferences for {} lots",
                    v.preferences.len(),
                    plos.len()
                )));
            }
        }
        Ok(Self { plos, vehicles })
    }

    pub fn num_plos(&self) -> usize {
        self.plos.len()
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    /// `mu_j = sum_i lambda_ij d_i`.
    pub fn mu(&self, lot: usize) -> Result<f64> {
        self.vehicles.iter().try_fold(0.0, |acc, v| {
            Ok(acc + response_slope(v, lot, &self.plos[lot])? * v.duration)
        })
    }

    pub fn mus(&self) -> Result<Vec<f64>> {
        (0..self.num_plos()).map(|j| self.mu(j)).collect()
    }

    /// Leader profit summed vehicle by vehicle: `sum_i rho (g - r) f_i* d_i`.
    pub fn plo_expected_utility(&self, lot: usize, r: &[f64]) -> Result<f64> {
        let rho = pairing_probabilities(r)?[lot];
        let plo = &self.plos[lot];
        self.vehicles.iter().try_fold(0.0, |acc, v| {
            let f = vehicle_best_response(v, lot, plo, r[lot])?.compute;
            Ok(acc + rho * (plo.revenue - r[lot]) * f * v.duration)
        })
    }

    /// `sum_i rho_i^j = I r_j / sum(r)`.
    pub fn expected_arrivals(&self, lot: usize, r: &[f64]) -> Result<f64> {
        Ok(self.num_vehicles() as f64 * pairing_probabilities(r)?[lot])
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.plos.iter().map(|p| (p.r_min, p.r_max)).collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.plos.iter().map(|p| 0.5 * (p.r_min + p.r_max)).collect()
    }
}

/// Reduced leader profit `mu (g r_j^2 - r_j^3) / sum(r)`.
pub fn plo_utility_reduced(mu: f64, revenue: f64, lot: usize, r: &[f64]) -> f64 {
    let total: f64 = r.iter().sum();
    let rj = r[lot];
    mu * (revenue * rj * rj - rj * rj * rj) / total
}

/// Numerator of the profit derivative (up to the positive factor
/// `mu r / sum(r)^2`): `-2 r^2 - (3S - g) r + 2 g S`.
pub fn reaction_numerator(r: f64, opponents: f64, revenue: f64) -> f64 {
    -2.0 * r * r - (3.0 * opponents - revenue) * r + 2.0 * revenue * opponents
}

/// Positive root of [`reaction_numerator`] in `r`, before clipping.
pub fn phi_unclipped(opponents: f64, revenue: f64) -> f64 {
    let b = 3.0 * opponents - revenue;
    let disc = (b * b + 16.0 * revenue * opponents).sqrt();
    if b > 0.0 {
        // Rationalised to avoid cancellation when 3S >> g.
        4.0 * revenue * opponents / (disc + b)
    } else {
        0.25 * (disc - b)
    }
}

/// Leader `lot`'s optimal reward against the others' current rewards,
/// capped at its `r_max`.
pub fn phi_closed_form(lot: usize, r: &[f64], plos: &[PloProfile]) -> Result<f64> {
    let opponents: f64 = r
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != lot)
        .map(|(_, v)| v)
        .sum();
    if !(opponents > 0.0) {
        return Err(Error::DegenerateGame { leader: lot });
    }
    Ok(phi_unclipped(opponents, plos[lot].revenue).min(plos[lot].r_max))
}

/// Symmetric fixed point of the reaction map for `leaders` identical
/// leaders: `g (2J - 1) / (3J - 1)`.
pub fn symmetric_equilibrium(revenue: f64, leaders: usize) -> f64 {
    let j = leaders as f64;
    revenue * (2.0 * j - 1.0) / (3.0 * j - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StandardProperty {
    Positivity,
    Monotonicity,
    Scalability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardViolation {
    pub property: StandardProperty,
    pub revenue: f64,
    pub opponents: f64,
    /// Second opponent total (monotonicity) or scale factor (scalability).
    pub witness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardFunctionReport {
    pub samples: usize,
    pub violations: Vec<StandardViolation>,
}

impl StandardFunctionReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks positivity, monotonicity in the opponents' total and scalability
/// of the unclipped reaction map at one sample point.
pub fn check_standard_sample(
    revenue: f64,
    opponents: f64,
    larger_opponents: f64,
    alpha: f64,
) -> Vec<StandardViolation> {
    let mut out = Vec::new();
    let phi = phi_unclipped(opponents, revenue);
    let violation = |property, witness| StandardViolation {
        property,
        revenue,
        opponents,
        witness,
    };
    if !(phi > 0.0) {
        out.push(violation(StandardProperty::Positivity, opponents));
    }
    if larger_opponents > opponents && !(phi_unclipped(larger_opponents, revenue) > phi) {
        out.push(violation(StandardProperty::Monotonicity, larger_opponents));
    }
    if alpha > 1.0 && !(alpha * phi > phi_unclipped(alpha * opponents, revenue)) {
        out.push(violation(StandardProperty::Scalability, alpha));
    }
    out
}

/// Randomised sweep of [`check_standard_sample`]: revenue uniform in
/// `revenue_range`, opponents' total in `(0, 20]`, a strictly larger total,
/// and a scale factor in `(1, 4]`.
pub fn check_standard_function(revenue_range: (f64, f64), samples: usize, seed: u64) -> StandardFunctionReport {
    let mut r = rng::seeded(seed);
    let mut violations = Vec::new();
    for _ in 0..samples {
        let g = r.random_range(revenue_range.0..=revenue_range.1);
        let s = r.random_range(1e-3..=20.0);
        let s2 = s + r.random_range(1e-3..=5.0);
        let alpha = r.random_range(1.001..=4.0);
        violations.extend(check_standard_sample(g, s, s2, alpha));
    }
    StandardFunctionReport { samples, violations }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateSchedule {
    /// All leaders update from the previous iterate.
    #[default]
    Jacobi,
    /// Leaders update one after another in index order.
    GaussSeidel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JacobiConfig {
    pub learning_rate: f64,
    /// Half-width of the central difference.
    pub delta: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub schedule: UpdateSchedule,
}

impl Default for JacobiConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            delta: 1e-2,
            max_iters: 100_000,
            tol: 1e-4,
            schedule: UpdateSchedule::Jacobi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub r_star: Vec<f64>,
    pub iterations: usize,
    pub utilities: Vec<f64>,
    pub expected_arrivals: Vec<f64>,
    pub converged: bool,
    /// `|r_j - clamp(phi_j(r))|` per leader.
    pub residuals: Vec<f64>,
    /// Whether `3 * sum_{k != j} r_k > g_j` holds at the solution.
    pub concavity_condition: Vec<bool>,
}

impl EquilibriumReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// One row of a solver trace: iteration, rewards and profits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub rewards: Vec<f64>,
    pub utilities: Vec<f64>,
}

pub fn jacobi_solve(game: &Game, r0: &[f64], cfg: &JacobiConfig) -> Result<EquilibriumReport> {
    jacobi_solve_traced(game, r0, cfg, |_| {})
}

/// Projected gradient ascent `r_j += lr * r_j * dV_j/dr_j` with central
/// differences, clipped into each leader's bounds every step.
pub fn jacobi_solve_traced(
    game: &Game,
    r0: &[f64],
    cfg: &JacobiConfig,
    mut trace: impl FnMut(&TraceRow),
) -> Result<EquilibriumReport> {
    if !(cfg.delta > 0.0 && cfg.learning_rate > 0.0 && cfg.tol > 0.0) {
        return Err(Error::InvalidArgument(
            "learning rate, delta and tolerance must be positive".into(),
        ));
    }
    let mut r = RewardVector::within(r0.to_vec(), &game.plos)?.into_inner();
    if r.iter().zip(&game.plos).any(|(v, p)| *v - cfg.delta <= 0.0 || p.r_min <= cfg.delta) {
        return Err(Error::InvalidArgument(format!(
            "delta {} must stay below every r_min",
            cfg.delta
        )));
    }
    let mus = game.mus()?;
    let profit = |j: usize, r: &[f64]| plo_utility_reduced(mus[j], game.plos[j].revenue, j, r);

    let mut converged = false;
    let mut iterations = 0;
    let mut probe = r.clone();
    while iterations < cfg.max_iters {
        iterations += 1;
        let previous = r.clone();
        for j in 0..r.len() {
            let base = match cfg.schedule {
                UpdateSchedule::Jacobi => &previous,
                UpdateSchedule::GaussSeidel => &r,
            };
            probe.copy_from_slice(base);
            let rj = base[j];
            probe[j] = rj + cfg.delta;
            let up = profit(j, &probe);
            probe[j] = rj - cfg.delta;
            let down = profit(j, &probe);
            let slope = (up - down) / (2.0 * cfg.delta);
            r[j] = game.plos[j].clamp(rj + cfg.learning_rate * rj * slope);
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                episode: iterations,
                detail: "non-finite reward in best-response dynamics".into(),
            });
        }
        trace(&TraceRow {
            iteration: iterations,
            rewards: r.clone(),
            utilities: (0..r.len()).map(|j| profit(j, &r)).collect(),
        });
        let change = r
            .iter()
            .zip(&previous)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    report(game, r, iterations, converged)
}

/// Builds an [`EquilibriumReport`] for an arbitrary joint strategy.
pub fn report(game: &Game, r: Vec<f64>, iterations: usize, converged: bool) -> Result<EquilibriumReport> {
    let j_count = game.num_plos();
    let mut utilities = Vec::with_capacity(j_count);
    let mut arrivals = Vec::with_capacity(j_count);
    let mut residuals = Vec::with_capacity(j_count);
    let mut concavity = Vec::with_capacity(j_count);
    let total: f64 = r.iter().sum();
    for (j, plo) in game.plos.iter().enumerate() {
        utilities.push(game.plo_expected_utility(j, &r)?);
        arrivals.push(game.expected_arrivals(j, &r)?);
        let opponents = total - r[j];
        let best = if j_count == 1 {
            plo.clamp(0.5 * plo.revenue)
        } else {
            plo.clamp(phi_closed_form(j, &r, &game.plos)?)
        };
        residuals.push((r[j] - best).abs());
        concavity.push(3.0 * opponents > plo.revenue);
    }
    Ok(EquilibriumReport {
        r_star: r,
        iterations,
        utilities,
        expected_arrivals: arrivals,
        converged,
        residuals,
        concavity_condition: concavity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEquilibrium {
    pub rewards: Vec<f64>,
    pub indices: Vec<usize>,
    /// Grid spacing per leader.
    pub cell: Vec<f64>,
    pub sweeps: usize,
}

/// Sequential best-response dynamics where each leader's response is an
/// exhaustive argmax of `payoff(j, r)` over an evenly spaced grid of its
/// bounds. Ties go to the lowest grid index. Stops at a grid fixed point;
/// a revisited non-fixed state is reported as a cycle.
pub fn grid_best_response_dynamics(
    bounds: &[(f64, f64)],
    grid_points: usize,
    start: &[f64],
    max_sweeps: usize,
    payoff: impl Fn(usize, &[f64]) -> f64,
) -> Result<GridEquilibrium> {
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    if start.len() != bounds.len() {
        return Err(Error::DimensionMismatch("start point and bounds differ in length".into()));
    }
    let cell: Vec<f64> = bounds
        .iter()
        .map(|(lo, hi)| (hi - lo) / (grid_points - 1) as f64)
        .collect();
    let value = |j: usize, k: usize| bounds[j].0 + cell[j] * k as f64;
    let mut indices: Vec<usize> = start
        .iter()
        .enumerate()
        .map(|(j, &s)| (((s - bounds[j].0) / cell[j]).round().max(0.0) as usize).min(grid_points - 1))
        .collect();
    let mut r: Vec<f64> = indices.iter().enumerate().map(|(j, &k)| value(j, k)).collect();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();

    for sweep in 1..=max_sweeps {
        let before = indices.clone();
        for j in 0..bounds.len() {
            let mut best_k = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..grid_points {
                r[j] = value(j, k);
                let v = payoff(j, &r);
                if v > best_v {
                    best_v = v;
                    best_k = k;
                }
            }
            indices[j] = best_k;
            r[j] = value(j, best_k);
        }
        if indices == before {
            return Ok(GridEquilibrium {
                rewards: r,
                indices,
                cell,
                sweeps: sweep,
            });
        }
        if let Some(first) = seen.insert(indices.clone(), sweep) {
            return Err(Error::GridCycle {
                period: sweep - first,
                sweeps: sweep,
            });
        }
    }
    Err(Error::GridCycle {
        period: 0,
        sweeps: max_sweeps,
    })
}

/// Brute-force equilibrium of the unconstrained leader game: grid
/// best-response dynamics on the vehicle-by-vehicle profit.
pub fn grid_oracle_equilibrium(game: &Game, grid_points: usize) -> Result<GridEquilibrium> {
    if grid_points < 100 {
        return Err(Error::InvalidArgument(format!(
            "grid oracle needs at least 100 points per leader, got {grid_points}"
        )));
    }
    // Validate once so the payoff closure can unwrap.
    game.plo_expected_utility(0, &game.midpoint())?;
    grid_best_response_dynamics(&game.bounds(), grid_points, &game.midpoint(), 1000, |j, r| {
        game.plo_expected_utility(j, r).expect("positive grid rewards")
    })
}
