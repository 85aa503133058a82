//! Threshold routing, the validation frontier, deployment anchors and the
//! frozen policy artifact.

mod anchors;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{decode_sealed, encode_sealed, Header};
use crate::ranking::Mode;

pub use anchors::{
    dominates, epsilon_point, knee_index_normalized, knee_point, normalize_axis, normalized, pareto_filter,
    umax_point, utopia_index_normalized, utopia_point, KneeChoice, KneeFlag,
};

pub const POLICY_KIND: &str = "policy";
pub const DEFAULT_GRID_SIZE: usize = 200;
const BISECTION_STEPS: usize = 60;

/// Think iff `a_hat - eta * delta_cost >= 0`.
pub fn route(a_hat: f64, delta_cost: f64, eta: f64) -> Result<Mode> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be finite and >= 0, got {eta}")));
    }
    if !(delta_cost >= 1.0 && delta_cost.is_finite()) {
        return Err(Error::invalid(format!("delta cost estimate must be >= 1, got {delta_cost}")));
    }
    if !a_hat.is_finite() {
        return Err(Error::NonFinite("predicted advantage".into()));
    }
    Ok(if a_hat - eta * delta_cost >= 0.0 {
        Mode::Think
    } else {
        Mode::NonThink
    })
}

/// Realized utility and token counts of both modes for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedPair {
    pub u_non: f64,
    pub u_think: f64,
    pub t_non: f64,
    pub t_think: f64,
}

impl LoggedPair {
    pub fn outcome(&self, mode: Mode) -> (f64, f64) {
        match mode {
            Mode::NonThink => (self.t_non, self.u_non),
            Mode::Think => (self.t_think, self.u_think),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub eta: f64,
    pub mean_tokens: f64,
    pub utility: f64,
    pub think_fraction: f64,
}

/// Routing inputs for a set of instances, checked once.
#[derive(Clone, Copy, Debug)]
pub struct SweepInputs<'a> {
    pub predictions: &'a [f64],
    pub delta_costs: &'a [f64],
    pub pairs: &'a [LoggedPair],
}

impl<'a> SweepInputs<'a> {
    pub fn new(predictions: &'a [f64], delta_costs: &'a [f64], pairs: &'a [LoggedPair]) -> Result<Self> {
        let n = predictions.len();
        if n == 0 || delta_costs.len() != n || pairs.len() != n {
            return Err(Error::invalid(format!(
                "sweep inputs must be non-empty and aligned (predictions {n}, costs {}, records {})",
                delta_costs.len(),
                pairs.len()
            )));
        }
        if predictions.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("predicted advantages".into()));
        }
        if let Some(d) = delta_costs.iter().find(|d| !(**d >= 1.0 && d.is_finite())) {
            return Err(Error::invalid(format!("delta cost estimate must be >= 1, got {d}")));
        }
        Ok(SweepInputs {
            predictions,
            delta_costs,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn decisions(&self, eta: f64) -> Result<Vec<Mode>> {
        (0..self.len())
            .map(|i| route(self.predictions[i], self.delta_costs[i], eta))
            .collect()
    }

    pub fn evaluate(&self, eta: f64) -> Result<FrontierPoint> {
        let (mut t, mut u, mut k) = (0.0, 0.0, 0usize);
        for (i, mode) in self.decisions(eta)?.into_iter().enumerate() {
            let (ti, ui) = self.pairs[i].outcome(mode);
            t += ti;
            u += ui;
            k += (mode == Mode::Think) as usize;
        }
        let n = self.len() as f64;
        Ok(FrontierPoint {
            eta,
            mean_tokens: t / n,
            utility: u / n,
            think_fraction: k as f64 / n,
        })
    }
}

/// 0, then `n` log-spaced values across the positive flip thresholds
/// `a / delta`, then one value above every threshold. With no positive
/// prediction the grid is `[0, 1]`.
pub fn default_eta_grid(predictions: &[f64], delta_costs: &[f64], n: usize) -> Vec<f64> {
    let pos: Vec<f64> = predictions.iter().copied().filter(|a| *a > 0.0).collect();
    let d_min = delta_costs.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = delta_costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if pos.is_empty() || !d_min.is_finite() || !d_max.is_finite() {
        return vec![0.0, 1.0];
    }
    let a_min = pos.iter().copied().fold(f64::INFINITY, f64::min);
    let a_max = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (a_min / d_max, a_max / d_min);
    let mut grid = vec![0.0];
    let n = n.max(1);
    if n == 1 || hi <= lo {
        grid.push(lo);
    } else {
        let (llo, lhi) = (lo.ln(), hi.ln());
        grid.extend((0..n).map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp()));
    }
    grid.push(2.0 * hi);
    grid.dedup();
    grid
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("eta grid is empty"));
    }
    if let Some(e) = grid.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::invalid(format!("eta grid values must be finite and >= 0, got {e}")));
    }
    Ok(())
}

/// One frontier point per grid value, in grid order.
pub fn sweep_eta(exec: Execution, inputs: &SweepInputs<'_>, grid: &[f64]) -> Result<Vec<FrontierPoint>> {
    check_grid(grid)?;
    exec.map(grid, |&eta| inputs.evaluate(eta)).into_iter().collect()
}

/// Eta whose expected mean tokens are closest to `target`: best grid value
/// (larger eta on ties), refined by bisection towards the neighbouring grid
/// value on the other side of the target.
pub fn calibrate_eta(exec: Execution, target: f64, inputs: &SweepInputs<'_>, grid: &[f64]) -> Result<f64> {
    if !target.is_finite() {
        return Err(Error::NonFinite("token budget".into()));
    }
    let mut grid = grid.to_vec();
    check_grid(&grid)?;
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = sweep_eta(exec, inputs, &grid)?;
    let gap = |t: f64| (t - target) * (t - target);

    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if gap(p.mean_tokens) <= gap(points[best].mean_tokens) {
            best = i;
        }
    }
    let mut candidates = vec![(grid[best], points[best].mean_tokens)];
    let t_best = points[best].mean_tokens;
    let bracket = if t_best > target && best + 1 < grid.len() && points[best + 1].mean_tokens < target {
        Some((grid[best], grid[best + 1]))
    } else if t_best < target && best > 0 && points[best - 1].mean_tokens > target {
        Some((grid[best - 1], grid[best]))
    } else {
        None
    };
    if let Some((mut lo, mut hi)) = bracket {
        // invariant: E[T](lo) >= target > E[T](hi)
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if inputs.evaluate(mid)?.mean_tokens >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        candidates.push((lo, inputs.evaluate(lo)?.mean_tokens));
        candidates.push((hi, inputs.evaluate(hi)?.mean_tokens));
    }
    let (eta, _) = candidates
        .into_iter()
        .reduce(|a, b| {
            let (ga, gb) = (gap(a.1), gap(b.1));
            if gb < ga || (gb == ga && b.0 > a.0) {
                b
            } else {
                a
            }
        })
        .expect("non-empty");
    Ok(eta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Knee,
    Utopia,
    Epsilon,
    Umax,
    Manual,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_tokens: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_utility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knee_flag: Option<KneeFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub data_hash: String,
    /// Left empty for byte-reproducible artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub anchor: Anchor,
    pub eta_frozen: f64,
    pub expected_mean_tokens: f64,
    pub expected_utility: f64,
    pub expected_think_fraction: f64,
    pub params: AnchorParams,
    pub provenance: Provenance,
}

pub fn freeze_policy(
    anchor: Anchor,
    point: &FrontierPoint,
    params: AnchorParams,
    provenance: Provenance,
) -> Result<PolicyArtifact> {
    if !(point.eta >= 0.0 && point.eta.is_finite()) {
        return Err(Error::invalid(format!("frozen eta must be finite and >= 0, got {}", point.eta)));
    }
    Ok(PolicyArtifact {
        anchor,
        eta_frozen: point.eta,
        expected_mean_tokens: point.mean_tokens,
        expected_utility: point.utility,
        expected_think_fraction: point.think_fraction,
        params,
        provenance,
    })
}

impl PolicyArtifact {
    pub fn route(&self, a_hat: f64, delta_cost: f64) -> Result<Mode> {
        route(a_hat, delta_cost, self.eta_frozen)
    }

    /// Warning text when `model_hash` differs from the recorded model.
    pub fn check_model(&self, model_hash: &str) -> Option<String> {
        (model_hash != self.provenance.model_hash).then(|| {
            let msg = format!(
                "policy was frozen for model {} but is applied with model {model_hash}",
                self.provenance.model_hash
            );
            log::warn!("{msg}");
            msg
        })
    }

    pub fn save(&self) -> Result<String> {
        let header = Header::new(POLICY_KIND)
            .with_input("model", self.provenance.model_hash.clone())
            .with_input("data", self.provenance.data_hash.clone());
        encode_sealed(header, self)
    }

    pub fn load(text: &str) -> Result<Self> {
        let (_, artifact): (Header, PolicyArtifact) = decode_sealed(text, POLICY_KIND)?;
        if !(artifact.eta_frozen >= 0.0 && artifact.eta_frozen.is_finite()) {
            return Err(Error::invalid("policy eta must be finite and >= 0"));
        }
        Ok(artifact)
    }
}
