use serde::{Deserialize, Serialize};

use super::FrontierPoint;
use crate::error::{Error, Result};

/// Strict Pareto dominance for (tokens, utility): no more tokens, no less
/// utility, and strictly better on one of them.
pub fn dominates(q: &FrontierPoint, p: &FrontierPoint) -> bool {
    q.mean_tokens <= p.mean_tokens
        && q.utility >= p.utility
        && (q.mean_tokens < p.mean_tokens || q.utility > p.utility)
}

/// Non-dominated subset ordered by tokens ascending. Of several identical
/// points the first one in input order is kept.
pub fn pareto_filter(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.mean_tokens
            .total_cmp(&q.mean_tokens)
            .then(q.utility.total_cmp(&p.utility))
            .then(a.cmp(&b))
    });
    let mut out: Vec<FrontierPoint> = Vec::new();
    for i in idx {
        let p = points[i];
        if out.last().is_none_or(|best| p.utility > best.utility) {
            out.push(p);
        }
    }
    out
}

/// Min-max normalization of one axis; a zero range maps everything to 0.
pub fn normalize_axis(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Frontier in normalized `(tokens, utility)` coordinates.
pub fn normalized(frontier: &[FrontierPoint]) -> Vec<(f64, f64)> {
    let t: Vec<f64> = frontier.iter().map(|p| p.mean_tokens).collect();
    let u: Vec<f64> = frontier.iter().map(|p| p.utility).collect();
    normalize_axis(&t).into_iter().zip(normalize_axis(&u)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KneeFlag {
    /// Fewer than three frontier points; the utopia anchor was used.
    UtopiaFallback,
    /// No interior point lies above the endpoint chord.
    NoKnee,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KneeChoice {
    pub index: usize,
    pub flag: Option<KneeFlag>,
}

const COLLINEAR_TOL: f64 = 1e-12;

/// Knee over points already in normalized coordinates, sorted by tokens.
/// Picks the interior point with the largest signed distance above the chord
/// joining the first and last points.
pub fn knee_index_normalized(points: &[(f64, f64)]) -> Result<KneeChoice> {
    if points.is_empty() {
        return Err(Error::invalid("knee of an empty frontier"));
    }
    if points.len() < 3 {
        return Ok(KneeChoice {
            index: utopia_index_normalized(points, 1.0, 1.0)?,
            flag: Some(KneeFlag::UtopiaFallback),
        });
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    let mut best: Option<(usize, f64)> = None;
    if len > 0.0 {
        for (i, p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
            // positive when p lies above (to the upper-left of) the chord
            let d = (dx * (p.1 - a.1) - dy * (p.0 - a.0)) / len;
            if d > COLLINEAR_TOL && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
    }
    Ok(match best {
        Some((index, _)) => KneeChoice { index, flag: None },
        None => KneeChoice {
            index: 0,
            flag: Some(KneeFlag::NoKnee),
        },
    })
}

/// Weighted distance to the ideal corner (0 tokens, utility 1) in
/// normalized coordinates; ties go to the earlier (cheaper) point.
pub fn utopia_index_normalized(points: &[(f64, f64)], w_t: f64, w_u: f64) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::invalid("utopia point of an empty frontier"));
    }
    if !(w_t >= 0.0 && w_u >= 0.0 && w_t.is_finite() && w_u.is_finite()) || w_t + w_u == 0.0 {
        return Err(Error::invalid(format!(
            "utopia weights must be non-negative and not both zero (got {w_t}, {w_u})"
        )));
    }
    let mut best = (0, f64::INFINITY);
    for (i, (t, u)) in points.iter().enumerate() {
        let obj = w_t * t * t + w_u * (1.0 - u) * (1.0 - u);
        if obj < best.1 {
            best = (i, obj);
        }
    }
    Ok(best.0)
}

pub fn knee_point(frontier: &[FrontierPoint]) -> Result<(FrontierPoint, Option<KneeFlag>)> {
    let c = knee_index_normalized(&normalized(frontier))?;
    Ok((frontier[c.index], c.flag))
}

pub fn utopia_point(frontier: &[FrontierPoint], w_t: f64, w_u: f64) -> Result<FrontierPoint> {
    Ok(frontier[utopia_index_normalized(&normalized(frontier), w_t, w_u)?])
}

/// Cheapest point whose utility reaches `u_base + epsilon`.
pub fn epsilon_point(frontier: &[FrontierPoint], u_base: f64, epsilon: f64) -> Result<FrontierPoint> {
    let target = u_base + epsilon;
    frontier
        .iter()
        .filter(|p| p.utility >= target)
        .min_by(|a, b| a.mean_tokens.total_cmp(&b.mean_tokens))
        .copied()
        .ok_or_else(|| Error::Infeasible {
            target,
            max_utility: frontier.iter().map(|p| p.utility).fold(f64::NEG_INFINITY, f64::max),
        })
}

/// Highest utility, cheaper point on ties.
pub fn umax_point(frontier: &[FrontierPoint]) -> Result<FrontierPoint> {
    frontier
        .iter()
        .copied()
        .reduce(|best, p| {
            if p.utility > best.utility || (p.utility == best.utility && p.mean_tokens < best.mean_tokens) {
                p
            } else {
                best
            }
        })
        .ok_or_else(|| Error::invalid("umax of an empty frontier"))
}
