//! Two-stage feature refinement: a sparse linear probe per setting, a
//! cross-setting consistency vote, then intra-class redundancy pruning.

mod lasso;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub use lasso::{alpha_max, fit_l1_probe, select_alpha_cv, LassoFit, LASSO_MAX_SWEEPS, LASSO_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    /// Zero coefficient in every setting.
    ZeroWeight,
    /// Selected in too few settings.
    Inconsistent,
    /// Strongly correlated with a kept feature within every label class.
    Redundant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub name: String,
    pub reason: DropReason,
    /// For redundant features, the group member that was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_instead: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingCoefficients {
    pub setting: String,
    pub alpha: f64,
    pub coefficients: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub settings: Vec<SettingCoefficients>,
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedFeature>,
}

/// One dataset/backbone combination: a standardized design and its labels.
#[derive(Clone, Debug)]
pub struct Setting {
    pub name: String,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    /// Fixed lasso penalty; `None` selects it by cross-validation.
    pub alpha: Option<f64>,
    pub cv_folds: usize,
    pub n_alphas: usize,
    pub tau: f64,
    pub rho: f64,
    pub n_classes: usize,
    /// Features that survive every stage regardless of their scores.
    pub always_keep: Vec<String>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            alpha: None,
            cv_folds: 5,
            n_alphas: 10,
            tau: 0.6,
            rho: 0.9,
            n_classes: 3,
            always_keep: Vec::new(),
        }
    }
}

/// Keep a feature iff it is selected in at least `tau` of the settings.
pub fn consistency_filter(supports: &[BTreeSet<String>], tau: f64) -> Result<BTreeSet<String>> {
    if supports.is_empty() {
        return Err(Error::invalid("consistency filter needs at least one setting"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")));
    }
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for s in supports {
        for f in s {
            *counts.entry(f).or_default() += 1;
        }
    }
    let need = tau * supports.len() as f64;
    Ok(counts
        .into_iter()
        .filter(|(_, c)| *c as f64 >= need - 1e-12)
        .map(|(f, _)| f.clone())
        .collect())
}

/// Contiguous rank bins of `y` (ties broken by row index).
fn quantile_classes(y: &[f64], n_classes: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let n = idx.len();
    (0..n_classes)
        .map(|c| idx[c * n / n_classes..(c + 1) * n / n_classes].to_vec())
        .collect()
}

fn abs_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let tiny = 1e-24 * n;
    match (saa <= tiny, sbb <= tiny) {
        // both constant inside the class: indistinguishable there
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (sab / (saa * sbb).sqrt()).abs().min(1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub kept: Vec<String>,
    /// `(dropped, survivor)` pairs.
    pub dropped: Vec<(String, String)>,
    pub skipped_classes: usize,
}

/// Group kept features whose absolute within-class correlation exceeds
/// `rho` in every label class and keep one member per group: the one with
/// the largest importance (earliest column on ties), or a forced feature.
///
/// Classes are `n_classes` quantile bins of `y`; bins with fewer than 3 rows
/// are skipped.
#[allow(clippy::too_many_arguments)]
pub fn redundancy_prune(
    x: &Array2<f64>,
    y: &[f64],
    names: &[String],
    kept: &BTreeSet<String>,
    rho: f64,
    importance: &[f64],
    n_classes: usize,
    force: &BTreeSet<String>,
) -> Result<PruneOutcome> {
    if kept.is_empty() {
        return Err(Error::invalid("redundancy pruning needs a non-empty feature set"));
    }
    if x.nrows() != y.len() || x.ncols() != names.len() || importance.len() != names.len() {
        return Err(Error::invalid("redundancy pruning: inconsistent shapes"));
    }
    let cols: Vec<usize> = (0..names.len()).filter(|&j| kept.contains(&names[j])).collect();
    let classes: Vec<Vec<usize>> = quantile_classes(y, n_classes.max(1))
        .into_iter()
        .filter(|c| c.len() >= 3)
        .collect();
    let skipped = n_classes.max(1) - classes.len();
    if skipped > 0 {
        log::warn!("redundancy pruning skipped {skipped} class(es) with fewer than 3 instances");
    }
    let ordered: Vec<String> = cols.iter().map(|&j| names[j].clone()).collect();
    if classes.is_empty() {
        return Ok(PruneOutcome {
            kept: ordered,
            dropped: Vec::new(),
            skipped_classes: skipped,
        });
    }
    let per_class: Vec<Vec<Vec<f64>>> = classes
        .iter()
        .map(|rows| cols.iter().map(|&j| rows.iter().map(|&i| x[[i, j]]).collect()).collect())
        .collect();

    // union-find over positions in `cols`
    let mut parent: Vec<usize> = (0..cols.len()).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            if per_class.iter().all(|cl| abs_corr(&cl[a], &cl[b]) > rho) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..cols.len() {
        let r = find(&mut parent, a);
        groups.entry(r).or_default().push(a);
    }
    let mut survivors = BTreeSet::new();
    let mut dropped = Vec::new();
    for members in groups.values() {
        let forced: Vec<usize> = members.iter().copied().filter(|&m| force.contains(&ordered[m])).collect();
        let keep: Vec<usize> = if forced.is_empty() {
            let best = members
                .iter()
                .copied()
                .fold(None::<usize>, |acc, m| match acc {
                    Some(b) if importance[cols[m]].abs() <= importance[cols[b]].abs() => Some(b),
                    _ => Some(m),
                })
                .expect("non-empty group");
            vec![best]
        } else {
            forced
        };
        for &m in members {
            if !keep.contains(&m) {
                dropped.push((ordered[m].clone(), ordered[keep[0]].clone()));
            }
        }
        survivors.extend(keep);
    }
    Ok(PruneOutcome {
        kept: survivors.into_iter().map(|m| ordered[m].clone()).collect(),
        dropped,
        skipped_classes: skipped,
    })
}

/// Run both stages over several settings sharing one feature schema.
pub fn select_features(
    exec: Execution,
    settings: &[Setting],
    names: &[String],
    cfg: &SelectConfig,
) -> Result<SelectionReport> {
    if settings.is_empty() {
        return Err(Error::invalid("feature selection needs at least one setting"));
    }
    for s in settings {
        if s.x.ncols() != names.len() {
            return Err(Error::invalid(format!("setting `{}` has {} columns", s.name, s.x.ncols())));
        }
    }
    let fits: Vec<Result<SettingCoefficients>> = exec.map(settings, |s| {
        let alpha = match cfg.alpha {
            Some(a) => a,
            None => select_alpha_cv(&s.x, &s.y, cfg.cv_folds, cfg.n_alphas)?.0,
        };
        let fit = fit_l1_probe(&s.x, &s.y, alpha)?;
        Ok(SettingCoefficients {
            setting: s.name.clone(),
            alpha,
            coefficients: names.iter().cloned().zip(fit.coef).collect(),
        })
    });
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;

    let force: BTreeSet<String> = cfg.always_keep.iter().cloned().collect();
    let supports: Vec<BTreeSet<String>> = fits
        .iter()
        .map(|f| f.coefficients.iter().filter(|(_, c)| **c != 0.0).map(|(n, _)| n.clone()).collect())
        .collect();
    let ever: BTreeSet<String> = supports.iter().flatten().cloned().collect();
    let mut consistent = consistency_filter(&supports, cfg.tau)?;
    consistent.extend(force.iter().filter(|f| names.contains(f)).cloned());

    let mut dropped: Vec<DroppedFeature> = names
        .iter()
        .filter(|n| !consistent.contains(*n))
        .map(|n| DroppedFeature {
            name: n.clone(),
            reason: if ever.contains(n) {
                DropReason::Inconsistent
            } else {
                DropReason::ZeroWeight
            },
            kept_instead: None,
        })
        .collect();

    let kept = if consistent.is_empty() {
        Vec::new()
    } else {
        let views: Vec<_> = settings.iter().map(|s| s.x.view()).collect();
        let x = concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        let y: Vec<f64> = settings.iter().flat_map(|s| s.y.iter().copied()).collect();
        let importance: Vec<f64> = names
            .iter()
            .map(|n| fits.iter().map(|f| f.coefficients[n].abs()).sum::<f64>() / fits.len() as f64)
            .collect();
        let pruned = redundancy_prune(&x, &y, names, &consistent, cfg.rho, &importance, cfg.n_classes, &force)?;
        dropped.extend(pruned.dropped.into_iter().map(|(name, survivor)| DroppedFeature {
            name,
            reason: DropReason::Redundant,
            kept_instead: Some(survivor),
        }));
        pruned.kept
    };
    let order = |n: &String| names.iter().position(|m| m == n).unwrap_or(usize::MAX);
    dropped.sort_by_key(|d| order(&d.name));
    Ok(SelectionReport {
        settings: fits,
        kept,
        dropped,
    })
}
