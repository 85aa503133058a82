//! Offline evaluation of routing arms over logged dual-mode outcomes, and
//! the relative-delta report.

use std::fmt::{self, Write};

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonroute_core::ranking::{
    outcome_utility, tradeoff_score, DualModeRecord, Mode, ModeOutcome, RankingInstance, UtilityMetric,
};
use serde::{Deserialize, Serialize};

use crate::config::SplitName;

/// ChaCha stream reserved for the Random arm, disjoint from the per-instance
/// streams used by the generator.
pub const RANDOM_ARM_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    NonThink,
    Think,
    Random,
    SelfSelect,
    Routed,
    Oracle,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::NonThink => "non_think",
            Arm::Think => "think",
            Arm::Random => "random",
            Arm::SelfSelect => "self_select",
            Arm::Routed => "routed",
            Arm::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// Mean of the configured utility metric.
    pub utility: f64,
    pub ndcg10: f64,
    pub recall10: f64,
    pub top1: f64,
    pub mean_tokens: f64,
    pub think_fraction: f64,
    /// `ndcg@10 - 1e-4 * tokens`.
    pub tradeoff: f64,
}

/// Relative change `(ours - base) / base` per quantity; `None` where the
/// baseline is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub arm: Arm,
    pub utility: Option<f64>,
    pub ndcg10: Option<f64>,
    pub mean_tokens: Option<f64>,
    pub tradeoff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub metric: UtilityMetric,
    pub n_instances: usize,
    pub arms: Vec<ArmResult>,
    pub baseline: Arm,
    pub deltas: Vec<ArmDelta>,
    pub checks: Vec<Check>,
}

/// One evaluated instance: its logged outcomes and the routed decision.
pub struct EvalItem<'a> {
    pub instance: &'a RankingInstance,
    pub record: &'a DualModeRecord,
    pub routed: Mode,
}

pub fn relative_delta(ours: f64, base: f64) -> Option<f64> {
    (base != 0.0 && base.is_finite() && ours.is_finite()).then(|| (ours - base) / base)
}

pub fn self_selected_mode(outcome: &ModeOutcome) -> Mode {
    match &outcome.raw_text {
        Some(t) if t.contains("<thought>") => Mode::Think,
        _ => Mode::NonThink,
    }
}

/// Per-instance better mode; equal utility goes to the cheaper mode.
pub fn oracle_mode(metric: UtilityMetric, instance: &RankingInstance, record: &DualModeRecord) -> Result<Mode> {
    let u_non = outcome_utility(metric, instance, &record.non_think)?;
    let u_think = outcome_utility(metric, instance, &record.think)?;
    Ok(if u_think > u_non {
        Mode::Think
    } else if u_non > u_think || record.non_think.tokens <= record.think.tokens {
        Mode::NonThink
    } else {
        Mode::Think
    })
}

fn arm_result(arm: Arm, metric: UtilityMetric, chosen: &[(&RankingInstance, &ModeOutcome, Mode)]) -> Result<ArmResult> {
    let n = chosen.len() as f64;
    let (mut u, mut nd, mut rc, mut t1, mut tok, mut th) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (inst, o, mode) in chosen {
        u += outcome_utility(metric, inst, o)?;
        nd += outcome_utility(UtilityMetric::Ndcg(10), inst, o)?;
        rc += outcome_utility(UtilityMetric::Recall(10), inst, o)?;
        t1 += outcome_utility(UtilityMetric::Top1, inst, o)?;
        tok += o.tokens as f64;
        th += f64::from(u8::from(*mode == Mode::Think));
    }
    let (ndcg10, mean_tokens) = (nd / n, tok / n);
    Ok(ArmResult {
        arm,
        utility: u / n,
        ndcg10,
        recall10: rc / n,
        top1: t1 / n,
        mean_tokens,
        think_fraction: th / n,
        tradeoff: tradeoff_score(ndcg10, mean_tokens),
    })
}

/// Every arm's means over `items`. The SelfSelect arm is included only when
/// every record carries a self-selected run.
pub fn evaluate_arms(metric: UtilityMetric, items: &[EvalItem<'_>], random_p: f64, seed: u64) -> Result<Vec<ArmResult>> {
    if items.is_empty() {
        bail!("nothing to evaluate: no decisions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RANDOM_ARM_STREAM);
    let random: Vec<Mode> = items
        .iter()
        .map(|_| if rng.random::<f64>() < random_p { Mode::Think } else { Mode::NonThink })
        .collect();

    let fixed = |mode_of: &dyn Fn(usize, &EvalItem<'_>) -> Result<Mode>| -> Result<Vec<_>> {
        items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let m = mode_of(i, it)?;
                Ok((it.instance, it.record.outcome(m), m))
            })
            .collect()
    };
    let mut arms = vec![
        arm_result(Arm::NonThink, metric, &fixed(&|_, _| Ok(Mode::NonThink))?)?,
        arm_result(Arm::Think, metric, &fixed(&|_, _| Ok(Mode::Think))?)?,
        arm_result(Arm::Random, metric, &fixed(&|i, _| Ok(random[i]))?)?,
    ];
    if items.iter().all(|it| it.record.self_select.is_some()) {
        let chosen: Vec<_> = items
            .iter()
            .map(|it| {
                let o = it.record.self_select.as_ref().expect("checked");
                (it.instance, o, self_selected_mode(o))
            })
            .collect();
        arms.push(arm_result(Arm::SelfSelect, metric, &chosen)?);
    }
    arms.push(arm_result(Arm::Routed, metric, &fixed(&|_, it| Ok(it.routed))?)?);
    arms.push(arm_result(
        Arm::Oracle,
        metric,
        &fixed(&|_, it| oracle_mode(metric, it.instance, it.record))?,
    )?);
    Ok(arms)
}

pub fn deltas_vs(arms: &[ArmResult], baseline: Arm) -> Result<Vec<ArmDelta>> {
    let Some(base) = arms.iter().find(|a| a.arm == baseline) else {
        bail!("baseline arm `{baseline}` is not in the report");
    };
    Ok(arms
        .iter()
        .map(|a| ArmDelta {
            arm: a.arm,
            utility: relative_delta(a.utility, base.utility),
            ndcg10: relative_delta(a.ndcg10, base.ndcg10),
            mean_tokens: relative_delta(a.mean_tokens, base.mean_tokens),
            tradeoff: relative_delta(a.tradeoff, base.tradeoff),
        })
        .collect())
}

/// Structural assertions every evaluation must satisfy: the Oracle arm
/// takes the per-instance best utility, so no arm can beat it.
pub fn consistency_checks(arms: &[ArmResult]) -> Vec<Check> {
    let mut checks = Vec::new();
    let get = |arm| arms.iter().find(|a| a.arm == arm);
    if let Some(oracle) = get(Arm::Oracle) {
        for a in arms.iter().filter(|a| a.arm != Arm::Oracle) {
            let passed = oracle.utility >= a.utility - 1e-12;
            checks.push(Check {
                name: format!("oracle-dominates-{}", a.arm),
                passed,
                detail: format!("oracle {:.6} vs {} {:.6}", oracle.utility, a.arm, a.utility),
            });
        }
    }
    if let (Some(r), Some(n), Some(t)) = (get(Arm::Routed), get(Arm::NonThink), get(Arm::Think)) {
        let frac_ok = (0.0..=1.0).contains(&r.think_fraction);
        let pure = (r.think_fraction == 0.0 && r.mean_tokens == n.mean_tokens)
            || (r.think_fraction == 1.0 && r.mean_tokens == t.mean_tokens)
            || (r.think_fraction > 0.0 && r.think_fraction < 1.0);
        checks.push(Check {
            name: "routed-consistent-with-modes".into(),
            passed: frac_ok && pure,
            detail: format!(
                "routed think fraction {:.4}, tokens {:.2} (non-think {:.2}, think {:.2})",
                r.think_fraction, r.mean_tokens, n.mean_tokens, t.mean_tokens
            ),
        });
    }
    for c in checks.iter().filter(|c| !c.passed) {
        log::warn!("check {} failed: {}", c.name, c.detail);
    }
    checks
}

pub fn build_report(
    split: SplitName,
    metric: UtilityMetric,
    n_instances: usize,
    arms: Vec<ArmResult>,
    baseline: Arm,
) -> Result<EvalReport> {
    let deltas = deltas_vs(&arms, baseline)?;
    let checks = consistency_checks(&arms);
    Ok(EvalReport {
        split,
        metric,
        n_instances,
        arms,
        baseline,
        deltas,
        checks,
    })
}

/// Rebase an existing report on another baseline arm; deltas and checks are
/// recomputed from the per-arm means.
pub fn rebase(report: &EvalReport, baseline: Arm) -> Result<EvalReport> {
    build_report(report.split, report.metric, report.n_instances, report.arms.clone(), baseline)
}

pub fn format_delta(d: Option<f64>) -> String {
    match d {
        Some(v) => format!("{:+.2}%", 100.0 * v),
        None => "undefined".into(),
    }
}

pub fn render_markdown(report: &EvalReport, inputs: &[(&str, &str)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Routing evaluation\n");
    let _ = writeln!(
        s,
        "Split `{:?}`, {} instances, utility metric `{}`, baseline arm `{}`.\n",
        report.split, report.n_instances, report.metric, report.baseline
    );
    let _ = writeln!(s, "| arm | {} | NDCG@10 | Recall@10 | Top1 | tokens | think % | trade-off (x100) |", report.metric);
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for a in &report.arms {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} | {:.1} | {:.2} |",
            a.arm,
            a.utility,
            a.ndcg10,
            a.recall10,
            a.top1,
            a.mean_tokens,
            100.0 * a.think_fraction,
            100.0 * a.tradeoff
        );
    }
    let _ = writeln!(s, "\n## Relative change vs `{}`\n", report.baseline);
    let _ = writeln!(s, "| arm | {} | NDCG@10 | tokens | trade-off |", report.metric);
    let _ = writeln!(s, "|---|---|---|---|---|");
    for d in &report.deltas {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            d.arm,
            format_delta(d.utility),
            format_delta(d.ndcg10),
            format_delta(d.mean_tokens),
            format_delta(d.tradeoff)
        );
    }
    let _ = writeln!(s, "\n## Checks\n");
    for c in &report.checks {
        let _ = writeln!(s, "- [{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    if !inputs.is_empty() {
        let _ = writeln!(s, "\n## Inputs\n");
        for (name, hash) in inputs {
            let _ = writeln!(s, "- {name}: `{hash}`");
        }
    }
    s
}
