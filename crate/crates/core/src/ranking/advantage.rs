use serde::{Deserialize, Serialize};

use super::{utility, DualModeRecord, ModeOutcome, OutcomeFlag, RankingInstance, UtilityMetric};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFlag {
    ParseFailureNonThink,
    ParseFailureThink,
}

/// Per-instance advantage of Think over Non-Think, net of token cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLabel {
    pub instance_id: String,
    pub advantage: f64,
    pub weight: f64,
    pub delta_utility: f64,
    pub delta_tokens: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<LabelFlag>,
}

/// `(u_think - u_non) - lambda * (t_think - t_non)`
pub fn advantage_from_parts(u_think: f64, u_non: f64, t_think: f64, t_non: f64, lambda: f64) -> f64 {
    (u_think - u_non) - lambda * (t_think - t_non)
}

/// Utility of one logged outcome; parse failures score 0.
pub fn outcome_utility(metric: UtilityMetric, instance: &RankingInstance, outcome: &ModeOutcome) -> Result<f64> {
    if outcome.has_flag(OutcomeFlag::ParseFailure) || outcome.has_flag(OutcomeFlag::TransportError) {
        return Ok(0.0);
    }
    utility(metric, instance, &outcome.ranking)
}

pub fn advantage_label(
    record: &DualModeRecord,
    instance: &RankingInstance,
    metric: UtilityMetric,
    lambda: f64,
) -> Result<AdvantageLabel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    if record.instance_id != instance.id {
        return Err(Error::invalid(format!(
            "record `{}` paired with instance `{}`",
            record.instance_id, instance.id
        )));
    }
    record.validate()?;
    let mut flags = Vec::new();
    if record.non_think.has_flag(OutcomeFlag::ParseFailure) {
        flags.push(LabelFlag::ParseFailureNonThink);
    }
    if record.think.has_flag(OutcomeFlag::ParseFailure) {
        flags.push(LabelFlag::ParseFailureThink);
    }
    let u_non = outcome_utility(metric, instance, &record.non_think)?;
    let u_think = outcome_utility(metric, instance, &record.think)?;
    let (t_non, t_think) = (record.non_think.tokens as f64, record.think.tokens as f64);
    Ok(AdvantageLabel {
        instance_id: record.instance_id.clone(),
        advantage: advantage_from_parts(u_think, u_non, t_think, t_non, lambda),
        weight: 1.0,
        delta_utility: u_think - u_non,
        delta_tokens: t_think - t_non,
        flags,
    })
}

/// Combined effectiveness/efficiency scalar: `ndcg@10 - 1e-4 * tokens`.
pub fn tradeoff_score(ndcg10: f64, tokens: f64) -> f64 {
    ndcg10 - 1e-4 * tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::{Candidate, RankedList, Task};

    fn inst() -> RankingInstance {
        RankingInstance {
            id: "u1".into(),
            task: Task::Rec,
            context: None,
            history: Some(vec!["h1".into(), "h2".into()]),
            candidates: ["a", "b", "c"]
                .iter()
                .map(|id| Candidate {
                    item_id: id.to_string(),
                    text: String::new(),
                })
                .collect(),
            qrels: [("a".to_string(), 1)].into_iter().collect(),
            k: 3,
        }
    }

    fn outcome(order: &[&str], tokens: u64) -> ModeOutcome {
        ModeOutcome::new(RankedList::new("u1", order.iter().map(|s| s.to_string()).collect()), tokens)
    }

    #[test]
    fn arithmetic_examples() {
        let a = advantage_from_parts(0.8, 0.6, 400.0, 50.0, 1e-4);
        assert!((a - 0.165).abs() < 1e-12);
        assert!((advantage_from_parts(0.8, 0.6, 400.0, 50.0, 0.0) - 0.2).abs() < 1e-12);
        assert!((advantage_from_parts(0.7, 0.7, 400.0, 50.0, 1e-4) + 0.035).abs() < 1e-12);
    }

    #[test]
    fn label_from_record() {
        let rec = DualModeRecord {
            instance_id: "u1".into(),
            non_think: outcome(&["b", "a", "c"], 50),
            think: outcome(&["a", "b", "c"], 400),
            self_select: None,
        };
        let l = advantage_label(&rec, &inst(), UtilityMetric::Ndcg(10), 1e-4).unwrap();
        let du = 1.0 - 1.0 / 3f64.log2();
        assert!((l.delta_utility - du).abs() < 1e-12);
        assert_eq!(l.delta_tokens, 350.0);
        assert!((l.advantage - (du - 0.035)).abs() < 1e-12);
        assert_eq!(l.weight, 1.0);
        assert!(l.flags.is_empty());
    }

    #[test]
    fn parse_failure_scores_zero() {
        let mut bad = outcome(&[], 400);
        bad.flags.push(OutcomeFlag::ParseFailure);
        let rec = DualModeRecord {
            instance_id: "u1".into(),
            non_think: outcome(&["a"], 50),
            think: bad,
            self_select: None,
        };
        let l = advantage_label(&rec, &inst(), UtilityMetric::Ndcg(10), 0.0).unwrap();
        assert_eq!(l.delta_utility, -1.0);
        assert_eq!(l.flags, vec![LabelFlag::ParseFailureThink]);
    }

    #[test]
    fn negative_lambda_rejected() {
        let rec = DualModeRecord {
            instance_id: "u1".into(),
            non_think: outcome(&["a"], 1),
            think: outcome(&["a"], 2),
            self_select: None,
        };
        assert!(advantage_label(&rec, &inst(), UtilityMetric::Ndcg(10), -1.0).is_err());
    }

    #[test]
    fn tradeoff_examples() {
        assert!((tradeoff_score(0.2552, 279.0) - 0.2273).abs() < 5e-4);
        assert!((tradeoff_score(0.2552, 279.0) * 100.0 - 22.73).abs() < 0.05);
        assert_eq!(tradeoff_score(0.0, 0.0), 0.0);
        assert!((tradeoff_score(0.9122, 265.0) - 0.8857).abs() < 5e-4);
    }
}
