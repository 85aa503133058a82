use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Qrels, RankedList, RankingInstance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFlag {
    /// The qrels hold no positive grade; the metric is defined as 0.
    NoRelevant,
    /// Fewer than two comparable items; pairwise accuracy is defined as 1.
    Degenerate,
}

/// A metric value together with the reason it took a defined fallback value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub flag: Option<ScoreFlag>,
}

impl Score {
    fn plain(value: f64) -> Self {
        Score { value, flag: None }
    }

    fn flagged(value: f64, flag: ScoreFlag) -> Self {
        Score { value, flag: Some(flag) }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("metric depth k must be >= 1"))
    } else {
        Ok(())
    }
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(pos: usize) -> f64 {
    // pos is 1-based
    ((pos + 1) as f64).log2()
}

/// NDCG@k with exponential gain `2^rel - 1` and discount `log2(pos + 1)`.
pub fn ndcg_at_k(order: &[String], qrels: &Qrels, k: usize) -> Result<Score> {
    check_k(k)?;
    let mut ideal: Vec<u32> = qrels.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return Ok(Score::flagged(0.0, ScoreFlag::NoRelevant));
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| gain(qrels.get(id).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    Ok(Score::plain((dcg / idcg).min(1.0)))
}

/// Fraction of positively graded items that appear in the top k.
pub fn recall_at_k(order: &[String], qrels: &Qrels, k: usize) -> Result<Score> {
    check_k(k)?;
    let positives = qrels.values().filter(|&&g| g > 0).count();
    if positives == 0 {
        return Ok(Score::flagged(0.0, ScoreFlag::NoRelevant));
    }
    let hits = order
        .iter()
        .take(k)
        .filter(|id| qrels.get(*id).is_some_and(|&g| g > 0))
        .count();
    Ok(Score::plain(hits as f64 / positives as f64))
}

/// Whether the first ranked item carries the maximal grade. Any item tied at
/// the maximum counts.
pub fn top1_agreement(order: &[String], qrels: &Qrels) -> Result<bool> {
    let first = order.first().ok_or(Error::EmptyRanking)?;
    let best = qrels.values().copied().max().unwrap_or(0);
    Ok(qrels.get(first).copied().unwrap_or(0) == best)
}

/// Fraction of pairs of items common to both lists that are ordered the same
/// way in `pred` and in `truth`.
pub fn pairwise_accuracy(pred: &[String], truth: &[String]) -> Score {
    let pos: HashMap<&str, usize> = truth.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let ranks: Vec<usize> = pred.iter().filter_map(|id| pos.get(id.as_str()).copied()).collect();
    if ranks.len() < 2 {
        return Score::flagged(1.0, ScoreFlag::Degenerate);
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..ranks.len() {
        for j in i + 1..ranks.len() {
            total += 1;
            if ranks[i] < ranks[j] {
                agree += 1;
            }
        }
    }
    Score::plain(agree as f64 / total as f64)
}

/// Utility used for labeling and routing evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum UtilityMetric {
    Ndcg(usize),
    Recall(usize),
    Top1,
    PairwiseAccuracy,
}

impl Default for UtilityMetric {
    fn default() -> Self {
        UtilityMetric::Ndcg(10)
    }
}

impl fmt::Display for UtilityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityMetric::Ndcg(k) => write!(f, "ndcg@{k}"),
            UtilityMetric::Recall(k) => write!(f, "recall@{k}"),
            UtilityMetric::Top1 => f.write_str("top1"),
            UtilityMetric::PairwiseAccuracy => f.write_str("pwacc"),
        }
    }
}

impl FromStr for UtilityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let depth = |rest: &str| -> Result<usize> {
            let k: usize = rest
                .parse()
                .map_err(|_| Error::invalid(format!("bad metric depth in `{s}`")))?;
            check_k(k)?;
            Ok(k)
        };
        if let Some(rest) = s.strip_prefix("ndcg@") {
            Ok(UtilityMetric::Ndcg(depth(rest)?))
        } else if let Some(rest) = s.strip_prefix("recall@") {
            Ok(UtilityMetric::Recall(depth(rest)?))
        } else if s == "top1" {
            Ok(UtilityMetric::Top1)
        } else if s == "pwacc" {
            Ok(UtilityMetric::PairwiseAccuracy)
        } else {
            Err(Error::invalid(format!("unknown utility metric `{s}`")))
        }
    }
}

impl TryFrom<String> for UtilityMetric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<UtilityMetric> for String {
    fn from(m: UtilityMetric) -> String {
        m.to_string()
    }
}

/// Evaluate `metric` for one ranking. An empty ranking scores 0 for every
/// metric except pairwise accuracy, which scores 0 as well rather than the
/// degenerate 1.
pub fn utility(metric: UtilityMetric, instance: &RankingInstance, ranking: &RankedList) -> Result<f64> {
    let order = &ranking.order;
    Ok(match metric {
        UtilityMetric::Ndcg(k) => ndcg_at_k(order, &instance.qrels, k)?.value,
        UtilityMetric::Recall(k) => recall_at_k(order, &instance.qrels, k)?.value,
        UtilityMetric::Top1 => match top1_agreement(order, &instance.qrels) {
            Ok(hit) => f64::from(u8::from(hit)),
            Err(Error::EmptyRanking) => 0.0,
            Err(e) => return Err(e),
        },
        UtilityMetric::PairwiseAccuracy if order.is_empty() => 0.0,
        UtilityMetric::PairwiseAccuracy => pairwise_accuracy(order, &instance.truth_order()).value,
    })
}
