//! Ranking instances, the two inference modes' outcomes, listwise metrics
//! and the compute-aware advantage label.

mod advantage;
mod metrics;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use advantage::{advantage_from_parts, advantage_label, outcome_utility, tradeoff_score, AdvantageLabel, LabelFlag};
pub use metrics::{
    ndcg_at_k, pairwise_accuracy, recall_at_k, top1_agreement, utility, Score, ScoreFlag, UtilityMetric,
};

/// Relevance grade per item id. Items absent from the map have grade 0.
pub type Qrels = BTreeMap<String, u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "Rec")]
    Rec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub text: String,
}

/// One query (IR) or interaction history (Rec) with its candidate pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingInstance {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<String>>,
    pub candidates: Vec<Candidate>,
    pub qrels: Qrels,
    pub k: usize,
}

impl RankingInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("instance `{}`: {msg}", self.id)));
        if self.candidates.len() < 2 {
            return bad("needs at least 2 candidates".into());
        }
        if self.k == 0 || self.k > self.candidates.len() {
            return bad(format!("k = {} outside 1..={}", self.k, self.candidates.len()));
        }
        match (&self.context, &self.history) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("exactly one of `context` and `history` must be set".into()),
        }
        let mut seen = HashSet::with_capacity(self.candidates.len());
        for c in &self.candidates {
            if !seen.insert(c.item_id.as_str()) {
                return bad(format!("duplicate candidate id `{}`", c.item_id));
            }
        }
        if let Some(missing) = self.qrels.keys().find(|id| !seen.contains(id.as_str())) {
            return bad(format!("qrels id `{missing}` is not a candidate"));
        }
        Ok(())
    }

    pub fn candidate_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.item_id.as_str())
    }

    pub fn grade(&self, item: &str) -> u32 {
        self.qrels.get(item).copied().unwrap_or(0)
    }

    /// Ground-truth total order: descending grade, ties in candidate order.
    pub fn truth_order(&self) -> Vec<String> {
        let mut ids: Vec<(u32, usize, &str)> = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (self.grade(&c.item_id), i, c.item_id.as_str()))
            .collect();
        ids.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        ids.into_iter().map(|(_, _, id)| id.to_string()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub instance_id: String,
    pub order: Vec<String>,
}

impl RankedList {
    pub fn new(instance_id: impl Into<String>, order: Vec<String>) -> Self {
        RankedList {
            instance_id: instance_id.into(),
            order,
        }
    }

    pub fn validate(&self, instance: &RankingInstance) -> Result<()> {
        if self.instance_id != instance.id {
            return Err(Error::invalid(format!(
                "ranking for `{}` checked against instance `{}`",
                self.instance_id, instance.id
            )));
        }
        let pool: HashSet<&str> = instance.candidate_ids().collect();
        let mut seen = HashSet::new();
        for id in &self.order {
            if !pool.contains(id.as_str()) {
                return Err(Error::invalid(format!("ranked id `{id}` is not a candidate")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("ranked id `{id}` appears twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonThink,
    Think,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NonThink => "non_think",
            Mode::Think => "think",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeFlag {
    /// No ranking could be parsed from the generation; scored as utility 0.
    ParseFailure,
    /// The provider reported no usage; tokens were estimated from the text.
    TokenEstimate,
    /// Some returned ids were not candidates and were dropped.
    IdsDropped,
    /// The request failed after all retries.
    TransportError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub ranking: RankedList,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<OutcomeFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModeOutcome {
    pub fn new(ranking: RankedList, tokens: u64) -> Self {
        ModeOutcome {
            ranking,
            tokens,
            raw_text: None,
            flags: Vec::new(),
            error: None,
        }
    }

    pub fn has_flag(&self, flag: OutcomeFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// Usable for scoring: neither a parse failure nor a transport error.
    pub fn is_complete(&self) -> bool {
        !self.has_flag(OutcomeFlag::TransportError)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualModeRecord {
    pub instance_id: String,
    pub non_think: ModeOutcome,
    pub think: ModeOutcome,
    /// Optional third run where the model picks its own mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_select: Option<ModeOutcome>,
}

impl DualModeRecord {
    pub fn validate(&self) -> Result<()> {
        let outcomes = [Some(&self.non_think), Some(&self.think), self.self_select.as_ref()];
        for o in outcomes.into_iter().flatten() {
            if o.ranking.instance_id != self.instance_id {
                return Err(Error::invalid(format!(
                    "record `{}` holds a ranking for `{}`",
                    self.instance_id, o.ranking.instance_id
                )));
            }
        }
        Ok(())
    }

    pub fn outcome(&self, mode: Mode) -> &ModeOutcome {
        match mode {
            Mode::NonThink => &self.non_think,
            Mode::Think => &self.think,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.non_think.is_complete() && self.think.is_complete()
    }
}
