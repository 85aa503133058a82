//! Diagnostic checklist probing: suffix layout, the block-diagonal causal
//! mask that isolates probes from each other, Yes/No probability
//! extraction and direction-balanced aggregation.

mod mask;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mask::{build_block_diagonal_mask, BlockMask, MaskExport};

const DEFAULT_CHECKLIST: &str = include_str!("../../data/checklist.jsonl");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FavorsNonThink,
    FavorsThink,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::FavorsNonThink => Direction::FavorsThink,
            Direction::FavorsThink => Direction::FavorsNonThink,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistQuestion {
    pub qid: String,
    pub pair_id: String,
    pub direction: Direction,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeBlock {
    /// First token position of the block (1-based, after the prefix).
    pub start: usize,
    /// Last token position, inclusive.
    pub end: usize,
    /// Position whose next-token distribution is read (the `Answer:` anchor).
    pub answer_anchor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLayout {
    pub prefix_len: usize,
    pub blocks: Vec<(String, ProbeBlock)>,
}

impl ProbeLayout {
    pub fn total_len(&self) -> usize {
        self.blocks.last().map_or(self.prefix_len, |(_, b)| b.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFlag {
    /// Provider returned no logprobs; a sampled Yes/No was mapped to 1/0.
    HardProbe,
    /// Neither Yes nor No was among the returned tokens; p_yes set to 0.5.
    Uninformative,
    /// Only one of Yes/No was returned; the other was bounded by the
    /// smallest returned logprob.
    PartialLogprobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub instance_id: String,
    pub p_yes: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flags: BTreeMap<String, Vec<ProbeFlag>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultySignals {
    pub instance_id: String,
    pub signals: BTreeMap<String, f64>,
}

/// Pack question blocks consecutively after a shared prefix. Positions are
/// 1-based; each block's anchor is its last token.
pub fn build_probe_layout<S: AsRef<str>>(prefix_len: usize, questions: &[(S, usize)]) -> Result<ProbeLayout> {
    if prefix_len == 0 {
        return Err(Error::invalid("probe prefix must hold at least one token"));
    }
    let mut next = prefix_len + 1;
    let mut blocks = Vec::with_capacity(questions.len());
    for (qid, len) in questions {
        if *len < 2 {
            return Err(Error::invalid(format!(
                "question `{}` has {len} tokens; a block needs question text plus an anchor",
                qid.as_ref()
            )));
        }
        let end = next + len - 1;
        blocks.push((
            qid.as_ref().to_string(),
            ProbeBlock {
                start: next,
                end,
                answer_anchor: end,
            },
        ));
        next = end + 1;
    }
    Ok(ProbeLayout { prefix_len, blocks })
}

/// Two-way softmax over the Yes/No logits, computed with max-subtraction.
pub fn extract_yes_no(yes_logit: f64, no_logit: f64) -> Result<f64> {
    if !yes_logit.is_finite() || !no_logit.is_finite() {
        return Err(Error::NonFinite("yes/no logits".into()));
    }
    let m = yes_logit.max(no_logit);
    let ey = (yes_logit - m).exp();
    let en = (no_logit - m).exp();
    Ok(ey / (ey + en))
}

/// Signal per pair: `p_yes(favors_think) - p_yes(favors_non_think)`.
pub fn aggregate_pairs(result: &ProbeResult, checklist: &[ChecklistQuestion]) -> Result<DifficultySignals> {
    let mut pairs: BTreeMap<&str, [Option<&ChecklistQuestion>; 2]> = BTreeMap::new();
    for q in checklist {
        let slot = match q.direction {
            Direction::FavorsThink => 0,
            Direction::FavorsNonThink => 1,
        };
        pairs.entry(q.pair_id.as_str()).or_default()[slot] = Some(q);
    }
    let mut signals = BTreeMap::new();
    for (pair_id, [think, non]) in pairs {
        let p = |q: Option<&ChecklistQuestion>, dir: &str| -> Result<f64> {
            let q = q.ok_or_else(|| Error::MissingPairMember {
                pair_id: pair_id.to_string(),
                qid: format!("<{dir} question>"),
            })?;
            result.p_yes.get(&q.qid).copied().ok_or_else(|| Error::MissingPairMember {
                pair_id: pair_id.to_string(),
                qid: q.qid.clone(),
            })
        };
        signals.insert(pair_id.to_string(), p(think, "favors_think")? - p(non, "favors_non_think")?);
    }
    Ok(DifficultySignals {
        instance_id: result.instance_id.clone(),
        signals,
    })
}

/// Every pair id must map to exactly two questions with opposite directions,
/// and question ids must be unique.
pub fn validate_checklist(checklist: &[ChecklistQuestion]) -> Result<()> {
    let mut qids = HashSet::new();
    let mut pairs: BTreeMap<&str, Vec<Direction>> = BTreeMap::new();
    for q in checklist {
        if !qids.insert(q.qid.as_str()) {
            return Err(Error::invalid(format!("duplicate checklist qid `{}`", q.qid)));
        }
        pairs.entry(&q.pair_id).or_default().push(q.direction);
    }
    for (pair, dirs) in pairs {
        if dirs.len() != 2 || dirs[0] == dirs[1] {
            return Err(Error::invalid(format!(
                "checklist pair `{pair}` must hold one question per direction"
            )));
        }
    }
    Ok(())
}

pub fn parse_checklist(text: &str) -> Result<Vec<ChecklistQuestion>> {
    let qs = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "checklist".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_checklist(&qs)?;
    Ok(qs)
}

/// Five direction-balanced pairs: context clarity, candidate ambiguity,
/// relevance separability, history stability and answer confidence.
pub fn default_checklist() -> Vec<ChecklistQuestion> {
    parse_checklist(DEFAULT_CHECKLIST).expect("bundled checklist is valid")
}
