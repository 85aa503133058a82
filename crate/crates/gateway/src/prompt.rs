use std::fmt::Write;

use reasonroute_core::ranking::{RankingInstance, Task};
use serde::{Deserialize, Serialize};

/// How the generation is started. The prompt text is identical for every
/// mode; only the assistant prefill differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    NonThink,
    Think,
    SelfSelect,
}

impl RequestMode {
    pub fn prefix(self) -> Option<&'static str> {
        match self {
            RequestMode::NonThink => Some("<output>"),
            RequestMode::Think => Some("<thought>"),
            RequestMode::SelfSelect => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub prompt: String,
    pub mode_prefix: Option<&'static str>,
}

impl PromptBundle {
    pub fn new(instance: &RankingInstance, mode: RequestMode) -> Self {
        PromptBundle {
            prompt: render_prompt(instance),
            mode_prefix: mode.prefix(),
        }
    }
}

fn task_description(task: Task, n: usize) -> String {
    match task {
        Task::Ir => format!(
            "You are a ranking assistant. Rank the {n} candidate passages below by how well they answer the query, most relevant first."
        ),
        Task::Rec => format!(
            "You are a ranking assistant. Rank the {n} candidate items below by how likely the user is to interact with them next, given the interaction history, most likely first."
        ),
    }
}

/// Candidate lines look like `[id] text`, which the stub backend relies on.
pub fn render_prompt(instance: &RankingInstance) -> String {
    let n = instance.candidates.len();
    let mut s = task_description(instance.task, n);
    s.push_str("\n\n");
    if let Some(q) = &instance.context {
        let _ = writeln!(s, "Query: {q}");
    }
    if let Some(h) = &instance.history {
        s.push_str("Interaction history (oldest first):\n");
        for item in h {
            let _ = writeln!(s, "- {item}");
        }
    }
    s.push_str("\nCandidates:\n");
    for c in &instance.candidates {
        let _ = writeln!(s, "[{}] {}", c.item_id, c.text);
    }
    s.push_str(
        "\nWhen generating the ranking:\n\
         - Include every candidate id exactly once and no other ids.\n\
         \n\
         Decide from how hard this ranking is whether to reason first.\n\
         - For an easy, clear-cut case, give the result directly.\n\
         - For an ambiguous or hard case, reason first and put the reasoning inside <thought> </thought> tags.\n\
         \n\
         The final answer must use exactly this format:\n\
         <output>Ranking result: [ITEM IDS IN ORDER, SEPARATED BY COMMA]</output>\n",
    );
    s
}

/// Checklist question appended to the shared prompt, ending at the answer
/// anchor.
pub fn render_probe(instance_prompt: &str, question: &str) -> String {
    format!("{instance_prompt}\nBefore ranking, answer this question about the task with Yes or No.\nQuestion: {question}\nAnswer:")
}

/// Candidate ids listed in a prompt rendered by [`render_prompt`].
pub fn candidate_ids_in_prompt(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.find("\nCandidates:\n") else {
        return Vec::new();
    };
    prompt[start + "\nCandidates:\n".len()..]
        .lines()
        .map_while(|l| {
            let rest = l.strip_prefix('[')?;
            let end = rest.find(']')?;
            Some(rest[..end].to_string())
        })
        .collect()
}
