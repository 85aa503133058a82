use std::collections::HashSet;

use crate::error::{GatewayError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedRanking {
    pub ids: Vec<String>,
    /// Ids that were not candidates and were removed.
    pub dropped: Vec<String>,
}

/// Ranking from the last `<output>` block: the bracketed, comma-separated id
/// list after `Ranking result:` (or the first bracket list in the block).
/// Unknown ids are dropped and duplicates keep their first position. An
/// unterminated final block (truncated generation) is still read.
pub fn parse_ranking<'a>(raw: &str, valid_ids: impl IntoIterator<Item = &'a str>) -> Result<ParsedRanking> {
    let start = raw
        .rfind("<output>")
        .ok_or_else(|| GatewayError::Parse("no <output> block".into()))?;
    let block = &raw[start + "<output>".len()..];
    let block = block.find("</output>").map_or(block, |e| &block[..e]);
    let from = block.find("Ranking result:").unwrap_or(0);
    let open = block[from..]
        .find('[')
        .map(|i| from + i)
        .ok_or_else(|| GatewayError::Parse("no bracketed id list".into()))?;
    let close = block[open..]
        .find(']')
        .map(|i| open + i)
        .ok_or_else(|| GatewayError::Parse("unterminated id list".into()))?;

    let valid: HashSet<&str> = valid_ids.into_iter().collect();
    let mut seen = HashSet::new();
    let mut out = ParsedRanking {
        ids: Vec::new(),
        dropped: Vec::new(),
    };
    for tok in block[open + 1..close].split(',') {
        let id = tok.trim().trim_matches(|c| c == '"' || c == '\'' || c == '[' || c == ']').trim();
        if id.is_empty() {
            continue;
        }
        if !valid.contains(id) {
            out.dropped.push(id.to_string());
        } else if seen.insert(id) {
            out.ids.push(id.to_string());
        }
    }
    Ok(out)
}

/// Rough count used when the provider does not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
