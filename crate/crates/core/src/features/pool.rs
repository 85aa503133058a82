use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::EmbeddingDump;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

/// Segment index sets over a `T x d` matrix of last-layer token states.
/// Indices are 0-based row numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Array2<f64>,
    /// One index set for an IR query, one per history item for Rec.
    pub context: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
}

/// Pool the rows of `states` selected by `segment`.
pub fn pool_segment(states: ArrayView2<'_, f64>, segment: &[usize], pooling: Pooling) -> Result<Vec<f64>> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    let rows = states.nrows();
    let mut acc = vec![0.0; states.ncols()];
    for &i in segment {
        if i >= rows {
            return Err(Error::IndexOutOfRange { index: i, len: rows });
        }
        for (a, v) in acc.iter_mut().zip(states.row(i)) {
            *a += v;
        }
    }
    match pooling {
        Pooling::Mean => {
            let n = segment.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
    }
    Ok(acc)
}

impl HiddenStates {
    pub fn validate(&self) -> Result<()> {
        let rows = self.states.nrows();
        let mut owner = vec![false; rows];
        for seg in &self.candidates {
            for &i in seg {
                if i >= rows {
                    return Err(Error::IndexOutOfRange { index: i, len: rows });
                }
                if owner[i] {
                    return Err(Error::invalid(format!("token {i} belongs to two candidate segments")));
                }
                owner[i] = true;
            }
        }
        for seg in &self.context {
            if let Some(&i) = seg.iter().find(|&&i| i >= rows) {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
        }
        Ok(())
    }

    /// Pool every segment into an [`EmbeddingDump`]. A single context segment
    /// becomes an IR query embedding; several become Rec history embeddings.
    pub fn to_dump(&self, instance_id: &str, prompt_tokens: u64, pooling: Pooling) -> Result<EmbeddingDump> {
        self.validate()?;
        let view = self.states.view();
        let pool = |seg: &Vec<usize>| pool_segment(view, seg, pooling);
        let candidates = self.candidates.iter().map(pool).collect::<Result<Vec<_>>>()?;
        let mut context_vecs = self.context.iter().map(pool).collect::<Result<Vec<_>>>()?;
        let (context, history) = if context_vecs.len() == 1 {
            (context_vecs.pop(), None)
        } else {
            (None, Some(context_vecs))
        };
        Ok(EmbeddingDump {
            instance_id: instance_id.to_string(),
            dim: self.states.ncols(),
            context,
            history,
            candidates,
            prompt_tokens,
        })
    }
}
