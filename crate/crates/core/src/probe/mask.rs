use serde::{Deserialize, Serialize};

use super::ProbeLayout;

/// Dense boolean attention mask over `size` positions. `allows(i, j)` means
/// query position `i` may attend to key position `j`; positions are 1-based
/// to match [`ProbeLayout`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    size: usize,
    allow: Vec<bool>,
}

/// Run-length form: for every row, `[start, len]` runs of allowed columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskExport {
    pub size: usize,
    pub rows: Vec<Vec<[usize; 2]>>,
}

impl BlockMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        assert!(i >= 1 && j >= 1 && i <= self.size && j <= self.size, "mask position out of range");
        self.allow[(i - 1) * self.size + (j - 1)]
    }

    pub fn to_rle(&self) -> MaskExport {
        let mut rows = Vec::with_capacity(self.size);
        for i in 0..self.size {
            let row = &self.allow[i * self.size..(i + 1) * self.size];
            let mut runs = Vec::new();
            let mut j = 0;
            while j < self.size {
                if row[j] {
                    let start = j;
                    while j < self.size && row[j] {
                        j += 1;
                    }
                    runs.push([start + 1, j - start]);
                } else {
                    j += 1;
                }
            }
            rows.push(runs);
        }
        MaskExport { size: self.size, rows }
    }

    pub fn from_rle(export: &MaskExport) -> Option<Self> {
        let size = export.size;
        if export.rows.len() != size {
            return None;
        }
        let mut allow = vec![false; size * size];
        for (i, runs) in export.rows.iter().enumerate() {
            for &[start, len] in runs {
                if start == 0 || start + len - 1 > size {
                    return None;
                }
                for j in start - 1..start - 1 + len {
                    allow[i * size + j] = true;
                }
            }
        }
        Some(BlockMask { size, allow })
    }
}

/// Causal mask where every probe block sees the shared prefix and its own
/// earlier tokens, and nothing from any other block.
pub fn build_block_diagonal_mask(layout: &ProbeLayout) -> BlockMask {
    let size = layout.total_len();
    // block id per position; prefix positions get None
    let mut block_of: Vec<Option<usize>> = vec![None; size + 1];
    for (b, (_, blk)) in layout.blocks.iter().enumerate() {
        for slot in &mut block_of[blk.start..=blk.end] {
            *slot = Some(b);
        }
    }
    let mut allow = vec![false; size * size];
    for i in 1..=size {
        for j in 1..=i {
            if j <= layout.prefix_len || block_of[j] == block_of[i] {
                allow[(i - 1) * size + (j - 1)] = true;
            }
        }
    }
    BlockMask { size, allow }
}
