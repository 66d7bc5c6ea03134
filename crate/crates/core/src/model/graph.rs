use std::ops::Range;

use crate::error::{Error, Result};

/// Causal frame graph: frame `i` attends to frame `j` iff `0 <= i - j <= v`.
///
/// The self-loop keeps every attention support nonempty, and no edge ever
/// points to a later frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameGraph {
    frames: usize,
    neighbors: usize,
}

impl FrameGraph {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn neighbors(&self) -> usize {
        self.neighbors
    }

    /// Frames attended to by frame `i`, always a contiguous run ending at `i`.
    pub fn support(&self, i: usize) -> Range<usize> {
        i.saturating_sub(self.neighbors)..i + 1
    }

    pub fn supports(&self) -> Vec<Range<usize>> {
        (0..self.frames).map(|i| self.support(i)).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.frames && j <= i && i - j <= self.neighbors
    }

    /// Directed pairs `(i, j)` meaning frame `i` attends to frame `j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.frames)
            .flat_map(|i| self.support(i).map(move |j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.frames).map(|i| self.support(i).len()).sum()
    }

    /// Dense 0/1 adjacency, `adj[i][j] == 1` for each edge.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        (0..self.frames)
            .map(|i| (0..self.frames).map(|j| self.has_edge(i, j) as u8).collect())
            .collect()
    }
}

pub fn build_causal_adjacency(frames: usize, neighbors: usize) -> Result<FrameGraph> {
    if frames == 0 {
        return Err(Error::input("frame graph needs at least one frame"));
    }
    if neighbors == 0 {
        return Err(Error::input("frame graph needs at least one temporal neighbor"));
    }
    Ok(FrameGraph { frames, neighbors })
}
