use serde::{Deserialize, Serialize};

/// One maskable parameter tensor inside the flat mask vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

/// How the flat mask vector of length `d` splits into per-layer segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskLayout {
    pub arch: String,
    pub segments: Vec<Segment>,
}

impl MaskLayout {
    /// A single-segment layout over `d` entries, for tests and toy problems.
    pub fn flat(d: usize) -> Self {
        MaskLayout {
            arch: "flat".into(),
            segments: vec![Segment {
                name: "all".into(),
                len: d,
            }],
        }
    }

    pub fn d(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// `(start, end)` flat ranges of each segment.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let r = (start, start + s.len);
                start += s.len;
                r
            })
            .collect()
    }

    /// Splits a flat vector into per-segment slices.
    pub fn split<'a, T>(&self, flat: &'a [T]) -> Vec<&'a [T]> {
        self.ranges().into_iter().map(|(a, b)| &flat[a..b]).collect()
    }
}
