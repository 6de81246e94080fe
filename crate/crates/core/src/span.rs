use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Contiguous token range, 1-based and inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start >= 1 && start <= end, "invalid span ({start},{end})");
        Span { start, end }
    }

    pub fn singleton(pos: usize) -> Self {
        Span::new(pos, pos)
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based index range of the covered tokens.
    pub fn indices(&self) -> Range<usize> {
        self.start - 1..self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlap(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo <= hi {
            hi - lo + 1
        } else {
            0
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

/// True when `spans` are ordered, disjoint and cover exactly `1..=n`.
pub fn is_partition(spans: &[Span], n: usize) -> bool {
    let mut next = 1;
    for s in spans {
        if s.start != next {
            return false;
        }
        next = s.end + 1;
    }
    next == n + 1
}
