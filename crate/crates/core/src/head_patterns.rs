//! Attention-mass decomposition and threshold labeling of heads.

use serde::{Deserialize, Serialize};

use crate::block::AttentionMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassProfile {
    pub sink: f64,
    pub diag: f64,
    pub lower1: f64,
    pub other: f64,
}

/// Mass fractions over query rows. Column 0 counts as sink; diagonal and
/// first sub-diagonal entries count only when they are not column 0, so the
/// four parts are disjoint and sum to 1.
///
/// With `exclude_bos_row` the BOS query (row 0), which can only attend to
/// itself, is left out.
pub fn mass_profile(a: &AttentionMap, exclude_bos_row: bool) -> MassProfile {
    let n = a.len();
    let start = usize::from(exclude_bos_row);
    let rows = n.saturating_sub(start);
    if rows == 0 {
        return MassProfile {
            sink: 0.0,
            diag: 0.0,
            lower1: 0.0,
            other: 0.0,
        };
    }
    let (mut sink, mut diag, mut lower1, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in start..n {
        sink += a.0[(i, 0)];
        if i >= 1 {
            diag += a.0[(i, i)];
        }
        if i >= 2 {
            lower1 += a.0[(i, i - 1)];
        }
        total += (0..=i).map(|j| a.0[(i, j)]).sum::<f64>();
    }
    let r = rows as f64;
    MassProfile {
        sink: sink / r,
        diag: diag / r,
        lower1: lower1 / r,
        other: ((total - sink - diag - lower1) / r).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub sink: f64,
    pub diag: f64,
    pub dual_joint: f64,
    pub dual_lower_frac: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            sink: 0.40,
            diag: 0.40,
            dual_joint: 0.60,
            dual_lower_frac: 0.10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Sink,
    Diagonal,
    SinkLowerDiag,
    Other,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Sink => "sink",
            Pattern::Diagonal => "diagonal",
            Pattern::SinkLowerDiag => "sink+lower-diagonal",
            Pattern::Other => "other",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLabel {
    pub label: Pattern,
    pub profile: MassProfile,
    pub thresholds: Thresholds,
}

/// Dual pattern first, then sink, then diagonal.
pub fn classify(profile: MassProfile, th: Thresholds) -> HeadLabel {
    let joint = profile.sink + profile.lower1;
    let label = if joint >= th.dual_joint && profile.lower1 >= th.dual_lower_frac * joint {
        Pattern::SinkLowerDiag
    } else if profile.sink >= th.sink {
        Pattern::Sink
    } else if profile.diag >= th.diag {
        Pattern::Diagonal
    } else {
        Pattern::Other
    };
    HeadLabel {
        label,
        profile,
        thresholds: th,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub layer: usize,
    pub head: usize,
    pub sequence: usize,
    pub label: HeadLabel,
}

/// Fraction of rows carrying each label, in the order sink, diagonal,
/// sink+lower-diagonal, other.
pub fn pooled_fractions(rows: &[CensusRow]) -> [(Pattern, f64); 4] {
    let n = rows.len().max(1) as f64;
    let count = |p: Pattern| rows.iter().filter(|r| r.label.label == p).count() as f64 / n;
    [
        (Pattern::Sink, count(Pattern::Sink)),
        (Pattern::Diagonal, count(Pattern::Diagonal)),
        (Pattern::SinkLowerDiag, count(Pattern::SinkLowerDiag)),
        (Pattern::Other, count(Pattern::Other)),
    ]
}
