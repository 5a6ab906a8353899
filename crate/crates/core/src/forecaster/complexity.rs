//! Parameter and multiply-add counts of the attention variants.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    DotProduct,
    GlobalLearned,
    BranchMix,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [Self::DotProduct, Self::GlobalLearned, Self::BranchMix];

    pub fn label(self) -> &'static str {
        match self {
            Self::DotProduct => "scaled dot-product",
            Self::GlobalLearned => "global-learned",
            Self::BranchMix => "branch-wise mixing",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: u128,
    pub mult_adds: u128,
}

/// Closed-form counts per attention type:
///
/// | type | parameters | mult-adds |
/// |---|---|---|
/// | dot-product | 4d² | 4nd² + 2n²d |
/// | global-learned | m²h + 2d² | 2nd² + n²d |
/// | branch mix | 4d₁² + m²h + 2d₂² | 4nd₁² + n²d₁ + 2nd₂² + n²d |
///
/// The branch-mix row carries no term for the convolution branch.
pub fn complexity_report(kind: AttentionKind, n: u64, d: u64, h: u64, m: u64, d1: u64, d2: u64) -> Complexity {
    let (n, d, h, m, d1, d2) = (n as u128, d as u128, h as u128, m as u128, d1 as u128, d2 as u128);
    match kind {
        AttentionKind::DotProduct => Complexity {
            params: 4 * d * d,
            mult_adds: 4 * n * d * d + 2 * n * n * d,
        },
        AttentionKind::GlobalLearned => Complexity {
            params: m * m * h + 2 * d * d,
            mult_adds: 2 * n * d * d + n * n * d,
        },
        AttentionKind::BranchMix => Complexity {
            params: 4 * d1 * d1 + m * m * h + 2 * d2 * d2,
            mult_adds: 4 * n * d1 * d1 + n * n * d1 + 2 * n * d2 * d2 + n * n * d,
        },
    }
}
