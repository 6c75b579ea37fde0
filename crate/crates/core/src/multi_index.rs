//! Multi-indices and the exact integer combinatorics of the ε-expansion.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest total order for which factorial products are evaluated.
pub const MAX_ORDER: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        Self(entries)
    }

    pub fn zero(len: usize) -> Self {
        Self(vec![0; len])
    }

    /// Unit vector `e_slot` of length `len`.
    pub fn unit(len: usize, slot: usize) -> Self {
        let mut e = vec![0; len];
        e[slot] = 1;
        Self(e)
    }

    /// `e_0 + … + e_{k-1}` padded to length `len`.
    pub fn leading_ones(len: usize, k: usize) -> Self {
        Self((0..len).map(|i| u32::from(i < k)).collect())
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn order(&self) -> usize {
        self.0.iter().map(|&e| e as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&e| e <= 1)
    }

    /// Slots with a nonzero entry.
    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &e)| e > 0).map(|(i, _)| i).collect()
    }

    /// Componentwise `self ≤ other`.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn checked_sub(&self, other: &MultiIndex) -> Option<MultiIndex> {
        if !other.le(self) {
            return None;
        }
        Some(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `α! = Π α_i!`
    pub fn factorial(&self) -> Result<u64> {
        guard(self.order())?;
        Ok(self.0.iter().map(|&e| factorial(e as usize)).product())
    }

    /// `ε^α = Π ε_i^{α_i}`
    pub fn power(&self, eps: &[f64]) -> f64 {
        self.0.iter().zip(eps).map(|(&a, &e)| e.powi(a as i32)).product()
    }

    /// Every β with `0 ≤ β ≤ self` componentwise, in lexicographic order.
    pub fn sub_indices(&self) -> Vec<MultiIndex> {
        let mut out = vec![Vec::with_capacity(self.0.len())];
        for &bound in &self.0 {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<u32>| {
                    (0..=bound).map(move |v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out.into_iter().map(MultiIndex).collect()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

fn guard(order: usize) -> Result<()> {
    if order > MAX_ORDER {
        Err(Error::Overflow(order))
    } else {
        Ok(())
    }
}

pub fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// `binom(α, β) = α! / (β! (α-β)!)`
pub fn binomial(alpha: &MultiIndex, beta: &MultiIndex) -> Result<u64> {
    guard(alpha.order())?;
    let rest = alpha
        .checked_sub(beta)
        .ok_or_else(|| Error::InvalidParameter(format!("{beta} is not below {alpha}")))?;
    Ok(alpha.factorial()? / (beta.factorial()? * rest.factorial()?))
}

/// `β! / (β_1! ⋯ β_ℓ!)` for parts summing to β.
pub fn multinomial(beta: &MultiIndex, parts: &[MultiIndex]) -> Result<u64> {
    guard(beta.order())?;
    let mut sum = MultiIndex::zero(beta.len());
    let mut denom = 1u64;
    for p in parts {
        if p.len() != beta.len() {
            return Err(Error::InvalidParameter("part length mismatch".into()));
        }
        sum = sum.add(p);
        denom *= p.factorial()?;
    }
    if sum != *beta {
        return Err(Error::InvalidParameter(format!("parts do not sum to {beta}")));
    }
    Ok(beta.factorial()? / denom)
}

/// Combined weight `binom(α,β) · multinom(β; parts)` with β = Σ parts.
pub fn multinomial_weight(alpha: &MultiIndex, beta: &MultiIndex, parts: &[MultiIndex]) -> Result<u64> {
    Ok(binomial(alpha, beta)? * multinomial(beta, parts)?)
}

/// All multi-indices of length `len` with total order exactly `order`,
/// in lexicographically decreasing order of the leading entry.
pub fn indices_of_order(len: usize, order: usize) -> Vec<MultiIndex> {
    fn rec(len: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
        if prefix.len() + 1 == len {
            prefix.push(left);
            out.push(MultiIndex(prefix.clone()));
            prefix.pop();
            return;
        }
        for v in (0..=left).rev() {
            prefix.push(v);
            rec(len, left - v, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if len == 0 {
        if order == 0 {
            out.push(MultiIndex(Vec::new()));
        }
        return out;
    }
    rec(len, order as u32, &mut Vec::with_capacity(len), &mut out);
    out
}

/// All multi-indices of length `len` with order at most `max_order`, graded by order.
pub fn indices_up_to(len: usize, max_order: usize) -> Vec<MultiIndex> {
    (0..=max_order).flat_map(|o| indices_of_order(len, o)).collect()
}

/// Ordered tuples `(β_1, …, β_ℓ)` of nonzero multi-indices whose sum β
/// satisfies `β ≤ α`, `β ≠ α`.
pub fn ordered_partial_tuples(alpha: &MultiIndex, ell: usize) -> Vec<Vec<MultiIndex>> {
    let nonzero: Vec<MultiIndex> = alpha.sub_indices().into_iter().filter(|b| !b.is_zero()).collect();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(ell);
    fn rec(
        alpha: &MultiIndex,
        candidates: &[MultiIndex],
        remaining: &MultiIndex,
        ell: usize,
        current: &mut Vec<MultiIndex>,
        out: &mut Vec<Vec<MultiIndex>>,
    ) {
        if current.len() == ell {
            if !remaining.is_zero() {
                out.push(current.clone());
            }
            return;
        }
        for c in candidates {
            if let Some(rest) = remaining.checked_sub(c) {
                current.push(c.clone());
                rec(alpha, candidates, &rest, ell, current, out);
                current.pop();
            }
        }
    }
    rec(alpha, &nonzero, alpha, ell, &mut current, &mut out);
    out
}

/// Ordered compositions of `total` into `parts` positive integers.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    fn rec(left: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            if left >= 1 {
                cur.push(left);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        for first in 1..left {
            if left - first >= parts - 1 {
                cur.push(first);
                rec(left - first, parts - 1, cur, out);
                cur.pop();
            }
        }
    }
    if parts > 0 {
        rec(total, parts, &mut Vec::new(), &mut out);
    }
    out
}

/// All permutations of `0..k` (Heap's algorithm).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..k).collect();
    let mut out = vec![items.clone()];
    let mut c = vec![0usize; k];
    let mut i = 1;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            out.push(items.clone());
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}
