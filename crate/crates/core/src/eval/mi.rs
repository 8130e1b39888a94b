//! Exact information quantities on small discrete joints of a pattern `c`
//! and two sources `s1`, `s2` with mixture `z = s1 + s2`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ALPHABET: usize = 16;

/// `p[c][s1][s2]` stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub nc: usize,
    pub ns1: usize,
    pub ns2: usize,
    pub p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nc: usize, ns1: usize, ns2: usize, p: Vec<f64>) -> Result<Self> {
        for n in [nc, ns1, ns2] {
            if n == 0 || n > MAX_ALPHABET {
                return Err(Error::invalid(format!("alphabet sizes must lie in 1..={MAX_ALPHABET}")));
            }
        }
        if p.len() != nc * ns1 * ns2 {
            return Err(Error::Shape(format!("table has {} cells, expected {}", p.len(), nc * ns1 * ns2)));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("joint table must be non-negative and sum to 1 (sums to {total})")));
        }
        Ok(Self { nc, ns1, ns2, p })
    }

    /// `p(c) p(s1 | c) p(s2 | c)`, which satisfies the premise by construction.
    pub fn from_conditionals(pc: &[f64], ps1: &[Vec<f64>], ps2: &[Vec<f64>]) -> Result<Self> {
        let (nc, ns1, ns2) = (pc.len(), ps1.first().map_or(0, Vec::len), ps2.first().map_or(0, Vec::len));
        let mut p = Vec::with_capacity(nc * ns1 * ns2);
        for c in 0..nc {
            for a in 0..ns1 {
                for b in 0..ns2 {
                    p.push(pc[c] * ps1[c][a] * ps2[c][b]);
                }
            }
        }
        Self::new(nc, ns1, ns2, p)
    }

    /// A random joint with `s1` and `s2` independent given `c`.
    pub fn random_premise(rng: &mut impl Rng, max_alphabet: usize) -> Result<Self> {
        let m = max_alphabet.clamp(1, MAX_ALPHABET);
        let (nc, ns1, ns2) = (rng.random_range(1..=m), rng.random_range(1..=m), rng.random_range(1..=m));
        let mut simplex = |n: usize| -> Vec<f64> {
            // Sparse draws exercise deterministic and degenerate cases too.
            let v: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { -rng.random::<f64>().max(1e-300).ln() })
                .collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                let mut one = vec![0.0; n];
                one[0] = 1.0;
                one
            } else {
                v.into_iter().map(|x| x / s).collect()
            }
        };
        let pc = simplex(nc);
        let ps1: Vec<Vec<f64>> = (0..nc).map(|_| simplex(ns1)).collect();
        let ps2: Vec<Vec<f64>> = (0..nc).map(|_| simplex(ns2)).collect();
        let mut joint = Self::from_conditionals(&pc, &ps1, &ps2)?;
        // Renormalize away rounding so the table sums to one.
        let total: f64 = joint.p.iter().sum();
        joint.p.iter_mut().for_each(|x| *x /= total);
        Ok(joint)
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.nc).flat_map(move |c| {
            (0..self.ns1).flat_map(move |a| (0..self.ns2).map(move |b| (c, a, b, self.p[(c * self.ns1 + a) * self.ns2 + b])))
        })
    }

    /// Entropy in bits of the variable `key(c, s1, s2)`.
    pub fn entropy_of<K: Ord>(&self, key: impl Fn(usize, usize, usize) -> K) -> f64 {
        let mut dist: BTreeMap<K, f64> = BTreeMap::new();
        for (c, a, b, p) in self.cells() {
            *dist.entry(key(c, a, b)).or_insert(0.0) += p;
        }
        dist.values().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
    }

    /// Largest `|p(c, s1, s2) - p(c) p(s1 | c) p(s2 | c)|`.
    pub fn premise_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.nc {
            let idx = |a: usize, b: usize| (c * self.ns1 + a) * self.ns2 + b;
            let pc: f64 = (0..self.ns1).flat_map(|a| (0..self.ns2).map(move |b| (a, b))).map(|(a, b)| self.p[idx(a, b)]).sum();
            if pc == 0.0 {
                continue;
            }
            for a in 0..self.ns1 {
                let pa: f64 = (0..self.ns2).map(|b| self.p[idx(a, b)]).sum();
                for b in 0..self.ns2 {
                    let pb: f64 = (0..self.ns1).map(|x| self.p[idx(x, b)]).sum();
                    worst = worst.max((self.p[idx(a, b)] - pa * pb / pc).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    /// `I(c; s1)`
    pub i_c_s: f64,
    /// `I(c; cbar, s1)`
    pub i_c_cbar_s: f64,
    /// `I(c; cbar | s1)`
    pub i_c_cbar_given_s: f64,
    /// `i_c_s - (i_c_cbar_s - i_c_cbar_given_s)`; zero up to rounding.
    pub residual: f64,
    /// `I(c; cbar) - H(cbar | s1)`, the distillation lower bound on `I(c; s1)`.
    pub distillation_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    /// `I(c; s1)` in bits.
    pub lhs: f64,
    /// `I(c; z) + H(s1) - H(z)` in bits.
    pub rhs: f64,
    pub holds: bool,
    pub premise_violation: f64,
    pub chain: ChainReport,
}

/// Tolerance for comparing the two sides of the bound.
pub const BOUND_TOL: f64 = 1e-12;

/// Evaluates the mixture bound `I(c; s1) >= I(c; z) + H(s1) - H(z)` and the
/// chain-rule decomposition for the context map `cbar(c, s1, s2)`.
pub fn mi_bound_check(joint: &DiscreteJoint, cbar: impl Fn(usize, usize, usize) -> usize) -> Result<MiReport> {
    let j = DiscreteJoint::new(joint.nc, joint.ns1, joint.ns2, joint.p.clone())?;
    let h_c = j.entropy_of(|c, _, _| c);
    let h_s = j.entropy_of(|_, a, _| a);
    let h_z = j.entropy_of(|_, a, b| a + b);
    let h_cs = j.entropy_of(|c, a, _| (c, a));
    let h_cz = j.entropy_of(|c, a, b| (c, a + b));
    let lhs = h_c + h_s - h_cs;
    let i_cz = h_c + h_z - h_cz;
    let rhs = i_cz + h_s - h_z;

    let h_k = j.entropy_of(|c, a, b| cbar(c, a, b));
    let h_ck = j.entropy_of(|c, a, b| (c, cbar(c, a, b)));
    let h_ks = j.entropy_of(|c, a, b| (cbar(c, a, b), a));
    let h_cks = j.entropy_of(|c, a, b| (c, cbar(c, a, b), a));
    let i_c_cbar_s = h_c + h_ks - h_cks;
    let i_c_cbar_given_s = h_cs + h_ks - h_cks - h_s;
    let i_c_cbar = h_c + h_k - h_ck;
    let chain = ChainReport {
        i_c_s: lhs,
        i_c_cbar_s,
        i_c_cbar_given_s,
        residual: lhs - (i_c_cbar_s - i_c_cbar_given_s),
        distillation_bound: i_c_cbar - (h_ks - h_s),
    };
    Ok(MiReport {
        lhs,
        rhs,
        holds: lhs >= rhs - BOUND_TOL,
        premise_violation: j.premise_violation(),
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copied_bit_example() {
        // c uniform, s1 = c, s2 an independent fair bit.
        let mut p = vec![0.0; 8];
        for c in 0..2 {
            for b in 0..2 {
                p[(c * 2 + c) * 2 + b] = 0.25;
            }
        }
        let j = DiscreteJoint::new(2, 2, 2, p).unwrap();
        let r = mi_bound_check(&j, |c, _, _| c).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-12);
        assert!(r.rhs.abs() < 1e-12);
        assert!(r.holds);
        assert!(r.chain.residual.abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(DiscreteJoint::new(1, 1, 2, vec![0.5, 0.6]).is_err());
    }
}
