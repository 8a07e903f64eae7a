//! Weighted empirical distributions over non-conformity scores.
//!
//! Every conformal method in the crate reduces to a step-function quantile of
//! a finitely supported measure on `[0, 1]`. Atoms are kept sorted by value,
//! duplicates are merged by summing their weights and zero-weight atoms are
//! dropped, so the CDF is a plain left-to-right accumulation.

use crate::error::{invalid, Result};

/// Tolerance under which a total weight counts as 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Slack used when comparing a cumulative weight against a quantile level.
///
/// Summing `N` equal weights of `1/N` rarely lands exactly on `k/N`; without
/// this slack a level sitting on such a boundary would skip to the next atom.
pub const CDF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub value: f64,
    pub weight: f64,
}

/// Finitely supported measure on `[0, 1]` with atoms sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEmpiricalDistribution {
    atoms: Vec<Atom>,
    normalized: bool,
}

impl WeightedEmpiricalDistribution {
    /// Builds a distribution from `(value, weight)` pairs.
    ///
    /// Values must lie in `[0, 1]` and weights must be finite and
    /// non-negative. At least one weight must be positive.
    pub fn new(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms = Vec::new();
        for (value, weight) in pairs {
            if !(0.0..=1.0).contains(&value) {
                return Err(invalid(format!("atom value {value} outside [0, 1]")));
            }
            if !weight.is_finite() || weight < 0.0 {
                return Err(invalid(format!(
                    "atom weight {weight} is not a finite non-negative number"
                )));
            }
            if weight > 0.0 {
                atoms.push(Atom { value, weight });
            }
        }
        if atoms.is_empty() {
            return Err(invalid("distribution has no atom with positive weight"));
        }
        atoms.sort_by(|a, b| a.value.total_cmp(&b.value));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for atom in atoms {
            match merged.last_mut() {
                Some(last) if last.value == atom.value => last.weight += atom.weight,
                _ => merged.push(atom),
            }
        }
        let total: f64 = merged.iter().map(|a| a.weight).sum();
        Ok(Self {
            atoms: merged,
            normalized: (total - 1.0).abs() <= NORMALIZATION_TOL,
        })
    }

    pub fn point_mass(value: f64) -> Result<Self> {
        Self::new([(value, 1.0)])
    }

    /// Equal-weight distribution over `scores`, optionally with the sentinel
    /// atom at 1 that conformal calibration appends for the test point.
    pub fn from_scores_uniform(scores: &[f64], append_one: bool) -> Result<Self> {
        if scores.is_empty() {
            return Err(invalid("cannot build a distribution from an empty score list"));
        }
        let n = scores.len() + usize::from(append_one);
        let w = 1.0 / n as f64;
        let sentinel = append_one.then_some((1.0, w));
        Self::new(scores.iter().map(|&s| (s, w)).chain(sentinel))
    }

    /// Mixture `Σ c_j · d_j` of the given components.
    pub fn mixture<'a>(components: impl IntoIterator<Item = (f64, &'a Self)>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (coef, dist) in components {
            if !coef.is_finite() || coef < 0.0 {
                return Err(invalid(format!(
                    "mixture coefficient {coef} is not a finite non-negative number"
                )));
            }
            pairs.extend(dist.atoms.iter().map(|a| (a.value, coef * a.weight)));
        }
        Self::new(pairs)
    }

    /// Rescales the weights to sum to one.
    pub fn normalize(&self) -> Self {
        let total = self.total_weight();
        Self {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    value: a.value,
                    weight: a.weight / total,
                })
                .collect(),
            normalized: true,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.atoms[0].value
    }

    pub fn max_value(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].value
    }

    /// `F(z) = Σ_{v ≤ z} w`.
    pub fn cdf(&self, z: f64) -> f64 {
        self.atoms.iter().take_while(|a| a.value <= z).map(|a| a.weight).sum()
    }

    /// `inf { z : F(z) ≥ beta }`.
    pub fn quantile(&self, beta: f64) -> Result<f64> {
        if !self.normalized {
            return Err(invalid("quantile requires a normalized distribution"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid(format!("quantile level {beta} outside [0, 1]")));
        }
        let mut cum = 0.0;
        for atom in &self.atoms {
            cum += atom.weight;
            if cum >= beta - CDF_TOL {
                return Ok(atom.value);
            }
        }
        Ok(self.max_value())
    }

    /// True when `level` lies within `tol` of an interior cumulative weight,
    /// i.e. the pinball loss at that level has a flat set of minimizers.
    pub fn level_is_degenerate(&self, level: f64, tol: f64) -> bool {
        let mut cum = 0.0;
        let interior = &self.atoms[..self.atoms.len() - 1];
        interior.iter().any(|a| {
            cum += a.weight;
            (cum - level).abs() <= tol
        })
    }
}
