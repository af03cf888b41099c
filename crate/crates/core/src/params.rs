//! Named parameter collections with paired gradient buffers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Role of a parameter. Drives weight decay and whether it trains at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Attention,
    NormScale,
    NormShift,
    Slope,
    /// Running statistics: carried along, never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias | ParamKind::Attention)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: Matrix, kind: ParamKind) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad, kind }
    }
}

/// Ordered map from name to parameter. Iteration order is the sorted name
/// order, so everything derived from a `ParamSet` is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, kind: ParamKind) {
        self.entries.insert(name.into(), Param::new(value, kind));
    }

    /// Glorot-uniform `(fan_in, fan_out)` matrix.
    pub fn insert_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, kind: ParamKind, rng: &mut Rng) {
        self.insert(name, glorot_uniform(fan_in, fan_out, rng), kind);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.get(name).map(|p| &p.value).ok_or_else(|| Error::Structure(format!("missing parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self.get_mut(name).ok_or_else(|| Error::Structure(format!("missing parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.grad.fill(0.0));
    }

    /// Largest absolute gradient entry across all parameters.
    pub fn max_abs_grad(&self) -> f64 {
        self.entries.values().fold(0.0, |m, p| m.max(p.grad.max_abs()))
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds all entries of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Structure(format!("{} vs {} entries", self.len(), other.len())));
        }
        for ((a, pa), (b, pb)) in self.entries.iter().zip(&other.entries) {
            if a != b {
                return Err(Error::Structure(format!("{a} vs {b}")));
            }
            if pa.value.shape() != pb.value.shape() {
                return Err(Error::Structure(format!("{a}: shape {:?} vs {:?}", pa.value.shape(), pb.value.shape())));
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Param)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Param)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

/// Uniform `(-s, s)` with `s = √(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let s = libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-s..s))
}

/// Joins name segments with dots.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn glorot_bounds_and_variance() {
        let w = glorot_uniform(3, 3, &mut rng::seeded(0));
        assert!(w.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        // 10⁶ samples from (100, 100): variance s²/3 = 2/200.
        let mut r = rng::seeded(1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for _ in 0..100 {
            let w = glorot_uniform(100, 100, &mut r);
            for &v in w.as_slice() {
                sum += v;
                sum_sq += v * v;
                n += 1.0;
            }
        }
        let var = sum_sq / n - (sum / n) * (sum / n);
        assert!((var - 0.01).abs() < 0.01 * 0.05, "variance {var}");
    }

    #[test]
    fn structure_check_catches_renames_and_reshapes() {
        let mut a = ParamSet::new();
        a.insert("w", Matrix::zeros(2, 2), ParamKind::Weight);
        let mut b = a.clone();
        a.check_same_structure(&b).unwrap();
        b.insert("v", Matrix::zeros(1, 1), ParamKind::Bias);
        assert!(a.check_same_structure(&b).is_err());
        let mut c = ParamSet::new();
        c.insert("w", Matrix::zeros(2, 3), ParamKind::Weight);
        assert!(a.check_same_structure(&c).is_err());
    }
}
