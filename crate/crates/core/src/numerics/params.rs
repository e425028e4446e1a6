use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable arrays plus the set of names excluded from updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Schema(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.contains(name) {
            return Err(Error::Schema(format!("cannot freeze unknown parameter {name}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.entries.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Names paired with shapes; equal schemas are EMA-blendable.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn check_schema(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Schema(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Schema(format!(
                    "{na} {:?} vs {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self <- alpha * self + (1 - alpha) * other`, entry by entry.
    pub fn ema_blend(&mut self, other: &ParameterSet, alpha: f64) -> Result<()> {
        self.check_schema(other)?;
        for (t, s) in self.entries.values_mut().zip(other.entries.values()) {
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = alpha * *a + (1.0 - alpha) * b;
            }
        }
        Ok(())
    }

    /// Registers every entry on `tape`: frozen entries as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            let v = if self.is_frozen(name) {
                tape.constant(value.clone())?
            } else {
                tape.param(name, value)?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Registers every entry as a constant (no gradients at all).
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), tape.constant(value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// SHA-256 over names, shapes and value bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Adds every entry of `other`, keeping its frozen flags.
    pub fn merge(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, t) in &other.entries {
            self.insert(name.clone(), t.clone())?;
            if other.is_frozen(name) {
                self.frozen.insert(name.clone());
            }
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, names kept.
    pub fn select(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.entries.insert(name.clone(), t.clone());
            if self.is_frozen(name) {
                out.frozen.insert(name.clone());
            }
        }
        out
    }

    /// Drops every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|n, _| !n.starts_with(prefix));
        self.frozen.retain(|n| !n.starts_with(prefix));
    }

    /// Replaces the values of existing entries from `other` (same shapes).
    pub fn assign(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, t) in &other.entries {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Schema(format!("{name}: {:?} vs {:?}", dst.shape(), t.shape())));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.entries.insert(rest.to_string(), t.clone());
                if self.is_frozen(name) {
                    out.frozen.insert(rest.to_string());
                }
            }
        }
        out
    }
}

/// Tape handles for a [`ParameterSet`].
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[(&str, f64)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (n, v) in values {
            p.insert(*n, Tensor::full(&[2], *v)).unwrap();
        }
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = set(&[("a", 1.0)]);
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn ema_blend_evaluates_convex_combination() {
        let mut teacher = set(&[("w", 2.0)]);
        let student = set(&[("w", 1.0)]);
        teacher.ema_blend(&student, 0.99).unwrap();
        assert!((teacher.get("w").unwrap().data()[0] - 1.99).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_schema_mismatch() {
        let mut a = set(&[("w", 1.0)]);
        let b = set(&[("v", 1.0)]);
        assert!(matches!(a.ema_blend(&b, 0.5), Err(Error::Schema(_))));
        let mut c = ParameterSet::new();
        c.insert("w", Tensor::zeros(&[3])).unwrap();
        assert!(a.ema_blend(&c, 0.5).is_err());
    }

    #[test]
    fn frozen_entries_bind_as_constants() {
        let mut p = set(&[("a", 1.0), ("b", 2.0)]);
        p.freeze("a").unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape).unwrap();
        let loss = bound.get("a").unwrap().mul(bound.get("b").unwrap()).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get("a").is_none());
        assert_eq!(g.get("b").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn digest_changes_with_values() {
        let a = set(&[("w", 1.0)]);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.get_mut("w").unwrap().data_mut()[0] = 1.0 + 1e-12;
        assert_ne!(a.digest(), b.digest());
    }
}
