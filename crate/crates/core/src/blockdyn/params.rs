use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::num::Real;

use super::ModelError;

pub const DEFAULT_LOWER_FACTOR: f64 = 0.5;
pub const DEFAULT_UPPER_FACTOR: f64 = 2.0;

/// Concrete values for a subset of parameters, keyed by name.
pub type Assignment<T> = BTreeMap<String, T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamEntry<T> {
    pub name: String,
    pub base_value: T,
    pub lower_factor: T,
    pub upper_factor: T,
    pub unit: String,
}

impl<T: Real> ParamEntry<T> {
    pub fn lower_bound(&self) -> T {
        self.lower_factor * self.base_value
    }

    pub fn upper_bound(&self) -> T {
        self.upper_factor * self.base_value
    }
}

/// Ordered, uniquely named model parameters with their perturbation ranges.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParameterSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Appends a parameter with the default 50%..200% range.
    pub fn push(&mut self, name: &str, base_value: T, unit: &str) -> Result<(), ModelError> {
        self.push_with_factors(
            name,
            base_value,
            T::lit(DEFAULT_LOWER_FACTOR),
            T::lit(DEFAULT_UPPER_FACTOR),
            unit,
        )
    }

    pub fn push_with_factors(
        &mut self,
        name: &str,
        base_value: T,
        lower_factor: T,
        upper_factor: T,
        unit: &str,
    ) -> Result<(), ModelError> {
        if self.get(name).is_some() {
            return Err(ModelError::DuplicateParameter(name.to_string()));
        }
        let entry = ParamEntry {
            name: name.to_string(),
            base_value,
            lower_factor,
            upper_factor,
            unit: unit.to_string(),
        };
        validate_entry(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn value(&self, name: &str) -> Result<T, ModelError> {
        self.get(name)
            .map(|e| e.base_value)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    /// Changes the base value of an existing parameter.
    pub fn set_value(&mut self, name: &str, value: T) -> Result<(), ModelError> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        if !value.is_finite() {
            return Err(ModelError::NonFiniteParameter(name.to_string()));
        }
        entry.base_value = value;
        Ok(())
    }

    pub fn set_factors(&mut self, name: &str, lower: T, upper: T) -> Result<(), ModelError> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        let mut updated = entry.clone();
        updated.lower_factor = lower;
        updated.upper_factor = upper;
        validate_entry(&updated)?;
        *entry = updated;
        Ok(())
    }

    /// Copy of this set with the assigned values substituted as base values.
    pub fn with_assignment(&self, assignment: &Assignment<T>) -> Result<Self, ModelError> {
        let mut out = self.clone();
        for (name, value) in assignment {
            out.set_value(name, *value)?;
        }
        Ok(out)
    }

    pub fn to_assignment(&self) -> Assignment<T> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.base_value))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    base_value: U::lit(e.base_value.to_f64_lossy()),
                    lower_factor: U::lit(e.lower_factor.to_f64_lossy()),
                    upper_factor: U::lit(e.upper_factor.to_f64_lossy()),
                    unit: e.unit.clone(),
                })
                .collect(),
        }
    }
}

fn validate_entry<T: Real>(e: &ParamEntry<T>) -> Result<(), ModelError> {
    if !e.base_value.is_finite() {
        return Err(ModelError::NonFiniteParameter(e.name.clone()));
    }
    let ok = e.lower_factor > T::zero() && e.lower_factor <= T::one() && e.upper_factor >= T::one();
    if !ok || !e.upper_factor.is_finite() {
        return Err(ModelError::InvalidFactors {
            name: e.name.clone(),
            lower: e.lower_factor.to_f64_lossy(),
            upper: e.upper_factor.to_f64_lossy(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_factors_span_half_to_double() {
        let mut ps = ParameterSet::<f64>::new();
        ps.push("H", 4.6, "s").unwrap();
        let h = ps.get("H").unwrap();
        assert!((h.lower_bound() - 2.3).abs() < 1e-12);
        assert!((h.upper_bound() - 9.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_duplicates_and_bad_factors() {
        let mut ps = ParameterSet::<f64>::new();
        ps.push("H", 4.6, "s").unwrap();
        assert!(matches!(ps.push("H", 1.0, "s"), Err(ModelError::DuplicateParameter(_))));
        assert!(ps.push_with_factors("Ka", 250.0, 1.2, 2.0, "pu").is_err());
        assert!(ps.push_with_factors("Ka", 250.0, 0.0, 2.0, "pu").is_err());
        assert!(ps.push_with_factors("Ka", 250.0, 0.5, 0.9, "pu").is_err());
        assert!(ps.push("Tb", f64::NAN, "s").is_err());
        ps.push_with_factors("Ka", 250.0, 1.0, 1.0, "pu").unwrap();
    }

    #[test]
    fn assignment_overrides_base_values() {
        let mut ps = ParameterSet::<f64>::new();
        ps.push("H", 4.6, "s").unwrap();
        ps.push("Ks", 36.0, "pu").unwrap();
        let a: Assignment<f64> = [("Ks".to_string(), 30.12)].into_iter().collect();
        let out = ps.with_assignment(&a).unwrap();
        assert_eq!(out.value("Ks").unwrap(), 30.12);
        assert_eq!(out.value("H").unwrap(), 4.6);
        let bad: Assignment<f64> = [("nope".to_string(), 1.0)].into_iter().collect();
        assert!(ps.with_assignment(&bad).is_err());
    }
}
