//! JSON model configuration.
//!
//! ```json
//! {
//!   "machine":    { "H": 4.6, "D": 0.0, "Xd": 1.8, ... },
//!   "exciter":    { "Ka": 250.0, "Tb": 43.0, ... },
//!   "governor":   { "Ks": 36.0, ... },
//!   "stabilizer": { "enabled": true, "Kpss": 1.0, ... },
//!   "bounds":     { "H": [0.5, 2.0] },
//!   "operating_point": { "p": 0.8, "q": 0.2 }
//! }
//! ```
//!
//! Every section and every field is optional; missing values take the
//! defaults in [`PARAMETER_TABLE`]. Unknown sections or fields are errors.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use super::params::ParameterSet;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Machine,
    Exciter,
    Governor,
    Stabilizer,
}

impl Section {
    pub fn key(self) -> &'static str {
        match self {
            Section::Machine => "machine",
            Section::Exciter => "exciter",
            Section::Governor => "governor",
            Section::Stabilizer => "stabilizer",
        }
    }

    const ALL: [Section; 4] = [
        Section::Machine,
        Section::Exciter,
        Section::Governor,
        Section::Stabilizer,
    ];
}

pub struct ParamSpec {
    pub section: Section,
    pub name: &'static str,
    pub default: f64,
    pub unit: &'static str,
    pub description: &'static str,
}

const fn spec(
    section: Section,
    name: &'static str,
    default: f64,
    unit: &'static str,
    description: &'static str,
) -> ParamSpec {
    ParamSpec {
        section,
        name,
        default,
        unit,
        description,
    }
}

use Section::{Exciter as E, Governor as G, Machine as M, Stabilizer as S};

/// Every model parameter in canonical order, with its default value.
pub const PARAMETER_TABLE: &[ParamSpec] = &[
    spec(M, "H", 4.6, "s", "inertia constant"),
    spec(M, "D", 0.0, "pu", "speed damping"),
    spec(M, "Xd", 1.8, "pu", "d-axis synchronous reactance"),
    spec(M, "Xq", 1.75, "pu", "q-axis synchronous reactance"),
    spec(M, "Xdp", 0.3, "pu", "d-axis transient reactance"),
    spec(M, "Xqp", 0.55, "pu", "q-axis transient reactance"),
    spec(M, "Xdpp", 0.25, "pu", "subtransient reactance (d = q)"),
    spec(M, "Xl", 0.15, "pu", "stator leakage reactance"),
    spec(M, "Td0p", 7.0, "s", "d-axis open-circuit transient time constant"),
    spec(M, "Tq0p", 0.75, "s", "q-axis open-circuit transient time constant"),
    spec(M, "Td0pp", 0.035, "s", "d-axis open-circuit subtransient time constant"),
    spec(M, "Tq0pp", 0.05, "s", "q-axis open-circuit subtransient time constant"),
    spec(M, "S10", 0.0, "pu", "saturation factor at 1.0 pu flux"),
    spec(M, "S12", 0.0, "pu", "saturation factor at 1.2 pu flux"),
    spec(E, "Ka", 250.0, "pu", "voltage regulator gain"),
    spec(E, "Ta", 0.02, "s", "voltage regulator time constant"),
    spec(E, "Tc", 3.0, "s", "lead time constant"),
    spec(E, "Tb", 43.0, "s", "lag time constant"),
    spec(E, "Kf", 0.01, "pu", "rate feedback gain"),
    spec(E, "Tf", 1.0, "s", "rate feedback time constant"),
    spec(E, "Xc", 0.1, "pu", "reactive droop compensation"),
    spec(E, "Vrmax", 8.0, "pu", "regulator upper limit"),
    spec(E, "Vrmin", -6.0, "pu", "regulator lower limit"),
    spec(G, "Ks", 36.0, "pu", "governor gain"),
    spec(G, "R", 0.02, "pu", "permanent droop"),
    spec(G, "Tact", 1.0, "s", "actuator time constant"),
    spec(G, "Pmax", 1.5, "pu", "valve upper limit"),
    spec(G, "Pmin", 0.0, "pu", "valve lower limit"),
    spec(S, "Kpss", 1.0, "pu", "stabilizer gain"),
    spec(S, "Tw", 10.0, "s", "washout time constant"),
    spec(S, "T1", 0.2, "s", "first lead time constant"),
    spec(S, "T2", 0.05, "s", "first lag time constant"),
    spec(S, "T3", 0.2, "s", "second lead time constant"),
    spec(S, "T4", 0.05, "s", "second lag time constant"),
    spec(S, "Vsmax", 0.1, "pu", "stabilizer output upper limit"),
    spec(S, "Vsmin", -0.1, "pu", "stabilizer output lower limit"),
];

pub const DEFAULT_OPERATING_P: f64 = 0.8;
pub const DEFAULT_OPERATING_Q: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructureFlags {
    pub stabilizer: bool,
}

impl Default for StructureFlags {
    fn default() -> Self {
        Self { stabilizer: true }
    }
}

/// Parsed model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitConfig {
    pub params: ParameterSet<f64>,
    pub flags: StructureFlags,
    /// (P, Q) used to initialise playback when an event carries no power channels.
    pub operating_point: (f64, f64),
}

impl Default for UnitConfig {
    fn default() -> Self {
        let mut params = ParameterSet::new();
        for p in PARAMETER_TABLE {
            params
                .push(p.name, p.default, p.unit)
                .expect("parameter table is valid");
        }
        Self {
            params,
            flags: StructureFlags::default(),
            operating_point: (DEFAULT_OPERATING_P, DEFAULT_OPERATING_Q),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}

fn as_number(v: &Value, what: &str) -> Result<f64, ModelError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| invalid(format!("{what}: expected a finite number")))
}

impl UnitConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let root: Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Self::from_json_value(&root)
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            ModelError::Config(msg) => invalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json_value(root: &Value) -> Result<Self, ModelError> {
        let obj = root
            .as_object()
            .ok_or_else(|| invalid("model configuration must be a JSON object"))?;
        let mut cfg = UnitConfig::default();
        for (key, value) in obj {
            if key == "bounds" || key == "operating_point" {
                continue;
            }
            let section = Section::ALL
                .iter()
                .copied()
                .find(|s| s.key() == key)
                .ok_or_else(|| invalid(format!("unknown section \"{key}\"")))?;
            let fields = value
                .as_object()
                .ok_or_else(|| invalid(format!("section \"{key}\" must be an object")))?;
            for (field, v) in fields {
                if section == Section::Stabilizer && field == "enabled" {
                    cfg.flags.stabilizer = v
                        .as_bool()
                        .ok_or_else(|| invalid("stabilizer.enabled: expected a boolean"))?;
                    continue;
                }
                let known = PARAMETER_TABLE
                    .iter()
                    .any(|p| p.section == section && p.name == field);
                if !known {
                    return Err(invalid(format!("unknown field \"{key}.{field}\"")));
                }
                let x = as_number(v, &format!("{key}.{field}"))?;
                cfg.params.set_value(field, x)?;
            }
        }
        if let Some(bounds) = obj.get("bounds") {
            let bounds = bounds
                .as_object()
                .ok_or_else(|| invalid("\"bounds\" must be an object"))?;
            for (name, pair) in bounds {
                let arr = pair
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| invalid(format!("bounds.{name}: expected [lower, upper]")))?;
                let lo = as_number(&arr[0], &format!("bounds.{name}[0]"))?;
                let hi = as_number(&arr[1], &format!("bounds.{name}[1]"))?;
                cfg.params.set_factors(name, lo, hi)?;
            }
        }
        if let Some(op) = obj.get("operating_point") {
            let op = op
                .as_object()
                .ok_or_else(|| invalid("\"operating_point\" must be an object"))?;
            for (k, v) in op {
                let x = as_number(v, &format!("operating_point.{k}"))?;
                match k.as_str() {
                    "p" => cfg.operating_point.0 = x,
                    "q" => cfg.operating_point.1 = x,
                    other => return Err(invalid(format!("unknown field \"operating_point.{other}\""))),
                }
            }
        }
        Ok(cfg)
    }

    /// Serialises back to the documented schema (every field explicit).
    pub fn to_json_value(&self) -> Value {
        let mut root = Map::new();
        let mut sections: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
        for p in PARAMETER_TABLE {
            let v = self.params.value(p.name).unwrap_or(p.default);
            sections
                .entry(p.section.key())
                .or_default()
                .insert(p.name.to_string(), Value::from(v));
        }
        if let Some(stab) = sections.get_mut("stabilizer") {
            stab.insert("enabled".into(), Value::Bool(self.flags.stabilizer));
        }
        for s in Section::ALL {
            root.insert(s.key().into(), Value::Object(sections.remove(s.key()).unwrap_or_default()));
        }
        let mut bounds = Map::new();
        for e in self.params.entries() {
            if e.lower_factor != super::params::DEFAULT_LOWER_FACTOR
                || e.upper_factor != super::params::DEFAULT_UPPER_FACTOR
            {
                bounds.insert(
                    e.name.clone(),
                    Value::from(vec![e.lower_factor, e.upper_factor]),
                );
            }
        }
        if !bounds.is_empty() {
            root.insert("bounds".into(), Value::Object(bounds));
        }
        let mut op = Map::new();
        op.insert("p".into(), Value::from(self.operating_point.0));
        op.insert("q".into(), Value::from(self.operating_point.1));
        root.insert("operating_point".into(), Value::Object(op));
        Value::Object(root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_values() {
        let cfg = UnitConfig::default();
        assert_eq!(cfg.params.value("H").unwrap(), 4.60);
        assert_eq!(cfg.params.value("Ka").unwrap(), 250.00);
        assert_eq!(cfg.params.value("Tb").unwrap(), 43.00);
        assert_eq!(cfg.params.value("Ks").unwrap(), 36.00);
        assert!(cfg.flags.stabilizer);
    }

    #[test]
    fn parses_partial_config() {
        let cfg = UnitConfig::from_json_str(
            r#"{"machine": {"H": 5.71}, "stabilizer": {"enabled": false},
                "bounds": {"Ka": [0.8, 1.5]}, "operating_point": {"p": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.params.value("H").unwrap(), 5.71);
        assert!(!cfg.flags.stabilizer);
        let ka = cfg.params.get("Ka").unwrap();
        assert_eq!((ka.lower_factor, ka.upper_factor), (0.8, 1.5));
        assert_eq!(cfg.operating_point, (0.5, 0.2));
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(UnitConfig::from_json_str(r#"{"machine": {"Hx": 1.0}}"#).is_err());
        assert!(UnitConfig::from_json_str(r#"{"turbine": {}}"#).is_err());
        assert!(UnitConfig::from_json_str(r#"{"exciter": {"H": 1.0}}"#).is_err());
        assert!(UnitConfig::from_json_str(r#"{"operating_point": {"v": 1.0}}"#).is_err());
        assert!(UnitConfig::from_json_str(r#"{"machine": {"H": "big"}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = UnitConfig::default();
        cfg.params.set_value("Kpss", 3.0).unwrap();
        cfg.params.set_factors("H", 0.7, 1.4).unwrap();
        cfg.flags.stabilizer = false;
        let back = UnitConfig::from_json_value(&cfg.to_json_value()).unwrap();
        assert_eq!(back, cfg);
    }
}
