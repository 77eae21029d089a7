//! Reaction networks: species, stoichiometry and propensity functions.

pub mod expr;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use self::expr::{BinOp, Expr};
use crate::error::{Error, Result};
use crate::statespace::{GridIter, TruncatedStateSpace};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Species {
    pub name: String,
    pub index: usize,
}

/// One reaction channel: population change `nu` fired at rate `propensity(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionChannel {
    pub nu: Vec<i64>,
    pub propensity: Expr,
    /// Species the propensity reads, ascending.
    pub reagents: Vec<usize>,
}

impl ReactionChannel {
    pub fn new(nu: Vec<i64>, propensity: Expr) -> Self {
        let reagents = propensity.reagents();
        ReactionChannel {
            nu,
            propensity,
            reagents,
        }
    }

    #[inline]
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.propensity.eval(x)
    }

    /// Evaluates the propensity at an integer population vector.
    pub fn evaluate_at(&self, x: &[i64]) -> f64 {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.propensity.eval(&xf)
    }
}

/// Optional default truncation carried by a model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    pub partition1: Vec<usize>,
}

impl TruncationSpec {
    pub fn build(&self) -> Result<TruncatedStateSpace> {
        TruncatedStateSpace::new(&self.lower, &self.upper, &self.partition1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    pub name: Option<String>,
    pub species: Vec<Species>,
    pub channels: Vec<ReactionChannel>,
    pub parameters: BTreeMap<String, f64>,
    pub truncation: Option<TruncationSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReactionDoc {
    nu: Vec<i64>,
    propensity: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    species: Vec<String>,
    #[serde(default)]
    parameters: BTreeMap<String, f64>,
    reactions: Vec<ReactionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truncation: Option<TruncationSpec>,
}

/// Parses a JSON model document into a validated network.
pub fn parse_model(text: &str) -> Result<ReactionNetwork> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Syntax {
        context: "model document".into(),
        offset: offset_of(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    ReactionNetwork::from_doc(doc)
}

fn offset_of(text: &str, line: usize, column: usize) -> usize {
    text.split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column.saturating_sub(1)
}

impl ReactionNetwork {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))?;
        parse_model(&text)
    }

    fn from_doc(doc: ModelDoc) -> Result<Self> {
        let n = doc.species.len();
        if n == 0 {
            return Err(Error::InvalidModel("empty species list".into()));
        }
        let mut species = Vec::with_capacity(n);
        for (index, name) in doc.species.iter().enumerate() {
            if doc.species[..index].contains(name) {
                return Err(Error::InvalidModel(format!("duplicate species name '{name}'")));
            }
            species.push(Species {
                name: name.clone(),
                index,
            });
        }
        if doc.reactions.is_empty() {
            return Err(Error::InvalidModel("empty channel list".into()));
        }
        for (name, v) in &doc.parameters {
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("parameter '{name}' is not finite")));
            }
        }
        let mut channels = Vec::with_capacity(doc.reactions.len());
        for (mu, r) in doc.reactions.iter().enumerate() {
            let context = format!("reaction {}", mu + 1);
            if r.nu.len() != n {
                return Err(Error::InvalidModel(format!(
                    "{context}: nu has length {} but the model has {n} species",
                    r.nu.len()
                )));
            }
            if r.nu.iter().all(|&v| v == 0) {
                return Err(Error::InvalidModel(format!("{context}: nu is the zero vector")));
            }
            let expr = Expr::parse(&r.propensity, n, &doc.parameters, &context)?;
            channels.push(ReactionChannel::new(r.nu.clone(), expr));
        }
        if let Some(t) = &doc.truncation {
            if t.lower.len() != n || t.upper.len() != n {
                return Err(Error::InvalidModel(
                    "truncation bounds must have one entry per species".into(),
                ));
            }
        }
        Ok(ReactionNetwork {
            name: doc.name,
            species,
            channels,
            parameters: doc.parameters,
            truncation: doc.truncation,
        })
    }

    /// Serializes back to a model document. Parameters are already folded into
    /// the expressions, so they are emitted for reference only.
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            name: self.name.clone(),
            species: self.species.iter().map(|s| s.name.clone()).collect(),
            parameters: self.parameters.clone(),
            reactions: self
                .channels
                .iter()
                .map(|c| ReactionDoc {
                    nu: c.nu.clone(),
                    propensity: c.propensity.to_string(),
                })
                .collect(),
            truncation: self.truncation.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// Checks every propensity for finiteness and non-negativity on the
    /// truncated state space. Each channel is evaluated exhaustively over the
    /// sub-grid of its reagents only.
    pub fn validate_domain(&self, space: &TruncatedStateSpace) -> Result<()> {
        if space.n_species() != self.n_species() {
            return Err(Error::Dimension(format!(
                "state space has {} species, model has {}",
                space.n_species(),
                self.n_species()
            )));
        }
        let mut x = vec![0.0; self.n_species()];
        for (mu, ch) in self.channels.iter().enumerate() {
            let lower: Vec<i64> = ch.reagents.iter().map(|&i| space.lower()[i]).collect();
            let upper: Vec<i64> = ch.reagents.iter().map(|&i| space.upper()[i]).collect();
            for point in GridIter::new(&lower, &upper) {
                for (k, &i) in ch.reagents.iter().enumerate() {
                    x[i] = point[k] as f64;
                }
                let a = ch.evaluate(&x);
                if !a.is_finite() || a < 0.0 {
                    let at: Vec<String> = ch
                        .reagents
                        .iter()
                        .zip(&point)
                        .map(|(&i, v)| format!("x{}={v}", i + 1))
                        .collect();
                    return Err(Error::InvalidModel(format!(
                        "reaction {}: propensity {} is {a} at {}",
                        mu + 1,
                        ch.propensity,
                        at.join(", ")
                    )));
                }
            }
        }
        Ok(())
    }

    /// Right-hand side of the deterministic rate equations, `sum_mu nu_mu a_mu(y)`.
    pub fn rate_equation_rhs(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_species() {
            return Err(Error::Dimension(format!(
                "expected {} populations, got {}",
                self.n_species(),
                y.len()
            )));
        }
        let mut out = vec![0.0; y.len()];
        for (mu, ch) in self.channels.iter().enumerate() {
            let a = ch.evaluate(y);
            if !a.is_finite() {
                return Err(Error::Domain(format!(
                    "propensity of reaction {} undefined at {y:?}",
                    mu + 1
                )));
            }
            for (o, &nu) in out.iter_mut().zip(&ch.nu) {
                *o += nu as f64 * a;
            }
        }
        Ok(out)
    }
}

/// Bundled model documents.
pub mod builtin {
    pub const TOGGLE: &str = include_str!("../../models/toggle.json");
    pub const LAMBDA_PHAGE: &str = include_str!("../../models/lambda_phage.json");
    pub const BAX: &str = include_str!("../../models/bax.json");

    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "toggle" | "toggle.json" => Some(TOGGLE),
            "lambda_phage" | "lambda_phage.json" => Some(LAMBDA_PHAGE),
            "bax" | "bax.json" => Some(BAX),
            _ => None,
        }
    }
}
