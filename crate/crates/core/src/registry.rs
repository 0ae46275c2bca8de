//! Tool registry and information-barrier declarations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_subkind, ContentLabels, Payload, StepKind, HUMAN_APPROVAL, PII_CHECK};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown tool subkind {0:?}")]
    UnknownSubkind(String),
    #[error("undeclared barrier: {0}")]
    UndeclaredBarrier(String),
    #[error("invalid tool descriptor {subkind:?}: {reason}")]
    InvalidTool { subkind: String, reason: String },
    #[error("invalid barrier declaration: {0}")]
    InvalidBarrier(String),
}

/// Registry metadata for one tool (or model call) subkind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub subkind: String,
    pub kind: StepKind,
    #[serde(default)]
    pub sensitivity: u32,
    #[serde(default)]
    pub data_categories: BTreeSet<String>,
    /// True if the tool transmits data outside the organization.
    #[serde(default)]
    pub external: bool,
}

impl ToolDescriptor {
    pub fn new(subkind: impl Into<String>, kind: StepKind, sensitivity: u32) -> Self {
        Self { subkind: subkind.into(), kind, sensitivity, data_categories: BTreeSet::new(), external: false }
    }

    pub fn with_categories<I: IntoIterator<Item = S>, S: Into<String>>(mut self, categories: I) -> Self {
        self.data_categories = categories.into_iter().map(Into::into).collect();
        self
    }

    pub fn external(mut self) -> Self {
        self.external = true;
        self
    }

    fn reserved(subkind: &str) -> Self {
        Self::new(subkind, StepKind::Deterministic, 0)
    }
}

/// One named barrier with exactly two sides.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BarrierDecl {
    pub name: String,
    pub sides: [String; 2],
}

impl BarrierDecl {
    pub fn new(name: &str, a: &str, b: &str) -> Self {
        Self { name: name.into(), sides: [a.into(), b.into()] }
    }

    pub fn tag(&self, side: usize) -> String {
        format!("{}:{}", self.name, self.sides[side])
    }

    /// The opposite side tag of `side`, if `side` belongs to this barrier.
    pub fn other_side(&self, side: &str) -> Option<&str> {
        match side {
            s if s == self.sides[0] => Some(&self.sides[1]),
            s if s == self.sides[1] => Some(&self.sides[0]),
            _ => None,
        }
    }
}

/// Declared barriers, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BarrierDecl>", into = "Vec<BarrierDecl>")]
pub struct Barriers(BTreeMap<String, BarrierDecl>);

impl TryFrom<Vec<BarrierDecl>> for Barriers {
    type Error = RegistryError;

    fn try_from(decls: Vec<BarrierDecl>) -> Result<Self, Self::Error> {
        let mut map = BTreeMap::new();
        for d in decls {
            if d.name.is_empty() || d.name.contains(':') {
                return Err(RegistryError::InvalidBarrier(format!("bad barrier name {:?}", d.name)));
            }
            if d.sides[0].is_empty() || d.sides[1].is_empty() || d.sides[0] == d.sides[1] {
                return Err(RegistryError::InvalidBarrier(format!("barrier {:?} needs two distinct sides", d.name)));
            }
            if map.insert(d.name.clone(), d).is_some() {
                return Err(RegistryError::InvalidBarrier("duplicate barrier name".into()));
            }
        }
        Ok(Barriers(map))
    }
}

impl From<Barriers> for Vec<BarrierDecl> {
    fn from(b: Barriers) -> Self {
        b.0.into_values().collect()
    }
}

/// A category tag split into barrier name and side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideTag<'a> {
    pub barrier: &'a str,
    pub side: &'a str,
}

impl Barriers {
    pub fn new(decls: impl IntoIterator<Item = BarrierDecl>) -> Result<Self, RegistryError> {
        Self::try_from(decls.into_iter().collect::<Vec<_>>())
    }

    pub fn get(&self, name: &str) -> Option<&BarrierDecl> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BarrierDecl> {
        self.0.values()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Classifies a category tag. Tags without `:` are plain categories
    /// (`Ok(None)`); tags with `:` must name a declared barrier and side.
    pub fn classify<'a>(&self, tag: &'a str) -> Result<Option<SideTag<'a>>, RegistryError> {
        let Some((barrier, side)) = tag.split_once(':') else {
            return Ok(None);
        };
        match self.0.get(barrier) {
            Some(decl) if decl.sides.iter().any(|s| s == side) => Ok(Some(SideTag { barrier, side })),
            _ => Err(RegistryError::UndeclaredBarrier(tag.to_string())),
        }
    }

    /// Every barrier-side tag among `categories`.
    pub fn side_tags<'a, I>(&self, categories: I) -> Result<BTreeSet<String>, RegistryError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = BTreeSet::new();
        for c in categories {
            if self.classify(c)?.is_some() {
                out.insert(c.clone());
            }
        }
        Ok(out)
    }
}

/// Map from subkind to descriptor. Reserved subkinds resolve without an entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<ToolDescriptor>", into = "Vec<ToolDescriptor>")]
pub struct ToolRegistry(BTreeMap<String, ToolDescriptor>);

impl From<Vec<ToolDescriptor>> for ToolRegistry {
    fn from(tools: Vec<ToolDescriptor>) -> Self {
        ToolRegistry(tools.into_iter().map(|t| (t.subkind.clone(), t)).collect())
    }
}

impl From<ToolRegistry> for Vec<ToolDescriptor> {
    fn from(r: ToolRegistry) -> Self {
        r.0.into_values().collect()
    }
}

impl FromIterator<ToolDescriptor> for ToolRegistry {
    fn from_iter<T: IntoIterator<Item = ToolDescriptor>>(iter: T) -> Self {
        Self::from(iter.into_iter().collect::<Vec<_>>())
    }
}

impl ToolRegistry {
    pub fn insert(&mut self, tool: ToolDescriptor) {
        self.0.insert(tool.subkind.clone(), tool);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.0.values()
    }

    pub fn contains(&self, subkind: &str) -> bool {
        self.0.contains_key(subkind) || subkind == PII_CHECK || subkind == HUMAN_APPROVAL
    }

    pub fn resolve(&self, subkind: &str) -> Result<ToolDescriptor, RegistryError> {
        if let Some(t) = self.0.get(subkind) {
            return Ok(t.clone());
        }
        if subkind == PII_CHECK || subkind == HUMAN_APPROVAL {
            return Ok(ToolDescriptor::reserved(subkind));
        }
        Err(RegistryError::UnknownSubkind(subkind.to_string()))
    }

    pub fn validate(&self, sigma_ceiling: u32, barriers: &Barriers) -> Result<(), RegistryError> {
        for t in self.0.values() {
            let invalid = |reason: String| RegistryError::InvalidTool { subkind: t.subkind.clone(), reason };
            validate_subkind(&t.subkind).map_err(|e| invalid(e.to_string()))?;
            if t.sensitivity > sigma_ceiling {
                return Err(invalid(format!("sensitivity {} exceeds ceiling {sigma_ceiling}", t.sensitivity)));
            }
            barriers.side_tags(&t.data_categories)?;
        }
        Ok(())
    }
}

/// Effective labels of a proposed or executed input: registry categories and
/// level merged with the caller's.
pub fn effective_input_labels(tool: &ToolDescriptor, payload: &Payload) -> ContentLabels {
    let mut categories = tool.data_categories.clone();
    categories.extend(payload.labels.categories.iter().cloned());
    let sensitivity = tool.sensitivity.max(payload.labels.sensitivity.unwrap_or(0));
    ContentLabels { categories, sensitivity: Some(sensitivity) }
}

/// Effective labels of a step output. An unlabeled output of a stochastic
/// step is treated as `sigma_ceiling`.
pub fn effective_output_labels(tool: &ToolDescriptor, payload: &Payload, sigma_ceiling: u32) -> ContentLabels {
    let mut categories = tool.data_categories.clone();
    categories.extend(payload.labels.categories.iter().cloned());
    let sensitivity = match payload.labels.sensitivity {
        Some(s) => tool.sensitivity.max(s),
        None if tool.kind == StepKind::Stochastic => sigma_ceiling,
        None => tool.sensitivity,
    };
    ContentLabels { categories, sensitivity: Some(sensitivity) }
}
