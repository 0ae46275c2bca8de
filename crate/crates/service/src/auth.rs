//! Bearer tokens and the two scopes they can carry.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use axum::http::{header, HeaderMap, StatusCode};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Register agents, admit tasks, propose steps, report outputs.
    AgentRuntime,
    /// Read the content tier of the audit trail and of approval requests.
    AuditorContent,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "agent-runtime" => Ok(Scope::AgentRuntime),
            "auditor-content" => Ok(Scope::AuditorContent),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

/// Token table. Every known token authenticates; scopes gate the rest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokens(BTreeMap<String, BTreeSet<Scope>>);

impl Tokens {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, token: impl Into<String>, scopes: impl IntoIterator<Item = Scope>) -> Self {
        self.0.entry(token.into()).or_default().extend(scopes);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `token=scope+scope,token2=scope`. A token with no `=` gets no scopes.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut t = Tokens::new();
        for entry in spec.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (token, scopes) = entry.split_once('=').unwrap_or((entry, ""));
            if token.is_empty() {
                return Err(format!("empty token in {entry:?}"));
            }
            let scopes: BTreeSet<Scope> =
                scopes.split('+').filter(|s| !s.trim().is_empty()).map(Scope::from_str).collect::<Result<_, _>>()?;
            t = t.with(token, scopes);
        }
        Ok(t)
    }

    pub fn caller(&self, headers: &HeaderMap) -> Result<Caller, ApiError> {
        let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", m);
        let value = headers.get(header::AUTHORIZATION).ok_or_else(|| unauthorized("missing bearer token"))?;
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| unauthorized("malformed authorization header"))?;
        let scopes = self.0.get(token.trim()).ok_or_else(|| unauthorized("unknown token"))?;
        Ok(Caller { scopes: scopes.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct Caller {
    pub scopes: BTreeSet<Scope>,
}

impl Caller {
    pub fn has(&self, scope: Scope) -> bool {
        self.scopes.contains(&scope)
    }

    pub fn require(&self, scope: Scope) -> Result<(), ApiError> {
        if self.has(scope) {
            Ok(())
        } else {
            Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", format!("token lacks scope {scope:?}")))
        }
    }
}
