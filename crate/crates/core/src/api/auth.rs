use std::collections::HashMap;

use serde::Serialize;

use super::ApiError;
use crate::model::is_valid_label_key;
use crate::selector::{MatchOp, Matcher, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    /// Printable identity; never the token itself.
    pub token_id: String,
    pub role: Role,
    /// Equality matchers; empty exactly for admins.
    pub scope: Vec<Matcher>,
}

impl Principal {
    pub fn admin() -> Self {
        Principal {
            token_id: "admin".into(),
            role: Role::Admin,
            scope: Vec::new(),
        }
    }

    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }

    pub fn scope_pairs(&self) -> Vec<(String, String)> {
        self.scope.iter().map(|m| (m.key.clone(), m.value.clone())).collect()
    }

    /// Whether a record with these labels is visible to the principal.
    pub fn can_see<'a, F>(&self, lookup: F) -> bool
    where
        F: Fn(&str) -> Option<&'a str>,
    {
        self.scope.iter().all(|m| m.matches_value(lookup(&m.key)))
    }

    pub fn require_admin(&self) -> Result<(), ApiError> {
        if self.is_admin() {
            Ok(())
        } else {
            Err(ApiError::Forbidden("admin token required".into()))
        }
    }
}

/// Token table loaded from the environment.
#[derive(Debug, Clone, Default)]
pub struct Credentials {
    tokens: HashMap<String, Principal>,
}

impl Credentials {
    /// `admin` is the admin token; `users` is a comma-separated list of
    /// `token:label=value` bindings. A token listed several times collects
    /// all its bindings.
    pub fn parse(admin: Option<&str>, users: Option<&str>) -> Result<Self, ApiError> {
        let mut tokens: HashMap<String, Principal> = HashMap::new();
        if let Some(a) = admin.map(str::trim).filter(|a| !a.is_empty()) {
            tokens.insert(a.to_string(), Principal::admin());
        }
        let bad = |entry: &str, why: &str| ApiError::Config(format!("API_USER_TOKENS entry `{entry}`: {why}"));
        for entry in users.unwrap_or("").split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (token, binding) = entry.split_once(':').ok_or_else(|| bad(entry, "expected token:label=value"))?;
            let (key, value) = binding.split_once('=').ok_or_else(|| bad(entry, "expected label=value"))?;
            let (token, key, value) = (token.trim(), key.trim().to_ascii_lowercase(), value.trim());
            if token.is_empty() || value.is_empty() || !is_valid_label_key(&key) {
                return Err(bad(entry, "empty token, value or invalid label key"));
            }
            let principal = tokens.entry(token.to_string()).or_insert_with(|| Principal {
                token_id: String::new(),
                role: Role::User,
                scope: Vec::new(),
            });
            if principal.is_admin() {
                return Err(bad(entry, "token is already the admin token"));
            }
            if principal.scope.iter().any(|m| m.key == key && m.value != value) {
                return Err(bad(entry, "token bound to two values of one label"));
            }
            if !principal.scope.iter().any(|m| m.key == key) {
                principal.scope.push(Matcher::eq(key, value));
                principal.scope.sort();
            }
            principal.token_id = principal
                .scope
                .iter()
                .map(|m| format!("{}={}", m.key, m.value))
                .collect::<Vec<_>>()
                .join(",");
        }
        Ok(Credentials { tokens })
    }

    pub fn from_env() -> Result<Self, ApiError> {
        Self::parse(
            std::env::var("API_ADMIN_TOKEN").ok().as_deref(),
            std::env::var("API_USER_TOKENS").ok().as_deref(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Resolves a bearer token.
    pub fn authorize(&self, bearer: &str) -> Result<Principal, ApiError> {
        self.tokens.get(bearer).cloned().ok_or(ApiError::Unauthenticated)
    }
}

/// The selector a principal actually runs: admins get `requested` as is,
/// users get it AND-ed with every scope matcher. A requested matcher that
/// contradicts the scope is a conflict rather than an empty result.
pub fn scope_selector(principal: &Principal, requested: &Selector) -> Result<Selector, ApiError> {
    let mut effective = requested.clone();
    for scope in &principal.scope {
        for m in requested.matchers.iter().filter(|m| m.key == scope.key) {
            let contradicts = match m.op {
                MatchOp::Eq => m.value != scope.value,
                MatchOp::Ne => m.value == scope.value,
            };
            if contradicts {
                return Err(ApiError::ScopeConflict { key: scope.key.clone() });
            }
        }
        effective.push(scope.clone());
    }
    Ok(effective)
}
