//! Series selectors: an optional metric name plus label matchers, written
//! `name{k="v",k2!="w"}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{is_valid_label_key, is_valid_name, parse_label_block, ModelError, SeriesKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatchOp {
    Eq,
    Ne,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Matcher {
    pub key: String,
    pub op: MatchOp,
    pub value: String,
}

impl Matcher {
    pub fn eq(key: impl Into<String>, value: impl Into<String>) -> Self {
        Matcher {
            key: key.into(),
            op: MatchOp::Eq,
            value: value.into(),
        }
    }

    pub fn ne(key: impl Into<String>, value: impl Into<String>) -> Self {
        Matcher {
            key: key.into(),
            op: MatchOp::Ne,
            value: value.into(),
        }
    }

    /// An absent label compares as the empty string.
    pub fn matches_value(&self, actual: Option<&str>) -> bool {
        let actual = actual.unwrap_or("");
        match self.op {
            MatchOp::Eq => actual == self.value,
            MatchOp::Ne => actual != self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Selector {
    pub name: Option<String>,
    pub matchers: Vec<Matcher>,
}

impl Selector {
    pub fn metric(name: impl Into<String>) -> Self {
        Selector {
            name: Some(name.into()),
            matchers: Vec::new(),
        }
    }

    pub fn with(mut self, matcher: Matcher) -> Self {
        self.push(matcher);
        self
    }

    /// Adds a matcher, keeping the list sorted and free of exact duplicates.
    pub fn push(&mut self, matcher: Matcher) {
        if let Err(pos) = self.matchers.binary_search(&matcher) {
            self.matchers.insert(pos, matcher);
        }
    }

    /// Selector matching exactly one series.
    pub fn exact(key: &SeriesKey) -> Self {
        let mut sel = Selector::metric(key.name());
        for (k, v) in key.labels() {
            sel.push(Matcher::eq(k.clone(), v.clone()));
        }
        sel
    }

    pub fn matches(&self, key: &SeriesKey) -> bool {
        self.matches_parts(key.name(), |k| key.label(k))
    }

    /// Matches against an arbitrary name plus label lookup, so non-tsdb
    /// records (events, entities) share the same semantics.
    pub fn matches_parts<'a, F>(&self, name: &str, lookup: F) -> bool
    where
        F: Fn(&str) -> Option<&'a str>,
    {
        if let Some(n) = &self.name {
            if n != name {
                return false;
            }
        }
        self.matchers.iter().all(|m| m.matches_value(lookup(&m.key)))
    }
}

impl FromStr for Selector {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let brace = s.find('{').unwrap_or(s.len());
        let name = s[..brace].trim();
        let name = if name.is_empty() {
            None
        } else {
            let lowered = name.to_ascii_lowercase();
            if !is_valid_name(&lowered) {
                return Err(ModelError::InvalidName(name.to_string()));
            }
            Some(lowered)
        };
        let mut sel = Selector {
            name,
            matchers: Vec::new(),
        };
        if brace == s.len() {
            return Ok(sel);
        }
        let (raw, consumed) = parse_label_block(&s[brace..])?;
        if !s[brace + consumed..].trim().is_empty() {
            return Err(ModelError::ParseError("trailing input after selector".into()));
        }
        for (key, value) in raw {
            let (key, op) = match key.strip_suffix('!') {
                Some(k) => (k.trim(), MatchOp::Ne),
                None => (key.as_str(), MatchOp::Eq),
            };
            let key = key.to_ascii_lowercase();
            if !is_valid_label_key(&key) {
                return Err(ModelError::InvalidLabelKey(key));
            }
            sel.push(Matcher { key, op, value });
        }
        Ok(sel)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = &self.name {
            f.write_str(n)?;
        }
        f.write_str("{")?;
        for (i, m) in self.matchers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            let op = match m.op {
                MatchOp::Eq => "=",
                MatchOp::Ne => "!=",
            };
            let escaped = m.value.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
            write!(f, "{}{}\"{}\"", m.key, op, escaped)?;
        }
        f.write_str("}")
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
