//! Shared domain types: samples, canonical units, series identity and the
//! line-oriented exposition format spoken between every layer.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound (exclusive) on the number of labels a single series may carry.
pub const MAX_LABELS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid metric name `{0}`")]
    InvalidName(String),
    #[error("invalid label key `{0}`")]
    InvalidLabelKey(String),
    #[error("too many labels: {0}")]
    TooManyLabels(usize),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("invalid value `{0}`")]
    InvalidValue(String),
    #[error("parse error: {0}")]
    ParseError(String),
}

/// Canonical units every sample is converted into at ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalUnit {
    Seconds,
    Bytes,
    Joules,
    Watts,
    Celsius,
    Ratio,
    Count,
    None,
}

impl CanonicalUnit {
    pub const ALL: [CanonicalUnit; 8] = [
        CanonicalUnit::Seconds,
        CanonicalUnit::Bytes,
        CanonicalUnit::Joules,
        CanonicalUnit::Watts,
        CanonicalUnit::Celsius,
        CanonicalUnit::Ratio,
        CanonicalUnit::Count,
        CanonicalUnit::None,
    ];

    /// The one symbol this unit is written with.
    pub fn symbol(self) -> &'static str {
        match self {
            CanonicalUnit::Seconds => "s",
            CanonicalUnit::Bytes => "B",
            CanonicalUnit::Joules => "J",
            CanonicalUnit::Watts => "W",
            CanonicalUnit::Celsius => "degC",
            CanonicalUnit::Ratio => "ratio",
            CanonicalUnit::Count => "count",
            CanonicalUnit::None => "",
        }
    }

    /// Token used on the wire; the empty symbol is spelled `none` so that the
    /// line stays whitespace-splittable.
    pub fn wire_symbol(self) -> &'static str {
        match self {
            CanonicalUnit::None => "none",
            other => other.symbol(),
        }
    }
}

/// A unit as seen at ingest: the canonical target plus the symbol the
/// producer originally used.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub canonical: CanonicalUnit,
    pub source_symbol: String,
}

impl Unit {
    pub fn canonical(canonical: CanonicalUnit) -> Self {
        Unit {
            canonical,
            source_symbol: canonical.symbol().to_string(),
        }
    }
}

/// Conversion table: source symbol to (canonical unit, multiplicative factor).
fn conversion(symbol: &str) -> Option<(CanonicalUnit, f64)> {
    use CanonicalUnit::*;
    let entry = match symbol {
        "ms" => (Seconds, 1e-3),
        "s" => (Seconds, 1.0),
        "min" => (Seconds, 60.0),
        "h" => (Seconds, 3600.0),
        "B" => (Bytes, 1.0),
        "kB" => (Bytes, 1e3),
        "MB" => (Bytes, 1e6),
        "GB" => (Bytes, 1e9),
        "KiB" => (Bytes, 1024.0),
        "MiB" => (Bytes, 1_048_576.0),
        "GiB" => (Bytes, 1_073_741_824.0),
        "J" => (Joules, 1.0),
        "Wh" => (Joules, 3600.0),
        "kWh" => (Joules, 3.6e6),
        "mWh" => (Joules, 3.6),
        "W" => (Watts, 1.0),
        "mW" => (Watts, 1e-3),
        "kW" => (Watts, 1e3),
        "%" => (Ratio, 1e-2),
        "ratio" => (Ratio, 1.0),
        "degC" => (Celsius, 1.0),
        "count" => (Count, 1.0),
        "" | "none" => (None, 1.0),
        _ => return Option::None,
    };
    Some(entry)
}

/// Converts `value` expressed in `source_symbol` into its canonical unit.
///
/// The only transform applied is a multiplication by the table factor. Percent
/// is divided by 100 and deliberately not clamped: multi-core utilisation can
/// exceed 100%.
pub fn convert_unit(value: f64, source_symbol: &str) -> Result<(f64, Unit), ModelError> {
    let (canonical, factor) =
        conversion(source_symbol).ok_or_else(|| ModelError::UnknownUnit(source_symbol.to_string()))?;
    let converted = if factor == 1.0 { value } else { value * factor };
    Ok((
        converted,
        Unit {
            canonical,
            source_symbol: source_symbol.to_string(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Gauge,
    Counter,
    Event,
}

impl SampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Gauge => "gauge",
            SampleKind::Counter => "counter",
            SampleKind::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gauge" => Some(SampleKind::Gauge),
            "counter" => Some(SampleKind::Counter),
            "event" => Some(SampleKind::Event),
            _ => None,
        }
    }
}

pub(crate) fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == ':')
}

pub fn is_valid_label_key(key: &str) -> bool {
    let mut chars = key.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Canonical identity of a time series: metric name plus labels sorted by key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    name: String,
    labels: Vec<(String, String)>,
}

impl SeriesKey {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[(String, String)] {
        &self.labels
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels
            .binary_search_by(|(k, _)| k.as_str().cmp(key))
            .ok()
            .map(|i| self.labels[i].1.as_str())
    }

    pub fn label_map(&self) -> BTreeMap<String, String> {
        self.labels.iter().cloned().collect()
    }

    /// Writes `name{k="v",...}` with escaped values.
    pub fn write_to(&self, out: &mut String) {
        out.push_str(&self.name);
        out.push('{');
        for (i, (k, v)) in self.labels.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(k);
            out.push_str("=\"");
            escape_label_value(v, out);
            out.push('"');
        }
        out.push('}');
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_to(&mut s);
        f.write_str(&s)
    }
}

impl std::str::FromStr for SeriesKey {
    type Err = ModelError;

    /// Parses the `name{k="v",...}` rendering (or a bare name) back into a
    /// canonical key.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let Some(brace) = s.find('{') else {
            return canonicalize_series_key(s, []);
        };
        let (labels, consumed) = parse_label_block(&s[brace..])?;
        if brace + consumed != s.len() {
            return Err(ModelError::ParseError(format!("trailing input in series key `{s}`")));
        }
        canonicalize_series_key(&s[..brace], labels.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

/// Lowercases and validates a metric name and label set into a [`SeriesKey`].
///
/// Label values are kept verbatim. Two keys differing only in case collapse
/// to the same canonical key and are rejected as a duplicate.
pub fn canonicalize_series_key<'a, I>(name: &str, labels: I) -> Result<SeriesKey, ModelError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let canonical_name = name.to_ascii_lowercase();
    if !is_valid_name(&canonical_name) {
        return Err(ModelError::InvalidName(name.to_string()));
    }
    let mut out: Vec<(String, String)> = Vec::new();
    for (k, v) in labels {
        if out.len() + 1 >= MAX_LABELS {
            return Err(ModelError::TooManyLabels(out.len() + 1));
        }
        let key = k.to_ascii_lowercase();
        if !is_valid_label_key(&key) {
            return Err(ModelError::InvalidLabelKey(k.to_string()));
        }
        out.push((key, v.to_string()));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        let dup = out.windows(2).find(|w| w[0].0 == w[1].0).unwrap();
        return Err(ModelError::InvalidLabelKey(dup[0].0.clone()));
    }
    Ok(SeriesKey {
        name: canonical_name,
        labels: out,
    })
}

/// Convenience over [`canonicalize_series_key`] for map-shaped labels.
pub fn series_key(name: &str, labels: &BTreeMap<String, String>) -> Result<SeriesKey, ModelError> {
    canonicalize_series_key(name, labels.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

/// One timestamped measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub key: SeriesKey,
    pub value: f64,
    /// Milliseconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub unit: Unit,
    pub kind: SampleKind,
}

impl MetricSample {
    /// Builds a sample in canonical units. Fails on invalid identity or a
    /// non-finite value.
    pub fn new(
        name: &str,
        labels: &[(&str, &str)],
        kind: SampleKind,
        unit: CanonicalUnit,
        value: f64,
        timestamp: i64,
    ) -> Result<Self, ModelError> {
        let key = canonicalize_series_key(name, labels.iter().copied())?;
        if !value.is_finite() {
            return Err(ModelError::InvalidValue(value.to_string()));
        }
        if timestamp <= 0 {
            return Err(ModelError::ParseError(format!("timestamp must be positive, got {timestamp}")));
        }
        Ok(MetricSample {
            key,
            value,
            timestamp,
            unit: Unit::canonical(unit),
            kind,
        })
    }

    pub fn name(&self) -> &str {
        self.key.name()
    }

    /// Renders the sample as one exposition line (without the trailing newline).
    pub fn to_line(&self) -> String {
        let mut out = String::with_capacity(64);
        self.key.write_to(&mut out);
        let _ = write!(
            out,
            " {} {} {} {}",
            self.kind.as_str(),
            self.unit.canonical.wire_symbol(),
            self.value,
            self.timestamp
        );
        out
    }
}

impl fmt::Display for MetricSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

fn escape_label_value(v: &str, out: &mut String) {
    for c in v.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
}

/// Formats a batch of samples as exposition text, one line per sample.
pub fn format_exposition<'a, I: IntoIterator<Item = &'a MetricSample>>(samples: I) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

/// Result of parsing one exposition line.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedLine {
    Sample(MetricSample),
    /// Comment or blank line.
    Skip,
}

/// Parses a single exposition line:
/// `<name>{<k>="<v>",...} <kind> <unit-symbol> <value> <timestamp-ms>`.
pub fn parse_exposition_line(line: &str) -> Result<ParsedLine, ModelError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let trimmed = line.trim_start();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(ParsedLine::Skip);
    }
    let (name, labels, rest) = parse_identity(trimmed)?;
    let key = canonicalize_series_key(
        name,
        labels.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )?;

    let mut fields = rest.split_ascii_whitespace();
    let mut next = |what: &str| {
        fields
            .next()
            .ok_or_else(|| ModelError::ParseError(format!("missing {what}")))
    };
    let kind_tok = next("kind")?;
    let kind = SampleKind::parse(kind_tok)
        .ok_or_else(|| ModelError::ParseError(format!("unknown kind `{kind_tok}`")))?;
    let unit_tok = next("unit")?;
    let value_tok = next("value")?;
    let ts_tok = next("timestamp")?;
    if let Some(extra) = fields.next() {
        return Err(ModelError::ParseError(format!("unexpected trailing field `{extra}`")));
    }

    let raw_value: f64 = value_tok
        .parse()
        .map_err(|_| ModelError::ParseError(format!("bad value `{value_tok}`")))?;
    if !raw_value.is_finite() {
        return Err(ModelError::InvalidValue(value_tok.to_string()));
    }
    let timestamp: i64 = ts_tok
        .parse()
        .map_err(|_| ModelError::ParseError(format!("bad timestamp `{ts_tok}`")))?;
    if timestamp <= 0 {
        return Err(ModelError::ParseError(format!("timestamp must be positive, got {timestamp}")));
    }
    let (value, unit) = convert_unit(raw_value, unit_tok)?;
    if !value.is_finite() {
        return Err(ModelError::InvalidValue(value_tok.to_string()));
    }
    Ok(ParsedLine::Sample(MetricSample {
        key,
        value,
        timestamp,
        unit,
        kind,
    }))
}

type Identity<'a> = (&'a str, Vec<(String, String)>, &'a str);

fn parse_identity(s: &str) -> Result<Identity<'_>, ModelError> {
    let name_end = s
        .find(|c: char| c == '{' || c.is_ascii_whitespace())
        .ok_or_else(|| ModelError::ParseError("missing fields after name".into()))?;
    let name = &s[..name_end];
    if name.is_empty() {
        return Err(ModelError::InvalidName(String::new()));
    }
    let rest = &s[name_end..];
    if !rest.starts_with('{') {
        return Ok((name, Vec::new(), rest));
    }
    let (labels, consumed) = parse_label_block(rest)?;
    Ok((name, labels, &rest[consumed..]))
}

/// Parses `{k="v",...}` at the start of `s`, returning the labels and the
/// number of bytes consumed.
pub(crate) fn parse_label_block(s: &str) -> Result<(Vec<(String, String)>, usize), ModelError> {
    let bytes = s.as_bytes();
    debug_assert_eq!(bytes.first(), Some(&b'{'));
    let mut labels = Vec::new();
    let mut i = 1;
    loop {
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        match bytes.get(i) {
            Some(b'}') => return Ok((labels, i + 1)),
            None => return Err(ModelError::ParseError("unterminated label block".into())),
            _ => {}
        }
        let key_start = i;
        while i < bytes.len() && bytes[i] != b'=' && bytes[i] != b'}' && bytes[i] != b',' {
            i += 1;
        }
        if bytes.get(i) != Some(&b'=') {
            return Err(ModelError::ParseError("expected `=` in label".into()));
        }
        let key = s[key_start..i].trim().to_string();
        i += 1;
        if bytes.get(i) != Some(&b'"') {
            return Err(ModelError::ParseError("label value must be quoted".into()));
        }
        i += 1;
        let mut value = String::new();
        let mut chars = s[i..].char_indices();
        let mut closed = false;
        while let Some((off, c)) = chars.next() {
            match c {
                '"' => {
                    i += off + 1;
                    closed = true;
                    break;
                }
                '\\' => match chars.next() {
                    Some((_, '"')) => value.push('"'),
                    Some((_, '\\')) => value.push('\\'),
                    Some((_, 'n')) => value.push('\n'),
                    _ => return Err(ModelError::ParseError("bad escape in label value".into())),
                },
                c => value.push(c),
            }
        }
        if !closed {
            return Err(ModelError::ParseError("unterminated label value".into()));
        }
        labels.push((key, value));
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        match bytes.get(i) {
            Some(b',') => i += 1,
            Some(b'}') => return Ok((labels, i + 1)),
            _ => return Err(ModelError::ParseError("expected `,` or `}` after label".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn canonical_key_already_canonical() {
        let key = canonicalize_series_key("cpu_seconds", [("host", "n1")]).unwrap();
        assert_eq!(key.name(), "cpu_seconds");
        assert_eq!(key.labels(), labels(&[("host", "n1")]).as_slice());
    }

    #[test]
    fn canonical_key_sorts_and_lowercases() {
        let key = canonicalize_series_key("cpu_seconds", [("B", "2"), ("a", "1")]).unwrap();
        assert_eq!(key.labels(), labels(&[("a", "1"), ("b", "2")]).as_slice());
        let again = canonicalize_series_key("cpu_seconds", [("a", "1"), ("B", "2")]).unwrap();
        assert_eq!(key, again);
    }

    #[test]
    fn canonical_key_rejects_bad_input() {
        assert!(matches!(
            canonicalize_series_key("9bad", []),
            Err(ModelError::InvalidName(_))
        ));
        assert!(matches!(
            canonicalize_series_key("ok", [("1x", "v")]),
            Err(ModelError::InvalidLabelKey(_))
        ));
        assert!(matches!(
            canonicalize_series_key("ok", [("a", "v"), ("A", "w")]),
            Err(ModelError::InvalidLabelKey(_))
        ));
        let many: Vec<(String, String)> = (0..64).map(|i| (format!("k{i}"), "v".into())).collect();
        assert!(matches!(
            canonicalize_series_key("ok", many.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
            Err(ModelError::TooManyLabels(_))
        ));
        let max: Vec<(String, String)> = (0..63).map(|i| (format!("k{i}"), "v".into())).collect();
        assert!(canonicalize_series_key("ok", max.iter().map(|(k, v)| (k.as_str(), v.as_str()))).is_ok());
    }

    #[test]
    fn unit_conversions() {
        let (v, u) = convert_unit(1500.0, "ms").unwrap();
        assert_eq!(v, 1.5);
        assert_eq!(u.canonical, CanonicalUnit::Seconds);
        // 2 × 3.6e6
        let (v, u) = convert_unit(2.0, "kWh").unwrap();
        assert_eq!(v, 7.2e6);
        assert_eq!(u.canonical, CanonicalUnit::Joules);
        let (v, u) = convert_unit(50.0, "%").unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(u.canonical, CanonicalUnit::Ratio);
        let (v, _) = convert_unit(250.0, "%").unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(convert_unit(1.0, "KiB").unwrap().0, 1024.0);
        assert_eq!(convert_unit(1.0, "kB").unwrap().0, 1000.0);
        assert_eq!(convert_unit(1.0, "GiB").unwrap().0, 1_073_741_824.0);
        assert_eq!(convert_unit(3.0, "mWh").unwrap().0, 3.0 * 3.6);
        assert!(matches!(convert_unit(1.0, "furlong"), Err(ModelError::UnknownUnit(_))));
    }

    #[test]
    fn canonical_symbols_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for u in CanonicalUnit::ALL {
            assert!(seen.insert(u.symbol()));
            let (v, unit) = convert_unit(2.0, u.symbol()).unwrap();
            assert_eq!((v, unit.canonical), (2.0, u));
        }
    }

    #[test]
    fn parse_spec_line() {
        let parsed = parse_exposition_line(r#"cpu_util{host="n1"} gauge ratio 0.42 1700000000000"#).unwrap();
        let ParsedLine::Sample(s) = parsed else { panic!("expected sample") };
        assert_eq!(s.name(), "cpu_util");
        assert_eq!(s.key.label("host"), Some("n1"));
        assert_eq!(s.value, 0.42);
        assert_eq!(s.unit.canonical, CanonicalUnit::Ratio);
        assert_eq!(s.kind, SampleKind::Gauge);
        assert_eq!(s.timestamp, 1_700_000_000_000);
    }

    #[test]
    fn parse_skip_and_errors() {
        assert_eq!(parse_exposition_line("# HELP anything").unwrap(), ParsedLine::Skip);
        assert_eq!(parse_exposition_line("   ").unwrap(), ParsedLine::Skip);
        assert!(matches!(
            parse_exposition_line("x{} gauge none nan 1"),
            Err(ModelError::InvalidValue(_))
        ));
        assert!(matches!(
            parse_exposition_line("x{} gauge none inf 1"),
            Err(ModelError::InvalidValue(_))
        ));
        assert!(matches!(
            parse_exposition_line("x{} gauge parsec 1 1"),
            Err(ModelError::UnknownUnit(_))
        ));
        assert!(matches!(
            parse_exposition_line("x{} gauge none 1"),
            Err(ModelError::ParseError(_))
        ));
        assert!(matches!(
            parse_exposition_line(r#"x{a="1} gauge none 1 1"#),
            Err(ModelError::ParseError(_))
        ));
        assert!(matches!(
            parse_exposition_line("x{} histogram none 1 1"),
            Err(ModelError::ParseError(_))
        ));
        assert!(matches!(
            parse_exposition_line("x{} gauge none 1 0"),
            Err(ModelError::ParseError(_))
        ));
    }

    #[test]
    fn parse_converts_units_and_unbraced_names() {
        let ParsedLine::Sample(s) = parse_exposition_line("lat gauge ms 250 5").unwrap() else {
            panic!()
        };
        assert_eq!(s.value, 0.25);
        assert_eq!(s.unit.source_symbol, "ms");
        assert_eq!(s.to_line(), "lat{} gauge s 0.25 5");
    }

    #[test]
    fn escaped_label_values_round_trip() {
        let s = MetricSample::new(
            "m",
            &[("path", r#"a"b\c"#), ("multi", "x\ny")],
            SampleKind::Event,
            CanonicalUnit::None,
            -0.5,
            10,
        )
        .unwrap();
        let line = s.to_line();
        assert_eq!(line, r#"m{multi="x\ny",path="a\"b\\c"} event none -0.5 10"#);
        let ParsedLine::Sample(back) = parse_exposition_line(&line).unwrap() else {
            panic!()
        };
        assert_eq!((&back.key, back.value, back.timestamp, back.kind), (&s.key, s.value, s.timestamp, s.kind));
        assert_eq!(back.unit.canonical, s.unit.canonical);
        assert_eq!(s.key.to_string().parse::<SeriesKey>().unwrap(), s.key);
        assert_eq!("up".parse::<SeriesKey>().unwrap().to_string(), "up{}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample() -> impl Strategy<Value = MetricSample> {
            (
                "[a-z_][a-z0-9_]{0,12}",
                prop::collection::btree_map("[a-z][a-z0-9_]{0,6}", "[a-zA-Z0-9 =,{}\"\\\\\n]{1,10}", 0..4),
                prop::sample::select(vec![SampleKind::Gauge, SampleKind::Counter, SampleKind::Event]),
                prop::sample::select(CanonicalUnit::ALL.to_vec()),
                any::<f64>().prop_filter("finite", |v| v.is_finite()),
                1i64..i64::MAX / 2,
            )
                .prop_map(|(name, labels, kind, unit, value, ts)| {
                    let pairs: Vec<(&str, &str)> = labels.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
                    MetricSample::new(&name, &pairs, kind, unit, value, ts).unwrap()
                })
        }

        proptest! {
            #[test]
            fn exposition_round_trips(s in sample()) {
                let line = s.to_line();
                prop_assert!(!line.contains('\n'));
                let ParsedLine::Sample(back) = parse_exposition_line(&line).unwrap() else {
                    panic!("not a sample: {line}")
                };
                prop_assert_eq!(&back.key, &s.key);
                prop_assert_eq!(back.value.to_bits(), s.value.to_bits());
                prop_assert_eq!(back.timestamp, s.timestamp);
                prop_assert_eq!(back.kind, s.kind);
                prop_assert_eq!(back.unit.canonical, s.unit.canonical);
                prop_assert_eq!(back.to_line(), line);
            }
        }
    }
}
