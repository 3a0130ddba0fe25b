//! Shared pieces of the `stack` and `scenario` binaries.

pub mod supervisor;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use obstack_core::stack::{self, Component, StackConfig, StackError, ValidationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn print_report(out: &mut dyn Write, report: &ValidationReport) -> std::io::Result<()> {
    for e in &report.errors {
        writeln!(out, "error: {e}")?;
    }
    for w in &report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    if report.is_valid() {
        writeln!(out, "ok: configuration is valid ({} warning(s))", report.warnings.len())?;
    } else {
        writeln!(out, "invalid: {} error(s), {} warning(s)", report.errors.len(), report.warnings.len())?;
    }
    Ok(())
}

/// `stack validate`: exit 0 when valid, 1 otherwise.
pub fn cmd_validate(config: &Path, out: &mut dyn Write) -> std::io::Result<i32> {
    match StackConfig::load(config) {
        Ok(cfg) => {
            let report = cfg.validate();
            print_report(out, &report)?;
            Ok(if report.is_valid() { EXIT_OK } else { EXIT_INVALID })
        }
        Err(e) => {
            writeln!(out, "error: {e}")?;
            Ok(EXIT_INVALID)
        }
    }
}

/// Env file for a config: the explicit override, else the config's
/// `env_file`. A configured but missing file yields an empty map.
pub fn load_env(cfg: &StackConfig, explicit: Option<&Path>) -> Result<BTreeMap<String, String>, StackError> {
    match explicit {
        Some(p) => stack::load_env_file(p),
        None => match cfg.env_path() {
            Some(p) => match stack::load_env_file(&p) {
                Err(StackError::FileNotFound(p)) => {
                    tracing::warn!(path = %p.display(), "env file not found; using the process environment");
                    Ok(BTreeMap::new())
                }
                other => other,
            },
            None => Ok(BTreeMap::new()),
        },
    }
}

/// `stack plan`: writes the plan to `output` or `out`.
pub fn cmd_plan(config: &Path, env_file: Option<&Path>, output: Option<&Path>, out: &mut dyn Write) -> std::io::Result<i32> {
    let cfg = match StackConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            writeln!(out, "error: {e}")?;
            return Ok(EXIT_INVALID);
        }
    };
    let report = cfg.validate();
    if !report.is_valid() {
        print_report(out, &report)?;
        return Ok(EXIT_INVALID);
    }
    let env = match load_env(&cfg, env_file) {
        Ok(e) => e,
        Err(e) => {
            writeln!(out, "error: {e}")?;
            return Ok(EXIT_RUNTIME);
        }
    };
    let text = match stack::merge_components(&cfg, &env).and_then(|p| stack::render_plan(&p)) {
        Ok(t) => t,
        Err(e) => {
            writeln!(out, "error: {e}")?;
            return Ok(EXIT_INVALID);
        }
    };
    match output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &text) {
                writeln!(out, "error: cannot write {}: {e}", path.display())?;
                return Ok(EXIT_RUNTIME);
            }
            writeln!(out, "plan written to {}", path.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

pub fn cmd_components_list(out: &mut dyn Write) -> std::io::Result<i32> {
    writeln!(out, "{:<10} {:<22} {:<10} {:<32} description", "component", "layer", "process", "starts after")?;
    for c in Component::ALL {
        let after: Vec<&str> = c.startup_after().iter().map(|d| d.as_str()).collect();
        writeln!(
            out,
            "{:<10} {:<22} {:<10} {:<32} {}",
            c.as_str(),
            c.layer(),
            c.process(),
            if after.is_empty() { "-".to_string() } else { after.join(",") },
            c.description()
        )?;
    }
    Ok(EXIT_OK)
}

/// Process groups of a valid config in start order, one entry per
/// process.
pub fn process_groups(cfg: &StackConfig) -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    for c in stack::startup_order(&cfg.enabled()) {
        let p = c.process().to_string();
        if !groups.contains(&p) {
            groups.push(p);
        }
    }
    groups
}

/// Absolute form of `p`, so children started elsewhere find the file.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_start_order() {
        let cfg = StackConfig::parse(
            r#"components = ["api", "dashboard", "collector", "gateway", "tsdb", "metastore"]"#,
            "x",
        )
        .unwrap();
        assert_eq!(process_groups(&cfg), ["server", "collector"]);
    }

    #[test]
    fn components_table_lists_all() {
        let mut out = Vec::new();
        assert_eq!(cmd_components_list(&mut out).unwrap(), EXIT_OK);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.contains("dashboard"));
    }
}
