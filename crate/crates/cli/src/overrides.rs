//! Dotted `--section.field VALUE` flags derived from the config's JSON shape.

use clap::{Arg, ArgMatches, Command};
use crosstill::error::{Error, Result};
use crosstill::pipeline::PipelineConfig;
use serde_json::Value;

pub const HEADING: &str = "Config overrides";

/// Leaf paths of the default config, with their default values. The
/// top-level seed is excluded; each subcommand owns its `--seed` flag.
pub fn leaves() -> Vec<(String, Value)> {
    let root = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    collect(&root, String::new(), &mut out);
    out.retain(|(path, _)| path != "seed");
    out
}

fn collect(value: &Value, prefix: String, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect(v, path, out);
            }
        }
        leaf => out.push((prefix, leaf.clone())),
    }
}

pub fn add_args(mut cmd: Command) -> Command {
    for (path, default) in leaves() {
        cmd = cmd.arg(
            Arg::new(path.clone())
                .long(path.clone())
                .value_name("VALUE")
                .help(format!("Override `{path}` (toy default: {default})"))
                .help_heading(HEADING),
        );
    }
    cmd
}

/// Parses `raw` as the JSON type of `template`: strings stay verbatim,
/// everything else must be a JSON literal.
fn typed_value(path: &str, raw: &str, template: &Value) -> Result<Value> {
    if template.is_string() {
        return Ok(Value::String(raw.to_string()));
    }
    serde_json::from_str(raw).map_err(|_| Error::Config(format!("--{path}: cannot parse `{raw}`")))
}

fn set(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("config has no section `{part}` for --{path}")))?;
    }
    let last = parts[parts.len() - 1];
    match node.as_object_mut() {
        Some(map) => {
            map.insert(last.to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("--{path} does not name a config field"))),
    }
}

/// Base config (file or toy default) with every given override applied.
pub fn resolve(matches: &ArgMatches) -> Result<PipelineConfig> {
    let mut root = match matches.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => serde_json::to_value(PipelineConfig::default()).expect("config serializes"),
    };
    for (path, template) in leaves() {
        if let Some(raw) = matches.get_one::<String>(&path) {
            set(&mut root, &path, typed_value(&path, raw, &template)?)?;
        }
    }
    PipelineConfig::from_json(&root.to_string())
}
