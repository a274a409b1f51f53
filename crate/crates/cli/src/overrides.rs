//! `--set key=value` overrides on a JSON document.

use anyhow::{anyhow, bail, Result};
use serde_json::Value;

/// Apply `a.b.c=value` assignments in order. The value is parsed as JSON
/// when possible and taken as a string otherwise. Every key on the path must
/// already exist, so typos fail loudly instead of being ignored.
pub fn apply(doc: &mut Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("override '{s}' is not of the form key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        let mut node = &mut *doc;
        let keys: Vec<&str> = path.split('.').collect();
        for (depth, key) in keys.iter().enumerate() {
            let obj = match node {
                Value::Object(obj) => obj,
                _ => bail!("override '{path}': '{}' is not an object", keys[..depth].join(".")),
            };
            node = obj
                .get_mut(*key)
                .ok_or_else(|| anyhow!("override '{path}': unknown key '{key}'"))?;
        }
        *node = value;
    }
    Ok(())
}
