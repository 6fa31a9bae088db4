use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> crate::Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| crate::Error::Config(format!("empty key `{path}`")))?;
    let mut cur = table;
    for k in keys {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| crate::Error::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `dotted.key=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(text: &str) -> crate::Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| crate::Error::Config(format!("override `{text}` is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Built-in defaults, overlaid by a TOML file, overlaid by explicit overrides.
pub fn layered_config<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&str>,
    overrides: &[(String, Value)],
) -> crate::Result<T> {
    let cfg_err = |e: &dyn std::fmt::Display| crate::Error::Config(e.to_string());
    let mut table = match Value::try_from(defaults).map_err(|e| cfg_err(&e))? {
        Value::Table(t) => t,
        _ => return Err(crate::Error::Config("configuration must serialize to a table".into())),
    };
    if let Some(text) = file {
        merge(&mut table, toml::from_str::<Table>(text).map_err(|e| cfg_err(&e))?);
    }
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    Value::Table(table).try_into().map_err(|e| cfg_err(&e))
}
