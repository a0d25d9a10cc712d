use serde_json::Value;

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise; the key path must already
/// exist so typos are caught.
pub fn apply(doc: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| format!("unknown config key `{key}`"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(format!("empty override key in `{assignment}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_numbers_and_strings() {
        let mut doc = json!({"scheduler": {"seed": 0}, "data": {"corpus": null}, "paradigm": "medcoss"});
        apply(&mut doc, "scheduler.seed=7").unwrap();
        apply(&mut doc, "data.corpus=/tmp/c").unwrap();
        apply(&mut doc, "paradigm=er_random").unwrap();
        assert_eq!(doc, json!({"scheduler": {"seed": 7}, "data": {"corpus": "/tmp/c"}, "paradigm": "er_random"}));
    }

    #[test]
    fn unknown_keys_and_bad_syntax() {
        let mut doc = json!({"scheduler": {"seed": 0}});
        assert!(apply(&mut doc, "scheduler.sed=1").is_err());
        assert!(apply(&mut doc, "scheduler.seed.x=1").is_err());
        assert!(apply(&mut doc, "scheduler").is_err());
    }
}
