//! Config layering: built-in defaults, then a JSON file, then flags.
//!
//! Files may be partial. Objects merge key by key, except that a tagged
//! object (`arch` for networks, `family` for activations) whose tag changes
//! is replaced whole, so switching architecture never inherits stale fields.

use std::fs;
use std::path::Path;

use kaconv::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

const TAGS: [&str; 2] = ["arch", "family"];

/// Overlays `over` onto `base` in place.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retagged = TAGS.iter().any(|t| matches!((b.get(*t), o.get(*t)), (Some(x), Some(y)) if x != y));
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))
}

/// `defaults` with the file at `path` (if any) merged over it.
pub fn load<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(serde_json::from_value(serde_json::to_value(defaults)?)?) };
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, read_json(path)?);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_keys_merge_and_scalars_replace() {
        let mut base = json!({"a": 1, "s": {"x": 1, "y": 2}, "list": [1, 2]});
        merge(&mut base, json!({"s": {"y": 3}, "list": [9], "new": true}));
        assert_eq!(base, json!({"a": 1, "s": {"x": 1, "y": 3}, "list": [9], "new": true}));
    }

    #[test]
    fn a_changed_tag_replaces_the_object() {
        let mut base = json!({"network": {"arch": "ka_conv_net", "blocks": [1, 1, 1, 1]}});
        merge(&mut base, json!({"network": {"arch": "vgg", "ka_layers": []}}));
        assert_eq!(base, json!({"network": {"arch": "vgg", "ka_layers": []}}));
        let mut same = json!({"act": {"family": "glinear", "intervals": 2}});
        merge(&mut same, json!({"act": {"family": "glinear", "intervals": 4}}));
        assert_eq!(same, json!({"act": {"family": "glinear", "intervals": 4}}));
    }
}
