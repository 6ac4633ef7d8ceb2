//! Pulling JSON out of free-form model replies.

use serde_json::{Map, Value};

use crate::corpus::EntityMention;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonShape {
    Array,
    Object,
}

/// The first well-formed JSON value of the requested shape in `text`.
/// Surrounding prose and markdown code fences are skipped.
pub fn first_json(text: &str, shape: JsonShape) -> Option<Value> {
    let opener = match shape {
        JsonShape::Array => '[',
        JsonShape::Object => '{',
    };
    for (idx, _) in text.match_indices(opener) {
        let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            let ok = match shape {
                JsonShape::Array => v.is_array(),
                JsonShape::Object => v.is_object(),
            };
            if ok {
                return Some(v);
            }
        }
    }
    None
}

/// Reads mentions from one JSON object in either the
/// `{"entity_text": .., "entity_label": ..}` form or the `{"text": "label"}`
/// pair form. Non-string values are skipped.
pub fn mentions_from_object(obj: &Map<String, Value>) -> Vec<EntityMention> {
    if let (Some(Value::String(t)), Some(Value::String(l))) =
        (obj.get("entity_text"), obj.get("entity_label"))
    {
        return vec![EntityMention::new(t.as_str(), l.as_str())];
    }
    obj.iter()
        .filter_map(|(k, v)| v.as_str().map(|l| EntityMention::new(k.as_str(), l)))
        .collect()
}

/// Mentions from a JSON array of mention objects. `None` when the array holds
/// something other than objects.
pub fn mentions_from_array(items: &[Value]) -> Option<Vec<EntityMention>> {
    let mut out = Vec::new();
    for item in items {
        out.extend(mentions_from_object(item.as_object()?));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn skips_prose_and_fences() {
        let text = "Sure! Here you go:\n```json\n[{\"Lily\": \"PER\"}]\n```\nHope that [helps].";
        assert_eq!(
            first_json(text, JsonShape::Array),
            Some(json!([{"Lily": "PER"}]))
        );
    }

    #[test]
    fn skips_malformed_candidates() {
        let text = "[not json] then [1, 2]";
        assert_eq!(first_json(text, JsonShape::Array), Some(json!([1, 2])));
        assert_eq!(first_json("no json here", JsonShape::Array), None);
        assert_eq!(
            first_json("x {\"a\": [1]} y", JsonShape::Object),
            Some(json!({"a": [1]}))
        );
    }

    #[test]
    fn nested_array_inside_object_is_found_when_asked_for_array() {
        // The object is not an array; its inner array is the first array.
        let v = first_json("{\"PER\": [\"a\"]}", JsonShape::Array).unwrap();
        assert_eq!(v, json!(["a"]));
    }

    #[test]
    fn mention_forms() {
        let v = json!([
            {"Lily": "PER"},
            {"entity_text": "NASA", "entity_label": "ORG"},
            {"Paris": "LOC", "Mars": "LOC"},
            {"odd": 3}
        ]);
        let ms = mentions_from_array(v.as_array().unwrap()).unwrap();
        assert_eq!(
            ms,
            vec![
                EntityMention::new("Lily", "PER"),
                EntityMention::new("NASA", "ORG"),
                EntityMention::new("Paris", "LOC"),
                EntityMention::new("Mars", "LOC"),
            ]
        );
        assert!(mentions_from_array(json!(["Lily"]).as_array().unwrap()).is_none());
    }
}
