//! Knowledge base of attribute-value entities.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Lowercase, trim, collapse internal whitespace and strip punctuation
/// from both ends.
pub fn normalize_value(raw: &str) -> String {
    let collapsed = raw
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    collapsed
        .trim_matches(|c: char| !c.is_alphanumeric())
        .trim()
        .to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    id: String,
    attributes: Vec<(String, String)>,
    name_value: String,
}

impl Entity {
    pub fn new(id: &str, attributes: Vec<(String, String)>, name_attribute: &str) -> Result<Self> {
        if id.is_empty() {
            return Err(Error::Ingestion("entity id must be non-empty".into()));
        }
        if attributes.is_empty() {
            return Err(Error::Ingestion(format!("entity {id} has no attributes")));
        }
        if let Some((a, _)) = attributes.iter().find(|(a, _)| a.is_empty()) {
            return Err(Error::Ingestion(format!(
                "entity {id} has an empty attribute name {a:?}"
            )));
        }
        let name_value = attributes
            .iter()
            .find(|(a, _)| a == name_attribute)
            .map(|(_, v)| normalize_value(v))
            .ok_or_else(|| {
                Error::Ingestion(format!(
                    "entity {id} lacks the name attribute {name_attribute:?}"
                ))
            })?;
        Ok(Entity {
            id: id.to_string(),
            attributes,
            name_value,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn attributes(&self) -> &[(String, String)] {
        &self.attributes
    }

    /// Normalized value of the name attribute.
    pub fn name_value(&self) -> &str {
        &self.name_value
    }

    pub fn value(&self, attribute: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(a, _)| a == attribute)
            .map(|(_, v)| v.as_str())
    }
}

/// Plain-text rendering used by the entity encoder and the generator:
/// `attr1 value1 ; attr2 value2 ; ...` with normalized values.
pub fn flatten_entity(e: &Entity) -> String {
    e.attributes
        .iter()
        .map(|(a, v)| format!("{a} {}", normalize_value(v)))
        .collect::<Vec<_>>()
        .join(" ; ")
}

/// One KB value found in a text.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mention {
    pub entity_id: String,
    pub attribute: String,
    pub value: String,
}

#[derive(Clone, Debug)]
struct ValuePattern {
    tokens: Vec<String>,
    value: String,
    /// (entity index, attribute) pairs carrying this value.
    owners: Vec<(usize, String)>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    name_attribute: String,
    value_vocabulary: BTreeSet<String>,
    id_index: HashMap<String, usize>,
    patterns: Vec<ValuePattern>,
    by_first_token: HashMap<String, Vec<usize>>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<Entity>, name_attribute: &str) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Ingestion("knowledge base has no entities".into()));
        }
        let mut id_index = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if id_index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate entity id {}", e.id)));
            }
        }
        let mut value_owners: std::collections::BTreeMap<String, Vec<(usize, String)>> =
            Default::default();
        for (i, e) in entities.iter().enumerate() {
            for (a, v) in &e.attributes {
                let norm = normalize_value(v);
                if !norm.is_empty() {
                    value_owners.entry(norm).or_default().push((i, a.clone()));
                }
            }
        }
        let value_vocabulary = value_owners.keys().cloned().collect();
        let mut patterns = Vec::new();
        let mut by_first_token: HashMap<String, Vec<usize>> = HashMap::new();
        for (value, owners) in value_owners {
            let tokens = tokenize(&value);
            if tokens.is_empty() {
                continue;
            }
            by_first_token
                .entry(tokens[0].clone())
                .or_default()
                .push(patterns.len());
            patterns.push(ValuePattern {
                tokens,
                value,
                owners,
            });
        }
        Ok(KnowledgeBase {
            entities,
            name_attribute: name_attribute.to_string(),
            value_vocabulary,
            id_index,
            patterns,
            by_first_token,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, index: usize) -> &Entity {
        &self.entities[index]
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn name_attribute(&self) -> &str {
        &self.name_attribute
    }

    pub fn value_vocabulary(&self) -> &BTreeSet<String> {
        &self.value_vocabulary
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    /// Attribute names in first-seen order.
    pub fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.entities {
            for (a, _) in &e.attributes {
                if !names.contains(a) {
                    names.push(a.clone());
                }
            }
        }
        names
    }

    /// Indices of the patterns whose tokens occur contiguously in `text`.
    fn matched_patterns(&self, text: &str) -> Vec<usize> {
        let toks = tokenize(text);
        let mut hits = BTreeSet::new();
        for start in 0..toks.len() {
            let Some(cands) = self.by_first_token.get(&toks[start]) else {
                continue;
            };
            for &p in cands {
                let pat = &self.patterns[p].tokens;
                if start + pat.len() <= toks.len() && toks[start..start + pat.len()] == pat[..] {
                    hits.insert(p);
                }
            }
        }
        hits.into_iter().collect()
    }

    /// Every KB value appearing in `text` on token boundaries, with the
    /// entities and attributes that carry it.
    pub fn find_value_mentions(&self, text: &str) -> BTreeSet<Mention> {
        let mut out = BTreeSet::new();
        for p in self.matched_patterns(text) {
            let pat = &self.patterns[p];
            for (i, attr) in &pat.owners {
                out.insert(Mention {
                    entity_id: self.entities[*i].id.clone(),
                    attribute: attr.clone(),
                    value: pat.value.clone(),
                });
            }
        }
        out
    }

    /// Distinct KB values appearing in `text`.
    pub fn mentioned_values(&self, text: &str) -> BTreeSet<String> {
        self.matched_patterns(text)
            .into_iter()
            .map(|p| self.patterns[p].value.clone())
            .collect()
    }

    /// Per entity, how many of its attribute values appear in `text`.
    pub fn mention_counts(&self, text: &str) -> Vec<usize> {
        let mut counts = vec![0; self.entities.len()];
        for p in self.matched_patterns(text) {
            for (i, _) in &self.patterns[p].owners {
                counts[*i] += 1;
            }
        }
        counts
    }

    /// Whether the entity's name value is mentioned in `text`.
    pub fn name_mentioned(&self, index: usize, text: &str) -> bool {
        let name = &self.entities[index].name_value;
        self.mentioned_values(text).contains(name)
    }

    pub fn from_json(text: &str, name_attribute: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Ingestion(format!("malformed knowledge base JSON: {e}")))?;
        let Value::Array(items) = value else {
            return Err(Error::Ingestion(
                "knowledge base must be a JSON array of objects".into(),
            ));
        };
        let mut entities = Vec::with_capacity(items.len());
        for (pos, item) in items.into_iter().enumerate() {
            let Value::Object(map) = item else {
                return Err(Error::Ingestion(format!("entry {pos} is not an object")));
            };
            entities.push(entity_from_object(pos, map, name_attribute)?);
        }
        KnowledgeBase::new(entities, name_attribute)
    }

    pub fn to_json(&self) -> Result<String> {
        let items: Vec<Value> = self
            .entities
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert("id".into(), Value::String(e.id.clone()));
                for (a, v) in &e.attributes {
                    m.insert(a.clone(), Value::String(v.clone()));
                }
                Value::Object(m)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&items)?)
    }
}

fn entity_from_object(pos: usize, map: Map<String, Value>, name_attribute: &str) -> Result<Entity> {
    let id = match map.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(Error::Ingestion(format!(
                "entry {pos}: \"id\" must be a string"
            )))
        }
        None => return Err(Error::Ingestion(format!("entry {pos} has no \"id\""))),
    };
    let mut attributes = Vec::new();
    for (k, v) in map {
        if k == "id" {
            continue;
        }
        match v {
            Value::String(s) => attributes.push((k, s)),
            other => {
                return Err(Error::Ingestion(format!(
                    "entity {id}: attribute {k:?} has non-string value {other}"
                )))
            }
        }
    }
    Entity::new(&id, attributes, name_attribute)
}

/// Reads a UTF-8 JSON array of flat, string-valued objects with an `id`.
pub fn load_kb(path: &Path, name_attribute: &str) -> Result<KnowledgeBase> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    KnowledgeBase::from_json(&text, name_attribute)
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    fs::write(path, kb.to_json()? + "\n").map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attrs(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, v)| (a.to_string(), v.to_string()))
            .collect()
    }

    fn toy() -> KnowledgeBase {
        KnowledgeBase::from_json(
            r#"[{"id":"r1","name":"Pizza Hut","area":"centre","food":"italian"},
                {"id":"r2","name":"Golden Wok","area":"north","food":"chinese"}]"#,
            "name",
        )
        .unwrap()
    }

    #[test]
    fn name_value_is_normalized() {
        let kb = KnowledgeBase::from_json(
            r#"[{"id":"r1","name":"Pizza Hut","area":"centre"}]"#,
            "name",
        )
        .unwrap();
        assert_eq!(kb.entity(0).name_value(), "pizza hut");
        assert_eq!(normalize_value("  The   Golden  Wok!! "), "the golden wok");
    }

    #[test]
    fn ingestion_errors() {
        assert!(matches!(
            KnowledgeBase::from_json("[]", "name"),
            Err(Error::Ingestion(_))
        ));
        let dup = r#"[{"id":"a","name":"x"},{"id":"a","name":"y"}]"#;
        assert!(matches!(
            KnowledgeBase::from_json(dup, "name"),
            Err(Error::Ingestion(m)) if m.contains("duplicate")
        ));
        let bad = r#"[{"id":"e7","name":"x","stars":4}]"#;
        match KnowledgeBase::from_json(bad, "name") {
            Err(Error::Ingestion(m)) => assert!(m.contains("e7"), "{m}"),
            other => panic!("{other:?}"),
        }
        let no_attrs = r#"[{"id":"e1"}]"#;
        assert!(KnowledgeBase::from_json(no_attrs, "name").is_err());
    }

    #[test]
    fn preserves_file_order() {
        let kb = toy();
        assert_eq!(kb.entity(0).id(), "r1");
        assert_eq!(kb.entity(1).id(), "r2");
        assert_eq!(kb.attribute_names(), ["name", "area", "food"]);
        assert_eq!(kb.index_of("r2"), Some(1));
    }

    #[test]
    fn flatten_rendering() {
        let e = Entity::new(
            "x",
            attrs(&[("name", "pizza hut"), ("area", "centre")]),
            "name",
        )
        .unwrap();
        assert_eq!(flatten_entity(&e), "name pizza hut ; area centre");
        let single = Entity::new("y", attrs(&[("name", "wok")]), "name").unwrap();
        assert_eq!(flatten_entity(&single), "name wok");
    }

    #[test]
    fn mentions_on_token_boundaries() {
        let kb = toy();
        let found: BTreeSet<String> = kb
            .find_value_mentions("book pizza hut in the centre")
            .into_iter()
            .map(|m| m.value)
            .collect();
        assert_eq!(
            found,
            ["centre", "pizza hut"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        );
        assert!(kb.find_value_mentions("").is_empty());
        assert!(kb.find_value_mentions("a centred design").is_empty());
        assert_eq!(
            kb.mention_counts("pizza hut , centre , chinese"),
            vec![2, 1]
        );
        assert!(kb.name_mentioned(1, "I liked Golden Wok."));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.json");
        let kb = toy();
        save_kb(&kb, &path).unwrap();
        let again = load_kb(&path, "name").unwrap();
        assert_eq!(again.entities(), kb.entities());
    }

    proptest! {
        #[test]
        fn mentions_are_monotone(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
            let kb = toy();
            let before = kb.find_value_mentions(&a);
            let after = kb.find_value_mentions(&format!("{a} {b}"));
            prop_assert!(before.is_subset(&after));
        }

        #[test]
        fn flatten_is_injective_without_separators(
            vals in proptest::collection::vec(("[a-c]{1,2}", "[a-c]{1,2}"), 2..8)
        ) {
            // Brute-force collision scan over every pair of generated entities.
            let entities: Vec<Entity> = vals
                .iter()
                .enumerate()
                .map(|(i, (n, a))| {
                    Entity::new(&format!("e{i}"), attrs(&[("name", n), ("area", a)]), "name").unwrap()
                })
                .collect();
            for x in &entities {
                for y in &entities {
                    if x.attributes() != y.attributes() {
                        prop_assert_ne!(flatten_entity(x), flatten_entity(y));
                    }
                }
            }
        }
    }
}
