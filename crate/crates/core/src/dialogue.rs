//! Dialogue datasets: turns, contexts, JSONL persistence and a synthetic
//! restaurant-booking task.

mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

pub use synthetic::{make_synthetic_task, SyntheticSpec};

/// Separator placed between utterances when a context is flattened.
pub const TURN_SEPARATOR: &str = " <sep> ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity_ids: Option<Vec<String>>,
    /// Annotated gold values for Entity F1; derived from the gold entities
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_values: Option<Vec<String>>,
}

/// Which entities a dialogue is grounded in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KbScope {
    Global,
    Session(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KbScopeRepr {
    Word(String),
    Ids(Vec<String>),
}

impl Serialize for KbScope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KbScope::Global => KbScopeRepr::Word("global".into()).serialize(s),
            KbScope::Session(ids) => KbScopeRepr::Ids(ids.clone()).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for KbScope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match KbScopeRepr::deserialize(d)? {
            KbScopeRepr::Word(w) if w == "global" => Ok(KbScope::Global),
            KbScopeRepr::Word(w) => Err(serde::de::Error::custom(format!(
                "kb_scope must be \"global\" or a list of ids, got {w:?}"
            ))),
            KbScopeRepr::Ids(ids) => Ok(KbScope::Session(ids)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "dev", alias = "validation")]
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub kb_scope: KbScope,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Context for 1-based turn `t`: u_1, r_1, ..., u_{t-1}, r_{t-1}, u_t.
    pub fn context(&self, t: usize) -> Result<Context> {
        if t == 0 || t > self.turns.len() {
            return Err(Error::Contract(format!(
                "dialogue {} has {} turns, asked for turn {t}",
                self.id,
                self.turns.len()
            )));
        }
        let mut segments = Vec::with_capacity(2 * t - 1);
        for turn in &self.turns[..t - 1] {
            segments.push(turn.user.clone());
            segments.push(turn.system.clone());
        }
        segments.push(self.turns[t - 1].user.clone());
        Ok(Context {
            turn_index: t,
            segments,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Context {
    pub turn_index: usize,
    pub segments: Vec<String>,
}

impl Context {
    /// Single-utterance context, as typed into the chat loop.
    pub fn from_segments(segments: Vec<String>) -> Result<Self> {
        if segments.len() % 2 == 0 {
            return Err(Error::Contract(format!(
                "a context has an odd number of utterances, got {}",
                segments.len()
            )));
        }
        Ok(Context {
            turn_index: segments.len().div_ceil(2),
            segments,
        })
    }

    pub fn text(&self) -> String {
        self.segments.join(TURN_SEPARATOR)
    }
}

/// One training or evaluation example: a turn together with its context.
#[derive(Clone, Debug)]
pub struct Sample {
    pub dialogue_id: String,
    pub context: Context,
    pub response: String,
    pub gold_entity_ids: Option<Vec<String>>,
    pub gold_values: BTreeSet<String>,
    pub scope: KbScope,
}

/// Gold values of a turn: the annotation if present, otherwise the values
/// of the gold entities that appear in the reference response.
pub fn gold_value_set(turn: &Turn, kb: &KnowledgeBase) -> BTreeSet<String> {
    if let Some(values) = &turn.gold_values {
        return values
            .iter()
            .map(|v| crate::kb::normalize_value(v))
            .collect();
    }
    let Some(ids) = &turn.gold_entity_ids else {
        return BTreeSet::new();
    };
    let owned: BTreeSet<String> = ids
        .iter()
        .filter_map(|id| kb.index_of(id))
        .flat_map(|i| {
            kb.entity(i)
                .attributes()
                .iter()
                .map(|(_, v)| crate::kb::normalize_value(v))
        })
        .collect();
    kb.mentioned_values(&turn.system)
        .into_iter()
        .filter(|v| owned.contains(v))
        .collect()
}

/// Flattens every turn of the dialogues in `split` into samples, in file order.
pub fn samples(dialogues: &[Dialogue], split: Split, kb: &KnowledgeBase) -> Vec<Sample> {
    let mut out = Vec::new();
    for d in dialogues.iter().filter(|d| d.split == split) {
        for (i, turn) in d.turns.iter().enumerate() {
            out.push(Sample {
                dialogue_id: d.id.clone(),
                context: d.context(i + 1).expect("turn index in range"),
                response: turn.system.clone(),
                gold_entity_ids: turn.gold_entity_ids.clone(),
                gold_values: gold_value_set(turn, kb),
                scope: d.kb_scope.clone(),
            });
        }
    }
    out
}

fn validate(d: &Dialogue, kb: &KnowledgeBase) -> Result<()> {
    if d.turns.is_empty() {
        return Err(Error::Load(format!("dialogue {} has no turns", d.id)));
    }
    for (t, turn) in d.turns.iter().enumerate() {
        for id in turn.gold_entity_ids.iter().flatten() {
            if kb.index_of(id).is_none() {
                return Err(Error::Load(format!(
                    "dialogue {} turn {}: unknown gold entity id {id:?}",
                    d.id,
                    t + 1
                )));
            }
        }
    }
    if let KbScope::Session(ids) = &d.kb_scope {
        if let Some(id) = ids.iter().find(|id| kb.index_of(id).is_none()) {
            return Err(Error::Load(format!(
                "dialogue {}: unknown entity id {id:?} in kb_scope",
                d.id
            )));
        }
    }
    Ok(())
}

/// Parses JSON-lines dialogues and checks every entity reference against `kb`.
pub fn parse_dialogues(text: &str, kb: &KnowledgeBase) -> Result<Vec<Dialogue>> {
    let mut out: Vec<Dialogue> = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue =
            serde_json::from_str(line).map_err(|e| Error::Load(format!("line {}: {e}", n + 1)))?;
        validate(&d, kb)?;
        if !seen.insert(d.id.clone()) {
            return Err(Error::Load(format!("duplicate dialogue id {}", d.id)));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_dialogues(path: &Path, kb: &KnowledgeBase) -> Result<Vec<Dialogue>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_dialogues(&text, kb)
}

pub fn save_dialogues(dialogues: &[Dialogue], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    for d in dialogues {
        let line = serde_json::to_string(d)?;
        writeln!(file, "{line}").map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_json(
            r#"[{"id":"r1","name":"Pizza Hut","area":"centre"},
                {"id":"r2","name":"Golden Wok","area":"north"}]"#,
            "name",
        )
        .unwrap()
    }

    const ONE_TURN: &str = r#"{"id":"d1","split":"train","kb_scope":"global","turns":[{"user":"food in the centre","system":"pizza hut is in the centre","gold_entity_ids":["r1"]}]}"#;

    #[test]
    fn one_turn_dialogue_loads() {
        let ds = parse_dialogues(ONE_TURN, &kb()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].turns.len(), 1);
        assert_eq!(ds[0].kb_scope, KbScope::Global);
    }

    #[test]
    fn unknown_gold_id_is_named() {
        let bad = ONE_TURN.replace("[\"r1\"]", "[\"r9\"]");
        match parse_dialogues(&bad, &kb()) {
            Err(Error::Load(m)) => {
                assert!(
                    m.contains("r9") && m.contains("d1") && m.contains("turn 1"),
                    "{m}"
                )
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let kb = kb();
        let mut ds = parse_dialogues(ONE_TURN, &kb).unwrap();
        ds.push(Dialogue {
            id: "d2".into(),
            split: Split::Test,
            kb_scope: KbScope::Session(vec!["r2".into()]),
            turns: vec![Turn {
                user: "north?".into(),
                system: "golden wok".into(),
                gold_entity_ids: None,
                gold_values: Some(vec!["golden wok".into()]),
            }],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dialogues(&ds, &path).unwrap();
        assert_eq!(load_dialogues(&path, &kb).unwrap(), ds);
    }

    #[test]
    fn context_grows_by_prefix_extension() {
        let d = Dialogue {
            id: "d".into(),
            split: Split::Train,
            kb_scope: KbScope::Global,
            turns: (0..4)
                .map(|i| Turn {
                    user: format!("u{i}"),
                    system: format!("r{i}"),
                    gold_entity_ids: None,
                    gold_values: None,
                })
                .collect(),
        };
        for t in 1..=4 {
            let c = d.context(t).unwrap();
            assert_eq!(c.segments.len(), 2 * t - 1);
            if t > 1 {
                let prev = d.context(t - 1).unwrap();
                assert_eq!(c.segments[..2 * t - 3], prev.segments[..]);
                assert_eq!(c.segments[2 * t - 3], format!("r{}", t - 2));
            }
        }
        assert!(d.context(0).is_err() && d.context(5).is_err());
        assert_eq!(d.context(2).unwrap().text(), "u0 <sep> r0 <sep> u1");
    }

    #[test]
    fn default_gold_values_come_from_the_reference() {
        let kb = kb();
        let turn = Turn {
            user: "x".into(),
            system: "pizza hut is in the centre , not the north".into(),
            gold_entity_ids: Some(vec!["r1".into()]),
            gold_values: None,
        };
        let gold: Vec<String> = gold_value_set(&turn, &kb).into_iter().collect();
        assert_eq!(gold, ["centre", "pizza hut"]);
    }
}
