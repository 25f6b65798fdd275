//! Seeded generator for a small restaurant-booking task with near-duplicate
//! distractor entities.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, KbScope, Split, Turn};
use crate::error::{Error, Result};
use crate::kb::{Entity, KnowledgeBase};

const NAME_FIRST: [&str; 20] = [
    "golden", "red", "silver", "blue", "royal", "lucky", "happy", "little", "grand", "jade",
    "crimson", "amber", "velvet", "copper", "ivory", "emerald", "sunny", "quiet", "rustic", "wild",
];
const NAME_SECOND: [&str; 20] = [
    "wok", "lion", "dragon", "garden", "kitchen", "house", "table", "spoon", "bistro", "lantern",
    "oak", "harbour", "orchard", "pearl", "fork", "plate", "tavern", "mill", "cellar", "grill",
];

struct AttributePool {
    name: &'static str,
    values: &'static [&'static str],
}

const POOLS: [AttributePool; 6] = [
    AttributePool {
        name: "area",
        values: &["centre", "north", "south", "east", "west", "riverside"],
    },
    AttributePool {
        name: "food",
        values: &[
            "italian", "chinese", "indian", "thai", "french", "british", "korean", "spanish",
            "turkish", "greek",
        ],
    },
    AttributePool {
        name: "pricerange",
        values: &["cheap", "moderate", "expensive"],
    },
    AttributePool {
        name: "rating",
        values: &["poor", "fair", "good", "great", "superb"],
    },
    AttributePool {
        name: "music",
        values: &["jazz", "rock", "folk", "pop", "blues"],
    },
    AttributePool {
        name: "seating",
        values: &["indoor", "outdoor", "terrace", "rooftop"],
    },
];

const EXTRA_POOL_SIZE: usize = 5;
const SESSION_SIZE: usize = 7;

/// Parameters of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    /// Attributes besides the name.
    pub n_attributes: usize,
    pub n_dialogues: usize,
    /// Near-duplicates generated for every base entity, each differing from
    /// it in exactly one attribute.
    pub distractor_rate: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_entities: 50,
            n_attributes: 4,
            n_dialogues: 500,
            distractor_rate: 2,
            seed: 0,
        }
    }
}

fn attribute_name(a: usize) -> String {
    POOLS
        .get(a)
        .map_or_else(|| format!("feature{a}"), |p| p.name.to_string())
}

fn pool_size(a: usize) -> usize {
    POOLS.get(a).map_or(EXTRA_POOL_SIZE, |p| p.values.len())
}

fn value_text(a: usize, v: usize) -> String {
    POOLS
        .get(a)
        .map_or_else(|| format!("f{a}v{v}"), |p| p.values[v].to_string())
}

fn phrase(a: usize, v: usize) -> String {
    let value = value_text(a, v);
    match POOLS.get(a).map(|p| p.name) {
        Some("area") => format!("in the {value}"),
        Some("food") => format!("serving {value} food"),
        Some("pricerange") => format!("in the {value} price range"),
        Some("rating") => format!("rated {value}"),
        Some("music") => format!("playing {value} music"),
        Some("seating") => format!("with {value} seating"),
        _ => format!("with {} {value}", attribute_name(a)),
    }
}

/// Generated task plus the user constraints behind each dialogue's first
/// turn, kept for verification.
pub(crate) struct Generated {
    pub kb: KnowledgeBase,
    pub dialogues: Vec<Dialogue>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub constraints: Vec<Vec<(String, String)>>,
}

/// Attribute subsets of size 1 or 2 whose values single out entity `i`.
fn unique_subsets(values: &[Vec<usize>], i: usize) -> Vec<Vec<usize>> {
    let n_attr = values[i].len();
    let mut candidates: Vec<Vec<usize>> = (0..n_attr).map(|a| vec![a]).collect();
    for a in 0..n_attr {
        for b in a + 1..n_attr {
            candidates.push(vec![a, b]);
        }
    }
    candidates
        .into_iter()
        .filter(|s| {
            values
                .iter()
                .enumerate()
                .all(|(j, row)| j == i || s.iter().any(|&a| row[a] != values[i][a]))
        })
        .collect()
}

fn sample_cluster(rng: &mut ChaCha8Rng, size: usize, n_attr: usize) -> Vec<Vec<usize>> {
    let base: Vec<usize> = (0..n_attr)
        .map(|a| rng.gen_range(0..pool_size(a)))
        .collect();
    let mut cluster = vec![base.clone()];
    while cluster.len() < size {
        let mut d = base.clone();
        let a = rng.gen_range(0..n_attr);
        let shift = rng.gen_range(1..pool_size(a));
        d[a] = (d[a] + shift) % pool_size(a);
        cluster.push(d);
    }
    cluster
}

pub(crate) fn generate(spec: &SyntheticSpec) -> Result<Generated> {
    if spec.n_entities == 0 || spec.n_attributes == 0 || spec.n_dialogues == 0 {
        return Err(Error::TaskSpec("all counts must be at least 1".into()));
    }
    let cluster_size = spec.distractor_rate + 1;
    if spec.n_entities < cluster_size {
        return Err(Error::TaskSpec(format!(
            "{} entities cannot hold one entity plus {} distractors",
            spec.n_entities, spec.distractor_rate
        )));
    }
    let max_names = NAME_FIRST.len() * NAME_SECOND.len();
    if spec.n_entities > max_names {
        return Err(Error::TaskSpec(format!(
            "at most {max_names} entities can be named"
        )));
    }
    let n_attr = spec.n_attributes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_clusters = spec.n_entities.div_ceil(cluster_size);
    let cluster_len = |c: usize| cluster_size.min(spec.n_entities - c * cluster_size);

    // Clusters are added one at a time; a candidate cluster is kept only if
    // every entity so far can still be singled out by one or two of its
    // attribute values.
    let mut values: Vec<Vec<usize>> = Vec::with_capacity(spec.n_entities);
    let mut restarts = 0;
    'build: loop {
        values.clear();
        for c in 0..n_clusters {
            let mut placed = false;
            for _ in 0..500 {
                let cluster = sample_cluster(&mut rng, cluster_len(c), n_attr);
                let before = values.len();
                values.extend(cluster);
                if (0..values.len()).all(|i| !unique_subsets(&values, i).is_empty()) {
                    placed = true;
                    break;
                }
                values.truncate(before);
            }
            if !placed {
                restarts += 1;
                if restarts > 20 {
                    return Err(Error::TaskSpec(format!(
                        "cannot make {} entities distinguishable with {} attribute(s)",
                        spec.n_entities, n_attr
                    )));
                }
                continue 'build;
            }
        }
        break;
    }

    let mut names: Vec<(usize, usize)> = (0..NAME_FIRST.len())
        .flat_map(|a| (0..NAME_SECOND.len()).map(move |b| (a, b)))
        .collect();
    names.shuffle(&mut rng);
    let width = spec.n_entities.to_string().len().max(3);
    let mut entities = Vec::with_capacity(spec.n_entities);
    let mut name_text = Vec::with_capacity(spec.n_entities);
    for (i, row) in values.iter().enumerate() {
        let (a, b) = names[i];
        let name = format!("{} {}", NAME_FIRST[a], NAME_SECOND[b]);
        let mut attrs = vec![("name".to_string(), name.clone())];
        for (k, &v) in row.iter().enumerate() {
            attrs.push((attribute_name(k), value_text(k, v)));
        }
        entities.push(Entity::new(&format!("e{i:0width$}"), attrs, "name")?);
        name_text.push(name);
    }
    let kb = KnowledgeBase::new(entities, "name")?;

    let subsets: Vec<Vec<Vec<usize>>> = (0..values.len())
        .map(|i| unique_subsets(&values, i))
        .collect();
    let n_train = spec.n_dialogues * 8 / 10;
    let n_valid = spec.n_dialogues * 9 / 10;
    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    let mut constraints = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues {
        let gold = rng.gen_range(0..values.len());
        let row = &values[gold];
        let name = &name_text[gold];
        let gold_id = kb.entity(gold).id().to_string();
        let subset = subsets[gold]
            .choose(&mut rng)
            .expect("checked non-empty")
            .clone();

        let wants: Vec<String> = subset.iter().map(|&a| phrase(a, row[a])).collect();
        let user1 = match rng.gen_range(0..3) {
            0 => format!("i am looking for a restaurant {} .", wants.join(" and ")),
            1 => format!("can you find me a place {} ?", wants.join(" and ")),
            _ => format!("i need somewhere to eat {} .", wants.join(" and ")),
        };
        let free: Vec<usize> = (0..n_attr).filter(|a| !subset.contains(a)).collect();
        let told = *free.choose(&mut rng).unwrap_or(&subset[0]);
        let system1 = match rng.gen_range(0..3) {
            0 => format!("how about {name} ? it is {} .", phrase(told, row[told])),
            1 => format!("{name} is a nice place {} .", phrase(told, row[told])),
            _ => format!("i recommend {name} , it is {} .", phrase(told, row[told])),
        };
        let mut turns = vec![Turn {
            user: user1,
            system: system1,
            gold_entity_ids: Some(vec![gold_id.clone()]),
            gold_values: Some(vec![name.clone(), value_text(told, row[told])]),
        }];
        if rng.gen_bool(0.5) {
            let rest: Vec<usize> = free.iter().copied().filter(|&a| a != told).collect();
            let asked = *rest.choose(&mut rng).unwrap_or(&told);
            let attr = attribute_name(asked);
            let value = value_text(asked, row[asked]);
            let user2 = match rng.gen_range(0..2) {
                0 => format!("what is its {attr} ?"),
                _ => format!("can you tell me the {attr} ?"),
            };
            turns.push(Turn {
                user: user2,
                system: format!("the {attr} of {name} is {value} ."),
                gold_entity_ids: Some(vec![gold_id.clone()]),
                gold_values: Some(vec![name.clone(), value]),
            });
        }

        // Condensed knowledge base: the gold cluster topped up with random
        // other entities, in KB order.
        let c = gold / cluster_size;
        let mut scope: Vec<usize> = (c * cluster_size..c * cluster_size + cluster_len(c)).collect();
        let mut others: Vec<usize> = (0..values.len()).filter(|i| !scope.contains(i)).collect();
        others.shuffle(&mut rng);
        let room = SESSION_SIZE.saturating_sub(scope.len());
        scope.extend(others.into_iter().take(room));
        scope.sort_unstable();

        let split = if d < n_train.max(1) {
            Split::Train
        } else if d < n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        dialogues.push(Dialogue {
            id: format!("syn{}-{d:05}", spec.seed),
            split,
            kb_scope: KbScope::Session(
                scope
                    .iter()
                    .map(|&i| kb.entity(i).id().to_string())
                    .collect(),
            ),
            turns,
        });
        constraints.push(
            subset
                .iter()
                .map(|&a| (attribute_name(a), value_text(a, row[a])))
                .collect(),
        );
    }
    Ok(Generated {
        kb,
        dialogues,
        constraints,
    })
}

/// Builds a knowledge base and dialogues from `spec`; identical specs give
/// identical output.
pub fn make_synthetic_task(spec: &SyntheticSpec) -> Result<(KnowledgeBase, Vec<Dialogue>)> {
    let g = generate(spec)?;
    Ok((g.kb, g.dialogues))
}
