//! Triple store: dense ids, text mentions, splits, train-only adjacency and
//! the filtered-ranking answer index.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.txt";
pub const VALID_FILE: &str = "valid.txt";
pub const TEST_FILE: &str = "test.txt";
pub const ENTITY_LABELS: &str = "entities.json";
pub const RELATION_LABELS: &str = "relations.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Valid => VALID_FILE,
            Split::Test => TEST_FILE,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

/// Which side of a triple a query asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(e, r, ?)`
    Tail,
    /// `(?, r, e)`
    Head,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tail" => Ok(Direction::Tail),
            "head" => Ok(Direction::Head),
            other => Err(Error::arg(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Outgoing,
    Incoming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub relation: RelationId,
    pub other: EntityId,
    pub orientation: Orientation,
}

/// Bijective id ↔ mention tables.
#[derive(Clone, Debug, Default)]
pub struct MentionTable {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_lookup: HashMap<String, EntityId>,
    relation_lookup: HashMap<String, RelationId>,
}

impl MentionTable {
    fn build(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut entity_lookup = HashMap::with_capacity(entities.len());
        for (i, m) in entities.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::arg(format!("entity {i} has an empty mention")));
            }
            if entity_lookup.insert(m.clone(), EntityId(i as u32)).is_some() {
                return Err(Error::arg(format!("entity mention {m:?} is not unique")));
            }
        }
        let mut relation_lookup = HashMap::with_capacity(relations.len());
        for (i, m) in relations.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::arg(format!("relation {i} has an empty mention")));
            }
            if relation_lookup.insert(m.clone(), RelationId(i as u32)).is_some() {
                return Err(Error::arg(format!("relation mention {m:?} is not unique")));
            }
        }
        Ok(MentionTable {
            entities,
            relations,
            entity_lookup,
            relation_lookup,
        })
    }

    pub fn entity(&self, e: EntityId) -> &str {
        &self.entities[e.index()]
    }

    pub fn relation(&self, r: RelationId) -> &str {
        &self.relations[r.index()]
    }

    pub fn entity_by_mention(&self, mention: &str) -> Option<EntityId> {
        self.entity_lookup.get(mention).copied()
    }

    pub fn relation_by_mention(&self, mention: &str) -> Option<RelationId> {
        self.relation_lookup.get(mention).copied()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }
}

/// Compressed per-entity adjacency: `(relation, other)` pairs sorted within
/// each entity's range.
#[derive(Clone, Debug, Default)]
struct Csr {
    offsets: Vec<usize>,
    entries: Vec<(RelationId, EntityId)>,
}

impl Csr {
    fn build(n: usize, edges: impl Iterator<Item = (EntityId, RelationId, EntityId)>) -> Self {
        let mut rows: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); n];
        for (src, r, dst) in edges {
            rows[src.index()].push((r, dst));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable();
            entries.extend(row);
            offsets.push(entries.len());
        }
        Csr { offsets, entries }
    }

    fn row(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.entries[self.offsets[e.index()]..self.offsets[e.index() + 1]]
    }
}

/// Known answers per `(entity, relation, direction)` across all splits.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    answers: HashMap<(EntityId, RelationId, Direction), Vec<EntityId>>,
}

impl FilterIndex {
    fn build<'a>(triples: impl Iterator<Item = &'a Triple>) -> Self {
        let mut answers: HashMap<(EntityId, RelationId, Direction), Vec<EntityId>> = HashMap::new();
        for t in triples {
            answers
                .entry((t.head, t.relation, Direction::Tail))
                .or_default()
                .push(t.tail);
            answers
                .entry((t.tail, t.relation, Direction::Head))
                .or_default()
                .push(t.head);
        }
        for v in answers.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { answers }
    }

    pub fn answers(&self, e: EntityId, r: RelationId, direction: Direction) -> &[EntityId] {
        self.answers.get(&(e, r, direction)).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_entities: usize,
    pub num_relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub avg_degree: f64,
    pub median_degree: f64,
    pub density: f64,
}

/// An immutable, fully indexed knowledge graph.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_raw: Vec<String>,
    relation_raw: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    out_adj: Csr,
    in_adj: Csr,
    mentions: MentionTable,
    filter: FilterIndex,
}

/// Raw-id form of a dataset before indexing.
#[derive(Clone, Debug, Default)]
pub struct RawDataset {
    /// raw id → label, in label-file order
    pub entity_labels: Vec<(String, String)>,
    pub relation_labels: Vec<(String, String)>,
    pub train: Vec<[String; 3]>,
    pub valid: Vec<[String; 3]>,
    pub test: Vec<[String; 3]>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Plain(String),
    Record { label: String },
}

fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: IndexMap<String, LabelValue> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(map
        .into_iter()
        .map(|(k, v)| {
            let label = match v {
                LabelValue::Plain(s) => s,
                LabelValue::Record { label } => label,
            };
            (k, label)
        })
        .collect())
}

fn read_triples(path: &Path) -> Result<Vec<[String; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push([fields[0].to_string(), fields[1].to_string(), fields[2].to_string()]);
    }
    Ok(out)
}

/// Reads `train.txt`, `valid.txt`, `test.txt`, `entities.json` and
/// `relations.json` from `root`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let root = root.as_ref();
    let need = |name: &str| {
        let p = root.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
            ))
        }
    };
    let raw = RawDataset {
        entity_labels: read_labels(&need(ENTITY_LABELS)?)?,
        relation_labels: read_labels(&need(RELATION_LABELS)?)?,
        train: read_triples(&need(TRAIN_FILE)?)?,
        valid: read_triples(&need(VALID_FILE)?)?,
        test: read_triples(&need(TEST_FILE)?)?,
    };
    KnowledgeGraph::from_raw(raw)
}

/// Collision-free mentions: every repeat of a label after the first (in
/// raw-id lexicographic order) gets a `" #<raw-id>"` suffix.
fn disambiguate(raw_ids: &[String], labels: Vec<String>) -> Vec<String> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    let mut out = labels.clone();
    for idxs in groups.values().filter(|g| g.len() > 1) {
        let mut sorted = idxs.clone();
        sorted.sort_by(|&a, &b| raw_ids[a].cmp(&raw_ids[b]));
        for &i in &sorted[1..] {
            out[i] = format!("{} #{}", labels[i], raw_ids[i]);
        }
    }
    out
}

impl KnowledgeGraph {
    /// Indexes a raw dataset. Only ids that occur in some triple receive a
    /// dense id; ids are assigned in label-file order.
    pub fn from_raw(raw: RawDataset) -> Result<Self> {
        let mut used_e: HashMap<&str, ()> = HashMap::new();
        let mut used_r: HashMap<&str, ()> = HashMap::new();
        for t in raw.train.iter().chain(&raw.valid).chain(&raw.test) {
            used_e.insert(&t[0], ());
            used_r.insert(&t[1], ());
            used_e.insert(&t[2], ());
        }
        let labeled_e: HashMap<&str, ()> = raw.entity_labels.iter().map(|(k, _)| (k.as_str(), ())).collect();
        let labeled_r: HashMap<&str, ()> = raw.relation_labels.iter().map(|(k, _)| (k.as_str(), ())).collect();
        let mut missing: Vec<String> = used_e
            .keys()
            .filter(|k| !labeled_e.contains_key(*k))
            .chain(used_r.keys().filter(|k| !labeled_r.contains_key(*k)))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::Unlabeled(missing));
        }

        let select = |labels: &[(String, String)], used: &HashMap<&str, ()>| {
            let mut seen = HashMap::new();
            let mut ids = Vec::new();
            let mut mentions = Vec::new();
            for (k, l) in labels {
                if used.contains_key(k.as_str()) && seen.insert(k.clone(), ()).is_none() {
                    let m = l.trim();
                    // an empty label falls back to its raw id
                    mentions.push(if m.is_empty() { k.clone() } else { m.to_string() });
                    ids.push(k.clone());
                }
            }
            (ids, mentions)
        };
        let (entity_raw, e_labels) = select(&raw.entity_labels, &used_e);
        let (relation_raw, r_labels) = select(&raw.relation_labels, &used_r);
        let e_mentions = disambiguate(&entity_raw, e_labels);
        let r_mentions = disambiguate(&relation_raw, r_labels);
        let mentions = MentionTable::build(e_mentions, r_mentions)?;

        let entity_index: HashMap<String, EntityId> = entity_raw
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), EntityId(i as u32)))
            .collect();
        let relation_index: HashMap<String, RelationId> = relation_raw
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), RelationId(i as u32)))
            .collect();
        let convert = |rows: &[[String; 3]]| -> Vec<Triple> {
            rows.iter()
                .map(|t| Triple {
                    head: entity_index[&t[0]],
                    relation: relation_index[&t[1]],
                    tail: entity_index[&t[2]],
                })
                .collect()
        };
        let train = convert(&raw.train);
        let valid = convert(&raw.valid);
        let test = convert(&raw.test);
        Ok(Self::assemble(
            entity_raw,
            relation_raw,
            entity_index,
            relation_index,
            train,
            valid,
            test,
            mentions,
        ))
    }

    /// Builds a graph directly from dense ids. `entities[i]` and
    /// `relations[i]` are `(raw id, mention)` pairs for id `i`.
    pub fn from_parts(
        entities: Vec<(String, String)>,
        relations: Vec<(String, String)>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let (ne, nr) = (entities.len(), relations.len());
        for t in train.iter().chain(&valid).chain(&test) {
            if t.head.index() >= ne || t.tail.index() >= ne || t.relation.index() >= nr {
                return Err(Error::arg(format!("triple {t:?} references an unknown id")));
            }
        }
        let (entity_raw, e_labels): (Vec<_>, Vec<_>) = entities.into_iter().unzip();
        let (relation_raw, r_labels): (Vec<_>, Vec<_>) = relations.into_iter().unzip();
        let mentions = MentionTable::build(
            disambiguate(
                &entity_raw,
                e_labels.into_iter().map(|s| s.trim().to_string()).collect(),
            ),
            disambiguate(
                &relation_raw,
                r_labels.into_iter().map(|s| s.trim().to_string()).collect(),
            ),
        )?;
        let entity_index = entity_raw
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), EntityId(i as u32)))
            .collect();
        let relation_index = relation_raw
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), RelationId(i as u32)))
            .collect();
        Ok(Self::assemble(
            entity_raw,
            relation_raw,
            entity_index,
            relation_index,
            train,
            valid,
            test,
            mentions,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        entity_raw: Vec<String>,
        relation_raw: Vec<String>,
        entity_index: HashMap<String, EntityId>,
        relation_index: HashMap<String, RelationId>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
        mentions: MentionTable,
    ) -> Self {
        let n = entity_raw.len();
        let out_adj = Csr::build(n, train.iter().map(|t| (t.head, t.relation, t.tail)));
        let in_adj = Csr::build(n, train.iter().map(|t| (t.tail, t.relation, t.head)));
        let filter = FilterIndex::build(train.iter().chain(&valid).chain(&test));
        KnowledgeGraph {
            entity_raw,
            relation_raw,
            entity_index,
            relation_index,
            train,
            valid,
            test,
            out_adj,
            in_adj,
            mentions,
            filter,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entity_raw.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_raw.len()
    }

    pub fn triples(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn mentions(&self) -> &MentionTable {
        &self.mentions
    }

    pub fn filter_index(&self) -> &FilterIndex {
        &self.filter
    }

    pub fn entity_raw(&self, e: EntityId) -> &str {
        &self.entity_raw[e.index()]
    }

    pub fn relation_raw(&self, r: RelationId) -> &str {
        &self.relation_raw[r.index()]
    }

    pub fn entity_by_raw(&self, raw: &str) -> Option<EntityId> {
        self.entity_index.get(raw).copied()
    }

    pub fn relation_by_raw(&self, raw: &str) -> Option<RelationId> {
        self.relation_index.get(raw).copied()
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() >= self.num_entities() {
            return Err(Error::arg(format!(
                "entity id {} out of range ({} entities)",
                e.0,
                self.num_entities()
            )));
        }
        Ok(())
    }

    /// Sorted train-split `(relation, tail)` pairs leaving `e`.
    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.out_adj.row(e)
    }

    /// Sorted train-split `(relation, head)` pairs entering `e`.
    pub fn in_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.in_adj.row(e)
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.out_edges(e).len() + self.in_edges(e).len()
    }

    /// Outgoing then incoming train edges of `e`.
    pub fn neighbors(&self, e: EntityId) -> Result<Vec<Neighbor>> {
        self.check_entity(e)?;
        let out = self.out_edges(e).iter().map(|&(relation, other)| Neighbor {
            relation,
            other,
            orientation: Orientation::Outgoing,
        });
        let inc = self.in_edges(e).iter().map(|&(relation, other)| Neighbor {
            relation,
            other,
            orientation: Orientation::Incoming,
        });
        Ok(out.chain(inc).collect())
    }

    pub fn graph_stats(&self) -> Result<GraphStats> {
        let n = self.num_entities();
        if n < 2 {
            return Err(Error::arg(format!("density is undefined for {n} entities")));
        }
        let train = self.train.len() as f64;
        let mut degrees: Vec<usize> = (0..n).map(|i| self.degree(EntityId(i as u32))).collect();
        degrees.sort_unstable();
        let median = degrees[(n - 1) / 2] as f64;
        let nf = n as f64;
        Ok(GraphStats {
            num_entities: n,
            num_relations: self.num_relations(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            avg_degree: 2.0 * train / nf,
            median_degree: median,
            density: train / (nf * (nf - 1.0) / 2.0),
        })
    }

    /// Every entity known to complete `(e, r, direction)` in any split.
    pub fn filter_answers(&self, e: EntityId, r: RelationId, direction: Direction) -> &[EntityId] {
        self.filter.answers(e, r, direction)
    }

    /// Writes the graph back out in the on-disk dataset layout.
    pub fn write_dataset(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for split in Split::ALL {
            let path = root.join(split.file());
            let mut buf = Vec::new();
            for t in self.triples(split) {
                writeln!(
                    buf,
                    "{}\t{}\t{}",
                    self.entity_raw(t.head),
                    self.relation_raw(t.relation),
                    self.entity_raw(t.tail)
                )
                .expect("write to vec");
            }
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        let labels = |raw: &[String], mentions: &[String]| -> IndexMap<String, String> {
            raw.iter().cloned().zip(mentions.iter().cloned()).collect()
        };
        for (name, map) in [
            (ENTITY_LABELS, labels(&self.entity_raw, self.mentions.entities())),
            (RELATION_LABELS, labels(&self.relation_raw, self.mentions.relations())),
        ] {
            let path = root.join(name);
            let text = serde_json::to_string_pretty(&map).map_err(|e| Error::json(name, e))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
