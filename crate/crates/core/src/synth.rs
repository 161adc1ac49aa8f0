//! Deterministic synthetic knowledge graphs for tests, demos and the
//! acceptance suite.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kg::{KnowledgeGraph, Triple};

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "s", "k"];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    }
    let mut c = w.chars();
    let first = c.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

fn unique(n: usize, used: &mut HashSet<String>, mut make: impl FnMut() -> String) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name = make();
        if used.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// `n` distinct two-word names.
fn names(rng: &mut ChaCha8Rng, n: usize, used: &mut HashSet<String>) -> Vec<String> {
    unique(n, used, || format!("{} {}", word(rng, 2), word(rng, 1)))
}

fn entities(prefix: &str, mentions: Vec<String>) -> Vec<(String, String)> {
    mentions
        .into_iter()
        .enumerate()
        .map(|(i, m)| (format!("{prefix}{i:03}"), m))
        .collect()
}

/// A 50-entity, 5-relation graph: every entity has two outgoing edges to
/// distinct random targets. Ten triples each go to valid and test.
pub fn toy_kg(seed: u64) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 50u32;
    let mut used = HashSet::new();
    let ents = entities("E", names(&mut rng, n as usize, &mut used));
    let rels: Vec<(String, String)> = ["knows", "works with", "lives near", "admires", "mentors"]
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("R{i}"), s.to_string()))
        .collect();
    let mut triples = BTreeSet::new();
    for h in 0..n {
        let mut targets: Vec<u32> = (0..n).filter(|&t| t != h).collect();
        targets.shuffle(&mut rng);
        for &t in &targets[..2] {
            let r = rng.gen_range(0..rels.len() as u32);
            triples.insert(Triple::new(h, r, t));
        }
    }
    let mut triples: Vec<Triple> = triples.into_iter().collect();
    triples.shuffle(&mut rng);
    let test = triples.split_off(triples.len() - 10);
    let valid = triples.split_off(triples.len() - 10);
    KnowledgeGraph::from_parts(ents, rels, triples, valid, test)
}

/// Persons belong to groups, groups are located in cities, and a person
/// lives in their group's city. One `lives in` fact per group is held out
/// as the test split (and a second as valid); person names carry no hint
/// of the city, so only the 2-hop path person → group → city answers it.
pub fn structural_kg(seed: u64) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_groups, per_group, n_cities) = (16usize, 4usize, 8usize);
    let n_persons = n_groups * per_group;
    let mut used = HashSet::new();
    let persons = names(&mut rng, n_persons, &mut used);
    let groups = unique(n_groups, &mut used, || format!("{} club", word(&mut rng, 2)));
    let cities = unique(n_cities, &mut used, || word(&mut rng, 2));
    let mut mentions = persons;
    mentions.extend(groups);
    mentions.extend(cities);
    let ents = entities("S", mentions);
    let rels: Vec<(String, String)> = ["member of", "located in", "lives in"]
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("R{i}"), s.to_string()))
        .collect();
    let group_id = |g: usize| (n_persons + g) as u32;
    let city_id = |c: usize| (n_persons + n_groups + c) as u32;
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut city_of_group: Vec<usize> = (0..n_groups).map(|g| g % n_cities).collect();
    city_of_group.shuffle(&mut rng);
    for (g, &c) in city_of_group.iter().enumerate() {
        train.push(Triple::new(group_id(g), 1, city_id(c)));
        for k in 0..per_group {
            let p = (g * per_group + k) as u32;
            train.push(Triple::new(p, 0, group_id(g)));
            let lives = Triple::new(p, 2, city_id(c));
            match k {
                0 => test.push(lives),
                1 => valid.push(lives),
                _ => train.push(lives),
            }
        }
    }
    KnowledgeGraph::from_parts(ents, rels, train, valid, test)
}

/// `n_nodes` entities with `n_edges` random train triples (self-loops and
/// parallel edges under different relations allowed).
pub fn random_kg(n_nodes: u32, n_relations: u32, n_edges: usize, seed: u64) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents = (0..n_nodes).map(|i| (format!("n{i}"), format!("node {i}"))).collect();
    let rels = (0..n_relations)
        .map(|i| (format!("r{i}"), format!("rel {i}")))
        .collect();
    let mut set = BTreeSet::new();
    for _ in 0..n_edges {
        set.insert(Triple::new(
            rng.gen_range(0..n_nodes),
            rng.gen_range(0..n_relations),
            rng.gen_range(0..n_nodes),
        ));
    }
    KnowledgeGraph::from_parts(ents, rels, set.into_iter().collect(), vec![], vec![])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Split;

    #[test]
    fn toy_graph_shape() {
        let g = toy_kg(1).unwrap();
        assert_eq!(g.num_entities(), 50);
        assert_eq!(g.triples(Split::Valid).len(), 10);
        assert_eq!(g.triples(Split::Test).len(), 10);
        assert_eq!(g.triples(Split::Train).len() + 20, 100);
        assert_eq!(toy_kg(1).unwrap().triples(Split::Train), g.triples(Split::Train));
    }

    #[test]
    fn structural_answers_follow_two_hop_path() {
        let g = structural_kg(3).unwrap();
        assert_eq!(g.triples(Split::Test).len(), 16);
        for t in g.triples(Split::Test) {
            let (_, group) = g.out_edges(t.head)[0];
            let located = g.out_edges(group).iter().find(|(r, _)| r.0 == 1).unwrap();
            assert_eq!(located.1, t.tail);
            // held-out fact is not in the train adjacency
            assert!(g.out_edges(t.head).iter().all(|(r, _)| r.0 == 0));
            // group degree fits a fanout of 5
            assert!(g.degree(group) <= 5);
        }
    }
}
