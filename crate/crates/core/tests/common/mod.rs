//! Brute-force reference implementations of the two subgraph explorations,
//! written against the triple list only.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use dalk::construct::{ExtractionMethod, Triple};
use dalk::embed::{EmbeddingCache, HashedBagEmbedder};
use dalk::graph::{KnowledgeGraph, NodeId};
use dalk::sampler::{explore_neighbors, explore_paths, SamplerConfig};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

const WORDS: &[&str] = &[
    "tau",
    "amyloid",
    "brain",
    "cortex",
    "apoe",
    "microglia",
    "lobe",
    "plaque",
    "neuron",
    "insulin",
    "memory",
    "synapse",
];
const RELATIONS: &[&str] = &["binds", "regulates", "associates", "treats"];

pub struct Case {
    pub graph: KnowledgeGraph,
    pub seeds: Vec<NodeId>,
    pub question: String,
    pub config: SamplerConfig,
}

fn phrase(rng: &mut StdRng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random multigraph with at most 50 nodes and a 1 to 5 seed set.
pub fn random_case(seed: u64) -> Case {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = rng.gen_range(2..=50);
    let names: Vec<String> = (0..n).map(|i| format!("{} {i}", phrase(&mut rng))).collect();
    let m = rng.gen_range(1..=2 * n);
    let mut triples = Vec::new();
    for _ in 0..m {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let r = RELATIONS.choose(&mut rng).unwrap();
        triples.push(Triple::new(&names[a], r, &names[b], "d", 2015, ExtractionMethod::Generative).unwrap());
    }
    if triples.is_empty() {
        triples.push(Triple::new(&names[0], "binds", &names[1], "d", 2015, ExtractionMethod::Generative).unwrap());
    }
    let graph = KnowledgeGraph::from_triples(triples);
    let mut ids: Vec<NodeId> = graph.nodes().iter().map(|n| n.id).collect();
    ids.shuffle(&mut rng);
    let seeds = ids.into_iter().take(rng.gen_range(1..=5)).collect();
    let config = SamplerConfig {
        hop_bound: rng.gen_range(1..=3),
        relevance_threshold: *[0.0, 0.2, 0.4, 0.6].choose(&mut rng).unwrap(),
        max_triples_per_subgraph: 1000,
    };
    Case {
        graph,
        seeds,
        question: format!("What links {} and {}?", phrase(&mut rng), phrase(&mut rng)),
        config,
    }
}

/// Undirected incidence: node key -> (neighbor key, triple index).
fn adjacency(graph: &KnowledgeGraph) -> HashMap<String, Vec<(String, usize)>> {
    let key = |name: &str| graph.node(graph.find(name).unwrap()).key.clone();
    let mut adj: HashMap<String, Vec<(String, usize)>> = HashMap::new();
    for (i, t) in graph.triples().iter().enumerate() {
        let (h, tl) = (key(&t.head), key(&t.tail));
        adj.entry(h.clone()).or_default().push((tl.clone(), i));
        adj.entry(tl).or_default().push((h, i));
    }
    adj
}

/// Every simple path of at most `bound` edges from `from`, as
/// (node key, triple) steps.
fn simple_paths(adj: &HashMap<String, Vec<(String, usize)>>, from: &str, bound: usize) -> Vec<Vec<(String, usize)>> {
    fn go(
        adj: &HashMap<String, Vec<(String, usize)>>,
        at: &str,
        bound: usize,
        visited: &mut Vec<String>,
        path: &mut Vec<(String, usize)>,
        out: &mut Vec<Vec<(String, usize)>>,
    ) {
        out.push(path.clone());
        if path.len() == bound {
            return;
        }
        for (nb, t) in adj.get(at).into_iter().flatten() {
            if visited.contains(nb) {
                continue;
            }
            visited.push(nb.clone());
            path.push((nb.clone(), *t));
            go(adj, nb, bound, visited, path, out);
            path.pop();
            visited.pop();
        }
    }
    let mut out = Vec::new();
    go(adj, from, bound, &mut vec![from.to_string()], &mut Vec::new(), &mut out);
    out
}

/// Segments as (node keys, triples).
pub fn path_oracle(graph: &KnowledgeGraph, seeds: &[NodeId], hop_bound: usize) -> Vec<(Vec<String>, Vec<usize>)> {
    let adj = adjacency(graph);
    let mut cands: BTreeSet<String> = seeds.iter().map(|&s| graph.node(s).key.clone()).collect();
    let mut start = cands.pop_first().unwrap();
    let mut segs = vec![(vec![start.clone()], Vec::new())];
    while !cands.is_empty() {
        let best = simple_paths(&adj, &start, hop_bound)
            .into_iter()
            .filter(|p| p.last().is_some_and(|(n, _)| cands.contains(n)))
            .min_by(|a, b| (a.len(), &a.last().unwrap().0, a).cmp(&(b.len(), &b.last().unwrap().0, b)));
        let seg = segs.last_mut().unwrap();
        match best {
            Some(p) => {
                for (n, t) in &p {
                    seg.0.push(n.clone());
                    seg.1.push(*t);
                }
                start = p.last().unwrap().0.clone();
                cands.remove(&start);
            }
            None => {
                start = cands.pop_first().unwrap();
                segs.push((vec![start.clone()], Vec::new()));
            }
        }
    }
    segs
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// (seed-adjacent triples, relevance-expanded triples).
pub fn neighbor_oracle(
    graph: &KnowledgeGraph,
    seeds: &[NodeId],
    question: &str,
    tau: f64,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let e = HashedBagEmbedder::default();
    let q = e.embed_one(question).0;
    let seed_keys: BTreeSet<String> = seeds.iter().map(|&s| graph.node(s).key.clone()).collect();
    let key = |name: &str| graph.node(graph.find(name).unwrap()).key.clone();
    let touches = |i: usize, k: &str| {
        let t = &graph.triples()[i];
        key(&t.head) == k || key(&t.tail) == k
    };
    let all = 0..graph.triples().len();
    let first: BTreeSet<usize> = all
        .clone()
        .filter(|&i| seed_keys.iter().any(|s| touches(i, s)))
        .collect();
    let mut neighbors = BTreeSet::new();
    for &i in &first {
        let t = &graph.triples()[i];
        for k in [key(&t.head), key(&t.tail)] {
            if !seed_keys.contains(&k) {
                neighbors.insert(k);
            }
        }
    }
    let mut second = BTreeSet::new();
    for n in &neighbors {
        let name = &graph.node(graph.find(n).unwrap()).name;
        if cosine(&e.embed_one(name).0, &q) >= tau {
            second.extend(all.clone().filter(|&i| touches(i, n) && !first.contains(&i)));
        }
    }
    (first, second)
}

/// Runs both explorations on `trials` random cases; returns mismatch
/// descriptions (empty when everything agrees).
pub fn run_oracles(trials: u64) -> Vec<String> {
    let mut mismatches = Vec::new();
    for seed in 0..trials {
        let c = random_case(seed);
        let g = &c.graph;

        let got = explore_paths(g, &c.seeds, &c.config).unwrap();
        let got_segs: Vec<(Vec<String>, Vec<usize>)> = got
            .segments
            .iter()
            .map(|s| {
                (
                    s.nodes.iter().map(|&n| g.node(n).key.clone()).collect(),
                    s.triples.clone(),
                )
            })
            .collect();
        let want = path_oracle(g, &c.seeds, c.config.hop_bound);
        if got_segs != want {
            mismatches.push(format!("paths, case {seed}: got {got_segs:?}, want {want:?}"));
        }

        let got = explore_neighbors(
            g,
            &c.seeds,
            &c.question,
            &HashedBagEmbedder::default(),
            &EmbeddingCache::new(),
            &c.config,
        )
        .unwrap();
        let (first, second) = neighbor_oracle(g, &c.seeds, &c.question, c.config.relevance_threshold);
        let want: Vec<usize> = first.iter().chain(&second).copied().collect();
        if got.triples != want || got.seed_adjacent != first.len() {
            mismatches.push(format!("neighbors, case {seed}: got {:?}, want {want:?}", got.triples));
        }
    }
    mismatches
}
