//! Hierarchical navigable small-world graph over passage vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KgiError, Result};
use crate::rerank::{ScoredCandidate, Source};

const MAGIC: &[u8; 8] = b"KGIHNSW\x01";
const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    InnerProduct,
    /// Vectors are L2-normalised on insertion and query, then compared by inner product.
    Cosine,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::InnerProduct => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Metric::InnerProduct),
            1 => Ok(Metric::Cosine),
            _ => Err(KgiError::CorruptIndex(format!("unknown metric code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            metric: Metric::InnerProduct,
            seed: 0x5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(KgiError::InvalidArgument("M must be >= 2".into()));
        }
        if self.ef_construction < self.m {
            return Err(KgiError::InvalidArgument("ef_construction must be >= M".into()));
        }
        Ok(())
    }

    /// Level normalisation factor `1 / ln(M)`.
    pub fn level_mult(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    fn max_degree(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Similarity paired with a node id, ordered by similarity then by id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    sim: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited set reused across searches.
struct Visited {
    marks: Vec<u32>,
    stamp: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            marks: vec![0; n],
            stamp: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Marks `i`, returning whether it was unvisited.
    fn insert(&mut self, i: u32) -> bool {
        let slot = &mut self.marks[i as usize];
        if *slot == self.stamp {
            false
        } else {
            *slot = self.stamp;
            true
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseIndex {
    dim: usize,
    params: HnswParams,
    pids: Vec<String>,
    vectors: Vec<f32>,
    /// `links[node][level]` lists neighbour ids; `links[node].len() - 1` is the node's level.
    links: Vec<Vec<Vec<u32>>>,
    entry_point: Option<u32>,
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for j in chunks * 8..a.len() {
        s += a[j] * b[j];
    }
    s
}

impl DenseIndex {
    pub fn new(dim: usize, params: HnswParams) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(KgiError::InvalidArgument("dimension must be >= 1".into()));
        }
        Ok(DenseIndex {
            dim,
            params,
            pids: Vec::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            entry_point: None,
        })
    }

    /// Builds an index by inserting `items` in ascending pid order, then
    /// repairing layer-0 reachability if pruning isolated any node.
    pub fn build(dim: usize, params: HnswParams, items: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut items = items;
        items.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = DenseIndex::new(dim, params)?;
        let mut visited = Visited::new(items.len());
        for (pid, v) in items {
            index.insert_with(pid, v, &mut visited)?;
        }
        index.repair_connectivity();
        Ok(index)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn entry_point(&self) -> Option<&str> {
        self.entry_point.map(|e| self.pids[e as usize].as_str())
    }

    pub fn pid(&self, node: usize) -> &str {
        &self.pids[node]
    }

    pub fn vector(&self, node: usize) -> &[f32] {
        &self.vectors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn node_level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn neighbors(&self, node: usize, level: usize) -> &[u32] {
        self.links[node].get(level).map_or(&[], Vec::as_slice)
    }

    fn top_level(&self) -> usize {
        self.entry_point.map_or(0, |e| self.node_level(e as usize))
    }

    fn sim_to(&self, query: &[f32], node: u32) -> f32 {
        dot(query, self.vector(node as usize))
    }

    fn draw_level(&self, ordinal: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(ordinal as u64);
        let u: f64 = 1.0 - rng.random::<f64>();
        ((-u.ln() * self.params.level_mult()).floor() as usize).min(MAX_LEVEL)
    }

    /// Inserts one vector. Deletion is not supported; rebuild instead.
    pub fn insert(&mut self, pid: String, vector: Vec<f32>) -> Result<()> {
        let mut visited = Visited::new(self.len() + 1);
        self.insert_with(pid, vector, &mut visited)
    }

    fn insert_with(&mut self, pid: String, mut vector: Vec<f32>, visited: &mut Visited) -> Result<()> {
        if vector.len() != self.dim {
            return Err(KgiError::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.params.metric == Metric::Cosine {
            normalize(&mut vector);
        }
        let node = self.pids.len() as u32;
        let level = self.draw_level(node as usize);
        self.pids.push(pid);
        self.vectors.extend_from_slice(&vector);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry_point else {
            self.entry_point = Some(node);
            return Ok(());
        };
        let top = self.top_level();
        let mut ep = Scored {
            sim: self.sim_to(&vector, entry),
            node: entry,
        };
        for lc in (level + 1..=top).rev() {
            ep = self.greedy_closest(&vector, ep, lc);
        }
        let mut entries = vec![ep];
        for lc in (0..=level.min(top)).rev() {
            let found = self.search_layer(&vector, &entries, self.params.ef_construction, lc, visited);
            let chosen = self.select_neighbors(&found, self.params.max_degree(lc));
            self.links[node as usize][lc] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.link_back(s.node, node, lc);
            }
            entries = found;
        }
        if level > top {
            self.entry_point = Some(node);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s list at `level`, pruning back to the degree bound.
    fn link_back(&mut self, from: u32, to: u32, level: usize) {
        let cap = self.params.max_degree(level);
        let list = &mut self.links[from as usize][level];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = self.vector(from as usize).to_vec();
        let mut cands: Vec<Scored> = self.links[from as usize][level]
            .iter()
            .map(|&n| Scored {
                sim: self.sim_to(&base, n),
                node: n,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, cap);
        self.links[from as usize][level] = kept.iter().map(|s| s.node).collect();
    }

    /// Neighbour-selection heuristic: walk candidates from most to least
    /// similar and keep one only if it is closer to the base point than to
    /// every neighbour already kept. `sorted` must be in descending order.
    fn select_neighbors(&self, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node as usize);
            if kept.iter().all(|k| dot(cv, self.vector(k.node as usize)) < c.sim) {
                kept.push(c);
            }
        }
        kept
    }

    fn greedy_closest(&self, query: &[f32], mut best: Scored, level: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in self.neighbors(best.node as usize, level) {
                let s = Scored {
                    sim: self.sim_to(query, n),
                    node: n,
                };
                if s > best {
                    best = s;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Best-first beam search of width `ef` on one layer; returns results in
    /// descending similarity.
    fn search_layer(&self, query: &[f32], entries: &[Scored], ef: usize, level: usize, visited: &mut Visited) -> Vec<Scored> {
        visited.reset(self.len());
        let mut frontier: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.node) {
                frontier.push(e);
                results.push(Reverse(e));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(current) = frontier.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && current < w {
                    break;
                }
            }
            for &n in self.neighbors(current.node as usize, level) {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    sim: self.sim_to(query, n),
                    node: n,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| s > w.0);
                if admit {
                    frontier.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Nodes reachable from the entry point along layer-0 edges.
    pub fn reachable_from_entry(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let Some(e) = self.entry_point else { return seen };
        let mut queue = VecDeque::from([e]);
        seen[e as usize] = true;
        while let Some(n) = queue.pop_front() {
            for &m in self.neighbors(n as usize, 0) {
                if !seen[m as usize] {
                    seen[m as usize] = true;
                    queue.push_back(m);
                }
            }
        }
        seen
    }

    /// Pruning can occasionally leave a node without incoming layer-0 edges.
    /// Each such node gets an edge from its most similar reachable node that
    /// still has spare degree.
    fn repair_connectivity(&mut self) {
        let cap = self.params.max_degree(0);
        loop {
            let seen = self.reachable_from_entry();
            let Some(orphan) = seen.iter().position(|s| !s) else { return };
            let base = self.vector(orphan).to_vec();
            let mut donors: Vec<Scored> = (0..self.len() as u32)
                .filter(|&n| seen[n as usize])
                .map(|n| Scored {
                    sim: self.sim_to(&base, n),
                    node: n,
                })
                .collect();
            donors.sort_by(|a, b| b.cmp(a));
            let donor = donors
                .iter()
                .find(|d| self.links[d.node as usize][0].len() < cap)
                .or(donors.first())
                .map(|d| d.node)
                .expect("entry point is always reachable");
            let list = &mut self.links[donor as usize][0];
            if list.len() >= cap {
                // Every reachable node is saturated: swap out the donor's weakest edge.
                list.pop();
            }
            list.push(orphan as u32);
        }
    }

    /// Top-`k` most similar passages. Greedy descent through the upper
    /// layers, then a beam of width `ef_search` on layer 0. Ties break by pid.
    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<ScoredCandidate>> {
        if k == 0 || ef_search < k {
            return Err(KgiError::InvalidArgument(format!(
                "require ef_search >= k >= 1, got k={k} ef_search={ef_search}"
            )));
        }
        if query.len() != self.dim {
            return Err(KgiError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let Some(entry) = self.entry_point else {
            return Ok(Vec::new());
        };
        let mut q = query.to_vec();
        if self.params.metric == Metric::Cosine {
            normalize(&mut q);
        }
        let mut ep = Scored {
            sim: self.sim_to(&q, entry),
            node: entry,
        };
        for lc in (1..=self.top_level()).rev() {
            ep = self.greedy_closest(&q, ep, lc);
        }
        let mut visited = Visited::new(self.len());
        let found = self.search_layer(&q, &[ep], ef_search, 0, &mut visited);
        let mut hits: Vec<(&str, f32)> = found.iter().map(|s| (self.pid(s.node as usize), s.sim)).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        Ok(hits
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (pid, sim))| ScoredCandidate {
                pid: pid.to_string(),
                retriever_score: sim as f64,
                source: Source::Dense,
                retriever_rank: rank + 1,
            })
            .collect())
    }

    /// Exhaustive top-`k` by the same similarity, for recall measurement.
    pub fn exact_search(&self, query: &[f32], k: usize) -> Vec<ScoredCandidate> {
        let mut q = query.to_vec();
        if self.params.metric == Metric::Cosine {
            normalize(&mut q);
        }
        let mut all: Vec<(&str, f32)> = (0..self.len()).map(|n| (self.pid(n), dot(&q, self.vector(n)))).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        all.into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (pid, sim))| ScoredCandidate {
                pid: pid.to_string(),
                retriever_score: sim as f64,
                source: Source::Dense,
                retriever_rank: rank + 1,
            })
            .collect()
    }

    /// Binary layout (little endian): magic, dim, M, ef_construction,
    /// metric, seed, n_vectors, entry point, then pids, vectors and adjacency.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.params.m as u32)?;
        w.write_u32::<LittleEndian>(self.params.ef_construction as u32)?;
        w.write_u8(self.params.metric.code())?;
        w.write_u64::<LittleEndian>(self.params.seed)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.entry_point.map_or(u64::MAX, |e| e as u64))?;
        for pid in &self.pids {
            w.write_u32::<LittleEndian>(pid.len() as u32)?;
            w.write_all(pid.as_bytes())?;
        }
        for x in &self.vectors {
            w.write_f32::<LittleEndian>(*x)?;
        }
        for node in &self.links {
            w.write_u8(node.len() as u8)?;
            for level in node {
                w.write_u32::<LittleEndian>(level.len() as u32)?;
                for &n in level {
                    w.write_u32::<LittleEndian>(n)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(KgiError::CorruptIndex("bad magic".into()));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let ef_construction = r.read_u32::<LittleEndian>()? as usize;
        let metric = Metric::from_code(r.read_u8()?)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let entry = r.read_u64::<LittleEndian>()?;
        let params = HnswParams {
            m,
            ef_construction,
            metric,
            seed,
        };
        let mut index = DenseIndex::new(dim, params)?;
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            index
                .pids
                .push(String::from_utf8(buf).map_err(|_| KgiError::CorruptIndex("pid is not UTF-8".into()))?);
        }
        index.vectors = vec![0f32; n * dim];
        r.read_f32_into::<LittleEndian>(&mut index.vectors)?;
        for _ in 0..n {
            let levels = r.read_u8()? as usize;
            if levels == 0 {
                return Err(KgiError::CorruptIndex("node without layer 0".into()));
            }
            let mut node = Vec::with_capacity(levels);
            for _ in 0..levels {
                let count = r.read_u32::<LittleEndian>()? as usize;
                let mut ids = vec![0u32; count];
                r.read_u32_into::<LittleEndian>(&mut ids)?;
                if ids.iter().any(|&i| i as usize >= n) {
                    return Err(KgiError::CorruptIndex("neighbour id out of range".into()));
                }
                node.push(ids);
            }
            index.links.push(node);
        }
        index.entry_point = match entry {
            u64::MAX => None,
            e if (e as usize) < n => Some(e as u32),
            e => return Err(KgiError::CorruptIndex(format!("entry point {e} out of range"))),
        };
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
