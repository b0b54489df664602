//! Reconstructible cache: persistent store of latent reasoning chains,
//! tree-structured so branches can be extended from any intermediate node,
//! with exact similarity retrieval over nodes and contexts.

use crate::domain::{
    context_features, context_similarity, cosine, LatentStep, ReasoningChain, SimulationContext,
    EMBED_DIM, MAX_ACTIVITIES, MIN_ACTIVITIES,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CACHE_MAGIC: &[u8; 4] = b"MOBC";
pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainId(pub u64);

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("chain too short: {0} steps")]
    ChainTooShort(usize),
    #[error("chain too long: {0} steps")]
    ChainTooLong(usize),
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("unknown chain {0:?}")]
    UnknownChain(ChainId),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("format version mismatch: found {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed cache file: {0}")]
    Malformed(String),
}

/// One latent step stored as a tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheNode {
    pub node_id: NodeId,
    pub chain_id: ChainId,
    pub depth: usize,
    pub embedding: LatentStep,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// One cached chain: context plus the root of its node path.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub chain_id: ChainId,
    pub context: SimulationContext,
    pub root: NodeId,
    pub length: usize,
}

/// A retrieval candidate with its cosine similarity to the query node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub node_id: NodeId,
    pub cosine: f64,
}

/// The cache index. Retrieval is an exact scan over a dense embedding table;
/// any approximate index swapped in behind this interface must pass a
/// recall@k >= 0.99 gate against the scan.
#[derive(Debug, Clone, Default)]
pub struct CacheIndex {
    entries: BTreeMap<ChainId, CacheEntry>,
    nodes: BTreeMap<NodeId, CacheNode>,
    context_features: BTreeMap<ChainId, Vec<f64>>,
    /// Row-major `node_count x EMBED_DIM` table in node-id order, plus the
    /// matching ids and norms. Rows are append-only.
    node_rows: Vec<NodeId>,
    node_matrix: Vec<f64>,
    node_norms: Vec<f64>,
    spliced_count: usize,
    next_node: u64,
    next_chain: u64,
}

impl CacheIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn chain_count(&self) -> usize {
        self.entries.len()
    }

    pub fn spliced_count(&self) -> usize {
        self.spliced_count
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    pub fn entry(&self, id: ChainId) -> Result<&CacheEntry, CacheError> {
        self.entries.get(&id).ok_or(CacheError::UnknownChain(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&CacheNode, CacheError> {
        self.nodes.get(&id).ok_or(CacheError::UnknownNode(id))
    }

    fn push_node(&mut self, node: CacheNode) {
        let norm = node.embedding.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.node_rows.push(node.node_id);
        self.node_matrix.extend_from_slice(&node.embedding.embedding);
        self.node_norms.push(norm);
        self.nodes.insert(node.node_id, node);
    }

    /// Stores a chain as a root-to-leaf node path. Index sizes grow by
    /// exactly the number of steps.
    pub fn insert_chain(
        &mut self,
        context: &SimulationContext,
        steps: &[LatentStep],
    ) -> Result<ChainId, CacheError> {
        if steps.len() < MIN_ACTIVITIES {
            return Err(CacheError::ChainTooShort(steps.len()));
        }
        if steps.len() > MAX_ACTIVITIES {
            return Err(CacheError::ChainTooLong(steps.len()));
        }
        let chain_id = ChainId(self.next_chain);
        self.next_chain += 1;

        let mut parent: Option<NodeId> = None;
        let mut root = NodeId(0);
        for (depth, step) in steps.iter().enumerate() {
            let node_id = NodeId(self.next_node);
            self.next_node += 1;
            if depth == 0 {
                root = node_id;
            }
            if let Some(p) = parent {
                self.nodes.get_mut(&p).unwrap().children.push(node_id);
            }
            self.push_node(CacheNode {
                node_id,
                chain_id,
                depth,
                embedding: step.clone(),
                parent,
                children: Vec::new(),
            });
            parent = Some(node_id);
        }

        self.entries.insert(
            chain_id,
            CacheEntry { chain_id, context: context.clone(), root, length: steps.len() },
        );
        self.context_features.insert(chain_id, context_features(context));
        Ok(chain_id)
    }

    /// Inserts a full chain object (context + steps).
    pub fn insert(&mut self, chain: &ReasoningChain) -> Result<ChainId, CacheError> {
        self.insert_chain(&chain.context, &chain.steps)
    }

    /// Most similar cached context at or above `threshold`, ties broken by
    /// smallest chain id. `None` encodes a miss.
    pub fn match_context(
        &self,
        query: &SimulationContext,
        threshold: f64,
    ) -> Option<(ChainId, f64)> {
        let mut best: Option<(ChainId, f64)> = None;
        for entry in self.entries.values() {
            let sim = context_similarity(query, &entry.context);
            let better = match best {
                None => true,
                Some((_, s)) => sim > s, // ties keep the earlier (smaller) id
            };
            if better {
                best = Some((entry.chain_id, sim));
            }
        }
        best.filter(|&(_, s)| s >= threshold)
    }

    /// Top-k candidate successor nodes for a branch point: nodes of *other*
    /// chains whose depth lies within `depth_window` of the successor depth,
    /// ranked by cosine to the branch node, ties by node id. Exact scan.
    pub fn retrieve_candidates(
        &self,
        at: NodeId,
        k: usize,
        depth_window: usize,
    ) -> Result<Vec<Candidate>, CacheError> {
        let anchor = self.node(at)?;
        let target = anchor.depth + 1;
        let lo = target.saturating_sub(depth_window);
        let hi = target + depth_window;
        let query = &anchor.embedding.embedding;

        let mut pool: Vec<Candidate> = Vec::new();
        for (row, &node_id) in self.node_rows.iter().enumerate() {
            let node = &self.nodes[&node_id];
            if node.chain_id == anchor.chain_id || node.depth < lo || node.depth > hi {
                continue;
            }
            let emb = &self.node_matrix[row * EMBED_DIM..(row + 1) * EMBED_DIM];
            pool.push(Candidate { node_id, cosine: cosine(query, emb) });
        }
        pool.sort_by(|a, b| {
            b.cosine
                .partial_cmp(&a.cosine)
                .unwrap()
                .then_with(|| a.node_id.cmp(&b.node_id))
        });
        pool.truncate(k);
        Ok(pool)
    }

    /// Attaches a new child carrying `new_step` to an existing node. The
    /// original chain is untouched; the new node participates in future
    /// retrievals.
    pub fn splice(&mut self, at: NodeId, new_step: &LatentStep) -> Result<NodeId, CacheError> {
        let (chain_id, depth) = {
            let anchor = self.node(at)?;
            (anchor.chain_id, anchor.depth)
        };
        let node_id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.get_mut(&at).unwrap().children.push(node_id);
        self.push_node(CacheNode {
            node_id,
            chain_id,
            depth: depth + 1,
            embedding: new_step.clone(),
            parent: Some(at),
            children: Vec::new(),
        });
        self.spliced_count += 1;
        Ok(node_id)
    }

    /// Node ids along the original root-to-leaf path of a chain. Children are
    /// appended in insertion order, so the first child is always the original
    /// continuation and splices never perturb this walk.
    pub fn main_path(&self, chain_id: ChainId) -> Result<Vec<NodeId>, CacheError> {
        let entry = self.entry(chain_id)?;
        let mut path = Vec::with_capacity(entry.length);
        let mut cursor = Some(entry.root);
        while let Some(id) = cursor {
            path.push(id);
            cursor = self.nodes[&id].children.first().copied();
        }
        debug_assert_eq!(path.len(), entry.length);
        Ok(path)
    }

    /// Embeddings along the original path of a chain.
    pub fn chain_steps(&self, chain_id: ChainId) -> Result<Vec<LatentStep>, CacheError> {
        Ok(self
            .main_path(chain_id)?
            .iter()
            .map(|id| self.nodes[id].embedding.clone())
            .collect())
    }

    /// Node ids of the original continuation strictly after `at`.
    pub fn continuation(&self, at: NodeId) -> Result<Vec<NodeId>, CacheError> {
        self.node(at)?;
        let mut out = Vec::new();
        let mut cursor = self.nodes[&at].children.first().copied();
        while let Some(id) = cursor {
            out.push(id);
            cursor = self.nodes[&id].children.first().copied();
        }
        Ok(out)
    }

    // -- persistence --------------------------------------------------------

    fn encode(&self) -> Result<Vec<u8>, CacheError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());

        // contexts section
        let mut section = Vec::new();
        section.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (chain_id, entry) in &self.entries {
            section.extend_from_slice(&chain_id.0.to_le_bytes());
            let json = serde_json::to_vec(&entry.context)
                .map_err(|e| CacheError::Malformed(e.to_string()))?;
            section.extend_from_slice(&(json.len() as u64).to_le_bytes());
            section.extend_from_slice(&json);
        }
        buf.extend_from_slice(&(section.len() as u64).to_le_bytes());
        buf.extend_from_slice(&section);

        // entries section
        let mut section = Vec::new();
        section.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (chain_id, entry) in &self.entries {
            section.extend_from_slice(&chain_id.0.to_le_bytes());
            section.extend_from_slice(&entry.root.0.to_le_bytes());
            section.extend_from_slice(&(entry.length as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(section.len() as u64).to_le_bytes());
        buf.extend_from_slice(&section);

        // nodes section
        let mut section = Vec::new();
        section.extend_from_slice(&(self.nodes.len() as u64).to_le_bytes());
        for (node_id, node) in &self.nodes {
            section.extend_from_slice(&node_id.0.to_le_bytes());
            section.extend_from_slice(&node.chain_id.0.to_le_bytes());
            section.extend_from_slice(&(node.depth as u32).to_le_bytes());
            section.extend_from_slice(&node.parent.map_or(u64::MAX, |p| p.0).to_le_bytes());
            section.extend_from_slice(&(node.children.len() as u32).to_le_bytes());
            for child in &node.children {
                section.extend_from_slice(&child.0.to_le_bytes());
            }
            for v in &node.embedding.embedding {
                section.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(section.len() as u64).to_le_bytes());
        buf.extend_from_slice(&section);

        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let bytes = self.encode()?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CacheError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self, CacheError> {
        if bytes.len() < 12 {
            return Err(CacheError::ChecksumMismatch);
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(CacheError::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != CACHE_MAGIC {
            return Err(CacheError::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CACHE_FORMAT_VERSION {
            return Err(CacheError::FormatVersionMismatch {
                found: version,
                expected: CACHE_FORMAT_VERSION,
            });
        }

        // contexts
        let mut contexts: BTreeMap<ChainId, SimulationContext> = BTreeMap::new();
        let section = r.section()?;
        let mut s = Reader { buf: section, pos: 0 };
        let n = s.u64()? as usize;
        for _ in 0..n {
            let chain_id = ChainId(s.u64()?);
            let len = s.u64()? as usize;
            let json = s.take(len)?;
            let context: SimulationContext = serde_json::from_slice(json)
                .map_err(|e| CacheError::Malformed(e.to_string()))?;
            contexts.insert(chain_id, context);
        }

        // entries
        let section = r.section()?;
        let mut s = Reader { buf: section, pos: 0 };
        let n = s.u64()? as usize;
        let mut raw_entries = Vec::with_capacity(n);
        for _ in 0..n {
            raw_entries.push((ChainId(s.u64()?), NodeId(s.u64()?), s.u64()? as usize));
        }

        // nodes
        let section = r.section()?;
        let mut s = Reader { buf: section, pos: 0 };
        let n = s.u64()? as usize;
        let mut index = CacheIndex::new();
        for _ in 0..n {
            let node_id = NodeId(s.u64()?);
            let chain_id = ChainId(s.u64()?);
            let depth = s.u32()? as usize;
            let parent_raw = s.u64()?;
            let parent = (parent_raw != u64::MAX).then_some(NodeId(parent_raw));
            let n_children = s.u32()? as usize;
            let mut children = Vec::with_capacity(n_children);
            for _ in 0..n_children {
                children.push(NodeId(s.u64()?));
            }
            let mut embedding = Vec::with_capacity(EMBED_DIM);
            for _ in 0..EMBED_DIM {
                embedding.push(f64::from_bits(s.u64()?));
            }
            index.push_node(CacheNode {
                node_id,
                chain_id,
                depth,
                embedding: LatentStep { embedding },
                parent,
                children,
            });
        }

        for (chain_id, root, length) in raw_entries {
            let context = contexts
                .remove(&chain_id)
                .ok_or_else(|| CacheError::Malformed(format!("missing context for {chain_id:?}")))?;
            index.context_features.insert(chain_id, context_features(&context));
            index.entries.insert(chain_id, CacheEntry { chain_id, context, root, length });
        }

        index.next_node = index.nodes.keys().last().map_or(0, |n| n.0 + 1);
        index.next_chain = index.entries.keys().last().map_or(0, |c| c.0 + 1);
        let path_nodes: usize = index.entries.values().map(|e| e.length).sum();
        index.spliced_count = index.nodes.len().saturating_sub(path_nodes);
        Ok(index)
    }

    /// One chain per line: context, node ids, and embeddings, for inspection.
    pub fn export_jsonl(&self, path: &Path) -> Result<(), CacheError> {
        #[derive(Serialize)]
        struct Line<'a> {
            chain_id: u64,
            context: &'a SimulationContext,
            node_ids: Vec<u64>,
            embeddings: Vec<&'a [f64]>,
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in self.entries.values() {
            let path_ids = self.main_path(entry.chain_id)?;
            let line = Line {
                chain_id: entry.chain_id.0,
                context: &entry.context,
                node_ids: path_ids.iter().map(|n| n.0).collect(),
                embeddings: path_ids
                    .iter()
                    .map(|n| self.nodes[n].embedding.embedding.as_slice())
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| CacheError::Malformed(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CacheError> {
        if self.pos + n > self.buf.len() {
            return Err(CacheError::Malformed("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<&'a [u8], CacheError> {
        let len = self.u64()? as usize;
        self.take(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GeoPoint, Profile};
    use crate::teacher::SyntheticTeacher;
    use proptest::prelude::*;

    fn ctx(user_id: u64) -> SimulationContext {
        let profile = Profile::new(
            user_id,
            20 + (user_id % 50) as u32,
            (user_id % 4) as u8,
            (user_id % 12) as u8,
            GeoPoint::new((user_id % 29) as f64 + 0.5, 10.0),
            GeoPoint::new(15.0, (user_id % 28) as f64 + 1.0),
        )
        .unwrap();
        SimulationContext::new(profile, "2019-11-04".parse().unwrap(), 1)
    }

    fn filled_cache(chains: usize, seed: u64) -> CacheIndex {
        let teacher = SyntheticTeacher::default();
        let mut cache = CacheIndex::new();
        for u in 0..chains as u64 {
            let c = ctx(u);
            let (chain, _) = teacher.generate_chain(&c, seed + u).unwrap();
            cache.insert(&chain).unwrap();
        }
        cache
    }

    fn step_of(v: f64) -> LatentStep {
        let mut e = vec![0.0; EMBED_DIM];
        e[0] = 1.0;
        e[1] = v;
        LatentStep::new(e).unwrap()
    }

    #[test]
    fn node_count_equals_sum_of_lengths() {
        let cache = filled_cache(500, 7);
        let total: usize = cache.entries().map(|e| e.length).sum();
        assert_eq!(cache.node_count(), total);
    }

    #[test]
    fn stored_embeddings_are_bitwise_identical() {
        let teacher = SyntheticTeacher::default();
        let mut cache = CacheIndex::new();
        let c = ctx(1);
        let (chain, _) = teacher.generate_chain(&c, 3).unwrap();
        let id = cache.insert(&chain).unwrap();
        let steps = cache.chain_steps(id).unwrap();
        assert_eq!(steps, chain.steps);
    }

    #[test]
    fn short_chain_rejected() {
        let mut cache = CacheIndex::new();
        let err = cache.insert_chain(&ctx(0), &[step_of(0.1)]);
        assert!(matches!(err, Err(CacheError::ChainTooShort(1))));
    }

    #[test]
    fn self_match_hits_with_similarity_one() {
        let cache = filled_cache(20, 1);
        let query = cache.entries().next().unwrap();
        let (id, sim) = cache.match_context(&query.context, 0.99).unwrap();
        assert_eq!(id, query.chain_id);
        assert_eq!(sim, 1.0);
    }

    #[test]
    fn strict_novel_query_misses_at_threshold_one() {
        let cache = filled_cache(20, 1);
        let novel = ctx(5000);
        assert!(cache.match_context(&novel, 1.0).is_none());
    }

    #[test]
    fn match_equals_brute_force_scan() {
        let cache = filled_cache(200, 11);
        for q in 0..1000u64 {
            let query = ctx(10_000 + q);
            // independent exhaustive scan
            let mut best: Option<(ChainId, f64)> = None;
            for e in cache.entries() {
                let s = context_similarity(&query, &e.context);
                match best {
                    Some((bid, bs)) if s > bs || (s == bs && e.chain_id < bid) => {
                        best = Some((e.chain_id, s))
                    }
                    None => best = Some((e.chain_id, s)),
                    _ => {}
                }
            }
            assert_eq!(cache.match_context(&query, 0.0), best);
        }
    }

    #[test]
    fn duplicate_node_ranks_first() {
        let mut cache = filled_cache(5, 2);
        let path = cache.main_path(ChainId(0)).unwrap();
        let anchor = path[1];
        let anchor_embedding = cache.node(anchor).unwrap().embedding.clone();
        // plant a bitwise duplicate of the anchor in a fresh chain at an
        // admissible depth (anchor depth 1 -> candidates at depths 1..=3)
        let dup_steps: Vec<LatentStep> = (0..3)
            .map(|i| if i == 2 { anchor_embedding.clone() } else { step_of(i as f64 * 0.1 + 0.2) })
            .collect();
        let dup_chain = cache.insert_chain(&ctx(99), &dup_steps).unwrap();
        let dup_node = cache.main_path(dup_chain).unwrap()[2];
        let cands = cache.retrieve_candidates(anchor, 4, 1).unwrap();
        assert_eq!(cands[0].node_id, dup_node);
        assert!((cands[0].cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_pool_returns_pool() {
        let cache = filled_cache(3, 4);
        let path = cache.main_path(ChainId(0)).unwrap();
        let cands = cache.retrieve_candidates(path[0], 10_000, 1).unwrap();
        // pool = nodes of other chains at depths 0..=2
        let pool: usize = cache
            .entries()
            .filter(|e| e.chain_id != ChainId(0))
            .map(|e| e.length.min(3))
            .sum();
        assert_eq!(cands.len(), pool);
    }

    #[test]
    fn retrieval_equals_brute_force_scan() {
        let cache = filled_cache(500, 21);
        assert!(cache.node_count() > 2000);
        let anchors: Vec<NodeId> = cache
            .entries()
            .take(200)
            .map(|e| cache.main_path(e.chain_id).unwrap()[0])
            .collect();
        for anchor in anchors {
            let got = cache.retrieve_candidates(anchor, 8, 1).unwrap();
            // independent brute-force scan over the node map
            let a = cache.node(anchor).unwrap();
            let target = a.depth + 1;
            let mut want: Vec<Candidate> = cache
                .nodes
                .values()
                .filter(|n| {
                    n.chain_id != a.chain_id
                        && n.depth + 1 >= target // depth >= target - 1 without underflow
                        && n.depth <= target + 1
                })
                .map(|n| Candidate {
                    node_id: n.node_id,
                    cosine: cosine(&a.embedding.embedding, &n.embedding.embedding),
                })
                .collect();
            want.sort_by(|x, y| {
                y.cosine
                    .partial_cmp(&x.cosine)
                    .unwrap()
                    .then_with(|| x.node_id.cmp(&y.node_id))
            });
            want.truncate(8);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn splice_extends_without_touching_original() {
        let mut cache = filled_cache(3, 5);
        let before_nodes = cache.node_count();
        let path = cache.main_path(ChainId(1)).unwrap();
        let original_steps = cache.chain_steps(ChainId(1)).unwrap();
        let new_step = step_of(0.77);
        let spliced = cache.splice(path[1], &new_step).unwrap();

        assert_eq!(cache.node_count(), before_nodes + 1);
        assert_eq!(cache.chain_steps(ChainId(1)).unwrap(), original_steps);
        let node = cache.node(spliced).unwrap();
        assert_eq!(node.parent, Some(path[1]));
        assert_eq!(node.depth, 2);
        // prefix through the spliced node equals original prefix + new step
        let mut walk = vec![spliced];
        while let Some(p) = cache.node(*walk.last().unwrap()).unwrap().parent {
            walk.push(p);
        }
        walk.reverse();
        assert_eq!(&walk[..2], &path[..2]);
        assert_eq!(cache.node(spliced).unwrap().embedding, new_step);
    }

    #[test]
    fn spliced_node_is_retrievable_from_third_chain() {
        let mut cache = filled_cache(3, 6);
        let path1 = cache.main_path(ChainId(1)).unwrap();
        let spliced = cache.splice(path1[0], &step_of(0.32)).unwrap();
        let path2 = cache.main_path(ChainId(2)).unwrap();
        let cands = cache.retrieve_candidates(path2[0], 10_000, 1).unwrap();
        assert!(cands.iter().any(|c| c.node_id == spliced));
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = filled_cache(500, 9);
        // include spliced nodes in the persisted state
        let path = cache.main_path(ChainId(3)).unwrap();
        cache.splice(path[1], &step_of(0.5)).unwrap();

        let file = dir.path().join("cache.mobc");
        cache.save(&file).unwrap();
        let loaded = CacheIndex::load(&file).unwrap();
        assert_eq!(loaded.node_matrix, cache.node_matrix);
        assert_eq!(loaded.node_rows, cache.node_rows);
        assert_eq!(loaded.spliced_count, cache.spliced_count);

        // identical bytes when saved again
        let file2 = dir.path().join("cache2.mobc");
        loaded.save(&file2).unwrap();
        assert_eq!(std::fs::read(&file).unwrap(), std::fs::read(&file2).unwrap());

        // identical retrievals across the roundtrip
        for u in 0..100u64 {
            let q = ctx(777 + u);
            assert_eq!(cache.match_context(&q, 0.5), loaded.match_context(&q, 0.5));
        }
        for e in cache.entries().take(20) {
            let anchor = cache.main_path(e.chain_id).unwrap()[1];
            assert_eq!(
                cache.retrieve_candidates(anchor, 8, 1).unwrap(),
                loaded.retrieve_candidates(anchor, 8, 1).unwrap()
            );
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let cache = filled_cache(10, 13);
        let file = dir.path().join("cache.mobc");
        cache.save(&file).unwrap();
        let mut bytes = std::fs::read(&file).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&file, &bytes).unwrap();
        assert!(matches!(CacheIndex::load(&file), Err(CacheError::ChecksumMismatch)));
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = filled_cache(3, 13);
        let file = dir.path().join("cache.mobc");
        cache.save(&file).unwrap();
        let mut bytes = std::fs::read(&file).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&file, &bytes).unwrap();
        assert!(matches!(
            CacheIndex::load(&file),
            Err(CacheError::FormatVersionMismatch { found: 99, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn tree_stays_well_formed_under_random_ops(ops in proptest::collection::vec((0u8..2, 0u64..u64::MAX), 1..60)) {
            let teacher = SyntheticTeacher::default();
            let mut cache = CacheIndex::new();
            let mut inserted = 0u64;
            for (op, arg) in ops {
                if op == 0 || cache.is_empty() {
                    let c = ctx(inserted);
                    let (chain, _) = teacher.generate_chain(&c, arg).unwrap();
                    cache.insert(&chain).unwrap();
                    inserted += 1;
                } else {
                    let ids: Vec<NodeId> = cache.nodes.keys().copied().collect();
                    let at = ids[(arg % ids.len() as u64) as usize];
                    let depth = cache.node(at).unwrap().depth;
                    let spliced = cache.splice(at, &step_of((arg % 97) as f64 / 97.0)).unwrap();
                    prop_assert_eq!(cache.node(spliced).unwrap().depth, depth + 1);
                }
            }
            // every node reachable from exactly one root; depth consistency
            let mut reached = 0usize;
            for entry in cache.entries() {
                let mut stack = vec![entry.root];
                while let Some(id) = stack.pop() {
                    reached += 1;
                    let node = cache.node(id).unwrap();
                    prop_assert_eq!(node.chain_id, entry.chain_id);
                    if let Some(p) = node.parent {
                        prop_assert_eq!(cache.node(p).unwrap().depth + 1, node.depth);
                    } else {
                        prop_assert_eq!(node.depth, 0);
                    }
                    stack.extend(node.children.iter().copied());
                }
            }
            prop_assert_eq!(reached, cache.node_count());
            let path_total: usize = cache.entries().map(|e| e.length).sum();
            prop_assert_eq!(cache.node_count(), path_total + cache.spliced_count());
        }
    }
}
