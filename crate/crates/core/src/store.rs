//! File-backed graph persistence and criteria-based subgraph retrieval.
//!
//! Graphs are stored as a versioned JSON document `{manifest, graph,
//! chunk_graphs}` with a SHA-256 content hash over the canonical payload;
//! the same node/edge schema doubles as the extraction wire format.
//! Retrieval runs over an inverted token index built once per loaded graph,
//! so query cost scales with the retrieved subgraph rather than the full
//! graph.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ChunkGraph, GraphMeta, KnowledgeGraph, ObjectDescriptor, SpatialRelation};
use crate::text::{normalize_predicate, token_set, tokens};

pub const SCHEMA_VERSION: u32 = 1;

/// Header of a stored graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredGraphManifest {
    pub schema_version: u32,
    pub trajectory_id: String,
    pub node_count: usize,
    pub edge_count: usize,
    pub chunk_size: u32,
    /// SHA-256 (hex) of the canonical serialization of the payload.
    pub content_hash: String,
}

/// Serialized body of a knowledge graph: nodes sorted by id, edges in
/// insertion order. The frame index is derived data and is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphBody {
    pub meta: GraphMeta,
    pub last_chunk_applied: i64,
    pub next_serial: u64,
    pub nodes: Vec<ObjectDescriptor>,
    pub edges: Vec<SpatialRelation>,
}

impl GraphBody {
    pub fn from_graph(g: &KnowledgeGraph) -> Self {
        GraphBody {
            meta: g.meta.clone(),
            last_chunk_applied: g.last_chunk_applied,
            next_serial: g.next_serial,
            nodes: g.nodes.values().cloned().collect(),
            edges: g.edges.clone(),
        }
    }

    pub fn into_graph(self) -> Result<KnowledgeGraph> {
        let mut nodes = BTreeMap::new();
        for o in self.nodes {
            if nodes.insert(o.id.clone(), o).is_some() {
                return Err(Error::Corrupt("duplicate node id in graph body".into()));
            }
        }
        let mut g = KnowledgeGraph {
            meta: self.meta,
            last_chunk_applied: self.last_chunk_applied,
            next_serial: self.next_serial,
            nodes,
            edges: self.edges,
            frame_index: BTreeMap::new(),
        };
        g.frame_index = g.rebuild_frame_index();
        g.validate()?;
        Ok(g)
    }
}

#[derive(Serialize)]
struct HashPayload<'a> {
    graph: &'a GraphBody,
    chunk_graphs: &'a [ChunkGraph],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    manifest: StoredGraphManifest,
    graph: GraphBody,
    #[serde(default)]
    chunk_graphs: Vec<ChunkGraph>,
}

/// A loaded graph file: the accumulated graph plus the per-chunk graphs it
/// was built from (kept for chunk-wise retrieval).
#[derive(Debug, Clone)]
pub struct StoredGraph {
    pub manifest: StoredGraphManifest,
    pub graph: KnowledgeGraph,
    pub chunk_graphs: Vec<ChunkGraph>,
}

fn content_hash(graph: &GraphBody, chunk_graphs: &[ChunkGraph]) -> String {
    let canonical = serde_json::to_string(&HashPayload { graph, chunk_graphs })
        .expect("graph body serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Persist a graph (and optionally the chunk graphs it came from) to `path`
/// atomically: the document is written to a sibling temp file and renamed
/// into place, so an interrupted save never leaves a partial graph file.
pub fn save_graph(
    g: &KnowledgeGraph,
    chunk_graphs: &[ChunkGraph],
    path: &Path,
) -> Result<StoredGraphManifest> {
    g.validate()?;
    let body = GraphBody::from_graph(g);
    let manifest = StoredGraphManifest {
        schema_version: SCHEMA_VERSION,
        trajectory_id: g.meta.trajectory_id.clone(),
        node_count: g.node_count(),
        edge_count: g.edge_count(),
        chunk_size: g.meta.chunk_size,
        content_hash: content_hash(&body, chunk_graphs),
    };
    let file = GraphFile {
        manifest: manifest.clone(),
        graph: body,
        chunk_graphs: chunk_graphs.to_vec(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json + "\n")?;
    std::fs::rename(&tmp, path)?;
    Ok(manifest)
}

/// Load and verify a stored graph: schema version, content hash, and every
/// structural invariant.
pub fn load_graph(path: &Path) -> Result<StoredGraph> {
    let raw = std::fs::read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Corrupt(format!("{}: not a graph file: {e}", path.display())))?;
    if file.manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(file.manifest.schema_version));
    }
    let expected = content_hash(&file.graph, &file.chunk_graphs);
    if expected != file.manifest.content_hash {
        return Err(Error::Corrupt(format!(
            "{}: content hash mismatch",
            path.display()
        )));
    }
    for c in &file.chunk_graphs {
        c.validate()?;
    }
    Ok(StoredGraph {
        graph: file.graph.clone().into_graph()?,
        manifest: file.manifest,
        chunk_graphs: file.chunk_graphs,
    })
}

/// Node/edge document embedded into reasoning prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgraphDoc {
    pub nodes: Vec<ObjectDescriptor>,
    pub edges: Vec<SpatialRelation>,
}

impl SubgraphDoc {
    pub fn from_graph(g: &KnowledgeGraph) -> Self {
        SubgraphDoc {
            nodes: g.nodes.values().cloned().collect(),
            edges: g.edges.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("subgraph serializes")
    }
}

/// Selector for criteria-based subgraph retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCriteria {
    #[serde(default)]
    pub entity_terms: Vec<String>,
    #[serde(default)]
    pub predicate_terms: Vec<String>,
    /// field -> term, over color / material / size / affordance.
    #[serde(default)]
    pub attribute_filters: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_window: Option<(u32, u32)>,
    pub hop_depth: u32,
    pub max_nodes: usize,
}

impl Default for RetrievalCriteria {
    fn default() -> Self {
        RetrievalCriteria {
            entity_terms: Vec::new(),
            predicate_terms: Vec::new(),
            attribute_filters: BTreeMap::new(),
            frame_window: None,
            hop_depth: 1,
            max_nodes: 32,
        }
    }
}

const ATTRIBUTE_FIELDS: [&str; 4] = ["color", "material", "size", "affordance"];

impl RetrievalCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes == 0 {
            return Err(Error::InvalidArgument("max_nodes must be >= 1".into()));
        }
        for key in self.attribute_filters.keys() {
            if !ATTRIBUTE_FIELDS.contains(&key.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "unknown attribute filter field {key}"
                )));
            }
        }
        Ok(())
    }
}

/// Token equivalences applied during matching. Groups canonicalize to their
/// first member.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    canonical: HashMap<String, String>,
}

impl Default for SynonymTable {
    fn default() -> Self {
        SynonymTable::from_groups(&[
            &["sofa", "couch"],
            &["television", "tv"],
            &["refrigerator", "fridge"],
            &["bin", "trashcan"],
        ])
    }
}

#[derive(Deserialize)]
struct SynonymFile {
    groups: Vec<Vec<String>>,
}

impl SynonymTable {
    pub fn from_groups(groups: &[&[&str]]) -> Self {
        let mut canonical = HashMap::new();
        for group in groups {
            if let Some(first) = group.first() {
                for member in group.iter() {
                    canonical.insert(member.to_string(), first.to_string());
                }
            }
        }
        SynonymTable { canonical }
    }

    /// Extend the table from a config file `{"groups": [["couch","sofa"]]}`.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let raw = std::fs::read_to_string(path)?;
        let file: SynonymFile = serde_json::from_str(&raw)?;
        for group in file.groups {
            if let Some(first) = group.first().cloned() {
                for member in group {
                    self.canonical.insert(member.to_lowercase(), first.to_lowercase());
                }
            }
        }
        Ok(())
    }

    pub fn canon(&self, token: &str) -> String {
        self.canonical
            .get(token)
            .cloned()
            .unwrap_or_else(|| token.to_string())
    }

    fn canon_tokens(&self, text: &str) -> BTreeSet<String> {
        token_set(text).into_iter().map(|t| self.canon(&t)).collect()
    }
}

/// Criteria-based retriever over an immutable graph snapshot.
///
/// Building the retriever indexes the whole graph once; each retrieval then
/// touches only postings and the expanded neighborhood, keeping per-query
/// cost proportional to the result, not to the graph.
pub struct SubgraphRetriever {
    graph: Arc<KnowledgeGraph>,
    synonyms: SynonymTable,
    token_postings: HashMap<String, Vec<String>>,
    attr_postings: HashMap<(String, String), Vec<String>>,
    predicate_edges: HashMap<String, Vec<usize>>,
    adjacency: HashMap<String, Vec<String>>,
}

impl SubgraphRetriever {
    pub fn new(graph: Arc<KnowledgeGraph>, synonyms: SynonymTable) -> Self {
        let mut token_postings: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut attr_postings: HashMap<(String, String), BTreeSet<String>> = HashMap::new();
        for (id, o) in &graph.nodes {
            let mut node_tokens = synonyms.canon_tokens(&o.label);
            node_tokens.extend(synonyms.canon_tokens(&o.description));
            for t in node_tokens {
                token_postings.entry(t).or_default().insert(id.clone());
            }
            for color in &o.color {
                for t in synonyms.canon_tokens(color) {
                    attr_postings
                        .entry(("color".into(), t))
                        .or_default()
                        .insert(id.clone());
                }
            }
            for t in synonyms.canon_tokens(&o.material) {
                attr_postings
                    .entry(("material".into(), t))
                    .or_default()
                    .insert(id.clone());
            }
            attr_postings
                .entry(("size".into(), format!("{:?}", o.size).to_lowercase()))
                .or_default()
                .insert(id.clone());
            for affordance in &o.affordances {
                for t in synonyms.canon_tokens(affordance) {
                    attr_postings
                        .entry(("affordance".into(), t))
                        .or_default()
                        .insert(id.clone());
                }
            }
        }
        let mut predicate_edges: HashMap<String, Vec<usize>> = HashMap::new();
        let mut adjacency: HashMap<String, Vec<String>> = HashMap::new();
        for (i, e) in graph.edges.iter().enumerate() {
            predicate_edges.entry(e.predicate.clone()).or_default().push(i);
            adjacency
                .entry(e.subject_id.clone())
                .or_default()
                .push(e.object_id.clone());
            adjacency
                .entry(e.object_id.clone())
                .or_default()
                .push(e.subject_id.clone());
        }
        SubgraphRetriever {
            graph,
            synonyms,
            token_postings: token_postings
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            attr_postings: attr_postings
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            predicate_edges,
            adjacency,
        }
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    fn posting_intersection(
        &self,
        terms: &BTreeSet<String>,
        lookup: impl Fn(&str) -> Option<&Vec<String>>,
    ) -> BTreeSet<String> {
        let mut result: Option<BTreeSet<String>> = None;
        for t in terms {
            let ids: BTreeSet<String> = match lookup(t) {
                Some(ids) => ids.iter().cloned().collect(),
                None => BTreeSet::new(),
            };
            result = Some(match result {
                None => ids,
                Some(acc) => acc.intersection(&ids).cloned().collect(),
            });
            if result.as_ref().is_some_and(|r| r.is_empty()) {
                break;
            }
        }
        result.unwrap_or_default()
    }

    /// Seed nodes matching any entity term or attribute filter, expand to
    /// the requested hop depth, filter by frame window, and truncate to
    /// `max_nodes` by (seed-first hop distance, first frame, id).
    pub fn retrieve(&self, criteria: &RetrievalCriteria) -> Result<KnowledgeGraph> {
        criteria.validate()?;
        let mut seeds: BTreeSet<String> = BTreeSet::new();
        for term in &criteria.entity_terms {
            let term_tokens = self.synonyms.canon_tokens(term);
            if term_tokens.is_empty() {
                continue;
            }
            seeds.extend(self.posting_intersection(&term_tokens, |t| self.token_postings.get(t)));
        }
        for (field, value) in &criteria.attribute_filters {
            let value_tokens = self.synonyms.canon_tokens(value);
            if value_tokens.is_empty() {
                continue;
            }
            seeds.extend(self.posting_intersection(&value_tokens, |t| {
                self.attr_postings.get(&(field.clone(), t.to_string()))
            }));
        }
        for pred in &criteria.predicate_terms {
            if let Some(edge_ids) = self.predicate_edges.get(&normalize_predicate(pred)) {
                for &i in edge_ids {
                    seeds.insert(self.graph.edges[i].subject_id.clone());
                    seeds.insert(self.graph.edges[i].object_id.clone());
                }
            }
        }

        // BFS expansion recording hop distance.
        let mut distance: BTreeMap<String, u32> = seeds.iter().map(|s| (s.clone(), 0)).collect();
        let mut queue: VecDeque<String> = seeds.iter().cloned().collect();
        while let Some(id) = queue.pop_front() {
            let d = distance[&id];
            if d >= criteria.hop_depth {
                continue;
            }
            if let Some(neighbors) = self.adjacency.get(&id) {
                for n in neighbors {
                    if !distance.contains_key(n) {
                        distance.insert(n.clone(), d + 1);
                        queue.push_back(n.clone());
                    }
                }
            }
        }

        let mut candidates: Vec<(u32, u32, String)> = distance
            .into_iter()
            .filter(|(id, _)| match criteria.frame_window {
                None => true,
                Some((lo, hi)) => self.graph.nodes[id]
                    .frames
                    .iter()
                    .any(|f| f.index >= lo && f.index <= hi),
            })
            .map(|(id, d)| (d, self.graph.nodes[&id].first_frame(), id))
            .collect();
        candidates.sort();
        candidates.truncate(criteria.max_nodes);

        let kept: BTreeSet<String> = candidates.into_iter().map(|(_, _, id)| id).collect();
        Ok(self.graph.induced_subgraph(&kept))
    }
}

/// One-shot convenience over [`SubgraphRetriever`] for callers that do not
/// keep a retriever around.
pub fn retrieve_subgraph(g: &KnowledgeGraph, criteria: &RetrievalCriteria) -> Result<KnowledgeGraph> {
    SubgraphRetriever::new(Arc::new(g.clone()), SynonymTable::default()).retrieve(criteria)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FrameRef, MergePolicy, SizeClass};

    fn descriptor(id: &str, label: &str, frames: &[u32]) -> ObjectDescriptor {
        let mut o = ObjectDescriptor {
            id: id.into(),
            label: label.into(),
            color: vec![],
            material: String::new(),
            size: SizeClass::Unknown,
            frames: frames.iter().map(|&i| FrameRef::new("t1", i)).collect(),
            bboxes: vec![],
            affordances: vec![],
            relationships: vec![],
            description: String::new(),
            provenance: vec![],
        };
        o.description = o.rendered_description();
        o
    }

    fn fixture_graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new("t1", 40, 8).unwrap();
        let mut ext = descriptor("g:0", "fire extinguisher", &[3, 4]);
        ext.color = vec!["red".into()];
        ext.description = ext.rendered_description();
        g.add_object(ext).unwrap();
        g.add_object(descriptor("g:1", "door", &[4, 5])).unwrap();
        g.add_object(descriptor("g:2", "plant", &[20, 21])).unwrap();
        g.add_relation(SpatialRelation::new(
            "g:0",
            "near",
            "g:1",
            vec![FrameRef::new("t1", 4)],
        ))
        .unwrap();
        g
    }

    #[test]
    fn save_load_round_trip() {
        let g = fixture_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let manifest = save_graph(&g, &[], &path).unwrap();
        assert_eq!(manifest.node_count, 3);
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded.graph, g);
        assert_eq!(loaded.manifest.content_hash, manifest.content_hash);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let g = fixture_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        save_graph(&g, &[], &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() / 2]).unwrap();
        assert!(matches!(load_graph(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn tampered_content_fails_hash_check() {
        let g = fixture_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        save_graph(&g, &[], &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, raw.replace("fire extinguisher", "hydrant")).unwrap();
        assert!(matches!(load_graph(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn unsupported_version_rejected() {
        let g = fixture_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        save_graph(&g, &[], &path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, raw.replace("\"schema_version\": 1", "\"schema_version\": 99")).unwrap();
        assert!(matches!(load_graph(&path), Err(Error::UnsupportedVersion(99))));
    }

    #[test]
    fn retrieve_seed_and_neighbor() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["extinguisher".into()],
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(
            sub.nodes.keys().cloned().collect::<Vec<_>>(),
            vec!["g:0", "g:1"]
        );
        assert_eq!(sub.edge_count(), 1);
        sub.validate().unwrap();
    }

    #[test]
    fn retrieve_nothing_matches_empty() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["zeppelin".into()],
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub.node_count(), 0);
        assert_eq!(sub.edge_count(), 0);
    }

    #[test]
    fn retrieve_max_nodes_one_keeps_best_seed() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["fire extinguisher".into()],
            max_nodes: 1,
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub.nodes.keys().cloned().collect::<Vec<_>>(), vec!["g:0"]);
        assert!(sub.edges.is_empty());
    }

    #[test]
    fn retrieve_attribute_filter_seeds() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            attribute_filters: [("color".to_string(), "red".to_string())].into(),
            hop_depth: 0,
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub.nodes.keys().cloned().collect::<Vec<_>>(), vec!["g:0"]);
    }

    #[test]
    fn retrieve_synonym_match() {
        let mut g = KnowledgeGraph::new("t1", 10, 8).unwrap();
        g.add_object(descriptor("g:0", "sofa", &[2])).unwrap();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["couch".into()],
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub.node_count(), 1);
    }

    #[test]
    fn retrieve_frame_window_filters() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["plant".into(), "door".into()],
            frame_window: Some((18, 25)),
            hop_depth: 0,
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub.nodes.keys().cloned().collect::<Vec<_>>(), vec!["g:2"]);
    }

    #[test]
    fn retrieve_match_all_returns_whole_graph() {
        let g = fixture_graph();
        let criteria = RetrievalCriteria {
            entity_terms: g.nodes.values().map(|o| o.label.clone()).collect(),
            max_nodes: usize::MAX,
            ..RetrievalCriteria::default()
        };
        let sub = retrieve_subgraph(&g, &criteria).unwrap();
        assert_eq!(sub, g);
    }

    #[test]
    fn retriever_agrees_with_neighborhood_reference() {
        // Differential check: the indexed retriever must equal the naive
        // seed-scan + neighborhood path.
        let mut g = fixture_graph();
        g.merge_objects("g:0", "g:2", MergePolicy::PreferRicher).ok();
        let criteria = RetrievalCriteria {
            entity_terms: vec!["door".into()],
            hop_depth: 1,
            ..RetrievalCriteria::default()
        };
        let fast = retrieve_subgraph(&g, &criteria).unwrap();

        // Naive reference: scan every node for a token match, then expand.
        let seeds: BTreeSet<String> = g
            .nodes
            .values()
            .filter(|o| token_set(&o.description).contains("door"))
            .map(|o| o.id.clone())
            .collect();
        let reference = g.neighborhood(&seeds, 1).unwrap();
        assert_eq!(fast, reference);
    }

    #[test]
    fn criteria_validation() {
        let bad_cap = RetrievalCriteria { max_nodes: 0, ..RetrievalCriteria::default() };
        assert!(bad_cap.validate().is_err());
        let bad_field = RetrievalCriteria {
            attribute_filters: [("weight".to_string(), "heavy".to_string())].into(),
            ..RetrievalCriteria::default()
        };
        assert!(bad_field.validate().is_err());
    }

    #[test]
    fn tokens_helper_is_wordwise() {
        assert_eq!(tokens("coffee-table top"), vec!["coffee", "table", "top"]);
    }
}
