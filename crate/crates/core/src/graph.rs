//! Domain types for the spatiotemporal knowledge graph and the pure graph
//! operations every other module builds on.
//!
//! A [`KnowledgeGraph`] holds unique objects as nodes and spatial relations
//! as edges, plus an inverted frame index mapping frame numbers to the
//! objects observed in them. Graph values are plain data: cloning yields an
//! independent snapshot, and all mutating operations go through `&mut self`
//! (single-writer), so shared read access across threads is safe.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_predicate, normalize_ws};

/// Slack allowed on `x+w`/`y+h` bounding-box sums to absorb backend rounding.
pub const BBOX_EPSILON: f64 = 1e-6;

/// Reference to a single video frame. Frame indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Owning trajectory. Backend wire payloads may omit it; the extraction
    /// parser stamps it from the request context.
    #[serde(default)]
    pub trajectory_id: String,
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
}

impl FrameRef {
    pub fn new(trajectory_id: impl Into<String>, index: u32) -> Self {
        FrameRef {
            trajectory_id: trajectory_id.into(),
            index,
            width_px: None,
            height_px: None,
        }
    }

    pub fn with_dims(mut self, width_px: u32, height_px: u32) -> Self {
        self.width_px = Some(width_px);
        self.height_px = Some(height_px);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.index < 1 {
            return Err(Error::InvalidArgument("frame index must be >= 1".into()));
        }
        if self.width_px == Some(0) || self.height_px == Some(0) {
            return Err(Error::InvalidArgument(
                "frame dimensions must be positive when present".into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box in fractional frame coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub frame: FrameRef,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.x)
            && (0.0..=1.0).contains(&self.y)
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + BBOX_EPSILON
            && self.y + self.h <= 1.0 + BBOX_EPSILON;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bounding box out of range: x={} y={} w={} h={}",
                self.x, self.y, self.w, self.h
            )));
        }
        self.frame.validate()
    }

    /// Intersection-over-union with another box, ignoring frames.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

/// Coarse object size class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
    #[default]
    Unknown,
}

impl SizeClass {
    fn as_str(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
            SizeClass::Unknown => "unknown",
        }
    }
}

/// Canonical one-sentence rendering of an object's attributes, used as the
/// text the similarity scorer compares. The rendering is a pure function of
/// (label, color, material, size, affordances): lowercase, single spaces,
/// empty fields elided.
pub fn render_description(
    label: &str,
    color: &[String],
    material: &str,
    size: SizeClass,
    affordances: &[String],
) -> String {
    let mut head: Vec<String> = Vec::new();
    if size != SizeClass::Unknown {
        head.push(size.as_str().to_string());
    }
    let colors = normalize_ws(&color.join(" "));
    if !colors.is_empty() {
        head.push(colors);
    }
    let label = normalize_ws(label);
    if !label.is_empty() {
        head.push(label);
    }
    let mut out = head.join(" ");
    let material = normalize_ws(material);
    if !material.is_empty() {
        out.push_str(", material ");
        out.push_str(&material);
    }
    let affords = affordances
        .iter()
        .map(|a| normalize_ws(a))
        .filter(|a| !a.is_empty())
        .collect::<Vec<_>>()
        .join(", ");
    if !affords.is_empty() {
        out.push_str(", affords ");
        out.push_str(&affords);
    }
    out
}

/// One graph node: a unique physical object with its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub color: Vec<String>,
    #[serde(default)]
    pub material: String,
    #[serde(default)]
    pub size: SizeClass,
    /// Temporal evidence: frames where the object was observed, sorted
    /// strictly ascending by index.
    pub frames: Vec<FrameRef>,
    #[serde(default)]
    pub bboxes: Vec<BoundingBox>,
    #[serde(default)]
    pub affordances: Vec<String>,
    /// Redundant index into the owning graph's edges (relation keys).
    #[serde(default)]
    pub relationships: Vec<String>,
    /// Canonical textual rendering; see [`render_description`].
    #[serde(default)]
    pub description: String,
    /// Chunk indices that contributed evidence to this node.
    #[serde(default)]
    pub provenance: Vec<u32>,
}

impl ObjectDescriptor {
    /// Recompute the canonical description from the current attributes.
    pub fn rendered_description(&self) -> String {
        render_description(
            &self.label,
            &self.color,
            &self.material,
            self.size,
            &self.affordances,
        )
    }

    /// Ascending frame indices of the evidence set.
    pub fn frame_indices(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.index).collect()
    }

    pub fn first_frame(&self) -> u32 {
        self.frames.first().map(|f| f.index).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidArgument("object id must be non-empty".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "object {} has no frame evidence",
                self.id
            )));
        }
        for f in &self.frames {
            f.validate()?;
        }
        if !self
            .frames
            .windows(2)
            .all(|w| w[0].index < w[1].index)
        {
            return Err(Error::InvalidArgument(format!(
                "object {} frames are not strictly ascending",
                self.id
            )));
        }
        let frame_set: BTreeSet<u32> = self.frames.iter().map(|f| f.index).collect();
        for b in &self.bboxes {
            b.validate()?;
            if !frame_set.contains(&b.frame.index) {
                return Err(Error::InvalidArgument(format!(
                    "object {} bbox on frame {} outside its frame set",
                    self.id, b.frame.index
                )));
            }
        }
        if self.description != self.rendered_description() {
            return Err(Error::InvalidArgument(format!(
                "object {} description is not the canonical rendering",
                self.id
            )));
        }
        Ok(())
    }
}

/// One graph edge: subject --predicate--> object with frame evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRelation {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
    pub frames: Vec<FrameRef>,
}

impl SpatialRelation {
    pub fn new(
        subject_id: impl Into<String>,
        predicate: &str,
        object_id: impl Into<String>,
        frames: Vec<FrameRef>,
    ) -> Self {
        SpatialRelation {
            subject_id: subject_id.into(),
            predicate: normalize_predicate(predicate),
            object_id: object_id.into(),
            frames: sort_frames(frames),
        }
    }

    /// Stable identifier of the (subject, predicate, object) triple, stored
    /// redundantly in both endpoints' `relationships` lists.
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.subject_id, self.predicate, self.object_id)
    }
}

/// Local knowledge graph covering the frames of a single chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkGraph {
    pub chunk_index: u32,
    /// Inclusive [first, last] frame indices covered by the chunk.
    pub frame_range: (u32, u32),
    pub objects: Vec<ObjectDescriptor>,
    pub relations: Vec<SpatialRelation>,
}

impl ChunkGraph {
    /// Chunk-local id namespace prefix, e.g. `c3:` for chunk 3.
    pub fn id_prefix(chunk_index: u32) -> String {
        format!("c{chunk_index}:")
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.frame_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "chunk {} has invalid frame range [{lo}, {hi}]",
                self.chunk_index
            )));
        }
        let prefix = Self::id_prefix(self.chunk_index);
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            o.validate()?;
            if !o.id.starts_with(&prefix) {
                return Err(Error::InvalidArgument(format!(
                    "object id {} is not namespaced with {prefix}",
                    o.id
                )));
            }
            if !ids.insert(o.id.clone()) {
                return Err(Error::Conflict(format!("duplicate chunk object id {}", o.id)));
            }
            if o.frames.iter().any(|f| f.index < lo || f.index > hi) {
                return Err(Error::InvalidArgument(format!(
                    "object {} has frames outside chunk range [{lo}, {hi}]",
                    o.id
                )));
            }
        }
        for r in &self.relations {
            if r.subject_id == r.object_id {
                return Err(Error::InvalidArgument(format!(
                    "self-loop relation on {}",
                    r.subject_id
                )));
            }
            if !ids.contains(&r.subject_id) || !ids.contains(&r.object_id) {
                return Err(Error::NotFound(format!(
                    "relation {} references an unknown chunk object",
                    r.key()
                )));
            }
            if r.frames.iter().any(|f| f.index < lo || f.index > hi) {
                return Err(Error::InvalidArgument(format!(
                    "relation {} has frames outside chunk range",
                    r.key()
                )));
            }
        }
        Ok(())
    }
}

/// How attribute conflicts are reconciled when two nodes merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    /// Keep the non-empty value; on conflict keep the value from the node
    /// with more frame evidence; tie goes to the kept node.
    #[default]
    PreferRicher,
    /// The kept node's attributes always win; empty fields are filled from
    /// the absorbed node.
    PreferKeep,
}

/// Graph-level metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub trajectory_id: String,
    pub total_frames: u32,
    pub chunk_size: u32,
}

/// The accumulated environment knowledge graph.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub meta: GraphMeta,
    /// Index k of the last chunk folded in; -1 before any chunk.
    pub last_chunk_applied: i64,
    /// Monotonic counter backing fresh `g:{serial}` node ids.
    pub next_serial: u64,
    pub nodes: BTreeMap<String, ObjectDescriptor>,
    pub edges: Vec<SpatialRelation>,
    /// Inverse of the node frame sets: frame index -> ids observed there.
    pub frame_index: BTreeMap<u32, BTreeSet<String>>,
}

fn sort_frames(mut frames: Vec<FrameRef>) -> Vec<FrameRef> {
    frames.sort_by_key(|f| f.index);
    frames.dedup_by_key(|f| f.index);
    frames
}

/// Union two frame lists by index, merging dimension metadata when one side
/// lacks it.
pub fn union_frames(a: &[FrameRef], b: &[FrameRef]) -> Vec<FrameRef> {
    let mut by_index: BTreeMap<u32, FrameRef> = BTreeMap::new();
    for f in a.iter().chain(b.iter()) {
        by_index
            .entry(f.index)
            .and_modify(|existing| {
                if existing.width_px.is_none() {
                    existing.width_px = f.width_px;
                }
                if existing.height_px.is_none() {
                    existing.height_px = f.height_px;
                }
            })
            .or_insert_with(|| f.clone());
    }
    by_index.into_values().collect()
}

impl KnowledgeGraph {
    /// Empty graph for a trajectory. `chunk_size` must be at least 1.
    pub fn new(trajectory_id: impl Into<String>, total_frames: u32, chunk_size: u32) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::InvalidArgument("chunk_size must be >= 1".into()));
        }
        Ok(KnowledgeGraph {
            meta: GraphMeta {
                trajectory_id: trajectory_id.into(),
                total_frames,
                chunk_size,
            },
            last_chunk_applied: -1,
            next_serial: 0,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            frame_index: BTreeMap::new(),
        })
    }

    /// Wrap a single chunk graph as a standalone knowledge graph (used by
    /// chunk-wise retrieval). Objects keep their chunk-local ids.
    pub fn from_chunk(chunk: &ChunkGraph, meta: GraphMeta) -> Result<Self> {
        let mut g = KnowledgeGraph::new(meta.trajectory_id, meta.total_frames, meta.chunk_size)?;
        for o in &chunk.objects {
            let mut o = o.clone();
            o.relationships.clear();
            g.add_object(o)?;
        }
        for r in &chunk.relations {
            g.add_relation(r.clone())?;
        }
        g.last_chunk_applied = chunk.chunk_index as i64;
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mint a fresh global node id.
    pub fn fresh_id(&mut self) -> String {
        let id = format!("g:{}", self.next_serial);
        self.next_serial += 1;
        id
    }

    /// Insert a new node. Fails with conflict on a duplicate id and
    /// invalid-argument when the descriptor violates its invariants.
    pub fn add_object(&mut self, o: ObjectDescriptor) -> Result<()> {
        o.validate()?;
        if self.nodes.contains_key(&o.id) {
            return Err(Error::Conflict(format!("object id {} already present", o.id)));
        }
        for f in &o.frames {
            self.frame_index
                .entry(f.index)
                .or_default()
                .insert(o.id.clone());
        }
        self.nodes.insert(o.id.clone(), o);
        Ok(())
    }

    /// Insert or extend an edge. Re-observing an existing triple unions its
    /// frame evidence instead of duplicating the edge.
    pub fn add_relation(&mut self, r: SpatialRelation) -> Result<()> {
        if r.subject_id == r.object_id {
            return Err(Error::InvalidArgument(format!(
                "self-loop relation on {}",
                r.subject_id
            )));
        }
        if r.frames.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "relation {} has no frame evidence",
                r.key()
            )));
        }
        for id in [&r.subject_id, &r.object_id] {
            if !self.nodes.contains_key(id) {
                return Err(Error::NotFound(format!("relation endpoint {id} not in graph")));
            }
        }
        let r = SpatialRelation {
            predicate: normalize_predicate(&r.predicate),
            frames: sort_frames(r.frames),
            ..r
        };
        if let Some(existing) = self
            .edges
            .iter_mut()
            .find(|e| e.subject_id == r.subject_id && e.predicate == r.predicate && e.object_id == r.object_id)
        {
            existing.frames = union_frames(&existing.frames, &r.frames);
            return Ok(());
        }
        let key = r.key();
        for id in [r.subject_id.clone(), r.object_id.clone()] {
            let node = self.nodes.get_mut(&id).expect("endpoint checked above");
            if !node.relationships.contains(&key) {
                node.relationships.push(key.clone());
            }
        }
        self.edges.push(r);
        Ok(())
    }

    /// Fold `incoming`'s evidence and attributes into the node `keep_id`,
    /// without touching edges. Shared by [`merge_objects`] and the chunk
    /// association step.
    ///
    /// [`merge_objects`]: KnowledgeGraph::merge_objects
    pub fn absorb_descriptor(
        &mut self,
        keep_id: &str,
        incoming: &ObjectDescriptor,
        policy: MergePolicy,
    ) -> Result<()> {
        let node = self
            .nodes
            .get_mut(keep_id)
            .ok_or_else(|| Error::NotFound(format!("object {keep_id} not in graph")))?;

        let keep_evidence = node.frames.len();
        let inc_evidence = incoming.frames.len();
        let prefer_incoming =
            policy == MergePolicy::PreferRicher && inc_evidence > keep_evidence;

        // Scalar attributes: non-empty beats empty; conflicts go to the
        // evidence-richer side under PreferRicher, to the kept node otherwise.
        if node.label.is_empty() || (prefer_incoming && !incoming.label.is_empty()) {
            if !incoming.label.is_empty() {
                node.label = incoming.label.clone();
            }
        }
        if node.material.is_empty() || (prefer_incoming && !incoming.material.is_empty()) {
            if !incoming.material.is_empty() {
                node.material = incoming.material.clone();
            }
        }
        if node.size == SizeClass::Unknown
            || (prefer_incoming && incoming.size != SizeClass::Unknown)
        {
            if incoming.size != SizeClass::Unknown {
                node.size = incoming.size;
            }
        }
        for c in &incoming.color {
            if !node.color.contains(c) {
                node.color.push(c.clone());
            }
        }
        for a in &incoming.affordances {
            if !node.affordances.contains(a) {
                node.affordances.push(a.clone());
            }
        }

        let new_frames = union_frames(&node.frames, &incoming.frames);
        for f in &new_frames {
            self.frame_index
                .entry(f.index)
                .or_default()
                .insert(keep_id.to_string());
        }
        let node = self.nodes.get_mut(keep_id).expect("still present");
        node.frames = new_frames;
        for b in &incoming.bboxes {
            if !node.bboxes.contains(b) {
                node.bboxes.push(b.clone());
            }
        }
        let mut provenance: BTreeSet<u32> = node.provenance.iter().copied().collect();
        provenance.extend(incoming.provenance.iter().copied());
        node.provenance = provenance.into_iter().collect();
        node.description = node.rendered_description();
        Ok(())
    }

    /// Merge node `drop_id` into `keep_id`: evidence unioned, attributes
    /// reconciled per policy, edges re-pointed and deduplicated, the dropped
    /// node removed.
    pub fn merge_objects(&mut self, keep_id: &str, drop_id: &str, policy: MergePolicy) -> Result<()> {
        if keep_id == drop_id {
            return Err(Error::InvalidArgument(
                "cannot merge an object with itself".into(),
            ));
        }
        if !self.nodes.contains_key(keep_id) {
            return Err(Error::NotFound(format!("object {keep_id} not in graph")));
        }
        let dropped = self
            .nodes
            .get(drop_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("object {drop_id} not in graph")))?;

        self.absorb_descriptor(keep_id, &dropped, policy)?;

        // Re-point edges, discarding any that collapse into self-loops, then
        // deduplicate triples with frame union (first occurrence keeps its
        // position).
        let mut deduped: Vec<SpatialRelation> = Vec::with_capacity(self.edges.len());
        let mut seen: HashMap<String, usize> = HashMap::new();
        for mut e in std::mem::take(&mut self.edges) {
            if e.subject_id == drop_id {
                e.subject_id = keep_id.to_string();
            }
            if e.object_id == drop_id {
                e.object_id = keep_id.to_string();
            }
            if e.subject_id == e.object_id {
                continue;
            }
            match seen.get(&e.key()) {
                Some(&i) => {
                    deduped[i].frames = union_frames(&deduped[i].frames, &e.frames);
                }
                None => {
                    seen.insert(e.key(), deduped.len());
                    deduped.push(e);
                }
            }
        }
        self.edges = deduped;

        self.nodes.remove(drop_id);
        self.rebuild_relationship_lists();
        self.frame_index = self.rebuild_frame_index();
        Ok(())
    }

    /// Ordered frame indices where object `id` was observed.
    pub fn frames_of(&self, id: &str) -> Result<Vec<u32>> {
        self.nodes
            .get(id)
            .map(|o| o.frame_indices())
            .ok_or_else(|| Error::NotFound(format!("object {id} not in graph")))
    }

    /// Induced subgraph of every node within `depth` edge hops of any seed,
    /// plus all edges between included nodes.
    pub fn neighborhood(&self, seed_ids: &BTreeSet<String>, depth: u32) -> Result<KnowledgeGraph> {
        for s in seed_ids {
            if !self.nodes.contains_key(s) {
                return Err(Error::NotFound(format!("seed {s} not in graph")));
            }
        }
        let mut adjacency: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in &self.edges {
            adjacency.entry(&e.subject_id).or_default().push(&e.object_id);
            adjacency.entry(&e.object_id).or_default().push(&e.subject_id);
        }
        let mut included: BTreeSet<String> = seed_ids.clone();
        let mut queue: VecDeque<(&str, u32)> = seed_ids.iter().map(|s| (s.as_str(), 0)).collect();
        while let Some((id, d)) = queue.pop_front() {
            if d >= depth {
                continue;
            }
            if let Some(neighbors) = adjacency.get(id) {
                for &n in neighbors {
                    if included.insert(n.to_string()) {
                        queue.push_back((n, d + 1));
                    }
                }
            }
        }
        Ok(self.induced_subgraph(&included))
    }

    /// Subgraph over a known-good id set. Ids absent from the graph are
    /// ignored.
    pub fn induced_subgraph(&self, ids: &BTreeSet<String>) -> KnowledgeGraph {
        let mut sub = KnowledgeGraph {
            meta: self.meta.clone(),
            last_chunk_applied: self.last_chunk_applied,
            next_serial: self.next_serial,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            frame_index: BTreeMap::new(),
        };
        for id in ids {
            if let Some(o) = self.nodes.get(id) {
                let mut o = o.clone();
                o.relationships.clear();
                sub.nodes.insert(id.clone(), o);
            }
        }
        for e in &self.edges {
            if sub.nodes.contains_key(&e.subject_id) && sub.nodes.contains_key(&e.object_id) {
                sub.edges.push(e.clone());
            }
        }
        sub.rebuild_relationship_lists();
        sub.frame_index = sub.rebuild_frame_index();
        sub
    }

    /// Recompute the frame index from the node frame sets.
    pub fn rebuild_frame_index(&self) -> BTreeMap<u32, BTreeSet<String>> {
        let mut index: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
        for (id, o) in &self.nodes {
            for f in &o.frames {
                index.entry(f.index).or_default().insert(id.clone());
            }
        }
        index
    }

    /// Recompute every node's redundant `relationships` list from the edges.
    pub fn rebuild_relationship_lists(&mut self) {
        for o in self.nodes.values_mut() {
            o.relationships.clear();
        }
        for e in &self.edges {
            let key = e.key();
            for id in [&e.subject_id, &e.object_id] {
                if let Some(node) = self.nodes.get_mut(id) {
                    if !node.relationships.contains(&key) {
                        node.relationships.push(key.clone());
                    }
                }
            }
        }
    }

    /// Check every structural invariant. Used after load and in tests.
    pub fn validate(&self) -> Result<()> {
        for (id, o) in &self.nodes {
            if *id != o.id {
                return Err(Error::Corrupt(format!(
                    "node map key {id} disagrees with descriptor id {}",
                    o.id
                )));
            }
            o.validate()?;
        }
        let mut triples = BTreeSet::new();
        for e in &self.edges {
            if e.subject_id == e.object_id {
                return Err(Error::Corrupt(format!("self-loop edge on {}", e.subject_id)));
            }
            for id in [&e.subject_id, &e.object_id] {
                if !self.nodes.contains_key(id) {
                    return Err(Error::Corrupt(format!("edge endpoint {id} not in graph")));
                }
            }
            if e.predicate != normalize_predicate(&e.predicate) {
                return Err(Error::Corrupt(format!(
                    "predicate {} is not normalized",
                    e.predicate
                )));
            }
            if e.frames.is_empty() {
                return Err(Error::Corrupt(format!("edge {} has no frame evidence", e.key())));
            }
            if !triples.insert(e.key()) {
                return Err(Error::Corrupt(format!("duplicate edge triple {}", e.key())));
            }
        }
        // Relationship lists must mirror the edge set exactly.
        let mut expected: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        for e in &self.edges {
            expected.entry(&e.subject_id).or_default().insert(e.key());
            expected.entry(&e.object_id).or_default().insert(e.key());
        }
        for (id, o) in &self.nodes {
            let have: BTreeSet<String> = o.relationships.iter().cloned().collect();
            let want = expected.remove(id.as_str()).unwrap_or_default();
            if have != want {
                return Err(Error::Corrupt(format!(
                    "relationships list of {id} disagrees with the edge set"
                )));
            }
        }
        if self.frame_index != self.rebuild_frame_index() {
            return Err(Error::Corrupt(
                "frame index disagrees with node frame sets".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn descriptor(id: &str, label: &str, frames: &[u32]) -> ObjectDescriptor {
        let frames: Vec<FrameRef> = frames.iter().map(|&i| FrameRef::new("t1", i)).collect();
        let mut o = ObjectDescriptor {
            id: id.into(),
            label: label.into(),
            color: vec![],
            material: String::new(),
            size: SizeClass::Unknown,
            frames,
            bboxes: vec![],
            affordances: vec![],
            relationships: vec![],
            description: String::new(),
            provenance: vec![],
        };
        o.description = o.rendered_description();
        o
    }

    fn graph_with(nodes: &[(&str, &str, &[u32])]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new("t1", 100, 8).unwrap();
        for (id, label, frames) in nodes {
            g.add_object(descriptor(id, label, frames)).unwrap();
        }
        g
    }

    fn relation(s: &str, p: &str, o: &str, frames: &[u32]) -> SpatialRelation {
        SpatialRelation::new(
            s,
            p,
            o,
            frames.iter().map(|&i| FrameRef::new("t1", i)).collect(),
        )
    }

    #[test]
    fn new_graph_empty_and_meta() {
        let g = KnowledgeGraph::new("t1", 0, 8).unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.last_chunk_applied, -1);

        let g = KnowledgeGraph::new("t1", 100, 8).unwrap();
        assert_eq!(g.meta.total_frames, 100);
    }

    #[test]
    fn new_graph_rejects_zero_chunk_size() {
        assert!(matches!(
            KnowledgeGraph::new("t1", 100, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn add_object_updates_frame_index() {
        let g = graph_with(&[("a", "chair", &[3, 4])]);
        assert!(g.frame_index[&3].contains("a"));
        assert!(g.frame_index[&4].contains("a"));
        assert_eq!(g.frames_of("a").unwrap(), vec![3, 4]);
    }

    #[test]
    fn add_object_duplicate_id_conflicts() {
        let mut g = graph_with(&[("a", "chair", &[3])]);
        let err = g.add_object(descriptor("a", "chair", &[5])).unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
    }

    #[test]
    fn add_object_empty_frames_rejected() {
        let mut g = KnowledgeGraph::new("t1", 10, 8).unwrap();
        let err = g.add_object(descriptor("a", "chair", &[])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn add_relation_unions_frames() {
        let mut g = graph_with(&[("a", "chair", &[1]), ("b", "table", &[1, 2])]);
        g.add_relation(relation("a", "near", "b", &[1])).unwrap();
        g.add_relation(relation("a", "near", "b", &[2])).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(
            g.edges[0].frames.iter().map(|f| f.index).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn add_relation_rejects_self_loop_and_missing_endpoint() {
        let mut g = graph_with(&[("a", "chair", &[1])]);
        assert!(matches!(
            g.add_relation(relation("a", "near", "a", &[1])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            g.add_relation(relation("a", "near", "ghost", &[1])),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn merge_unions_frames_and_drops_node() {
        let mut g = graph_with(&[("a", "chair", &[1, 2]), ("b", "chair", &[9, 10])]);
        g.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.frames_of("a").unwrap(), vec![1, 2, 9, 10]);
        assert!(g.frames_of("b").is_err());
        g.validate().unwrap();
    }

    #[test]
    fn merge_repoints_edges() {
        let mut g = graph_with(&[
            ("a", "chair", &[1]),
            ("b", "chair", &[9]),
            ("x", "table", &[1, 9]),
        ]);
        g.add_relation(relation("b", "near", "x", &[9])).unwrap();
        g.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edges[0].subject_id, "a");
        assert_eq!(g.edges[0].object_id, "x");
        g.validate().unwrap();
    }

    #[test]
    fn merge_dedups_parallel_edges_with_frame_union() {
        // Hand-enumerated 3-node fixture: both a and b carry (., near, x);
        // after merging b into a the edge set must be exactly one edge with
        // frames {1, 9}.
        let mut g = graph_with(&[
            ("a", "chair", &[1]),
            ("b", "chair", &[9]),
            ("x", "table", &[1, 9]),
        ]);
        g.add_relation(relation("a", "near", "x", &[1])).unwrap();
        g.add_relation(relation("b", "near", "x", &[9])).unwrap();
        g.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.edges[0].key(), "a|near|x");
        assert_eq!(
            g.edges[0].frames.iter().map(|f| f.index).collect::<Vec<_>>(),
            vec![1, 9]
        );
        assert_eq!(g.frames_of("a").unwrap(), vec![1, 9]);
        g.validate().unwrap();
    }

    #[test]
    fn merge_identical_ids_rejected() {
        let mut g = graph_with(&[("a", "chair", &[1])]);
        assert!(matches!(
            g.merge_objects("a", "a", MergePolicy::PreferRicher),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            g.merge_objects("a", "ghost", MergePolicy::PreferRicher),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn merge_prefer_richer_takes_evidence_weighted_attributes() {
        let mut g = KnowledgeGraph::new("t1", 100, 8).unwrap();
        let mut a = descriptor("a", "chair", &[1]);
        a.material = "wood".into();
        a.description = a.rendered_description();
        let mut b = descriptor("b", "chair", &[5, 6, 7]);
        b.material = "plastic".into();
        b.size = SizeClass::Large;
        b.description = b.rendered_description();
        g.add_object(a).unwrap();
        g.add_object(b).unwrap();
        g.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        let merged = &g.nodes["a"];
        // b carried more frames, so its material wins; unknown size filled in.
        assert_eq!(merged.material, "plastic");
        assert_eq!(merged.size, SizeClass::Large);
        assert_eq!(merged.description, merged.rendered_description());
    }

    #[test]
    fn merge_prefer_keep_keeps_target_attributes() {
        let mut g = KnowledgeGraph::new("t1", 100, 8).unwrap();
        let mut a = descriptor("a", "chair", &[1]);
        a.material = "wood".into();
        a.description = a.rendered_description();
        let mut b = descriptor("b", "chair", &[5, 6, 7]);
        b.material = "plastic".into();
        b.description = b.rendered_description();
        g.add_object(a).unwrap();
        g.add_object(b).unwrap();
        g.merge_objects("a", "b", MergePolicy::PreferKeep).unwrap();
        assert_eq!(g.nodes["a"].material, "wood");
    }

    #[test]
    fn frames_of_single_and_missing() {
        let g = graph_with(&[("a", "chair", &[7])]);
        assert_eq!(g.frames_of("a").unwrap(), vec![7]);
        assert!(matches!(g.frames_of("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn neighborhood_depth_zero_is_seeds_only() {
        let mut g = graph_with(&[
            ("a", "chair", &[1]),
            ("b", "table", &[1]),
            ("c", "lamp", &[2]),
        ]);
        g.add_relation(relation("a", "near", "b", &[1])).unwrap();
        g.add_relation(relation("b", "near", "c", &[2])).unwrap();
        let seeds: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let sub = g.neighborhood(&seeds, 0).unwrap();
        assert_eq!(sub.node_count(), 2);
        assert_eq!(sub.edge_count(), 1); // only the a-b edge lies among seeds
        sub.validate().unwrap();
    }

    #[test]
    fn neighborhood_chain_depth_one() {
        let mut g = graph_with(&[
            ("a", "chair", &[1]),
            ("b", "table", &[1]),
            ("c", "lamp", &[2]),
        ]);
        g.add_relation(relation("a", "near", "b", &[1])).unwrap();
        g.add_relation(relation("b", "near", "c", &[2])).unwrap();
        let seeds: BTreeSet<String> = ["a".to_string()].into();
        let sub = g.neighborhood(&seeds, 1).unwrap();
        assert_eq!(
            sub.nodes.keys().cloned().collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        assert_eq!(sub.edge_count(), 1);
    }

    #[test]
    fn neighborhood_star_depth_one() {
        // Star with 5 leaves: brute-force BFS by hand gives 6 nodes, 5 edges.
        let mut g = graph_with(&[
            ("hub", "table", &[1]),
            ("l1", "a1", &[1]),
            ("l2", "a2", &[1]),
            ("l3", "a3", &[1]),
            ("l4", "a4", &[1]),
            ("l5", "a5", &[1]),
        ]);
        for leaf in ["l1", "l2", "l3", "l4", "l5"] {
            g.add_relation(relation("hub", "near", leaf, &[1])).unwrap();
        }
        let seeds: BTreeSet<String> = ["hub".to_string()].into();
        let sub = g.neighborhood(&seeds, 1).unwrap();
        assert_eq!(sub.node_count(), 6);
        assert_eq!(sub.edge_count(), 5);
        sub.validate().unwrap();
    }

    #[test]
    fn neighborhood_unknown_seed_errors() {
        let g = graph_with(&[("a", "chair", &[1])]);
        let seeds: BTreeSet<String> = ["ghost".to_string()].into();
        assert!(matches!(g.neighborhood(&seeds, 1), Err(Error::NotFound(_))));
    }

    #[test]
    fn neighborhood_full_depth_equals_graph() {
        let mut g = graph_with(&[
            ("a", "chair", &[1]),
            ("b", "table", &[1]),
            ("c", "lamp", &[2]),
        ]);
        g.add_relation(relation("a", "near", "b", &[1])).unwrap();
        g.add_relation(relation("b", "near", "c", &[2])).unwrap();
        let seeds: BTreeSet<String> = g.nodes.keys().cloned().collect();
        let sub = g.neighborhood(&seeds, g.node_count() as u32).unwrap();
        assert_eq!(sub, g);
    }

    #[test]
    fn operations_do_not_alias_snapshots() {
        let mut base = graph_with(&[("a", "chair", &[1]), ("b", "table", &[1])]);
        base.add_relation(relation("a", "near", "b", &[1])).unwrap();
        let snapshot = base.clone();

        let mut once = snapshot.clone();
        once.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        let mut twice = snapshot.clone();
        twice.merge_objects("a", "b", MergePolicy::PreferRicher).unwrap();
        assert_eq!(once, twice);
        assert_ne!(once, snapshot);
    }

    #[test]
    fn description_rendering_elides_empty_fields() {
        assert_eq!(
            render_description("chair", &[], "", SizeClass::Unknown, &[]),
            "chair"
        );
        assert_eq!(
            render_description(
                "Fire Extinguisher",
                &["red".into()],
                "metal",
                SizeClass::Small,
                &["spray".into(), "grab".into()]
            ),
            "small red fire extinguisher, material metal, affords spray, grab"
        );
    }

    #[test]
    fn bbox_validation() {
        let frame = FrameRef::new("t1", 1);
        let ok = BoundingBox { x: 0.5, y: 0.5, w: 0.5, h: 0.5, frame: frame.clone() };
        assert!(ok.validate().is_ok());
        let overflow = BoundingBox { x: 0.6, y: 0.5, w: 0.5, h: 0.5, frame: frame.clone() };
        assert!(overflow.validate().is_err());
        let zero_w = BoundingBox { x: 0.1, y: 0.1, w: 0.0, h: 0.5, frame };
        assert!(zero_w.validate().is_err());
    }

    #[test]
    fn bbox_iou_basic() {
        let f = FrameRef::new("t1", 1);
        let a = BoundingBox { x: 0.0, y: 0.0, w: 0.5, h: 0.5, frame: f.clone() };
        let b = BoundingBox { x: 0.25, y: 0.0, w: 0.5, h: 0.5, frame: f.clone() };
        // intersection 0.25*0.5 = 0.125, union 0.25+0.25-0.125 = 0.375
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        let c = BoundingBox { x: 0.6, y: 0.6, w: 0.1, h: 0.1, frame: f };
        assert_eq!(a.iou(&c), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn chunk_graph_validates_ranges_and_ids() {
        let mut o = descriptor("c0:1", "chair", &[2, 3]);
        o.description = o.rendered_description();
        let chunk = ChunkGraph {
            chunk_index: 0,
            frame_range: (1, 8),
            objects: vec![o.clone()],
            relations: vec![],
        };
        chunk.validate().unwrap();

        let bad_range = ChunkGraph {
            chunk_index: 0,
            frame_range: (1, 2),
            objects: vec![o.clone()],
            relations: vec![],
        };
        assert!(bad_range.validate().is_err());

        let bad_prefix = ChunkGraph {
            chunk_index: 1,
            frame_range: (1, 8),
            objects: vec![o],
            relations: vec![],
        };
        assert!(bad_prefix.validate().is_err());
    }
}
