//! Video chunking and per-chunk graph extraction.
//!
//! A tour video of `T` frames is partitioned into consecutive chunks of size
//! `b`. Each chunk is turned into a [`ChunkGraph`] by prompting a
//! vision-language backend with the chunk's frames and parsing its strict
//! JSON reply (one automatic repair pass, then rejection).

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, MultimodalRequest, OpKind};
use crate::error::{Error, Result};
use crate::graph::{BoundingBox, ChunkGraph, FrameRef, ObjectDescriptor, SpatialRelation};
use crate::text::{normalize_predicate, normalize_ws};

/// Default chunk size; tuned as the balance point between efficiency and
/// temporal consistency.
pub const DEFAULT_CHUNK_SIZE: u32 = 8;

/// Default extraction template id.
pub const CHUNK_TEMPLATE_ID: &str = "chunk-extract-v1";

/// One chunk of consecutive frame indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_index: u32,
    /// Consecutive 1-based frame indices, at most `chunk_size` of them.
    pub frames: Vec<u32>,
    pub chunk_size: u32,
}

impl ChunkSpec {
    pub fn first(&self) -> u32 {
        *self.frames.first().expect("chunk is never empty")
    }

    pub fn last(&self) -> u32 {
        *self.frames.last().expect("chunk is never empty")
    }

    pub fn frame_range(&self) -> (u32, u32) {
        (self.first(), self.last())
    }
}

/// Partition frames 1..=T into consecutive chunks of size `b`.
///
/// With `include_tail = false` only the ⌊T/b⌋ full chunks are produced and
/// the remainder frames are dropped; with `include_tail = true` a final
/// short chunk of `T mod b` frames is appended when the remainder is
/// non-empty.
pub fn partition_frames(total_frames: u32, chunk_size: u32, include_tail: bool) -> Result<Vec<ChunkSpec>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be >= 1".into()));
    }
    let full = total_frames / chunk_size;
    let mut chunks = Vec::with_capacity(full as usize + 1);
    for k in 0..full {
        chunks.push(ChunkSpec {
            chunk_index: k,
            frames: (k * chunk_size + 1..=(k + 1) * chunk_size).collect(),
            chunk_size,
        });
    }
    let tail_start = full * chunk_size + 1;
    if include_tail && tail_start <= total_frames {
        chunks.push(ChunkSpec {
            chunk_index: full,
            frames: (tail_start..=total_frames).collect(),
            chunk_size,
        });
    }
    Ok(chunks)
}

/// Manifest describing an ingested trajectory: an ordered list of frame
/// image references (paths relative to the manifest's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub trajectory_id: String,
    pub total_frames: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_px: Option<u32>,
    pub frames: Vec<String>,
}

impl FrameManifest {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.total_frames as usize {
            return Err(Error::InvalidArgument(format!(
                "manifest lists {} frames but total_frames is {}",
                self.frames.len(),
                self.total_frames
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let raw = std::fs::read_to_string(path)?;
        let manifest: FrameManifest = serde_json::from_str(&raw)?;
        manifest.validate()?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Resolved path of the image for 1-based frame `index`.
    pub fn frame_path(&self, base: &Path, index: u32) -> Result<PathBuf> {
        let rel = self
            .frames
            .get(index as usize - 1)
            .ok_or_else(|| Error::NotFound(format!("frame {index} not in manifest")))?;
        Ok(base.join(rel))
    }
}

/// Versioned prompt templates with `{placeholder}` substitution.
///
/// The built-in templates ship with the crate; `load_dir` lets a deployment
/// override or extend them with `<id>.txt` files.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            CHUNK_TEMPLATE_ID.to_string(),
            include_str!("../templates/chunk_extract_v1.txt").to_string(),
        );
        templates.insert(
            "similarity-v1".to_string(),
            include_str!("../templates/similarity_v1.txt").to_string(),
        );
        templates.insert(
            "decompose-v1".to_string(),
            include_str!("../templates/decompose_v1.txt").to_string(),
        );
        templates.insert(
            "reason-v1".to_string(),
            include_str!("../templates/reason_v1.txt").to_string(),
        );
        TemplateRegistry { templates }
    }
}

impl TemplateRegistry {
    /// Add or override templates from `<id>.txt` files in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    self.templates
                        .insert(stem.replace('_', "-"), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(())
    }

    /// Render template `id`, replacing each `{name}` placeholder with its
    /// value. Placeholders not named in `vars` are left untouched, so JSON
    /// braces in template bodies survive.
    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = self
            .templates
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("prompt template {id} not registered")))?;
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        Ok(out)
    }
}

/// JSON schema snippet embedded into extraction prompts via `{schema}`.
/// Matches the [`ChunkGraph`] wire serialization.
pub const CHUNK_WIRE_SCHEMA: &str = r#"{"chunk_index": 0, "frame_range": [1, 8], "objects": [{"id": "1", "label": "kettle", "color": ["silver"], "material": "metal", "size": "small", "frames": [{"index": 1}], "bboxes": [{"x": 0.1, "y": 0.2, "w": 0.3, "h": 0.3, "frame": {"index": 1}}], "affordances": ["boil water"]}], "relations": [{"subject_id": "1", "predicate": "on_top_of", "object_id": "2", "frames": [{"index": 1}]}]}"#;

/// One extraction call: a chunk plus the image reference for each of its
/// frames.
#[derive(Debug, Clone)]
pub struct ExtractionRequest {
    pub chunk: ChunkSpec,
    pub image_refs: Vec<String>,
    pub template_id: String,
    pub trajectory_id: String,
    pub frame_dims: Option<(u32, u32)>,
}

impl ExtractionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.chunk.frames.is_empty() {
            return Err(Error::InvalidArgument("chunk has no frames".into()));
        }
        if self.image_refs.len() != self.chunk.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "chunk {} has {} frames but {} image refs",
                self.chunk.chunk_index,
                self.chunk.frames.len(),
                self.image_refs.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic prompt for one chunk extraction call.
pub fn render_chunk_prompt(req: &ExtractionRequest, templates: &TemplateRegistry) -> Result<String> {
    req.validate()?;
    let frame_list = req
        .chunk
        .frames
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    templates.render(
        &req.template_id,
        &[
            ("k", req.chunk.chunk_index.to_string().as_str()),
            ("frame_count", req.chunk.frames.len().to_string().as_str()),
            ("frame_list", frame_list.as_str()),
            ("schema", CHUNK_WIRE_SCHEMA),
        ],
    )
}

/// One repair pass over a model reply: strip code fences and trailing
/// commas. Anything still malformed afterwards is rejected.
pub fn repair_json(raw: &str) -> String {
    let mut s = raw.trim();
    if s.starts_with("```") {
        s = s.trim_start_matches("```json").trim_start_matches("```");
        if let Some(end) = s.rfind("```") {
            s = &s[..end];
        }
        s = s.trim();
    }
    // Drop commas directly before a closing bracket, outside of strings.
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if matches!(next, Some(']') | Some('}')) {
                    continue;
                }
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}

fn schema_invalid(reason: impl Into<String>, raw: &str) -> Error {
    Error::SchemaInvalid {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// Parse and validate a backend reply into a [`ChunkGraph`]: ids are
/// re-namespaced to `c{k}:{n}`, frame refs stamped with the trajectory,
/// attributes normalized, and every chunk invariant enforced.
pub fn parse_chunk_reply(raw: &str, req: &ExtractionRequest) -> Result<ChunkGraph> {
    let repaired = repair_json(raw);
    let wire: ChunkGraph =
        serde_json::from_str(&repaired).map_err(|e| schema_invalid(format!("not valid chunk JSON: {e}"), raw))?;
    let k = req.chunk.chunk_index;
    if wire.chunk_index != k {
        return Err(schema_invalid(
            format!("reply is for chunk {} but chunk {k} was requested", wire.chunk_index),
            raw,
        ));
    }
    let (lo, hi) = req.chunk.frame_range();

    let stamp_frame = |f: &FrameRef| -> FrameRef {
        let mut f = f.clone();
        f.trajectory_id = req.trajectory_id.clone();
        if let Some((w, h)) = req.frame_dims {
            f.width_px.get_or_insert(w);
            f.height_px.get_or_insert(h);
        }
        f
    };

    let mut id_map: BTreeMap<String, String> = BTreeMap::new();
    let mut objects = Vec::with_capacity(wire.objects.len());
    for (pos, o) in wire.objects.iter().enumerate() {
        let local_id = format!("{}{}", ChunkGraph::id_prefix(k), pos + 1);
        if id_map.insert(o.id.clone(), local_id.clone()).is_some() {
            return Err(schema_invalid(format!("duplicate object id {}", o.id), raw));
        }
        let mut frames: Vec<FrameRef> = o.frames.iter().map(&stamp_frame).collect();
        frames.sort_by_key(|f| f.index);
        frames.dedup_by_key(|f| f.index);
        let bboxes: Vec<BoundingBox> = o
            .bboxes
            .iter()
            .map(|b| BoundingBox {
                frame: stamp_frame(&b.frame),
                ..b.clone()
            })
            .collect();
        let mut obj = ObjectDescriptor {
            id: local_id,
            label: normalize_ws(&o.label),
            color: o.color.iter().map(|c| normalize_ws(c)).filter(|c| !c.is_empty()).collect(),
            material: normalize_ws(&o.material),
            size: o.size,
            frames,
            bboxes,
            affordances: o
                .affordances
                .iter()
                .map(|a| normalize_ws(a))
                .filter(|a| !a.is_empty())
                .collect(),
            relationships: Vec::new(),
            description: String::new(),
            provenance: vec![k],
        };
        obj.description = obj.rendered_description();
        objects.push(obj);
    }

    let mut relations: Vec<SpatialRelation> = Vec::new();
    for r in &wire.relations {
        let subject = id_map
            .get(&r.subject_id)
            .ok_or_else(|| schema_invalid(format!("relation references unknown id {}", r.subject_id), raw))?;
        let object = id_map
            .get(&r.object_id)
            .ok_or_else(|| schema_invalid(format!("relation references unknown id {}", r.object_id), raw))?;
        let predicate = normalize_predicate(&r.predicate);
        let frames: Vec<FrameRef> = r.frames.iter().map(&stamp_frame).collect();
        if frames.is_empty() {
            return Err(schema_invalid(format!("relation {predicate} has no frames"), raw));
        }
        if let Some(existing) = relations
            .iter_mut()
            .find(|e| e.subject_id == *subject && e.predicate == predicate && e.object_id == *object)
        {
            existing.frames = crate::graph::union_frames(&existing.frames, &frames);
        } else {
            relations.push(SpatialRelation::new(subject.clone(), &predicate, object.clone(), frames));
        }
    }

    let chunk = ChunkGraph {
        chunk_index: k,
        frame_range: (lo, hi),
        objects,
        relations,
    };
    chunk
        .validate()
        .map_err(|e| schema_invalid(format!("chunk reply violates invariants: {e}"), raw))?;
    Ok(chunk)
}

/// Run one extraction call against the backend and parse the reply.
pub fn extract_chunk_graph(
    req: &ExtractionRequest,
    backend: &dyn Backend,
    templates: &TemplateRegistry,
) -> Result<ChunkGraph> {
    let prompt = render_chunk_prompt(req, templates)?;
    let reply = backend.complete_multimodal(&MultimodalRequest {
        op: OpKind::Extract,
        prompt,
        image_refs: req.image_refs.clone(),
    })?;
    parse_chunk_reply(&reply, req)
}

/// What to do when a chunk extraction fails mid-stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Yield the error and end the stream.
    #[default]
    Halt,
    /// Log a warning, drop the chunk, and continue.
    Skip,
}

#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    pub chunk_size: u32,
    pub include_tail: bool,
    pub template_id: String,
    /// Upper bound on extraction calls in flight at once.
    pub parallelism: usize,
    pub on_error: FailurePolicy,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            include_tail: true,
            template_id: CHUNK_TEMPLATE_ID.to_string(),
            parallelism: 1,
            on_error: FailurePolicy::Halt,
        }
    }
}

/// Ordered stream of chunk graphs for a whole trajectory.
///
/// Chunks within one window of `parallelism` may be extracted concurrently;
/// delivery is always in ascending chunk order. With the halt policy the
/// stream fuses after yielding the first error.
pub struct ChunkStream<'a> {
    pending: VecDeque<ExtractionRequest>,
    buffer: VecDeque<Result<ChunkGraph>>,
    backend: &'a dyn Backend,
    templates: &'a TemplateRegistry,
    config: ExtractionConfig,
    halted: bool,
}

impl Iterator for ChunkStream<'_> {
    type Item = Result<ChunkGraph>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.halted {
                return None;
            }
            if let Some(item) = self.buffer.pop_front() {
                match item {
                    Ok(chunk) => return Some(Ok(chunk)),
                    Err(e) => match self.config.on_error {
                        FailurePolicy::Halt => {
                            self.halted = true;
                            return Some(Err(e));
                        }
                        FailurePolicy::Skip => {
                            tracing::warn!("skipping failed chunk: {e}");
                            continue;
                        }
                    },
                }
            }
            if self.pending.is_empty() {
                return None;
            }
            self.fill_window();
        }
    }
}

impl ChunkStream<'_> {
    fn fill_window(&mut self) {
        let window: Vec<ExtractionRequest> = {
            let n = self.config.parallelism.max(1).min(self.pending.len());
            self.pending.drain(..n).collect()
        };
        let backend = self.backend;
        let templates = self.templates;
        let results: Vec<Result<ChunkGraph>> = if window.len() == 1 {
            window
                .iter()
                .map(|req| extract_one(req, backend, templates))
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = window
                    .iter()
                    .map(|req| scope.spawn(move || extract_one(req, backend, templates)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("extraction worker panicked")).collect()
            })
        };
        self.buffer.extend(results);
    }
}

fn extract_one(
    req: &ExtractionRequest,
    backend: &dyn Backend,
    templates: &TemplateRegistry,
) -> Result<ChunkGraph> {
    extract_chunk_graph(req, backend, templates).map_err(|e| match e {
        Error::SchemaInvalid { reason, raw } => Error::SchemaInvalid {
            reason: format!("chunk {}: {reason}", req.chunk.chunk_index),
            raw,
        },
        Error::BackendUnavailable(m) => {
            Error::BackendUnavailable(format!("chunk {}: {m}", req.chunk.chunk_index))
        }
        other => other,
    })
}

/// Build the ordered extraction stream for a manifest.
pub fn extract_all<'a>(
    manifest: &FrameManifest,
    base_dir: &Path,
    backend: &'a dyn Backend,
    templates: &'a TemplateRegistry,
    config: ExtractionConfig,
) -> Result<ChunkStream<'a>> {
    manifest.validate()?;
    let chunks = partition_frames(manifest.total_frames, config.chunk_size, config.include_tail)?;
    let dims = match (manifest.width_px, manifest.height_px) {
        (Some(w), Some(h)) => Some((w, h)),
        _ => None,
    };
    let mut pending = VecDeque::with_capacity(chunks.len());
    for chunk in chunks {
        let mut image_refs = Vec::with_capacity(chunk.frames.len());
        for &f in &chunk.frames {
            image_refs.push(manifest.frame_path(base_dir, f)?.to_string_lossy().into_owned());
        }
        pending.push_back(ExtractionRequest {
            chunk,
            image_refs,
            template_id: config.template_id.clone(),
            trajectory_id: manifest.trajectory_id.clone(),
            frame_dims: dims,
        });
    }
    Ok(ChunkStream {
        pending,
        buffer: VecDeque::new(),
        backend,
        templates,
        config,
        halted: false,
    })
}
