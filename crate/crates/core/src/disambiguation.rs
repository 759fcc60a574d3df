//! Resolving ambiguous instance categories with an external decision service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::map::{CategoryId, InstanceId, InstanceRecord, MapState, VoxelKey};

pub const PROMPT_TEMPLATE: &str = "Please, help me to disambiguate the correct category of this object. \
Here, I provide you with my current evidence (in the form of a probability distribution over the \
potential categories), its 3D geometry through a voxel-based reconstruction, and a set of views of \
the object. Given this information, you have to provide an answer in the form of \"The object \
category is <object_category>\", where only the potential categories provided in the evidence are valid.";

const ANSWER_PHRASE: &str = "the object category is";

/// Occupied-voxel lists in prompts are downsampled to at most this many.
pub const MAX_GEOMETRY_VOXELS: usize = 512;

#[derive(Debug, Error)]
pub enum DisambiguationError {
    #[error("instance {0} has nothing to disambiguate")]
    NothingToDisambiguate(InstanceId),
    #[error("instance {0} is not in the map")]
    UnknownInstance(InstanceId),
    #[error("unparseable decision: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("no scripted response for instance {0}")]
    NoResponse(InstanceId),
    #[error("client setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationConfig {
    pub min_prob: f64,
    /// Views per candidate category.
    pub views_per_candidate: usize,
}

impl Default for DisambiguationConfig {
    fn default() -> Self {
        Self {
            min_prob: 0.15,
            views_per_candidate: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub category: CategoryId,
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub voxel_count: usize,
    /// Inclusive voxel bounds, `None` for an empty footprint.
    pub bounds: Option<[VoxelKey; 2]>,
    pub voxels: Vec<VoxelKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRef {
    pub image: Option<PathBuf>,
    pub frame_id: u64,
    pub category: String,
    pub confidence: f64,
    pub pixel_bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationRequest {
    pub instance_id: InstanceId,
    pub candidates: Vec<Candidate>,
    pub geometry: GeometrySummary,
    pub views: Vec<ViewRef>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationDecision {
    pub instance_id: InstanceId,
    pub chosen_category: CategoryId,
    pub chosen_label: String,
    pub raw_response: String,
}

fn label_of(map: &MapState, c: CategoryId) -> String {
    map.category_label(c).unwrap_or("unknown").to_owned()
}

/// Categories worth asking about: every one with probability at least
/// `min_prob`, and always the two most probable. Sorted by descending
/// probability, then label.
pub fn select_candidates(
    map: &MapState,
    record: &InstanceRecord,
    min_prob: f64,
) -> Result<Vec<Candidate>, DisambiguationError> {
    let dist = record
        .category_distribution()
        .map_err(|_| DisambiguationError::NothingToDisambiguate(record.id))?;
    let mut all: Vec<Candidate> = dist
        .iter()
        .map(|(category, probability)| Candidate {
            category,
            label: label_of(map, category),
            probability,
        })
        .collect();
    all.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.label.cmp(&b.label)));
    Ok(all
        .into_iter()
        .enumerate()
        .filter(|(rank, c)| *rank < 2 || c.probability >= min_prob)
        .map(|(_, c)| c)
        .collect())
}

/// Up to `m` observations per candidate, highest confidence first,
/// preferring frames not yet used for that candidate.
pub fn select_views(
    map: &MapState,
    record: &InstanceRecord,
    candidates: &[Candidate],
    m: usize,
    view_root: Option<&Path>,
) -> Vec<ViewRef> {
    let mut out = Vec::new();
    for cand in candidates {
        let mut obs: Vec<_> = record
            .observations
            .iter()
            .filter(|o| o.category == cand.category)
            .collect();
        obs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.frame_id.cmp(&b.frame_id)));
        let mut chosen: Vec<usize> = Vec::new();
        let mut frames = std::collections::BTreeSet::new();
        for (i, o) in obs.iter().enumerate() {
            if chosen.len() == m {
                break;
            }
            if frames.insert(o.frame_id) {
                chosen.push(i);
            }
        }
        for i in 0..obs.len() {
            if chosen.len() == m {
                break;
            }
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        out.extend(chosen.into_iter().map(|i| {
            let o = obs[i];
            ViewRef {
                image: o.view.as_ref().map(|v| match view_root {
                    Some(root) => root.join(v),
                    None => PathBuf::from(v),
                }),
                frame_id: o.frame_id,
                category: label_of(map, o.category),
                confidence: o.confidence,
                pixel_bbox: o.pixel_bbox,
            }
        }));
    }
    out
}

pub fn summarize_geometry(map: &MapState, id: InstanceId) -> GeometrySummary {
    let keys: Vec<VoxelKey> = map
        .sorted_cells()
        .into_iter()
        .filter(|(_, c)| c.contains(id))
        .map(|(k, _)| *k)
        .collect();
    let bounds = keys.first().map(|&first| {
        keys.iter().fold([first, first], |[lo, hi], k| {
            [
                VoxelKey::new(lo.i.min(k.i), lo.j.min(k.j), lo.k.min(k.k)),
                VoxelKey::new(hi.i.max(k.i), hi.j.max(k.j), hi.k.max(k.k)),
            ]
        })
    });
    let stride = keys.len().div_ceil(MAX_GEOMETRY_VOXELS).max(1);
    GeometrySummary {
        voxel_count: keys.len(),
        bounds,
        voxels: keys.iter().step_by(stride).copied().collect(),
    }
}

#[derive(Serialize)]
struct Appendix<'a> {
    candidates: Vec<AppendixCandidate<'a>>,
    voxel_size: f64,
    geometry: &'a GeometrySummary,
    views: &'a [ViewRef],
}

#[derive(Serialize)]
struct AppendixCandidate<'a> {
    category: &'a str,
    probability: f64,
}

pub fn build_prompt(request: &DisambiguationRequest, voxel_size: f64) -> String {
    let appendix = Appendix {
        candidates: request
            .candidates
            .iter()
            .map(|c| AppendixCandidate {
                category: &c.label,
                probability: c.probability,
            })
            .collect(),
        voxel_size,
        geometry: &request.geometry,
        views: &request.views,
    };
    let labels: Vec<&str> = request.candidates.iter().map(|c| c.label.as_str()).collect();
    format!(
        "{PROMPT_TEMPLATE}\n\nPotential categories: {}.\nThe views are attached in the order listed below.\n\n{}\n",
        labels.join(", "),
        serde_json::to_string_pretty(&appendix).expect("appendix serializes")
    )
}

pub fn build_request(
    map: &MapState,
    id: InstanceId,
    cfg: &DisambiguationConfig,
    view_root: Option<&Path>,
) -> Result<DisambiguationRequest, DisambiguationError> {
    let record = map.instance(id).ok_or(DisambiguationError::UnknownInstance(id))?;
    let candidates = select_candidates(map, record, cfg.min_prob)?;
    if candidates.len() < 2 {
        return Err(DisambiguationError::NothingToDisambiguate(id));
    }
    let mut request = DisambiguationRequest {
        instance_id: id,
        views: select_views(map, record, &candidates, cfg.views_per_candidate, view_root),
        candidates,
        geometry: summarize_geometry(map, id),
        prompt: String::new(),
    };
    request.prompt = build_prompt(&request, map.voxel_size());
    Ok(request)
}

/// The answer sentence a well-behaved service returns for `label`.
pub fn canonical_answer(label: &str) -> String {
    format!("The object category is {label}")
}

/// Extracts the category named after the answer phrase. The longest
/// candidate label that follows the phrase at a word boundary wins.
pub fn parse_decision(
    response: &str,
    request: &DisambiguationRequest,
) -> Result<DisambiguationDecision, DisambiguationError> {
    let lower = response.to_lowercase();
    for (pos, _) in lower.match_indices(ANSWER_PHRASE) {
        let rest = lower[pos + ANSWER_PHRASE.len()..]
            .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '"' | '\'' | '<' | '*' | '`'));
        let hit = request
            .candidates
            .iter()
            .filter(|c| {
                let label = c.label.to_lowercase();
                rest.starts_with(&label)
                    && !rest[label.len()..].chars().next().is_some_and(|ch| ch.is_alphanumeric())
            })
            .max_by_key(|c| c.label.len());
        if let Some(c) = hit {
            return Ok(DisambiguationDecision {
                instance_id: request.instance_id,
                chosen_category: c.category,
                chosen_label: c.label.clone(),
                raw_response: response.to_owned(),
            });
        }
    }
    Err(DisambiguationError::Parse(response.chars().take(200).collect()))
}

/// A synchronous request/response decision service.
pub trait DecisionClient: Sync {
    fn query(&self, request: &DisambiguationRequest) -> Result<String, ClientError>;
}

/// Always answers the most probable candidate; equivalent to top-1
/// assignment without disambiguation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ArgmaxClient;

impl DecisionClient for ArgmaxClient {
    fn query(&self, request: &DisambiguationRequest) -> Result<String, ClientError> {
        let top = request.candidates.first().ok_or(ClientError::NoResponse(request.instance_id))?;
        Ok(canonical_answer(&top.label))
    }
}

/// Scripted responses keyed by instance id or by the hex SHA-256 of the
/// prompt.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    responses: BTreeMap<String, String>,
}

impl MockClient {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Self { responses }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ClientError> {
        serde_json::from_slice(bytes)
            .map(Self::new)
            .map_err(|e| ClientError::Setup(format!("mock fixture: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let bytes = std::fs::read(path).map_err(|e| ClientError::Setup(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl DecisionClient for MockClient {
    fn query(&self, request: &DisambiguationRequest) -> Result<String, ClientError> {
        self.responses
            .get(&request.instance_id.to_string())
            .or_else(|| self.responses.get(&prompt_hash(&request.prompt)))
            .cloned()
            .ok_or(ClientError::NoResponse(request.instance_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub endpoint: String,
    /// Environment variable holding a bearer token, if the service needs one.
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub timeout_s: f64,
}

/// Posts `{prompt, images, model}` as JSON and reads `{text}` back.
pub struct HttpClient {
    cfg: HttpClientConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    prompt: &'a str,
    images: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct HttpResponseBody {
    text: String,
}

impl HttpClient {
    pub fn new(cfg: HttpClientConfig) -> Result<Self, ClientError> {
        if cfg.endpoint.is_empty() {
            return Err(ClientError::Setup("no endpoint configured".into()));
        }
        if !(cfg.timeout_s > 0.0) {
            return Err(ClientError::Setup(format!("timeout_s must be positive, got {}", cfg.timeout_s)));
        }
        let token = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ClientError::Setup(format!("{var} is not set")))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .build()
            .into();
        Ok(Self { cfg, token, agent })
    }
}

impl DecisionClient for HttpClient {
    fn query(&self, request: &DisambiguationRequest) -> Result<String, ClientError> {
        let mut images = Vec::new();
        for path in request.views.iter().filter_map(|v| v.image.as_ref()) {
            let bytes =
                std::fs::read(path).map_err(|e| ClientError::Transport(format!("{}: {e}", path.display())))?;
            images.push(base64::engine::general_purpose::STANDARD.encode(bytes));
        }
        let body = HttpRequestBody {
            prompt: &request.prompt,
            images,
            model: self.cfg.model.as_deref(),
        };
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let transport = |e: ureq::Error| ClientError::Transport(e.to_string());
        let mut response = req.send_json(&body).map_err(transport)?;
        let parsed: HttpResponseBody = response.body_mut().read_json().map_err(transport)?;
        Ok(parsed.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub instance_id: InstanceId,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationReport {
    pub decisions: Vec<DisambiguationDecision>,
    /// Requests that could not be built, e.g. instances with no evidence.
    pub skipped: Vec<Failure>,
    pub parse_failures: Vec<Failure>,
    pub client_failures: Vec<Failure>,
}

/// Queries `client` for every flagged instance and applies the parsed
/// decisions. Only `final_category` and the flag change; evidence is left
/// alone. Requests run concurrently; failures are recorded per instance.
pub fn disambiguate_all(
    map: &mut MapState,
    client: &dyn DecisionClient,
    cfg: &DisambiguationConfig,
    view_root: Option<&Path>,
) -> DisambiguationReport {
    let mut report = DisambiguationReport::default();
    let flagged: Vec<InstanceId> = map
        .instances()
        .filter(|r| r.needs_disambiguation && !r.id.is_unknown())
        .map(|r| r.id)
        .collect();
    let mut requests = Vec::new();
    for id in flagged {
        match build_request(map, id, cfg, view_root) {
            Ok(r) => requests.push(r),
            Err(e) => report.skipped.push(Failure {
                instance_id: id,
                message: e.to_string(),
            }),
        }
    }

    let responses: Vec<Result<String, ClientError>> = std::thread::scope(|s| {
        let handles: Vec<_> = requests.iter().map(|r| s.spawn(move || client.query(r))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(ClientError::Transport("client panicked".into()))))
            .collect()
    });

    for (request, response) in requests.iter().zip(responses) {
        let id = request.instance_id;
        let text = match response {
            Ok(t) => t,
            Err(e) => {
                report.client_failures.push(Failure {
                    instance_id: id,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match parse_decision(&text, request) {
            Ok(decision) => {
                let record = map.instance_mut(id).expect("request built from the registry");
                record.final_category = Some(decision.chosen_category);
                record.needs_disambiguation = false;
                report.decisions.push(decision);
            }
            Err(e) => report.parse_failures.push(Failure {
                instance_id: id,
                message: e.to_string(),
            }),
        }
    }
    report
}
