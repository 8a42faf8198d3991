//! Pluggable backends for the two foundation-model roles: a multimodal
//! chat model and a text-prompted segmenter. Each role has a live HTTP
//! implementation and a deterministic scripted one for tests and offline
//! runs.
//!
//! Scripted backends replay fixed data and are byte-for-byte reproducible;
//! the HTTP clients retry transport failures with exponential backoff and
//! surface semantic failures (malformed bodies) without retrying.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::RgbImage;
use serde::Deserialize;
use thiserror::Error;

use crate::mask::{rle_decode, RasterMask, Rle};
use crate::protocol::{Message, MessagePart, Role};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("scripted backend exhausted at turn {turn}; the script is too short")]
    ScriptExhausted { turn: usize },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A decoded image plus the stable id backends key on.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub image_id: String,
    pub rgb: RgbImage,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, rgb: RgbImage) -> Self {
        Self {
            image_id: image_id.into(),
            rgb,
        }
    }

    /// Load from disk; the id defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let rgb = image::open(path)
            .map_err(|e| ClientError::InvalidRequest(format!("cannot decode {path:?}: {e}")))?
            .to_rgb8();
        let image_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string_lossy().into_owned());
        Ok(Self { image_id, rgb })
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }
}

/// A raw segmenter proposal before ids are assigned.
#[derive(Debug, Clone)]
pub struct ScoredMask {
    pub score: f64,
    pub mask: RasterMask,
}

/// One candidate in the pool shown to the agent.
#[derive(Debug, Clone)]
pub struct CandidateMask {
    /// Small integer id, contiguous from 1, assigned in score order.
    pub candidate_id: u32,
    pub source_phrase: String,
    pub score: f64,
    pub mask: RasterMask,
}

/// Text-prompted segmenter: a phrase in, scored instance masks out.
pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, image: &ImageRef, phrase: &str) -> Result<Vec<ScoredMask>, ClientError>;
}

/// Multimodal chat model.
pub trait VlmBackend: Send + Sync {
    fn chat(&self, messages: &[Message]) -> Result<String, ClientError>;
}

impl<T: SegmenterBackend + ?Sized> SegmenterBackend for std::sync::Arc<T> {
    fn segment(&self, image: &ImageRef, phrase: &str) -> Result<Vec<ScoredMask>, ClientError> {
        (**self).segment(image, phrase)
    }
}

impl<T: VlmBackend + ?Sized> VlmBackend for std::sync::Arc<T> {
    fn chat(&self, messages: &[Message]) -> Result<String, ClientError> {
        (**self).chat(messages)
    }
}

/// Query the segmenter and normalize the reply into the candidate pool:
/// sorted by descending score, capped, ids assigned contiguously from 1.
///
/// An empty list is a valid outcome (concept not found).
pub fn segment_phrase(
    backend: &dyn SegmenterBackend,
    image: &ImageRef,
    phrase: &str,
    cap: usize,
) -> Result<Vec<CandidateMask>, ClientError> {
    if phrase.trim().is_empty() {
        return Err(ClientError::InvalidRequest(
            "segment phrase must be non-empty".into(),
        ));
    }
    let mut scored = backend.segment(image, phrase)?;
    for s in &scored {
        if !(0.0..=1.0).contains(&s.score) {
            return Err(ClientError::MalformedBackendReply(format!(
                "confidence {} outside [0,1]",
                s.score
            )));
        }
        if s.mask.dimensions() != (image.width(), image.height()) {
            return Err(ClientError::MalformedBackendReply(format!(
                "candidate mask is {}x{}, image is {}x{}",
                s.mask.width(),
                s.mask.height(),
                image.width(),
                image.height()
            )));
        }
    }
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));
    scored.truncate(cap);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| CandidateMask {
            candidate_id: i as u32 + 1,
            source_phrase: phrase.to_string(),
            score: s.score,
            mask: s.mask,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Scripted backends
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct VlmScriptFile {
    #[allow(dead_code)]
    #[serde(default)]
    version: u32,
    replies: Vec<String>,
}

/// Chat backend that replays a fixed list of replies keyed by turn index.
pub struct ScriptedVlm {
    replies: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedVlm {
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies,
            cursor: Mutex::new(0),
        }
    }

    /// Load `{"version":1,"replies":[...]}` from disk.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let script: VlmScriptFile = serde_json::from_str(&text)
            .map_err(|e| ClientError::MalformedManifest(format!("vlm script: {e}")))?;
        Ok(Self::new(script.replies))
    }

    pub fn replies(&self) -> &[String] {
        &self.replies
    }

    /// A fresh replay of the same script, cursor back at turn 0.
    pub fn fresh(&self) -> Self {
        Self::new(self.replies.clone())
    }
}

impl VlmBackend for ScriptedVlm {
    fn chat(&self, _messages: &[Message]) -> Result<String, ClientError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let turn = *cursor;
        match self.replies.get(turn) {
            Some(reply) => {
                *cursor += 1;
                Ok(reply.clone())
            }
            None => Err(ClientError::ScriptExhausted { turn }),
        }
    }
}

#[derive(Deserialize)]
struct FixtureEntry {
    score: f64,
    rle: Rle,
}

#[derive(Deserialize)]
struct FixtureFile {
    #[allow(dead_code)]
    #[serde(default)]
    version: u32,
    images: HashMap<String, HashMap<String, Vec<FixtureEntry>>>,
}

/// Deterministic stand-in for a hosted segmenter: serves `(image_id,
/// phrase)` lookups from a validated manifest; unknown keys yield an empty
/// candidate list.
#[derive(Debug)]
pub struct FixtureSegmenter {
    table: HashMap<String, HashMap<String, Vec<ScoredMask>>>,
}

impl SegmenterBackend for FixtureSegmenter {
    fn segment(&self, image: &ImageRef, phrase: &str) -> Result<Vec<ScoredMask>, ClientError> {
        Ok(self
            .table
            .get(&image.image_id)
            .and_then(|phrases| phrases.get(phrase))
            .cloned()
            .unwrap_or_default())
    }
}

/// Load and validate a fixture manifest mapping image id -> phrase ->
/// scored RLE masks. All masks under one image must share dimensions.
pub fn load_fixture_oracle(path: &Path) -> Result<FixtureSegmenter, ClientError> {
    let text = std::fs::read_to_string(path).map_err(|e| ClientError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: FixtureFile = serde_json::from_str(&text)
        .map_err(|e| ClientError::MalformedManifest(e.to_string()))?;
    let mut table = HashMap::new();
    for (image_id, phrases) in file.images {
        let mut dims: Option<(u32, u32)> = None;
        let mut decoded_phrases = HashMap::new();
        for (phrase, entries) in phrases {
            let mut masks = Vec::with_capacity(entries.len());
            for (i, entry) in entries.into_iter().enumerate() {
                if !(0.0..=1.0).contains(&entry.score) {
                    return Err(ClientError::MalformedManifest(format!(
                        "image '{image_id}' phrase '{phrase}' mask {i}: score {} outside [0,1]",
                        entry.score
                    )));
                }
                let (w, h) = (entry.rle.width(), entry.rle.height());
                match dims {
                    None => dims = Some((w, h)),
                    Some(expected) if expected != (w, h) => {
                        return Err(ClientError::MalformedManifest(format!(
                            "image '{image_id}' phrase '{phrase}' mask {i}: \
                             size {w}x{h} differs from {}x{}",
                            expected.0, expected.1
                        )));
                    }
                    Some(_) => {}
                }
                let mask = rle_decode(&entry.rle, w, h).map_err(|e| {
                    ClientError::MalformedManifest(format!(
                        "image '{image_id}' phrase '{phrase}' mask {i}: {e}"
                    ))
                })?;
                masks.push(ScoredMask {
                    score: entry.score,
                    mask,
                });
            }
            decoded_phrases.insert(phrase, masks);
        }
        table.insert(image_id, decoded_phrases);
    }
    Ok(FixtureSegmenter { table })
}

// ---------------------------------------------------------------------------
// HTTP backends
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum TransportError {
    /// Connection, timeout, or 5xx: worth retrying.
    #[error("transport failure: {0}")]
    Unavailable(String),
    /// 4xx or a body that is not JSON: retrying will not help.
    #[error("protocol failure: {0}")]
    Protocol(String),
}

/// Minimal JSON-over-POST transport, injectable so retry behavior is
/// testable without a network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer_token: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError>;
}

/// Production transport over a blocking HTTP client.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("client construction cannot fail with static config");
        Self { client }
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer_token: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(TransportError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(TransportError::Protocol(format!("status {status}: {body}")));
        }
        resp.json()
            .map_err(|e| TransportError::Protocol(format!("non-JSON body: {e}")))
    }
}

/// Retry policy for the HTTP clients. `retries` counts extra attempts
/// after the first, so a call makes exactly `retries + 1` attempts before
/// giving up.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff: Duration::from_millis(250),
        }
    }
}

fn post_with_retries(
    transport: &dyn HttpTransport,
    policy: &RetryPolicy,
    url: &str,
    token: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ClientError> {
    let attempts = policy.retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        match transport.post_json(url, token, body) {
            Ok(value) => return Ok(value),
            Err(TransportError::Protocol(detail)) => {
                return Err(ClientError::MalformedBackendReply(detail));
            }
            Err(TransportError::Unavailable(detail)) => {
                last = detail;
                if attempt + 1 < attempts && !policy.backoff.is_zero() {
                    std::thread::sleep(policy.backoff * 2u32.pow(attempt));
                }
            }
        }
    }
    Err(ClientError::BackendUnavailable {
        attempts,
        detail: last,
    })
}

fn png_data_uri(rgb: &RgbImage) -> String {
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(rgb.clone())
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .expect("in-memory PNG encoding cannot fail");
    format!("data:image/png;base64,{}", BASE64.encode(bytes))
}

fn bytes_data_uri(png: &[u8]) -> String {
    format!("data:image/png;base64,{}", BASE64.encode(png))
}

/// One-route JSON segmenter service client.
///
/// `POST {endpoint}/segment` with `{"image": <data-URI>, "phrase": text}`;
/// the reply is `{"candidates":[{"score":f,"rle":{...}}, ...]}`. Unknown
/// reply fields (e.g. boxes) are ignored.
pub struct HttpSegmenter<T: HttpTransport = ReqwestTransport> {
    endpoint: String,
    policy: RetryPolicy,
    transport: T,
}

impl HttpSegmenter<ReqwestTransport> {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self::with_transport(endpoint, RetryPolicy::default(), ReqwestTransport::new(timeout))
    }
}

impl<T: HttpTransport> HttpSegmenter<T> {
    pub fn with_transport(endpoint: impl Into<String>, policy: RetryPolicy, transport: T) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            policy,
            transport,
        }
    }
}

#[derive(Deserialize)]
struct SegmentReply {
    candidates: Vec<FixtureEntry>,
}

impl<T: HttpTransport> SegmenterBackend for HttpSegmenter<T> {
    fn segment(&self, image: &ImageRef, phrase: &str) -> Result<Vec<ScoredMask>, ClientError> {
        let body = serde_json::json!({
            "image": png_data_uri(&image.rgb),
            "phrase": phrase,
        });
        let url = format!("{}/segment", self.endpoint);
        let reply = post_with_retries(&self.transport, &self.policy, &url, None, &body)?;
        let parsed: SegmentReply = serde_json::from_value(reply)
            .map_err(|e| ClientError::MalformedBackendReply(e.to_string()))?;
        let mut out = Vec::with_capacity(parsed.candidates.len());
        for entry in parsed.candidates {
            let mask = rle_decode(&entry.rle, entry.rle.width(), entry.rle.height())
                .map_err(|e| ClientError::MalformedBackendReply(e.to_string()))?;
            out.push(ScoredMask {
                score: entry.score,
                mask,
            });
        }
        Ok(out)
    }
}

/// Chat-completions-compatible client with images sent as data-URI content
/// parts.
pub struct HttpVlm<T: HttpTransport = ReqwestTransport> {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    transport: T,
}

impl HttpVlm<ReqwestTransport> {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        Self::with_transport(
            endpoint,
            model,
            api_key,
            RetryPolicy::default(),
            ReqwestTransport::new(timeout),
        )
    }
}

impl<T: HttpTransport> HttpVlm<T> {
    pub fn with_transport(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        policy: RetryPolicy,
        transport: T,
    ) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            policy,
            transport,
        }
    }

    fn encode_messages(messages: &[Message]) -> serde_json::Value {
        let encoded: Vec<serde_json::Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                let content: Vec<serde_json::Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        MessagePart::Text(t) => serde_json::json!({"type": "text", "text": t}),
                        MessagePart::ImagePng(png) => serde_json::json!({
                            "type": "image_url",
                            "image_url": {"url": bytes_data_uri(png)},
                        }),
                    })
                    .collect();
                serde_json::json!({"role": role, "content": content})
            })
            .collect();
        serde_json::Value::Array(encoded)
    }
}

impl<T: HttpTransport> VlmBackend for HttpVlm<T> {
    fn chat(&self, messages: &[Message]) -> Result<String, ClientError> {
        if messages.is_empty() {
            return Err(ClientError::InvalidRequest("no messages".into()));
        }
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": Self::encode_messages(messages),
        });
        let url = format!("{}/chat/completions", self.endpoint);
        let reply = post_with_retries(
            &self.transport,
            &self.policy,
            &url,
            self.api_key.as_deref(),
            &body,
        )?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(ToOwned::to_owned)
            .ok_or_else(|| {
                ClientError::MalformedBackendReply(
                    "missing choices[0].message.content".to_string(),
                )
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rle_encode;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tiny_image(id: &str, w: u32, h: u32) -> ImageRef {
        ImageRef::new(id, RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])))
    }

    fn rows_mask(width: u32, height: u32, rows: &[u32]) -> RasterMask {
        RasterMask::from_fn(width, height, |r, _| rows.contains(&r)).unwrap()
    }

    fn fixture_json() -> String {
        let head = rle_encode(&rows_mask(4, 4, &[0, 1, 2]));
        let ears = rle_encode(&rows_mask(4, 4, &[0]));
        serde_json::json!({
            "version": 1,
            "images": {
                "img1": {
                    "cat head": [{"score": 0.9, "rle": head}],
                    "cat ears": [{"score": 0.8, "rle": ears}],
                    "cat": [{"score": 0.7, "rle": rle_encode(&rows_mask(4, 4, &[0, 1, 2, 3]))}],
                }
            }
        })
        .to_string()
    }

    #[test]
    fn fixture_serves_known_phrases_and_misses_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        std::fs::write(&path, fixture_json()).unwrap();
        let backend = load_fixture_oracle(&path).unwrap();
        let img = tiny_image("img1", 4, 4);
        let hits = segment_phrase(&backend, &img, "cat head", 8).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].candidate_id, 1);
        assert_eq!(hits[0].mask, rows_mask(4, 4, &[0, 1, 2]));
        assert!(segment_phrase(&backend, &img, "dog", 8).unwrap().is_empty());
        let other = tiny_image("img2", 4, 4);
        assert!(segment_phrase(&backend, &other, "cat head", 8)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn fixture_rejects_mismatched_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        let bad = serde_json::json!({
            "version": 1,
            "images": {
                "img1": {
                    "a": [{"score": 0.9, "rle": rle_encode(&rows_mask(4, 4, &[0]))}],
                    "b": [{"score": 0.9, "rle": rle_encode(&rows_mask(3, 3, &[0]))}],
                }
            }
        });
        std::fs::write(&path, bad.to_string()).unwrap();
        let err = load_fixture_oracle(&path).unwrap_err();
        assert!(matches!(err, ClientError::MalformedManifest(_)));
    }

    #[test]
    fn fixture_rejects_bad_rle_sum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        let bad = r#"{"version":1,"images":{"img1":{"a":[{"score":0.5,"rle":{"size":[4,4],"counts":[3]}}]}}}"#;
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(
            load_fixture_oracle(&path).unwrap_err(),
            ClientError::MalformedManifest(_)
        ));
    }

    #[test]
    fn empty_manifest_misses_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        std::fs::write(&path, r#"{"version":1,"images":{}}"#).unwrap();
        let backend = load_fixture_oracle(&path).unwrap();
        let img = tiny_image("whatever", 4, 4);
        assert!(backend.segment(&img, "anything").unwrap().is_empty());
    }

    #[test]
    fn candidate_ids_are_contiguous_and_score_ordered() {
        struct ManyMasks;
        impl SegmenterBackend for ManyMasks {
            fn segment(
                &self,
                _image: &ImageRef,
                _phrase: &str,
            ) -> Result<Vec<ScoredMask>, ClientError> {
                Ok((0..12)
                    .map(|i| ScoredMask {
                        score: (i as f64) / 20.0,
                        mask: RasterMask::empty(4, 4).unwrap(),
                    })
                    .collect())
            }
        }
        let img = tiny_image("x", 4, 4);
        let out = segment_phrase(&ManyMasks, &img, "blob", 8).unwrap();
        assert_eq!(out.len(), 8);
        let ids: Vec<u32> = out.iter().map(|c| c.candidate_id).collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn segment_phrase_rejects_wrong_dims_and_empty_phrase() {
        struct WrongDims;
        impl SegmenterBackend for WrongDims {
            fn segment(
                &self,
                _image: &ImageRef,
                _phrase: &str,
            ) -> Result<Vec<ScoredMask>, ClientError> {
                Ok(vec![ScoredMask {
                    score: 0.5,
                    mask: RasterMask::empty(2, 2).unwrap(),
                }])
            }
        }
        let img = tiny_image("x", 4, 4);
        assert!(matches!(
            segment_phrase(&WrongDims, &img, "blob", 8).unwrap_err(),
            ClientError::MalformedBackendReply(_)
        ));
        assert!(matches!(
            segment_phrase(&WrongDims, &img, "  ", 8).unwrap_err(),
            ClientError::InvalidRequest(_)
        ));
    }

    #[test]
    fn scripted_vlm_replays_then_exhausts() {
        let vlm = ScriptedVlm::new(vec!["a".into(), "b".into(), "c".into()]);
        let msg = [Message::text(Role::User, "hi")];
        assert_eq!(vlm.chat(&msg).unwrap(), "a");
        assert_eq!(vlm.chat(&msg).unwrap(), "b");
        assert_eq!(vlm.chat(&msg).unwrap(), "c");
        assert!(matches!(
            vlm.chat(&msg).unwrap_err(),
            ClientError::ScriptExhausted { turn: 3 }
        ));
        // a fresh replay starts over
        let again = vlm.fresh();
        assert_eq!(again.chat(&msg).unwrap(), "a");
    }

    struct FailingTransport {
        calls: AtomicU32,
    }

    impl HttpTransport for FailingTransport {
        fn post_json(
            &self,
            _url: &str,
            _token: Option<&str>,
            _body: &serde_json::Value,
        ) -> Result<serde_json::Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(TransportError::Unavailable("connection refused".into()))
        }
    }

    #[test]
    fn retries_make_exactly_r_plus_one_attempts() {
        let transport = FailingTransport {
            calls: AtomicU32::new(0),
        };
        let policy = RetryPolicy {
            retries: 2,
            backoff: Duration::ZERO,
        };
        let seg = HttpSegmenter::with_transport("http://unit.test", policy, transport);
        let img = tiny_image("x", 4, 4);
        let err = seg.segment(&img, "blob").unwrap_err();
        assert!(matches!(
            err,
            ClientError::BackendUnavailable { attempts: 3, .. }
        ));
        assert_eq!(seg.transport.calls.load(Ordering::SeqCst), 3);
    }

    struct CapturingTransport {
        reply: serde_json::Value,
        last_body: Mutex<Option<(String, serde_json::Value)>>,
    }

    impl HttpTransport for CapturingTransport {
        fn post_json(
            &self,
            url: &str,
            _token: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<serde_json::Value, TransportError> {
            *self.last_body.lock().unwrap() = Some((url.to_string(), body.clone()));
            Ok(self.reply.clone())
        }
    }

    #[test]
    fn segmenter_request_and_reply_shapes() {
        let rle = rle_encode(&rows_mask(4, 4, &[1]));
        let transport = CapturingTransport {
            reply: serde_json::json!({"candidates": [
                {"score": 0.75, "rle": rle, "box": [0, 0, 4, 4]}
            ]}),
            last_body: Mutex::new(None),
        };
        let seg = HttpSegmenter::with_transport(
            "http://unit.test/",
            RetryPolicy {
                retries: 0,
                backoff: Duration::ZERO,
            },
            transport,
        );
        let img = tiny_image("x", 4, 4);
        let out = seg.segment(&img, "stripe").unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask, rows_mask(4, 4, &[1]));
        let (url, body) = seg.transport.last_body.lock().unwrap().clone().unwrap();
        assert_eq!(url, "http://unit.test/segment");
        assert_eq!(body["phrase"], "stripe");
        assert!(body["image"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
    }

    #[test]
    fn vlm_request_shape_and_content_extraction() {
        let transport = CapturingTransport {
            reply: serde_json::json!({"choices": [
                {"message": {"role": "assistant", "content": "hello there"}}
            ]}),
            last_body: Mutex::new(None),
        };
        let vlm = HttpVlm::with_transport(
            "http://unit.test/v1",
            "test-model",
            None,
            RetryPolicy {
                retries: 0,
                backoff: Duration::ZERO,
            },
            transport,
        );
        let messages = vec![Message {
            role: Role::User,
            parts: vec![
                MessagePart::Text("look".into()),
                MessagePart::ImagePng(vec![1, 2, 3]),
            ],
        }];
        assert_eq!(vlm.chat(&messages).unwrap(), "hello there");
        let (url, body) = vlm.transport.last_body.lock().unwrap().clone().unwrap();
        assert_eq!(url, "http://unit.test/v1/chat/completions");
        assert_eq!(body["model"], "test-model");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert!(content[1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
    }

    #[test]
    fn malformed_reply_is_not_retried() {
        struct ProtocolFail {
            calls: AtomicU32,
        }
        impl HttpTransport for ProtocolFail {
            fn post_json(
                &self,
                _url: &str,
                _token: Option<&str>,
                _body: &serde_json::Value,
            ) -> Result<serde_json::Value, TransportError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Err(TransportError::Protocol("status 400".into()))
            }
        }
        let seg = HttpSegmenter::with_transport(
            "http://unit.test",
            RetryPolicy {
                retries: 3,
                backoff: Duration::ZERO,
            },
            ProtocolFail {
                calls: AtomicU32::new(0),
            },
        );
        let img = tiny_image("x", 4, 4);
        assert!(matches!(
            seg.segment(&img, "blob").unwrap_err(),
            ClientError::MalformedBackendReply(_)
        ));
        assert_eq!(seg.transport.calls.load(Ordering::SeqCst), 1);
    }
}
