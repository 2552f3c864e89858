//! Multi-control generation requests, the HTTP backend client and an offline
//! mock backend.

use std::io::Cursor;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine as _;
use image::{GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::geometry::{ClassTriple, RelationClass};
use crate::prompt::PromptBundle;
use crate::render::PriorSet;

pub const DIFFUSION_API_KEY_ENV: &str = "ULTIMA_DIFFUSION_API_KEY";
pub const MAX_CONTROL_WEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("prior set is missing its {0} channel")]
    MissingChannel(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend error (HTTP {status}): {body}")]
    Backend { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    Depth,
    Canny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub kind: ControlKind,
    pub image: GrayImage,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub positive: String,
    pub negative: String,
    pub controls: Vec<ControlInput>,
    pub steps: u32,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub image: RgbImage,
    pub backend_id: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Denoising steps T.
    pub steps: u32,
    pub depth_weight: f64,
    pub canny_weight: f64,
    pub use_depth: bool,
    pub use_canny: bool,
    /// Fixed seed; derived from the sample identity when absent.
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            depth_weight: 0.5,
            canny_weight: 0.8,
            use_depth: true,
            use_canny: true,
            seed: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.steps == 0 {
            return Err(DiffusionError::InvalidRequest("steps must be at least 1".into()));
        }
        for (name, w) in [("depth", self.depth_weight), ("canny", self.canny_weight)] {
            check_weight(w).map_err(|e| DiffusionError::InvalidRequest(format!("{name} weight: {e}")))?;
        }
        Ok(())
    }
}

fn check_weight(w: f64) -> Result<(), String> {
    if !(w.is_finite() && (0.0..=MAX_CONTROL_WEIGHT).contains(&w)) {
        return Err(format!("{w} outside [0, {MAX_CONTROL_WEIGHT}]"));
    }
    Ok(())
}

/// Stable seed for a sample: the first 8 bytes (big-endian) of
/// SHA-256 over the NUL-joined identity fields.
pub fn derive_seed(asset_id: &str, classes: &ClassTriple, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(asset_id.as_bytes());
    for part in [
        classes.orientation.display_name(),
        classes.viewpoint.display_name(),
        classes.shot.display_name(),
    ] {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    h.update([0u8]);
    h.update(attempt.to_string().as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn build_request(
    prior: &PriorSet,
    prompt: &PromptBundle,
    config: &GenerationConfig,
    seed: u64,
) -> Result<GenerationRequest, DiffusionError> {
    config.validate()?;
    let mut controls = Vec::new();
    if config.use_depth {
        let image = prior
            .depth_control
            .clone()
            .ok_or(DiffusionError::MissingChannel("depth_control"))?;
        controls.push(ControlInput {
            kind: ControlKind::Depth,
            image,
            weight: config.depth_weight,
        });
    }
    if config.use_canny {
        let image = prior.canny_image().ok_or(DiffusionError::MissingChannel("canny"))?;
        controls.push(ControlInput {
            kind: ControlKind::Canny,
            image,
            weight: config.canny_weight,
        });
    }
    let request = GenerationRequest {
        positive: prompt.positive.clone(),
        negative: prompt.negative.clone(),
        controls,
        steps: config.steps,
        seed: config.seed.unwrap_or(seed),
        width: prior.width,
        height: prior.height,
    };
    request.validate()?;
    Ok(request)
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.steps == 0 {
            return Err(DiffusionError::InvalidRequest("steps must be at least 1".into()));
        }
        if self.positive.trim().is_empty() {
            return Err(DiffusionError::InvalidRequest("empty prompt".into()));
        }
        for c in &self.controls {
            check_weight(c.weight).map_err(DiffusionError::InvalidRequest)?;
            if c.image.dimensions() != (self.width, self.height) {
                return Err(DiffusionError::InvalidRequest(format!(
                    "{:?} control is {:?}, request is {}x{}",
                    c.kind,
                    c.image.dimensions(),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }

    pub fn to_wire(&self) -> Result<WireRequest, DiffusionError> {
        let control_units = self
            .controls
            .iter()
            .map(|c| {
                Ok(WireControl {
                    kind: c.kind,
                    weight: c.weight,
                    image_b64_png: encode_png_b64(&c.image)?,
                })
            })
            .collect::<Result<_, DiffusionError>>()?;
        Ok(WireRequest {
            prompt: self.positive.clone(),
            negative_prompt: self.negative.clone(),
            steps: self.steps,
            seed: self.seed,
            width: self.width,
            height: self.height,
            control_units,
        })
    }

    pub fn from_wire(wire: &WireRequest) -> Result<Self, DiffusionError> {
        let controls = wire
            .control_units
            .iter()
            .map(|c| {
                let image = decode_png_b64(&c.image_b64_png)?.to_luma8();
                Ok(ControlInput {
                    kind: c.kind,
                    image,
                    weight: c.weight,
                })
            })
            .collect::<Result<_, DiffusionError>>()?;
        let request = Self {
            positive: wire.prompt.clone(),
            negative: wire.negative_prompt.clone(),
            controls,
            steps: wire.steps,
            seed: wire.seed,
            width: wire.width,
            height: wire.height,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn to_json(&self) -> Result<String, DiffusionError> {
        serde_json::to_string(&self.to_wire()?).map_err(|e| DiffusionError::Protocol(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, DiffusionError> {
        let wire: WireRequest = serde_json::from_str(text).map_err(|e| DiffusionError::Protocol(e.to_string()))?;
        Self::from_wire(&wire)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireControl {
    pub kind: ControlKind,
    pub weight: f64,
    pub image_b64_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub steps: u32,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub control_units: Vec<WireControl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub image_b64_png: String,
    pub backend_id: String,
}

fn encode_png_b64<P, C>(img: &image::ImageBuffer<P, C>) -> Result<String, DiffusionError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| DiffusionError::Protocol(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn decode_png_b64(text: &str) -> Result<image::DynamicImage, DiffusionError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| DiffusionError::Protocol(format!("bad base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| DiffusionError::Protocol(format!("bad png: {e}")))
}

#[async_trait]
pub trait DiffusionBackend: Send + Sync {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, DiffusionError>;
}

/// Deterministic stand-in for a generation server. The background is seeded
/// noise tinted by the prompt and the depth control is copied into the green
/// channel. Canny edges are white off the object; on the object only red and
/// blue are saturated so the depth bytes in green survive.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

pub fn mock_generate(request: &GenerationRequest) -> GenerationResult {
    let digest = Sha256::digest(request.positive.as_bytes());
    let tint = [digest[0], digest[1], digest[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut image = RgbImage::from_fn(request.width, request.height, |_, _| {
        let n: u8 = rng.random();
        image::Rgb(tint.map(|t| ((n as u16 + t as u16) / 2) as u8))
    });
    let control = |kind| request.controls.iter().find(|c| c.kind == kind);
    if let Some(depth) = control(ControlKind::Depth) {
        for (px, d) in image.pixels_mut().zip(depth.image.pixels()) {
            if d[0] > 0 {
                px[1] = d[0];
            }
        }
    }
    if let Some(canny) = control(ControlKind::Canny) {
        let depth = control(ControlKind::Depth);
        for (i, (px, e)) in image.pixels_mut().zip(canny.image.pixels()).enumerate() {
            if e[0] > 0 {
                px[0] = 255;
                px[2] = 255;
                let on_object = depth.is_some_and(|d| d.image.as_raw()[i] > 0);
                if !on_object {
                    px[1] = 255;
                }
            }
        }
    }
    GenerationResult {
        image,
        backend_id: "mock".into(),
        elapsed_ms: 0,
    }
}

#[async_trait]
impl<T: DiffusionBackend + ?Sized> DiffusionBackend for std::sync::Arc<T> {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, DiffusionError> {
        (**self).generate(request).await
    }
}

#[async_trait]
impl DiffusionBackend for MockBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, DiffusionError> {
        request.validate()?;
        Ok(mock_generate(request))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub api_key_env: String,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:7860/generate".into(),
            timeout_secs: 300,
            max_retries: 3,
            api_key_env: DIFFUSION_API_KEY_ENV.into(),
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    http: reqwest::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, DiffusionError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| DiffusionError::Protocol(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, api_key, http })
    }
}

enum Attempt {
    Retry(String),
    Fatal(DiffusionError),
}

impl HttpBackend {
    async fn attempt(&self, body: &str) -> Result<String, Attempt> {
        let mut req = self
            .http
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_owned());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(DiffusionError::Backend {
                status: status.as_u16(),
                body: text,
            }));
        }
        Ok(text)
    }
}

/// Decode a backend reply and check it against the request dimensions.
pub fn parse_response(body: &str, request: &GenerationRequest) -> Result<(RgbImage, String), DiffusionError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| DiffusionError::Protocol(format!("{e}: {body}")))?;
    let image = decode_png_b64(&wire.image_b64_png)?.to_rgb8();
    if image.dimensions() != (request.width, request.height) {
        return Err(DiffusionError::Protocol(format!(
            "backend returned {:?}, requested {}x{}",
            image.dimensions(),
            request.width,
            request.height
        )));
    }
    Ok((image, wire.backend_id))
}

#[async_trait]
impl DiffusionBackend for HttpBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, DiffusionError> {
        let body = request.to_json()?;
        let start = Instant::now();
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            match self.attempt(&body).await {
                Ok(text) => break text,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(DiffusionError::Transport { attempts, message });
                    }
                    warn!(attempts, %message, "generation request failed, retrying");
                    tokio::time::sleep(Duration::from_millis(250 << attempts.min(6))).await;
                }
            }
        };
        let (image, backend_id) = parse_response(&text, request)?;
        Ok(GenerationResult {
            image,
            backend_id,
            elapsed_ms: start.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraObjectRelation;
    use crate::render::encode_depth_control;

    fn prior(size: u32) -> PriorSet {
        let mut p = PriorSet::empty(size, size);
        for y in 2..size - 2 {
            for x in 2..size - 2 {
                let i = p.index(x, y);
                p.depth[i] = 1.0 + (x + y) as f64 / 10.0;
                p.mask[i] = true;
            }
        }
        let mut p = encode_depth_control(p);
        p.canny = Some((0..size * size).map(|i| i % size == 2).collect());
        p
    }

    fn bundle() -> PromptBundle {
        PromptBundle {
            positive: "the image shows a front, horizontal, close-up view of a mug. A mug. detailed".into(),
            negative: "lowres".into(),
            relation_clause: "the image shows a front, horizontal, close-up view of a mug".into(),
        }
    }

    #[test]
    fn default_request_uses_reference_settings() {
        let req = build_request(&prior(16), &bundle(), &GenerationConfig::default(), 7).unwrap();
        assert_eq!(req.steps, 30);
        let weights: Vec<(ControlKind, f64)> = req.controls.iter().map(|c| (c.kind, c.weight)).collect();
        assert_eq!(weights, vec![(ControlKind::Depth, 0.5), (ControlKind::Canny, 0.8)]);
        assert_eq!((req.width, req.height), (16, 16));
        assert_eq!(req.seed, 7);
    }

    #[test]
    fn text_only_mode() {
        let cfg = GenerationConfig {
            use_depth: false,
            use_canny: false,
            ..GenerationConfig::default()
        };
        let req = build_request(&PriorSet::empty(16, 16), &bundle(), &cfg, 1).unwrap();
        assert!(req.controls.is_empty());
    }

    #[test]
    fn missing_channel_is_an_error() {
        let err = build_request(&PriorSet::empty(16, 16), &bundle(), &GenerationConfig::default(), 1);
        assert!(matches!(err, Err(DiffusionError::MissingChannel("depth_control"))));
    }

    #[test]
    fn weights_are_capped() {
        let cfg = GenerationConfig {
            canny_weight: 2.5,
            ..GenerationConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(GenerationConfig {
            steps: 0,
            ..GenerationConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn seed_depends_on_identity() {
        let a = CameraObjectRelation::from_degrees(180.0, 0.0, 1.0).unwrap().classes();
        let b = CameraObjectRelation::from_degrees(0.0, 0.0, 1.0).unwrap().classes();
        assert_eq!(derive_seed("mug", &a, 0), derive_seed("mug", &a, 0));
        assert_ne!(derive_seed("mug", &a, 0), derive_seed("mug", &a, 1));
        assert_ne!(derive_seed("mug", &a, 0), derive_seed("mug", &b, 0));
        assert_ne!(derive_seed("mug", &a, 0), derive_seed("cup", &a, 0));
    }

    #[test]
    fn wire_round_trip_is_byte_identical() {
        let req = build_request(&prior(24), &bundle(), &GenerationConfig::default(), 99).unwrap();
        let json = req.to_json().unwrap();
        let back = GenerationRequest::from_json(&json).unwrap();
        assert_eq!(back, req);
        assert_eq!(back.to_json().unwrap(), json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec![
                "control_units",
                "height",
                "negative_prompt",
                "prompt",
                "seed",
                "steps",
                "width"
            ]
        );
        assert!(json.starts_with(r#"{"prompt":"#));
        assert_eq!(v["control_units"][0]["kind"], "depth");
    }

    #[test]
    fn mock_output_carries_priors() {
        let p = prior(32);
        let req = build_request(&p, &bundle(), &GenerationConfig::default(), 5).unwrap();
        let out = mock_generate(&req);
        assert_eq!(out.image.dimensions(), (32, 32));
        assert_eq!(out.backend_id, "mock");
        let depth = p.depth_control.as_ref().unwrap();
        let canny = p.canny.as_ref().unwrap();
        for (i, (px, d)) in out.image.pixels().zip(depth.pixels()).enumerate() {
            if p.mask[i] {
                assert_eq!(px[1], d[0]);
            }
            if canny[i] {
                assert_eq!((px[0], px[2]), (255, 255));
            }
        }
        assert_eq!(mock_generate(&req), out);
    }

    #[test]
    fn mock_seeds_change_background_only() {
        let p = prior(32);
        let a = mock_generate(&build_request(&p, &bundle(), &GenerationConfig::default(), 1).unwrap());
        let b = mock_generate(&build_request(&p, &bundle(), &GenerationConfig::default(), 2).unwrap());
        assert_ne!(a.image, b.image);
        for (i, (pa, pb)) in a.image.pixels().zip(b.image.pixels()).enumerate() {
            if p.mask[i] {
                assert_eq!(pa[1], pb[1]);
            }
        }
        let bare = GenerationRequest {
            controls: Vec::new(),
            ..build_request(&p, &bundle(), &GenerationConfig::default(), 1).unwrap()
        };
        let noise = mock_generate(&bare);
        let canny = p.canny.as_ref().unwrap();
        for (i, (n, c)) in noise.image.pixels().zip(a.image.pixels()).enumerate() {
            if !p.mask[i] && !canny[i] {
                assert_eq!(n, c);
            }
            if canny[i] && !p.mask[i] {
                assert_eq!(c.0, [255, 255, 255]);
            }
        }
    }

    #[test]
    fn response_dimension_mismatch_is_protocol_error() {
        let req = build_request(&prior(16), &bundle(), &GenerationConfig::default(), 1).unwrap();
        let body = serde_json::to_string(&WireResponse {
            image_b64_png: encode_png_b64(&RgbImage::new(8, 8)).unwrap(),
            backend_id: "x".into(),
        })
        .unwrap();
        assert!(matches!(parse_response(&body, &req), Err(DiffusionError::Protocol(_))));
        let ok = serde_json::to_string(&WireResponse {
            image_b64_png: encode_png_b64(&RgbImage::new(16, 16)).unwrap(),
            backend_id: "x".into(),
        })
        .unwrap();
        assert_eq!(parse_response(&ok, &req).unwrap().1, "x");
    }

    #[tokio::test]
    async fn unreachable_endpoint_exhausts_retries() {
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: "http://127.0.0.1:9/generate".into(),
            max_retries: 2,
            timeout_secs: 2,
            ..HttpBackendConfig::default()
        })
        .unwrap();
        let req = build_request(&prior(16), &bundle(), &GenerationConfig::default(), 1).unwrap();
        match backend.generate(&req).await {
            Err(DiffusionError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }
}
