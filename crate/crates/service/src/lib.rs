//! Read-only JSON API over a trained model, its latent basis and a dataset.
//!
//! [`Api`] holds the request logic and is usable without a server;
//! [`router`] wraps it in axum routes with CORS headers.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use reglat::contour::{slice_contours, to_pgm, volume_slice, Role};
use reglat::latent::{decode_combination, load_basis, PcaBasis};
use reglat::probes::{DeformedSubject, ProbeResult, ProbeSummary, ProbeTransform};
use reglat::regnet::{load_checkpoint, RegNet};
use reglat::volgrid::{DatasetManifest, SegMap, Volume};

pub const API_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("service not initialized")]
    Unavailable,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<reglat::Error> for ApiError {
    fn from(e: reglat::Error) -> Self {
        match e {
            reglat::Error::InvalidInput(m) => Self::Unprocessable(m),
            reglat::Error::ShapeMismatch { .. } => Self::Unprocessable(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"api_version": API_VERSION, "error": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}

pub type ApiResult = std::result::Result<Value, ApiError>;

/// Model, basis and dataset; immutable once loaded.
pub struct Loaded {
    pub net: RegNet,
    pub basis: PcaBasis,
    pub manifest: DatasetManifest,
    /// Directory holding `probe_*.csv` files.
    pub probe_dir: PathBuf,
}

impl Loaded {
    pub fn new(net: RegNet, basis: PcaBasis, manifest: DatasetManifest, probe_dir: PathBuf) -> reglat::Result<Self> {
        basis.check_model(&net)?;
        Ok(Self {
            net,
            basis,
            manifest,
            probe_dir,
        })
    }

    /// Loads a checkpoint, a basis directory and a manifest file.
    pub fn from_files(checkpoint: &Path, basis_dir: &Path, manifest: &Path, probe_dir: &Path) -> reglat::Result<Self> {
        let net = load_checkpoint(checkpoint, None)?.net;
        let basis = load_basis(basis_dir)?;
        let manifest = DatasetManifest::load(manifest)?;
        Self::new(net, basis, manifest, probe_dir.to_path_buf())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub subject_id: String,
    pub coefficients: Vec<f64>,
    pub axis: usize,
    pub slice_index: usize,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct SliceQuery {
    pub axis: Option<usize>,
    pub index: Option<usize>,
}

/// Request handlers; `None` until [`Api::initialize`] is called.
#[derive(Default)]
pub struct Api {
    state: RwLock<Option<Arc<Loaded>>>,
}

impl Api {
    pub fn new(loaded: Loaded) -> Self {
        let api = Self::default();
        api.initialize(loaded);
        api
    }

    pub fn initialize(&self, loaded: Loaded) {
        *self.state.write().unwrap() = Some(Arc::new(loaded));
    }

    fn loaded(&self) -> Result<Arc<Loaded>, ApiError> {
        self.state.read().unwrap().clone().ok_or(ApiError::Unavailable)
    }

    pub fn meta(&self) -> ApiResult {
        let s = self.loaded()?;
        let b = &s.basis;
        let subjects: Vec<Value> = s
            .manifest
            .subjects
            .iter()
            .map(|e| json!({"id": e.id, "split": e.split}))
            .collect();
        Ok(json!({
            "api_version": API_VERSION,
            "K": b.k,
            "N": b.dim,
            "evr": b.evr,
            "cumulative_evr": b.cumulative_evr(),
            "singular_values": b.singular_values,
            "subjects": subjects,
            "shape": s.net.arch().in_shape,
            "center_mode": if b.center { "centered" } else { "uncentered" },
            "model_fingerprint": s.net.fingerprint(),
            "basis_fingerprint": b.model_fingerprint,
            "arch": s.net.arch(),
        }))
    }

    fn subject(&self, s: &Loaded, id: &str) -> Result<(Volume, SegMap), ApiError> {
        let e = s
            .manifest
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown subject '{id}'")))?;
        Ok(s.manifest.load_normalized(e)?)
    }

    fn check_slice(v: &Volume, axis: usize, index: usize) -> Result<(), ApiError> {
        if axis > 2 {
            return Err(ApiError::Unprocessable(format!("axis {axis} must be 0, 1 or 2")));
        }
        if index >= v.shape()[axis] {
            return Err(ApiError::Unprocessable(format!(
                "index {index} out of range for axis {axis} (length {})",
                v.shape()[axis]
            )));
        }
        Ok(())
    }

    /// Original slice image with `original` contours. Axis defaults to 0 and
    /// index to the centre slice.
    pub fn subject_slice(&self, id: &str, q: &SliceQuery) -> ApiResult {
        let s = self.loaded()?;
        let (v, seg) = self.subject(&s, id)?;
        let axis = q.axis.unwrap_or(0);
        let index = q.index.unwrap_or(v.shape().get(axis).map_or(0, |n| n / 2));
        Self::check_slice(&v, axis, index)?;
        let img = volume_slice(&v, axis, index)?;
        Ok(json!({
            "api_version": API_VERSION,
            "subject": id,
            "axis": axis,
            "index": index,
            "width": img.cols,
            "height": img.rows,
            "image": B64.encode(to_pgm(&img)),
            "contours": slice_contours(&seg, axis, index, Role::Original)?,
        }))
    }

    /// Warps a subject by the decoded linear combination `Σ a_j u_j`.
    pub fn deform(&self, req: &ComposeRequest) -> ApiResult {
        let s = self.loaded()?;
        if req.coefficients.len() != s.basis.k {
            return Err(ApiError::Unprocessable(format!(
                "expected {} coefficients, got {}",
                s.basis.k,
                req.coefficients.len()
            )));
        }
        if req.coefficients.iter().any(|a| !a.is_finite()) {
            return Err(ApiError::Unprocessable("coefficients must be finite".into()));
        }
        let (v, seg) = self.subject(&s, &req.subject_id)?;
        Self::check_slice(&v, req.axis, req.slice_index)?;
        let grid = decode_combination(&s.net, &s.basis, &req.coefficients)?;
        let d = DeformedSubject::new(&v, &seg, &grid)?;
        let sl = d.slice(req.axis, req.slice_index)?;
        Ok(json!({
            "api_version": API_VERSION,
            "subject": req.subject_id,
            "axis": req.axis,
            "index": req.slice_index,
            "image": B64.encode(&sl.pgm),
            "contours_original": sl.contours_original,
            "contours_deformed": sl.contours_deformed,
            "jacobian_stats": d.jacobian,
        }))
    }

    /// Summary of a previously computed probe CSV. Accepts the transform in
    /// either `translation:z:10` or `translation_z_10` form.
    pub fn probe(&self, transform: &str) -> ApiResult {
        let s = self.loaded()?;
        let t: ProbeTransform = transform
            .replace('_', ":")
            .parse()
            .map_err(|e: reglat::Error| ApiError::NotFound(e.to_string()))?;
        let path = s.probe_dir.join(t.csv_name());
        let text =
            fs::read_to_string(&path).map_err(|_| ApiError::NotFound(format!("probe '{t}' has not been computed")))?;
        let r = ProbeResult::from_csv(&text)?;
        let mut out = serde_json::to_value(ProbeSummary::from(&r)).map_err(|e| ApiError::Internal(e.to_string()))?;
        out["api_version"] = json!(API_VERSION);
        Ok(out)
    }
}

type Shared = Arc<Api>;

async fn blocking(f: impl FnOnce() -> ApiResult + Send + 'static) -> Response {
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::Internal(e.to_string()).into_response(),
    }
}

async fn meta(State(api): State<Shared>) -> Response {
    blocking(move || api.meta()).await
}

async fn subject_slice(
    State(api): State<Shared>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<SliceQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let Ok(Query(q)) = query else {
        return ApiError::Unprocessable("axis and index must be non-negative integers".into()).into_response();
    };
    blocking(move || api.subject_slice(&id, &q)).await
}

async fn deform(
    State(api): State<Shared>,
    body: Result<Json<ComposeRequest>, axum::extract::rejection::JsonRejection>,
) -> Response {
    match body {
        Ok(Json(req)) => blocking(move || api.deform(&req)).await,
        Err(e) => ApiError::Unprocessable(e.body_text()).into_response(),
    }
}

async fn probe(State(api): State<Shared>, UrlPath(t): UrlPath<String>) -> Response {
    blocking(move || api.probe(&t)).await
}

async fn not_found() -> Response {
    ApiError::NotFound("no such route".into()).into_response()
}

/// Adds CORS headers and answers preflight requests.
async fn cors(req: Request, next: Next) -> Response {
    let mut res = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    let h = res.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        HeaderValue::from_static("GET, POST, OPTIONS"),
    );
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("content-type"),
    );
    res
}

pub fn router(api: Arc<Api>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/subject/{id}/slice", get(subject_slice))
        .route("/api/deform", post(deform))
        .route("/api/probe/{transform}", get(probe))
        .fallback(not_found)
        .layer(middleware::from_fn(cors))
        .with_state(api)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, api: Arc<Api>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(api)).await
}
