//! HTTP endpoints.
//!
//! | method | path          | body                                   |
//! |--------|---------------|----------------------------------------|
//! | GET    | /v1/health    |                                        |
//! | POST   | /v1/classify  | multipart `image`                      |
//! | POST   | /v1/items     | multipart `image`, `label`, `metadata` |
//! | GET    | /v1/items     | query `split`, `label`, `source`       |
//! | GET    | /v1/stats     |                                        |
//! | GET    | /v1/model     |                                        |
//!
//! Classification is read-only. `POST /v1/items` is the only mutating
//! endpoint and goes through the dataset store's single writer.

use std::collections::HashMap;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use wastesort::dataset::{DatasetStore, ItemFilter, Source};
use wastesort::graph::Model;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::api::{
    classify_bytes, ClassifyError, ClassifyResponse, ErrorBody, HealthResponse, ItemResponse, ItemsResponse,
    LabelNotes, ModelInfo, StatsResponse, MAX_UPLOAD_BYTES,
};
use crate::config::{load_model_dir, ServiceConfig};

/// Shared, immutable model plus the dataset store.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    model: Model,
    store: DatasetStore,
    notes: LabelNotes,
}

impl AppState {
    pub fn new(model: Model, store: DatasetStore, notes: LabelNotes) -> Self {
        AppState {
            inner: Arc::new(Inner { model, store, notes }),
        }
    }

    pub fn model(&self) -> &Model {
        &self.inner.model
    }

    pub fn store(&self) -> &DatasetStore {
        &self.inner.store
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<ClassifyError> for ApiError {
    fn from(e: ClassifyError) -> Self {
        let status = match e {
            ClassifyError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ClassifyError::UnsupportedFormat => StatusCode::UNPROCESSABLE_ENTITY,
            ClassifyError::Undecodable(_) => StatusCode::BAD_REQUEST,
            ClassifyError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<wastesort::Error> for ApiError {
    fn from(e: wastesort::Error) -> Self {
        use wastesort::Error as E;
        let status = match &e {
            E::UnknownLabel { .. } | E::InvalidArgument(_) | E::Decode(_) => StatusCode::BAD_REQUEST,
            E::Dataset(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

struct Upload {
    image: Vec<u8>,
    fields: HashMap<String, String>,
}

/// Reads a multipart form with one `image` file part and text fields.
async fn read_upload(form: Result<Multipart, MultipartRejection>) -> Result<Upload, ApiError> {
    let mut form = form.map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("expected a multipart/form-data upload: {e}"),
        )
    })?;
    let mut image = None;
    let mut fields = HashMap::new();
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(ApiError::new(e.status(), e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        if name == "image" {
            if let Some(ct) = field.content_type() {
                let ok = matches!(ct, "image/png" | "image/jpeg" | "image/jpg" | "application/octet-stream");
                if !ok {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        format!("image part has content type {ct}; expected image/png or image/jpeg"),
                    ));
                }
            }
            let bytes = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            if bytes.len() > MAX_UPLOAD_BYTES {
                return Err(ClassifyError::TooLarge(bytes.len()).into());
            }
            image = Some(bytes.to_vec());
        } else {
            let text = field.text().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            fields.insert(name, text);
        }
    }
    let image = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field \"image\""))?;
    Ok(Upload { image, fields })
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse::for_model(state.model()))
}

async fn model_info(State(state): State<AppState>) -> Json<ModelInfo> {
    Json(ModelInfo::for_model(state.model()))
}

async fn classify(
    State(state): State<AppState>,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let upload = read_upload(form).await?;
    // inference is CPU-bound; keep it off the async workers
    let response = tokio::task::spawn_blocking(move || {
        classify_bytes(&state.inner.model, &upload.image, &state.inner.notes)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(response))
}

async fn contribute(
    State(state): State<AppState>,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<ItemResponse>, ApiError> {
    let upload = read_upload(form).await?;
    let label = upload
        .fields
        .get("label")
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field \"label\""))?;
    let metadata = upload.fields.get("metadata").cloned().unwrap_or_default();
    let item = tokio::task::spawn_blocking(move || {
        state
            .store()
            .add_item(&upload.image, &label, &metadata, Source::UserContributed)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(ItemResponse {
        id: item.id.clone(),
        item,
    }))
}

async fn list_items(
    State(state): State<AppState>,
    Query(params): Query<Vec<(String, String)>>,
) -> Result<Json<ItemsResponse>, ApiError> {
    let filter = ItemFilter::from_pairs(params.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let items = state.store().list_items(&filter);
    Ok(Json(ItemsResponse {
        count: items.len(),
        items,
    }))
}

async fn stats(State(state): State<AppState>) -> Json<StatsResponse> {
    Json(state.store().stats().into())
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .route("/v1/classify", post(classify))
        .route("/v1/items", post(contribute).get(list_items))
        .route("/v1/stats", get(stats))
        // room for multipart framing around a maximal image
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + 64 * 1024))
        .layer(cors(cors_origins))
        .with_state(state)
}

/// Loads the model and dataset named by `config` into a ready router.
pub fn build_app(config: &ServiceConfig) -> anyhow::Result<Router> {
    let model = load_model_dir(&config.model_dir, config.fold_batchnorm)?;
    if let Some(bad) = config.label_notes.keys().find(|l| !model.labels().contains(l)) {
        anyhow::bail!("label note for {bad:?}, which is not one of the model's labels");
    }
    let store = DatasetStore::open(&config.dataset_root)
        .with_context(|| format!("opening dataset at {}", config.dataset_root.display()))?;
    let state = AppState::new(model, store, config.label_notes.clone());
    Ok(router(state, &config.cors_origins))
}

/// Runs the service until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let app = build_app(&config)?;
    let listener = TcpListener::bind(&config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
