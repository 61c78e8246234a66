//! Client for pulling embeddings from an HTTP service.
//!
//! Request:  POST endpoint, JSON `{"ids": ["n1", …]}` (batched).
//! Response: JSON `{"vectors": {"n1": [f64; d], …}}`; ids the service does
//! not know are simply absent from the map.
//!
//! Transient failures (transport errors, 5xx) are retried with linear
//! backoff. 4xx responses are treated as permanent and abort the fetch.
//! Fetched vectors can be cached to disk in the regular store formats so
//! they are not refetched every run.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::newsrep::{load_store, save_store, EmbeddingStore, NewsEmbedding};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    64
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    100
}

#[derive(Serialize)]
struct FetchRequest<'a> {
    ids: &'a [String],
}

#[derive(Deserialize)]
struct FetchResponse {
    vectors: HashMap<String, Vec<f64>>,
}

/// Fetch embeddings for `ids`, in order; `None` marks ids the service does
/// not know. Cached entries are served without a network round trip, and
/// newly fetched ones are appended to the cache file if one is configured.
pub fn fetch_remote(cfg: &RemoteConfig, ids: &[String]) -> Result<Vec<Option<NewsEmbedding>>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("remote batch_size must be positive".into()));
    }
    let mut cache = match &cfg.cache_path {
        Some(p) if p.exists() => Some(load_store(p)?),
        Some(_) => None, // created after the first successful fetch
        None => None,
    };

    let missing: Vec<String> = ids
        .iter()
        .filter(|id| cache.as_ref().map_or(true, |c| !c.contains(id)))
        .cloned()
        .collect();

    let mut fetched: HashMap<String, Vec<f64>> = HashMap::new();
    for batch in missing.chunks(cfg.batch_size) {
        let response = post_with_retry(cfg, batch)?;
        fetched.extend(response.vectors);
    }

    if !fetched.is_empty() {
        if let Some(path) = &cfg.cache_path {
            let dim = fetched.values().next().map(|v| v.len()).unwrap_or(0);
            let cache = cache.get_or_insert_with(|| EmbeddingStore::new(dim));
            for (id, vector) in &fetched {
                cache.insert(NewsEmbedding {
                    id: id.clone(),
                    vector: vector.clone(),
                })?;
            }
            save_store(cache, path)?;
        }
    }

    Ok(ids
        .iter()
        .map(|id| {
            let vector = fetched
                .get(id)
                .map(|v| v.as_slice())
                .or_else(|| cache.as_ref().and_then(|c| c.lookup(id).ok()));
            vector.map(|v| NewsEmbedding {
                id: id.clone(),
                vector: v.to_vec(),
            })
        })
        .collect())
}

fn post_with_retry(cfg: &RemoteConfig, batch: &[String]) -> Result<FetchResponse> {
    let mut last_err = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            std::thread::sleep(std::time::Duration::from_millis(
                cfg.backoff_ms * attempt as u64,
            ));
        }
        match ureq::post(&cfg.endpoint).send_json(FetchRequest { ids: batch }) {
            Ok(mut resp) => {
                return resp.body_mut().read_json::<FetchResponse>().map_err(|e| {
                    Error::Remote(format!("{}: malformed response: {e}", cfg.endpoint))
                });
            }
            Err(ureq::Error::StatusCode(code)) if (500..600).contains(&code) => {
                last_err = format!("server returned {code}");
            }
            Err(ureq::Error::StatusCode(code)) => {
                return Err(Error::Remote(format!(
                    "{}: server returned {code}",
                    cfg.endpoint
                )));
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(Error::Remote(format!(
        "{}: giving up after {} attempts: {last_err}",
        cfg.endpoint,
        cfg.retries + 1
    )))
}
