//! News representations: embedding stores, a deterministic synthetic
//! embedder over topic mixtures, and an optional remote fetch client.
//!
//! Two on-disk formats, sniffed on load:
//!
//! - text: one `news_id \t f1,f2,...,fd` line per item;
//! - binary: magic `NREC`, u32 version = 1, u32 d, then records of
//!   (u16 id length, id bytes, d little-endian f32).
//!
//! Vectors live as f64 in memory. The binary format quantizes to f32 on
//! save (widening back is exact, so any store that came *from* a file
//! round-trips bit-for-bit).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod remote;

/// One catalog entry: a news id plus its mixture over topics
/// (non-negative, sums to 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewsItem {
    pub nid: String,
    pub topics: Vec<f64>,
}

impl NewsItem {
    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() {
            return Err(Error::InvalidInput(format!(
                "news `{}` has an empty topic mixture",
                self.nid
            )));
        }
        let mut sum = 0.0;
        for &t in &self.topics {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "news `{}` has an invalid topic weight {t}",
                    self.nid
                )));
            }
            sum += t;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "news `{}` topic mixture sums to {sum}, expected 1",
                self.nid
            )));
        }
        Ok(())
    }
}

/// Write a news catalog as JSONL (`{"nid": …, "topics": […]}` per line).
pub fn write_catalog(items: &[NewsItem], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read and validate a news catalog.
pub fn read_catalog(path: &Path) -> Result<Vec<NewsItem>> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: NewsItem = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// A news id with its embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NewsEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Id → vector map with a fixed dimension and stable (insertion) order.
///
/// The empty id is the padding convention: looking it up returns the zero
/// vector rather than an error, so padded history rows embed to zero.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore {
    dim: usize,
    order: Vec<String>,
    map: HashMap<String, Vec<f64>>,
    zero: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> EmbeddingStore {
        EmbeddingStore {
            dim,
            order: Vec::new(),
            map: HashMap::new(),
            zero: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn insert(&mut self, e: NewsEmbedding) -> Result<()> {
        if e.vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding `{}` has dimension {}, store expects {}",
                e.id,
                e.vector.len(),
                self.dim
            )));
        }
        if e.id.is_empty() {
            return Err(Error::InvalidInput(
                "the empty id is reserved for padding".into(),
            ));
        }
        if !self.map.contains_key(&e.id) {
            self.order.push(e.id.clone());
        }
        self.map.insert(e.id, e.vector);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.map.contains_key(id)
    }

    /// Vector for `id`; the empty (padding) id yields the zero vector.
    pub fn lookup(&self, id: &str) -> Result<&[f64]> {
        if id.is_empty() {
            return Ok(&self.zero);
        }
        self.map
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownNewsId(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }
}

const BIN_MAGIC: &[u8; 4] = b"NREC";
const BIN_VERSION: u32 = 1;

/// Load a store from either format (sniffed by magic bytes).
pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(BIN_MAGIC) {
        load_binary(&bytes, path)
    } else {
        load_tsv(&bytes, path)
    }
}

/// Save a store; `.tsv`/`.txt` extensions select the text format, anything
/// else the binary one.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("tsv") | Some("txt")
    );
    if text {
        save_tsv(store, path)
    } else {
        save_binary(store, path)
    }
}

fn load_tsv(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
    let mut store: Option<EmbeddingStore> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Format(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `id<TAB>f1,f2,…`"))?;
        let vector = rest
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| err("unparseable float"))?;
        let store = store.get_or_insert_with(|| EmbeddingStore::new(vector.len()));
        store.insert(NewsEmbedding {
            id: id.to_string(),
            vector,
        })?;
    }
    store.ok_or_else(|| Error::Format(format!("{} contains no embeddings", path.display())))
}

fn save_tsv(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut out = String::new();
    for id in store.ids() {
        let v = store.lookup(id)?;
        let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{id}\t{}\n", joined.join(",")));
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_binary(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let err = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let need = |pos: usize, n: usize| {
        if pos + n > bytes.len() {
            Err(err(format!("truncated at offset {pos}")))
        } else {
            Ok(&bytes[pos..pos + n])
        }
    };
    let version = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
    if version != BIN_VERSION {
        return Err(err(format!("unsupported store version {version}")));
    }
    let dim = u32::from_le_bytes(need(8, 4)?.try_into().unwrap()) as usize;
    let mut store = EmbeddingStore::new(dim);
    let mut pos = 12;
    while pos < bytes.len() {
        let id_len = u16::from_le_bytes(need(pos, 2)?.try_into().unwrap()) as usize;
        pos += 2;
        let id = std::str::from_utf8(need(pos, id_len)?)
            .map_err(|_| err(format!("non-UTF-8 id at offset {pos}")))?
            .to_string();
        pos += id_len;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let f = f32::from_le_bytes(need(pos, 4)?.try_into().unwrap());
            vector.push(f as f64);
            pos += 4;
        }
        store.insert(NewsEmbedding { id, vector })?;
    }
    Ok(store)
}

fn save_binary(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BIN_MAGIC);
    buf.extend_from_slice(&BIN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    for id in store.ids() {
        let idb = id.as_bytes();
        if idb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("id `{}…` too long", &id[..32])));
        }
        buf.extend_from_slice(&(idb.len() as u16).to_le_bytes());
        buf.extend_from_slice(idb);
        for &x in store.lookup(id)? {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Deterministic synthetic embedding of one catalog item.
///
/// The topic mixture is lifted into d dimensions through a random projection
/// fixed by `seed`, then perturbed by unit noise hashed from the item id and
/// scaled by `noise_scale`, and finally normalized to unit Euclidean norm.
/// Same (item, d, seed, noise) in, same vector out — across runs and
/// machines.
pub fn synth_embed(
    item: &NewsItem,
    d: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<NewsEmbedding> {
    item.validate()?;
    let projection = projection_matrix(item.topics.len(), d, seed);
    Ok(embed_with_projection(item, &projection, d, seed, noise_scale))
}

/// Embed a whole catalog, sharing one projection matrix.
pub fn synth_embed_store(
    items: &[NewsItem],
    d: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(d);
    if items.is_empty() {
        return Ok(store);
    }
    let t = items[0].topics.len();
    let projection = projection_matrix(t, d, seed);
    for item in items {
        item.validate()?;
        if item.topics.len() != t {
            return Err(Error::InvalidInput(format!(
                "news `{}` has {} topics, catalog started with {t}",
                item.nid,
                item.topics.len()
            )));
        }
        store.insert(embed_with_projection(item, &projection, d, seed, noise_scale))?;
    }
    Ok(store)
}

fn projection_matrix(t: usize, d: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn embed_with_projection(
    item: &NewsItem,
    projection: &[f64],
    d: usize,
    seed: u64,
    noise_scale: f64,
) -> NewsEmbedding {
    use rand::{Rng, SeedableRng};
    let mut base = vec![0.0f64; d];
    for (k, &w) in item.topics.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for c in 0..d {
            base[c] += w * projection[k * d + c];
        }
    }
    normalize(&mut base);
    // Id-hashed noise: same id, same nudge, independent of catalog order.
    let mut noise_rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a(item.nid.as_bytes()));
    let mut noise: Vec<f64> = (0..d).map(|_| noise_rng.random_range(-1.0..1.0)).collect();
    normalize(&mut noise);
    for c in 0..d {
        base[c] += noise_scale * noise[c];
    }
    normalize(&mut base);
    NewsEmbedding {
        id: item.nid.clone(),
        vector: base,
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
