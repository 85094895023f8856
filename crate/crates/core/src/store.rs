//! Frozen embedding data: image features, class-name token embeddings, the
//! domain/class tables, and the binary `FDCG` store format.
//!
//! Layout (all integers u32 little-endian, floats f32 little-endian):
//!
//! ```text
//! "FDCG" version dim token_dim num_classes token_len num_domains num_images
//! class names   (u32 length + UTF-8 bytes) × num_classes
//! domain names  (u32 length + UTF-8 bytes) × num_domains
//! class tokens  num_classes × token_len × token_dim f32
//! images        num_images × (class u32, domain u32, dim × f32)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::math::{gaussian_matrix, gaussian_vector, l2_norm, seeded_rng};
use crate::prompt::text::{TextEncoderStub, DEFAULT_STUB_SEED};

pub const STORE_MAGIC: &[u8; 4] = b"FDCG";
pub const STORE_VERSION: u32 = 1;
/// Tokens per class name when not otherwise specified.
pub const DEFAULT_TOKEN_LEN: usize = 4;

const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub embedding: Array1<f64>,
    pub class_index: usize,
    pub domain_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub token_dim: usize,
    pub class_names: Vec<String>,
    /// One `[token_len × token_dim]` block per class.
    pub class_tokens: Vec<Array2<f64>>,
    pub domains: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub domain_index: usize,
    pub class_indices: Vec<usize>,
    pub image_indices: Vec<usize>,
    pub size: usize,
}

/// Human-readable sidecar; the binary file is authoritative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub dim: usize,
    pub token_dim: usize,
    pub num_classes: usize,
    pub token_len: usize,
    pub num_domains: usize,
    pub num_images: usize,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub token_dim: usize,
    pub images_per_class_per_domain: usize,
    pub domain_shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl EmbeddingStore {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn token_len(&self) -> usize {
        self.class_tokens.first().map_or(0, |t| t.nrows())
    }

    /// Concatenates the token blocks of `classes` along the sequence axis.
    pub fn stacked_tokens(&self, classes: &[usize]) -> Result<Array2<f64>> {
        let mut views = Vec::with_capacity(classes.len());
        for &c in classes {
            let block = self.class_tokens.get(c).ok_or_else(|| {
                Error::Argument(format!(
                    "class index {c} out of range for {} classes",
                    self.num_classes()
                ))
            })?;
            views.push(block.view());
        }
        if views.is_empty() {
            return Err(Error::Argument("no classes selected".into()));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("blocks share width"))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    /// Checks every store invariant.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.token_dim == 0 {
            return Err(Error::Data("dimensions must be positive".into()));
        }
        if self.class_tokens.len() != self.class_names.len() {
            return Err(Error::Data(format!(
                "{} class token blocks for {} classes",
                self.class_tokens.len(),
                self.class_names.len()
            )));
        }
        let token_len = self.token_len();
        for (c, block) in self.class_tokens.iter().enumerate() {
            if block.dim() != (token_len, self.token_dim) {
                return Err(Error::Data(format!(
                    "class {c} token block has shape {:?}, expected ({token_len}, {})",
                    block.dim(),
                    self.token_dim
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("class {c} has non-finite tokens")));
            }
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(Error::Data(format!("duplicate class name {name:?}")));
            }
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.embedding.len() != self.dim {
                return Err(Error::Data(format!(
                    "image {i} has dimension {}, expected {}",
                    img.embedding.len(),
                    self.dim
                )));
            }
            if img.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("image {i} has non-finite values")));
            }
            if img.class_index >= self.num_classes() {
                return Err(Error::Data(format!(
                    "image {i} class index {} out of range",
                    img.class_index
                )));
            }
            if img.domain_index >= self.num_domains() {
                return Err(Error::Data(format!(
                    "image {i} domain index {} out of range",
                    img.domain_index
                )));
            }
            let norm = l2_norm(img.embedding.view());
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Data(format!(
                    "image {i} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            version: STORE_VERSION,
            dim: self.dim,
            token_dim: self.token_dim,
            num_classes: self.num_classes(),
            token_len: self.token_len(),
            num_domains: self.num_domains(),
            num_images: self.images.len(),
            classes: self.class_names.clone(),
            domains: self.domains.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut enc = Encoder::new();
        enc.bytes(STORE_MAGIC);
        enc.u32(STORE_VERSION);
        for v in [
            self.dim,
            self.token_dim,
            self.num_classes(),
            self.token_len(),
            self.num_domains(),
            self.images.len(),
        ] {
            enc.u32(to_u32(v, "header count")?);
        }
        for name in self.class_names.iter().chain(&self.domains) {
            enc.str(name);
        }
        for block in &self.class_tokens {
            enc.matrix(block);
        }
        for img in &self.images {
            enc.u32(img.class_index as u32);
            enc.u32(img.domain_index as u32);
            enc.vector(&img.embedding);
        }
        Ok(enc.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let magic = dec
            .take(4, "magic")
            .map_err(|_| Error::Format("file too short for magic".into()))?;
        if magic != STORE_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"FDCG\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = dec.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let dim = dec.u32("dim")? as usize;
        let token_dim = dec.u32("token_dim")? as usize;
        let num_classes = dec.u32("num_classes")? as usize;
        let token_len = dec.u32("token_len")? as usize;
        let num_domains = dec.u32("num_domains")? as usize;
        let num_images = dec.u32("num_images")? as usize;

        let mut class_names = Vec::with_capacity(num_classes.min(1 << 16));
        for _ in 0..num_classes {
            class_names.push(dec.str("class name")?);
        }
        let mut domains = Vec::with_capacity(num_domains.min(1 << 16));
        for _ in 0..num_domains {
            domains.push(dec.str("domain name")?);
        }
        let token_bytes = num_classes
            .checked_mul(token_len)
            .and_then(|n| n.checked_mul(token_dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption("class token size overflows".into()))?;
        dec.ensure(token_bytes, "class tokens")?;
        let mut class_tokens = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            class_tokens.push(dec.matrix(token_len, token_dim, "class tokens")?);
        }
        let record = 8 + dim * 4;
        let image_bytes = num_images
            .checked_mul(record)
            .ok_or_else(|| Error::Corruption("image payload size overflows".into()))?;
        dec.ensure(image_bytes, "image records")?;
        let mut images = Vec::with_capacity(num_images);
        for _ in 0..num_images {
            let class_index = dec.u32("image class")? as usize;
            let domain_index = dec.u32("image domain")? as usize;
            let embedding = dec.vector(dim, "image embedding")?;
            images.push(ImageRecord {
                embedding,
                class_index,
                domain_index,
            });
        }
        dec.finish()?;
        let store = EmbeddingStore {
            dim,
            token_dim,
            class_names,
            class_tokens,
            domains,
            images,
        };
        store.validate()?;
        Ok(store)
    }

    /// Restricts the store to the given domains and classes, renumbering both
    /// in the order given.
    pub fn subset(&self, domains: &[usize], classes: &[usize]) -> Result<EmbeddingStore> {
        let domain_map = index_map(domains, self.num_domains(), "domain")?;
        let class_map = index_map(classes, self.num_classes(), "class")?;
        let images = self
            .images
            .iter()
            .filter_map(|img| {
                Some(ImageRecord {
                    embedding: img.embedding.clone(),
                    class_index: *class_map.get(&img.class_index)?,
                    domain_index: *domain_map.get(&img.domain_index)?,
                })
            })
            .collect();
        Ok(EmbeddingStore {
            dim: self.dim,
            token_dim: self.token_dim,
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            class_tokens: classes.iter().map(|&c| self.class_tokens[c].clone()).collect(),
            domains: domains.iter().map(|&d| self.domains[d].clone()).collect(),
            images,
        })
    }
}

fn index_map(indices: &[usize], bound: usize, what: &str) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for (new, &old) in indices.iter().enumerate() {
        if old >= bound {
            return Err(Error::Argument(format!("{what} index {old} out of range")));
        }
        if map.insert(old, new).is_some() {
            return Err(Error::Argument(format!("{what} index {old} listed twice")));
        }
    }
    Ok(map)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

/// Writes the binary store and its JSON manifest. Nothing is written if the
/// store fails validation.
pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = store.to_bytes()?;
    let manifest = serde_json::to_string_pretty(&store.manifest())
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(mpath, e))?;
    Ok(())
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Unit-normalizes and rounds to f32 precision so a saved copy reloads equal.
fn normalize_storable(v: Array1<f64>) -> Array1<f64> {
    let n = l2_norm(v.view());
    let rounded = (v / n).mapv(round_f32);
    // Renormalizing after rounding keeps the norm error at f32 epsilon.
    let n2 = l2_norm(rounded.view());
    (rounded / n2).mapv(round_f32)
}

/// Deterministic stand-in for a real multi-domain dataset.
///
/// Class prototypes are the frozen text encoder's image of each class's
/// mean token embedding, so image and text features share one space; every
/// domain adds a fixed offset scaled by `domain_shift`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingStore> {
    generate_synthetic_with_token_len(spec, DEFAULT_TOKEN_LEN)
}

pub fn generate_synthetic_with_token_len(spec: &SyntheticSpec, token_len: usize) -> Result<EmbeddingStore> {
    let SyntheticSpec {
        num_domains,
        num_classes,
        dim,
        token_dim,
        images_per_class_per_domain,
        domain_shift,
        noise,
        seed,
    } = *spec;
    if num_domains == 0
        || num_classes == 0
        || images_per_class_per_domain == 0
        || token_dim == 0
        || token_len == 0
    {
        return Err(Error::Argument("all counts must be at least 1".into()));
    }
    if dim < 4 {
        return Err(Error::Argument(format!("dim must be at least 4, got {dim}")));
    }
    if !(domain_shift >= 0.0) || !(noise >= 0.0) || !domain_shift.is_finite() || !noise.is_finite() {
        return Err(Error::Argument(
            "domain_shift and noise must be finite and non-negative".into(),
        ));
    }

    let stub = TextEncoderStub::new(token_dim, dim, DEFAULT_STUB_SEED)?;
    let mut token_rng = seeded_rng(seed, &[1]);
    let token_std = 1.0 / (token_dim as f64).sqrt();
    let class_tokens: Vec<Array2<f64>> = (0..num_classes)
        .map(|_| gaussian_matrix(token_len, token_dim, token_std, &mut token_rng).mapv(round_f32))
        .collect();
    let prototypes = class_tokens
        .iter()
        .map(|block| stub.project_normalized(&block.mean_axis(Axis(0)).expect("token_len > 0")))
        .collect::<Result<Vec<_>>>()?;

    let mut domain_rng = seeded_rng(seed, &[2]);
    let offsets: Vec<Array1<f64>> = (0..num_domains)
        .map(|_| gaussian_vector(dim, 1.0 / (dim as f64).sqrt(), &mut domain_rng))
        .collect();

    let mut noise_rng = seeded_rng(seed, &[3]);
    let mut images = Vec::with_capacity(num_domains * num_classes * images_per_class_per_domain);
    for (d, offset) in offsets.iter().enumerate() {
        for (c, proto) in prototypes.iter().enumerate() {
            for _ in 0..images_per_class_per_domain {
                let mut v = proto + &(offset * domain_shift);
                if noise > 0.0 {
                    v += &gaussian_vector(dim, noise, &mut noise_rng);
                }
                images.push(ImageRecord {
                    embedding: normalize_storable(v),
                    class_index: c,
                    domain_index: d,
                });
            }
        }
    }

    let store = EmbeddingStore {
        dim,
        token_dim,
        class_names: (0..num_classes).map(|c| format!("class_{c:03}")).collect(),
        class_tokens,
        domains: (0..num_domains).map(|d| format!("domain_{d}")).collect(),
        images,
    };
    store.validate()?;
    Ok(store)
}

/// Assigns `clients_per_domain` clients to every domain. Each client sees
/// `classes_per_client` classes drawn by seeded shuffle; each (domain, class)
/// cell is subsampled to `floor(sampling_rate × cell size)` images which are
/// dealt round-robin to the clients sharing that cell.
pub fn partition_clients(
    store: &EmbeddingStore,
    clients_per_domain: usize,
    classes_per_client: usize,
    sampling_rate: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    let num_classes = store.num_classes();
    if clients_per_domain == 0 {
        return Err(Error::Argument("clients_per_domain must be at least 1".into()));
    }
    if classes_per_client == 0 || classes_per_client > num_classes {
        return Err(Error::Argument(format!(
            "classes_per_client must be in 1..={num_classes}, got {classes_per_client}"
        )));
    }
    if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
        return Err(Error::Argument(format!(
            "sampling_rate must be in (0, 1], got {sampling_rate}"
        )));
    }

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, img) in store.images.iter().enumerate() {
        cells
            .entry((img.domain_index, img.class_index))
            .or_default()
            .push(i);
    }

    let mut partitions = Vec::with_capacity(store.num_domains() * clients_per_domain);
    for domain in 0..store.num_domains() {
        let mut class_rng = seeded_rng(seed, &[10, domain as u64]);
        let mut assigned: Vec<Vec<usize>> = Vec::with_capacity(clients_per_domain);
        for _ in 0..clients_per_domain {
            let mut classes: Vec<usize> = (0..num_classes).collect();
            classes.shuffle(&mut class_rng);
            classes.truncate(classes_per_client);
            classes.sort_unstable();
            assigned.push(classes);
        }

        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients_per_domain];
        for class in 0..num_classes {
            let sharers: Vec<usize> = (0..clients_per_domain)
                .filter(|&k| assigned[k].binary_search(&class).is_ok())
                .collect();
            if sharers.is_empty() {
                continue;
            }
            let available = cells.get(&(domain, class)).map_or(&[][..], Vec::as_slice);
            let take = (sampling_rate * available.len() as f64).floor() as usize;
            if take < sharers.len() {
                return Err(Error::Partition(format!(
                    "cell (domain {:?}, class {:?}) yields {take} sampled images for {} clients",
                    store.domains[domain],
                    store.class_names[class],
                    sharers.len()
                )));
            }
            let mut pool = available.to_vec();
            pool.shuffle(&mut seeded_rng(seed, &[20, domain as u64, class as u64]));
            for (n, &img) in pool[..take].iter().enumerate() {
                owned[sharers[n % sharers.len()]].push(img);
            }
        }

        for (k, (classes, mut images)) in assigned.into_iter().zip(owned).enumerate() {
            images.sort_unstable();
            partitions.push(ClientPartition {
                client_id: domain * clients_per_domain + k,
                domain_index: domain,
                class_indices: classes,
                size: images.len(),
                image_indices: images,
            });
        }
    }
    Ok(partitions)
}

/// Checks the per-client and cross-client partition invariants.
pub fn validate_partitions(store: &EmbeddingStore, partitions: &[ClientPartition]) -> Result<()> {
    let mut owner: BTreeSet<usize> = BTreeSet::new();
    for p in partitions {
        if p.size != p.image_indices.len() || p.size == 0 {
            return Err(Error::Partition(format!(
                "client {} size {} disagrees with {} owned images",
                p.client_id,
                p.size,
                p.image_indices.len()
            )));
        }
        for &i in &p.image_indices {
            let img = store
                .images
                .get(i)
                .ok_or_else(|| Error::Partition(format!("client {} owns missing image {i}", p.client_id)))?;
            if img.domain_index != p.domain_index {
                return Err(Error::Partition(format!(
                    "client {} owns image {i} from domain {}",
                    p.client_id, img.domain_index
                )));
            }
            if !owner.insert(i) {
                return Err(Error::Partition(format!("image {i} owned twice")));
            }
        }
    }
    Ok(())
}
