//! Attention recording, token heatmaps and inversion-stage key/value reuse.
//!
//! During inversion every denoiser call records the self-attention keys and
//! values of the configured layer set into a [`KvCache`], keyed by scheduler
//! timestep, layer and guidance branch. During editing, self-attention layers
//! selected by [`ReplacementPolicy`] attend with their own queries to the
//! cached keys/values of the same timestep instead of their own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{KvInjector, LayerId, LayerPartition};
use crate::error::{Error, Result};

/// Which classifier-free-guidance pass a denoiser call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceBranch {
    Cond,
    Uncond,
}

impl GuidanceBranch {
    fn code(self) -> u8 {
        match self {
            GuidanceBranch::Cond => 0,
            GuidanceBranch::Uncond => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(GuidanceBranch::Cond),
            1 => Ok(GuidanceBranch::Uncond),
            other => Err(Error::KvCache(format!("unknown branch code {other}"))),
        }
    }
}

impl fmt::Display for GuidanceBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceBranch::Cond => "cond",
            GuidanceBranch::Uncond => "uncond",
        })
    }
}

/// Self-attention layers whose keys/values are cached and replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSet {
    Decoder,
    Encoder,
    All,
}

impl LayerSet {
    pub fn resolve(self, partition: &LayerPartition) -> Vec<LayerId> {
        match self {
            LayerSet::Decoder => partition.decoder.clone(),
            LayerSet::Encoder => partition.encoder.clone(),
            LayerSet::All => partition.all(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerSet::Decoder => "decoder",
            LayerSet::Encoder => "encoder",
            LayerSet::All => "all",
        }
    }
}

impl std::str::FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(LayerSet::Decoder),
            "encoder" => Ok(LayerSet::Encoder),
            "all" => Ok(LayerSet::All),
            other => Err(Error::invalid(
                "layer_set",
                format!("`{other}` is not one of decoder, encoder, all"),
            )),
        }
    }
}

/// Attention captured during one denoiser call.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    /// Post-softmax cross-attention per layer, `(heads, positions, tokens)`.
    pub cross_maps: BTreeMap<LayerId, Tensor>,
    /// Spatial grid of each recorded cross-attention layer.
    pub cross_resolution: BTreeMap<LayerId, (usize, usize)>,
    /// Self-attention `(K, V)`, each `(heads, positions, head_dim)`.
    pub self_kv: BTreeMap<LayerId, (Tensor, Tensor)>,
}

impl AttentionRecord {
    /// The `(positions, tokens)` map of one head.
    pub fn cross_map(&self, layer: &LayerId, head: usize) -> Result<Tensor> {
        let maps = self
            .cross_maps
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        Ok(maps.get(head)?)
    }

    pub fn num_heads(&self, layer: &LayerId) -> Option<usize> {
        self.cross_maps.get(layer).map(|m| m.dims()[0])
    }
}

/// Object-token attention aggregated onto the spatial grid.
#[derive(Debug, Clone)]
pub struct TokenHeatmap {
    /// Unnormalised aggregate `(H, W)`; attached to the autograd graph.
    pub raw: Tensor,
    /// Min-max normalised values, row-major.
    pub data: Vec<f64>,
    pub resolution: (usize, usize),
}

impl TokenHeatmap {
    pub fn from_raw(raw: Tensor) -> Result<Self> {
        let dims = raw.dims();
        if dims.len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "heatmap must be 2-D, got {dims:?}"
            )));
        }
        let resolution = (dims[0], dims[1]);
        let values = raw.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(Self {
            data: min_max_normalize(&values),
            raw,
            resolution,
        })
    }

    /// Builds a heatmap from plain values (detached from any graph).
    pub fn from_values(values: &[f64], resolution: (usize, usize)) -> Result<Self> {
        let raw = Tensor::from_slice(values, resolution, &Device::Cpu)?;
        Self::from_raw(raw)
    }

    pub fn raw_values(&self) -> Result<Vec<f64>> {
        Ok(self
            .raw
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// True when the raw values carry no spatial signal.
    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Mean over layers at `resolution`, all heads and `token_indices`, then min-max normalised.
pub fn aggregate_token_map(
    record: &AttentionRecord,
    token_indices: &[usize],
    resolution: (usize, usize),
) -> Result<TokenHeatmap> {
    let raw = aggregate_raw(record, token_indices, resolution, None)?;
    TokenHeatmap::from_raw(raw)
}

/// As [`aggregate_token_map`], restricted to a subset of heads.
pub fn aggregate_token_map_over_heads(
    record: &AttentionRecord,
    token_indices: &[usize],
    resolution: (usize, usize),
    heads: &[usize],
) -> Result<TokenHeatmap> {
    let raw = aggregate_raw(record, token_indices, resolution, Some(heads))?;
    TokenHeatmap::from_raw(raw)
}

fn aggregate_raw(
    record: &AttentionRecord,
    token_indices: &[usize],
    resolution: (usize, usize),
    heads: Option<&[usize]>,
) -> Result<Tensor> {
    if token_indices.is_empty() {
        return Err(Error::invalid("token_indices", "must not be empty"));
    }
    if heads.is_some_and(|h| h.is_empty()) {
        return Err(Error::invalid("heads", "must not be empty"));
    }
    let layers: Vec<&LayerId> = record
        .cross_resolution
        .iter()
        .filter(|(_, r)| **r == resolution)
        .map(|(l, _)| l)
        .collect();
    if layers.is_empty() {
        return Err(Error::invalid(
            "resolution",
            format!("no recorded cross-attention layer at {}x{}", resolution.0, resolution.1),
        ));
    }
    let mut total: Option<Tensor> = None;
    for layer in &layers {
        let maps = &record.cross_maps[*layer];
        let (n_heads, positions, n_tokens) = maps.dims3()?;
        if positions != resolution.0 * resolution.1 {
            return Err(Error::DimensionMismatch(format!(
                "layer {layer}: {positions} positions at {}x{}",
                resolution.0, resolution.1
            )));
        }
        if let Some(&bad) = token_indices.iter().find(|&&i| i >= n_tokens) {
            return Err(Error::invalid(
                "token_indices",
                format!("index {bad} out of range for {n_tokens} tokens"),
            ));
        }
        let maps = match heads {
            Some(h) => {
                if let Some(&bad) = h.iter().find(|&&i| i >= n_heads) {
                    return Err(Error::invalid("heads", format!("head {bad} out of range")));
                }
                let idx = Tensor::from_iter(h.iter().map(|&i| i as u32), maps.device())?;
                maps.index_select(&idx, 0)?
            }
            None => maps.clone(),
        };
        let idx = Tensor::from_iter(token_indices.iter().map(|&i| i as u32), maps.device())?;
        // (heads, positions, tokens) -> (positions)
        let layer_mean = maps.index_select(&idx, 2)?.mean(2)?.mean(0)?;
        total = Some(match total {
            Some(acc) => (acc + layer_mean)?,
            None => layer_mean,
        });
    }
    let mean = (total.expect("at least one layer") / layers.len() as f64)?;
    Ok(mean.reshape(resolution)?)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// `softmax(Q Kᵀ / √d) V` with Q `(heads, n, d)`, K/V `(heads, m, d)`.
///
/// Returns the attention output and the post-softmax probabilities.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != d {
        return Err(Error::DimensionMismatch(format!(
            "query dim {d} vs key dim {}",
            k.dim(D::Minus1)?
        )));
    }
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let probs = softmax_last_dim(&scores)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KvKey {
    pub timestep: u32,
    pub layer: LayerId,
    pub branch: GuidanceBranch,
}

/// Self-attention keys/values recorded during inversion.
///
/// Entries are unique per `(timestep, layer, branch)`; the cache refuses
/// writes once frozen.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    entries: BTreeMap<KvKey, (Tensor, Tensor)>,
    frozen: bool,
}

pub const KV_CACHE_MAGIC: &[u8; 4] = b"MAKV";
pub const KV_CACHE_VERSION: u8 = 1;

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Which branch of the pipeline produced the entries.
    pub fn source_branch(&self) -> &'static str {
        "inversion"
    }

    pub fn insert(
        &mut self,
        timestep: u32,
        layer: LayerId,
        branch: GuidanceBranch,
        k: Tensor,
        v: Tensor,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::KvCache("cache is frozen".into()));
        }
        let key = KvKey {
            timestep,
            layer,
            branch,
        };
        if self.entries.contains_key(&key) {
            return Err(Error::KvCache(format!(
                "duplicate entry for timestep {}, layer {}, branch {}",
                key.timestep, key.layer, key.branch
            )));
        }
        self.entries.insert(key, (k.detach(), v.detach()));
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, timestep: u32, layer: &LayerId, branch: GuidanceBranch) -> Option<&(Tensor, Tensor)> {
        self.entries.get(&KvKey {
            timestep,
            layer: layer.clone(),
            branch,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = &KvKey> {
        self.entries.keys()
    }

    pub fn timesteps(&self) -> BTreeSet<u32> {
        self.entries.keys().map(|k| k.timestep).collect()
    }

    pub fn layers_at(&self, timestep: u32, branch: GuidanceBranch) -> BTreeSet<LayerId> {
        self.entries
            .keys()
            .filter(|k| k.timestep == timestep && k.branch == branch)
            .map(|k| k.layer.clone())
            .collect()
    }

    /// Serialises to the single-file binary layout:
    ///
    /// ```text
    /// magic "MAKV" | version u8 | entry count u32
    /// per entry: timestep u32 | branch u8 | layer (u16 len + utf8)
    ///            | dtype u8 | K rank u8 + dims u32.. | V rank u8 + dims u32..
    ///            | data offset u64 (bytes from start of data section)
    /// data section: K then V of each entry, little-endian
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::new();
        let mut data = Vec::new();
        for (key, (k, v)) in &self.entries {
            index.write_u32::<LittleEndian>(key.timestep).map_err(io_err)?;
            index.write_u8(key.branch.code()).map_err(io_err)?;
            let name = key.layer.as_str().as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::KvCache("layer name too long".into()))?;
            index.write_u16::<LittleEndian>(name_len).map_err(io_err)?;
            index.write_all(name).map_err(io_err)?;
            let dtype = match k.dtype() {
                DType::F64 => 1u8,
                _ => 0u8,
            };
            index.write_u8(dtype).map_err(io_err)?;
            for t in [k, v] {
                index.write_u8(t.rank() as u8).map_err(io_err)?;
                for &d in t.dims() {
                    index.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
                }
            }
            index.write_u64::<LittleEndian>(data.len() as u64).map_err(io_err)?;
            for t in [k, v] {
                write_values(&mut data, t, dtype)?;
            }
        }
        let mut out = Vec::with_capacity(9 + index.len() + data.len());
        out.extend_from_slice(KV_CACHE_MAGIC);
        out.write_u8(KV_CACHE_VERSION).map_err(io_err)?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)
            .map_err(io_err)?;
        out.extend_from_slice(&index);
        out.extend_from_slice(&data);
        Ok(out)
    }

    /// Parses the binary layout; the result is frozen.
    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(io_err)?;
        if &magic != KV_CACHE_MAGIC {
            return Err(Error::KvCache("bad magic".into()));
        }
        let version = cur.read_u8().map_err(io_err)?;
        if version != KV_CACHE_VERSION {
            return Err(Error::KvCache(format!("unsupported version {version}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        struct IndexEntry {
            key: KvKey,
            dtype: u8,
            k_shape: Vec<usize>,
            v_shape: Vec<usize>,
            offset: usize,
        }
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let timestep = cur.read_u32::<LittleEndian>().map_err(io_err)?;
            let branch = GuidanceBranch::from_code(cur.read_u8().map_err(io_err)?)?;
            let len = cur.read_u16::<LittleEndian>().map_err(io_err)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(io_err)?;
            let layer = LayerId(
                String::from_utf8(name).map_err(|_| Error::KvCache("layer name not utf8".into()))?,
            );
            let dtype = cur.read_u8().map_err(io_err)?;
            let mut shapes = Vec::with_capacity(2);
            for _ in 0..2 {
                let rank = cur.read_u8().map_err(io_err)? as usize;
                let dims = (0..rank)
                    .map(|_| cur.read_u32::<LittleEndian>().map(|d| d as usize))
                    .collect::<std::io::Result<Vec<_>>>()
                    .map_err(io_err)?;
                shapes.push(dims);
            }
            let offset = cur.read_u64::<LittleEndian>().map_err(io_err)? as usize;
            let v_shape = shapes.pop().expect("two shapes");
            let k_shape = shapes.pop().expect("two shapes");
            index.push(IndexEntry {
                key: KvKey {
                    timestep,
                    layer,
                    branch,
                },
                dtype,
                k_shape,
                v_shape,
                offset,
            });
        }
        let data = &bytes[cur.position() as usize..];
        let mut cache = KvCache::new();
        for e in index {
            let width = if e.dtype == 1 { 8 } else { 4 };
            let k_len: usize = e.k_shape.iter().product();
            let v_len: usize = e.v_shape.iter().product();
            let end = e.offset + (k_len + v_len) * width;
            if end > data.len() {
                return Err(Error::KvCache("truncated data section".into()));
            }
            let k = read_values(&data[e.offset..], &e.k_shape, e.dtype, device)?;
            let v = read_values(&data[e.offset + k_len * width..], &e.v_shape, e.dtype, device)?;
            cache.insert(e.key.timestep, e.key.layer, e.key.branch, k, v)?;
        }
        cache.freeze();
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::KvCache(format!("malformed cache: {e}"))
}

fn write_values(out: &mut Vec<u8>, t: &Tensor, dtype: u8) -> Result<()> {
    let flat = t.flatten_all()?;
    if dtype == 1 {
        for v in flat.to_vec1::<f64>()? {
            out.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    } else {
        for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            out.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    Ok(())
}

fn read_values(bytes: &[u8], shape: &[usize], dtype: u8, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut cur = Cursor::new(bytes);
    let t = if dtype == 1 {
        let mut v = vec![0f64; n];
        cur.read_f64_into::<LittleEndian>(&mut v).map_err(io_err)?;
        Tensor::from_vec(v, shape, device)?
    } else {
        let mut v = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut v).map_err(io_err)?;
        Tensor::from_vec(v, shape, device)?
    };
    Ok(t)
}

/// Stores every self-attention `(K, V)` of `record` under `(timestep, layer, branch)`.
///
/// Returns the number of inserted entries.
pub fn record_inversion_kv(
    record: &AttentionRecord,
    timestep: u32,
    branch: GuidanceBranch,
    cache: &mut KvCache,
) -> Result<usize> {
    if cache.is_frozen() {
        return Err(Error::KvCache("cache is frozen".into()));
    }
    for (layer, (k, v)) in &record.self_kv {
        cache.insert(timestep, layer.clone(), branch, k.clone(), v.clone())?;
    }
    Ok(record.self_kv.len())
}

/// Decides which reverse-branch self-attention calls attend to cached keys/values.
#[derive(Debug, Clone)]
pub struct ReplacementPolicy {
    /// Replacement happens for reverse steps strictly greater than this.
    pub start_step: usize,
    pub layers: BTreeSet<LayerId>,
    pub enabled: bool,
}

impl ReplacementPolicy {
    pub fn new(start_step: usize, layers: impl IntoIterator<Item = LayerId>) -> Self {
        Self {
            start_step,
            layers: layers.into_iter().collect(),
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            start_step: 0,
            layers: BTreeSet::new(),
            enabled: false,
        }
    }
}

/// True iff `reverse_step_index > S` and `layer` belongs to the replaced set.
///
/// Reverse steps are numbered from 1 (the call at `z_T`).
pub fn kv_replacement_policy(reverse_step_index: usize, layer: &LayerId, policy: &ReplacementPolicy) -> bool {
    policy.enabled && reverse_step_index > policy.start_step && policy.layers.contains(layer)
}

/// `attention(Q, K_inv, V_inv)` using the cached entry for `(timestep, layer, branch)`.
pub fn apply_kv_replacement(
    query: &Tensor,
    cache: &KvCache,
    timestep: u32,
    layer: &LayerId,
    branch: GuidanceBranch,
) -> Result<Tensor> {
    let (k, v) = cache
        .get(timestep, layer, branch)
        .ok_or_else(|| Error::ScheduleMismatch {
            timestep,
            layer: layer.to_string(),
            branch: branch.to_string(),
        })?;
    let k = k.to_dtype(query.dtype())?;
    let v = v.to_dtype(query.dtype())?;
    let (out, _) = scaled_dot_product_attention(query, &k, &v)?;
    Ok(out)
}

/// [`KvInjector`] serving one reverse-branch denoiser call from an inversion cache.
pub struct InversionKvInjector<'a> {
    cache: &'a KvCache,
    policy: &'a ReplacementPolicy,
    timestep: u32,
    reverse_step_index: usize,
    branch: GuidanceBranch,
    replaced: Vec<LayerId>,
}

impl<'a> InversionKvInjector<'a> {
    pub fn new(
        cache: &'a KvCache,
        policy: &'a ReplacementPolicy,
        timestep: u32,
        reverse_step_index: usize,
        branch: GuidanceBranch,
    ) -> Self {
        Self {
            cache,
            policy,
            timestep,
            reverse_step_index,
            branch,
            replaced: Vec::new(),
        }
    }

    /// Layers replaced during the call, in call order.
    pub fn replaced_layers(&self) -> &[LayerId] {
        &self.replaced
    }
}

impl KvInjector for InversionKvInjector<'_> {
    fn replace(&mut self, layer: &LayerId, query: &Tensor) -> Result<Option<Tensor>> {
        if !kv_replacement_policy(self.reverse_step_index, layer, self.policy) {
            return Ok(None);
        }
        let out = apply_kv_replacement(query, self.cache, self.timestep, layer, self.branch)?;
        self.replaced.push(layer.clone());
        Ok(Some(out))
    }
}
