//! Descriptor index and confidence-gated exact nearest-neighbour search.

use std::cmp::Ordering;
use std::path::Path;

use crate::config::KvConfig;
use crate::data::{Dataset, SliceSample};
use crate::error::{Error, Result};
use crate::model::Mocae;
use crate::par;
use crate::tensor::Scalar;
use crate::wire::{Reader, WriteLe};

pub const INDEX_MAGIC: &[u8; 6] = b"MOCIX\0";
pub const INDEX_VERSION: u32 = 1;
/// Width of the NUL-padded case id field of an index record.
pub const CASE_ID_BYTES: usize = 64;
/// Default confidence above which search is restricted to tumoural entries.
pub const GATE_THRESHOLD: f64 = 0.9;

/// Slices encoded per inference call while building an index.
const BUILD_BATCH: usize = 64;
/// Entries scored per parallel task during a scan.
const SCAN_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub descriptor: Vec<f64>,
    pub probability: f64,
    /// Ground-truth tumour presence.
    pub tumour_flag: bool,
    pub case_id: String,
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Index {
    dim: usize,
    entries: Vec<IndexEntry>,
}

/// Which database entries count as tumoural when the gate fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMembership {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOptions {
    pub k: usize,
    /// `None` disables the gate.
    pub gate_threshold: Option<f64>,
    pub membership: GateMembership,
    /// Drop entries with the query's own (case id, z).
    pub exclude_self: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions {
            k: 5,
            gate_threshold: Some(GATE_THRESHOLD),
            membership: GateMembership::GroundTruth,
            exclude_self: false,
        }
    }
}

impl QueryOptions {
    /// Reads `retrieval.*` keys.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let gate: bool = kv.get_or("retrieval.gate", true)?;
        let threshold: f64 = kv.get_or("retrieval.gate_threshold", GATE_THRESHOLD)?;
        let membership = match kv.raw("retrieval.gate_membership").unwrap_or("ground_truth") {
            "ground_truth" => GateMembership::GroundTruth,
            "predicted" => GateMembership::Predicted,
            other => {
                return Err(Error::Config(format!(
                    "retrieval.gate_membership = {other:?}: expected ground_truth or predicted"
                )))
            }
        };
        let opts = QueryOptions {
            k: kv.get_or("retrieval.k", d.k)?,
            gate_threshold: gate.then_some(threshold),
            membership,
            exclude_self: kv.get_or("retrieval.exclude_self", d.exclude_self)?,
        };
        if opts.k == 0 {
            return Err(Error::Config("retrieval.k must be at least 1".into()));
        }
        Ok(opts)
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("retrieval.k", self.k);
        kv.set("retrieval.gate", self.gate_threshold.is_some());
        kv.set("retrieval.gate_threshold", self.gate_threshold.unwrap_or(GATE_THRESHOLD));
        kv.set(
            "retrieval.gate_membership",
            match self.membership {
                GateMembership::GroundTruth => "ground_truth",
                GateMembership::Predicted => "predicted",
            },
        );
        kv.set("retrieval.exclude_self", self.exclude_self);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Position in the index.
    pub entry: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Nearest first.
    pub hits: Vec<Hit>,
    pub gate_applied: bool,
    /// Tumour probability of the query.
    pub probability: f64,
}

impl RetrievalResult {
    /// True when gating (or self-exclusion) left no candidate.
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("euclidean_distance", &[a.len()], &[b.len()]));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

impl Index {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::invalid(format!("descriptor dimension {dim}")));
        }
        Ok(Index {
            dim,
            entries: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: IndexEntry) -> Result<()> {
        if entry.descriptor.len() != self.dim {
            return Err(Error::shape("index entry", &[entry.descriptor.len()], &[self.dim]));
        }
        if entry.case_id.len() > CASE_ID_BYTES || entry.case_id.contains('\0') {
            return Err(Error::invalid(format!(
                "case id {:?} must be at most {CASE_ID_BYTES} bytes without NUL",
                entry.case_id
            )));
        }
        if entry.z > u32::MAX as usize {
            return Err(Error::invalid(format!("z index {} too large", entry.z)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Ranks the candidates for a query descriptor. Ties in distance are
    /// broken by (case id, z, position).
    pub fn search(
        &self,
        descriptor: &[f64],
        probability: f64,
        query_id: Option<(&str, usize)>,
        opts: &QueryOptions,
    ) -> Result<RetrievalResult> {
        if opts.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if descriptor.len() != self.dim {
            return Err(Error::shape("query", &[descriptor.len()], &[self.dim]));
        }
        let gate_applied = opts.gate_threshold.is_some_and(|t| probability >= t);
        let threshold = opts.gate_threshold.unwrap_or(GATE_THRESHOLD);
        let admit = |e: &IndexEntry| {
            if gate_applied {
                let tumoural = match opts.membership {
                    GateMembership::GroundTruth => e.tumour_flag,
                    GateMembership::Predicted => e.probability >= threshold,
                };
                if !tumoural {
                    return false;
                }
            }
            match (opts.exclude_self, query_id) {
                (true, Some((case, z))) => !(e.case_id == case && e.z == z),
                _ => true,
            }
        };

        let chunks = self.entries.len().div_ceil(SCAN_CHUNK);
        let scored: Vec<Vec<Hit>> = par::map_range(chunks, |c| {
            let start = c * SCAN_CHUNK;
            let end = (start + SCAN_CHUNK).min(self.entries.len());
            (start..end)
                .filter(|&i| admit(&self.entries[i]))
                .map(|i| Hit {
                    entry: i,
                    distance: euclidean_distance(descriptor, &self.entries[i].descriptor)
                        .expect("dimension checked on insert"),
                })
                .collect()
        });
        let mut hits: Vec<Hit> = scored.into_iter().flatten().collect();
        let order = |a: &Hit, b: &Hit| self.compare(a, b);
        if hits.len() > opts.k {
            hits.select_nth_unstable_by(opts.k - 1, order);
            hits.truncate(opts.k);
        }
        hits.sort_by(order);
        Ok(RetrievalResult {
            hits,
            gate_applied,
            probability,
        })
    }

    fn compare(&self, a: &Hit, b: &Hit) -> Ordering {
        let (ea, eb) = (&self.entries[a.entry], &self.entries[b.entry]);
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| ea.case_id.cmp(&eb.case_id))
            .then_with(|| ea.z.cmp(&eb.z))
            .then_with(|| a.entry.cmp(&b.entry))
    }

    /// Position of the entry with the given identity.
    pub fn find(&self, case_id: &str, z: usize) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.case_id == case_id && e.z == z)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.entries.len() * self.record_size());
        out.extend_from_slice(INDEX_MAGIC);
        out.put_u32(INDEX_VERSION);
        out.put_u32(self.dim as u32);
        out.put_u64(self.entries.len() as u64);
        for e in &self.entries {
            let mut id = [0u8; CASE_ID_BYTES];
            id[..e.case_id.len()].copy_from_slice(e.case_id.as_bytes());
            out.extend_from_slice(&id);
            out.put_u32(e.z as u32);
            out.put_u8(e.tumour_flag as u8);
            out.extend_from_slice(&[0u8; 3]);
            out.put_f64(e.probability);
            for &v in &e.descriptor {
                out.put_f64(v);
            }
        }
        out
    }

    /// Bytes per record: id, z, flag, padding, probability, descriptor.
    pub fn record_size(&self) -> usize {
        CASE_ID_BYTES + 4 + 1 + 3 + 8 + 8 * self.dim
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC, "index")?;
        r.version(INDEX_VERSION)?;
        let at = r.offset();
        let dim = r.u32("descriptor dimension")? as usize;
        let mut index = Index::new(dim).map_err(|_| Error::Parse {
            offset: at,
            message: format!("descriptor dimension {dim}"),
        })?;
        let n = r.count("entry count", index.record_size())?;
        index.entries.reserve(n);
        for _ in 0..n {
            let at = r.offset();
            let raw = r.take(CASE_ID_BYTES, "case id")?;
            let end = raw.iter().position(|&b| b == 0).unwrap_or(CASE_ID_BYTES);
            if raw[end..].iter().any(|&b| b != 0) {
                return Err(Error::Parse {
                    offset: at,
                    message: "case id padding is not NUL".into(),
                });
            }
            let case_id = std::str::from_utf8(&raw[..end])
                .map_err(|_| Error::Parse {
                    offset: at,
                    message: "case id is not valid UTF-8".into(),
                })?
                .to_string();
            let z = r.u32("z index")? as usize;
            let at = r.offset();
            let tumour_flag = match r.u8("tumour flag")? {
                0 => false,
                1 => true,
                v => {
                    return Err(Error::Parse {
                        offset: at,
                        message: format!("tumour flag byte {v}"),
                    })
                }
            };
            r.take(3, "padding")?;
            let probability = r.f64("probability")?;
            let descriptor = (0..dim)
                .map(|_| r.f64("descriptor"))
                .collect::<Result<Vec<_>>>()?;
            index.entries.push(IndexEntry {
                descriptor,
                probability,
                tumour_flag,
                case_id,
                z,
            });
        }
        r.finish()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Descriptors and tumour probabilities of every slice, in dataset order.
pub fn describe<T: Scalar>(model: &Mocae<T>, data: &Dataset) -> Result<Vec<(Vec<f64>, f64)>> {
    let (h, w) = model.config().input_size;
    if let Some(size) = data.image_size()? {
        if size != (h, w) {
            return Err(Error::shape("build_index", &[size.0, size.1], &[h, w]));
        }
    }
    let d = model.latent_width();
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(BUILD_BATCH) {
        let batch = data.batch::<T>(part)?;
        let latent = model.encode(&batch)?;
        let prob = model.classify(&latent)?;
        for (row, p) in latent.data().chunks_exact(d).zip(prob.data()) {
            out.push((row.iter().map(|v| v.as_f64()).collect(), p.as_f64()));
        }
    }
    Ok(out)
}

/// One entry per slice of `data`.
pub fn build_index<T: Scalar>(model: &Mocae<T>, data: &Dataset) -> Result<Index> {
    let mut index = Index::new(model.latent_width())?;
    for (s, (descriptor, probability)) in data.samples.iter().zip(describe(model, data)?) {
        index.push(IndexEntry {
            descriptor,
            probability,
            tumour_flag: s.tumour_present,
            case_id: s.case_id.clone(),
            z: s.z,
        })?;
    }
    Ok(index)
}

/// Encodes `slice` and searches the index with it.
pub fn query<T: Scalar>(
    index: &Index,
    model: &Mocae<T>,
    slice: &SliceSample,
    opts: &QueryOptions,
) -> Result<RetrievalResult> {
    let one = Dataset::new(vec![slice.clone()]);
    let (descriptor, probability) = describe(model, &one)?.pop().expect("one slice");
    index.search(&descriptor, probability, Some((&slice.case_id, slice.z)), opts)
}
