//! Episodic memory: latent vectors with metadata, cosine retrieval, class-mean PCA.
//!
//! # File format (`*.epmem`, little-endian)
//!
//! ```text
//! magic "EPIMMEM\0" | version u32 | dimension u32 | count u64
//! per record: id u64 | metadata (u32 length + UTF-8 key=value lines) | dimension × f32
//! pca flag u32 | if 1: m u32 | mean dimension × f64 | eigenvalues m × f64 | components m × dimension × f64
//! crc32 u32 over every preceding byte
//! ```
//!
//! Metadata keys are `label`, `source`, `frames` (`start..end`) and `ordinal`; backslashes and
//! newlines in values are escaped as `\\` and `\n`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use log::warn;

use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::linalg::{dot, orthonormalize, symmetric_eigen};

pub const MEMORY_MAGIC: &[u8; 8] = b"EPIMMEM\0";
pub const MEMORY_VERSION: u32 = 1;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecordMetadata {
    pub label: Option<String>,
    pub source: String,
    /// Half-open range of source frame indices.
    pub frames: Option<(usize, usize)>,
    /// Position in insertion order; assigned by [`EpisodicMemory::insert`].
    pub ordinal: u64,
}

impl RecordMetadata {
    pub fn labeled(label: impl Into<String>, source: impl Into<String>) -> Self {
        RecordMetadata { label: Some(label.into()), source: source.into(), ..Default::default() }
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(l) = &self.label {
            s.push_str(&format!("label={}\n", escape(l)));
        }
        s.push_str(&format!("source={}\n", escape(&self.source)));
        if let Some((a, b)) = self.frames {
            s.push_str(&format!("frames={a}..{b}\n"));
        }
        s.push_str(&format!("ordinal={}\n", self.ordinal));
        s
    }

    fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut m = RecordMetadata::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("metadata line `{line}` lacks '='"))?;
            match k {
                "label" => m.label = Some(unescape(v)),
                "source" => m.source = unescape(v),
                "frames" => {
                    let (a, b) = v.split_once("..").ok_or("bad frame range")?;
                    m.frames = Some((a.parse().map_err(|_| "bad frame start")?, b.parse().map_err(|_| "bad frame end")?));
                }
                "ordinal" => m.ordinal = v.parse().map_err(|_| "bad ordinal")?,
                _ => return Err(format!("unknown metadata key `{k}`")),
            }
        }
        Ok(m)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRecord {
    pub id: u64,
    pub vector: Vec<f32>,
    pub metadata: RecordMetadata,
}

/// `(a·b) / (‖a‖‖b‖)` in double precision.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::Degenerate(format!("zero-norm vector in cosine similarity (norms {na:e}, {nb:e})")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Projection `W (v − μ)` onto principal directions; rows of `W` are orthonormal.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaTransform {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

impl PcaTransform {
    /// Validates lengths and row orthonormality (within 1e-8).
    pub fn new(mean: Vec<f64>, components: Vec<Vec<f64>>, eigenvalues: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if components.len() > d || eigenvalues.len() != components.len() {
            return Err(contract!("{} components / {} eigenvalues for dimension {}", components.len(), eigenvalues.len(), d));
        }
        for (i, r) in components.iter().enumerate() {
            if r.len() != d {
                return Err(contract!("component {i} has length {}, expected {d}", r.len()));
            }
            for (j, s) in components.iter().enumerate().take(i + 1) {
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot(r, s) - target).abs() > 1e-8 {
                    return Err(contract!("components {j} and {i} are not orthonormal"));
                }
            }
        }
        Ok(PcaTransform { mean, components, eigenvalues })
    }

    /// Identity projection on `dimension` coordinates.
    pub fn identity(dimension: usize) -> Self {
        let components = (0..dimension).map(|i| (0..dimension).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        PcaTransform { mean: vec![0.0; dimension], components, eigenvalues: vec![1.0; dimension] }
    }

    /// Principal directions of the covariance of per-class mean vectors.
    ///
    /// `μ` is the unweighted mean of the class means and the covariance is normalized by the
    /// number of classes. Its rank is at most `classes − 1`, so at most that many components
    /// are returned even when more are requested. The eigenproblem is solved on the small
    /// `classes × classes` Gram matrix of the centered class means.
    pub fn fit_class_means<'a>(items: impl IntoIterator<Item = (&'a [f32], &'a str)>, num_components: usize) -> Result<Self> {
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        let mut dim = None;
        for (v, label) in items {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(contract!("vector of length {} among vectors of length {}", v.len(), d));
            }
            let e = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
            e.0.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64);
            e.1 += 1;
        }
        if sums.len() < 2 {
            return Err(Error::InsufficientData(format!("class-mean PCA needs at least 2 classes, found {}", sums.len())));
        }
        let d = dim.unwrap_or(0);
        let c = sums.len();
        let means: Vec<Vec<f64>> = sums.into_values().map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect()).collect();
        let mu: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / c as f64).collect();
        let centered: Vec<Vec<f64>> = means.iter().map(|m| m.iter().zip(&mu).map(|(x, u)| x - u).collect()).collect();
        let gram: Vec<f64> = (0..c * c).map(|k| dot(&centered[k / c], &centered[k % c]) / c as f64).collect();
        let eig = symmetric_eigen(&gram, c)?;
        let trace: f64 = (0..c).map(|i| gram[i * c + i]).sum();
        let floor = (1e-12 * trace).max(1e-24);

        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (lam, u) in eig.values.iter().zip(&eig.vectors) {
            if *lam <= floor || rows.len() >= num_components.min(c - 1) {
                continue;
            }
            // Z^T u is an eigenvector of the d×d covariance with the same eigenvalue.
            let w: Vec<f64> = (0..d).map(|j| centered.iter().zip(u).map(|(z, ui)| z[j] * ui).sum()).collect();
            rows.push(w);
            values.push(*lam);
        }
        let rows = orthonormalize(rows, 1e-12);
        values.truncate(rows.len());
        if rows.is_empty() {
            warn!("class means coincide; PCA has no components");
        } else if num_components > rows.len() {
            warn!("requested {} PCA components, class-mean covariance supports only {}", num_components, rows.len());
        }
        PcaTransform::new(mu, rows, values)
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Non-increasing eigenvalues matching [`components`](Self::components).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(contract!("vector of length {} for a PCA of dimension {}", v.len(), self.mean.len()));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self.components.iter().map(|w| dot(w, &centered)).collect())
    }
}

/// Free-function form of [`PcaTransform::apply`].
pub fn apply_pca(transform: &PcaTransform, v: &[f64]) -> Result<Vec<f64>> {
    transform.apply(v)
}

/// One ranked match returned by [`EpisodicMemory::query`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueryHit {
    pub id: u64,
    pub similarity: f64,
    pub ordinal: u64,
    pub label: Option<String>,
}

/// Insertion-ordered latent records of a fixed dimension, plus an optional PCA transform.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicMemory {
    dimension: usize,
    records: Vec<MemoryRecord>,
    next_id: u64,
    pca: Option<PcaTransform>,
}

impl EpisodicMemory {
    pub fn new(dimension: usize) -> Self {
        EpisodicMemory { dimension, records: Vec::new(), next_id: 0, pca: None }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn pca(&self) -> Option<&PcaTransform> {
        self.pca.as_ref()
    }

    pub fn set_pca(&mut self, pca: Option<PcaTransform>) -> Result<()> {
        if let Some(p) = &pca {
            if p.dimension() != self.dimension {
                return Err(contract!("PCA of dimension {} for a memory of dimension {}", p.dimension(), self.dimension));
            }
        }
        self.pca = pca;
        Ok(())
    }

    /// Appends a record and returns its id. The memory is unchanged on error.
    pub fn insert(&mut self, vector: &[f32], mut metadata: RecordMetadata) -> Result<u64> {
        if vector.len() != self.dimension {
            return Err(contract!("vector of length {} for a memory of dimension {}", vector.len(), self.dimension));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(contract!("vector entry {i} is not finite"));
        }
        let id = self.next_id;
        metadata.ordinal = self.records.len() as u64;
        self.records.push(MemoryRecord { id, vector: vector.to_vec(), metadata });
        self.next_id += 1;
        Ok(id)
    }

    /// Ranks stored records by cosine similarity to `query`, best first, ties broken by
    /// insertion order. Returns at most `top_n` hits.
    pub fn query(&self, query: &[f32], top_n: usize, use_pca: bool) -> Result<Vec<QueryHit>> {
        if top_n == 0 {
            return Err(contract!("top_n must be positive"));
        }
        if query.len() != self.dimension {
            return Err(contract!("query of length {} for a memory of dimension {}", query.len(), self.dimension));
        }
        let pca = match (use_pca, &self.pca) {
            (false, _) => None,
            (true, Some(p)) => Some(p),
            (true, None) => return Err(Error::Config("PCA requested but the memory has no fitted transform".into())),
        };
        let project = |v: &[f32]| -> Result<Vec<f64>> {
            match pca {
                Some(p) => p.apply(&widen(v)),
                None => Ok(widen(v)),
            }
        };
        let q = project(query)?;
        let mut hits = self
            .records
            .iter()
            .map(|r| {
                Ok(QueryHit {
                    id: r.id,
                    similarity: cosine_similarity(&q, &project(&r.vector)?)?,
                    ordinal: r.metadata.ordinal,
                    label: r.metadata.label.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.ordinal.cmp(&b.ordinal)));
        hits.truncate(top_n);
        Ok(hits)
    }

    /// Fits class-mean PCA over the labeled records (every record must carry a label).
    pub fn fit_class_mean_pca(&self, num_components: usize) -> Result<PcaTransform> {
        let mut items = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let label = r.metadata.label.as_deref().ok_or_else(|| contract!("record {} has no label", r.id))?;
            items.push((r.vector.as_slice(), label));
        }
        PcaTransform::fit_class_means(items, num_components)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.bytes(MEMORY_MAGIC);
        w.u32(MEMORY_VERSION);
        w.u32(self.dimension as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.id);
            w.text(&r.metadata.to_text());
            w.f32s(&r.vector);
        }
        match &self.pca {
            None => w.u32(0),
            Some(p) => {
                w.u32(1);
                w.u32(p.num_components() as u32);
                w.f64s(&p.mean);
                w.f64s(&p.eigenvalues);
                for row in &p.components {
                    w.f64s(row);
                }
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        write_atomic(path, &w.buf)
    }

    /// Loads a memory written by [`save`](Self::save); nothing is returned unless the whole
    /// file parses and its checksum matches.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, path);
        if r.take(8, "magic")? != MEMORY_MAGIC {
            return Err(r.fail("not an episodic memory file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != MEMORY_VERSION {
            return Err(r.fail(format!("unsupported memory format version {version}")));
        }
        let dimension = r.u32("dimension")? as usize;
        let count = r.u64("record count")?;
        let mut mem = EpisodicMemory::new(dimension);
        for i in 0..count {
            let id = r.u64("record id")?;
            let meta = r.text("metadata")?;
            let metadata = RecordMetadata::from_text(&meta).map_err(|e| r.fail(format!("record {i}: {e}")))?;
            let vector = r.f32s(dimension, "record vector")?;
            mem.next_id = mem.next_id.max(id + 1);
            mem.records.push(MemoryRecord { id, vector, metadata });
        }
        if r.u32("pca flag")? == 1 {
            let m = r.u32("component count")? as usize;
            let mean = r.f64s(dimension, "pca mean")?;
            let values = r.f64s(m, "eigenvalues")?;
            let rows = (0..m).map(|_| r.f64s(dimension, "pca component")).collect::<Result<Vec<_>>>()?;
            mem.pca = Some(PcaTransform { mean, components: rows, eigenvalues: values });
        }
        let body_len = r.position();
        let stored = r.u32("checksum")?;
        r.finish()?;
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(r.fail(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
        }
        Ok(mem)
    }
}

/// Reader/writer wrapper: many concurrent queries or one writer at a time.
#[derive(Debug)]
pub struct SharedMemory {
    inner: RwLock<EpisodicMemory>,
}

impl SharedMemory {
    pub fn new(memory: EpisodicMemory) -> Self {
        SharedMemory { inner: RwLock::new(memory) }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, EpisodicMemory> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, EpisodicMemory> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert(&self, vector: &[f32], metadata: RecordMetadata) -> Result<u64> {
        self.write().insert(vector, metadata)
    }

    pub fn query(&self, query: &[f32], top_n: usize, use_pca: bool) -> Result<Vec<QueryHit>> {
        self.read().query(query, top_n, use_pca)
    }

    pub fn into_inner(self) -> EpisodicMemory {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(label: &str) -> RecordMetadata {
        RecordMetadata::labeled(label, "test")
    }

    #[test]
    fn insert_assigns_sequential_ids() {
        let mut m = EpisodicMemory::new(2);
        assert_eq!(m.insert(&[1.0, 0.0], meta("a")).unwrap(), 0);
        assert_eq!(m.len(), 1);
        assert_eq!(m.insert(&[0.0, 1.0], meta("b")).unwrap(), 1);
        assert_eq!(m.records()[1].metadata.ordinal, 1);
        assert!(m.insert(&[1.0, 2.0, 3.0], meta("c")).is_err());
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((h - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn query_ranks_by_angle() {
        let mut m = EpisodicMemory::new(2);
        let s = 0.5f32.sqrt();
        m.insert(&[0.0, 1.0], meta("ninety")).unwrap();
        m.insert(&[1.0, 0.0], meta("zero")).unwrap();
        m.insert(&[s, s], meta("fortyfive")).unwrap();
        let hits = m.query(&[1.0, 0.0], 10, false).unwrap();
        let labels: Vec<_> = hits.iter().map(|h| h.label.clone().unwrap()).collect();
        assert_eq!(labels, ["zero", "fortyfive", "ninety"]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert!((hits[1].similarity - 0.5f64.sqrt()).abs() < 1e-7);
        assert!(hits[2].similarity.abs() < 1e-12);
        assert_eq!(m.query(&[1.0, 0.0], 1, false).unwrap().len(), 1);
        assert!(EpisodicMemory::new(2).query(&[1.0, 0.0], 3, false).unwrap().is_empty());
        assert!(matches!(m.query(&[1.0, 0.0], 3, true), Err(Error::Config(_))));
    }

    #[test]
    fn ties_prefer_earlier_insertions() {
        let mut m = EpisodicMemory::new(2);
        m.insert(&[2.0, 0.0], meta("later-scaled")).unwrap();
        m.insert(&[1.0, 0.0], meta("b")).unwrap();
        let hits = m.query(&[5.0, 0.0], 2, false).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn two_class_pca_by_hand() {
        let items: Vec<(&[f32], &str)> = vec![(&[0.0, 0.0], "a"), (&[2.0, 0.0], "b")];
        let p = PcaTransform::fit_class_means(items, 5).unwrap();
        assert_eq!(p.num_components(), 1);
        assert_eq!(p.mean(), &[1.0, 0.0]);
        assert!((p.components()[0][0].abs() - 1.0).abs() < 1e-12 && p.components()[0][1].abs() < 1e-12);
        // covariance of the two means (±1 around μ, normalized by 2) is 1 along x
        assert!((p.eigenvalues()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_rank_is_bounded_by_classes() {
        let mut rng = crate::substrate::RngStream::new(4);
        let vecs: Vec<Vec<f32>> = (0..40).map(|_| (0..30).map(|_| rng.uniform() as f32).collect()).collect();
        let labels: Vec<String> = (0..40).map(|i| format!("c{}", i % 8)).collect();
        let p = PcaTransform::fit_class_means(vecs.iter().map(|v| v.as_slice()).zip(labels.iter().map(|s| s.as_str())), 200).unwrap();
        assert!(p.num_components() <= 7);
        assert!(p.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn equal_class_means_give_no_components() {
        let items: Vec<(&[f32], &str)> = vec![(&[1.0, 2.0], "a"), (&[1.0, 2.0], "b")];
        assert_eq!(PcaTransform::fit_class_means(items, 3).unwrap().num_components(), 0);
        let one: Vec<(&[f32], &str)> = vec![(&[1.0, 2.0], "a"), (&[3.0, 2.0], "a")];
        assert!(matches!(PcaTransform::fit_class_means(one, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pca_matches_full_covariance_oracle() {
        // Eigendecompose the full d×d covariance of class means with nalgebra and compare
        // the reconstructed covariance with the Gram-trick result.
        let mut rng = crate::substrate::RngStream::new(11);
        let d = 12;
        let vecs: Vec<Vec<f32>> = (0..30).map(|_| (0..d).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()).collect();
        let labels: Vec<String> = (0..30).map(|i| format!("c{}", i % 5)).collect();
        let p = PcaTransform::fit_class_means(vecs.iter().map(|v| v.as_slice()).zip(labels.iter().map(|s| s.as_str())), 100).unwrap();
        let mut means = vec![vec![0.0f64; d]; 5];
        for (i, v) in vecs.iter().enumerate() {
            for j in 0..d {
                means[i % 5][j] += v[j] as f64 / 6.0;
            }
        }
        let mu: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / 5.0).collect();
        let cov = nalgebra::DMatrix::from_fn(d, d, |a, b| means.iter().map(|m| (m[a] - mu[a]) * (m[b] - mu[b])).sum::<f64>() / 5.0);
        let mut rebuilt = nalgebra::DMatrix::<f64>::zeros(d, d);
        for (lam, w) in p.eigenvalues().iter().zip(p.components()) {
            let w = nalgebra::DVector::from_column_slice(w);
            rebuilt += *lam * &w * w.transpose();
        }
        assert!((&rebuilt - &cov).abs().max() < 1e-8);
        let mut reference: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in p.eigenvalues().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(p.num_components(), 4);
    }

    #[test]
    fn apply_pca_basics() {
        let p = PcaTransform::identity(3);
        assert_eq!(apply_pca(&p, &[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let items: Vec<(&[f32], &str)> = vec![(&[0.0, 1.0, 0.0], "a"), (&[2.0, 1.0, 4.0], "b"), (&[1.0, 3.0, 0.0], "c")];
        let p = PcaTransform::fit_class_means(items, 2).unwrap();
        assert!(p.apply(p.mean()).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(p.apply(&[1.0]).is_err());
        assert!(PcaTransform::new(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_a_contraction(seed in any::<u64>()) {
            let mut rng = crate::substrate::RngStream::new(seed);
            let vecs: Vec<Vec<f32>> = (0..12).map(|_| (0..6).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()).collect();
            let labels = ["a", "b", "c", "d"];
            let p = PcaTransform::fit_class_means(vecs.iter().enumerate().map(|(i, v)| (v.as_slice(), labels[i % 4])), 3).unwrap();
            let a: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let (pa, pb) = (p.apply(&a).unwrap(), p.apply(&b).unwrap());
            let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-8);
            for (i, r) in p.components().iter().enumerate() {
                for (j, s) in p.components().iter().enumerate() {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot(r, s) - expected).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn ranking_ignores_positive_rescaling(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let mut rng = crate::substrate::RngStream::new(seed);
            let mut m = EpisodicMemory::new(4);
            let mut scaled = EpisodicMemory::new(4);
            for i in 0..8 {
                let v: Vec<f32> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
                m.insert(&v, meta("x")).unwrap();
                let s: Vec<f32> = v.iter().map(|x| x * if i % 2 == 0 { scale } else { 1.0 }).collect();
                scaled.insert(&s, meta("x")).unwrap();
            }
            let q: Vec<f32> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
            let qs: Vec<f32> = q.iter().map(|x| x * scale).collect();
            let ids = |h: Vec<QueryHit>| h.into_iter().map(|h| h.id).collect::<Vec<_>>();
            let base = m.query(&q, 8, false).unwrap();
            // consistent with pairwise comparisons
            prop_assert!(base.windows(2).all(|w| w[0].similarity >= w[1].similarity));
            prop_assert_eq!(ids(base.clone()), ids(scaled.query(&qs, 8, false).unwrap()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.epmem");
        let mut m = EpisodicMemory::new(3);
        m.insert(&[0.1, -0.2, 0.3], RecordMetadata { frames: Some((0, 5)), ..meta("line\\one\nslash") }).unwrap();
        m.insert(&[1e-30, 7.0, f32::MIN_POSITIVE], RecordMetadata { label: None, source: "s".into(), ..Default::default() }).unwrap();
        m.insert(&[1.0, 2.0, 3.0], meta("two")).unwrap();
        let mut fitted = m.clone();
        fitted.records[1].metadata.label = Some("two".into());
        let pca = fitted.fit_class_mean_pca(2).unwrap();
        m.set_pca(Some(pca)).unwrap();
        m.save(&path).unwrap();
        let back = EpisodicMemory::load(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.records().iter().zip(m.records()) {
            assert_eq!(a.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        let empty = dir.path().join("e.epmem");
        EpisodicMemory::new(5).save(&empty).unwrap();
        assert_eq!(EpisodicMemory::load(&empty).unwrap(), EpisodicMemory::new(5));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.epmem");
        let mut m = EpisodicMemory::new(2);
        m.insert(&[1.0, 2.0], meta("a")).unwrap();
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        let err = EpisodicMemory::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 12] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        let err = EpisodicMemory::load(&path).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let mut versioned = bytes.clone();
        versioned[8] = 9;
        std::fs::write(&path, &versioned).unwrap();
        let err = EpisodicMemory::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn shared_memory_serves_readers() {
        let shared = std::sync::Arc::new(SharedMemory::new(EpisodicMemory::new(2)));
        shared.insert(&[1.0, 0.0], meta("a")).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let s = shared.clone();
                std::thread::spawn(move || s.query(&[1.0, 0.1], 1, false).unwrap()[0].id)
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 0);
        }
    }
}
