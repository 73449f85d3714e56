//! Evaluation protocols: class-similarity matrices, per-position PSNR curves and the k-fold
//! retrieval benchmark, plus CSV / PGM export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::binio::write_atomic;
use crate::error::{contract, Error, Result};
use crate::losses::{mean_frame_baseline, psnr};
use crate::memory::{cosine_similarity, widen, EpisodicMemory, PcaTransform, RecordMetadata};
use crate::model::{CompositeModel, EpisodeTensor, Mode};
use crate::substrate::{RngStream, Scalar, Tensor};

/// A latent vector with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledLatent {
    pub vector: Vec<f32>,
    pub label: String,
}

impl LabeledLatent {
    pub fn new(vector: Vec<f32>, label: impl Into<String>) -> Self {
        LabeledLatent { vector, label: label.into() }
    }
}

/// Labels in order of first appearance.
fn label_order(items: &[LabeledLatent]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for it in items {
        if !out.contains(&it.label) {
            out.push(it.label.clone());
        }
    }
    out
}

fn fit_pca(items: &[LabeledLatent]) -> Result<PcaTransform> {
    PcaTransform::fit_class_means(items.iter().map(|i| (i.vector.as_slice(), i.label.as_str())), usize::MAX)
}

/// Mean pairwise cosine similarity between and within classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    /// `None` on the diagonal of a class with a single member.
    pub values: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.values[a][b]
    }

    /// Mean of the defined diagonal entries.
    pub fn mean_diagonal(&self) -> f64 {
        mean((0..self.labels.len()).filter_map(|i| self.values[i][i]))
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.labels.len();
        mean((0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).filter_map(|(i, j)| self.values[i][j]))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Entry `(a, b)` averages the cosine over all cross pairs of classes `a` and `b`; the diagonal
/// averages distinct intra-class pairs (self-pairs excluded). With `use_pca`, vectors are first
/// projected by a class-mean PCA fitted on the same items, keeping every supported component.
pub fn class_similarity_matrix(items: &[LabeledLatent], use_pca: bool) -> Result<SimilarityMatrix> {
    if items.is_empty() {
        return Err(contract!("similarity matrix of an empty latent set"));
    }
    let labels = label_order(items);
    let pca = if use_pca { Some(fit_pca(items)?) } else { None };
    let vecs: Vec<Vec<f64>> = items
        .iter()
        .map(|i| match &pca {
            Some(p) => p.apply(&widen(&i.vector)),
            None => Ok(widen(&i.vector)),
        })
        .collect::<Result<_>>()?;
    let class_of: Vec<usize> = items.iter().map(|i| labels.iter().position(|l| *l == i.label).unwrap()).collect();
    let c = labels.len();
    let mut sums = vec![vec![(0.0f64, 0usize); c]; c];
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let s = cosine_similarity(&vecs[i], &vecs[j])?;
            let (a, b) = (class_of[i], class_of[j]);
            sums[a][b].0 += s;
            sums[a][b].1 += 1;
            if a != b {
                sums[b][a].0 += s;
                sums[b][a].1 += 1;
            }
        }
    }
    let values = sums
        .into_iter()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    Ok(SimilarityMatrix { labels, values })
}

/// One query's ranked retrieval labels.
#[derive(Clone, Debug)]
pub struct RankedQuery {
    pub label: String,
    /// Labels of the retrieved records, best first.
    pub retrieved: Vec<String>,
    /// Number of memory records sharing the query's label.
    pub relevant_in_memory: usize,
}

/// Fraction of queries whose first result shares their label. Queries without results are
/// skipped with a warning.
pub fn precision_first_match(queries: &[RankedQuery]) -> f64 {
    let answered: Vec<&RankedQuery> = queries.iter().filter(|q| !q.retrieved.is_empty()).collect();
    if answered.len() < queries.len() {
        warn!("{} queries returned no results and were excluded", queries.len() - answered.len());
    }
    if answered.is_empty() {
        return 0.0;
    }
    answered.iter().filter(|q| q.retrieved[0] == q.label).count() as f64 / answered.len() as f64
}

/// Truncated average precision `Σ_{j≤k} rel_j · P@j / min(k, #relevant)`, averaged over
/// queries. A query with no relevant record in memory scores 0 (with a warning).
pub fn map_at_k(queries: &[RankedQuery], k: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let mut no_relevant = 0;
    let total: f64 = queries
        .iter()
        .map(|q| {
            if q.relevant_in_memory == 0 {
                no_relevant += 1;
                return 0.0;
            }
            let (mut hits, mut sum) = (0usize, 0.0);
            for (j, l) in q.retrieved.iter().take(k).enumerate() {
                if *l == q.label {
                    hits += 1;
                    sum += hits as f64 / (j + 1) as f64;
                }
            }
            sum / k.min(q.relevant_in_memory) as f64
        })
        .sum();
    if no_relevant > 0 {
        warn!("{no_relevant} queries had no relevant record in memory; their AP counts as 0");
    }
    total / queries.len() as f64
}

pub fn map_at_3(queries: &[RankedQuery]) -> f64 {
    map_at_k(queries, 3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub folds: usize,
    /// Fraction of all episodes used as memory in each fold; at most `1 − 1/folds`.
    pub memory_fraction: f64,
    pub top_n: usize,
    pub seed: u64,
    pub use_pca: bool,
    /// Components kept by the per-fold PCA (capped by the class count).
    pub pca_components: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { folds: 5, memory_fraction: 0.8, top_n: 3, seed: 0, use_pca: false, pca_components: usize::MAX }
    }
}

impl RetrievalConfig {
    pub fn echo(&self) -> Vec<(String, String)> {
        let comps = if self.pca_components == usize::MAX { "max".to_string() } else { self.pca_components.to_string() };
        vec![
            ("folds".into(), self.folds.to_string()),
            ("memory_fraction".into(), self.memory_fraction.to_string()),
            ("top_n".into(), self.top_n.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("use_pca".into(), self.use_pca.to_string()),
            ("pca_components".into(), comps),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub queries: usize,
    pub memory_size: usize,
    pub precision: f64,
    pub map_at_3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub config: RetrievalConfig,
    pub folds: Vec<FoldResult>,
    pub mean_precision: f64,
    pub std_precision: f64,
    pub mean_map: f64,
    pub std_map: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Shuffles once from `cfg.seed`, splits into `cfg.folds` disjoint query partitions and, for each
/// fold, queries a memory built from the remaining episodes (truncated to `memory_fraction` of
/// all episodes). PCA, when enabled, is fitted on the memory side of each fold only.
/// Queries from classes with a single member are excluded with a warning.
pub fn retrieval_benchmark(items: &[LabeledLatent], cfg: &RetrievalConfig) -> Result<RetrievalReport> {
    if cfg.folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {}", cfg.folds)));
    }
    if cfg.top_n == 0 {
        return Err(Error::Config("top_n must be positive".into()));
    }
    let max_fraction = 1.0 - 1.0 / cfg.folds as f64;
    if !(cfg.memory_fraction > 0.0 && cfg.memory_fraction <= max_fraction + 1e-9) {
        return Err(Error::Config(format!(
            "memory fraction {} must lie in (0, {max_fraction}] for {} folds",
            cfg.memory_fraction, cfg.folds
        )));
    }
    let n = items.len();
    if n < cfg.folds {
        return Err(Error::InsufficientData(format!("{n} episodes cannot fill {} folds", cfg.folds)));
    }
    let dim = items[0].vector.len();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for it in items {
        if it.vector.len() != dim {
            return Err(contract!("latent of length {} among latents of length {dim}", it.vector.len()));
        }
        *counts.entry(it.label.as_str()).or_default() += 1;
    }
    let singletons: Vec<&str> = counts.iter().filter(|(_, &c)| c < 2).map(|(l, _)| *l).collect();
    if !singletons.is_empty() {
        warn!("classes with a single member are excluded from scoring: {singletons:?}");
    }

    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(cfg.seed).shuffle(&mut order);
    let memory_cap = ((cfg.memory_fraction * n as f64).round() as usize).max(1);
    let mut folds = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let (lo, hi) = (f * n / cfg.folds, (f + 1) * n / cfg.folds);
        let queries = &order[lo..hi];
        let memory_idx: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().take(memory_cap).collect();
        let mut memory = EpisodicMemory::new(dim);
        for &i in &memory_idx {
            memory.insert(&items[i].vector, RecordMetadata::labeled(items[i].label.clone(), format!("item-{i}")))?;
        }
        if cfg.use_pca {
            let pca = memory.fit_class_mean_pca(cfg.pca_components)?;
            memory.set_pca(Some(pca))?;
        }
        let mut ranked = Vec::new();
        for &q in queries {
            let item = &items[q];
            if counts[item.label.as_str()] < 2 {
                continue;
            }
            let hits = memory.query(&item.vector, cfg.top_n, cfg.use_pca)?;
            ranked.push(RankedQuery {
                label: item.label.clone(),
                retrieved: hits.into_iter().map(|h| h.label.unwrap_or_default()).collect(),
                relevant_in_memory: memory_idx.iter().filter(|&&i| items[i].label == item.label).count(),
            });
        }
        folds.push(FoldResult {
            fold: f,
            queries: ranked.len(),
            memory_size: memory.len(),
            precision: precision_first_match(&ranked),
            map_at_3: map_at_3(&ranked),
        });
    }
    let (mean_precision, std_precision) = mean_std(&folds.iter().map(|f| f.precision).collect::<Vec<_>>());
    let (mean_map, std_map) = mean_std(&folds.iter().map(|f| f.map_at_3).collect::<Vec<_>>());
    Ok(RetrievalReport { config: cfg.clone(), folds, mean_precision, std_precision, mean_map, std_map })
}

/// Produces reconstructed and predicted frames for an episode.
pub trait FramePredictor {
    fn enc_len(&self) -> usize;

    /// Returns `n` frames: reconstructions of positions `1..=k`, then predictions of `k+1..=n`.
    fn predict(&self, episode: &EpisodeTensor) -> Result<Vec<Tensor<f32>>>;
}

impl<T: Scalar> FramePredictor for CompositeModel<T> {
    fn enc_len(&self) -> usize {
        self.config().enc_len
    }

    /// Uses only the first `k` frames of `episode`.
    fn predict(&self, episode: &EpisodeTensor) -> Result<Vec<Tensor<f32>>> {
        let mut rng = RngStream::new(0);
        let k = self.config().enc_len;
        if episode.len() < k {
            return Err(contract!("episode has {} frames, encoder needs {k}", episode.len()));
        }
        let v = self.encode(episode.encoder_part(k), Mode::Eval, &mut rng)?;
        let mut out = self.decode_reconstruct(&v, Mode::Eval, &mut rng)?;
        out.extend(self.decode_predict(&v, Mode::Eval, &mut rng)?);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-position PSNR statistics (sample standard deviation) over a set of episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PsnrCurve {
    /// Positions `0..enc_len` are reconstructions, the rest predictions.
    pub enc_len: usize,
    pub model: Vec<MeanStd>,
    pub baseline: Vec<MeanStd>,
}

impl PsnrCurve {
    pub fn positions(&self) -> usize {
        self.model.len()
    }

    fn avg(v: &[MeanStd]) -> f64 {
        mean(v.iter().map(|m| m.mean))
    }

    pub fn model_reconstruction_mean(&self) -> f64 {
        Self::avg(&self.model[..self.enc_len])
    }

    pub fn model_prediction_mean(&self) -> f64 {
        Self::avg(&self.model[self.enc_len..])
    }

    pub fn baseline_reconstruction_mean(&self) -> f64 {
        Self::avg(&self.baseline[..self.enc_len])
    }

    pub fn baseline_prediction_mean(&self) -> f64 {
        Self::avg(&self.baseline[self.enc_len..])
    }
}

/// PSNR of `predictor`'s outputs and of the mean-of-input-frames baseline at every position.
pub fn psnr_curves(predictor: &dyn FramePredictor, episodes: &[EpisodeTensor]) -> Result<PsnrCurve> {
    let k = predictor.enc_len();
    let n = episodes.first().map(|e| e.len()).ok_or_else(|| contract!("PSNR curves need at least one episode"))?;
    if k == 0 || k >= n {
        return Err(contract!("encoder length {k} does not fit episodes of {n} frames"));
    }
    let mut model = vec![Vec::with_capacity(episodes.len()); n];
    let mut base = vec![Vec::with_capacity(episodes.len()); n];
    for (e, ep) in episodes.iter().enumerate() {
        if ep.len() != n {
            return Err(contract!("episode {e} has {} frames, expected {n}", ep.len()));
        }
        let ys = predictor.predict(ep)?;
        if ys.len() != n {
            return Err(contract!("predictor returned {} frames for a {n}-frame episode", ys.len()));
        }
        let baseline = mean_frame_baseline(&ep.frames[..k].iter().collect::<Vec<_>>())?;
        for j in 0..n {
            model[j].push(psnr(&ys[j], &ep.frames[j])?);
            base[j].push(psnr(&baseline, &ep.frames[j])?);
        }
    }
    let stats = |v: &Vec<f64>| {
        let (mean, std) = mean_std(v);
        MeanStd { mean, std }
    };
    Ok(PsnrCurve { enc_len: k, model: model.iter().map(stats).collect(), baseline: base.iter().map(stats).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    /// 8-bit grayscale PGM with a sidecar `.txt` describing the normalization.
    PgmHeatmap,
}

/// Something [`export_report`] can write.
pub trait Exportable {
    fn csv_header(&self) -> Vec<String>;
    fn csv_rows(&self) -> Vec<Vec<String>>;

    /// Row-major grid for a heatmap, if the artifact has one.
    fn heatmap(&self) -> Option<(usize, usize, Vec<Option<f64>>)> {
        None
    }

    fn heatmap_labels(&self) -> Vec<String> {
        Vec::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Exportable for SimilarityMatrix {
    fn csv_header(&self) -> Vec<String> {
        std::iter::once("label".to_string()).chain(self.labels.iter().cloned()).collect()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.labels
            .iter()
            .zip(&self.values)
            .map(|(l, row)| std::iter::once(l.clone()).chain(row.iter().map(|v| opt(*v))).collect())
            .collect()
    }

    fn heatmap(&self) -> Option<(usize, usize, Vec<Option<f64>>)> {
        let n = self.labels.len();
        Some((n, n, self.values.iter().flatten().copied().collect()))
    }

    fn heatmap_labels(&self) -> Vec<String> {
        self.labels.clone()
    }
}

impl Exportable for RetrievalReport {
    fn csv_header(&self) -> Vec<String> {
        ["fold", "queries", "memory_size", "precision", "map_at_3"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .folds
            .iter()
            .map(|f| vec![f.fold.to_string(), f.queries.to_string(), f.memory_size.to_string(), f.precision.to_string(), f.map_at_3.to_string()])
            .collect();
        if !self.folds.is_empty() {
            rows.push(vec!["mean".into(), String::new(), String::new(), self.mean_precision.to_string(), self.mean_map.to_string()]);
            rows.push(vec!["std".into(), String::new(), String::new(), self.std_precision.to_string(), self.std_map.to_string()]);
        }
        rows
    }
}

/// Side-by-side summary of several benchmark runs (e.g. without and with PCA).
pub struct RetrievalTable<'a> {
    pub rows: Vec<(String, &'a RetrievalReport)>,
}

impl Exportable for RetrievalTable<'_> {
    fn csv_header(&self) -> Vec<String> {
        ["method", "precision_mean", "precision_std", "map_at_3_mean", "map_at_3_std"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(name, r)| {
                vec![name.clone(), r.mean_precision.to_string(), r.std_precision.to_string(), r.mean_map.to_string(), r.std_map.to_string()]
            })
            .collect()
    }
}

impl Exportable for PsnrCurve {
    fn csv_header(&self) -> Vec<String> {
        ["position", "role", "model_mean", "model_std", "baseline_mean", "baseline_std"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.model
            .iter()
            .zip(&self.baseline)
            .enumerate()
            .map(|(j, (m, b))| {
                let role = if j < self.enc_len { "reconstruction" } else { "prediction" };
                vec![(j + 1).to_string(), role.into(), m.mean.to_string(), m.std.to_string(), b.mean.to_string(), b.std.to_string()]
            })
            .collect()
    }
}

/// CSV text with the configuration echo as leading `# key=value` comment lines.
pub fn to_csv(item: &dyn Exportable, echo: &[(String, String)]) -> Result<String> {
    let mut out = String::new();
    for (k, v) in echo {
        let _ = writeln!(out, "# {k}={v}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("csv encoding failed: {e}"));
    w.write_record(item.csv_header()).map_err(err)?;
    for row in item.csv_rows() {
        w.write_record(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv encoding failed: {e}")))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is UTF-8"));
    Ok(out)
}

/// Min-max scales defined cells to bytes `round(255 (v − min) / (max − min))`; undefined
/// cells and constant grids map to 0.
pub fn heatmap_bytes(cells: &[Option<f64>]) -> (Vec<u8>, f64, f64) {
    let defined: Vec<f64> = cells.iter().flatten().copied().collect();
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bytes = cells
        .iter()
        .map(|c| match c {
            Some(v) if hi > lo => (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8,
            _ => 0,
        })
        .collect();
    (bytes, lo, hi)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes `item` to `path`. Heatmaps also write `<path>.txt` with the normalization range,
/// the row/column labels and the configuration echo.
pub fn export_report(item: &dyn Exportable, path: &Path, format: ExportFormat, echo: &[(String, String)]) -> Result<()> {
    match format {
        ExportFormat::Csv => write_atomic(path, to_csv(item, echo)?.as_bytes()),
        ExportFormat::PgmHeatmap => {
            let (w, h, cells) = item.heatmap().ok_or_else(|| contract!("this artifact has no heatmap form"))?;
            let (bytes, lo, hi) = heatmap_bytes(&cells);
            let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
            pgm.extend_from_slice(&bytes);
            write_atomic(path, &pgm)?;
            let mut note = format!(
                "normalization: byte = round(255 * (value - min) / (max - min)); undefined cells are 0\nmin={lo}\nmax={hi}\nlabels={}\n",
                item.heatmap_labels().join(",")
            );
            for (k, v) in echo {
                let _ = writeln!(note, "{k}={v}");
            }
            write_atomic(&sidecar_path(path), note.as_bytes())
        }
    }
}
