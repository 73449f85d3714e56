//! Deterministic moving-shapes action corpus.
//!
//! Each episode renders 1–2 hard-edged shapes (square, circle, triangle) over a flat tinted
//! background, then keeps `n` equally spaced frames of a longer raw clip. Paired classes are
//! exact frame transforms of their partners: slide-left mirrors slide-right, recede and diverge
//! play approach and converge backwards. With the default 19 raw frames and `n = 10` the kept
//! indices are `0, 2, …, 18`, so time reversal commutes with sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::model::EpisodeTensor;
use crate::substrate::{RngStream, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

/// `floor(j (total − 1) / (n − 1))` for `j = 0..n`.
pub fn equally_spaced_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || total < n {
        return Err(contract!("cannot pick {n} frames out of {total}"));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n).map(|j| j * (total - 1) / (n - 1)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of half-size `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // apex up, base at the bottom
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Right,
    Up,
    Down,
}

/// Parametric trajectory of the shapes over the episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionProgram {
    /// One shape translating by the sampled displacement.
    Slide(Direction),
    /// One shape growing from a small to a large size around a fixed centre.
    Grow,
    /// Two shapes moving towards each other horizontally until they nearly touch.
    Converge,
}

/// Frame-level transform applied after rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameTransform {
    Identity,
    Mirror,
    Reverse,
}

/// Sampling ranges for the per-episode random parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRanges {
    /// Shape half-size in pixels.
    pub radius: (f64, f64),
    /// Total displacement over the raw clip, in pixels.
    pub displacement: (f64, f64),
    /// Background base shade.
    pub background: (f64, f64),
    /// Per-channel deviation added to the background shade.
    pub tint: f64,
    /// Per-channel shape colour range.
    pub color: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges { radius: (3.0, 5.0), displacement: (12.0, 18.0), background: (0.05, 0.35), tint: 0.05, color: (0.55, 0.95) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionClassSpec {
    pub id: usize,
    pub name: String,
    pub program: MotionProgram,
    pub transform: FrameTransform,
    pub ranges: ParamRanges,
}

impl ActionClassSpec {
    pub fn new(id: usize, name: &str, program: MotionProgram, transform: FrameTransform) -> Self {
        ActionClassSpec { id, name: name.to_string(), program, transform, ranges: ParamRanges::default() }
    }
}

/// The eight default classes in label order.
pub fn default_classes() -> Vec<ActionClassSpec> {
    use FrameTransform::*;
    use MotionProgram::*;
    vec![
        ActionClassSpec::new(0, "slide-right", Slide(Direction::Right), Identity),
        ActionClassSpec::new(1, "slide-left", Slide(Direction::Right), Mirror),
        ActionClassSpec::new(2, "slide-up", Slide(Direction::Up), Identity),
        ActionClassSpec::new(3, "slide-down", Slide(Direction::Down), Identity),
        ActionClassSpec::new(4, "approach", Grow, Identity),
        ActionClassSpec::new(5, "recede", Grow, Reverse),
        ActionClassSpec::new(6, "converge", Converge, Identity),
        ActionClassSpec::new(7, "diverge", Converge, Reverse),
    ]
}

/// Rendering geometry shared by every class.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub frame_size: usize,
    pub channels: usize,
    pub seq_len: usize,
    pub raw_frames: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { frame_size: 32, channels: 3, seq_len: 10, raw_frames: 19 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    r: f64,
}

struct Track {
    kind: ShapeKind,
    color: [f64; 3],
    /// Centre and half-size at the first and last raw frame.
    start: (f64, f64, f64),
    end: (f64, f64, f64),
}

impl Track {
    fn at(&self, s: f64) -> Placed {
        let lerp = |a: f64, b: f64| a + (b - a) * s;
        Placed {
            kind: self.kind,
            color: self.color,
            cx: lerp(self.start.0, self.end.0),
            cy: lerp(self.start.1, self.end.1),
            r: lerp(self.start.2, self.end.2),
        }
    }
}

fn draw_shape(rng: &mut RngStream, ranges: &ParamRanges) -> (ShapeKind, [f64; 3]) {
    let kind = ShapeKind::ALL[rng.below(3)];
    let color = [0, 1, 2].map(|_| rng.uniform_range(ranges.color.0, ranges.color.1));
    (kind, color)
}

fn plan(spec: &ActionClassSpec, size: f64, rng: &mut RngStream) -> Vec<Track> {
    let rg = &spec.ranges;
    // Shape bounding boxes stay within [1, size − 1] so covered pixels keep a 1-pixel margin.
    let (lo, hi) = (1.0, size - 1.0);
    match spec.program {
        MotionProgram::Slide(dir) => {
            let (kind, color) = draw_shape(rng, rg);
            let r = rng.uniform_range(rg.radius.0, rg.radius.1);
            let d = rng.uniform_range(rg.displacement.0, rg.displacement.1);
            let along = rng.uniform_range(lo + r, (hi - r - d).max(lo + r));
            let across = rng.uniform_range(lo + r, hi - r);
            let (start, end) = match dir {
                Direction::Right => ((along, across, r), (along + d, across, r)),
                Direction::Down => ((across, along, r), (across, along + d, r)),
                Direction::Up => ((across, size - along, r), (across, size - along - d, r)),
            };
            vec![Track { kind, color, start, end }]
        }
        MotionProgram::Grow => {
            let (kind, color) = draw_shape(rng, rg);
            let r0 = rng.uniform_range(1.5, 2.5);
            let r1 = r0 + rng.uniform_range(rg.displacement.0, rg.displacement.1) / 3.0;
            let cx = rng.uniform_range(lo + r1, hi - r1);
            let cy = rng.uniform_range(lo + r1, hi - r1);
            vec![Track { kind, color, start: (cx, cy, r0), end: (cx, cy, r1) }]
        }
        MotionProgram::Converge => {
            let r = rng.uniform_range(rg.radius.0, rg.radius.1.min(4.0));
            let row = rng.uniform_range(lo + r + 2.0, hi - r - 2.0);
            let left_x = lo + r + rng.uniform_range(0.0, 2.0);
            let right_x = hi - r - rng.uniform_range(0.0, 2.0);
            let gap = 2.0 * r + 1.0 + rng.uniform_range(0.0, 2.0);
            let step = ((right_x - left_x - gap) / 2.0).max(0.0);
            let mut tracks = Vec::new();
            for (x0, x1) in [(left_x, left_x + step), (right_x, right_x - step)] {
                let (kind, color) = draw_shape(rng, rg);
                let y = row + rng.uniform_range(-2.0, 2.0);
                tracks.push(Track { kind, color, start: (x0, y, r), end: (x1, y, r) });
            }
            tracks
        }
    }
}

fn rasterize(frame: &mut [f32], size: usize, channels: usize, shape: &Placed) {
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - shape.cx;
            let dy = py as f64 + 0.5 - shape.cy;
            if shape.kind.covers(dx, dy, shape.r) {
                for c in 0..channels {
                    frame[c * plane + py * size + px] = shape.color[c % 3] as f32;
                }
            }
        }
    }
}

/// Renders one episode of `spec`; a pure function of `(spec, cfg, seed)`.
pub fn render_episode(spec: &ActionClassSpec, cfg: &RenderConfig, seed: u64) -> Result<EpisodeTensor> {
    let indices = equally_spaced_indices(cfg.raw_frames, cfg.seq_len)?;
    let size = cfg.frame_size;
    if size < 8 {
        return Err(Error::Generation(format!("frame size {size} is too small")));
    }
    let mut rng = RngStream::new(seed);
    let shade = rng.uniform_range(spec.ranges.background.0, spec.ranges.background.1);
    let background = [0, 1, 2].map(|_| (shade + rng.uniform_range(-spec.ranges.tint, spec.ranges.tint)).clamp(0.0, 1.0));
    let tracks = plan(spec, size as f64, &mut rng);

    let last = (cfg.raw_frames - 1).max(1) as f64;
    let mut frames = Vec::with_capacity(cfg.seq_len);
    for &t in &indices {
        let s = t as f64 / last;
        let mut data = vec![0f32; cfg.channels * size * size];
        for (c, chunk) in data.chunks_mut(size * size).enumerate() {
            chunk.fill(background[c % 3] as f32);
        }
        for track in &tracks {
            let p = track.at(s);
            if p.cx - p.r < 1.0 || p.cy - p.r < 1.0 || p.cx + p.r > size as f64 - 1.0 || p.cy + p.r > size as f64 - 1.0 {
                return Err(Error::Generation(format!(
                    "class `{}` moves a shape outside the canvas at raw frame {t} (centre ({:.2},{:.2}), half-size {:.2})",
                    spec.name, p.cx, p.cy, p.r
                )));
            }
            rasterize(&mut data, size, cfg.channels, &p);
        }
        frames.push(Tensor::new(&[cfg.channels, size, size], data)?);
    }
    let episode = EpisodeTensor::new(frames)?;
    Ok(match spec.transform {
        FrameTransform::Identity => episode,
        FrameTransform::Mirror => episode.flip_horizontal(),
        FrameTransform::Reverse => EpisodeTensor { frames: episode.frames.into_iter().rev().collect() },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub render: RenderConfig,
    pub classes: Vec<ActionClassSpec>,
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl Default for DatasetConfig {
    /// Eight classes, 50 training and 10 validation episodes each, 32×32 RGB, 10 frames.
    fn default() -> Self {
        DatasetConfig { render: RenderConfig::default(), classes: default_classes(), train_per_class: 50, val_per_class: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeEntry {
    pub id: u64,
    pub split: Split,
    pub class: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub render: RenderConfig,
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub episodes: Vec<EpisodeEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.episodes.iter().filter(|e| e.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let r = &self.render;
        let mut s = format!(
            "format_version={}\nmaster_seed={}\nframe_size={}\nchannels={}\nseq_len={}\nraw_frames={}\nclasses={}\ntrain_per_class={}\nval_per_class={}\n# episode=id split class seed file\n",
            self.format_version,
            self.master_seed,
            r.frame_size,
            r.channels,
            r.seq_len,
            r.raw_frames,
            self.classes.join(","),
            self.train_per_class,
            self.val_per_class
        );
        for e in &self.episodes {
            s.push_str(&format!("episode={} {} {} {} {}\n", e.id, e.split.name(), e.class, e.seed, e.file));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut m = DatasetManifest {
            format_version: 0,
            master_seed: 0,
            render: RenderConfig::default(),
            classes: Vec::new(),
            train_per_class: 0,
            val_per_class: 0,
            episodes: Vec::new(),
        };
        fn num<N: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<N> {
            v.parse().map_err(|_| Error::format(path, format!("bad value `{v}` for `{key}`")))
        }
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line `{line}` lacks '='")))?;
            match k {
                "format_version" => m.format_version = num(v, k, path)?,
                "master_seed" => m.master_seed = num(v, k, path)?,
                "frame_size" => m.render.frame_size = num(v, k, path)?,
                "channels" => m.render.channels = num(v, k, path)?,
                "seq_len" => m.render.seq_len = num(v, k, path)?,
                "raw_frames" => m.render.raw_frames = num(v, k, path)?,
                "classes" => m.classes = v.split(',').map(str::to_string).collect(),
                "train_per_class" => m.train_per_class = num(v, k, path)?,
                "val_per_class" => m.val_per_class = num(v, k, path)?,
                "episode" => {
                    let f: Vec<&str> = v.split_whitespace().collect();
                    if f.len() != 5 {
                        return Err(bad(format!("episode line `{v}` needs 5 fields")));
                    }
                    let split = match f[1] {
                        "train" => Split::Train,
                        "val" => Split::Validation,
                        other => return Err(bad(format!("unknown split `{other}`"))),
                    };
                    m.episodes.push(EpisodeEntry {
                        id: num(f[0], "id", path)?,
                        split,
                        class: num(f[2], "class", path)?,
                        seed: num(f[3], "seed", path)?,
                        file: f[4].to_string(),
                    });
                }
                _ => return Err(bad(format!("unknown manifest key `{k}`"))),
            }
        }
        if m.format_version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }
}

/// A rendered episode with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEpisode {
    pub id: u64,
    pub class: usize,
    pub split: Split,
    pub episode: EpisodeTensor,
}

fn check_dataset_config(cfg: &DatasetConfig) -> Result<()> {
    if cfg.classes.len() < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes.len())));
    }
    if cfg.train_per_class == 0 || cfg.val_per_class == 0 {
        return Err(Error::Config("per-class episode counts must be at least 1".into()));
    }
    Ok(())
}

/// Builds the manifest: ids in split-major, then round-robin class order; distinct seeds.
pub fn plan_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<DatasetManifest> {
    check_dataset_config(cfg)?;
    let mut seeds = RngStream::new(master_seed);
    let mut used = HashSet::new();
    let mut episodes = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Validation, cfg.val_per_class)] {
        for _ in 0..per_class {
            for class in 0..cfg.classes.len() {
                let seed = loop {
                    let s = seeds.next_u64();
                    if used.insert(s) {
                        break s;
                    }
                };
                let id = episodes.len() as u64;
                episodes.push(EpisodeEntry { id, split, class, seed, file: format!("ep-{id:06}.bin") });
            }
        }
    }
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        master_seed,
        render: cfg.render.clone(),
        classes: cfg.classes.iter().map(|c| c.name.clone()).collect(),
        train_per_class: cfg.train_per_class,
        val_per_class: cfg.val_per_class,
        episodes,
    })
}

/// Renders the whole corpus in memory.
pub fn generate_corpus(cfg: &DatasetConfig, master_seed: u64) -> Result<(DatasetManifest, Vec<LabeledEpisode>)> {
    let manifest = plan_dataset(cfg, master_seed)?;
    let episodes = manifest
        .episodes
        .iter()
        .map(|e| {
            Ok(LabeledEpisode {
                id: e.id,
                class: e.class,
                split: e.split,
                episode: render_episode(&cfg.classes[e.class], &cfg.render, e.seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}

/// Renders the corpus into `out_dir`: one binary file per episode, then `manifest.txt`.
/// The manifest is written last, so a failed run never leaves a manifest behind.
pub fn generate_dataset(cfg: &DatasetConfig, master_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let (manifest, episodes) = generate_corpus(cfg, master_seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (entry, ep) in manifest.episodes.iter().zip(&episodes) {
        write_episode_file(&out_dir.join(&entry.file), ep.id, ep.class as u32, &ep.episode)?;
    }
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Reads a corpus written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledEpisode>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read_file(&path)?).map_err(|_| Error::format(&path, "manifest is not UTF-8"))?;
    let manifest = DatasetManifest::from_text(&text, &path)?;
    let mut out = Vec::with_capacity(manifest.episodes.len());
    for e in &manifest.episodes {
        let (id, label, episode) = read_episode_file(&dir.join(&e.file))?;
        if id != e.id || label as usize != e.class {
            return Err(Error::format(dir.join(&e.file), format!("header (id {id}, label {label}) disagrees with manifest")));
        }
        out.push(LabeledEpisode { id, class: e.class, split: e.split, episode });
    }
    Ok((manifest, out))
}

/// Episode file: `id u64 | label u32 | n, C, H, W u32 | f32 pixels`, little-endian, frame-major.
pub fn write_episode_file(path: &Path, id: u64, label: u32, episode: &EpisodeTensor) -> Result<()> {
    let shape = episode.frames.first().map(|f| f.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
    let mut w = Writer::default();
    w.u64(id);
    w.u32(label);
    w.u32(episode.len() as u32);
    for &d in &shape {
        w.u32(d as u32);
    }
    for f in &episode.frames {
        if f.shape() != shape.as_slice() {
            return Err(contract!("episode frames have inconsistent shapes"));
        }
        w.f32s(f.data());
    }
    write_atomic(path, &w.buf)
}

pub fn read_episode_file(path: &Path) -> Result<(u64, u32, EpisodeTensor)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    let id = r.u64("id")?;
    let label = r.u32("label")?;
    let dims: Vec<usize> = (0..4).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<_>>()?;
    let per = dims[1] * dims[2] * dims[3];
    if per == 0 || dims[0] == 0 {
        return Err(r.fail("empty episode"));
    }
    let mut frames = Vec::with_capacity(dims[0]);
    for _ in 0..dims[0] {
        let data = r.f32s(per, "frame data")?;
        frames.push(Tensor::new(&dims[1..], data)?);
    }
    r.finish()?;
    let ep = EpisodeTensor::new(frames).map_err(|e| r.fail(e.to_string()))?;
    Ok((id, label, ep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str) -> ActionClassSpec {
        default_classes().into_iter().find(|c| c.name == name).unwrap()
    }

    /// Column centroid of pixels that differ from the top-left (background) pixel.
    fn centroid(frame: &Tensor<f32>) -> (f64, f64) {
        let (_, h, w) = frame.dims3().unwrap();
        let d = frame.data();
        let bg = d[0];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if d[y * w + x] != bg {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn spaced_indices() {
        assert_eq!(equally_spaced_indices(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(equally_spaced_indices(100, 10).unwrap(), vec![0, 11, 22, 33, 44, 55, 66, 77, 88, 99]);
        assert_eq!(equally_spaced_indices(19, 10).unwrap(), (0..10).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(equally_spaced_indices(5, 1).unwrap(), vec![0]);
        assert!(equally_spaced_indices(3, 4).is_err());
        for total in 2..40 {
            for n in 2..=total {
                let idx = equally_spaced_indices(total, n).unwrap();
                assert_eq!((idx[0], idx[n - 1]), (0, total - 1));
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let cfg = RenderConfig::default();
        for c in default_classes() {
            for seed in 0..20 {
                let a = render_episode(&c, &cfg, seed).unwrap();
                assert_eq!(a, render_episode(&c, &cfg, seed).unwrap());
                assert_eq!(a.len(), 10);
                assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
            }
        }
    }

    #[test]
    fn slide_right_centroid_moves_right() {
        let cfg = RenderConfig::default();
        for seed in 0..50 {
            let ep = render_episode(&spec("slide-right"), &cfg, seed).unwrap();
            let xs: Vec<f64> = ep.frames.iter().map(|f| centroid(f).0).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {xs:?}");
            let ep = render_episode(&spec("slide-up"), &cfg, seed).unwrap();
            let ys: Vec<f64> = ep.frames.iter().map(|f| centroid(f).1).collect();
            assert!(ys.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {ys:?}");
        }
    }

    #[test]
    fn paired_classes_are_frame_transforms() {
        let cfg = RenderConfig::default();
        for seed in 0..10 {
            let right = render_episode(&spec("slide-right"), &cfg, seed).unwrap();
            assert_eq!(render_episode(&spec("slide-left"), &cfg, seed).unwrap(), right.flip_horizontal());
            for (a, b) in [("approach", "recede"), ("converge", "diverge")] {
                let fwd = render_episode(&spec(a), &cfg, seed).unwrap();
                let mut rev = render_episode(&spec(b), &cfg, seed).unwrap().frames;
                rev.reverse();
                assert_eq!(rev, fwd.frames);
            }
        }
    }

    #[test]
    fn zero_speed_is_static() {
        let mut s = spec("slide-right");
        s.ranges.displacement = (0.0, 0.0);
        let ep = render_episode(&s, &RenderConfig::default(), 3).unwrap();
        assert!(ep.frames.iter().all(|f| f == &ep.frames[0]));
    }

    #[test]
    fn leaving_the_canvas_is_a_generation_error() {
        let mut s = spec("slide-right");
        s.ranges.displacement = (40.0, 40.0);
        assert!(matches!(render_episode(&s, &RenderConfig::default(), 1), Err(Error::Generation(_))));
    }

    #[test]
    fn default_corpus_is_balanced() {
        let m = plan_dataset(&DatasetConfig::default(), 7).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Validation)), (400, 80));
        for split in [Split::Train, Split::Validation] {
            for c in 0..8 {
                let n = m.episodes.iter().filter(|e| e.split == split && e.class == c).count();
                assert_eq!(n, if split == Split::Train { 50 } else { 10 });
            }
        }
        let seeds: HashSet<u64> = m.episodes.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 480);
        let parsed = DatasetManifest::from_text(&m.to_text(), Path::new("manifest.txt")).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn bad_dataset_configs() {
        let one = DatasetConfig { classes: default_classes()[..1].to_vec(), ..Default::default() };
        assert!(plan_dataset(&one, 0).is_err());
        let empty = DatasetConfig { val_per_class: 0, ..Default::default() };
        assert!(plan_dataset(&empty, 0).is_err());
    }

    #[test]
    fn episode_file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let ep = render_episode(&spec("converge"), &RenderConfig::default(), 9).unwrap();
        write_episode_file(&p, 42, 6, &ep).unwrap();
        let (id, label, back) = read_episode_file(&p).unwrap();
        assert_eq!((id, label), (42, 6));
        assert_eq!(back, ep);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_episode_file(&p).is_err());
    }
}
