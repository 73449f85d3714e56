use std::fs;
use std::io::Write as _;
use std::path::Path;

use epimem::eval::{
    class_similarity_matrix, export_report, psnr_curves, retrieval_benchmark, to_csv, ExportFormat, Exportable,
    LabeledLatent, RetrievalTable,
};
use epimem::memory::{EpisodicMemory, RecordMetadata};
use epimem::model::{fit, load_checkpoint, CompositeModel, EpisodeTensor, Mode};
use epimem::substrate::{RngStream, Tensor};
use epimem::synthetic::{generate_dataset, load_dataset, read_episode_file, DatasetManifest, LabeledEpisode, Split};
use epimem::{Error, Result};
use log::info;

use crate::config::RunConfig;
use crate::{Command, LatentSource, SplitArg};

pub fn run(cmd: Command, mut cfg: RunConfig) -> Result<()> {
    let inv = invocation(&cmd);
    cfg.invocation = inv;
    match cmd {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Train { data, out, epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            train(&cfg, &data, &out)
        }
        Command::Encode { checkpoint, data, episode, split, out } => {
            let model = load_model(&cfg, &checkpoint)?;
            let items = match (data, episode) {
                (Some(dir), None) => encode_corpus(&model, &dir, split)?,
                (None, Some(path)) => vec![encode_file(&model, &path, None)?],
                _ => return Err(Error::Config("encode needs exactly one of --data or --episode".into())),
            };
            let csv = latents_csv(&items, &cfg)?;
            match out {
                Some(path) => write_file(&path, csv.as_bytes()),
                None => print_stdout(&csv),
            }
        }
        Command::MemInsert { memory, checkpoint, data, episode, label, split, pca } => {
            let model = load_model(&cfg, &checkpoint)?;
            let items = match (data, episode) {
                (Some(dir), None) => encode_corpus(&model, &dir, split)?,
                (None, Some(path)) => vec![encode_file(&model, &path, label)?],
                _ => return Err(Error::Config("mem-insert needs exactly one of --data or --episode".into())),
            };
            mem_insert(&model, &memory, items, pca)
        }
        Command::Query { memory, episode, checkpoint, top, pca, static_scene } => {
            let checkpoint = checkpoint.ok_or_else(|| Error::Config("query needs --checkpoint to encode the episode".into()))?;
            let model = load_model(&cfg, &checkpoint)?;
            let (_, _, ep) = read_episode_file(&episode)?;
            let v = if static_scene {
                model.encode_static_scene(&ep.frames[0])?.values
            } else {
                encode_episode(&model, &ep)?.vector
            };
            let mem = EpisodicMemory::load(&memory)?;
            let hits = mem.query(&v, top.unwrap_or(cfg.top_n), pca)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| Error::Config(format!("csv encoding failed: {e}"));
            w.write_record(["rank", "id", "similarity", "label"]).map_err(err)?;
            for (rank, h) in hits.iter().enumerate() {
                let row = [(rank + 1).to_string(), h.id.to_string(), h.similarity.to_string(), h.label.clone().unwrap_or_default()];
                w.write_record(row).map_err(err)?;
            }
            print_stdout(&String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?).expect("utf-8"))
        }
        Command::SimMatrix { source, pca, out, heatmap } => {
            let items = latent_items(&cfg, &source)?;
            let m = class_similarity_matrix(&items, pca)?;
            info!("mean diagonal {:.4}, mean off-diagonal {:.4}", m.mean_diagonal(), m.mean_off_diagonal());
            let mut echo = cfg.echo();
            echo.push(("pca".into(), pca.to_string()));
            export_report(&m, &out, ExportFormat::Csv, &echo)?;
            if let Some(h) = heatmap {
                export_report(&m, &h, ExportFormat::PgmHeatmap, &echo)?;
            }
            Ok(())
        }
        Command::EvalRetrieval { source, out } => {
            let items = latent_items(&cfg, &source)?;
            create_dir(&out)?;
            let plain = retrieval_benchmark(&items, &cfg.retrieval(false))?;
            let with_pca = retrieval_benchmark(&items, &cfg.retrieval(true))?;
            let echo = cfg.echo();
            export_report(&plain, &out.join("retrieval_no_pca.csv"), ExportFormat::Csv, &echo)?;
            export_report(&with_pca, &out.join("retrieval_pca.csv"), ExportFormat::Csv, &echo)?;
            let table = RetrievalTable { rows: vec![("no-pca".into(), &plain), ("pca".into(), &with_pca)] };
            export_report(&table, &out.join("retrieval_table.csv"), ExportFormat::Csv, &echo)?;
            print_stdout(&to_csv(&table, &[])?)
        }
        Command::EvalPsnr { checkpoint, data, split, out } => {
            let model = load_model(&cfg, &checkpoint)?;
            let (_, eps) = load_dataset(&data)?;
            let eps: Vec<EpisodeTensor> = eps.into_iter().filter(|e| keep(split, e.split)).map(|e| e.episode).collect();
            for e in &eps {
                e.check(model.config())?;
            }
            let curve = psnr_curves(&model, &eps)?;
            info!(
                "reconstruction {:.2} dB (baseline {:.2}), prediction {:.2} dB (baseline {:.2})",
                curve.model_reconstruction_mean(),
                curve.baseline_reconstruction_mean(),
                curve.model_prediction_mean(),
                curve.baseline_prediction_mean()
            );
            export_report(&curve, &out, ExportFormat::Csv, &cfg.echo())
        }
        Command::Predict { checkpoint, episode, out } => {
            let model = load_model(&cfg, &checkpoint)?;
            let (_, _, ep) = read_episode_file(&episode)?;
            predict(&model, &ep, &out, &cfg)
        }
    }
}

fn invocation(cmd: &Command) -> Vec<(String, String)> {
    let p = |k: &str, v: &Path| (k.to_string(), v.display().to_string());
    let mut out = Vec::new();
    let name = match cmd {
        Command::GenData { out: o } => {
            out.push(p("out", o));
            "gen-data"
        }
        Command::Train { data, out: o, .. } => {
            out.extend([p("data", data), p("out", o)]);
            "train"
        }
        Command::Encode { checkpoint, .. } => {
            out.push(p("checkpoint", checkpoint));
            "encode"
        }
        Command::MemInsert { memory, checkpoint, .. } => {
            out.extend([p("memory", memory), p("checkpoint", checkpoint)]);
            "mem-insert"
        }
        Command::Query { memory, episode, .. } => {
            out.extend([p("memory", memory), p("episode", episode)]);
            "query"
        }
        Command::SimMatrix { source, .. } | Command::EvalRetrieval { source, .. } => {
            for (k, v) in [("latents", &source.latents), ("checkpoint", &source.checkpoint), ("data", &source.data)] {
                if let Some(v) = v {
                    out.push(p(k, v));
                }
            }
            if matches!(cmd, Command::SimMatrix { .. }) { "sim-matrix" } else { "eval-retrieval" }
        }
        Command::EvalPsnr { checkpoint, data, .. } => {
            out.extend([p("checkpoint", checkpoint), p("data", data)]);
            "eval-psnr"
        }
        Command::Predict { checkpoint, episode, .. } => {
            out.extend([p("checkpoint", checkpoint), p("episode", episode)]);
            "predict"
        }
    };
    out.insert(0, ("command".into(), name.into()));
    out
}

fn keep(arg: SplitArg, split: Split) -> bool {
    match arg {
        SplitArg::All => true,
        SplitArg::Train => split == Split::Train,
        SplitArg::Val => split == Split::Validation,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn print_stdout(text: &str) -> Result<()> {
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(&cfg.dataset(), cfg.seed, out)?;
    write_file(&out.join("run_config.txt"), cfg.to_text().as_bytes())?;
    info!(
        "wrote {} training and {} validation episodes to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (manifest, eps) = load_dataset(data)?;
    let r = &manifest.render;
    let m = &cfg.model;
    if (r.frame_size, r.channels, r.seq_len) != (m.frame_size, m.channels, m.seq_len) {
        return Err(Error::Config(format!(
            "corpus has {}x{} frames, {} channels, {} steps; the model expects {}x{}, {}, {}",
            r.frame_size, r.frame_size, r.channels, r.seq_len, m.frame_size, m.frame_size, m.channels, m.seq_len
        )));
    }
    let (train, val): (Vec<LabeledEpisode>, Vec<LabeledEpisode>) = eps.into_iter().partition(|e| e.split == Split::Train);
    let train: Vec<EpisodeTensor> = train.into_iter().map(|e| e.episode).collect();
    let val: Vec<EpisodeTensor> = val.into_iter().map(|e| e.episode).collect();
    create_dir(out)?;
    write_file(&out.join("run_config.txt"), cfg.to_text().as_bytes())?;
    let mut model = CompositeModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let report = fit(&mut model, &train, &val, &cfg.training(), Some(out))?;
    if let Some(ckpt) = &report.checkpoint {
        info!("finished {} steps; final checkpoint {}", report.steps.len(), ckpt.display());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<CompositeModel<f32>> {
    let (config, params) = load_checkpoint(path)?;
    cfg.check_model(&config)?;
    CompositeModel::from_params(config, params)
}

fn encode_episode(model: &CompositeModel<f32>, ep: &EpisodeTensor) -> Result<LabeledLatent> {
    let k = model.config().enc_len;
    if ep.len() < k {
        return Err(Error::Contract(format!("episode has {} frames, the encoder needs {k}", ep.len())));
    }
    let v = model.encode(ep.encoder_part(k), Mode::Eval, &mut RngStream::new(0))?;
    Ok(LabeledLatent::new(v.values, String::new()))
}

struct Encoded {
    id: u64,
    split: &'static str,
    source: String,
    latent: LabeledLatent,
}

fn class_name(manifest: Option<&DatasetManifest>, class: usize) -> String {
    manifest.and_then(|m| m.classes.get(class).cloned()).unwrap_or_else(|| format!("class-{class}"))
}

fn encode_corpus(model: &CompositeModel<f32>, dir: &Path, split: SplitArg) -> Result<Vec<Encoded>> {
    let (manifest, eps) = load_dataset(dir)?;
    let mut out = Vec::new();
    for (e, entry) in eps.iter().zip(&manifest.episodes) {
        if !keep(split, e.split) {
            continue;
        }
        e.episode.check(model.config())?;
        let mut latent = encode_episode(model, &e.episode)?;
        latent.label = class_name(Some(&manifest), e.class);
        out.push(Encoded { id: e.id, split: e.split.name(), source: dir.join(&entry.file).display().to_string(), latent });
    }
    info!("encoded {} episodes from {}", out.len(), dir.display());
    Ok(out)
}

fn encode_file(model: &CompositeModel<f32>, path: &Path, label: Option<String>) -> Result<Encoded> {
    let (id, class, ep) = read_episode_file(path)?;
    let mut latent = encode_episode(model, &ep)?;
    latent.label = label.unwrap_or_else(|| class_name(None, class as usize));
    Ok(Encoded { id, split: "file", source: path.display().to_string(), latent })
}

fn latents_csv(items: &[Encoded], cfg: &RunConfig) -> Result<String> {
    struct Rows<'a>(&'a [Encoded]);
    impl Exportable for Rows<'_> {
        fn csv_header(&self) -> Vec<String> {
            let d = self.0.first().map_or(0, |e| e.latent.vector.len());
            ["id", "label", "split"].iter().map(|s| s.to_string()).chain((0..d).map(|i| format!("v{i}"))).collect()
        }
        fn csv_rows(&self) -> Vec<Vec<String>> {
            self.0
                .iter()
                .map(|e| {
                    [e.id.to_string(), e.latent.label.clone(), e.split.to_string()]
                        .into_iter()
                        .chain(e.latent.vector.iter().map(|v| v.to_string()))
                        .collect()
                })
                .collect()
        }
    }
    to_csv(&Rows(items), &cfg.echo())
}

fn read_latents_csv(path: &Path, split: SplitArg) -> Result<Vec<LabeledLatent>> {
    let bad = |m: String| Error::format(path, m);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let split_ok = match (split, row.get(2)) {
            (SplitArg::All, _) => true,
            (SplitArg::Train, Some(s)) => s == Split::Train.name(),
            (SplitArg::Val, Some(s)) => s == Split::Validation.name(),
            _ => false,
        };
        if !split_ok {
            continue;
        }
        let vector = row
            .iter()
            .skip(3)
            .map(|v| v.parse::<f32>().map_err(|_| bad(format!("bad latent value `{v}`"))))
            .collect::<Result<Vec<f32>>>()?;
        out.push(LabeledLatent::new(vector, row.get(1).unwrap_or_default()));
    }
    Ok(out)
}

fn latent_items(cfg: &RunConfig, src: &LatentSource) -> Result<Vec<LabeledLatent>> {
    let items = match (&src.latents, &src.checkpoint, &src.data) {
        (Some(path), None, None) => read_latents_csv(path, src.split)?,
        (None, Some(ckpt), Some(data)) => {
            let model = load_model(cfg, ckpt)?;
            encode_corpus(&model, data, src.split)?.into_iter().map(|e| e.latent).collect()
        }
        _ => return Err(Error::Config("give either --latents or both --checkpoint and --data".into())),
    };
    if items.is_empty() {
        return Err(Error::InsufficientData("no latent vectors selected".into()));
    }
    Ok(items)
}

fn mem_insert(model: &CompositeModel<f32>, path: &Path, items: Vec<Encoded>, pca: bool) -> Result<()> {
    let mut memory = if path.exists() { EpisodicMemory::load(path)? } else { EpisodicMemory::new(model.config().latent_dim()) };
    let k = model.config().enc_len;
    for e in &items {
        let meta = RecordMetadata { frames: Some((0, k)), ..RecordMetadata::labeled(e.latent.label.clone(), e.source.clone()) };
        memory.insert(&e.latent.vector, meta)?;
    }
    if pca {
        let fitted = memory.fit_class_mean_pca(usize::MAX)?;
        memory.set_pca(Some(fitted))?;
    }
    memory.save(path)?;
    info!("memory {} now holds {} records", path.display(), memory.len());
    Ok(())
}

/// Binary PGM (one channel) or PPM (three channels) with bytes `round(255·y)`, clamped.
pub fn frame_image(frame: &Tensor<f32>) -> Result<(Vec<u8>, &'static str)> {
    let (c, h, w) = frame.dims3()?;
    let (magic, ext) = match c {
        1 => ("P5", "pgm"),
        3 => ("P6", "ppm"),
        _ => return Err(Error::Contract(format!("cannot write a {c}-channel frame as PGM/PPM"))),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x] as f64;
                bytes.push((255.0 * v).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok((bytes, ext))
}

fn predict(model: &CompositeModel<f32>, ep: &EpisodeTensor, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mcfg = model.config();
    let k = mcfg.enc_len;
    if ep.len() < k {
        return Err(Error::Contract(format!("episode has {} frames, the encoder needs {k}", ep.len())));
    }
    for f in ep.encoder_part(k) {
        f.expect_shape(&mcfg.frame_shape())?;
    }
    let mut rng = RngStream::new(0);
    let v = model.encode(ep.encoder_part(k), Mode::Eval, &mut rng)?;
    let recon = model.decode_reconstruct(&v, Mode::Eval, &mut rng)?;
    let pred = model.decode_predict(&v, Mode::Eval, &mut rng)?;
    create_dir(out)?;
    for (j, frame) in recon.iter().chain(&pred).enumerate() {
        let role = if j < k { "recon" } else { "pred" };
        let (bytes, ext) = frame_image(frame)?;
        write_file(&out.join(format!("{role}-{:02}.{ext}", j + 1)), &bytes)?;
    }
    write_file(&out.join("run_config.txt"), cfg.to_text().as_bytes())?;
    info!("wrote {} frames to {}", recon.len() + pred.len(), out.display());
    Ok(())
}
