//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line; the test fails if any
//! criterion fails. Criteria run sequentially so the wall-clock limits are measured honestly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use epimem::eval::{
    class_similarity_matrix, heatmap_bytes, map_at_3, precision_first_match, psnr_curves, retrieval_benchmark,
    LabeledLatent, PsnrCurve, RankedQuery, RetrievalConfig,
};
use epimem::losses::{combine, gradient_difference_loss, mean_frame_baseline, mse_loss, psnr, psnr_from_mse};
use epimem::memory::{cosine_similarity, EpisodicMemory, PcaTransform, RecordMetadata};
use epimem::model::*;
use epimem::substrate::*;
use epimem::synthetic::{generate_corpus, generate_dataset, DatasetConfig, LabeledEpisode, Split};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(results: &mut Vec<(usize, bool)>, id: usize, title: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag}: {title} ({secs:.1} s) {detail}");
    results.push((id, outcome.is_ok()));
}

// ---------------------------------------------------------------------------------------------
// 1. gradients

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn op_check(name: &str, shapes: &[(&str, &[usize])], body: impl Fn(&mut Graph<f64>) -> epimem::Result<Var>) -> Outcome {
    let mut rng = RngStream::new(name.len() as u64);
    let mut params = ParamSet::new();
    for (n, s) in shapes {
        params.add(n, rand(s, &mut rng)).unwrap();
    }
    let grads = {
        let mut g = Graph::new(&params);
        let out = body(&mut g).map_err(|e| e.to_string())?;
        g.backward(out).map_err(|e| e.to_string())?
    };
    params.zero_grads();
    params.accumulate(&grads.params, 1.0).unwrap();
    let f = |p: &ParamSet<f64>| {
        let mut g = Graph::new(p);
        let out = body(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    let r = finite_diff_check(f, &mut params, STEP, 200, 1e-8, &mut RngStream::new(3));
    if r.passed(TOL) {
        Ok(format!("{name} {:.1e}", r.max_rel_error))
    } else {
        Err(format!("{name}: {r:?}"))
    }
}

fn p(g: &mut Graph<f64>, name: &str) -> Var {
    let id = g.params().id(name).unwrap();
    g.param(id)
}

fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> epimem::Result<Var> {
    let mut rng = RngStream::new(seed);
    let w = g.input(rand(g.shape(y), &mut rng));
    let z = g.mul(y, w)?;
    Ok(g.sum_squares(z))
}

fn tiny() -> ModelConfig {
    ModelConfig {
        frame_size: 8,
        seq_len: 4,
        enc_len: 2,
        convlstm_channels: vec![2, 3],
        conv_channels: vec![3, 2],
        fc_width: 5,
        lstm_hidden: 3,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (2, Padding::Valid)] {
        notes.push(op_check("conv2d", &[("x", &[2, 5, 6]), ("k", &[3, 2, 3, 3]), ("b", &[3])], |g| {
            let (x, k, b) = (p(g, "x"), p(g, "k"), p(g, "b"));
            let y = g.conv2d(x, k, b, stride, padding)?;
            weighted(g, y, 1)
        })?);
        notes.push(op_check("tconv2d", &[("x", &[3, 3, 4]), ("k", &[3, 2, 3, 3]), ("b", &[2])], |g| {
            let (x, k, b) = (p(g, "x"), p(g, "k"), p(g, "b"));
            let y = g.transposed_conv2d(x, k, b, stride, padding)?;
            weighted(g, y, 2)
        })?);
    }
    notes.push(op_check("linear+elementwise", &[("x", &[4]), ("w", &[6, 4]), ("b", &[6]), ("z", &[6])], |g| {
        let (x, w, b) = (p(g, "x"), p(g, "w"), p(g, "b"));
        let y = g.linear(x, w, Some(b))?;
        let s = g.sigmoid(y);
        let z = p(g, "z");
        let t = g.tanh(z);
        let m = g.mul(s, t)?;
        let a = g.add(m, y)?;
        let c = g.concat(&[a, z])?;
        let sl = g.slice(c, 2, 8)?;
        let r = g.reshape(sl, &[2, 4])?;
        weighted(g, r, 3)
    })?);
    notes.push(op_check("layer_norm", &[("x", &[3, 2, 4]), ("g", &[3]), ("b", &[3])], |g| {
        let (x, gain, b) = (p(g, "x"), p(g, "g"), p(g, "b"));
        let y = g.layer_norm(x, gain, b, 1e-5)?;
        weighted(g, y, 4)
    })?);
    notes.push(op_check("dropout", &[("x", &[40])], |g| {
        let x = p(g, "x");
        let y = g.dropout(x, 0.2, &mut RngStream::new(5), true)?;
        weighted(g, y, 6)
    })?);
    let lstm_shapes: &[(&str, &[usize])] = &[("x", &[3]), ("h", &[4]), ("c", &[4]), ("w", &[16, 7]), ("wr", &[16, 4]), ("b", &[16])];
    notes.push(op_check("lstm_step", lstm_shapes, |g| {
        let w = LstmWeights { w: p(g, "w"), b: p(g, "b") };
        let recurrent = LstmWeights { w: p(g, "wr"), b: w.b };
        let (x, h, c) = (p(g, "x"), p(g, "h"), p(g, "c"));
        let (h1, c1) = lstm_step(g, Some(x), h, c, &w)?;
        let (h2, _) = lstm_step(g, None, h1, c1, &recurrent)?;
        Ok(g.sum_squares(h2))
    })?);
    notes.push(op_check(
        "convlstm_step",
        &[("x", &[2, 4, 4]), ("h", &[3, 4, 4]), ("c", &[3, 4, 4]), ("k", &[12, 5, 3, 3]), ("b", &[12])],
        |g| {
            let w = ConvLstmWeights { k: p(g, "k"), b: p(g, "b") };
            let (x, h, c) = (p(g, "x"), p(g, "h"), p(g, "c"));
            let (h1, c1) = convlstm_step(g, x, h, c, &w)?;
            let (h2, c2) = convlstm_step(g, x, h1, c1, &w)?;
            let s = g.add(h2, c2)?;
            weighted(g, s, 7)
        },
    )?);
    let mut rng = RngStream::new(8);
    let targets = vec![rand(&[2, 3, 4], &mut rng), rand(&[2, 3, 4], &mut rng)];
    notes.push(op_check("mse+gd", &[("y0", &[2, 3, 4]), ("y1", &[2, 3, 4])], |g| {
        let ys = [p(g, "y0"), p(g, "y1")];
        let mse = g.seq_mse(&ys, &targets)?;
        let gd = g.seq_gd(&ys, &targets)?;
        g.weighted_sum(&[(mse, 0.6), (gd, 0.4)])
    })?);

    let cfg = tiny();
    for mode in [Mode::Eval, Mode::Train] {
        let model = CompositeModel::<f64>::new(cfg.clone(), 5).unwrap();
        let mut er = RngStream::new(6);
        let ep = EpisodeTensor::new((0..cfg.seq_len).map(|_| Tensor::from_fn(&cfg.frame_shape(), |_| er.uniform() as f32)).collect())
            .unwrap();
        let rng = RngStream::new(9);
        let (_, grads) = model.loss_and_gradients(&ep, mode, &mut rng.clone()).map_err(|e| e.to_string())?;
        let mut params = model.params().clone();
        params.zero_grads();
        params.accumulate(&grads, 1.0).unwrap();
        let r = finite_diff_check(|q| model.loss_with(q, &ep, mode, &mut rng.clone()), &mut params, STEP, 100, 1e-8, &mut RngStream::new(1));
        ensure(r.passed(TOL) && r.checked == 100, || format!("composite {mode:?}: {r:?}"))?;
        notes.push(format!("composite-{mode:?} {:.1e}", r.max_rel_error));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------------------------
// 2. loss / metric oracles

fn close(a: f64, b: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, expected {b}"))
}

/// Independent loop oracle for the gradient difference term of one frame pair.
fn gd_oracle(y: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let (c, h, w) = y.dims3().unwrap();
    let at = |t: &Tensor<f64>, ch: usize, i: usize, j: usize| t.data()[(ch * h + i) * w + j];
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    let d = (at(x, ch, i, j + 1) - at(x, ch, i, j)).abs() - (at(y, ch, i, j + 1) - at(y, ch, i, j)).abs();
                    total += d * d;
                }
                if i + 1 < h {
                    let d = (at(x, ch, i + 1, j) - at(x, ch, i, j)).abs() - (at(y, ch, i + 1, j) - at(y, ch, i, j)).abs();
                    total += d * d;
                }
            }
        }
    }
    total
}

fn criterion_2() -> Outcome {
    // losses and metrics
    let p_entries = 3 * 5 * 7;
    let y = Tensor::<f64>::full(&[3, 5, 7], 0.75);
    let x = Tensor::<f64>::full(&[3, 5, 7], 0.25);
    close(mse_loss(&[&y], &[&x]).unwrap(), 0.25 * p_entries as f64, 0.0, "mse of a 0.5 offset")?;
    let x2 = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let y2 = Tensor::<f64>::zeros(&[1, 2, 2]);
    close(gradient_difference_loss(&[&y2], &[&x2]).unwrap(), 2.0, 0.0, "2x2 gradient difference")?;
    close(gd_oracle(&y2, &x2), 2.0, 0.0, "loop oracle on 2x2")?;
    let mut rng = RngStream::new(4);
    for _ in 0..5 {
        let a = Tensor::from_fn(&[2, 6, 5], |_| rng.uniform());
        let b = Tensor::from_fn(&[2, 6, 5], |_| rng.uniform());
        close(gradient_difference_loss(&[&a], &[&b]).unwrap(), gd_oracle(&a, &b), 1e-6, "random gradient difference")?;
    }
    close(combine(2.0, 5.0, 0.4).unwrap(), 3.2, 1e-12, "combined loss")?;
    close(psnr_from_mse(0.01), 20.0, 1e-9, "psnr of mse 0.01")?;
    let off = Tensor::<f64>::full(&[3, 4, 4], 0.6);
    let base = Tensor::<f64>::full(&[3, 4, 4], 0.5);
    close(psnr(&off, &base).unwrap(), 20.0, 1e-6, "psnr of a 0.1 offset")?;
    let mean = mean_frame_baseline(&[&Tensor::<f64>::zeros(&[3, 2, 2]), &Tensor::full(&[3, 2, 2], 1.0)]).unwrap();
    ensure(mean.data().iter().all(|&v| v == 0.5), || "mean of 0 and 1 frames is not 0.5".into())?;

    // memory store
    close(cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0 / 2f64.sqrt(), 1e-12, "cosine((1,1),(1,0))")?;
    let mut mem = EpisodicMemory::new(2);
    let deg = std::f64::consts::PI / 180.0;
    for (angle, name) in [(90.0, "a90"), (0.0, "a0"), (45.0, "a45")] {
        let t: f64 = angle * deg;
        mem.insert(&[t.cos() as f32, t.sin() as f32], RecordMetadata::labeled(name, "oracle")).unwrap();
    }
    let hits = mem.query(&[1.0, 0.0], 3, false).unwrap();
    let order: Vec<&str> = hits.iter().map(|h| h.label.as_deref().unwrap()).collect();
    ensure(order == ["a0", "a45", "a90"], || format!("ranking {order:?}"))?;
    for (h, s) in hits.iter().zip([1.0, 1.0 / 2f64.sqrt(), 0.0]) {
        close(h.similarity, s, 1e-6, "ranked similarity")?;
    }
    let two = [(&[0.0f32, 0.0][..], "p"), (&[2.0f32, 0.0][..], "q")];
    let pca = PcaTransform::fit_class_means(two, 5).unwrap();
    ensure(pca.num_components() == 1, || format!("{} components for two classes", pca.num_components()))?;
    close(pca.components()[0][0].abs(), 1.0, 1e-12, "principal axis x")?;
    close(pca.components()[0][1], 0.0, 1e-12, "principal axis y")?;
    close(pca.mean()[0], 1.0, 1e-12, "class-mean centre")?;
    let mut rng = RngStream::new(12);
    let eight: Vec<(Vec<f32>, String)> =
        (0..40).map(|i| ((0..16).map(|_| rng.normal() as f32).collect(), format!("c{}", i % 8))).collect();
    let pca8 = PcaTransform::fit_class_means(eight.iter().map(|(v, l)| (v.as_slice(), l.as_str())), 200).unwrap();
    ensure(pca8.num_components() <= 7, || format!("{} components for 8 classes", pca8.num_components()))?;
    for _ in 0..50 {
        let a: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let (pa, pb) = (pca8.apply(&a).unwrap(), pca8.apply(&b).unwrap());
        let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        ensure(dist(&pa, &pb) <= dist(&a, &b) + 1e-8, || "projection expanded a distance".into())?;
    }

    // evaluation harness
    let axes = vec![
        LabeledLatent::new(vec![1.0, 0.0], "x"),
        LabeledLatent::new(vec![3.0, 0.0], "x"),
        LabeledLatent::new(vec![0.0, 2.0], "y"),
        LabeledLatent::new(vec![0.0, 0.5], "y"),
    ];
    let m = class_similarity_matrix(&axes, false).unwrap();
    ensure(m.values == vec![vec![Some(1.0), Some(0.0)], vec![Some(0.0), Some(1.0)]], || format!("{:?}", m.values))?;
    let q = |label: &str, got: &[&str], rel: usize| RankedQuery {
        label: label.into(),
        retrieved: got.iter().map(|s| s.to_string()).collect(),
        relevant_in_memory: rel,
    };
    close(precision_first_match(&[q("a", &["a"], 3)]), 1.0, 0.0, "all correct")?;
    close(precision_first_match(&[q("a", &["b"], 3)]), 0.0, 0.0, "none correct")?;
    let four = [q("a", &["a"], 3), q("b", &["b"], 3), q("c", &["c"], 3), q("d", &["a"], 3)];
    close(precision_first_match(&four), 0.75, 0.0, "3 of 4")?;
    close(map_at_3(&[q("a", &["a", "a", "a"], 4)]), 1.0, 0.0, "AP all relevant")?;
    close(map_at_3(&[q("a", &["b", "a", "c"], 4)]), 1.0 / 6.0, 1e-12, "AP rank 2")?;
    close(map_at_3(&[q("a", &["a", "b", "c"], 4)]), 1.0 / 3.0, 1e-12, "AP rank 1")?;
    let (bytes, _, _) = heatmap_bytes(&[Some(1.0), Some(0.0), Some(0.0), Some(1.0)]);
    ensure(bytes == [255, 0, 0, 255], || format!("heatmap {bytes:?}"))?;
    Ok("losses, memory and evaluation oracles agree".into())
}

// ---------------------------------------------------------------------------------------------
// 3. overfit sanity

const OVERFIT_LR: f64 = 1e-4;

fn eval_stats(model: &CompositeModel<f32>, eps: &[EpisodeTensor]) -> (f64, f64) {
    let k = model.config().enc_len;
    let (mut loss, mut recon) = (0.0, 0.0);
    for e in eps {
        let out = model.forward(e, Mode::Eval, &mut RngStream::new(0)).unwrap();
        loss += out.loss.combined / eps.len() as f64;
        for (y, x) in out.reconstruction.iter().zip(&e.frames[..k]) {
            recon += psnr(y, x).unwrap() / (k * eps.len()) as f64;
        }
    }
    (loss, recon)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let data = DatasetConfig { train_per_class: 1, val_per_class: 1, ..Default::default() };
    let (_, corpus) = generate_corpus(&data, 21).unwrap();
    let eps: Vec<EpisodeTensor> = corpus.iter().filter(|e| e.split == Split::Train).take(4).map(|e| e.episode.clone()).collect();
    let cfg = ModelConfig { dropout: 0.0, latent_noise: 0.0, ..ModelConfig::default() };
    let mut model = CompositeModel::<f32>::new(cfg, 3).unwrap();
    let mut adam = AdamState::new(model.params());
    let (initial, _) = eval_stats(&model, &eps);
    let mut last = (initial, 0.0);
    let mut steps = 0;
    while steps < 2000 {
        let ep = &eps[steps % eps.len()];
        train_step(&mut model, &mut adam, &[ep], OVERFIT_LR, 5.0, &AdamConfig::default(), &RngStream::new(steps as u64)).unwrap();
        steps += 1;
        if steps % 50 == 0 {
            last = eval_stats(&model, &eps);
            if last.0 < 0.1 * initial && last.1 > 25.0 {
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{steps} steps, loss {initial:.2} -> {:.2} ({:.1}%), reconstruction PSNR {:.2} dB, {:.0} s",
        last.0,
        100.0 * last.0 / initial,
        last.1,
        elapsed.as_secs_f64()
    );
    ensure(last.0 < 0.1 * initial && last.1 > 25.0 && elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------------------------
// 4-7. desk-scale run and the evaluations built on it

const DESK_EPOCHS: usize = 17;
const DESK_DROPOUT: f64 = 0.0;

struct Desk {
    model: CompositeModel<f32>,
    val: Vec<LabeledEpisode>,
    train: Vec<LabeledEpisode>,
    classes: Vec<String>,
    elapsed: Duration,
}

fn train_desk() -> Desk {
    let start = Instant::now();
    let (manifest, corpus) = generate_corpus(&DatasetConfig::default(), 7).unwrap();
    let (train, val): (Vec<LabeledEpisode>, Vec<LabeledEpisode>) = corpus.into_iter().partition(|e| e.split == Split::Train);
    let cfg = ModelConfig { dropout: DESK_DROPOUT, ..ModelConfig::default() };
    let mut model = CompositeModel::<f32>::new(cfg, 1).unwrap();
    let tc = TrainConfig { epochs: DESK_EPOCHS, lr0: 1e-4, seed: 3, validation_limit: Some(0), ..TrainConfig::default() };
    let tr: Vec<EpisodeTensor> = train.iter().map(|e| e.episode.clone()).collect();
    fit(&mut model, &tr, &[], &tc, None).unwrap();
    Desk { model, val, train, classes: manifest.classes, elapsed: start.elapsed() }
}

fn criterion_4(desk: &Desk, curve: &PsnrCurve) -> Outcome {
    let k = curve.enc_len;
    let n = curve.positions();
    let recon_gain = curve.model_reconstruction_mean() - curve.baseline_reconstruction_mean();
    let detail = format!(
        "{:.0} s; reconstruction {:.2} dB vs baseline {:.2} ({recon_gain:+.2} dB, need +2); prediction at k+1 {:.2} vs baseline {:.2}; at n {:.2}; mean reconstruction {:.2} vs mean prediction {:.2}",
        desk.elapsed.as_secs_f64(),
        curve.model_reconstruction_mean(),
        curve.baseline_reconstruction_mean(),
        curve.model[k].mean,
        curve.baseline[k].mean,
        curve.model[n - 1].mean,
        curve.model_reconstruction_mean(),
        curve.model_prediction_mean(),
    );
    let ok = recon_gain >= 2.0
        && curve.model[k].mean > curve.baseline[k].mean
        && curve.model[n - 1].mean <= curve.model[k].mean
        && desk.elapsed < Duration::from_secs(1800);
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn latents(desk: &Desk, eps: &[LabeledEpisode]) -> Vec<LabeledLatent> {
    let k = desk.model.config().enc_len;
    eps.iter()
        .map(|e| {
            let v = desk.model.encode(e.episode.encoder_part(k), Mode::Eval, &mut RngStream::new(0)).unwrap();
            LabeledLatent::new(v.values, desk.classes[e.class].clone())
        })
        .collect()
}

fn criterion_5(val: &[LabeledLatent]) -> Outcome {
    let mut notes = Vec::new();
    for use_pca in [false, true] {
        let m = class_similarity_matrix(val, use_pca).unwrap();
        let (d, o) = (m.mean_diagonal(), m.mean_off_diagonal());
        notes.push(format!("{} diagonal {d:.4} off-diagonal {o:.4}", if use_pca { "pca" } else { "raw" }));
        ensure(d > o, || notes.join("; "))?;
    }
    Ok(notes.join("; "))
}

fn criterion_6(val: &[LabeledLatent]) -> Outcome {
    let cfg = RetrievalConfig { seed: 11, ..RetrievalConfig::default() };
    let plain = retrieval_benchmark(val, &cfg).unwrap();
    let pca = retrieval_benchmark(val, &RetrievalConfig { use_pca: true, ..cfg }).unwrap();
    let detail = format!(
        "no-pca precision {:.3}±{:.3} mAP@3 {:.3}±{:.3} | pca precision {:.3}±{:.3} mAP@3 {:.3}±{:.3}",
        plain.mean_precision, plain.std_precision, plain.mean_map, plain.std_map, pca.mean_precision, pca.std_precision, pca.mean_map, pca.std_map
    );
    ensure(plain.mean_precision >= 3.0 * 0.125, || detail.clone())?;
    Ok(detail)
}

fn criterion_7(val: &[LabeledLatent]) -> Outcome {
    let trials = 200;
    let mut rng = RngStream::new(77);
    let mut precisions = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut labels: Vec<String> = val.iter().map(|l| l.label.clone()).collect();
        rng.shuffle(&mut labels);
        let permuted: Vec<LabeledLatent> = val.iter().zip(labels).map(|(l, lab)| LabeledLatent::new(l.vector.clone(), lab)).collect();
        let r = retrieval_benchmark(&permuted, &RetrievalConfig { seed: t as u64, ..RetrievalConfig::default() }).unwrap();
        precisions.push(r.mean_precision);
    }
    let n = trials as f64;
    let mean = precisions.iter().sum::<f64>() / n;
    let sd = (precisions.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // the top match is another item, so its permuted label agrees with probability Σ n_c(n_c−1) / N(N−1)
    let mut counts = std::collections::BTreeMap::new();
    for l in val {
        *counts.entry(l.label.as_str()).or_insert(0usize) += 1;
    }
    let total = val.len() as f64;
    let exact = counts.values().map(|&c| (c * (c - 1)) as f64).sum::<f64>() / (total * (total - 1.0));
    let se = sd / n.sqrt();
    let detail = format!(
        "{trials} permutations: mean precision {mean:.4}, trial σ {sd:.4}, |mean − 1/8| = {:.4}; exact chance {exact:.4}, |mean − exact| = {:.4} vs 3 s.e. {:.4}",
        (mean - 0.125).abs(),
        (mean - exact).abs(),
        3.0 * se
    );
    ensure((mean - 0.125).abs() <= 3.0 * sd && (mean - exact).abs() <= 3.0 * se, || detail.clone())?;
    Ok(detail)
}

/// Static-frame queries against a memory of training episodes.
fn static_scene_hits(desk: &Desk, val: &[LabeledLatent]) -> f64 {
    let train = latents(desk, &desk.train);
    let mut mem = EpisodicMemory::new(desk.model.config().latent_dim());
    for l in &train {
        mem.insert(&l.vector, RecordMetadata::labeled(l.label.clone(), "train")).unwrap();
    }
    let mut hits = 0;
    for (e, l) in desk.val.iter().zip(val) {
        let v = desk.model.encode_static_scene(&e.episode.frames[0]).unwrap();
        let top = mem.query(&v.values, 3, false).unwrap();
        if top.iter().any(|h| h.label.as_deref() == Some(l.label.as_str())) {
            hits += 1;
        }
    }
    hits as f64 / val.len() as f64
}

// ---------------------------------------------------------------------------------------------
// 8. determinism and persistence

fn dir_bytes(dir: &Path) -> Vec<(std::ffi::OsString, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn criterion_8(val: &[LabeledLatent]) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let small = DatasetConfig { train_per_class: 3, val_per_class: 1, ..Default::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&small, 5, &a).unwrap();
    generate_dataset(&small, 5, &b).unwrap();
    ensure(dir_bytes(&a) == dir_bytes(&b), || "corpora differ".into())?;

    let cfg = tiny();
    let (_, corpus) = generate_corpus(&small, 5).unwrap();
    let mut er = RngStream::new(1);
    let eps: Vec<EpisodeTensor> = (0..3)
        .map(|_| EpisodeTensor::new((0..cfg.seq_len).map(|_| Tensor::from_fn(&cfg.frame_shape(), |_| er.uniform() as f32)).collect()).unwrap())
        .collect();
    drop(corpus);
    let tc = TrainConfig { epochs: 2, seed: 9, ..TrainConfig::default() };
    let trace = || {
        let mut m = CompositeModel::<f32>::new(cfg.clone(), 4).unwrap();
        let r = fit(&mut m, &eps, &[], &tc, None).unwrap();
        (m, r.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>())
    };
    let (model, t1) = trace();
    let (_, t2) = trace();
    ensure(t1 == t2, || "loss traces differ".into())?;

    let rc = RetrievalConfig { seed: 2, use_pca: true, ..RetrievalConfig::default() };
    ensure(retrieval_benchmark(val, &rc).unwrap() == retrieval_benchmark(val, &rc).unwrap(), || "retrieval reports differ".into())?;

    let ck = tmp.path().join("m.ckpt");
    save_checkpoint(&ck, model.config(), model.params()).unwrap();
    let (c2, p2) = load_checkpoint(&ck).unwrap();
    for (x, y) in model.params().entries().iter().zip(p2.entries()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(x.name == y.name && bits(&x.value) == bits(&y.value), || format!("parameter {} changed", x.name))?;
    }
    let ck2 = tmp.path().join("m2.ckpt");
    save_checkpoint(&ck2, &c2, &p2).unwrap();
    ensure(std::fs::read(&ck).unwrap() == std::fs::read(&ck2).unwrap(), || "checkpoint bytes differ".into())?;
    let reloaded = CompositeModel::from_params(c2, p2).unwrap();
    for e in &eps {
        let x = model.forward(e, Mode::Eval, &mut RngStream::new(0)).unwrap().loss.combined;
        let y = reloaded.forward(e, Mode::Eval, &mut RngStream::new(0)).unwrap().loss.combined;
        ensure(x.to_bits() == y.to_bits(), || format!("eval loss {x} vs {y}"))?;
    }

    let mut mem = EpisodicMemory::new(val[0].vector.len());
    for l in val {
        mem.insert(&l.vector, RecordMetadata::labeled(l.label.clone(), "val")).unwrap();
    }
    let fitted = mem.fit_class_mean_pca(usize::MAX).unwrap();
    mem.set_pca(Some(fitted)).unwrap();
    let (m1, m2) = (tmp.path().join("a.epmem"), tmp.path().join("b.epmem"));
    mem.save(&m1).unwrap();
    let back = EpisodicMemory::load(&m1).unwrap();
    ensure(back.records() == mem.records() && back.pca() == mem.pca(), || "memory contents changed".into())?;
    back.save(&m2).unwrap();
    ensure(std::fs::read(&m1).unwrap() == std::fs::read(&m2).unwrap(), || "memory bytes differ".into())?;
    Ok("corpora, loss traces, retrieval reports, checkpoint and memory files reproduce bit-exactly".into())
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    run(&mut results, 1, "gradient correctness", criterion_1);
    run(&mut results, 2, "loss and metric oracles", criterion_2);
    run(&mut results, 3, "overfit sanity", criterion_3);

    let desk = catch_unwind(train_desk);
    match desk {
        Ok(desk) => {
            let val_eps: Vec<EpisodeTensor> = desk.val.iter().map(|e| e.episode.clone()).collect();
            let curve = psnr_curves(&desk.model, &val_eps).unwrap();
            run(&mut results, 4, "desk-scale generalization", || criterion_4(&desk, &curve));
            let val = latents(&desk, &desk.val);
            run(&mut results, 5, "similarity structure", || criterion_5(&val));
            run(&mut results, 6, "retrieval protocol", || criterion_6(&val));
            run(&mut results, 7, "chance calibration", || criterion_7(&val));
            let hits = static_scene_hits(&desk, &val);
            let verdict = if hits > 0.5 { "holds" } else { "does not hold" };
            println!("static-scene example {verdict}: {hits:.3} of validation first frames find their class in the top 3");
            run(&mut results, 8, "determinism and persistence", || criterion_8(&val));
        }
        Err(_) => {
            for (id, title) in [(4, "desk-scale generalization"), (5, "similarity structure"), (6, "retrieval protocol"), (7, "chance calibration")] {
                run(&mut results, id, title, || Err("desk-scale training failed".into()));
            }
            let mut rng = RngStream::new(3);
            let val: Vec<LabeledLatent> =
                (0..40).map(|i| LabeledLatent::new((0..8).map(|_| rng.normal() as f32).collect(), format!("c{}", i % 8))).collect();
            run(&mut results, 8, "determinism and persistence", || criterion_8(&val));
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
