//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use curvex::data::{
    ingest_dataset, load_samples, split_dataset, toy_generate, DatasetManifest, Split,
};
use curvex::diffusion::{sample_loop, AutoencoderPair, NoiseSchedule};
use curvex::error::{Error, Result};
use curvex::imageio;
use curvex::nets::{
    load_weights, save_weights, text_encode, train_base, train_control, BasePredictor,
    CheckpointMeta, SpadeStages, TextVocab, Weights,
};
use curvex::pipeline::{
    audit_within_dataset, consistency_score, expand_dataset, expand_dataset_with, load_synth_pairs,
    write_synth_dataset, ExpansionSpec,
};
use curvex::plot::{LinePlot, Series};
use curvex::rng::{derive_rng, seed_rng};
use curvex::segeval::{
    baseline_augment, compare_methods, feature_distance, train_segmenter, AugmentMethod,
    EvalReport, Projector, SegSample, Segmenter,
};
use curvex::tensor::Tensor;

use crate::config::RunConfig;
use crate::util::{base_items, control_items, seg_samples, DirLock};

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&cfg.paths.dataset_dir)
}

pub fn cmd_toygen(
    cfg: &RunConfig,
    n: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let n = n.unwrap_or(cfg.toy.n);
    let seed = seed.unwrap_or(cfg.seeds.toygen);
    let out = out.unwrap_or_else(|| cfg.paths.dataset_dir.clone());
    let params = cfg.toy.gen_params();
    let manifest = toy_generate(&params, n, &out, seed)?;
    let manifest = split_dataset(&manifest, cfg.toy.train_fraction, cfg.seeds.split)?;
    manifest.save(&out)?;
    println!(
        "toygen: {} samples ({} train / {} val) at {}x{} in {}",
        n,
        manifest.of_split(Split::Train).count(),
        manifest.of_split(Split::Val).count(),
        params.size,
        params.size,
        out.display()
    );
    Ok(())
}

pub fn cmd_ingest(cfg: &RunConfig, input: &Path, name: Option<String>) -> Result<()> {
    let name = name.unwrap_or_else(|| "ingested".to_string());
    let dst = cfg.paths.out_root.join("datasets").join(&name);
    let model = cfg.model.model_config()?;
    let manifest = ingest_dataset(input, &dst, model.canonical, &name)?;
    println!(
        "ingest: {} samples normalized to {} in {}",
        manifest.samples.len(),
        model.canonical,
        dst.display()
    );
    Ok(())
}

fn schedule_meta(cfg: &RunConfig) -> Result<String> {
    serde_json::to_string(&cfg.schedule).map_err(Error::from)
}

/// Sample probe images from the current base weights for the
/// feature-distance log.
fn sample_probe(
    weights: &Weights,
    schedule: &NoiseSchedule,
    captions: &[String],
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let vocab = TextVocab::new(weights.config.text.clone());
    let ae = AutoencoderPair::identity();
    let shape = (
        weights.config.in_channels,
        weights.config.canonical,
        weights.config.canonical,
    );
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let caption = &captions[i % captions.len()];
        let text = text_encode(caption, &vocab, &weights.base)?;
        let predictor = BasePredictor { weights, text };
        let mut rng = derive_rng(seed, i as u64);
        out.push(sample_loop(
            &predictor, schedule, steps, shape, &mut rng, &ae,
        )?);
    }
    Ok(out)
}

struct FdTracker {
    rows: Vec<(usize, f64, f64)>,
    best: Option<(f64, Weights)>,
}

fn write_fd_artifacts(
    cfg: &RunConfig,
    phase: &str,
    losses: &[f64],
    tracker: &FdTracker,
) -> Result<()> {
    let plots = cfg.plots_dir();
    let loss_plot = LinePlot {
        title: format!("{phase} training loss"),
        x_label: "step".into(),
        y_label: "mse".into(),
        series: vec![Series {
            label: "loss".into(),
            points: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| ((i + 1) as f64, l))
                .collect(),
        }],
    };
    loss_plot.render_png(&plots.join(format!("{phase}_loss.png")), 640, 360)?;
    loss_plot.render_svg(&plots.join(format!("{phase}_loss.svg")), 640, 360)?;

    let logs = cfg.paths.out_root.join("logs");
    fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
    let mut csv = String::from("step,loss,feature_distance\n");
    for (step, loss, fd) in &tracker.rows {
        csv.push_str(&format!("{step},{loss:.6},{fd:.6}\n"));
    }
    let p = logs.join(format!("{phase}_feature_distance.csv"));
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    if !tracker.rows.is_empty() {
        let fd_plot = LinePlot {
            title: format!("{phase} feature distance"),
            x_label: "step".into(),
            y_label: "distance".into(),
            series: vec![Series {
                label: "feature distance".into(),
                points: tracker
                    .rows
                    .iter()
                    .map(|&(s, _, f)| (s as f64, f))
                    .collect(),
            }],
        };
        fd_plot.render_png(&plots.join(format!("{phase}_fd.png")), 640, 360)?;
        fd_plot.render_svg(&plots.join(format!("{phase}_fd.svg")), 640, 360)?;
    }
    Ok(())
}

pub fn cmd_train_base(cfg: &RunConfig, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.paths.out_root)?;
    let t0 = Instant::now();
    let manifest = load_manifest(cfg)?;
    let train = load_samples(&manifest, Some(Split::Train))?;
    if train.is_empty() {
        return Err(Error::Config(
            "dataset has no train split; run toygen or split first".into(),
        ));
    }
    let model = cfg.model.model_config()?;
    let schedule = cfg.schedule.schedule()?;
    let mut hyper = cfg.train_base.hyperparams();
    if let Some(s) = steps {
        hyper.steps = s;
    }
    let seed = seed.unwrap_or(cfg.seeds.train_base);
    let items = base_items(&train, model.text.max_tokens);
    let real_probe: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
    let probe_captions: Vec<String> = items.iter().map(|i| i.caption.clone()).collect();
    let eval_samples = cfg.train_base.eval_samples;
    let gen_steps = cfg.expansion.gen_steps.min(schedule.t_max());

    let mut tracker = FdTracker {
        rows: Vec::new(),
        best: None,
    };
    let schedule_for_hook = schedule.clone();
    let mut hook = |step: usize, loss: f64, w: &Weights| -> Result<()> {
        let probes = sample_probe(
            w,
            &schedule_for_hook,
            &probe_captions,
            eval_samples,
            gen_steps,
            0xFD00 + step as u64,
        )?;
        let fd = feature_distance(&real_probe, &probes, Projector::RandomConv { seed: 1 })?;
        println!(
            "[{:>7.1?}] step {step}: loss {loss:.4}, feature distance {:.4}{}",
            t0.elapsed(),
            fd.value,
            if fd.diagonal_fallback {
                " (diagonal)"
            } else {
                ""
            }
        );
        if tracker
            .best
            .as_ref()
            .map(|(b, _)| fd.value < *b)
            .unwrap_or(true)
        {
            tracker.best = Some((fd.value, w.clone()));
        }
        tracker.rows.push((step, loss, fd.value));
        Ok(())
    };
    let mut rng = seed_rng(seed);
    let (weights, log) = train_base(
        &items,
        &schedule,
        &model,
        &hyper,
        &mut rng,
        if hyper.eval_interval > 0 {
            Some(&mut hook)
        } else {
            None
        },
    )?;

    let mut meta = CheckpointMeta::new();
    meta.insert("phase".into(), "base".into());
    meta.insert("schedule".into(), schedule_meta(cfg)?);
    meta.insert("steps".into(), hyper.steps.to_string());
    meta.insert("seed".into(), seed.to_string());
    let ckpt = cfg.checkpoint_dir().join("base.ntc");
    save_weights(&ckpt, &weights, meta.clone())?;
    if let Some((fd, best_w)) = &tracker.best {
        let mut m = meta.clone();
        m.insert("selected_by".into(), format!("feature_distance={fd:.6}"));
        save_weights(&cfg.checkpoint_dir().join("base_best.ntc"), best_w, m)?;
    }
    write_fd_artifacts(cfg, "base", &log.losses, &tracker)?;
    println!(
        "train-base: {} steps, final loss {:.4}, checkpoint {}",
        log.losses.len(),
        log.losses.last().unwrap_or(&f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn control_ckpt_name(tag: Option<&str>) -> String {
    match tag {
        Some(t) => format!("control_{t}.ntc"),
        None => "control.ntc".to_string(),
    }
}

pub fn cmd_train_control(
    cfg: &RunConfig,
    steps: Option<usize>,
    seed: Option<u64>,
    spade_stages: Option<String>,
    base: Option<PathBuf>,
    tag: Option<String>,
) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.paths.out_root)?;
    let manifest = load_manifest(cfg)?;
    let train = load_samples(&manifest, Some(Split::Train))?;
    let base_path = base.unwrap_or_else(|| cfg.checkpoint_dir().join("base.ntc"));
    let (mut base_w, base_meta) = load_weights(&base_path)?;
    if base_meta.get("phase").map(String::as_str) != Some("base") {
        return Err(Error::Config(format!(
            "{} is not a base checkpoint",
            base_path.display()
        )));
    }
    // the control branch may use a different spade configuration than the
    // file default; the base weights themselves are untouched
    if let Some(ss) = &spade_stages {
        base_w.config.spade_stages = SpadeStages::parse(ss)?;
        base_w.config.validate()?;
    } else {
        base_w.config.spade_stages = SpadeStages::parse(&cfg.model.spade_stages)?;
    }
    let schedule = cfg.schedule.schedule()?;
    let mut hyper = cfg.train_control.hyperparams();
    if let Some(s) = steps {
        hyper.steps = s;
    }
    let seed = seed.unwrap_or(cfg.seeds.train_control);
    let items = control_items(&train, base_w.config.text.max_tokens);

    // feature-distance probes: control samples conditioned on train masks
    let real_probe: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
    let probe_inputs: Vec<(Tensor, String)> = items
        .iter()
        .map(|i| (i.segmap.clone(), i.caption.clone()))
        .collect();
    let eval_samples = cfg.train_control.eval_samples;
    let gen_steps = cfg.expansion.gen_steps.min(schedule.t_max());
    let schedule_for_hook = schedule.clone();
    let mut tracker = FdTracker {
        rows: Vec::new(),
        best: None,
    };
    let mut hook = |step: usize, loss: f64, w: &Weights| -> Result<()> {
        let vocab = TextVocab::new(w.config.text.clone());
        let ae = AutoencoderPair::identity();
        let shape = (w.config.in_channels, w.config.canonical, w.config.canonical);
        let mut probes = Vec::with_capacity(eval_samples);
        for i in 0..eval_samples {
            let (segmap, caption) = &probe_inputs[i % probe_inputs.len()];
            let text = text_encode(caption, &vocab, &w.base)?;
            let predictor = curvex::nets::ScpPredictor {
                weights: w,
                text,
                segmap: segmap.clone(),
            };
            let mut rng = derive_rng(0xFDC0 + step as u64, i as u64);
            probes.push(sample_loop(
                &predictor,
                &schedule_for_hook,
                gen_steps,
                shape,
                &mut rng,
                &ae,
            )?);
        }
        let fd = feature_distance(&real_probe, &probes, Projector::RandomConv { seed: 1 })?;
        println!(
            "step {step}: loss {loss:.4}, feature distance {:.4}",
            fd.value
        );
        if tracker
            .best
            .as_ref()
            .map(|(b, _)| fd.value < *b)
            .unwrap_or(true)
        {
            tracker.best = Some((fd.value, w.clone()));
        }
        tracker.rows.push((step, loss, fd.value));
        Ok(())
    };
    let mut rng = seed_rng(seed);
    let (weights, log) = train_control(
        &items,
        &base_w,
        &schedule,
        &hyper,
        &mut rng,
        if hyper.eval_interval > 0 {
            Some(&mut hook)
        } else {
            None
        },
    )?;

    let mut meta = CheckpointMeta::new();
    meta.insert("phase".into(), "control".into());
    meta.insert("schedule".into(), schedule_meta(cfg)?);
    meta.insert(
        "spade_stages".into(),
        weights.config.spade_stages.to_string(),
    );
    meta.insert("seed".into(), seed.to_string());
    let name = control_ckpt_name(tag.as_deref());
    let ckpt = cfg.checkpoint_dir().join(&name);
    save_weights(&ckpt, &weights, meta.clone())?;
    if let Some((fd, best_w)) = &tracker.best {
        let mut m = meta.clone();
        m.insert("selected_by".into(), format!("feature_distance={fd:.6}"));
        let best_name = name.replace(".ntc", "_best.ntc");
        save_weights(&cfg.checkpoint_dir().join(best_name), best_w, m)?;
    }
    write_fd_artifacts(cfg, "control", &log.losses, &tracker)?;
    println!(
        "train-control: {} steps, final loss {:.4}, spade stages {}, checkpoint {}",
        log.losses.len(),
        log.losses.last().unwrap_or(&f64::NAN),
        weights.config.spade_stages,
        ckpt.display()
    );
    Ok(())
}

/// Train the consistency oracle on the real train split.
fn train_oracle(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Segmenter> {
    let train = load_samples(manifest, Some(Split::Train))?;
    let val = load_samples(manifest, Some(Split::Val))?;
    let seg_cfg = cfg.segmenter.seg_config(manifest.canonical);
    let (_, oracle) = train_segmenter(
        &seg_samples(&train),
        &seg_samples(&val),
        &seg_cfg,
        &cfg.segmenter.hyperparams(),
        &mut seed_rng(cfg.seeds.oracle),
    )?;
    Ok(oracle)
}

pub fn cmd_expand(
    cfg: &RunConfig,
    ratio: Option<usize>,
    seed: Option<u64>,
    control: Option<PathBuf>,
    tag: Option<String>,
    segmap_base: Option<PathBuf>,
) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.paths.out_root)?;
    let t0 = Instant::now();
    let manifest = load_manifest(cfg)?;
    let ckpt = control.unwrap_or_else(|| cfg.checkpoint_dir().join("control.ntc"));
    let (weights, meta) = load_weights(&ckpt)?;
    if meta.get("phase").map(String::as_str) != Some("control") {
        return Err(Error::Config(format!(
            "{} is not a control checkpoint",
            ckpt.display()
        )));
    }
    let schedule = cfg.schedule.schedule()?;
    let pool = manifest.feature_pool()?;
    let dataset_name = pool
        .dataset_names()
        .next()
        .ok_or_else(|| Error::Data("caption pool is empty".into()))?
        .to_string();
    let spec = ExpansionSpec {
        dataset_name: dataset_name.clone(),
        ratio: ratio.unwrap_or(cfg.expansion.ratio),
        master_seed: seed.unwrap_or(cfg.seeds.expand),
        gen_steps: cfg.expansion.gen_steps,
        rejection_limit: cfg.expansion.rejection_limit,
        min_fg_fraction: cfg.expansion.min_fg_fraction,
        max_fg_fraction: cfg.expansion.max_fg_fraction,
        sampling_mode: cfg.expansion.sampling_mode,
    };
    let pairs = match &segmap_base {
        Some(path) => {
            let (seg_w, _) = load_weights(path)?;
            expand_dataset_with(&manifest, &spec, &seg_w, &weights, &schedule, &pool)?
        }
        None => expand_dataset(&manifest, &spec, &weights, &schedule, &pool)?,
    };
    println!(
        "[{:>7.1?}] generated {} pairs (ratio {})",
        t0.elapsed(),
        pairs.len(),
        spec.ratio
    );

    let dir_name = match &tag {
        Some(t) => format!("synth_r{}_{t}", spec.ratio),
        None => format!("synth_r{}", spec.ratio),
    };
    let out = cfg.paths.out_root.join(dir_name);
    write_synth_dataset(&out, &pairs)?;

    let audit = audit_within_dataset(&pairs, &dataset_name);
    let oracle = train_oracle(cfg, &manifest)?;
    let score = consistency_score(&pairs, &oracle)?;
    let mean_attempts: f64 = pairs
        .iter()
        .map(|p| p.provenance.segmap_attempts as f64)
        .sum::<f64>()
        / pairs.len().max(1) as f64;
    let summary = serde_json::json!({
        "ratio": spec.ratio,
        "pairs": pairs.len(),
        "audit": audit,
        "consistency_score": score,
        "mean_segmap_attempts": mean_attempts,
        "master_seed": spec.master_seed,
    });
    let summary_path = out.join("expansion_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(&summary_path, e))?;

    for (i, p) in pairs.iter().take(cfg.expansion.panels).enumerate() {
        let panel = imageio::side_by_side(&p.mask.as_gray(), &p.image)?;
        imageio::save_gray_png(&out.join(format!("panels/panel_{i:03}.png")), &panel)?;
    }
    println!(
        "[{:>7.1?}] expand: audit {}/{} features within-dataset, consistency {:.2}, output {}",
        t0.elapsed(),
        audit.features_checked - audit.cross_dataset_features,
        audit.features_checked,
        score,
        out.display()
    );
    if audit.cross_dataset_features > 0 {
        return Err(Error::Data(format!(
            "{} features crossed datasets",
            audit.cross_dataset_features
        )));
    }
    Ok(())
}

fn augmented_samples(
    base: &[SegSample],
    method: AugmentMethod,
    ratio: usize,
    master_seed: u64,
) -> Vec<SegSample> {
    let mut out = base.to_vec();
    let n = base.len();
    for copy in 0..(ratio - 1) {
        for (j, s) in base.iter().enumerate() {
            let mut rng = derive_rng(master_seed, (copy * n + j) as u64);
            let (img, mask) = baseline_augment(&s.image, &s.mask, method, &mut rng);
            out.push(SegSample { image: img, mask });
        }
    }
    out
}

pub(crate) struct EvalRun {
    method: String,
    ratio: Option<usize>,
    seed: u64,
}

/// One run per (method, ratio, seed); the original-data method carries no
/// ratio.
pub(crate) fn enumerate_runs(methods: &[String], ratios: &[usize], seeds: &[u64]) -> Vec<EvalRun> {
    let mut runs = Vec::new();
    for method in methods {
        if method == "original" {
            for &seed in seeds {
                runs.push(EvalRun {
                    method: method.clone(),
                    ratio: None,
                    seed,
                });
            }
        } else {
            for &ratio in ratios {
                for &seed in seeds {
                    runs.push(EvalRun {
                        method: method.clone(),
                        ratio: Some(ratio),
                        seed,
                    });
                }
            }
        }
    }
    runs
}

pub fn cmd_eval(
    cfg: &RunConfig,
    methods: Option<Vec<String>>,
    ratios: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
) -> Result<()> {
    let _lock = DirLock::acquire(&cfg.paths.out_root)?;
    let t0 = Instant::now();
    let manifest = load_manifest(cfg)?;
    let train = load_samples(&manifest, Some(Split::Train))?;
    let val = load_samples(&manifest, Some(Split::Val))?;
    let orig = seg_samples(&train);
    let val_samples = seg_samples(&val);
    let seg_cfg = cfg.segmenter.seg_config(manifest.canonical);
    let seg_hyper = cfg.segmenter.hyperparams();

    let methods = methods.unwrap_or_else(|| cfg.eval.methods.clone());
    let ratios = ratios.unwrap_or_else(|| cfg.eval.ratios.clone());
    let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());

    let runs = enumerate_runs(&methods, &ratios, &seeds);

    let reports_dir = cfg.reports_dir();
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for run in &runs {
        let label = format!(
            "{}_{}_seed{}",
            run.method,
            run.ratio
                .map(|r| format!("r{r}"))
                .unwrap_or_else(|| "orig".into()),
            run.seed
        );
        let result = (|| -> Result<EvalReport> {
            let train_set: Vec<SegSample> = match run.method.as_str() {
                "original" => orig.clone(),
                "cutout" => augmented_samples(
                    &orig,
                    AugmentMethod::Cutout,
                    run.ratio.unwrap(),
                    cfg.seeds.expand ^ 0xC0,
                ),
                "flip_rotate" => augmented_samples(
                    &orig,
                    AugmentMethod::FlipRotate,
                    run.ratio.unwrap(),
                    cfg.seeds.expand ^ 0xF0,
                ),
                "scp" => {
                    let synth_dir = cfg.synth_dir(run.ratio.unwrap());
                    let synth = load_synth_pairs(&synth_dir)?;
                    let mut t = orig.clone();
                    t.extend(synth);
                    t
                }
                other => return Err(Error::Config(format!("unknown method {other:?}"))),
            };
            let (mut report, _) = train_segmenter(
                &train_set,
                &val_samples,
                &seg_cfg,
                &seg_hyper,
                &mut seed_rng(run.seed),
            )?;
            report.method = run.method.clone();
            report.ratio = run.ratio;
            report.seed = run.seed;
            Ok(report)
        })();
        match result {
            Ok(report) => {
                let p = reports_dir.join(format!("report_{label}.json"));
                fs::write(&p, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| Error::io(&p, e))?;
                let traj = LinePlot {
                    title: format!("validation metrics: {label}"),
                    x_label: "epoch".into(),
                    y_label: "score".into(),
                    series: vec![
                        Series {
                            label: "mIoU".into(),
                            points: report
                                .per_epoch
                                .iter()
                                .enumerate()
                                .map(|(i, m)| ((i + 1) as f64, m.miou))
                                .collect(),
                        },
                        Series {
                            label: "F1".into(),
                            points: report
                                .per_epoch
                                .iter()
                                .enumerate()
                                .map(|(i, m)| ((i + 1) as f64, m.f1))
                                .collect(),
                        },
                    ],
                };
                traj.render_png(&cfg.plots_dir().join(format!("traj_{label}.png")), 640, 360)?;
                traj.render_svg(&cfg.plots_dir().join(format!("traj_{label}.svg")), 640, 360)?;
                println!(
                    "[{:>7.1?}] {label}: best mIoU {:.2} (epoch {}), F1 {:.2}",
                    t0.elapsed(),
                    report.best_miou,
                    report.best_epoch + 1,
                    report.best_f1
                );
                reports.push(report);
            }
            Err(e) => {
                println!("[{:>7.1?}] {label}: FAILED: {e}", t0.elapsed());
                failures.push(format!("{label}: {e}"));
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Data(format!(
            "all {} runs failed; first failure: {}",
            runs.len(),
            failures.first().cloned().unwrap_or_default()
        )));
    }
    emit_comparison(cfg, &reports)?;
    if !failures.is_empty() {
        let p = reports_dir.join("failures.txt");
        fs::write(&p, failures.join("\n")).map_err(|e| Error::io(&p, e))?;
        println!(
            "eval: {} of {} runs failed (see failures.txt)",
            failures.len(),
            runs.len()
        );
    }
    Ok(())
}

fn emit_comparison(cfg: &RunConfig, reports: &[EvalReport]) -> Result<()> {
    let table = compare_methods(reports)?;
    let reports_dir = cfg.reports_dir();
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let csv_path = reports_dir.join("comparison.csv");
    fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let md_path = reports_dir.join("comparison.md");
    fs::write(&md_path, table.to_markdown()).map_err(|e| Error::io(&md_path, e))?;

    // expansion-ratio sweep, one series per method; the original run sits
    // at ratio 1
    let mut methods: Vec<String> = table.rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut series = Vec::new();
    for method in methods {
        let mut points: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.ratio.unwrap_or(1) as f64, r.mean_best_miou))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        series.push(Series {
            label: method,
            points,
        });
    }
    let plot = LinePlot {
        title: "best mIoU vs expansion ratio".into(),
        x_label: "expansion ratio".into(),
        y_label: "best mIoU".into(),
        series,
    };
    plot.render_png(&cfg.plots_dir().join("ratio_miou.png"), 640, 360)?;
    plot.render_svg(&cfg.plots_dir().join("ratio_miou.svg"), 640, 360)?;
    println!("comparison table: {}", csv_path.display());
    println!("{}", compare_methods(reports)?.to_markdown());
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let reports_dir = cfg.reports_dir();
    let mut reports = Vec::new();
    let entries = fs::read_dir(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("report_"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in paths {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        reports.push(serde_json::from_slice::<EvalReport>(&bytes)?);
    }
    if reports.is_empty() {
        return Err(Error::Data(format!(
            "no report_*.json files under {}",
            reports_dir.display()
        )));
    }
    emit_comparison(cfg, &reports)
}
