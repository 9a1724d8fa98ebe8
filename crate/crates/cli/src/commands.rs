use std::fs;
use std::path::{Path, PathBuf};

use altprint_core::detector::{load_entries, train_classifier, TrainedDetector};
use altprint_core::eval::{make_folds, run_experiment};
use altprint_core::features::{detect_minutiae, quality_breakdown, Minutia, QualityBreakdown};
use altprint_core::gan::{
    compare_quality_distributions, generate_synthetic, mosaic, quality_stats, train_gan, GanModels, QualityReport,
    REFERENCE_MEAN_QUALITY,
};
use altprint_core::image::{load_image, save_image, GrayImage};
use altprint_core::localizer::{build_patch_dataset, localize, train_localizer, PatchRect};
use altprint_core::synth::{build_dataset, DatasetManifest, Label};
use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, UsageError};

pub fn dispatch(command: Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            if let Some(n) = a.n_valid {
                cfg.synth.n_valid = n;
            }
            if let Some(n) = a.n_altered {
                cfg.synth.n_altered = n;
            }
            if let Some(s) = a.size {
                cfg.synth.width = s;
                cfg.synth.height = s;
            }
            cfg.write_resolved(&out)?;
            let m = build_dataset(&cfg.synth, &out)?;
            log::info!("wrote {} valid + {} altered prints to {}", m.count(Label::Valid), m.count(Label::Altered), out.display());
            Ok(())
        }
        Command::Features(a) => features(&a.image, a.out, &cfg),
        Command::TrainDetector(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            if let Some(n) = a.iterations {
                cfg.detector.iterations = n;
            }
            if let Some(k) = a.folds {
                cfg.experiment.folds = k;
            }
            cfg.write_resolved(&out)?;
            let (manifest, base) = load_manifest(&a.manifest)?;
            let indices: Vec<usize> = match a.fold {
                Some(f) => {
                    if f >= cfg.experiment.folds {
                        return Err(UsageError(format!("--fold {f} out of range for {} folds", cfg.experiment.folds)).into());
                    }
                    let split = make_folds(&manifest, cfg.experiment.folds, cfg.experiment.seed, cfg.experiment.grouping)?;
                    split.train_indices(f)
                }
                None => (0..manifest.entries.len()).collect(),
            };
            let model = train_classifier(&load_entries(&manifest, &base, &indices)?, &cfg.detector)?;
            model.save(out.join("model.w"))?;
            write(&out.join("train_log.csv"), &model.training_log_csv())?;
            log::info!("trained on {} images; final loss {:.4}", indices.len(), model.log.last().map_or(f64::NAN, |r| r.loss));
            Ok(())
        }
        Command::Eval(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            if let Some(k) = a.folds {
                cfg.experiment.folds = k;
            }
            if let Some(n) = a.iterations {
                cfg.detector.iterations = n;
            }
            cfg.write_resolved(&out)?;
            let (manifest, base) = load_manifest(&a.manifest)?;
            let o = run_experiment(&manifest, &base, &cfg.experiment, &cfg.detector, Some(&out))?;
            let agg = &o.report.aggregate;
            log::info!("AUC {:.4} +- {:.4}, EER {:.4} +- {:.4}", agg.auc.mean, agg.auc.std, agg.eer.mean, agg.eer.std);
            for (t, ms) in &agg.tdr_at_fdr {
                log::info!("TDR @ FDR {t}: {:.4} +- {:.4}", ms.mean, ms.std);
            }
            Ok(())
        }
        Command::TrainLocalizer(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            if let Some(n) = a.iterations {
                cfg.localizer.classifier.iterations = n;
            }
            cfg.write_resolved(&out)?;
            let (manifest, base) = load_manifest(&a.manifest)?;
            let corpus = build_patch_dataset(&manifest, &base, &cfg.localizer)?;
            log::info!("patches: {} valid, {} altered", corpus.count(Label::Valid), corpus.count(Label::Altered));
            if a.save_patches {
                corpus.save(&out)?;
            }
            let run = train_localizer(&corpus, &cfg.localizer)?;
            for (k, f) in run.folds.iter().enumerate() {
                f.model.save(out.join(format!("model_fold{k}.w")))?;
                write(&out.join(format!("train_fold{k}.csv")), &f.model.training_log_csv())?;
            }
            let (inside, outside) = run.inside_outside_means(&corpus);
            let report = LocalizerReport {
                valid_patches: corpus.count(Label::Valid),
                altered_patches: corpus.count(Label::Altered),
                fold_eer: run.folds.iter().map(|f| f.eer).collect(),
                mean_eer: run.mean_eer(),
                reference_eer: altprint_core::eval::REFERENCE_METRICS.localization_eer,
                mean_score_inside_mask: inside,
                mean_score_outside_mask: outside,
            };
            write(&out.join("localizer_report.json"), &serde_json::to_string_pretty(&report)?)?;
            log::info!("mean EER {:.4}; inside {inside:.3} vs outside {outside:.3}", report.mean_eer);
            Ok(())
        }
        Command::Localize(a) => {
            let mut model = TrainedDetector::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
            let image = load_image(&a.image)?;
            let map = localize(&mut model, &image, &cfg.localizer)?;
            if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            map.save_png(&a.out)?;
            let patches: Vec<PatchScore> =
                map.patches.iter().zip(&map.scores).map(|((m, r), &score)| PatchScore { minutia: *m, rect: *r, score }).collect();
            let mut side = a.out.clone().into_os_string();
            side.push(".json");
            write(Path::new(&side), &serde_json::to_string_pretty(&patches)?)?;
            log::info!("{} patches scored; overlay at {}", patches.len(), a.out.display());
            Ok(())
        }
        Command::TrainGan(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            if let Some(n) = a.iterations {
                cfg.gan.iterations = n;
            }
            if let Some(s) = a.size {
                cfg.gan.output_size = s;
            }
            cfg.gan.validate().map_err(|e| UsageError(e.to_string()))?;
            cfg.write_resolved(&out)?;
            let (manifest, base) = load_manifest(&a.manifest)?;
            let altered = load_class(&manifest, &base, Label::Altered)?;
            let models = train_gan(&altered, &cfg.gan)?;
            models.save(&out)?;
            log::info!("{} generator / {} discriminator updates", models.generator_updates, models.discriminator_updates);
            Ok(())
        }
        Command::GanSample(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            cfg.write_resolved(&out)?;
            let mut models = GanModels::load(&a.model)?;
            let samples = generate_synthetic(&mut models, a.n, cfg.gan.seed)?;
            for (i, s) in samples.iter().enumerate() {
                save_image(s, out.join(format!("sample_{i:05}.png")))?;
            }
            if !samples.is_empty() {
                save_image(&mosaic(&samples), out.join("grid.png"))?;
            }
            log::info!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::QualityReport(a) => {
            let out = out_dir(a.out, &mut cfg)?;
            cfg.write_resolved(&out)?;
            let (manifest, base) = load_manifest(&a.manifest)?;
            let altered = load_class(&manifest, &base, Label::Altered)?;
            let valid = load_class(&manifest, &base, Label::Valid)?;
            let report = match &a.gan {
                Some(dir) => {
                    let mut models = GanModels::load(dir)?;
                    let synthetic = generate_synthetic(&mut models, a.n, cfg.gan.seed)?;
                    compare_quality_distributions(&synthetic, &altered, &valid)?
                }
                None => QualityReport {
                    reference_means: REFERENCE_MEAN_QUALITY,
                    sets: vec![quality_stats("altered", &altered)?, quality_stats("valid", &valid)?],
                },
            };
            write(&out.join("quality_report.json"), &report.to_json())?;
            write(&out.join("quality_hist.csv"), &report.histogram_csv())?;
            for s in &report.sets {
                log::info!("{}: n {} mean {:.1} median {:.1}", s.name, s.count, s.mean, s.median);
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct LocalizerReport {
    valid_patches: usize,
    altered_patches: usize,
    fold_eer: Vec<f64>,
    mean_eer: f64,
    reference_eer: f64,
    mean_score_inside_mask: f64,
    mean_score_outside_mask: f64,
}

#[derive(Serialize)]
struct PatchScore {
    minutia: Minutia,
    rect: PatchRect,
    score: f64,
}

#[derive(Serialize)]
struct ImageFeatures {
    image: String,
    width: usize,
    height: usize,
    minutiae: Vec<Minutia>,
    quality: u8,
    quality_breakdown: QualityBreakdown,
}

fn features(images: &[PathBuf], out: Option<PathBuf>, cfg: &RunConfig) -> Result<()> {
    let mut rows = Vec::with_capacity(images.len());
    for path in images {
        let img = load_image(path)?;
        let (minutiae, _) = detect_minutiae(&img, &cfg.localizer.minutiae);
        let breakdown = quality_breakdown(&img);
        rows.push(ImageFeatures {
            image: path.display().to_string(),
            width: img.width(),
            height: img.height(),
            minutiae,
            quality: breakdown.score(),
            quality_breakdown: breakdown,
        });
    }
    let json = serde_json::to_string_pretty(&rows)?;
    match out.or_else(|| cfg.out.clone()) {
        Some(dir) => {
            cfg.write_resolved(&dir)?;
            write(&dir.join("features.json"), &json)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &mut RunConfig) -> Result<PathBuf> {
    let out = flag
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| UsageError("an output directory is required (--out or \"out\" in the config)".into()))?;
    cfg.out = Some(out.clone());
    Ok(out)
}

fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_class(manifest: &DatasetManifest, base: &Path, label: Label) -> Result<Vec<GrayImage>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.label == label)
        .map(|e| load_image(base.join(&e.image_path)).map_err(Into::into))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
