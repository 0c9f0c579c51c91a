use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::ArgMatches;
use log::{error, info, warn};
use melle_core::ablation::{format_table, run_ablation, Variant};
use melle_core::audio::{write_melf, GriffinLimOptions};
use melle_core::gradsuite::{run_component, Component};
use melle_core::model::{Model, ModelConfig};
use melle_core::synth::{generate, multi_sample, render_to_wav, stop_margin_score, SynthesisReport, SynthesisRequest};
use melle_core::tokenizer::Vocab;
use melle_core::trainer::{
    load_checkpoint, load_features, load_utterances, read_manifest, save_checkpoint, ManifestEntry, Trainer,
    METRICS_HEADER,
};
use melle_core::{MelleError, Result};

use crate::config::{RunConfig, Section, SCHEMA};

fn path_arg(a: &ArgMatches, id: &str) -> PathBuf {
    PathBuf::from(a.get_one::<String>(id).expect("required by clap"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MelleError::io(dir, e))
}

/// Defaults, then `MELLE_SEED`, then `--config`, then flags.
fn run_config(a: &ArgMatches, model: ModelConfig, sections: &[Section]) -> Result<RunConfig> {
    let mut rc = RunConfig::new(model)?;
    if let Some(p) = a.get_one::<String>("config") {
        let text = fs::read_to_string(p).map_err(|e| MelleError::io(p, e))?;
        rc.apply_text(&text)?;
    }
    for spec in SCHEMA.iter().filter(|s| sections.contains(&s.section)) {
        if let Some(v) = a.get_one::<String>(spec.key) {
            rc.set(spec.section, spec.key, v)?;
        }
    }
    Ok(rc)
}

fn read_entries(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(MelleError::InvalidInput(format!("{}: manifest has no utterances", manifest.display())));
    }
    Ok(entries)
}

pub fn extract(a: &ArgMatches) -> Result<ExitCode> {
    let manifest = path_arg(a, "manifest");
    let out_dir = path_arg(a, "out_dir");
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        info!("{}: nothing to extract", manifest.display());
        return Ok(ExitCode::SUCCESS);
    }
    create_dir(&out_dir)?;
    let mut listing = String::new();
    let (mut done, mut skipped, mut failed) = (0, 0, 0);
    let mut stems = HashSet::new();
    for e in &entries {
        let stem = e.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if stem.is_empty() || !stems.insert(stem.clone()) {
            error!("manifest line {}: {}: duplicate or empty file name", e.line, e.path.display());
            failed += 1;
            continue;
        }
        let name = format!("{stem}.melf");
        let target = out_dir.join(&name);
        if target.exists() {
            skipped += 1;
        } else {
            let written = load_features(&e.path).and_then(|mel| {
                let tmp = out_dir.join(format!(".{name}.partial"));
                write_melf(&tmp, &mel)?;
                fs::rename(&tmp, &target).map_err(|err| MelleError::io(&target, err))
            });
            if let Err(err) = written {
                error!("manifest line {}: {err}", e.line);
                failed += 1;
                continue;
            }
            done += 1;
        }
        listing.push_str(&format!("{name}\t{}\n", e.transcript));
    }
    if !listing.is_empty() {
        let p = out_dir.join("manifest.tsv");
        fs::write(&p, listing).map_err(|e| MelleError::io(&p, e))?;
    }
    info!("extracted {done}, already present {skipped}, failed {failed}");
    Ok(if failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn metrics_writer(path: &Path, resume_step: Option<u64>) -> Result<BufWriter<File>> {
    let mut kept = format!("{METRICS_HEADER}\n");
    if let Some(step) = resume_step {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                match line.split('\t').next().and_then(|s| s.parse::<u64>().ok()) {
                    Some(s) if s <= step => {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                    _ => {}
                }
            }
        }
    }
    fs::write(path, kept).map_err(|e| MelleError::io(path, e))?;
    let f = OpenOptions::new().append(true).open(path).map_err(|e| MelleError::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn train(a: &ArgMatches) -> Result<ExitCode> {
    let rc = run_config(a, ModelConfig::desk(), &[Section::Run, Section::Model, Section::Train])?;
    rc.train.validate()?;
    let out = path_arg(a, "out");
    let entries = read_entries(&path_arg(a, "manifest"))?;
    create_dir(&out)?;

    let (resumed, vocab) = match a.get_one::<String>("resume") {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let vocab = Vocab::load(sidecar_vocab(Path::new(p)))?;
            let mut expected = ckpt.model.config.clone();
            let requested = rc.model.to_pairs();
            for key in rc.explicit_model_keys() {
                let v = &requested.iter().find(|(k, _)| *k == key).expect("schema key").1;
                expected.set(key, v)?;
            }
            ckpt.expect_config(&expected)?;
            if vocab.len() != ckpt.model.config.vocab_size {
                return Err(MelleError::CheckpointMismatch(format!(
                    "vocabulary has {} ids, checkpoint expects {}",
                    vocab.len(),
                    ckpt.model.config.vocab_size
                )));
            }
            (Some(ckpt), vocab)
        }
        None => {
            let texts: Vec<&str> = entries.iter().map(|e| e.transcript.as_str()).collect();
            (None, Vocab::build(&texts)?)
        }
    };
    vocab.save(out.join("vocab.txt"))?;
    let utts = load_utterances(&entries, &vocab)?;
    let mut trainer = match resumed {
        Some(c) => {
            info!("resuming at step {}", c.step);
            Trainer::resume(c, rc.train.clone(), &utts)?
        }
        None => {
            let mut cfg = rc.model.clone();
            cfg.vocab_size = vocab.len();
            Trainer::new(Model::new(cfg)?, rc.train.clone(), &utts)?
        }
    };
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, rc.to_text()).map_err(|e| MelleError::io(&cfg_path, e))?;
    let metrics_path = out.join("metrics.tsv");
    let mut metrics = metrics_writer(&metrics_path, Some(trainer.step).filter(|&s| s > 0))?;
    info!(
        "training {} parameters on {} utterances in {} batches",
        trainer.model.params.num_scalars(),
        utts.len(),
        trainer.batches().len()
    );
    let interval = rc.train.checkpoint_interval;
    while !trainer.is_done() {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let _ = metrics.flush();
                return Err(e);
            }
        };
        writeln!(metrics, "{}", report.log_line()).map_err(|e| MelleError::io(&metrics_path, e))?;
        if report.step == 1 || report.step % 100 == 0 {
            let l = report.losses;
            info!(
                "step {} reg {:.4} kl {:.4} flux {:.4} stop {:.4} total {:.4} lr {:.2e}",
                report.step, l.reg, l.kl, l.flux, l.stop, l.total, report.lr
            );
        }
        if interval > 0 && report.step % interval == 0 {
            metrics.flush().map_err(|e| MelleError::io(&metrics_path, e))?;
            save_checkpoint(&trainer.checkpoint(), out.join(format!("checkpoint-{:06}.mckp", report.step)))?;
        }
    }
    metrics.flush().map_err(|e| MelleError::io(&metrics_path, e))?;
    let final_path = out.join("model.mckp");
    save_checkpoint(&trainer.checkpoint(), &final_path)?;
    info!("wrote {}", final_path.display());
    Ok(ExitCode::SUCCESS)
}

fn sidecar_vocab(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("vocab.txt")
}

pub fn synth(a: &ArgMatches) -> Result<ExitCode> {
    let rc = run_config(a, ModelConfig::desk(), &[Section::Run, Section::Synth])?;
    let ckpt_path = path_arg(a, "checkpoint");
    let ckpt = load_checkpoint(&ckpt_path)?;
    let vocab_path = a.get_one::<String>("vocab").map(PathBuf::from).unwrap_or_else(|| sidecar_vocab(&ckpt_path));
    let vocab = Vocab::load(&vocab_path)?;
    let model = ckpt.model;
    if vocab.len() != model.config.vocab_size {
        return Err(MelleError::CheckpointMismatch(format!(
            "{} has {} ids, checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let s = &rc.synth;
    let req = SynthesisRequest {
        prompt_text: vocab.encode(a.get_one::<String>("prompt_text").expect("defaulted")),
        prompt_mel: load_features(&path_arg(a, "prompt_wav"))?,
        target_text: vocab.encode(a.get_one::<String>("target_text").expect("required")),
        mode: s.mode,
        sampling: s.sampling,
        max_frames: (s.max_frames_out > 0).then_some(s.max_frames_out),
        seed: rc.seed,
    };
    let (result, score) = if s.n_samples > 1 {
        let o = multi_sample(&req, &model, s.n_samples, &stop_margin_score)?;
        info!("selected sample {} of {}", o.best_index, s.n_samples);
        let score = o.scores[o.best_index].expect("winner has a score");
        (o.best, score)
    } else {
        let r = generate(&req, &model)?;
        let score = stop_margin_score(&r);
        (r, score)
    };
    if result.truncated {
        warn!("stop never fired; output truncated at {} frames", result.frame_count);
    }
    let out = path_arg(a, "out");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let gl = GriffinLimOptions {
        iterations: s.griffin_lim_iters,
        seed: rc.seed,
    };
    let audio = render_to_wav(&result, gl, &out)?;
    let report_path = a
        .get_one::<String>("report")
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("jsonl"));
    let line = SynthesisReport::new(&req, &result, score).to_json_line();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report_path)
        .map_err(|e| MelleError::io(&report_path, e))?;
    writeln!(f, "{line}").map_err(|e| MelleError::io(&report_path, e))?;
    info!(
        "wrote {} ({} frames, {:.2} s)",
        out.display(),
        result.frame_count,
        audio.duration_secs()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &ArgMatches) -> Result<ExitCode> {
    let rc = run_config(a, ModelConfig::tiny(8), &[Section::Run, Section::Model])?;
    let components: Vec<Component> = match a.get_one::<String>("component").map(String::as_str) {
        None | Some("all") => Component::ALL.to_vec(),
        Some(c) => vec![c.parse()?],
    };
    let max_entries = a
        .get_one::<String>("max_entries")
        .map(|s| s.parse::<usize>().map_err(|_| MelleError::Config(format!("--max-entries: cannot parse {s:?}"))))
        .transpose()?;
    let mut ok = true;
    println!("component\tcheck\tmax_rel_err\ttolerance\tresult");
    for c in components {
        let results = run_component(c, &rc.model, rc.seed, max_entries)?;
        let mut worst = 0.0f64;
        for r in &results {
            worst = worst.max(r.report.max_rel_err);
            ok &= r.passed();
            println!(
                "{}\t{}\t{:.3e}\t{:.0e}\t{}",
                c.name(),
                r.name,
                r.report.max_rel_err,
                r.tolerance,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        println!("# {}: max relative error {:.3e} (tolerance {:.0e})", c.name(), worst, c.tolerance());
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

pub fn ablate(a: &ArgMatches) -> Result<ExitCode> {
    let rc = run_config(a, ModelConfig::desk(), &[Section::Run, Section::Model, Section::Train])?;
    rc.train.validate()?;
    let out = path_arg(a, "out");
    let entries = read_entries(&path_arg(a, "manifest"))?;
    create_dir(&out)?;
    let texts: Vec<&str> = entries.iter().map(|e| e.transcript.as_str()).collect();
    let vocab = Vocab::build(&texts)?;
    let utts = load_utterances(&entries, &vocab)?;
    let mut model = rc.model.clone();
    model.vocab_size = vocab.len();

    let mut variants = vec![Variant::Full];
    if a.get_flag("no_latent_sampling") {
        variants.push(Variant::NoLatentSampling);
    }
    if a.get_flag("no_flux") {
        variants.push(Variant::NoFlux);
    }
    if a.get_one::<String>("sampling").is_some() {
        variants.push(Variant::MeanSampling);
    }
    if variants.len() == 1 {
        variants = Variant::ALL.to_vec();
    }
    let rows = run_ablation(&variants, &model, &rc.train, &utts, |row| {
        info!("variant {} done (finite: {})", row.variant.name(), row.finite);
        if let Some(e) = &row.error {
            error!("variant {}: {e}", row.variant.name());
        }
    })?;
    let table = format_table(&rows);
    let p = out.join("ablation.tsv");
    fs::write(&p, &table).map_err(|e| MelleError::io(&p, e))?;
    print!("{table}");
    Ok(if rows.iter().all(|r| r.finite) { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
