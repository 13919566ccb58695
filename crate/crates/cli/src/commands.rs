use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use prosodet::adversary::{
    adversarial_path, cross_evaluate, default_train_config, train_surrogate, wada_snr, AttackConfig, EvalClip,
    Surrogate, SurrogateConfig,
};
use prosodet::audio_io::{read_wav, write_wav, AudioBuffer};
use prosodet::explain::aggregate_attention_features;
use prosodet::features::corpus::{generate_corpus, CorpusSpec};
use prosodet::features::{
    apply_scaler, check_window, extract_features, fit_scaler, load_protocol, read_feature_csv, write_feature_csv,
    write_protocol, FeatureSequence, Label, ProtocolEntry,
};
use prosodet::metrics::{evaluate, ScoredTrial};
use prosodet::neural::{predict_file, train, ModelBundle, ModelConfig, TrainConfig};
use prosodet::pitch::search::{parameter_search, trial_csv, Bounds, Clip, SearchConfig};
use prosodet::pitch::PitchParams;

use crate::{header, par_map, read_config, read_config_or, read_json, to_json, write_file, Cli, CliError, Command, Ctx};

const DEFAULT_SEED: u64 = 42;

/// Written next to extracted feature CSVs so training knows how they were made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractMeta {
    pub window_ms: u32,
    pub pitch: PitchParams,
}

struct Loaded {
    entry: ProtocolEntry,
    path: PathBuf,
    buffer: AudioBuffer,
}

fn load_audio(protocol: &Path, jobs: usize) -> Result<Vec<Loaded>, CliError> {
    let entries = load_protocol(protocol).ctx(protocol.display())?;
    let base = protocol.parent().unwrap_or(Path::new("."));
    par_map(&entries, jobs, |e| {
        let path = base.join(&e.path);
        let buffer = read_wav(&path).ctx(path.display())?;
        Ok(Loaded {
            entry: e.clone(),
            path,
            buffer,
        })
    })
}

fn labelled(l: &Loaded) -> Result<(), CliError> {
    match l.entry.label {
        Label::Unknown => Err(CliError::Data(format!("{} has no label", l.entry.utterance_id))),
        _ => Ok(()),
    }
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let jobs = cli.jobs;
    match &cli.command {
        Command::GenCorpus { out: dir, spec } => {
            let spec: CorpusSpec = read_config(spec.as_deref())?;
            let seed = cli.seed.unwrap_or(DEFAULT_SEED);
            header(err, "gen-corpus", seed, jobs, &json!({ "spec": spec }));
            let splits = generate_corpus(&spec, seed, dir).ctx(dir.display())?;
            for s in splits {
                let _ = writeln!(out, "{}\t{}\t{}", s.name, s.entries.len(), s.protocol.display());
            }
            Ok(())
        }

        Command::Extract {
            protocol,
            out: dir,
            params,
            window_ms,
        } => {
            let pitch: PitchParams = read_config(params.as_deref())?;
            check_window(*window_ms).map_err(|e| CliError::Usage(format!("--window-ms: {e}")))?;
            let meta = ExtractMeta {
                window_ms: *window_ms,
                pitch,
            };
            header(err, "extract", cli.seed.unwrap_or(DEFAULT_SEED), jobs, &json!(meta));
            let entries = load_protocol(protocol).ctx(protocol.display())?;
            let base = protocol.parent().unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).ctx(dir.display())?;
            let rows = par_map(&entries, jobs, |e| {
                let wav = base.join(&e.path);
                let buffer = read_wav(&wav).ctx(wav.display())?;
                let seq = extract_features(&buffer, &meta.pitch, meta.window_ms).ctx(wav.display())?;
                let name = PathBuf::from(format!("{}.csv", e.utterance_id));
                write_feature_csv(dir.join(&name), &seq).ctx(dir.join(&name).display())?;
                Ok(ProtocolEntry {
                    utterance_id: e.utterance_id.clone(),
                    path: name,
                    label: e.label,
                })
            })?;
            write_protocol(dir.join("protocol.txt"), &rows).ctx(dir.display())?;
            write_file(&dir.join("extract.json"), to_json(&meta))?;
            let _ = writeln!(out, "extracted {} files into {}", rows.len(), dir.display());
            Ok(())
        }

        Command::SearchParams {
            train_protocol,
            val_protocol,
            out: dir,
            config,
            bounds,
            budget,
            params,
        } => {
            let mut cfg: SearchConfig = read_config(config.as_deref())?;
            if let Some(b) = bounds {
                cfg.bounds = read_json::<Bounds>(b)?;
            }
            if let Some(b) = budget {
                if *b == 0 {
                    return Err(CliError::Usage("--budget must be at least 1".into()));
                }
                cfg.budget = *b;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.jobs = jobs;
            let base: PitchParams = read_config(params.as_deref())?;
            header(err, "search-params", cfg.seed, jobs, &json!({ "search": cfg, "base": base }));
            let clips = |p: &Path| -> Result<Vec<Clip>, CliError> {
                load_audio(p, jobs)?
                    .into_iter()
                    .map(|l| {
                        labelled(&l)?;
                        Ok(Clip {
                            id: l.entry.utterance_id,
                            buffer: l.buffer,
                            label: l.entry.label,
                        })
                    })
                    .collect()
            };
            let (tr, va) = (clips(train_protocol)?, clips(val_protocol)?);
            let outcome = parameter_search(&tr, &va, &base, &cfg).ctx("parameter search")?;
            write_file(&dir.join("trials.csv"), trial_csv(&outcome.log))?;
            write_file(&dir.join("best_params.json"), to_json(&outcome.best))?;
            let _ = writeln!(out, "best validation EER {:.4}", outcome.best_eer);
            let _ = write!(out, "{}", to_json(&outcome.best));
            Ok(())
        }

        Command::Train {
            train_features,
            val_features,
            arch,
            attention,
            train_config,
            out: bundle_path,
            history,
        } => {
            let mut tc: TrainConfig = read_config(train_config.as_deref())?;
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            tc.validate().map_err(|e| CliError::Usage(format!("--train-config: {e}")))?;
            let mut model_cfg = ModelConfig::preset(*arch);
            if *attention {
                model_cfg = model_cfg.with_attention().ctx("--attention")?;
            }
            let (train_meta, train_set) = read_features(train_features)?;
            let (val_meta, val_set) = read_features(val_features)?;
            if train_meta != val_meta {
                return Err(CliError::Data(
                    "train and validation features were extracted with different settings".into(),
                ));
            }
            header(
                err,
                "train",
                tc.seed,
                jobs,
                &json!({ "model": model_cfg, "train": tc, "features": train_meta }),
            );
            let scaler = fit_scaler(&train_set).ctx("scaler")?;
            let scale = |v: &[FeatureSequence]| -> Result<Vec<FeatureSequence>, CliError> {
                v.iter().map(|s| apply_scaler(s, &scaler).ctx(&s.utterance_id)).collect()
            };
            let outcome = train(&model_cfg, &scale(&train_set)?, &scale(&val_set)?, &tc).ctx("training")?;
            let bundle = ModelBundle::new(
                &outcome.best_model,
                scaler,
                train_meta.pitch,
                train_meta.window_ms,
                tc.seed,
            );
            bundle.save(bundle_path).ctx(bundle_path.display())?;
            if let Some(h) = history {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let mut csv = String::from("epoch,loss,val_loss,val_eer,val_accuracy\n");
                for r in &outcome.history {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.epoch,
                        r.loss,
                        opt(r.val_loss),
                        opt(r.val_eer),
                        opt(r.val_accuracy)
                    ));
                }
                write_file(h, csv)?;
            }
            let best = &outcome.history[outcome.best_epoch - 1];
            let _ = writeln!(
                out,
                "best epoch {} of {}: val EER {:?}, val accuracy {:?}",
                outcome.best_epoch,
                outcome.history.len(),
                best.val_eer,
                best.val_accuracy
            );
            Ok(())
        }

        Command::Eval {
            bundle,
            protocol,
            threshold,
            out: dir,
        } => {
            if !(0.0..=1.0).contains(threshold) {
                return Err(CliError::Usage("--threshold must lie in [0, 1]".into()));
            }
            let b = ModelBundle::load(bundle).ctx(bundle.display())?;
            let model = b.model().ctx(bundle.display())?;
            header(
                err,
                "eval",
                cli.seed.unwrap_or(b.seed),
                jobs,
                &json!({ "bundle": bundle, "threshold": threshold, "window_ms": b.window_ms, "pitch": b.pitch }),
            );
            let clips = load_audio(protocol, jobs)?;
            let trials = par_map(&clips, jobs, |c| {
                let p = predict_file(&model, &b, &c.buffer, &b.pitch).ctx(c.path.display())?;
                Ok(ScoredTrial::new(c.entry.utterance_id.clone(), p.score, c.entry.label))
            })?;
            let report = evaluate(&trials, *threshold).ctx("metrics")?;
            if let Some(dir) = dir {
                write_file(&dir.join("metrics.json"), to_json(&report))?;
                write_file(&dir.join("metrics.csv"), report.csv())?;
                let mut scores = String::from("utterance_id,label,score\n");
                for t in &trials {
                    scores.push_str(&format!("{},{},{}\n", t.utterance_id, t.label, t.score));
                }
                write_file(&dir.join("scores.csv"), scores)?;
            }
            let _ = write!(out, "{}", to_json(&report));
            Ok(())
        }

        Command::TrainSurrogate {
            train_protocol,
            val_protocol,
            out: path,
            config,
            train_config,
        } => {
            let sc: SurrogateConfig = read_config(config.as_deref())?;
            let mut tc = read_config_or(train_config.as_deref(), default_train_config())?;
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            header(err, "train-surrogate", tc.seed, jobs, &json!({ "surrogate": sc, "train": tc }));
            let (tr, va) = (load_audio(train_protocol, jobs)?, load_audio(val_protocol, jobs)?);
            let (model, report) = train_surrogate(sc, &pairs(&tr), &pairs(&va), &tc).ctx("surrogate training")?;
            model.save(path).ctx(path.display())?;
            let _ = writeln!(
                out,
                "surrogate validation accuracy {:.4} (epoch {})",
                report.val_accuracy, report.best_epoch
            );
            Ok(())
        }

        Command::Attack {
            surrogate,
            bundle,
            protocol,
            out: dir,
            epsilons,
            alpha,
            max_steps,
            per_class,
            no_audio,
        } => {
            let base = AttackConfig {
                epsilon: 0.0,
                alpha: *alpha,
                max_steps: *max_steps,
            };
            for &epsilon in &epsilons.0 {
                AttackConfig { epsilon, ..base }
                    .validate()
                    .map_err(|e| CliError::Usage(format!("--epsilons/--alpha/--max-steps: {e}")))?;
            }
            let sur = Surrogate::load(surrogate).ctx(surrogate.display())?;
            let b = ModelBundle::load(bundle).ctx(bundle.display())?;
            let model = b.model().ctx(bundle.display())?;
            header(
                err,
                "attack",
                cli.seed.unwrap_or(sur.seed),
                jobs,
                &json!({ "epsilons": epsilons.0, "attack": base, "per_class": per_class, "surrogate": sur.config }),
            );
            let mut clips = load_audio(protocol, jobs)?;
            if let Some(n) = per_class {
                let mut seen = [0usize; 3];
                clips.retain(|c| {
                    let k = c.entry.label as usize;
                    seen[k] += 1;
                    seen[k] <= *n
                });
            }
            let eval: Vec<EvalClip> = clips
                .into_iter()
                .map(|c| EvalClip {
                    id: c.entry.utterance_id,
                    path: Some(c.path),
                    buffer: c.buffer,
                    label: c.entry.label,
                })
                .collect();
            let adv_dir = dir.join("adv");
            if !no_audio {
                std::fs::create_dir_all(&adv_dir).ctx(adv_dir.display())?;
            }
            let report = cross_evaluate(&sur, &model, &b, &eval, &epsilons.0, &base, |eps, clip, adv| {
                if *no_audio {
                    return Ok(());
                }
                let name = clip.path.as_deref().and_then(Path::file_name).unwrap_or(clip.id.as_ref());
                write_wav(adversarial_path(&adv_dir.join(name), eps), adv)?;
                Ok(())
            })
            .ctx("attack")?;
            write_file(&dir.join("robustness.csv"), report.csv())?;
            write_file(&dir.join("robustness.json"), to_json(&report))?;
            let _ = writeln!(
                out,
                "clean accuracy: surrogate {:.4}, prosody {:.4}",
                report.clean_surrogate_acc, report.clean_prosody_acc
            );
            let _ = write!(out, "{}", report.csv());
            Ok(())
        }

        Command::Attention {
            bundle,
            protocol,
            out: dir,
        } => {
            let b = ModelBundle::load(bundle).ctx(bundle.display())?;
            let model = b.model().ctx(bundle.display())?;
            if !model.has_attention() {
                return Err(CliError::Data(format!("{} has no attention layer", bundle.display())));
            }
            header(
                err,
                "attention",
                cli.seed.unwrap_or(b.seed),
                jobs,
                &json!({ "bundle": bundle, "window_ms": b.window_ms, "pitch": b.pitch }),
            );
            let clips = load_audio(protocol, jobs)?;
            let seqs = par_map(&clips, jobs, |c| {
                let mut s = extract_features(&c.buffer, &b.pitch, b.window_ms).ctx(c.path.display())?;
                s.utterance_id = c.entry.utterance_id.clone();
                s.label = c.entry.label;
                Ok(s)
            })?;
            let agg = aggregate_attention_features(&model, &b.scaler, &seqs).ctx("attention")?;
            let summary = agg.summary_json().ctx("attention summary")?;
            write_file(&dir.join("attention.csv"), agg.csv())?;
            write_file(&dir.join("attention_summary.json"), format!("{summary}\n"))?;
            let _ = writeln!(out, "{summary}");
            Ok(())
        }

        Command::Snr { wav } => {
            header(err, "snr", cli.seed.unwrap_or(DEFAULT_SEED), jobs, &json!({ "wav": wav }));
            let buffer = read_wav(wav).ctx(wav.display())?;
            let db = wada_snr(&buffer.samples).ctx(wav.display())?;
            let _ = writeln!(out, "{db:.2}");
            Ok(())
        }
    }
}

fn pairs(v: &[Loaded]) -> Vec<(&[f64], Label)> {
    v.iter().map(|l| (l.buffer.samples.as_slice(), l.entry.label)).collect()
}

fn read_features(dir: &Path) -> Result<(ExtractMeta, Vec<FeatureSequence>), CliError> {
    let meta_path = dir.join("extract.json");
    let meta: ExtractMeta = read_json(&meta_path)?;
    let entries = load_protocol(dir.join("protocol.txt")).ctx(dir.display())?;
    let seqs = entries
        .iter()
        .map(|e| {
            let p = dir.join(&e.path);
            read_feature_csv(&p, &e.utterance_id, e.label, meta.window_ms).ctx(p.display())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((meta, seqs))
}
