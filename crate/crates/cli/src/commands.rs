use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cpo_core::corpus::{generate_world, load_pairs, load_samples, save_pairs, save_samples};
use cpo_core::counterfactual::{record_seed, Perturber};
use cpo_core::cpo::{metrics_csv, train, Mode, TrainData};
use cpo_core::drift::{build_stream, detect_drift, LatentMode, DRIFT_HEADER};
use cpo_core::eval_metrics::evaluate;
use cpo_core::policy::{Checkpoint, PolicyParams};
use cpo_core::trajectory::Vocab;

use crate::config::{read_toml, read_train_config, WorldConfig};
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{Cli, Command, Estimator, TrainMode, WorldArgs};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::io(&cli.out_dir, e))?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData {
            world,
            n,
            regimes,
            shift_tv,
            output,
        } => {
            let mut cfg = world_config(world)?;
            if let Some(r) = regimes {
                cfg.regimes = *r;
            }
            if let Some(tv) = shift_tv {
                cfg.shift_tv = *tv;
            }
            gen_data(cli, &cfg, *n, seed, output)
        }
        Command::GenCounterfactuals { world, corpus, output } => {
            gen_counterfactuals(cli, &world_config(world)?, seed, corpus, output)
        }
        Command::Train { .. } => train_cmd(cli),
        Command::Monitor { .. } => monitor(cli),
        Command::Eval { .. } => eval(cli),
    }
}

fn world_config(args: &WorldArgs) -> Result<WorldConfig, CliError> {
    let mut cfg: WorldConfig = match &args.world {
        Some(p) => read_toml(p)?,
        None => WorldConfig::default(),
    };
    if let Some(g) = &args.graph {
        cfg.graph = Some(g.clone());
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, name: &Path) -> PathBuf {
    cli.out_dir.join(name)
}

/// File name up to its first dot: `samples.jsonl` → `samples`.
fn stem_of(path: &Path) -> String {
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.split('.').next().unwrap_or_default().to_string()
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_checkpoint(path: &Path, expected: Option<&Vocab>) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_json(&text, expected).map_err(|e| match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The checkpoint's vocabulary, checked against the world's when one was
/// named on the command line.
fn checkpoint_for(world: &WorldArgs, path: &Path) -> Result<Checkpoint, CliError> {
    let expected = if world.given() {
        Some(world_config(world)?.spec()?.vocab()?)
    } else {
        None
    };
    load_checkpoint(path, expected.as_ref())
}

fn gen_data(cli: &Cli, cfg: &WorldConfig, n: usize, seed: u64, output: &Path) -> Result<(), CliError> {
    let mut m = RunManifest::start("gen-data", seed);
    m.config(&serde_json::json!({ "world": cfg, "n": n }));
    let spec = cfg.spec()?;
    let vocab = spec.vocab()?;
    let samples = generate_world(&spec, n, seed)?;
    let path = out_path(cli, output);
    save_samples(&samples, &vocab, &path)?;
    m.output("samples", &path);
    if let Some(g) = &cfg.graph {
        m.input("graph", g);
    }
    m.finish(&cli.out_dir, &stem_of(output))?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn gen_counterfactuals(
    cli: &Cli,
    cfg: &WorldConfig,
    seed: u64,
    corpus: &Path,
    output: &Path,
) -> Result<(), CliError> {
    let mut m = RunManifest::start("gen-counterfactuals", seed);
    m.config(&serde_json::json!({ "world": cfg }));
    let spec = cfg.spec()?;
    let vocab = spec.vocab()?;
    let samples = load_samples(corpus, &vocab)?;
    m.input("corpus", corpus);
    let factuals: Vec<_> = samples.into_iter().map(|s| s.trajectory).collect();
    let pairs = Perturber::new(&spec.graph, &vocab)?.generate_all(&factuals, seed)?;
    let path = out_path(cli, output);
    save_pairs(&pairs, &vocab, &path)?;
    m.output("pairs", &path);
    m.finish(&cli.out_dir, &stem_of(output))?;
    println!("wrote {} pairs to {}", pairs.len(), path.display());
    Ok(())
}

fn train_cmd(cli: &Cli) -> Result<(), CliError> {
    let Command::Train {
        world,
        mode,
        config,
        resume,
        reference,
        corpus,
        pairs,
        steps,
        lr,
        beta,
        batch_size,
        name,
    } = &cli.command
    else {
        unreachable!("dispatched on Train")
    };
    let loaded = read_train_config(config.as_deref())?;
    let mut cfg = loaded.config;
    if *mode == TrainMode::Sft && !loaded.explicit.contains("learning_rate") {
        cfg.optimizer.learning_rate = cpo_core::cpo::CpoConfig::sft_default().learning_rate;
    }
    if let Some(s) = steps {
        cfg.optimizer.steps = *s;
    }
    if let Some(x) = lr {
        cfg.optimizer.learning_rate = *x;
    }
    if let Some(b) = beta {
        cfg.optimizer.beta = *b;
    }
    if let Some(b) = batch_size {
        cfg.optimizer.batch_size = *b;
    }
    if let Some(s) = cli.seed {
        cfg.optimizer.seed = s;
    }
    let explicit_schedule = loaded.explicit.contains("regime_schedule");

    let mut m = RunManifest::start("train", cfg.optimizer.seed);
    let stem = name.clone().unwrap_or_else(|| match mode {
        TrainMode::Sft => "sft".into(),
        TrainMode::Cpo => "cpo".into(),
    });

    // Everything is read and validated before training starts.
    let world_vocab = if world.given() {
        Some(world_config(world)?.spec()?.vocab()?)
    } else {
        None
    };
    let reference_ck = match (mode, reference) {
        (TrainMode::Cpo, None) => {
            return Err(CliError::Input("invalid configuration: --mode cpo requires --ref".into()))
        }
        (_, Some(p)) => {
            m.input("ref", p);
            Some(load_checkpoint(p, world_vocab.as_ref())?)
        }
        (TrainMode::Sft, None) => None,
    };
    let resume_ck = match resume {
        Some(p) => {
            m.input("resume", p);
            let expected = world_vocab.as_ref().or(reference_ck.as_ref().map(|c| &c.vocab));
            Some(load_checkpoint(p, expected)?)
        }
        None => None,
    };
    let vocab = match (&resume_ck, &reference_ck, world_vocab) {
        (Some(c), _, _) | (None, Some(c), _) => c.vocab.clone(),
        (None, None, Some(v)) => v,
        (None, None, None) => world_config(world)?.spec()?.vocab()?,
    };

    let (theta, rows) = match mode {
        TrainMode::Sft => {
            let corpus = corpus
                .as_ref()
                .ok_or_else(|| CliError::Input("--mode sft requires --corpus".into()))?;
            m.input("corpus", corpus);
            let mut segments: BTreeMap<u32, Vec<_>> = BTreeMap::new();
            for s in load_samples(corpus, &vocab)? {
                segments.entry(s.regime).or_default().push(s.trajectory);
            }
            if !explicit_schedule {
                let regimes: Vec<u32> = segments.keys().copied().collect();
                cfg.optimizer = cfg.optimizer.clone().with_even_schedule(&regimes);
            }
            let theta0 = match &resume_ck {
                Some(c) => c.params.clone(),
                None => PolicyParams::init(vocab.len(), cfg.hyper(), cfg.optimizer.seed),
            };
            m.config(&cfg);
            train(&theta0, TrainData::Sft(&segments), &cfg.optimizer)?
        }
        TrainMode::Cpo => {
            if pairs.is_empty() {
                return Err(CliError::Input("--mode cpo requires --pairs".into()));
            }
            let mut segments = BTreeMap::new();
            for (r, p) in pairs.iter().enumerate() {
                m.input(&format!("pairs.{r}"), p);
                segments.insert(r as u32, load_pairs(p, &vocab)?);
            }
            if !explicit_schedule {
                let regimes: Vec<u32> = segments.keys().copied().collect();
                cfg.optimizer = cfg.optimizer.clone().with_even_schedule(&regimes);
            }
            let reference = &reference_ck.as_ref().expect("checked above").params;
            let theta0 = resume_ck.as_ref().map_or(reference, |c| &c.params);
            m.config(&cfg);
            train(
                theta0,
                TrainData::Cpo {
                    reference,
                    pairs: &segments,
                },
                &cfg.optimizer,
            )?
        }
    };

    let ck_path = out_path(cli, Path::new(&format!("{stem}.ckpt.json")));
    write(&ck_path, &Checkpoint::new(theta, &vocab).to_json())?;
    let metrics_path = out_path(cli, Path::new(&format!("{stem}.metrics.csv")));
    write(&metrics_path, &metrics_csv(&rows))?;
    m.output("checkpoint", &ck_path);
    m.output("metrics", &metrics_path);
    m.finish(&cli.out_dir, &stem)?;
    let last = rows.last().map_or(f64::NAN, |r| r.loss);
    let mode_name = if *mode == TrainMode::Sft { Mode::Sft } else { Mode::Cpo };
    println!("{mode_name}: {} steps, final loss {last}, wrote {}", rows.len(), ck_path.display());
    Ok(())
}

fn monitor(cli: &Cli) -> Result<(), CliError> {
    let Command::Monitor {
        world,
        ckpt,
        corpus,
        threshold,
        estimator,
        rollouts,
        output,
    } = &cli.command
    else {
        unreachable!("dispatched on Monitor")
    };
    let seed = cli.seed.unwrap_or(0);
    let mut m = RunManifest::start("monitor", seed);
    m.config(&serde_json::json!({
        "threshold": threshold,
        "estimator": format!("{estimator:?}").to_lowercase(),
        "rollouts": rollouts,
    }));
    if !(0.0..=1.0).contains(threshold) {
        return Err(CliError::Input(format!("threshold {threshold} outside [0, 1]")));
    }
    let ck = checkpoint_for(world, ckpt)?;
    m.input("checkpoint", ckpt);
    let samples = load_samples(corpus, &ck.vocab)?;
    m.input("corpus", corpus);

    let reports = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mode = match estimator {
                Estimator::Exact => LatentMode::Exact,
                Estimator::Rollout => LatentMode::Rollout {
                    n: *rollouts,
                    seed: record_seed(seed, i as u64),
                },
            };
            let stream = build_stream(&ck.params, &ck.vocab, &s.trajectory, mode)?;
            Ok(detect_drift(&stream, *threshold))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut out = format!("trajectory,{DRIFT_HEADER}\n");
    for (i, r) in reports.iter().enumerate() {
        for line in r.csv_rows().lines() {
            writeln!(out, "{i},{line}").expect("string write");
        }
    }
    let path = out_path(cli, output);
    write(&path, &out)?;
    m.output("drift", &path);
    m.finish(&cli.out_dir, &stem_of(output))?;
    let flagged = reports.iter().filter(|r| r.is_flagged()).count();
    println!("{flagged} of {} streams flagged at TV > {threshold}", reports.len());
    Ok(())
}

fn eval(cli: &Cli) -> Result<(), CliError> {
    let Command::Eval {
        world,
        ckpt,
        corpus,
        rouge_beta,
        max_len,
        output,
    } = &cli.command
    else {
        unreachable!("dispatched on Eval")
    };
    let mut m = RunManifest::start("eval", cli.seed.unwrap_or(0));
    m.config(&serde_json::json!({ "rouge_beta": rouge_beta, "max_len": max_len }));
    let ck = checkpoint_for(world, ckpt)?;
    m.input("checkpoint", ckpt);
    let gold: Vec<_> = load_samples(corpus, &ck.vocab)?
        .into_iter()
        .map(|s| s.trajectory)
        .collect();
    m.input("corpus", corpus);
    let report = evaluate(&ck.params, &gold, &ck.vocab, *max_len, *rouge_beta)?;
    let path = out_path(cli, output);
    write(&path, &report.to_csv())?;
    m.output("report", &path);
    m.finish(&cli.out_dir, &stem_of(output))?;
    println!("accuracy {} over {} records", report.accuracy, report.n);
    Ok(())
}
