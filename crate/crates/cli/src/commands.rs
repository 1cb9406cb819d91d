use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tt_core::decode::{transcribe, BigramLm, DecodeConfig, Fusion, Strategy};
use tt_core::frontend::{stack_subsample, FrontendConfig};
use tt_core::model::{ModelConfig, TransducerModel};
use tt_core::selftest;
use tt_core::tasks::{edit_distance, read_dataset, write_dataset, Dataset, SyntheticTask, SyntheticTaskConfig, Utterance};
use tt_core::tensor::Rng;
use tt_core::train::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use tt_core::transducer::{set_recursion_fault, Vocab};

use crate::config::RunConfig;
use crate::{CliError, DecodeArgs, Mode};

fn print_resolved(doc: &str, seed: Option<u64>) {
    eprintln!("# resolved config");
    eprint!("{doc}");
    match seed {
        Some(s) => eprintln!("# seed = {s}"),
        None => eprintln!("# seed = none (deterministic)"),
    }
}

fn read_data(path: &Path, key: &str) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| CliError::Usage(format!("`{key}`: cannot read {}: {e}", path.display())))
}

/// Stacks and subsamples every utterance, checking it fits the model.
fn prepare(data: &Dataset, model: &ModelConfig, frontend: &FrontendConfig, key: &str) -> Result<Vec<Utterance>, CliError> {
    if data.vocab_size != model.vocab_size {
        return Err(CliError::Usage(format!(
            "`{key}`: dataset vocabulary {} does not match the model's {}",
            data.vocab_size, model.vocab_size
        )));
    }
    data.utterances
        .iter()
        .map(|u| {
            let d = u.features.cols();
            if frontend.output_dim(d) != model.audio.input_dim {
                return Err(CliError::Usage(format!(
                    "`{key}`: utterance `{}` has {d}-dimensional features; the model expects {}",
                    u.id,
                    model.audio.input_dim / frontend.stack
                )));
            }
            Ok(Utterance {
                id: u.id.clone(),
                features: stack_subsample(&u.features, frontend.stack, frontend.subsample)?,
                labels: u.labels.clone(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct MetricsRecord {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    wall_clock_s: f64,
}

pub fn train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    print_resolved(&cfg.to_toml(), Some(cfg.seed));
    let train_path = cfg
        .paths
        .train_data
        .as_ref()
        .ok_or_else(|| CliError::Usage("config error at `paths.train_data`: required for training".into()))?;
    let model_config = cfg.model_config();
    let data = prepare(&read_data(train_path, "paths.train_data")?, &model_config, &cfg.frontend, "paths.train_data")?;
    if data.is_empty() {
        return Err(CliError::Usage("`paths.train_data`: dataset is empty".into()));
    }
    let dev = match &cfg.paths.dev_data {
        Some(p) => Some(prepare(&read_data(p, "paths.dev_data")?, &model_config, &cfg.frontend, "paths.dev_data")?),
        None => None,
    };

    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let model = TransducerModel::new(model_config, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.frontend, cfg.schedule, cfg.train_config())?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl")).map_err(tt_core::Error::from)?);
    let start = Instant::now();
    let every = cfg.train.checkpoint_every;
    let mut last_loss = f64::NAN;
    trainer.fit(&data, |t, r| {
        let record = MetricsRecord {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            grad_norm: r.grad_norm,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).map_err(|e| tt_core::Error::InvalidArgument(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        last_loss = r.loss;
        if every > 0 && t.step() % every == 0 {
            save_checkpoint(&t.model, &t.frontend, &out.join(format!("checkpoint-{:06}.ttck", t.step())))?;
        }
        Ok(())
    })?;
    let final_path = out.join("model.ttck");
    save_checkpoint(&trainer.model, &trainer.frontend, &final_path)?;
    println!(
        "trained {} steps in {:.1}s, final loss {last_loss:.4}, checkpoint {}",
        trainer.step(),
        start.elapsed().as_secs_f64(),
        final_path.display()
    );
    if let Some(dev) = dev {
        let decode = cfg.decode;
        let hyps = dev
            .iter()
            .map(|u| transcribe(&trainer.model, &u.features, Strategy::Greedy, decode.max_symbols_per_frame))
            .collect::<Result<Vec<_>, _>>()?;
        let report = Report::new(&dev, &hyps, trainer.model.vocab_size())?;
        println!("dev error rate {:.4} over {} utterances", report.error_rate, dev.len());
    }
    Ok(())
}

struct Decoded {
    checkpoint: Checkpoint,
    utterances: Vec<Utterance>,
    hyps: Vec<Vec<usize>>,
}

fn decode_options(args: &DecodeArgs) -> Result<DecodeConfig, CliError> {
    let mut d = match &args.config {
        Some(p) => RunConfig::load(p)?.decode,
        None => DecodeConfig::default(),
    };
    if let Some(v) = args.beam_width {
        d.beam_width = v;
    }
    if let Some(v) = args.max_symbols_per_frame {
        d.max_symbols_per_frame = v;
    }
    if let Some(v) = args.lm_weight {
        d.lm_weight = v;
    }
    if let Some(v) = args.length_bonus {
        d.length_bonus = v;
    }
    if d.beam_width == 0 {
        return Err(CliError::Usage("`--beam-width` must be at least 1".into()));
    }
    Ok(d)
}

fn run_decode(args: &DecodeArgs) -> Result<Decoded, CliError> {
    let options = decode_options(args)?;
    let checkpoint = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", args.checkpoint.display())))?;
    let model = &checkpoint.model;

    #[derive(Serialize)]
    struct Resolved<'a> {
        mode: String,
        model: &'a ModelConfig,
        frontend: &'a FrontendConfig,
        decode: &'a DecodeConfig,
    }
    let resolved = Resolved {
        mode: format!("{:?}", args.mode).to_lowercase(),
        model: &model.config,
        frontend: &checkpoint.frontend,
        decode: &options,
    };
    print_resolved(&toml::to_string(&resolved).unwrap_or_default(), None);

    let mask = model.config.audio.mask;
    if args.mode == Mode::Stream && !(mask.left.is_limited() && mask.right.is_limited()) {
        return Err(CliError::Usage(format!(
            "stream mode needs a finite audio window; the checkpoint has left = {}, right = {}",
            mask.left, mask.right
        )));
    }
    let fusion_on = options.lm_weight != 0.0 || options.length_bonus != 0.0;
    if fusion_on && args.mode != Mode::Beam {
        eprintln!("note: fusion settings apply to beam mode only and are ignored");
    }
    let lm = match (&args.lm_data, options.lm_weight != 0.0 && args.mode == Mode::Beam) {
        (Some(p), _) => {
            let data = read_data(p, "--lm-data")?;
            Some(BigramLm::estimate(&data.label_sequences(), model.vocab_size(), 0.5)?)
        }
        (None, true) => return Err(CliError::Usage("`--lm-weight` is non-zero but no `--lm-data` was given".into())),
        (None, false) => None,
    };
    let strategy = match args.mode {
        Mode::Greedy => Strategy::Greedy,
        Mode::Stream => Strategy::Stream,
        Mode::Beam => Strategy::Beam {
            width: options.beam_width,
            fusion: Fusion {
                lm_weight: options.lm_weight,
                length_bonus: options.length_bonus,
                lm: lm.as_ref().map(|l| l as _),
            },
        },
    };

    let data = read_data(&args.data, "--data")?;
    let mut utterances = prepare(&data, &model.config, &checkpoint.frontend, "--data")?;
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    let hyps = utterances
        .iter()
        .map(|u| transcribe(model, &u.features, strategy, options.max_symbols_per_frame))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Decoded {
        checkpoint,
        utterances,
        hyps,
    })
}

pub fn decode(args: &DecodeArgs, output: Option<&Path>) -> Result<(), CliError> {
    let d = run_decode(args)?;
    let vocab = Vocab::with_symbols(d.checkpoint.model.vocab_size() - 1)?;
    let mut text = String::new();
    for (u, h) in d.utterances.iter().zip(&d.hyps) {
        text.push_str(&format!("{}\t{}\n", u.id, vocab.render(h)));
    }
    match output {
        Some(p) => fs::write(p, text).map_err(tt_core::Error::from)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct UtteranceReport {
    id: String,
    reference: String,
    hypothesis: String,
    edits: usize,
}

#[derive(Serialize)]
struct Report {
    error_rate: f64,
    edits: usize,
    reference_symbols: usize,
    utterances: usize,
    per_utterance: Vec<UtteranceReport>,
}

impl Report {
    fn new(utterances: &[Utterance], hyps: &[Vec<usize>], vocab_size: usize) -> Result<Self, CliError> {
        let vocab = Vocab::with_symbols(vocab_size - 1)?;
        let per_utterance: Vec<UtteranceReport> = utterances
            .iter()
            .zip(hyps)
            .map(|(u, h)| UtteranceReport {
                id: u.id.clone(),
                reference: vocab.render(&u.labels),
                hypothesis: vocab.render(h),
                edits: edit_distance(&u.labels, h),
            })
            .collect();
        let edits = per_utterance.iter().map(|r| r.edits).sum();
        let reference_symbols: usize = utterances.iter().map(|u| u.labels.len()).sum();
        if reference_symbols == 0 {
            return Err(CliError::Usage("error rate needs at least one reference symbol".into()));
        }
        Ok(Self {
            error_rate: edits as f64 / reference_symbols as f64,
            edits,
            reference_symbols,
            utterances: utterances.len(),
            per_utterance,
        })
    }
}

pub fn eval(args: &DecodeArgs) -> Result<(), CliError> {
    let d = run_decode(args)?;
    let report = Report::new(&d.utterances, &d.hyps, d.checkpoint.model.vocab_size())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{json}");
    Ok(())
}

pub fn selftest(inject_fault: bool) -> Result<(), CliError> {
    print_resolved(&format!("inject_fault = {inject_fault}\n"), None);
    set_recursion_fault(inject_fault);
    let start = Instant::now();
    let results = selftest::run_all();
    set_recursion_fault(false);
    for r in &results {
        println!("{r}");
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

pub fn gen_data(config_path: &Path, out: &PathBuf, split: Option<&str>, utterances: Option<usize>) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Usage(format!("cannot read task config {}: {e}", config_path.display())))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| CliError::Usage(format!("task config: {e}")))?;
    let mut cfg: SyntheticTaskConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        CliError::Usage(format!("config error at `{key}`: {}", e.into_inner().message()))
    })?;
    if let Some(n) = utterances {
        cfg.utterances = n;
    }
    cfg.validate("task")?;
    print_resolved(&toml::to_string(&cfg).unwrap_or_default(), Some(cfg.seed));
    let data = match split {
        None => tt_core::tasks::gen_synthetic(&cfg)?,
        Some(name) => {
            let seed = Rng::new(cfg.seed).fork(name).seed();
            SyntheticTask::new(cfg.clone())?.generate(cfg.utterances, seed, &format!("{name}-"))?
        }
    };
    write_dataset(&data, out)?;
    println!("wrote {} utterances to {}", data.len(), out.display());
    Ok(())
}
