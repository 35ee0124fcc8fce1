//! The `find` command line.
//!
//! Every command accepts `--config FILE`, a TOML file with optional
//! `[corpus]`, `[http]` and `[train]` tables. Flags override the file and
//! the resolved configuration is echoed to standard error as TOML that can
//! be fed back through `--config`. An annotated example:
//!
//! ```toml
//! [corpus]
//! seed = 0
//! scenes = 64          # number of generated scenes
//! height = 8
//! width = 8
//! min_segments = 3
//! max_segments = 5
//! p_replace = 0.5      # rate of cross-scene visual replacement
//! parallelism = 4      # concurrent annotation requests
//!
//! [http]
//! url = "http://127.0.0.1:8000/v1/chat/completions"
//! model = "gpt-4"
//! token_env = "FIND_API_TOKEN"   # variable holding the bearer token
//! timeout_secs = 60
//! retries = 2
//!
//! [train]
//! seed = 0
//! steps = 2000
//! batch_size = 8
//! learning_rate = 0.0015
//! p_replace = 0.5
//!
//! [train.task_mix]
//! interleave_grounding = 3.0
//! interleave_retrieval = 2.0
//!
//! [train.weights]
//! theta = 1.0
//! phi = 1.0
//! intg = { alpha = 2.0, beta = 5.0, gamma = 5.0 }
//!
//! [train.model.interface]
//! d = 64
//! layers = 3
//! heads = 4
//! n_obj = 16
//! score = "cosine"
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{
    build_similarity_index, encode_rle, generate_corpus, parse_query, read_corpus, write_corpus,
    AnnotationClient, CorpusConfig, HttpClient, HttpClientConfig, MockClient,
};
use crate::encoders::InterleaveNode;
use crate::error::{Error, Result};
use crate::tasks::{ground_masks, run_interleave_retrieval, Model};
use crate::trainer::{
    evaluate, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub corpus: CorpusConfig,
    pub http: HttpClientConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot render config: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "find",
    version,
    about = "Interleaved grounding and retrieval over synthetic scenes"
)]
pub struct Cli {
    /// TOML configuration file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientKind {
    Mock,
    Http,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, annotate them and write a dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        p_replace: Option<f64>,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientKind,
        /// Chat-completion endpoint for `--client http`.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Metrics log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write a checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load a checkpoint whose model configuration differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Machine-readable report; defaults to the checkpoint path with
        /// `.metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Rank the dataset's scenes against an interleaved query.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Text with `[ref:SCENE:ANN]` visual references and optional
        /// `[ID]<phrase>` entities.
        #[arg(long)]
        query: String,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Segment each entity of a query inside one scene.
    Ground {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        query: String,
        #[arg(long)]
        force: bool,
    },
}

fn echo(cfg: &CliConfig) -> Result<()> {
    eprintln!("# resolved configuration\n{}", cfg.to_toml()?);
    Ok(())
}

fn base_config(cli: &Cli) -> Result<CliConfig> {
    match &cli.config {
        Some(p) => CliConfig::load(p),
        None => Ok(CliConfig::default()),
    }
}

fn load_model(
    ckpt: &Path,
    cfg: &CliConfig,
    explicit: bool,
    force: bool,
) -> Result<(Checkpoint, Model)> {
    let expected = explicit.then_some(&cfg.train.model);
    let ck = load_checkpoint(ckpt, expected, force)?;
    let model_cfg = expected.cloned().unwrap_or_else(|| ck.config.model.clone());
    let model = Model::with_params(model_cfg, ck.params.clone())?;
    Ok((ck, model))
}

fn query_diagnostic(raw: &str, e: &crate::error::ParseError) -> Error {
    let caret = format!("{}^", " ".repeat(e.position));
    Error::invalid(format!("cannot parse query: {e}\n  {raw}\n  {caret}"))
}

/// Text-art rendering: `#` for set cells, `.` otherwise.
pub fn mask_art(m: &crate::tensor::BoolMatrix) -> String {
    (0..m.rows())
        .map(|r| {
            (0..m.cols())
                .map(|c| if m.get(r, c) { '#' } else { '.' })
                .collect::<String>()
                + "\n"
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let explicit = cli.config.is_some();
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData {
            out: dir,
            scenes,
            seed,
            p_replace,
            client,
            url,
            parallelism,
        } => {
            let c = &mut cfg.corpus;
            c.scenes = scenes.unwrap_or(c.scenes);
            c.seed = seed.unwrap_or(c.seed);
            c.p_replace = p_replace.unwrap_or(c.p_replace);
            c.parallelism = parallelism.unwrap_or(c.parallelism);
            if let Some(u) = url {
                cfg.http.url = u;
            }
            echo(&cfg)?;
            let model = Model::new(cfg.train.model.clone(), cfg.corpus.seed)?;
            let client: Box<dyn AnnotationClient> = match client {
                ClientKind::Mock => Box::new(MockClient),
                ClientKind::Http => Box::new(HttpClient::new(cfg.http.clone())?),
            };
            let corpus =
                generate_corpus(&cfg.corpus, client.as_ref(), &model.encoders, &model.params)?;
            let index = build_similarity_index(&corpus.scenes, &model.encoders, &model.params)?;
            write_corpus(&dir, &corpus, &index)?;
            let s = corpus.stats();
            writeln!(out, "{:>8} {:>8} {:>8}", "Images", "Captions", "Entities")?;
            writeln!(out, "{:>8} {:>8} {:>8}", s.images, s.captions, s.entities)?;
        }
        Command::Train {
            data,
            out: ckpt,
            steps,
            seed,
            learning_rate,
            batch_size,
            log,
            checkpoint_every,
            resume,
            force,
        } => {
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.seed = seed.unwrap_or(t.seed);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            let corpus = read_corpus(&data)?;
            let mut trainer = match resume {
                Some(p) => {
                    let ck = load_checkpoint(&p, Some(&cfg.train.model), force)?;
                    let mut tr = Trainer::from_checkpoint(Checkpoint {
                        config: cfg.train.clone(),
                        ..ck
                    })?;
                    tr.optimizer.lr = cfg.train.learning_rate;
                    tr
                }
                None => Trainer::new(cfg.train.clone())?,
            };
            echo(&cfg)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&ckpt, ".log.jsonl"));
            let mut log = BufWriter::new(File::create(&log_path)?);
            let every = checkpoint_every.unwrap_or(0);
            while trainer.step < trainer.config.steps {
                let r = trainer.train_one(&corpus)?;
                writeln!(log, "{}", serde_json::to_string(&r)?)?;
                if r.step % 100 == 0 {
                    log::info!("step {} {} loss {:.4}", r.step, r.task, r.loss);
                }
                if every > 0 && trainer.step % every == 0 {
                    save_checkpoint(
                        &with_suffix(&ckpt, &format!(".step{}", trainer.step)),
                        &trainer.checkpoint(),
                    )?;
                }
            }
            log.flush()?;
            save_checkpoint(&ckpt, &trainer.checkpoint())?;
            writeln!(
                out,
                "trained {} steps; checkpoint {}",
                trainer.step,
                ckpt.display()
            )?;
        }
        Command::Eval {
            ckpt,
            data,
            out: report_path,
            force,
        } => {
            let (ck, model) = load_model(&ckpt, &cfg, explicit, force)?;
            cfg.train = ck.config;
            echo(&cfg)?;
            let corpus = read_corpus(&data)?;
            let report = evaluate(&model, &corpus)?;
            let path = report_path.unwrap_or_else(|| with_suffix(&ckpt, ".metrics.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            write!(out, "{}", report.table())?;
        }
        Command::Retrieve {
            ckpt,
            data,
            query,
            top,
            force,
        } => {
            let (ck, model) = load_model(&ckpt, &cfg, explicit, force)?;
            cfg.train = ck.config;
            echo(&cfg)?;
            let corpus = read_corpus(&data)?;
            let entry = parse_query(&query).map_err(|e| query_diagnostic(&query, &e))?;
            let ranked =
                run_interleave_retrieval(&model, &corpus.scenes, &[entry], &corpus.scenes)?;
            let n = top.unwrap_or(usize::MAX);
            for (id, score) in ranked[0].iter().take(n) {
                writeln!(out, "{id}\t{score:.6}")?;
            }
        }
        Command::Ground {
            ckpt,
            data,
            scene,
            query,
            force,
        } => {
            let (ck, model) = load_model(&ckpt, &cfg, explicit, force)?;
            cfg.train = ck.config;
            echo(&cfg)?;
            let corpus = read_corpus(&data)?;
            let entry = parse_query(&query).map_err(|e| query_diagnostic(&query, &e))?;
            let s = corpus
                .scene(scene)
                .ok_or_else(|| Error::invalid(format!("dataset has no scene {scene}")))?;
            let masks = ground_masks(&model, s, &entry, &corpus.scenes)?;
            let labels = entry
                .nodes()
                .iter()
                .filter(|n| n.is_entity())
                .map(|n| match n {
                    InterleaveNode::TextSpan(t) => t.clone(),
                    InterleaveNode::VisualRef { scene_id, ann_id } => {
                        format!("[ref:{scene_id}:{ann_id}]")
                    }
                    InterleaveNode::Connection(_) => unreachable!("connections are not entities"),
                });
            for (k, (label, m)) in labels.zip(&masks).enumerate() {
                writeln!(out, "entity {k}: {label}")?;
                write!(out, "{}", mask_art(m))?;
                writeln!(out, "rle: {}", serde_json::to_string(&encode_rle(m))?)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
