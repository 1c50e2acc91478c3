//! Command-line surface: corpus generation, aligner training, joint model
//! training, translation, and evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use vismt::aligner::{train_ibm1, AlignmentTable, Direction};
use vismt::autodiff::ParamStore;
use vismt::config::RunConfig;
use vismt::corpus::{self, Instance, Side, Vocab, WorldSpec};
use vismt::error::{Error, Result};
use vismt::eval::{
    aligner_accuracy, beta_separation, bleu, gold_vad_pairs, vad, VadInput, VadReport,
};
use vismt::model::{
    dump_records, DecodeStrategy, Model, ModelConfig, ModelKind, RunMode, Weighting,
};
use vismt::train::{
    fit, teacher_forced_values, CheckpointMeta, EncodedInstance, RegMode, TrainDirections,
};

#[derive(Parser)]
#[command(
    name = "vismt",
    version,
    about = "Bidirectional multimodal translation with visual agreement regularization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirArg {
    Fwd,
    Bwd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    None,
    Hard,
    Soft,
}

impl From<ModeArg> for RegMode {
    fn from(m: ModeArg) -> RegMode {
        match m {
            ModeArg::None => RegMode::None,
            ModeArg::Hard => RegMode::Hard,
            ModeArg::Soft => RegMode::Soft,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightArg {
    Adaptive,
    Frozen,
}

impl From<WeightArg> for Weighting {
    fn from(w: WeightArg) -> Weighting {
        match w {
            WeightArg::Adaptive => Weighting::Adaptive,
            WeightArg::Frozen => Weighting::Frozen,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Multimodal,
    Textonly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParamsArg {
    Best,
    Last,
}

impl ParamsArg {
    fn tag(self) -> &'static str {
        match self {
            ParamsArg::Best => "best",
            ParamsArg::Last => "last",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grounded bilingual corpus.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Regions per image.
        #[arg(long, default_value_t = 4)]
        regions: usize,
        #[arg(long, default_value = "default")]
        world: String,
        /// Override the preset's region noise level.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an IBM Model 1 alignment table and dump it as text.
    Align {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, value_enum, default_value_t = DirArg::Fwd)]
        direction: DirArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train forward and backward models.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        weighting: Option<WeightArg>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        subspaces: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        dev_fraction: Option<f64>,
    },
    /// Translate a corpus with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = DirArg::Fwd)]
        direction: DirArg,
        /// Beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long, value_enum, default_value_t = ParamsArg::Best)]
        params: ParamsArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses and, with a checkpoint, report agreement diagnostics.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = DirArg::Fwd)]
        direction: DirArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ParamsArg::Best)]
        params: ParamsArg,
        /// Alignment table dumps for mutual pairs when gold links are absent.
        #[arg(long)]
        align_fwd: Option<PathBuf>,
        #[arg(long)]
        align_bwd: Option<PathBuf>,
        /// Write the forward model's attention dump as JSON lines.
        #[arg(long)]
        attention_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            seed,
            count,
            regions,
            world,
            sigma,
            out,
        } => {
            let mut spec = WorldSpec::preset(&world, seed)?;
            if let Some(s) = sigma {
                spec.sigma = s;
            }
            let instances = corpus::generate(&spec, count, regions)?;
            corpus::save(&instances, &out)?;
            println!("wrote {} instances to {}", instances.len(), out.display());
            Ok(())
        }
        Cmd::Align {
            corpus: corpus_path,
            iterations,
            direction,
            out,
        } => {
            let instances = corpus::load(&corpus_path)?;
            let pairs: Vec<(Vec<String>, Vec<String>)> = instances
                .iter()
                .map(|i| match direction {
                    DirArg::Fwd => (i.src.clone(), i.tgt.clone()),
                    DirArg::Bwd => (i.tgt.clone(), i.src.clone()),
                })
                .collect();
            let dir = match direction {
                DirArg::Fwd => Direction::Fwd,
                DirArg::Bwd => Direction::Bwd,
            };
            let table = train_ibm1(&pairs, iterations, dir)?;
            table.save(&out)?;
            println!(
                "trained {:?} table on {} pairs ({} skipped), log-likelihood {:.6}",
                dir,
                pairs.len() - table.skipped_pairs,
                table.skipped_pairs,
                table.log_likelihoods.last().unwrap()
            );
            if matches!(direction, DirArg::Fwd)
                && instances.iter().all(|i| i.gold_align.is_some())
            {
                let acc = aligner_accuracy(&table, &instances)?;
                println!("gold one-to-one visual accuracy {acc:.4}");
            }
            Ok(())
        }
        Cmd::Train {
            corpus: corpus_path,
            config,
            mode,
            weighting,
            kind,
            seed,
            out,
            epochs,
            batch_size,
            lr,
            lambda1,
            lambda2,
            d,
            subspaces,
            depth,
            dropout,
            dev_fraction,
        } => {
            let instances = corpus::load(&corpus_path)?;
            let mut run_cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(m) = mode {
                run_cfg.train.mode = m.into();
            }
            if let Some(w) = weighting {
                run_cfg.model.weighting = w.into();
            }
            if let Some(k) = kind {
                run_cfg.model.kind = match k {
                    KindArg::Multimodal => ModelKind::Multimodal,
                    KindArg::Textonly => ModelKind::TextOnly,
                };
            }
            if let Some(v) = epochs {
                run_cfg.train.epochs = v;
            }
            if let Some(v) = batch_size {
                run_cfg.train.batch_size = v;
            }
            if let Some(v) = lr {
                run_cfg.train.lr = v;
            }
            if let Some(v) = lambda1 {
                run_cfg.train.lambda1 = v;
            }
            if let Some(v) = lambda2 {
                run_cfg.train.lambda2 = v;
            }
            if let Some(v) = d {
                run_cfg.model.d = v;
            }
            if let Some(v) = subspaces {
                run_cfg.model.subspaces = v;
            }
            if let Some(v) = depth {
                run_cfg.model.depth = v;
            }
            if let Some(v) = dropout {
                run_cfg.train.dropout = v;
            }
            if let Some(v) = dev_fraction {
                run_cfg.train.dev_fraction = v;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("run_config.toml"), run_cfg.to_toml())?;
            let train_cfg = run_cfg.train_config(seed);
            let outcome = fit(
                &instances,
                &run_cfg.settings(),
                &train_cfg,
                TrainDirections::Both,
                Some(&out),
            )?;
            let mut log = String::new();
            for line in run_cfg.to_toml().lines() {
                writeln!(log, "# {line}").unwrap();
            }
            writeln!(log, "# seed = {seed}").unwrap();
            for record in &outcome.log {
                writeln!(log, "{record}").unwrap();
                println!("{record}");
            }
            writeln!(log, "# best_epoch = {}", outcome.best_epoch).unwrap();
            std::fs::write(out.join("train.log"), log)?;
            println!("best epoch {}", outcome.best_epoch);
            Ok(())
        }
        Cmd::Translate {
            checkpoint,
            corpus: corpus_path,
            direction,
            beam,
            max_len,
            params,
            out,
        } => {
            let instances = corpus::load(&corpus_path)?;
            let loaded = Checkpoint::load(&checkpoint, direction, params)?;
            let strategy = if beam <= 1 {
                DecodeStrategy::Greedy
            } else {
                DecodeStrategy::Beam(beam)
            };
            let mut lines = String::new();
            for inst in &instances {
                let tokens = loaded.translate(inst, direction, max_len, strategy)?;
                writeln!(lines, "{}", tokens.join(" ")).unwrap();
            }
            std::fs::write(&out, lines)?;
            println!("wrote {} translations to {}", instances.len(), out.display());
            Ok(())
        }
        Cmd::Eval {
            hyp,
            corpus: corpus_path,
            direction,
            checkpoint,
            params,
            align_fwd,
            align_bwd,
            attention_out,
            out,
        } => cmd_eval(
            &hyp,
            &corpus_path,
            direction,
            checkpoint.as_deref(),
            params,
            align_fwd.as_deref(),
            align_bwd.as_deref(),
            attention_out.as_deref(),
            &out,
        ),
    }
}

/// A trained direction: model, parameters, and both vocabularies.
struct Checkpoint {
    model: Model,
    store: ParamStore,
    input_vocab: Vocab,
    output_vocab: Vocab,
}

impl Checkpoint {
    fn load(dir: &Path, direction: DirArg, params: ParamsArg) -> Result<Checkpoint> {
        let meta_text = std::fs::read_to_string(dir.join("model.toml"))?;
        let meta: CheckpointMeta = toml::from_str(&meta_text).map_err(|e| Error::Parse {
            path: dir.join("model.toml").display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let src_vocab = Vocab::load(&dir.join("src.vocab"))?;
        let tgt_vocab = Vocab::load(&dir.join("tgt.vocab"))?;
        let (input_vocab, output_vocab, file) = match direction {
            DirArg::Fwd => (src_vocab, tgt_vocab, format!("fwd.{}.params", params.tag())),
            DirArg::Bwd => (tgt_vocab, src_vocab, format!("bwd.{}.params", params.tag())),
        };
        let store = ParamStore::load(&dir.join(file))?;
        let model = Model::new(ModelConfig {
            d: meta.settings.d,
            subspaces: meta.settings.subspaces,
            feature_dim: meta.feature_dim,
            src_vocab: input_vocab.size(),
            tgt_vocab: output_vocab.size(),
            depth: meta.settings.depth,
            kind: meta.settings.kind,
            weighting: meta.settings.weighting,
        })?;
        Ok(Checkpoint {
            model,
            store,
            input_vocab,
            output_vocab,
        })
    }

    fn translate(
        &self,
        inst: &Instance,
        direction: DirArg,
        max_len: usize,
        strategy: DecodeStrategy,
    ) -> Result<Vec<String>> {
        let input_tokens = match direction {
            DirArg::Fwd => &inst.src,
            DirArg::Bwd => &inst.tgt,
        };
        let ids = corpus::encode(input_tokens, &self.input_vocab);
        let enc = self
            .model
            .encode(&self.store, &ids, &inst.regions, &mut RunMode::Eval)?;
        let co = match &enc.visual {
            Some(v) => Some(self.model.co_attend(&self.store, &enc.text, v)?),
            None => None,
        };
        let out = self
            .model
            .translate(&self.store, &enc, co.as_ref(), max_len, strategy)?;
        Ok(out
            .iter()
            .map(|&id| self.output_vocab.token(id).to_string())
            .collect())
    }
}

#[derive(serde::Serialize)]
struct EvalSummary {
    bleu: f64,
    vad: Option<VadReport>,
    beta_visual: Option<f64>,
    beta_nonvisual: Option<f64>,
    aligner_accuracy: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    hyp: &Path,
    corpus_path: &Path,
    direction: DirArg,
    checkpoint: Option<&Path>,
    params: ParamsArg,
    align_fwd: Option<&Path>,
    align_bwd: Option<&Path>,
    attention_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let instances = corpus::load(corpus_path)?;
    let hyp_text = std::fs::read_to_string(hyp)?;
    let hypotheses: Vec<Vec<String>> = hyp_text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let references: Vec<Vec<String>> = instances
        .iter()
        .map(|i| match direction {
            DirArg::Fwd => i.tgt.clone(),
            DirArg::Bwd => i.src.clone(),
        })
        .collect();
    let bleu_score = bleu(&hypotheses, &references, 4)?;

    let mut summary = EvalSummary {
        bleu: bleu_score,
        vad: None,
        beta_visual: None,
        beta_nonvisual: None,
        aligner_accuracy: None,
    };

    let tables = match (align_fwd, align_bwd) {
        (Some(f), Some(b)) => Some((
            AlignmentTable::load(f, Direction::Fwd)?,
            AlignmentTable::load(b, Direction::Bwd)?,
        )),
        _ => None,
    };

    if let Some(dir) = checkpoint {
        let fwd = Checkpoint::load(dir, DirArg::Fwd, params)?;
        let bwd = Checkpoint::load(dir, DirArg::Bwd, params)?;
        if fwd.model.cfg.kind == ModelKind::Multimodal {
            let mut inputs = Vec::with_capacity(instances.len());
            let mut fwd_traces = Vec::with_capacity(instances.len());
            let mut masks = Vec::with_capacity(instances.len());
            let mut dump = String::new();
            for inst in &instances {
                let enc_fwd = EncodedInstance {
                    id: inst.id.clone(),
                    regions: inst.regions.clone(),
                    src_ids: corpus::encode(&inst.src, &fwd.input_vocab),
                    tgt_ids: corpus::encode(&inst.tgt, &fwd.output_vocab),
                    src_tokens: inst.src.clone(),
                    tgt_tokens: inst.tgt.clone(),
                };
                let fwd_vals = teacher_forced_values(&fwd.model, &fwd.store, &enc_fwd)?;
                let bwd_vals =
                    teacher_forced_values(&bwd.model, &bwd.store, &enc_fwd.swapped())?;
                if attention_out.is_some() {
                    for record in dump_records(&fwd_vals, &inst.tgt) {
                        let line = serde_json::to_string(&record)
                            .map_err(|e| Error::contract(e.to_string()))?;
                        dump.push_str(&line);
                        dump.push('\n');
                    }
                }
                let (pairs, pair_visual) = if inst.gold_align.is_some() {
                    gold_vad_pairs(inst)?
                } else if let Some((tf, tb)) = &tables {
                    let pairs = vismt::aligner::mutual_pairs(tf, tb, &inst.src, &inst.tgt);
                    let flags = match (inst.visual_mask(Side::Src), inst.visual_mask(Side::Tgt)) {
                        (Some(sm), Some(tm)) => {
                            pairs.iter().map(|&(s, t)| sm[s] && tm[t]).collect()
                        }
                        _ => vec![false; pairs.len()],
                    };
                    (pairs, flags)
                } else {
                    return Err(Error::contract(
                        "eval: corpus has no gold alignments; pass --align-fwd/--align-bwd",
                    ));
                };
                if let Some(mask) = inst.visual_mask(Side::Tgt) {
                    masks.push(mask.to_vec());
                    fwd_traces.push(fwd_vals.clone());
                }
                inputs.push(VadInput {
                    id: inst.id.clone(),
                    fwd: fwd_vals,
                    bwd: bwd_vals,
                    pairs,
                    pair_visual,
                });
            }
            if let Some(path) = attention_out {
                std::fs::write(path, dump)?;
            }
            summary.vad = Some(vad(&inputs)?);
            let (bv, bn) = beta_separation(&fwd_traces, &masks);
            summary.beta_visual = bv;
            summary.beta_nonvisual = bn;
        }
    }

    if let Some(path) = align_fwd {
        if instances.iter().all(|i| i.gold_align.is_some()) {
            let table = AlignmentTable::load(path, Direction::Fwd)?;
            summary.aligner_accuracy = Some(aligner_accuracy(&table, &instances)?);
        }
    }

    let mut report = String::new();
    writeln!(report, "bleu {bleu_score:.4}").unwrap();
    match &summary.vad {
        Some(v) => {
            writeln!(report, "vad_visual {}", fmt_opt(v.vad_visual)).unwrap();
            writeln!(report, "vad_nonvisual {}", fmt_opt(v.vad_nonvisual)).unwrap();
            writeln!(report, "vad_visual_pairs {}", v.visual_pairs).unwrap();
            writeln!(report, "vad_nonvisual_pairs {}", v.nonvisual_pairs).unwrap();
        }
        None => {
            writeln!(report, "vad_visual na").unwrap();
            writeln!(report, "vad_nonvisual na").unwrap();
        }
    }
    writeln!(report, "beta_visual {}", fmt_opt(summary.beta_visual)).unwrap();
    writeln!(report, "beta_nonvisual {}", fmt_opt(summary.beta_nonvisual)).unwrap();
    writeln!(
        report,
        "aligner_accuracy {}",
        fmt_opt(summary.aligner_accuracy)
    )
    .unwrap();
    std::fs::write(out, &report)?;
    let json = serde_json::to_string(&summary).map_err(|e| Error::contract(e.to_string()))?;
    let mut json_file = std::fs::File::create(out.with_extension("json"))?;
    writeln!(json_file, "{json}")?;
    print!("{report}");
    Ok(())
}
