//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or corrupt
//! file, 3 data that cannot be aligned (reference longer than the frames).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cassnat::alignment_map::{bracket_notation, collapse, trigger_masks};
use cassnat::ctc_lattice::{best_path_align, viterbi_align};
use cassnat::decoder_eval::{decode, measure_rtf_at, measure_rtf_nat, DecodeMode, EvalReport, Ranker};
use cassnat::model::{features_tensor, NatSession};
use cassnat::pipeline::{self, RunConfig, RunLayout};
use cassnat::synth_data::Split;
use cassnat::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cassnat", version, about = "CTC-alignment-based single-step non-autoregressive transducer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for utterance-parallel evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the encoder and CTC head alone.
    PretrainEnc,
    /// Train a model, starting from the pre-trained encoder if present.
    Train {
        #[arg(long, default_value = "nat", value_parser = ["nat", "at"])]
        model: String,
    },
    /// Decode a split and write hypotheses.
    Decode {
        #[command(flatten)]
        dec: DecodeArgs,
    },
    /// Score decoding modes and the autoregressive baseline.
    Evaluate {
        /// Comma-separated modes.
        #[arg(long, default_value = "bpa,bsa,esa,oracle")]
        modes: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Skip the autoregressive baseline.
        #[arg(long)]
        no_at: bool,
        /// Also measure serial real-time factors.
        #[arg(long)]
        rtf: bool,
    },
    /// Serial batch-one timing of every decoding mode.
    BenchRtf {
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of utterances to time; 0 for the whole split.
        #[arg(long, default_value_t = 0)]
        utterances: usize,
    },
    /// Dump one utterance's grid, alignment, boundaries and trigger masks.
    AlignDebug {
        #[arg(long)]
        utt: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Align against the reference instead of the best path.
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    mode: String,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    ranker: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Decode this manifest instead of a corpus split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// NAT checkpoint; defaults to the run directory's.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Json(_) | Error::Corrupt { .. } | Error::MissingParam(_) => 2,
            Error::Infeasible { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: format!("missing {what}: {}", path.display()),
        })
    }
}

fn split(name: &str) -> CliResult<Split> {
    Ok(name.parse::<Split>()?)
}

fn print(json: bool, value: &serde_json::Value, text: &str) {
    if json {
        println!("{value}");
    } else {
        print!("{text}");
    }
}

fn load_models(cfg: &RunConfig, want_at: bool) -> CliResult<(cassnat::model::CassNat, Option<cassnat::model::AtModel>)> {
    let layout = RunLayout::new(&cfg.out_dir);
    need(&layout.nat_checkpoint(), "NAT checkpoint")?;
    let nat = pipeline::load_nat(cfg, &layout.nat_checkpoint())?;
    let at = if want_at {
        need(&layout.at_checkpoint(), "AT checkpoint")?;
        Some(pipeline::load_at(cfg, &layout.at_checkpoint())?)
    } else {
        None
    };
    Ok((nat, at))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve(&cli.common)?;
    let json = cli.common.json;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build_global()
        .map_err(|e| usage(e.to_string()))?;
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg)?;
            let text = format!(
                "wrote {} train / {} dev / {} test utterances to {}\n",
                s.train,
                s.dev,
                s.test,
                cfg.data_dir.display()
            );
            print(json, &serde_json::to_value(&s).unwrap(), &text);
        }
        Command::PretrainEnc => {
            let (_, outcome) = pipeline::pretrain(&cfg)?;
            let text = format!(
                "pre-trained encoder for {} steps, best dev loss {:.4}\n",
                outcome.steps, outcome.best_dev_loss
            );
            print(json, &serde_json::to_value(&outcome).unwrap(), &text);
        }
        Command::Train { model } => {
            let outcome = if model == "at" {
                pipeline::train_at(&cfg)?.1
            } else {
                pipeline::train_nat(&cfg)?.1
            };
            let text = format!(
                "trained {model} for {} steps, best dev loss {:.4}{}\n",
                outcome.steps,
                outcome.best_dev_loss,
                if outcome.stopped_early { " (early stop)" } else { "" }
            );
            print(json, &serde_json::to_value(&outcome).unwrap(), &text);
        }
        Command::Decode { dec } => {
            let mode: DecodeMode = dec.mode.parse()?;
            if let Some(s) = dec.samples {
                cfg.samples = s;
            }
            if let Some(t) = dec.threshold {
                cfg.threshold = t;
            }
            if let Some(r) = &dec.ranker {
                cfg.ranker = r.parse::<Ranker>()?;
            }
            if let Some(b) = dec.beam {
                cfg.beam = b;
            }
            cfg.validate()?;
            let utts = match &dec.manifest {
                Some(p) => {
                    need(p, "manifest")?;
                    cassnat::synth_data::load_manifest(p)?.collect::<cassnat::Result<Vec<_>>>()?
                }
                None => pipeline::load_split(&cfg, split(&dec.split)?)?,
            };
            if mode == DecodeMode::Oracle && utts.iter().any(|u| u.tokens.is_empty()) {
                return Err(usage("oracle decoding needs reference transcripts"));
            }
            let want_at = cfg.ranker == Ranker::At;
            let (nat, at) = match &dec.checkpoint {
                Some(p) => {
                    need(p, "checkpoint")?;
                    let nat = pipeline::load_nat(&cfg, p)?;
                    let at = if want_at { load_models(&cfg, true)?.1 } else { None };
                    (nat, at)
                }
                None => load_models(&cfg, want_at)?,
            };
            let params = cfg.decode_params(mode);
            let dir = cfg.out_dir.join("decode");
            cfg.write_resolved(&dir)?;
            let hyps = utts
                .iter()
                .enumerate()
                .map(|(i, u)| decode(&nat, u, i as u64, &params, at.as_ref()))
                .collect::<cassnat::Result<Vec<_>>>()?;
            let mut text = String::new();
            for (u, h) in utts.iter().zip(&hyps) {
                let toks: Vec<String> = h.tokens.iter().map(usize::to_string).collect();
                text.push_str(&format!("{}\t{}\n", u.id, toks.join(" ")));
            }
            std::fs::write(dir.join(format!("{mode}.hyp")), &text).map_err(Error::from)?;
            let records: Vec<serde_json::Value> = utts
                .iter()
                .zip(&hyps)
                .map(|(u, h)| serde_json::json!({"id": u.id, "hypothesis": h}))
                .collect();
            print(json, &serde_json::Value::Array(records), &text);
        }
        Command::Evaluate {
            modes,
            split: name,
            no_at,
            rtf,
        } => {
            let modes = modes
                .split(',')
                .map(|m| m.trim().parse::<DecodeMode>())
                .collect::<cassnat::Result<Vec<_>>>()?;
            let utts = pipeline::load_split(&cfg, split(&name)?)?;
            if modes.contains(&DecodeMode::Oracle) && utts.iter().any(|u| u.tokens.is_empty()) {
                return Err(usage("oracle decoding needs reference transcripts"));
            }
            let (nat, at) = load_models(&cfg, !no_at || cfg.ranker == Ranker::At)?;
            let suite = pipeline::evaluate_suite(&cfg, &nat, at.as_ref(), !no_at, &utts, &modes, rtf)?;
            let dir = RunLayout::new(&cfg.out_dir).eval_dir();
            cfg.write_resolved(&dir)?;
            pipeline::write_suite(&suite, &dir)?;
            print(json, &serde_json::to_value(&suite).unwrap(), &suite.table());
        }
        Command::BenchRtf { split: name, utterances } => {
            let mut utts = pipeline::load_split(&cfg, split(&name)?)?;
            if utterances > 0 {
                utts.truncate(utterances);
            }
            let (nat, at) = load_models(&cfg, true)?;
            let at = at.expect("AT model requested");
            let mut reports = Vec::new();
            for mode in [DecodeMode::Bpa, DecodeMode::Esa, DecodeMode::Bsa] {
                let params = cfg.decode_params(mode);
                let rtf = measure_rtf_nat(&nat, &utts, &params, Some(&at))?;
                let mut r = EvalReport::from_records(mode.to_string(), Vec::new());
                r.rtf = Some(rtf);
                reports.push(r);
            }
            let mut r = EvalReport::from_records("at-greedy", Vec::new());
            r.rtf = Some(measure_rtf_at(&at, &utts)?);
            reports.push(r);
            let dir = cfg.out_dir.join("bench");
            cfg.write_resolved(&dir)?;
            let rows: Vec<serde_json::Value> = reports
                .iter()
                .map(|r| serde_json::json!({"system": r.system, "rtf": r.rtf}))
                .collect();
            let value = serde_json::Value::Array(rows);
            std::fs::write(dir.join("rtf.json"), value.to_string()).map_err(Error::from)?;
            let mut text = String::new();
            let at_rtf = reports.last().and_then(|r| r.rtf).unwrap_or(f64::NAN);
            for r in &reports {
                let v = r.rtf.unwrap_or(f64::NAN);
                text.push_str(&format!("{:<10} rtf {:.6}  speed-up vs at {:.1}x\n", r.system, v, at_rtf / v));
            }
            print(json, &value, &text);
        }
        Command::AlignDebug {
            utt,
            split: name,
            oracle,
        } => {
            let utts = pipeline::load_split(&cfg, split(&name)?)?;
            let u = utts
                .iter()
                .find(|u| u.id == utt)
                .ok_or_else(|| usage(format!("no utterance `{utt}` in {name}")))?;
            let (nat, _) = load_models(&cfg, false)?;
            let session = NatSession::new(&nat, &features_tensor(u)?)?;
            let grid = session.grid();
            let ali = if oracle {
                viterbi_align(grid, &u.tokens)?
            } else {
                best_path_align(grid)
            };
            let masks = trigger_masks(&ali.labels, cfg.model.extend_last);
            let sym = |k: usize| k.to_string();
            let mut text = String::new();
            text.push_str(&format!("utterance {} ({} encoder frames)\n", u.id, grid.frames()));
            text.push_str("grid (frame, top token, probability):\n");
            text.push_str(&grid.debug_dump(&ali.labels));
            text.push_str(&format!("alignment Z = {}\n", bracket_notation(&ali.labels, sym)));
            text.push_str(&format!("collapsed: {:?}\n", collapse(&ali.labels)));
            text.push_str(&format!("reference: {:?}\n", u.tokens));
            match &masks {
                Ok(m) => {
                    let b: Vec<usize> = m.boundaries.iter().map(|b| b + 1).collect();
                    text.push_str(&format!("boundaries (1-indexed): {b:?}\n"));
                    text.push_str(&m.to_string());
                }
                Err(e) => text.push_str(&format!("trigger masks: {e}\n")),
            }
            let value = serde_json::json!({
                "id": u.id,
                "alignment": ali,
                "collapsed": collapse(&ali.labels),
                "reference": u.tokens,
                "boundaries": masks.as_ref().map(|m| m.boundaries.clone()).unwrap_or_default(),
            });
            print(json, &value, &text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
