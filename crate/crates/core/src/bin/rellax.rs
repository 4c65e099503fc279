//! Command-line entry point: reproducible pipeline runs driven by one TOML
//! config, every stage deterministic under the root seed.
//!
//! Exit codes: 0 success, 1 contract/validation failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use rellax::checkpoint::{digest_params, dump_params};
use rellax::config::RunConfig;
use rellax::data::movielens::write_vector_file;
use rellax::data::samples::serialize_samples;
use rellax::error::Result;
use rellax::eval::{case_study, evaluate, sweep_k, sweep_l, sweep_tsv, EvalReport};
use rellax::prompt::HistoryMode;
use rellax::run::{build_pipeline, BuiltPipeline, OutputLayout};
use rellax::subr::{heterogeneity_score, retrieve_top_k_indices, write_pca};
use rellax::train::{init_trainables, train_rellax, Trainables};

#[derive(Parser)]
#[command(name = "rellax", version, about = "Retrieval-enhanced LM recommendation pipeline with CFLoRA adapters")]
struct Cli {
    /// TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the corpus, apply preprocessing, and cache the sample store.
    Ingest,
    /// Encode item vectors, fit PCA, and write the reduced index.
    Encode,
    /// Dump recent-vs-retrieved history selections for inspection.
    Retrieve {
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Number of test samples to dump.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Mean sequence heterogeneity over test samples at one K.
    Heterogeneity {
        /// `recent` or `retrieved`.
        #[arg(long, default_value = "recent")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Pretrain the conventional recommendation model; write checkpoint + digest.
    PretrainCrm,
    /// Pretrain the base language model; write checkpoint, vocabulary, digest.
    PretrainLm,
    /// Train adapters (and projectors) on the few-shot split.
    Train {
        /// `rellax`, `rella`, `tallrec`/`identity-w`, `ilora`, or `custom`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k_text: Option<usize>,
        #[arg(long)]
        l_id: Option<usize>,
    },
    /// Evaluate on the test split; optional sweeps over K or L.
    Eval {
        #[arg(long)]
        variant: Option<String>,
        /// Train first, then evaluate the trained adapters.
        #[arg(long, default_value_t = false)]
        trained: bool,
        #[arg(long, value_delimiter = ',')]
        sweep_k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_l: Option<Vec<usize>>,
    },
    /// Attention case study for one test sample.
    CaseStudy {
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = false)]
        trained: bool,
    },
    /// Run the full invariant suite.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_train_overrides(
    cfg: &mut RunConfig,
    variant: &Option<String>,
    shots: Option<usize>,
    epochs: Option<usize>,
    k_text: Option<usize>,
    l_id: Option<usize>,
) {
    if let Some(v) = variant {
        cfg.train.variant = v.clone();
    }
    if let Some(v) = shots {
        cfg.train.shots = v;
    }
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = k_text {
        cfg.train.k_text = v;
        cfg.eval.k_text = v;
    }
    if let Some(v) = l_id {
        cfg.train.l_id = v;
        cfg.eval.l_id = v;
    }
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

fn write_common(out: &OutputLayout, cfg: &RunConfig, digests: &[(&str, String)]) -> Result<()> {
    out.write("config.echo", &cfg.echo())?;
    let mut body = String::new();
    for (name, digest) in digests {
        body.push_str(&format!("{name}\t{digest}\n"));
    }
    out.write("digests.txt", &body)?;
    Ok(())
}

fn model_digests(built: &BuiltPipeline) -> Vec<(&'static str, String)> {
    let (crm, lm) = built.frozen.digests();
    vec![("crm", crm), ("base-lm", lm)]
}

fn train_pipeline(cfg: &RunConfig, built: &BuiltPipeline) -> Result<(Trainables, Vec<f64>, rellax::train::TrainAudit)> {
    let train_cfg = cfg.train_config()?;
    let trainables = init_trainables(&built.frozen, &train_cfg)?;
    train_rellax(&built.frozen, trainables, &built.train_samples(), &train_cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = OutputLayout { dir: &cli.out };

    match &cli.command {
        Command::Ingest => {
            let built = build_pipeline(&cfg)?;
            let store = serialize_samples(&built.samples);
            out.write("samples.tsv", &store)?;
            write_common(&out, &cfg, &[("samples", sha256_hex(&store))])?;
            if let Some(report) = &built.load_report {
                println!(
                    "parsed {} events, {} items, {} users; {} malformed lines",
                    report.parsed_events,
                    report.parsed_items,
                    report.parsed_users,
                    report.malformed.len()
                );
                for m in report.malformed.iter().take(10) {
                    println!("  {}:{}: {}", m.file, m.line, m.message);
                }
            }
            let train = built.train_samples().len();
            let test = built.test_samples().len();
            println!(
                "cached {} samples ({train} train / {test} test) in {}",
                built.samples.len(),
                cli.out.display()
            );
        }
        Command::Encode => {
            let built = build_pipeline(&cfg)?;
            let reduced = built.frozen.reduced.as_ref().expect("pipeline builds reduced vectors");
            std::fs::create_dir_all(&cli.out)?;
            write_vector_file(&cli.out.join("vectors.tsv"), reduced)?;
            if let Some(pca) = &built.pca {
                write_pca(&cli.out.join("pca.txt"), pca)?;
            }
            let vec_text = std::fs::read_to_string(cli.out.join("vectors.tsv"))?;
            write_common(&out, &cfg, &[("reduced-vectors", sha256_hex(&vec_text))])?;
            println!(
                "encoded {} items at d_q = {}",
                reduced.len(),
                reduced.values().next().map_or(0, Vec::len)
            );
        }
        Command::Retrieve { k, count } => {
            let built = build_pipeline(&cfg)?;
            let reduced = built.frozen.reduced.as_ref().expect("reduced vectors present");
            let mut body = String::from("sample\tmode\titems\n");
            for (idx, sample) in built.test_samples().iter().take(*count).enumerate() {
                let ids: Vec<u32> = sample.history.iter().map(|h| h.item_id).collect();
                let recent: Vec<String> = ids.iter().rev().take(*k).rev().map(|id| id.to_string()).collect();
                let retrieved: Vec<String> = retrieve_top_k_indices(&ids, sample.target_item, *k, reduced)?
                    .into_iter()
                    .map(|i| ids[i].to_string())
                    .collect();
                body.push_str(&format!("{idx}\trecent\t{}\n", recent.join(",")));
                body.push_str(&format!("{idx}\tretrieved\t{}\n", retrieved.join(",")));
            }
            out.write("retrieve.tsv", &body)?;
            write_common(&out, &cfg, &model_digests(&built))?;
            print!("{body}");
        }
        Command::Heterogeneity { mode, k } => {
            let built = build_pipeline(&cfg)?;
            let mode: HistoryMode = mode.parse()?;
            let reduced = built.frozen.reduced.as_ref();
            let mut total = 0usize;
            let mut counted = 0usize;
            for sample in built.test_samples() {
                let positions = rellax::prompt::select_history(&sample, mode, *k, reduced)?;
                let items: Vec<&rellax::data::Item> = positions
                    .iter()
                    .map(|&pos| built.frozen.catalog.item(sample.history[pos].item_id))
                    .collect::<Result<_>>()?;
                total += heterogeneity_score(&items, "genres")?;
                counted += 1;
            }
            let mean = total as f64 / counted.max(1) as f64;
            let mode_name = if mode == HistoryMode::Recent { "recent" } else { "retrieved" };
            let body = format!("mode\tk\tmean_heterogeneity\tsamples\n{mode_name}\t{k}\t{mean:.6}\t{counted}\n");
            out.write("heterogeneity.tsv", &body)?;
            write_common(&out, &cfg, &model_digests(&built))?;
            println!("{mode_name} K={k}: mean heterogeneity {mean:.4} over {counted} samples");
        }
        Command::PretrainCrm => {
            let built = build_pipeline(&cfg)?;
            out.write("crm.ckpt", &dump_params(&built.frozen.crm))?;
            write_common(&out, &cfg, &model_digests(&built))?;
            println!("crm digest {}", digest_params(&built.frozen.crm));
        }
        Command::PretrainLm => {
            let built = build_pipeline(&cfg)?;
            out.write("lm.ckpt", &dump_params(&built.frozen.lm))?;
            std::fs::create_dir_all(&cli.out)?;
            built.frozen.vocab.write_file(&cli.out.join("vocab.txt"))?;
            write_common(&out, &cfg, &model_digests(&built))?;
            println!("base-lm digest {}", digest_params(&built.frozen.lm));
        }
        Command::Train {
            variant,
            shots,
            epochs,
            k_text,
            l_id,
        } => {
            let mut cfg = cfg;
            apply_train_overrides(&mut cfg, variant, *shots, *epochs, *k_text, *l_id);
            let built = build_pipeline(&cfg)?;
            let (trained, losses, audit) = train_pipeline(&cfg, &built)?;

            let mut loss_body = String::from("step\tloss\n");
            for (i, loss) in losses.iter().enumerate() {
                loss_body.push_str(&format!("{i}\t{loss:.16e}\n"));
            }
            out.write("loss.tsv", &loss_body)?;
            out.write("adapters.ckpt", &dump_params(&trained))?;

            let knobs = cfg.eval_knobs()?;
            let report = evaluate(&built.frozen, Some(&trained), &built.test_samples(), &knobs, &cfg.echo())?;
            out.write("metrics.tsv", &format!("{}\n{}\n", EvalReport::TSV_HEADER, report.tsv_row()))?;
            out.write("scores.tsv", &report.score_lines())?;
            let mut digests = model_digests(&built);
            digests.push(("adapters", digest_params(&trained)));
            write_common(&out, &cfg, &digests)?;
            println!(
                "trained {} steps; changed {} trainable tensors",
                audit.steps,
                audit.changed_params.len()
            );
            println!("{}", report.human_readable());
        }
        Command::Eval {
            variant,
            trained,
            sweep_k: sk,
            sweep_l: sl,
        } => {
            let mut cfg = cfg;
            apply_train_overrides(&mut cfg, variant, None, None, None, None);
            let built = build_pipeline(&cfg)?;
            let trainables = if *trained { Some(train_pipeline(&cfg, &built)?.0) } else { None };
            let knobs = cfg.eval_knobs()?;
            let test = built.test_samples();
            let echo = cfg.echo();

            if let Some(ks) = sk {
                let rows = sweep_k(&built.frozen, trainables.as_ref(), &test, &knobs, ks, &echo)?;
                out.write("metrics.tsv", &sweep_tsv(&rows, "k"))?;
                for (k, report) in &rows {
                    println!("K = {k}: {}", report.human_readable());
                }
            } else if let Some(ls) = sl {
                let rows = sweep_l(&built.frozen, trainables.as_ref(), &test, &knobs, ls, &echo)?;
                out.write("metrics.tsv", &sweep_tsv(&rows, "l"))?;
                for (l, report) in &rows {
                    println!("L = {l}: {}", report.human_readable());
                }
            } else {
                let report = evaluate(&built.frozen, trainables.as_ref(), &test, &knobs, &echo)?;
                out.write("metrics.tsv", &format!("{}\n{}\n", EvalReport::TSV_HEADER, report.tsv_row()))?;
                out.write("scores.tsv", &report.score_lines())?;
                println!("{}", report.human_readable());
            }
            write_common(&out, &cfg, &model_digests(&built))?;
        }
        Command::CaseStudy { sample, trained } => {
            let built = build_pipeline(&cfg)?;
            let test = built.test_samples();
            let sample = test.get(*sample).ok_or_else(|| {
                rellax::Error::Config(format!(
                    "sample index {sample} out of range ({} test samples)",
                    test.len()
                ))
            })?;
            let trainables = if *trained { Some(train_pipeline(&cfg, &built)?.0) } else { None };
            let knobs = cfg.eval_knobs()?;
            let study = case_study(&built.frozen, trainables.as_ref(), sample, &knobs)?;
            out.write("attention.tsv", &study.tsv())?;
            write_common(&out, &cfg, &model_digests(&built))?;
            println!(
                "target: {} (label {}, score {:.4})",
                study.target_title, study.label, study.score
            );
            for (title, label, mass) in &study.items {
                let judgment = if *label == 1 { "liked" } else { "disliked" };
                println!("  {mass:.4}  {title} ({judgment})");
            }
        }
        Command::Selftest => {
            let outcomes = rellax::selftest::run_all();
            let mut failures = 0;
            for outcome in &outcomes {
                match &outcome.result {
                    Ok(()) => println!("PASS  {}", outcome.name),
                    Err(msg) => {
                        failures += 1;
                        println!("FAIL  {}: {msg}", outcome.name);
                    }
                }
            }
            if failures > 0 {
                return Err(rellax::Error::Config(format!("{failures} selftest checks failed")));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
