use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use seqlab::augment::{expand_training_set, ShuffleLimit};
use seqlab::config;
use seqlab::corpus::synth::SynthSpec;
use seqlab::corpus::{read_conll, to_conll, write_conll, LabeledSequence};
use seqlab::error::{Error, Result};
use seqlab::eval::{evaluate, metric_for, render_text, tsv_row, TSV_HEADER};
use seqlab::grid;
use seqlab::model::Tagger;
use seqlab::run;

#[derive(Parser)]
#[command(
    name = "seqlab",
    version,
    about = "Sequence labeling with order-sensitive and order-reduced encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tagger and score every configured dataset
    Train {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. --set model.d_model=32
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Random seed; wins over the config and any --set
        #[arg(long)]
        seed: Option<u64>,
        /// Where the model, reports, and resolved config land
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a saved model on a CoNLL file
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Gold-labeled CoNLL file
        #[arg(long)]
        data: PathBuf,
        /// Also score shuffled copies with this displacement limit
        /// (an integer or "inf"); repeatable
        #[arg(long = "noisy-k", value_name = "K")]
        noisy_ks: Vec<String>,
        #[arg(long, default_value_t = 42)]
        noise_seed: u64,
        /// Dataset name used in the report
        #[arg(long, default_value = "eval")]
        name: String,
        /// Write report.tsv and report.txt here (stdout only if omitted)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Tag a CoNLL file with a saved model
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CoNLL file (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a CoNLL file with order-shuffled copies of each sentence
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shuffled copies per sentence (originals are kept)
        #[arg(long, default_value_t = 10)]
        copies: usize,
        /// Displacement limit: an integer or "inf"
        #[arg(long, default_value = "inf")]
        k: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Generate the synthetic transfer corpus (built-in language, or --config)
    Synth {
        /// Corpus spec (TOML); the built-in language when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the spec's seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an ablation grid: every cell is validated up front, then each
    /// (cell, seed) trains and scores in sequence
    Grid {
        /// Grid config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override into the grid file, e.g. --set base.train.epochs=5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Collapse the seed list to this single seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_limit(s: &str) -> Result<ShuffleLimit> {
    match s {
        "inf" | "unbounded" => Ok(ShuffleLimit::Unbounded),
        _ => s
            .parse::<usize>()
            .map(ShuffleLimit::Finite)
            .map_err(|_| Error::Config(format!("shuffle limit {s:?} is not an integer or inf"))),
    }
}

fn cmd_train(config: &Path, sets: &[String], seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let config = config::resolve_file(config, sets, seed)?;
    let data = run::load_data(&config.data)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved_config.toml"), config.canonical_toml())?;

    let result = run::run(&config, &data, |e| {
        eprintln!(
            "epoch {:>3}  train loss {:>9.4}  dev {:.4}",
            e.epoch, e.train_loss, e.dev_score
        );
    })?;

    let mut log = String::from("epoch\ttrain_loss\tdev_score\n");
    for e in &result.outcome.history {
        log.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.train_loss, e.dev_score));
    }
    std::fs::write(out_dir.join("training_log.tsv"), log)?;
    result.tagger.save(&out_dir.join("model.json"))?;
    run::write_reports(out_dir, &result)?;

    print!("{}", run::render_run_text(&result));
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(
    model: &Path,
    data: &Path,
    noisy_ks: &[String],
    noise_seed: u64,
    name: &str,
    out_dir: Option<&Path>,
) -> Result<()> {
    let tagger = Tagger::load(model)?;
    let gold = read_conll(data)?;
    let metric = metric_for(&gold);

    let mut reports = Vec::new();
    let mut score = |set_name: String, set: &[LabeledSequence]| -> Result<()> {
        let preds = tagger.predict_corpus(set)?;
        reports.push((set_name, evaluate(set, &preds, metric)));
        Ok(())
    };
    score(name.to_string(), &gold)?;
    for raw in noisy_ks {
        let k = parse_limit(raw)?;
        let tag = match k {
            ShuffleLimit::Finite(k) => format!("k{k}"),
            ShuffleLimit::Unbounded => "kinf".to_string(),
        };
        let noisy = seqlab::augment::noisy_copy(&gold, k, noise_seed);
        score(format!("{name}_{tag}"), &noisy)?;
    }

    for (n, r) in &reports {
        print!("{}", render_text(n, r));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut tsv = String::from(TSV_HEADER);
        tsv.push('\n');
        let mut txt = String::new();
        for (n, r) in &reports {
            tsv.push_str(&tsv_row(n, r));
            tsv.push('\n');
            txt.push_str(&render_text(n, r));
            txt.push('\n');
        }
        std::fs::write(dir.join("report.tsv"), tsv)?;
        std::fs::write(dir.join("report.txt"), txt)?;
        println!("reports in {}", dir.display());
    }
    Ok(())
}

fn cmd_predict(model: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let tagger = Tagger::load(model)?;
    let input = read_conll(data)?;
    let tagged: Vec<LabeledSequence> = input
        .iter()
        .map(|s| {
            Ok(LabeledSequence {
                tokens: s.tokens.clone(),
                labels: tagger.predict(&s.tokens)?,
            })
        })
        .collect::<Result<_>>()?;
    match out {
        Some(path) => {
            write_conll(path, &tagged)?;
            println!("{} sentences tagged into {}", tagged.len(), path.display());
        }
        None => print!("{}", to_conll(&tagged)),
    }
    Ok(())
}

fn cmd_augment(data: &Path, out: &Path, copies: usize, k: &str, seed: u64) -> Result<()> {
    let limit = parse_limit(k)?;
    let input = read_conll(data)?;
    let expanded = expand_training_set(&input, copies, limit, seed);
    write_conll(out, &expanded)?;
    println!(
        "{} sentences -> {} ({} copies at k={k}) into {}",
        input.len(),
        expanded.len(),
        copies,
        out.display()
    );
    Ok(())
}

fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let mut spec = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            seqlab::corpus::synth::parse_spec(&text)?
        }
        None => SynthSpec::builtin(seed.unwrap_or(42)),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = spec.generate()?;
    std::fs::create_dir_all(out_dir)?;
    let spec_text = toml::to_string_pretty(&spec)
        .map_err(|e| Error::Config(format!("cannot render corpus spec: {e}")))?;
    std::fs::write(out_dir.join("synth_spec.toml"), spec_text)?;
    for (file, set) in [
        ("source_train.conll", &corpus.train),
        ("source_dev.conll", &corpus.dev),
        ("source_test.conll", &corpus.test),
        ("target_train.conll", &corpus.target_train),
        ("target_test.conll", &corpus.target_test),
    ] {
        write_conll(&out_dir.join(file), set)?;
        println!("{file}: {} sentences", set.len());
    }
    Ok(())
}

fn cmd_grid(config: &Path, sets: &[String], seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut tree: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("grid file is not valid TOML: {e}")))?;
    for setting in sets {
        config::apply_override(&mut tree, setting)?;
    }
    if let Some(s) = seed {
        config::set_path(&mut tree, "seeds", toml::Value::Array(vec![toml::Value::Integer(s as i64)]))?;
    }
    let rendered = toml::to_string_pretty(&tree)
        .map_err(|e| Error::Config(format!("cannot render grid config: {e}")))?;
    let spec = grid::grid_from_value(tree)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("grid_config.toml"), rendered)?;
    let outcome = grid::run_grid(&spec, |msg| eprintln!("{msg}"))?;
    grid::write_grid_reports(out_dir, &outcome)?;
    print!("{}", outcome.to_text());
    println!("grid reports in {}", out_dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, sets, seed, out_dir } => {
            cmd_train(&config, &sets, seed, &out_dir)
        }
        Command::Eval { model, data, noisy_ks, noise_seed, name, out_dir } => {
            cmd_eval(&model, &data, &noisy_ks, noise_seed, &name, out_dir.as_deref())
        }
        Command::Predict { model, data, out } => cmd_predict(&model, &data, out.as_deref()),
        Command::Augment { data, out, copies, k, seed } => {
            cmd_augment(&data, &out, copies, &k, seed)
        }
        Command::Synth { config, seed, out_dir } => {
            cmd_synth(config.as_deref(), seed, &out_dir)
        }
        Command::Grid { config, sets, seed, out_dir } => {
            cmd_grid(&config, &sets, seed, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1, // bad usage is an invalid configuration
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
