use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qbridge::config::RunConfig;
use qbridge::data::{generate_corpus, load_vocab, Dataset, Split, SynthSpec};
use qbridge::error::{Error, Result};
use qbridge::experiment;
use qbridge::metrics::token_frequency_report;

const EXIT_CODES: &str = "Exit codes:\n  0  success\n  2  configuration error\n  3  data error\n  4  numeric failure (non-finite loss or gradient)";

#[derive(Parser)]
#[command(name = "qbridge", version, about = "Image report generation experiments", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic image/caption corpus.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its checkpoint, metrics and parameter report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one generated report per line for a data split.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long = "rep-penalty")]
        rep_penalty: Option<f64>,
        #[arg(long = "min-len")]
        min_len: Option<usize>,
        #[arg(long = "max-len")]
        max_len: Option<usize>,
    },
    /// Corpus ROUGE-1 of aligned prediction and reference files.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Most frequent whitespace tokens of a text file.
    FreqReport {
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Train and score the five-row ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let mut spec = SynthSpec::parse(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let vocab = generate_corpus(&spec, &out)?;
            println!(
                "wrote {} samples, vocabulary of {} ids ({})",
                spec.count,
                vocab.len(),
                vocab.hash()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(Some(&config), seed)?;
            let summary = experiment::train_command(&cfg, &data, &out)?;
            if let Some(last) = summary.log.last() {
                println!("{}", last.log_line());
            }
            print!("{}", summary.params.to_tsv());
        }
        Command::Generate {
            checkpoint,
            data,
            split,
            out,
            beam,
            rep_penalty,
            min_len,
            max_len,
        } => {
            let vocab = load_vocab(&data)?;
            let (mut cfg, model) = experiment::load_model(&checkpoint, &vocab)?;
            if let Some(b) = beam {
                cfg.decode.beam_size = b;
            }
            if let Some(p) = rep_penalty {
                cfg.decode.repetition_penalty = p;
            }
            if let Some(m) = min_len {
                cfg.decode.min_len = m;
            }
            if let Some(m) = max_len {
                cfg.decode.max_len = m;
            }
            cfg.decode.validate()?;
            let dataset = Dataset::load(&data, split)?;
            let lines = experiment::generate_reports(&model, &cfg, &dataset)?;
            experiment::write_lines(&out, &lines)?;
            let mut cfg_path = out.clone().into_os_string();
            cfg_path.push(".run_config.txt");
            let cfg_path = PathBuf::from(cfg_path);
            fs::write(&cfg_path, cfg.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))?;
        }
        Command::Evaluate { pred, reference } => {
            print!(
                "{}",
                experiment::evaluate_files(&pred, &reference)?.to_tsv()
            );
        }
        Command::FreqReport { texts, top } => {
            if top == 0 {
                return Err(Error::Config("--top must be at least 1".into()));
            }
            let lines = experiment::read_lines(&texts)?;
            println!("token\tcount");
            for (tok, n) in token_frequency_report(&lines, top) {
                println!("{tok}\t{n}");
            }
        }
        Command::Ablate {
            data,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let rows = experiment::run_ablation(&cfg, &data, &out)?;
            print!("{}", experiment::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
