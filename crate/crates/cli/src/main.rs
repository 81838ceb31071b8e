use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use shiftprompt::pipeline::{OracleKind, Pipeline, Stage, TemplateSource};
use shiftprompt::report::{pivot, read_results, render_svg, write_pivot_table};
use shiftprompt::{Error, InputFormat, Method, PipelineConfig};

#[derive(Parser)]
#[command(name = "shiftprompt", version, about = "Mine semantic-shift tuples and build time-adaptation prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Load, clean and split both snapshots; writes the held-out T2 text.
    Ingest(Overrides),
    /// Write frequency and co-occurrence tables of the training parts.
    Stats(Overrides),
    /// Mine tuples.
    Tuples(Overrides),
    /// Load or induce templates.
    Templates(Overrides),
    /// Fill templates with tuples.
    Prompts(Overrides),
    /// Write the masked training file.
    EmitTrain(Overrides),
    /// Run every stage and write the manifest.
    All(Overrides),
    /// Chart a results table.
    Report(ReportArgs),
}

/// Flags override values from the config file.
#[derive(Args)]
struct Overrides {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    c1: Option<PathBuf>,
    #[arg(long)]
    c2: Option<PathBuf>,
    #[arg(long)]
    t1: Option<String>,
    #[arg(long)]
    t2: Option<String>,
    /// `lines` or `records`.
    #[arg(long)]
    format: Option<InputFormat>,
    #[arg(long)]
    min_words: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// `freq`, `div` or `cont`.
    #[arg(long)]
    method: Option<Method>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(short)]
    m: Option<usize>,
    #[arg(long)]
    min_anchor_freq: Option<u32>,
    #[arg(long)]
    emb_t1: Option<PathBuf>,
    #[arg(long)]
    emb_t2: Option<PathBuf>,
    /// Use templates from this file.
    #[arg(long, conflicts_with = "auto")]
    manual: Option<PathBuf>,
    /// Induce templates by beam search.
    #[arg(long)]
    auto: bool,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_slot_len: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Command line of an external oracle peer; the n-gram model otherwise.
    #[arg(long, num_args = 1.., allow_hyphen_values = true, conflicts_with = "oracle_socket")]
    oracle_command: Option<Vec<String>>,
    #[arg(long)]
    oracle_socket: Option<PathBuf>,
    #[arg(long)]
    masks_per_prompt: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    anchors_only: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results TSV.
    results: PathBuf,
    /// Directory for `chart.svg` and `table.tsv`.
    #[arg(short, long, default_value = "report")]
    output: PathBuf,
    #[arg(long, default_value = "perplexity vs k")]
    title: String,
}

impl Overrides {
    fn apply(self) -> shiftprompt::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).map_err(|e| match e {
                e @ Error::Config(_) => e,
                e => Error::Config(e.to_string()),
            })?,
            None => PipelineConfig::default(),
        };
        let c = &mut cfg.corpus;
        set(&mut c.c1, self.c1);
        set(&mut c.c2, self.c2);
        set(&mut c.t1, self.t1);
        set(&mut c.t2, self.t2);
        set(&mut c.format, self.format);
        set(&mut c.min_words, self.min_words);
        set(&mut c.split.seed, self.split_seed);
        let t = &mut cfg.tuples;
        set(&mut t.method, self.method);
        set(&mut t.k, self.k);
        set(&mut t.m, self.m);
        set(&mut t.min_anchor_freq, self.min_anchor_freq);
        if self.emb_t1.is_some() {
            t.emb_t1 = self.emb_t1;
        }
        if self.emb_t2.is_some() {
            t.emb_t2 = self.emb_t2;
        }
        let tp = &mut cfg.templates;
        if let Some(path) = self.manual {
            tp.source = TemplateSource::Manual;
            tp.manual_file = Some(path);
        }
        if self.auto {
            tp.source = TemplateSource::Auto;
        }
        set(&mut tp.beam_width, self.beam_width);
        set(&mut tp.max_slot_len, self.max_slot_len);
        set(&mut tp.top_n, self.top_n);
        if let Some(cmd) = self.oracle_command {
            tp.oracle = OracleKind::Command;
            tp.oracle_command = cmd;
        }
        if let Some(sock) = self.oracle_socket {
            tp.oracle = OracleKind::Socket;
            tp.oracle_socket = Some(sock);
        }
        let p = &mut cfg.prompts;
        set(&mut p.masks_per_prompt, self.masks_per_prompt);
        set(&mut p.seed, self.seed);
        p.anchors_only |= self.anchors_only;
        set(&mut cfg.output, self.output);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run_stage(overrides: Overrides, last: Stage, manifest: bool) -> shiftprompt::Result<()> {
    let cfg = overrides.apply()?;
    let out = cfg.output.clone();
    let mut p = Pipeline::new(cfg)?;
    if last == Stage::Stats {
        for path in p.write_stats()? {
            println!("{}", path.display());
        }
        return Ok(());
    }
    p.run_until(last)?;
    if manifest {
        let m = p.write_manifest()?;
        for a in &m.artifacts {
            println!("{}\t{}\t{}", a.sha256, a.bytes, out.join(&a.path).display());
        }
    }
    Ok(())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let f = fs::File::open(&args.results).with_context(|| format!("opening {}", args.results.display()))?;
    let rows = read_results(&args.results, BufReader::new(f))?;
    let p = pivot(&rows)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let svg = args.output.join("chart.svg");
    fs::write(&svg, render_svg(&p, &args.title)).with_context(|| format!("writing {}", svg.display()))?;
    let table = args.output.join("table.tsv");
    let mut buf = Vec::new();
    write_pivot_table(&p, &mut buf)?;
    fs::write(&table, buf).with_context(|| format!("writing {}", table.display()))?;
    println!("{}\n{}", svg.display(), table.display());
    Ok(())
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSplit(_) => 2,
        _ => 3,
    }
}

fn describe(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        let s_msg = s.to_string();
        if !msg.contains(&s_msg) {
            msg.push_str(": ");
            msg.push_str(&s_msg);
        }
        src = s.source();
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Ingest(o) => run_stage(o, Stage::Ingest, false),
        Command::Stats(o) => run_stage(o, Stage::Stats, false),
        Command::Tuples(o) => run_stage(o, Stage::Tuples, false),
        Command::Templates(o) => run_stage(o, Stage::Templates, false),
        Command::Prompts(o) => run_stage(o, Stage::Prompts, false),
        Command::EmitTrain(o) => run_stage(o, Stage::EmitTrain, false),
        Command::All(o) => run_stage(o, Stage::EmitTrain, true),
        Command::Report(args) => {
            return match report(&args) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(3)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_for(&e))
        }
    }
}
