//! `copland`: parse, annotate, run, check and appraise attestation phrases.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use copland::am::{appraise, record_golden, run_avm, AmConfig, AmState};
use copland::conformance::{registry_for, run_suite, SuiteConfig};
use copland::cvm::{PlaceEntry, ProviderMode};
use copland::events::{earlier_pairs, ev_sys, events_of};
use copland::scenario::run_demo;
use copland::text::{decode, encode_string, parse_phrase, AspTable, Canonical};
use copland::{annotate, Evidence, Phrase, Place};

#[derive(Parser, Debug)]
#[command(name = "copland", version, about = "Copland attestation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Place of the attestation manager running the phrase [default: config place, else 0]
    #[arg(long, global = true)]
    place: Option<u64>,

    /// Seed for the scheduler and random generators
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Measurement and signing provider for places not in a config file
    #[arg(long, global = true, value_enum, default_value_t = Provider::Abstract)]
    provider: Provider,

    /// Appraiser configuration: places, keys, ASP names and golden values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write output here instead of standard output (a directory for `run`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a phrase and print its canonical tree
    Parse { file: PathBuf },
    /// Annotate a phrase with event ids
    Annotate { file: PathBuf },
    /// Print the event system of a phrase and its ordered event pairs
    Events { file: PathBuf },
    /// Run a phrase and emit the resulting evidence and trace
    Run {
        file: PathBuf,
        /// Initial evidence in canonical encoding [default: empty]
        #[arg(long, conflicts_with = "nonce")]
        init: Option<PathBuf>,
        /// Start from a fresh nonce and save the manager state
        #[arg(long)]
        nonce: bool,
        /// Record golden values from this run into the saved config
        #[arg(long)]
        golden: bool,
    },
    /// Run the conformance suite on generated phrases
    Check {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        places: u64,
        /// Run parallel branches on separate threads
        #[arg(long)]
        threaded: bool,
    },
    /// Appraise evidence produced by a phrase
    Appraise {
        file: PathBuf,
        #[arg(long)]
        evidence: PathBuf,
        /// Manager state holding the issued nonces [default: none issued]
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Run the layered virus-checker scenario with tampering
    Demo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Provider {
    Abstract,
    Real,
}

impl From<Provider> for ProviderMode {
    fn from(p: Provider) -> Self {
        match p {
            Provider::Abstract => ProviderMode::Abstract,
            Provider::Real => ProviderMode::Keyed,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load<T: Canonical>(path: &Path) -> Result<T> {
    decode(&read(path)?).with_context(|| format!("{}", path.display()))
}

/// Reads concrete syntax, or a canonical tree if the file is JSON.
fn load_phrase(path: &Path, table: &mut AspTable) -> Result<Phrase> {
    let bytes = read(path)?;
    let src = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
    if src.trim_start().starts_with('{') {
        return decode(src.as_bytes()).with_context(|| format!("{}", path.display()));
    }
    parse_phrase(&src, table).with_context(|| format!("{}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct Session {
    config: AmConfig,
    phrase: Phrase,
}

impl Session {
    /// Loads the config and the phrase, registering any place the phrase
    /// reaches that the config does not name.
    fn open(cli: &Cli, file: &Path) -> Result<Self> {
        let mut config = match &cli.config {
            Some(path) => load::<AmConfig>(path)?,
            None => AmConfig::default(),
        };
        if let Some(p) = cli.place {
            config.place = Place(p);
        }
        let phrase = load_phrase(file, &mut config.registry.asps)?;
        let mode = ProviderMode::from(cli.provider);
        for (p, _) in registry_for(&phrase, config.place).places() {
            if !config.registry.contains(p) {
                config.registry.register(p, PlaceEntry::new(mode, p.0));
            }
        }
        Ok(Session { config, phrase })
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Parse { file } => {
            let phrase = load_phrase(file, &mut AspTable::new())?;
            emit(out, &format!("{}\n", encode_string(&phrase)))?;
        }
        Command::Annotate { file } => {
            let phrase = load_phrase(file, &mut AspTable::new())?;
            let (at, _) = annotate(&phrase, 0);
            emit(out, &format!("{}\n", encode_string(&at)))?;
        }
        Command::Events { file } => {
            let phrase = load_phrase(file, &mut AspTable::new())?;
            let (at, _) = annotate(&phrase, 0);
            let es = ev_sys(&at, Place(cli.place.unwrap_or(0)))?;
            let mut text = format!("{}\n", encode_string(&es));
            for e in events_of(&es).values() {
                text.push_str(&format!("{e}\n"));
            }
            let pairs: Vec<String> = earlier_pairs(&es).iter().map(|(v, w)| format!("{v}<{w}")).collect();
            text.push_str(&format!("earlier: {}\n", pairs.join(" ")));
            emit(out, &text)?;
        }
        Command::Run {
            file,
            init,
            nonce,
            golden,
        } => {
            let Session { mut config, phrase } = Session::open(cli, file)?;
            let mut state = AmState::new();
            let start = match init {
                Some(path) => load::<Evidence>(path)?,
                None if *nonce => {
                    let (id, bits) = state.gen_nonce(&mut ChaCha8Rng::seed_from_u64(cli.seed));
                    Evidence::nonce(id, bits, Evidence::Mt)
                }
                None => Evidence::Mt,
            };
            let (ev, trace) = run_avm(&phrase, start, &config, cli.seed)?;
            if *golden {
                let recorded = record_golden(&phrase, config.place, &ev, &config);
                config.golden.extend(recorded);
            }
            match out {
                Some(dir) => {
                    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
                    let write = |name: &str, text: String| {
                        let path = dir.join(name);
                        fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
                    };
                    write("evidence.json", encode_string(&ev))?;
                    write("trace.json", encode_string(&trace))?;
                    write("config.json", encode_string(&config))?;
                    write("state.json", encode_string(&state))?;
                }
                None => {
                    println!("{}", encode_string(&ev));
                    println!("{}", encode_string(&trace));
                }
            }
        }
        Command::Check {
            count,
            depth,
            places,
            threaded,
        } => {
            if *depth == 0 || *places == 0 {
                bail!("--depth and --places must be at least 1");
            }
            let mut cfg = SuiteConfig::new(*count, *depth, cli.seed);
            cfg.max_places = *places;
            cfg.threaded = *threaded;
            let report = run_suite(cfg);
            println!("{report}");
            if let Some(path) = out {
                emit(Some(path), &format!("{}\n", encode_string(&report)))?;
            }
            return Ok(report.passed());
        }
        Command::Appraise { file, evidence, state } => {
            let Session { config, phrase } = Session::open(cli, file)?;
            let ev: Evidence = load(evidence)?;
            let st = match state {
                Some(path) => load::<AmState>(path)?,
                None => AmState::new(),
            };
            let result = appraise(&phrase, config.place, &ev, &config, &st);
            print!("{result}");
            if let Some(path) = out {
                emit(Some(path), &format!("{}\n", encode_string(&result)))?;
            }
            return Ok(result.passed());
        }
        Command::Demo => {
            let demo = run_demo(cli.seed, cli.provider.into())?;
            emit(out, &demo.log)?;
            return Ok(demo.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
