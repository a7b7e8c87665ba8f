//! `ifsc`: command-line front end for the side-channel lab.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ifsc_core::harness::report::{summary_text, write_csv, write_report};
use ifsc_core::harness::sweep::{narrowest_range_width, noise_sweep, overhead_sweep, throughput_sweep};
use ifsc_core::harness::{
    build_chain, build_corpus, build_profiles, build_stream, persist, persist_corpus, persist_params, persist_profiles,
    persist_trace, prepare, read_report, run_experiment, ClassifierBank, ExperimentConfig, HarnessError, Offline,
};
use ifsc_core::profiling::{read_profiles, PageProfile};
use ifsc_core::traffic::{read_corpus, Corpus};

#[derive(Parser)]
#[command(name = "ifsc", version, about = "Interface side-channel lab for enclave network function chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus generation.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Online trace collection.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Offline profiling.
    Profile {
        #[command(subcommand)]
        action: ProfileAction,
    },
    /// Sequence classifier training.
    Classifier {
        #[command(subcommand)]
        action: ClassifierAction,
    },
    /// The full attack, end to end.
    Attack {
        #[command(subcommand)]
        action: AttackAction,
    },
    /// Countermeasure sweeps.
    Defend {
        #[command(subcommand)]
        action: DefendAction,
    },
    /// Prints the summary of a finished attack run.
    Report(Common),
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Writes corpus.json and session.csv.
    Gen(Common),
}

#[derive(Subcommand)]
enum TraceAction {
    /// Replays the session through the observed chain; writes trace.isc.
    Run(Common),
}

#[derive(Subcommand)]
enum ProfileAction {
    /// Profiles every tracked page; writes profiles.iscprof.
    Build(Common),
}

#[derive(Subcommand)]
enum ClassifierAction {
    /// Trains one classifier per profiled page; writes params/.
    Train(Common),
}

#[derive(Subcommand)]
enum AttackAction {
    /// Runs every stage and writes all artifacts plus the report.
    Run(Common),
}

#[derive(Subcommand)]
enum DefendAction {
    /// Padding overhead, IDS throughput, and noise tables.
    Sweep(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(stage: &'static str) -> impl Fn(String) -> HarnessError {
    move |cause| HarnessError::Stage { stage, cause }
}

/// Reuses `corpus.json` from an earlier `corpus gen` when present.
fn corpus_for(cfg: &ExperimentConfig, out: &Path) -> Result<Corpus, HarnessError> {
    let path = out.join("corpus.json");
    if path.exists() {
        let f = File::open(&path).map_err(|e| stage("corpus")(e.to_string()))?;
        read_corpus(BufReader::new(f)).map_err(|e| stage("corpus")(e.to_string()))
    } else {
        build_corpus(cfg)
    }
}

fn profiles_for(cfg: &ExperimentConfig, out: &Path, corpus: &Corpus) -> Result<Vec<PageProfile>, HarnessError> {
    let path = out.join("profiles.iscprof");
    if path.exists() {
        let f = File::open(&path).map_err(|e| stage("profile")(e.to_string()))?;
        read_profiles(BufReader::new(f)).map_err(|e| stage("profile")(e.to_string()))
    } else {
        let chain = build_chain(cfg)?;
        Ok(build_profiles(cfg, corpus, &chain)?.0)
    }
}

fn mkdir(out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(|e| stage("output")(format!("{}: {e}", out.display())))
}

fn corpus_gen(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    let corpus = build_corpus(&cfg)?;
    let (_, stream) = build_stream(&cfg, &corpus)?;
    persist_corpus(&cfg, &corpus, &stream, &c.out)?;
    println!(
        "{} pages ({} tracked), {} session packets -> {}",
        corpus.pages.len(),
        corpus.tracked_ids.len(),
        stream.packets.len(),
        c.out.display()
    );
    Ok(())
}

fn trace_run(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    mkdir(&c.out)?;
    let corpus = corpus_for(&cfg, &c.out)?;
    let chain = build_chain(&cfg)?;
    let (_, stream) = build_stream(&cfg, &corpus)?;
    let run = ifsc_core::enclave::run_stream(
        &chain,
        &stream.packets,
        cfg.countermeasures,
        cfg.collector.clone(),
        ifsc_core::seed::derive(cfg.seed, "online"),
    )
    .map_err(|e| stage("online")(e.to_string()))?;
    persist_trace(&run, &c.out)?;
    println!(
        "{} events for {} packets ({} rejected batches) -> {}",
        run.events.len(),
        run.real_packets(),
        run.rejected_batches,
        c.out.join("trace.isc").display()
    );
    Ok(())
}

fn profile_build(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    mkdir(&c.out)?;
    let corpus = corpus_for(&cfg, &c.out)?;
    let chain = build_chain(&cfg)?;
    let (profiles, untrackable) = build_profiles(&cfg, &corpus, &chain)?;
    persist_profiles(&profiles, &c.out)?;
    println!(
        "{} profiles, {} untrackable pages -> {}",
        profiles.len(),
        untrackable.len(),
        c.out.join("profiles.iscprof").display()
    );
    Ok(())
}

fn classifier_train(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    mkdir(&c.out)?;
    let corpus = corpus_for(&cfg, &c.out)?;
    let profiles = profiles_for(&cfg, &c.out, &corpus)?;
    let mut bank = ClassifierBank::new(cfg.attack.train, cfg.seed);
    bank.train_all(&profiles)?;
    persist_params(&bank, &c.out)?;
    let unconverged = bank.models().values().filter(|m| !m.converged).count();
    println!(
        "{} classifiers trained, {unconverged} did not converge -> {}",
        bank.models().len(),
        c.out.join("params").display()
    );
    Ok(())
}

fn attack_run(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    let exp = run_experiment(&cfg)?;
    persist(&cfg, &exp, &c.out)?;
    print!("{}", summary_text(&exp.online.report));
    Ok(())
}

fn defend_sweep(c: &Common) -> Result<(), HarnessError> {
    let cfg = load_config(c)?;
    mkdir(&c.out)?;
    let corpus = corpus_for(&cfg, &c.out)?;
    let max_len = cfg.corpus.segment_max_bytes.max(cfg.corpus.request_max_bytes);
    let overhead = overhead_sweep(&corpus, &[200, 400, 600, 800, 1000], max_len, cfg.chain.record_overhead)?;
    write_csv(&overhead, &c.out.join("overhead.csv"))?;
    let throughput = throughput_sweep(&cfg, &corpus, &[1000, 2000, 3000, 4000, 5000])?;
    write_csv(&throughput, &c.out.join("throughput.csv"))?;

    // Noise is applied online only; profiles come from a quiet chain.
    let mut quiet = cfg.clone();
    quiet.chain.delay.noise_amplitude = 0;
    let offline: Offline = prepare(&quiet)?;
    let mut bank = ClassifierBank::new(quiet.attack.train, quiet.seed);
    let a = narrowest_range_width(&offline.profiles).map_or(1, |w| w / 2 + 1);
    let noise = noise_sweep(&quiet, &offline, &mut bank, &[0, a, 2 * a, 4 * a])?;
    write_csv(&noise, &c.out.join("noise.csv"))?;

    for r in &overhead {
        println!("overhead {} {}: {:.4}", r.policy, r.x_bytes, r.overhead);
    }
    for r in &throughput {
        println!(
            "ids {} rules {:?}: {:.0} cycles/packet",
            r.ids_rules, r.mode, r.ids_cycles_per_packet
        );
    }
    for r in &noise {
        println!("noise {}: page recall {:.3}", r.amplitude, r.page_recall);
    }
    Ok(())
}

fn report(c: &Common) -> Result<(), HarnessError> {
    let r = read_report(&c.out)?;
    write_report(&r, &c.out)?;
    print!("{}", summary_text(&r));
    for table in ["overhead.csv", "throughput.csv", "noise.csv"] {
        let p = c.out.join(table);
        if p.exists() {
            println!("table {}", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Corpus {
            action: CorpusAction::Gen(c),
        } => corpus_gen(&c),
        Command::Trace {
            action: TraceAction::Run(c),
        } => trace_run(&c),
        Command::Profile {
            action: ProfileAction::Build(c),
        } => profile_build(&c),
        Command::Classifier {
            action: ClassifierAction::Train(c),
        } => classifier_train(&c),
        Command::Attack {
            action: AttackAction::Run(c),
        } => attack_run(&c),
        Command::Defend {
            action: DefendAction::Sweep(c),
        } => defend_sweep(&c),
        Command::Report(c) => report(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ HarnessError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
