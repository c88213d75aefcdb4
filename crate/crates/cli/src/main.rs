mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use mdbt_core::corpus::{generate_synthetic, synthetic_embeddings, SplitName, SyntheticSpec};
use mdbt_core::embeddings::file_digest;
use mdbt_core::evaluation::{evaluate_dialogues, Predictor};
use mdbt_core::training::gradcheck::gradient_check;
use mdbt_core::training::{examples, train_with, TrainingLog};
use mdbt_core::{
    Checkpoint, CorpusSplit, DialogueBelief, EmbeddingTable, Ontology, Tracker, TrackerParams,
    UpdateMode,
};

use config::RunConfig;

/// An error caused by the user's input; exits with status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

const KEYS: &str = "\
Settings come from built-in defaults, then --config FILE (JSON object or key=value
lines), then --key value flags. Dashes and underscores in keys are interchangeable.

paths:      corpus ontology embeddings checkpoint output input split
evaluation: predictor (model|oracle) threshold
model:      encoder (bilstm|cnn) hidden-dim embedding-dim dropout
            update (plain|memory|lstm) slot-update update-mode (recurrent|pass-through)
training:   domain-loss (binary|positive-only) learning-rate batch-size epochs
            patience (number or none) seed
synthetic:  domains slots-per-domain values-per-slot train-dialogues dev-dialogues
            test-dialogues max-domains-per-dialogue max-constraints-per-domain
            inform-weight request-weight confirm-weight
gradcheck:  epsilon

Exit status: 0 on success, 1 for invalid input, 2 for failures while running.";

fn cli() -> Command {
    let common = |name: &'static str, about: &'static str| {
        Command::new(name)
            .about(about)
            .after_help(KEYS)
            .arg(
                Arg::new("config")
                    .long("config")
                    .short('c')
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Configuration file"),
            )
            .arg(
                Arg::new("settings")
                    .value_name("--KEY VALUE")
                    .num_args(0..)
                    .trailing_var_arg(true)
                    .allow_hyphen_values(true)
                    .help("Setting overrides, see below"),
            )
    };
    Command::new("mdbt")
        .about("Multi-domain dialogue belief tracker")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common("train", "Train a model and write a checkpoint"))
        .subcommand(common("evaluate", "Score a checkpoint on one corpus split"))
        .subcommand(
            common("track", "Print the belief state after every turn").arg(
                Arg::new("interactive")
                    .long("interactive")
                    .short('i')
                    .action(ArgAction::SetTrue)
                    .help("Read user turns from stdin"),
            ),
        )
        .subcommand(common(
            "synth",
            "Write a synthetic corpus, ontology and embeddings",
        ))
        .subcommand(common(
            "gradcheck",
            "Compare analytic and numeric gradients",
        ))
}

struct Invocation {
    config: RunConfig,
    interactive: bool,
}

/// Flags that clap left in the trailing settings are picked out here.
fn invocation(m: &ArgMatches, defaults: &[(&str, &str)]) -> Result<Invocation> {
    let mut file = m.get_one::<PathBuf>("config").cloned();
    let mut interactive = m.try_get_one::<bool>("interactive").ok().flatten() == Some(&true);
    let raw: Vec<String> = m
        .get_many::<String>("settings")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    let mut settings = Vec::new();
    let mut it = raw.into_iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--interactive" | "-i" if m.try_get_one::<bool>("interactive").is_ok() => {
                interactive = true
            }
            "--config" | "-c" => {
                file =
                    Some(PathBuf::from(it.next().ok_or_else(|| {
                        anyhow!(Invalid("--config needs a file".into()))
                    })?))
            }
            _ => settings.push(arg),
        }
    }
    let config = config::resolve(file.as_deref(), defaults, &settings)?;
    eprintln!("config: {}", config.to_json());
    Ok(Invocation {
        config,
        interactive,
    })
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| anyhow!(Invalid(format!("missing required setting --{key}"))))?;
    if !p.exists() {
        bail!(Invalid(format!(
            "{key} file {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn load_ontology(c: &RunConfig) -> Result<Ontology> {
    Ok(Ontology::load(required(&c.ontology, "ontology")?)?)
}

fn load_corpus(c: &RunConfig, o: &Ontology) -> Result<CorpusSplit> {
    Ok(CorpusSplit::load(required(&c.corpus, "corpus")?, o)?)
}

/// The table and the digest of the file it came from.
fn load_embeddings(c: &RunConfig) -> Result<(EmbeddingTable, String)> {
    let path = required(&c.embeddings, "embeddings")?;
    let table = EmbeddingTable::load(path)?;
    if let Some(d) = c.embedding_dim {
        if d != table.dim() {
            bail!(Invalid(format!(
                "embedding-dim is {d} but {} has vectors of length {}",
                path.display(),
                table.dim()
            )));
        }
    }
    Ok((table, file_digest(path)?))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(inv: Invocation) -> Result<()> {
    let c = &inv.config;
    let o = load_ontology(c)?;
    let corpus = load_corpus(c, &o)?;
    let (table, digest) = load_embeddings(c)?;
    let tc = c.train_config(table.dim());
    tc.validate()?;
    create_dir(&c.output)?;
    write(&c.output.join("config.json"), &c.to_json())?;

    let log_path = c.output.join("train_log.tsv");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?,
    );
    writeln!(log, "{}", TrainingLog::HEADER)?;
    println!("{}", TrainingLog::HEADER);
    let mut io_error = None;
    let outcome = train_with(&corpus, &o, &table, &tc, |r| {
        let line = TrainingLog::tsv_line(r);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }

    let path = c.checkpoint_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Checkpoint::new(&tc, &outcome.params, &o, Some(digest)).save(&path)?;
    match outcome.log.best_epoch {
        Some(e) => eprintln!("kept epoch {e}; checkpoint {}", path.display()),
        None => eprintln!("checkpoint {}", path.display()),
    }
    Ok(())
}

/// A checkpoint, checked against the ontology and embeddings in use.
fn load_checkpoint(
    c: &RunConfig,
    o: &Ontology,
    digest: &str,
) -> Result<(TrackerParams, UpdateMode)> {
    let path = required(&c.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_ontology(o)?;
    if let Some(trained) = &ckpt.embeddings_digest {
        if trained != digest {
            bail!(Invalid(format!(
                "embeddings file hash {digest} differs from the one trained with ({trained})"
            )));
        }
    }
    Ok((ckpt.params()?, ckpt.config.update_mode))
}

fn evaluate(inv: Invocation) -> Result<()> {
    let c = &inv.config;
    let split: SplitName = c.split.parse()?;
    let o = load_ontology(c)?;
    let corpus = load_corpus(c, &o)?;
    let dialogues = corpus.get(split);
    if dialogues.is_empty() {
        bail!(Invalid(format!("the {} split is empty", c.split)));
    }
    let report = match c.predictor.as_str() {
        "oracle" => evaluate_dialogues(&Predictor::Oracle, &o, dialogues, c.threshold)?,
        "model" => {
            let (table, digest) = load_embeddings(c)?;
            let (params, mode) = load_checkpoint(c, &o, &digest)?;
            let tracker = Tracker::new(&params, &o, &table, mode)?;
            evaluate_dialogues(&Predictor::Model(&tracker), &o, dialogues, c.threshold)?
        }
        other => bail!(Invalid(format!(
            "predictor must be model or oracle, not {other:?}"
        ))),
    };
    create_dir(&c.output)?;
    write(&c.output.join("report.json"), &report.to_json())?;
    let tsv = report.to_tsv();
    write(&c.output.join("report.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn print_turn(
    out: &mut impl Write,
    o: &Ontology,
    label: &str,
    belief: &DialogueBelief,
    threshold: f64,
) -> io::Result<()> {
    let n = belief.turns.len();
    let turn = &belief.turns[n - 1];
    writeln!(out, "## {label} turn {n}")?;
    let mut any = false;
    for (d, domain) in o.domains().iter().enumerate() {
        if turn.domains[d] < threshold {
            continue;
        }
        any = true;
        writeln!(out, "{domain}\t{:.4}", turn.domains[d])?;
        for &s in o.domain_slots(d) {
            let slot = o.slot(s);
            let (best, p) =
                turn.slots[s]
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
                    );
            let value = slot.candidates().nth(best).unwrap_or("?");
            writeln!(out, "  {}\t{value}\t{p:.4}", slot.name)?;
        }
    }
    if !any {
        writeln!(out, "(no active domain)")?;
    }
    writeln!(out)
}

fn track(inv: Invocation) -> Result<()> {
    let c = &inv.config;
    let o = load_ontology(c)?;
    let (table, digest) = load_embeddings(c)?;
    let (params, mode) = load_checkpoint(c, &o, &digest)?;
    let tracker = Tracker::new(&params, &o, &table, mode)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut history: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut dialogue = 1;

    if inv.interactive {
        if c.input.is_some() {
            bail!(Invalid("use either --input or --interactive".into()));
        }
        eprintln!("Type user turns. `sys: ...` sets the preceding system turn; :reset starts over, :quit exits.");
        let mut system = String::new();
        let stdin = io::stdin();
        let mut lines = stdin.lock().lines();
        loop {
            eprint!("> ");
            io::stderr().flush()?;
            let Some(line) = lines.next() else { break };
            let line = line?;
            let line = line.trim();
            match line {
                ":quit" | ":q" => break,
                ":reset" => {
                    history.clear();
                    system.clear();
                    dialogue += 1;
                    continue;
                }
                "" => continue,
                _ => {}
            }
            if let Some(s) = line.strip_prefix("sys:") {
                system = s.trim().to_string();
                continue;
            }
            history.push((mdbt_core::tokenize(&system), mdbt_core::tokenize(line)));
            system.clear();
            let belief = tracker.track(&history)?;
            print_turn(
                &mut out,
                &o,
                &format!("dialogue {dialogue}"),
                &belief,
                c.threshold,
            )?;
            out.flush()?;
        }
        return Ok(());
    }

    let path = required(&c.input, "input")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !history.is_empty() {
                history.clear();
                dialogue += 1;
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((system, user)) = line.split_once('\t') else {
            eprintln!(
                "warning: {}:{}: expected `system<TAB>user`, skipped",
                path.display(),
                i + 1
            );
            continue;
        };
        history.push((mdbt_core::tokenize(system), mdbt_core::tokenize(user)));
        let belief = tracker.track(&history)?;
        print_turn(
            &mut out,
            &o,
            &format!("dialogue {dialogue}"),
            &belief,
            c.threshold,
        )?;
    }
    Ok(())
}

fn synth(inv: Invocation) -> Result<()> {
    let c = &inv.config;
    let (corpus, o) = generate_synthetic(&c.synth, c.seed)?;
    let table = synthetic_embeddings(&o, &corpus, c.embedding_dim.unwrap_or(64), c.seed)?;
    create_dir(&c.output)?;
    corpus.save(c.output.join("corpus.json"))?;
    o.save(c.output.join("ontology.json"))?;
    table.save(c.output.join("embeddings.txt"))?;
    println!(
        "{} dialogues ({} train, {} dev, {} test), {} slots, {} values, {} embeddings in {}",
        corpus.len(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        o.slots().len(),
        o.value_count(),
        table.len(),
        c.output.display()
    );
    Ok(())
}

const GRADCHECK_LIMIT: f64 = 1e-4;

fn gradcheck(inv: Invocation) -> Result<()> {
    let c = &inv.config;
    if c.dropout > 0.0 {
        bail!(Invalid(format!(
            "gradient check needs dropout 0, got {}",
            c.dropout
        )));
    }
    let user_data = c.ontology.is_some() || c.corpus.is_some() || c.embeddings.is_some();
    let (o, dialogues, table) = if user_data {
        let o = load_ontology(c)?;
        let corpus = load_corpus(c, &o)?;
        let (table, _) = load_embeddings(c)?;
        let first: Vec<_> = corpus.iter().take(1).cloned().collect();
        (o, first, table)
    } else {
        let spec = SyntheticSpec {
            domains: 2,
            slots_per_domain: 2,
            values_per_slot: 2,
            train_dialogues: 1,
            dev_dialogues: 0,
            test_dialogues: 0,
            ..SyntheticSpec::default()
        };
        let (corpus, o) = generate_synthetic(&spec, c.seed)?;
        let table = synthetic_embeddings(&o, &corpus, c.embedding_dim.unwrap_or(10), c.seed)?;
        (o, corpus.train, table)
    };
    if dialogues.is_empty() {
        bail!(Invalid("the corpus has no dialogues".into()));
    }
    let model = c.model(table.dim());
    let params = TrackerParams::init(&model, c.seed)?;
    let batch = examples(&dialogues, &o, &table)?;
    let report = gradient_check(&params, &o.embed(&table)?, &batch, c.update_mode, c.epsilon)?;
    println!(
        "checked {} scalars over {} turns",
        report.entries.len(),
        batch.iter().map(|e| e.turns.len()).sum::<usize>()
    );
    if let Some(w) = report.worst() {
        println!(
            "worst {}[{}]: analytic {:e} numeric {:e}",
            w.name, w.index, w.analytic, w.numeric
        );
    }
    println!("max relative error {:e}", report.max_rel_error);
    if report.max_rel_error.is_nan() || report.max_rel_error >= GRADCHECK_LIMIT {
        bail!(
            "max relative error {:e} is not below {GRADCHECK_LIMIT:e}",
            report.max_rel_error
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand is required");
    match name {
        "train" => train(invocation(m, &[])?),
        "evaluate" => evaluate(invocation(m, &[])?),
        "track" => track(invocation(m, &[])?),
        "synth" => synth(invocation(m, &[])?),
        "gradcheck" => gradcheck(invocation(m, &[("hidden_dim", "8"), ("dropout", "0")])?),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<mdbt_core::Error>() {
            return if core.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
