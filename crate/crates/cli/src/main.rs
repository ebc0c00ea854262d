use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use greaselm::data::{gen_synthetic_mcqa, load_dataset, save_dataset, QAExample, SynthConfig};
use greaselm::kg::{gen_toy_kg, KnowledgeGraph};
use greaselm::model::ablation::{report_tsv, run_ablation, Suite};
use greaselm::model::checkpoint::{load_model, save_model};
use greaselm::model::eval::{evaluate, TermLists};
use greaselm::model::trace::trace_candidate;
use greaselm::model::train::{fit_and_score, train};
use greaselm::model::{build_vocab, graph_dims, GreaseLm, ModelDims, RunConfig};
use greaselm::numerics::checkpoint::write_atomic;
use greaselm::numerics::{grad_check, sample_coords, ParamStore};
use greaselm::retrieval::{retrieve, CacheRecord, LexicalScorer, Linker, Segments};

const GRADCHECK_LIMIT: f64 = 1e-3;

/// `println!` that tolerates a closed stdout.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "greaselm",
    version,
    about = "Language-model / knowledge-graph fusion for multiple-choice QA"
)]
struct Cli {
    /// Worker threads for generation, retrieval and candidate forwards.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random toy knowledge graph.
    GenKg(GenKg),
    /// Generate the synthetic multiple-choice dataset.
    GenData(GenData),
    /// Retrieve per-candidate subgraphs and write them as JSON Lines.
    Retrieve(Retrieve),
    /// Train a model and write its directory.
    Train(Train),
    /// Evaluate a trained model with the stratified report.
    Eval(Eval),
    /// Compare analytic gradients with finite differences.
    Gradcheck(Gradcheck),
    /// Interaction-node attention and best-first order for one example.
    Trace(Trace),
    /// Train each variant of an ablation suite over its seeds.
    Ablate(Ablate),
}

/// Run configuration: file first, then flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set d_lm=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    directed_bridges: bool,
    #[arg(long)]
    pool_include_int: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("`--set {s}`: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.directed_bridges |= self.directed_bridges;
        cfg.pool_include_int |= self.pool_include_int;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenKg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    /// Output directory for nodes.tsv, relations.tsv and edges.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    negation_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    hedge_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Retrieve {
    #[arg(long)]
    data: PathBuf,
    /// Global graph directory, used for examples without their own graph.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Model directory: weights, vocabulary, config and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Comma-separated negation terms.
    #[arg(long, value_delimiter = ',')]
    negation_terms: Option<Vec<String>>,
    /// Comma-separated hedge terms.
    #[arg(long, value_delimiter = ',')]
    hedge_terms: Option<Vec<String>>,
    /// Comma-separated preposition lexicon.
    #[arg(long, value_delimiter = ',')]
    prepositions: Option<Vec<String>>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
}

#[derive(Args)]
struct Trace {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Example id; the first example when omitted.
    #[arg(long)]
    example: Option<String>,
    /// Candidate index; the gold answer when omitted.
    #[arg(long)]
    candidate: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    /// Base configuration file.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Suite file: `seeds = ...` then `[Label]` sections of deltas.
    #[arg(long)]
    suite: PathBuf,
    /// Training set; synthetic when omitted.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Synthetic set sizes and generator settings.
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_dev: usize,
    #[arg(long, default_value_t = 0.5)]
    negation_rate: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_global(kg: &Option<PathBuf>) -> Result<Option<(KnowledgeGraph, Linker)>> {
    Ok(match kg {
        Some(dir) => {
            let g = KnowledgeGraph::load_dir(dir)?;
            let l = Linker::new(&g);
            Some((g, l))
        }
        None => None,
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn header(parts: &[(&str, String)], cfg: Option<&RunConfig>) {
    let mut line: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    if let Some(c) = cfg {
        line.push(c.to_line());
    }
    out!("# {}", line.join(" "));
}

fn gen_kg(a: &GenKg) -> Result<()> {
    header(
        &[
            ("command", "gen-kg".into()),
            ("seed", a.seed.to_string()),
            ("nodes", a.nodes.to_string()),
            ("relations", a.relations.to_string()),
            ("density", a.density.to_string()),
            ("out", path_str(&a.out)),
        ],
        None,
    );
    let kg = gen_toy_kg(a.seed, a.nodes, a.relations, a.density)?;
    kg.save(&a.out)?;
    out!("{} nodes, {} edges", kg.num_nodes(), kg.edges().len());
    Ok(())
}

fn gen_data(a: &GenData) -> Result<()> {
    header(
        &[
            ("command", "gen-data".into()),
            ("seed", a.seed.to_string()),
            ("n", a.n.to_string()),
            ("k", a.k.to_string()),
            ("negation_rate", a.negation_rate.to_string()),
            ("hedge_rate", a.hedge_rate.to_string()),
            ("out", path_str(&a.out)),
        ],
        None,
    );
    let data = gen_synthetic_mcqa(&SynthConfig {
        seed: a.seed,
        n_examples: a.n,
        k_way: a.k,
        negation_rate: a.negation_rate,
        hedge_rate: a.hedge_rate,
    })?;
    save_dataset(&data, &a.out)?;
    out!("{} examples", data.len());
    Ok(())
}

fn retrieve_cmd(a: &Retrieve) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    header(
        &[
            ("command", "retrieve".into()),
            ("data", path_str(&a.data)),
            ("kg", a.kg.as_deref().map_or("-".into(), path_str)),
            ("out", path_str(&a.out)),
        ],
        Some(&cfg),
    );
    let data = load_dataset(&a.data)?;
    let global = load_global(&a.kg)?;
    let rcfg = cfg.retrieval();
    let mut out = String::new();
    for ex in &data {
        let own;
        let (kg, linker) = match (&ex.kg, &global) {
            (Some(k), _) => {
                let g = k.to_graph()?;
                let l = Linker::new(&g);
                own = (g, l);
                (&own.0, &own.1)
            }
            (None, Some((g, l))) => (g, l),
            (None, None) => bail!("{}: no example graph and no --kg given", ex.id),
        };
        for (i, answer) in ex.candidates.iter().enumerate() {
            let seg = Segments {
                context: &ex.context,
                question: &ex.question,
                answer,
            };
            let sg = retrieve(&seg, kg, linker, &rcfg, &LexicalScorer::default())?;
            let rec = CacheRecord::from_subgraph(&format!("{}:{i}", ex.id), &sg);
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    write_atomic(&a.out, out.as_bytes())?;
    out!("{} examples retrieved", data.len());
    Ok(())
}

fn train_cmd(a: &Train) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    header(
        &[
            ("command", "train".into()),
            ("train", path_str(&a.train)),
            ("dev", a.dev.as_deref().map_or("-".into(), path_str)),
            ("kg", a.kg.as_deref().map_or("-".into(), path_str)),
            ("out", path_str(&a.out)),
        ],
        Some(&cfg),
    );
    let train_set = load_dataset(&a.train)?;
    let dev_set = match &a.dev {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let global = load_global(&a.kg)?;
    let all: Vec<QAExample> = train_set.iter().chain(&dev_set).cloned().collect();
    let vocab = build_vocab(&all);
    let (kg_nodes, kg_relations) = graph_dims(&all, global.as_ref().map(|g| &g.0));
    let dims = ModelDims {
        vocab_size: vocab.len(),
        kg_nodes,
        kg_relations,
    };
    let (model, mut params) = GreaseLm::build(&cfg, dims)?;
    let tr = model.prepare_all(&train_set, &vocab, global.as_ref())?;
    let dv = model.prepare_all(&dev_set, &vocab, global.as_ref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    train(&model, &mut params, &tr, &dv, |m, _| {
        let line = serde_json::to_string(m)?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|source| greaselm::Error::Io {
                path: log_path.clone(),
                source,
            })?;
        out!("{line}");
        Ok(())
    })?;
    save_model(&a.out, &model, &params, &vocab)?;
    Ok(())
}

fn eval_cmd(a: &Eval) -> Result<()> {
    let (model, params, vocab) = load_model(&a.model)?;
    header(
        &[
            ("command", "eval".into()),
            ("model", path_str(&a.model)),
            ("data", path_str(&a.data)),
            ("kg", a.kg.as_deref().map_or("-".into(), path_str)),
        ],
        Some(&model.cfg),
    );
    let data = load_dataset(&a.data)?;
    let global = load_global(&a.kg)?;
    let prepared = model.prepare_all(&data, &vocab, global.as_ref())?;
    let mut terms = TermLists::default();
    if let Some(t) = &a.negation_terms {
        terms.negation = t.clone();
    }
    if let Some(t) = &a.hedge_terms {
        terms.hedge = t.clone();
    }
    if let Some(t) = &a.prepositions {
        terms.prepositions = t.clone();
    }
    let report = evaluate(&model, &params, &prepared, &terms)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_atomic(out, json.as_bytes())?;
    }
    out!("{json}");
    Ok(())
}

fn gradcheck_cmd(a: &Gradcheck) -> Result<bool> {
    let mut cfg = a.cfg.resolve()?;
    cfg.dropout = 0.0;
    header(
        &[
            ("command", "gradcheck".into()),
            ("coords", a.coords.to_string()),
            ("epsilon", a.epsilon.to_string()),
        ],
        Some(&cfg),
    );
    let data = gen_synthetic_mcqa(&SynthConfig {
        seed: cfg.seed,
        n_examples: 1,
        k_way: 4,
        negation_rate: 0.5,
        hedge_rate: 0.0,
    })?;
    let vocab = build_vocab(&data);
    let (kg_nodes, kg_relations) = graph_dims(&data, None);
    let dims = ModelDims {
        vocab_size: vocab.len(),
        kg_nodes,
        kg_relations,
    };
    let (model, params) = GreaseLm::build(&cfg, dims)?;
    let mut ex = model.prepare(&data[0], &vocab, None)?;
    let other = (ex.label + 1) % ex.candidates.len();
    ex.candidates = vec![ex.candidates[ex.label].clone(), ex.candidates[other].clone()];
    ex.label = 0;
    let p64: ParamStore<f64> = params.cast();
    let coords = sample_coords(&p64, a.coords, cfg.seed, |_| true);
    let report = grad_check(|g| model.loss(g, &ex, 0, false), &p64, &coords, a.epsilon)?;
    out!(
        "max_rel_err {:.3e} over {} coordinates",
        report.max_rel_error,
        coords.len()
    );
    if let Some(w) = report.worst() {
        out!(
            "worst {}[{}]: analytic {:.6e} numeric {:.6e}",
            w.name,
            w.index,
            w.analytic,
            w.numeric
        );
    }
    Ok(report.max_rel_error <= GRADCHECK_LIMIT)
}

fn trace_cmd(a: &Trace) -> Result<()> {
    let (model, params, vocab) = load_model(&a.model)?;
    header(
        &[
            ("command", "trace".into()),
            ("model", path_str(&a.model)),
            ("data", path_str(&a.data)),
            ("example", a.example.clone().unwrap_or_else(|| "-".into())),
            ("candidate", a.candidate.map_or("-".into(), |c| c.to_string())),
        ],
        Some(&model.cfg),
    );
    let data = load_dataset(&a.data)?;
    let ex = match &a.example {
        Some(id) => data
            .iter()
            .find(|e| &e.id == id)
            .with_context(|| format!("no example `{id}`"))?,
        None => data.first().context("empty dataset")?,
    };
    let global = load_global(&a.kg)?;
    let prepared = model.prepare(ex, &vocab, global.as_ref())?;
    let t = trace_candidate(&model, &params, &prepared, a.candidate.unwrap_or(ex.label))?;
    let json = serde_json::to_string_pretty(&t)?;
    if let Some(out) = &a.out {
        write_atomic(out, json.as_bytes())?;
    }
    out!("{json}");
    Ok(())
}

fn ablate_cmd(a: &Ablate) -> Result<()> {
    let base = match &a.base {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let text = fs::read_to_string(&a.suite).with_context(|| format!("reading {}", a.suite.display()))?;
    let suite = Suite::parse(&text, &path_str(&a.suite))?;
    header(
        &[
            ("command", "ablate".into()),
            ("suite", path_str(&a.suite)),
            ("train", a.train.as_deref().map_or("synthetic".into(), path_str)),
            ("dev", a.dev.as_deref().map_or("synthetic".into(), path_str)),
            ("n_train", a.n_train.to_string()),
            ("n_dev", a.n_dev.to_string()),
            ("negation_rate", a.negation_rate.to_string()),
            ("data_seed", a.data_seed.to_string()),
            ("out", path_str(&a.out)),
        ],
        Some(&base),
    );
    let synth = |seed: u64, n: usize| {
        gen_synthetic_mcqa(&SynthConfig {
            seed,
            n_examples: n,
            k_way: 5,
            negation_rate: a.negation_rate,
            hedge_rate: 0.2,
        })
    };
    let train_set = match &a.train {
        Some(p) => load_dataset(p)?,
        None => synth(a.data_seed, a.n_train)?,
    };
    let dev_set = match &a.dev {
        Some(p) => load_dataset(p)?,
        None => synth(a.data_seed.wrapping_add(1), a.n_dev)?,
    };
    let global = load_global(&a.kg)?;
    let rows = run_ablation(&base, &suite, |cfg| {
        fit_and_score(cfg, &train_set, &dev_set, global.as_ref())
    })?;
    let tsv = report_tsv(&rows);
    write_atomic(&a.out, tsv.as_bytes())?;
    let _ = write!(std::io::stdout(), "{tsv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match &cli.cmd {
        Cmd::GenKg(a) => gen_kg(a)?,
        Cmd::GenData(a) => gen_data(a)?,
        Cmd::Retrieve(a) => retrieve_cmd(a)?,
        Cmd::Train(a) => train_cmd(a)?,
        Cmd::Eval(a) => eval_cmd(a)?,
        Cmd::Gradcheck(a) => return gradcheck_cmd(a),
        Cmd::Trace(a) => trace_cmd(a)?,
        Cmd::Ablate(a) => ablate_cmd(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check above {GRADCHECK_LIMIT:e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
