//! `sidkit` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numeric
//! failure during training.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{train_projection, ProjectionConfig, ProjectionHead, DEFAULT_TEMPERATURE};
use crate::catalog::{
    load_assignments, load_item_catalog, load_sequences, render_sid_string, write_assignments, write_item_catalog,
    write_sequences, flat_tokens_to_sid, ItemCatalog, SidStructure, DEFAULT_CODE_DIM, DEFAULT_INPUT_DIM,
};
use crate::collision::{occupancy_stats, AssignmentTable, CollisionPolicy, PolicyKind, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::quantizer::{
    feature_fidelity, load_model, train_multivq, train_rqkmeans, train_rqvae, write_model, MultiVqConfig,
    QuantizerKind, QuantizerModel, RandomQuantizer, RqKmeansConfig, RqVaeConfig,
};
use crate::retrieval::{
    build_useraction_corpus, dynamic_beam_search, evaluate_hr, history_context, load_markov_scorer,
    train_markov_scorer, BeamSchedule, SequenceScorer, DEFAULT_ALPHA, DEFAULT_ORDER,
};
use crate::sidmetrics::{
    codebook_utilization, consistency, embedding_hitrate, gini_coefficient, hitrate_pairs, OccupancyVector,
    PairLabels, Relation,
};
use crate::toy::{generate_toy, ToyConfig};

#[derive(Debug, Parser)]
#[command(name = "sidkit", version, about = "Semantic-ID construction, repair, evaluation, and retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog, train/test sequences, and pair labels.
    GenToy(GenToyArgs),
    /// Train a linear projection head on related-item pairs.
    TrainProjection(TrainProjectionArgs),
    /// Learn codebooks and assign a SID to every catalog item.
    Tokenize(TokenizeArgs),
    /// Re-assign SIDs with a collision policy.
    Collide(CollideArgs),
    /// Print SID quality metrics.
    EvalSid(EvalSidArgs),
    /// Fit the Markov SID scorer on history+target token streams.
    TrainScorer(TrainScorerArgs),
    /// Decode the top SIDs for every sequence.
    Retrieve(RetrieveArgs),
    /// HR@K of beam-search retrieval as CSV.
    EvalHr(EvalHrArgs),
    /// Write the UserAction pretraining corpus.
    BuildPretrainCorpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    /// Item catalog TSV.
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long, default_value_t = DEFAULT_INPUT_DIM)]
    pub input_dim: usize,
    /// Projection head applied to every embedding after loading.
    #[arg(long)]
    pub projection: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub items: usize,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 5000)]
    pub train_sequences: usize,
    #[arg(long, default_value_t = 500)]
    pub test_sequences: usize,
    #[arg(long, default_value_t = 10)]
    pub history_len: usize,
    #[arg(long, default_value_t = 2)]
    pub style_group_size: usize,
    #[arg(long)]
    pub seed: u64,
    /// Receives catalog.tsv, train.tsv, test.tsv and labels.tsv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainProjectionArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long)]
    pub seed: u64,
    /// Head weights TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub out_trace: Option<PathBuf>,
    /// Catalog with projected embeddings.
    #[arg(long)]
    pub out_catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long, value_parser = parse_kind)]
    pub quantizer: QuantizerKind,
    /// Codebook sizes per level, e.g. 8192,8192,8192.
    #[arg(long)]
    pub levels: String,
    #[arg(long, default_value_t = DEFAULT_CODE_DIM)]
    pub code_dim: usize,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 40)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    /// Hidden layer widths of the encoder; the decoder mirrors them.
    #[arg(long, default_value = "256,256")]
    pub hidden: String,
    #[arg(long, default_value_t = 0.25)]
    pub beta: f64,
    /// Lloyd iterations per level for rqkmeans.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_assignments: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Training trace CSV.
    #[arg(long)]
    pub out_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollideArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_policy)]
    pub policy: PolicyKind,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: u32,
    #[arg(long, default_value_t = 0)]
    pub merge_threshold: usize,
    /// Last-level candidates per item for knn; defaults to the whole level.
    #[arg(long)]
    pub k_candidates: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalSidArgs {
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long)]
    pub assignments: PathBuf,
    /// Level sizes; taken from --model when omitted.
    #[arg(long)]
    pub levels: Option<String>,
    /// Quantizer model, for feature fidelity.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Pair labels TSV (item_a, item_b, style|origin).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Sequences for embedding hit rate.
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub hr_k: usize,
    /// Compute Gini over occupied SIDs only; this changes its value.
    #[arg(long)]
    pub occupied_only: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainScorerArgs {
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub levels: String,
    #[arg(long)]
    pub sequences: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub scorer: PathBuf,
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub sequences: PathBuf,
    /// Beam width per level; defaults to 600,1200 or 300,600,1200.
    #[arg(long)]
    pub beam: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// SIDs kept per sequence.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalHrArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value = "20,100,500,1000")]
    pub k: String,
    /// Value of the stage column.
    #[arg(long, default_value = "eval")]
    pub stage: String,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub assignments: PathBuf,
    #[arg(long)]
    pub levels: String,
    #[arg(long)]
    pub sequences: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<QuantizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy(a) => cmd_gen_toy(&a),
        Command::TrainProjection(a) => cmd_train_projection(&a),
        Command::Tokenize(a) => cmd_tokenize(&a),
        Command::Collide(a) => cmd_collide(&a),
        Command::EvalSid(a) => cmd_eval_sid(&a),
        Command::TrainScorer(a) => cmd_train_scorer(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::EvalHr(a) => cmd_eval_hr(&a),
        Command::BuildPretrainCorpus(a) => cmd_build_corpus(&a),
    }
}

fn check_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            ));
        }
    }
    Ok(())
}

fn check_outputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            ));
        }
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn load_catalog(args: &CatalogArgs) -> Result<ItemCatalog> {
    let catalog = load_item_catalog(&args.catalog, args.input_dim)?;
    match &args.projection {
        Some(p) => ProjectionHead::load(p, DEFAULT_TEMPERATURE)?.project_catalog(&catalog),
        None => Ok(catalog),
    }
}

fn catalog_inputs(args: &CatalogArgs) -> Vec<&Path> {
    let mut v = vec![args.catalog.as_path()];
    v.extend(args.projection.as_deref());
    v
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} `{t}` in `{s}`")))
        })
        .collect()
}

fn load_table(path: &Path, structure: SidStructure) -> Result<AssignmentTable> {
    AssignmentTable::from_assignments(structure, load_assignments(path)?)
}

fn cmd_gen_toy(a: &GenToyArgs) -> Result<()> {
    if !a.out_dir.is_dir() {
        std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    }
    let world = generate_toy(&ToyConfig {
        items: a.items,
        clusters: a.clusters,
        dim: a.dim,
        style_group_size: a.style_group_size,
        train_sequences: a.train_sequences,
        test_sequences: a.test_sequences,
        history_len: a.history_len,
        seed: a.seed,
        ..ToyConfig::default()
    })?;
    write_file(&a.out_dir.join("catalog.tsv"), |o| write_item_catalog(&world.catalog, o))?;
    write_file(&a.out_dir.join("train.tsv"), |o| write_sequences(&world.train, o))?;
    write_file(&a.out_dir.join("test.tsv"), |o| write_sequences(&world.test, o))?;
    write_file(&a.out_dir.join("labels.tsv"), |o| {
        PairLabels::from_catalog_groups(&world.catalog).write(o)
    })?;
    log::info!(
        "wrote {} items, {} train and {} test sequences to {}",
        world.catalog.len(),
        world.train.len(),
        world.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_train_projection(a: &TrainProjectionArgs) -> Result<()> {
    check_inputs(catalog_inputs(&a.catalog))?;
    check_outputs([a.out.as_path()].into_iter().chain(a.out_trace.as_deref()).chain(a.out_catalog.as_deref()))?;
    let catalog = load_catalog(&a.catalog)?;
    let trained = train_projection(
        &catalog,
        &ProjectionConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            optimizer: AdamWConfig { lr: a.lr, ..AdamWConfig::default() },
            temperature: a.temperature,
            seed: a.seed,
            ..ProjectionConfig::default()
        },
    )?;
    write_file(&a.out, |o| trained.head.write_tsv(o))?;
    if let Some(p) = &a.out_trace {
        write_file(p, |o| {
            writeln!(o, "epoch,loss")?;
            for (e, l) in trained.loss_trace.iter().enumerate() {
                writeln!(o, "{e},{l}")?;
            }
            Ok(())
        })?;
    }
    if let Some(p) = &a.out_catalog {
        let projected = trained.head.project_catalog(&catalog)?;
        write_file(p, |o| write_item_catalog(&projected, o))?;
    }
    log::info!(
        "alignment loss {:.4} -> {:.4}",
        trained.loss_trace[0],
        trained.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_tokenize(a: &TokenizeArgs) -> Result<()> {
    check_inputs(catalog_inputs(&a.catalog))?;
    check_outputs(
        [a.out_assignments.as_path(), a.out_model.as_path()]
            .into_iter()
            .chain(a.out_trace.as_deref()),
    )?;
    let structure = SidStructure::parse_levels(&a.levels, a.code_dim)?;
    let catalog = load_catalog(&a.catalog)?;
    if catalog.is_empty() {
        return Err(Error::invalid("catalog is empty"));
    }
    let emb = catalog.embeddings();
    let hidden = parse_usize_list(&a.hidden, "hidden width")?;
    let vae = RqVaeConfig {
        encoder_hidden: hidden.clone(),
        decoder_hidden: hidden.into_iter().rev().collect(),
        epochs: a.epochs,
        warmup_epochs: a.warmup_epochs,
        batch_size: a.batch_size,
        optimizer: AdamWConfig { lr: a.lr, ..AdamWConfig::default() },
        commitment_beta: a.beta,
        seed: a.seed,
        ..RqVaeConfig::default()
    };
    let mut trace = String::new();
    let model = match a.quantizer {
        QuantizerKind::RqVae => {
            let t = train_rqvae(&emb, &structure, &vae)?;
            trace.push_str("epoch,total_loss,recon_loss,feature_fidelity\n");
            for s in &t.trace {
                trace.push_str(&format!("{},{},{},{}\n", s.epoch, s.total_loss, s.recon_loss, s.feature_fidelity));
            }
            QuantizerModel::RqVae(t.model)
        }
        QuantizerKind::MultiVq => {
            let t = train_multivq(&emb, &structure, &MultiVqConfig { base: vae, level_seeds: None })?;
            trace.push_str("level,epoch,total_loss,recon_loss,feature_fidelity\n");
            for (j, tr) in t.traces.iter().enumerate() {
                for s in tr {
                    trace.push_str(&format!(
                        "{},{},{},{},{}\n",
                        j + 1,
                        s.epoch,
                        s.total_loss,
                        s.recon_loss,
                        s.feature_fidelity
                    ));
                }
            }
            QuantizerModel::MultiVq(t.model)
        }
        QuantizerKind::RqKmeans => {
            // codewords live in the input space
            let s = SidStructure::new(structure.level_sizes().to_vec(), catalog.input_dim())?;
            let t = train_rqkmeans(&emb, &s, &RqKmeansConfig { max_iters: a.max_iters, seed: a.seed })?;
            trace.push_str("level,iteration,objective\n");
            for (j, tr) in t.objective_traces.iter().enumerate() {
                for (i, v) in tr.iter().enumerate() {
                    trace.push_str(&format!("{},{i},{v}\n", j + 1));
                }
            }
            QuantizerModel::RqKmeans(t.codebooks)
        }
        QuantizerKind::Random => {
            trace.push_str("level,iteration,objective\n");
            QuantizerModel::Random(RandomQuantizer::new(structure, a.seed))
        }
    };
    let table = CollisionPolicy::new(PolicyKind::Noco).apply(&model, &catalog)?;
    write_file(&a.out_assignments, |o| write_assignments(table.iter(), o))?;
    write_file(&a.out_model, |o| write_model(&model, o))?;
    if let Some(p) = &a.out_trace {
        write_file(p, |o| o.write_all(trace.as_bytes()))?;
    }
    let stats = occupancy_stats(&table);
    log::info!(
        "{} items on {} distinct SIDs (max {} per SID)",
        table.len(),
        stats.distinct,
        stats.max
    );
    Ok(())
}

fn cmd_collide(a: &CollideArgs) -> Result<()> {
    check_inputs(catalog_inputs(&a.catalog).into_iter().chain([a.model.as_path()]))?;
    check_outputs([a.out.as_path()])?;
    let catalog = load_catalog(&a.catalog)?;
    let model = load_model(&a.model)?;
    let policy = CollisionPolicy {
        kind: a.policy,
        sigma: a.sigma,
        merge_threshold: a.merge_threshold,
        k_candidates: a.k_candidates,
    };
    let table = policy.apply(&model, &catalog)?;
    write_file(&a.out, |o| write_assignments(table.iter(), o))?;
    let stats = occupancy_stats(&table);
    log::info!("{} policy: {} distinct SIDs, max {} per SID", a.policy, stats.distinct, stats.max);
    Ok(())
}

fn cmd_eval_sid(a: &EvalSidArgs) -> Result<()> {
    let mut inputs = catalog_inputs(&a.catalog);
    inputs.push(&a.assignments);
    inputs.extend(a.model.as_deref());
    inputs.extend(a.labels.as_deref());
    inputs.extend(a.sequences.as_deref());
    check_inputs(inputs)?;
    check_outputs(a.csv.as_deref())?;
    let model = a.model.as_ref().map(load_model).transpose()?;
    let structure = match (&a.levels, &model) {
        (Some(l), _) => SidStructure::parse_levels(l, 1)?,
        (None, Some(m)) => m.structure().clone(),
        (None, None) => return Err(Error::invalid("either --levels or --model is required")),
    };
    let catalog = load_catalog(&a.catalog)?;
    let table = load_table(&a.assignments, structure)?;
    for id in catalog.ids() {
        if table.get(id).is_none() {
            return Err(Error::invalid(format!("item {id} has no SID assignment")));
        }
    }

    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut occupancy = OccupancyVector::from_table(&table);
    if a.occupied_only {
        log::warn!("--occupied-only ignores unused SIDs; the Gini value is not comparable to the full one");
        occupancy = occupancy.occupied_only();
    }
    rows.push(("gini".into(), gini_coefficient(&occupancy)?));
    let util = codebook_utilization(&table);
    rows.push(("utilization".into(), util.overall));
    for (j, u) in util.per_level.iter().enumerate() {
        rows.push((format!("utilization_level{}", j + 1), *u));
    }
    let stats = occupancy_stats(&table);
    rows.push(("distinct_sids".into(), stats.distinct as f64));
    rows.push(("max_occupancy".into(), stats.max as f64));
    if let Some(m) = model.as_ref().filter(|m| m.has_decoder()) {
        rows.push(("feature_fidelity".into(), feature_fidelity(m, &catalog.embeddings())?));
    }
    if let Some(p) = &a.labels {
        let labels = PairLabels::load(p)?;
        for rel in [Relation::Style, Relation::Origin] {
            if labels.pairs.iter().any(|(_, _, r)| *r == rel) {
                rows.push((format!("{rel}_consistency"), consistency(&table, &labels, rel)?));
            }
        }
    }
    if let Some(p) = &a.sequences {
        let set = load_sequences(p)?;
        let pairs = hitrate_pairs(&set.sequences);
        rows.push((format!("embedding_hitrate@{}", a.hr_k), embedding_hitrate(&catalog, &pairs, a.hr_k)?));
    }

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let io = |e| Error::io("<stdout>", e);
    writeln!(out, "metric\tvalue").map_err(io)?;
    for (name, v) in &rows {
        writeln!(out, "{name}\t{v:.4}").map_err(io)?;
    }
    if let Some(p) = &a.csv {
        write_file(p, |o| {
            writeln!(o, "metric,value")?;
            for (name, v) in &rows {
                writeln!(o, "{name},{v}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn cmd_train_scorer(a: &TrainScorerArgs) -> Result<()> {
    check_inputs([a.assignments.as_path(), a.sequences.as_path()])?;
    check_outputs([a.out.as_path()])?;
    let structure = SidStructure::parse_levels(&a.levels, 1)?;
    let table = load_table(&a.assignments, structure.clone())?;
    let set = load_sequences(&a.sequences)?;
    let corpus = build_useraction_corpus(&set.sequences, &table)?;
    let scorer = train_markov_scorer(&corpus, a.order, a.alpha, &structure)?;
    write_file(&a.out, |o| scorer.write(o))?;
    log::info!("scorer trained on {} streams, {} contexts", corpus.len(), scorer.num_contexts());
    Ok(())
}

struct Decoder {
    scorer: crate::retrieval::MarkovScorer,
    table: AssignmentTable,
    sequences: Vec<crate::catalog::InteractionSequence>,
    schedule: BeamSchedule,
}

fn load_decoder(a: &DecodeArgs) -> Result<Decoder> {
    check_inputs([a.scorer.as_path(), a.assignments.as_path(), a.sequences.as_path()])?;
    let scorer = load_markov_scorer(&a.scorer)?;
    let structure = scorer.structure().clone();
    let schedule = match &a.beam {
        Some(b) => b.parse()?,
        None => BeamSchedule::production_default(structure.levels()).ok_or_else(|| {
            Error::invalid(format!("no default beam for {} levels; pass --beam", structure.levels()))
        })?,
    };
    let table = load_table(&a.assignments, structure)?;
    let sequences = load_sequences(&a.sequences)?.sequences;
    Ok(Decoder {
        scorer,
        table,
        sequences,
        schedule,
    })
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    check_outputs([a.out.as_path()])?;
    let d = load_decoder(&a.decode)?;
    let mut members: std::collections::BTreeMap<&crate::catalog::SemanticId, Vec<&str>> = Default::default();
    for (id, sid) in d.table.iter() {
        members.entry(sid).or_default().push(id);
    }
    members.values_mut().for_each(|v| v.sort_unstable());
    let mut rows = String::from("pv_id\trank\tsid\tlog_prob\titems\n");
    for s in &d.sequences {
        let ctx = history_context(&d.table, &s.history)?;
        let top = dynamic_beam_search(&d.scorer, &ctx, &d.schedule, a.top, s.query.as_deref())?;
        for (rank, (sid, lp)) in top.iter().enumerate() {
            let items = members.get(sid).map(|v| v.join(",")).unwrap_or_default();
            let rendered = render_sid_string(sid, d.table.structure())?;
            rows.push_str(&format!("{}\t{}\t{rendered}\t{lp}\t{items}\n", s.pv_id, rank + 1));
        }
    }
    write_file(&a.out, |o| o.write_all(rows.as_bytes()))
}

fn cmd_eval_hr(a: &EvalHrArgs) -> Result<()> {
    check_outputs(a.out.as_deref())?;
    let ks = parse_usize_list(&a.k, "K")?;
    let d = load_decoder(&a.decode)?;
    let report = evaluate_hr(&d.scorer, &d.table, &d.sequences, &d.schedule, &ks)?;
    match &a.out {
        Some(p) => write_file(p, |o| report.write_csv(&a.stage, o)),
        None => report
            .write_csv(&a.stage, std::io::stdout().lock())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_build_corpus(a: &CorpusArgs) -> Result<()> {
    check_inputs([a.assignments.as_path(), a.sequences.as_path()])?;
    check_outputs([a.out.as_path()])?;
    let structure = SidStructure::parse_levels(&a.levels, 1)?;
    let table = load_table(&a.assignments, structure.clone())?;
    let set = load_sequences(&a.sequences)?;
    let corpus = build_useraction_corpus(&set.sequences, &table)?;
    let mut text = String::new();
    for (s, stream) in set.sequences.iter().zip(&corpus) {
        text.push_str(&s.pv_id);
        text.push('\t');
        for chunk in stream.chunks(structure.levels()) {
            let sid = flat_tokens_to_sid(chunk, &structure)?;
            text.push_str(&render_sid_string(&sid, &structure)?);
        }
        text.push('\n');
    }
    write_file(&a.out, |o| o.write_all(text.as_bytes()))
}
