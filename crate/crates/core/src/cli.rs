//! Command-line front end. Flags override config-file values, which override
//! built-in defaults.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_manifest, read_bag_file, split, write_bag_file, write_manifest, FeatureBag,
    LoadedData, ManifestEntry, Split, SplitFractions, SyntheticSpec, TaskSpec,
};
use crate::ecn::TaskIndicator;
use crate::error::{Error, Result};
use crate::eval::{check_compatible, evaluate, run_ablation, AblationSetup, Grid};
use crate::model::gradcheck::{check_model, tiny_config, TOLERANCE};
use crate::model::{read_checkpoint, Mecformer, ModelConfig, ProjectionKind, EOS};
use crate::tensor::gradcheck::op_suite;
use crate::tensor::OpKind;
use crate::training::{examples, train, OptimizerKind, RunDir, TrainConfig};

/// Environment variable naming the directory that default run directories
/// are created in.
pub const RUN_ROOT_ENV: &str = "MECFORMER_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "mecformer", version, about = "Multi-task slide classification with term decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: bag files, manifest and task spec.
    GenData(GenDataArgs),
    /// Train one model on the manifest's train and val splits.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Greedily decode one bag and print the step trace.
    Decode(DecodeArgs),
    /// Train and compare a grid of variants over several seeded splits.
    Ablate(AblateArgs),
    /// Finite-difference check of the backward rules and a whole tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic spec JSON; without it, the default benchmark on the built-in
    /// five-task spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only the first N built-in tasks (requires no --spec).
    #[arg(long, conflicts_with = "spec")]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub bags_per_class: Option<usize>,
}

/// Settings shared by `train` and `ablate`.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// RunConfig JSON; its relative paths resolve against its own directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Defaults to tasks.json next to the manifest.
    #[arg(long)]
    pub task_spec: Option<PathBuf>,
    /// Defaults to a named directory under $MECFORMER_RUN_ROOT (or ./runs).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_parser = ProjectionKind::parse)]
    pub projection: Option<ProjectionKind>,
    /// Replace the decoder with a mean-pool classification head.
    #[arg(long)]
    pub no_decoder: bool,
    /// Use exact softmax attention in the encoder.
    #[arg(long)]
    pub exact_attention: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Sets both encoder and decoder depth.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub pwff_hidden: Option<usize>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = OptimizerKind::parse)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub accumulate: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_parser = Grid::parse)]
    pub grid: Option<Grid>,
    /// Number of seeded splits, starting at the run seed.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory to use its best checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Must match the task spec stored in the checkpoint when given.
    #[arg(long)]
    pub task_spec: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = Split::parse)]
    pub split: Split,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write one prediction record per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bag: PathBuf,
    /// Task name or zero-based index.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the backward rule of this op by 1.5 to show the check catches it.
    #[arg(long, value_parser = parse_op)]
    pub inject_fault: Option<OpKind>,
    #[arg(long, value_parser = ProjectionKind::parse)]
    pub projection: Option<ProjectionKind>,
    #[arg(long)]
    pub no_decoder: bool,
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op {s:?}; one of {}", names.join(", "))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub grid: Grid,
    pub seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            grid: Grid::Projection,
            seeds: 3,
        }
    }
}

/// Everything a `train` or `ablate` run depends on. `d_f`, `tasks`,
/// `vocab_size` and `categories` of the model are always taken from the data
/// and task spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub task_spec: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Split fractions for the re-split seeds of an ablation.
    pub split: SplitFractions,
    pub ablation: AblationConfig,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in [&mut cfg.manifest, &mut cfg.task_spec, &mut cfg.run_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn apply(&mut self, a: &RunArgs) {
        let m = &mut self.model;
        let t = &mut self.train;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = a.$flag.clone() { $field = v; })*
            };
        }
        for (flag, field) in [
            (&a.manifest, &mut self.manifest),
            (&a.task_spec, &mut self.task_spec),
            (&a.run_dir, &mut self.run_dir),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
        set! {
            projection => m.projection,
            d_model => m.d_model,
            heads => m.heads,
            layers => m.encoder_layers,
            layers => m.decoder_layers,
            pwff_hidden => m.pwff_hidden,
            landmarks => m.num_landmarks,
            gamma => m.gamma,
            beta => m.beta,
            lr => t.lr,
            epochs => t.epochs,
            patience => t.patience,
            seed => t.seed,
            optimizer => t.optimizer,
            accumulate => t.accumulate,
        }
        if a.no_decoder {
            m.use_decoder = false;
        }
        if a.exact_attention {
            m.exact_attention = true;
        }
    }
}

/// A run with every path resolved and every setting validated.
struct PreparedRun {
    config: RunConfig,
    spec: TaskSpec,
    manifest: PathBuf,
    run_dir: PathBuf,
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

fn variant_name(m: &ModelConfig) -> String {
    if m.use_decoder {
        m.projection.as_str().to_string()
    } else {
        format!("{}-headonly", m.projection.as_str())
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Collects every configuration problem before any data is read.
fn prepare(args: &RunArgs, default_name: impl Fn(&RunConfig) -> String, ablation: bool) -> Result<PreparedRun> {
    let mut config = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    config.apply(args);
    let mut problems = Vec::new();

    let manifest = match &config.manifest {
        None => {
            problems.push("a manifest is required (--manifest or \"manifest\")".to_string());
            None
        }
        Some(p) if !p.is_file() => {
            problems.push(format!("manifest {} does not exist", p.display()));
            None
        }
        Some(p) => Some(absolute(p)),
    };
    let spec_path = config
        .task_spec
        .clone()
        .or_else(|| manifest.as_ref().and_then(|m| m.parent()).map(|d| d.join("tasks.json")));
    let spec = match &spec_path {
        None => None,
        Some(p) => match std::fs::read_to_string(p) {
            Err(e) => {
                problems.push(format!("task spec {}: {e}", p.display()));
                None
            }
            Ok(text) => match TaskSpec::from_json(&text) {
                Ok(s) => Some(s),
                Err(e) => {
                    problems.push(format!("task spec {}: {e}", p.display()));
                    None
                }
            },
        },
    };
    if let Some(s) = &spec {
        config.model.tasks = s.task_count();
        config.model.vocab_size = s.vocab().len();
        config.model.categories = s.total_categories();
    }
    problems.extend(config.model.problems());
    problems.extend(config.train.problems());
    if ablation {
        if let Err(e) = config.split.validate() {
            problems.push(e.to_string());
        }
        if config.ablation.seeds == 0 {
            problems.push("ablation needs at least one seed".into());
        }
    }
    let run_dir = config
        .run_dir
        .clone()
        .unwrap_or_else(|| run_root().join(default_name(&config)));
    if dir_is_nonempty(&run_dir) && !args.force {
        problems.push(format!(
            "run directory {} is not empty; pass --force to reuse it",
            run_dir.display()
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "{} problem(s):\n  - {}",
            problems.len(),
            problems.join("\n  - ")
        )));
    }
    let run_dir = absolute(&run_dir);
    config.manifest = manifest.clone();
    config.task_spec = spec_path.as_deref().map(absolute);
    config.run_dir = Some(run_dir.clone());
    Ok(PreparedRun {
        config,
        spec: spec.expect("checked above"),
        manifest: manifest.expect("checked above"),
        run_dir,
    })
}

/// Loads the manifest and fixes the model's `d_f` from the bags.
fn load_data(run: &mut PreparedRun) -> Result<LoadedData> {
    let data = load_manifest(&run.manifest, &run.spec, None)?;
    let d_f = data
        .bags
        .first()
        .map(FeatureBag::d_f)
        .ok_or_else(|| Error::Ingestion(format!("manifest {} lists no bags", run.manifest.display())))?;
    for b in &data.bags {
        b.expect_d_f(d_f)?;
    }
    run.config.model.d_f = d_f;
    Ok(data)
}

fn snapshot(cfg: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serialises");
    s.push('\n');
    s
}

fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => {
            let full = TaskSpec::default_five_task();
            let tasks = match a.tasks {
                Some(n) if n == 0 || n > full.task_count() => {
                    return Err(Error::Config(format!(
                        "--tasks must be between 1 and {}",
                        full.task_count()
                    )))
                }
                Some(n) => TaskSpec::new(full.tasks()[..n].to_vec())?,
                None => full,
            };
            SyntheticSpec::benchmark(tasks, 0)
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.bags_per_class {
        spec.bags_per_class = n;
    }
    spec.validate()?;
    if dir_is_nonempty(&a.out) && !a.force {
        return Err(Error::Config(format!(
            "output directory {} is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let bags_dir = a.out.join("bags");
    if bags_dir.exists() {
        std::fs::remove_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;
    }
    std::fs::create_dir_all(&bags_dir).map_err(|e| Error::io(&bags_dir, e))?;

    let bags = generate_synthetic(&spec)?;
    let partition = split(&bags, spec.split, spec.seed)?;
    let assignment = partition.assignments(bags.len());
    let tasks = &spec.tasks;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, s) in bags.iter().zip(&assignment) {
        let rel = format!("bags/{}.bag", bag.slide_id);
        write_bag_file(&a.out.join(&rel), bag)?;
        entries.push(ManifestEntry {
            slide_id: bag.slide_id.clone(),
            task: tasks.task(bag.task_id)?.name.clone(),
            path: rel,
            label_term: bag.label_term.clone(),
            split: s.expect("every bag is assigned"),
        });
    }
    write_manifest(&a.out.join("manifest.jsonl"), &entries)?;
    let write = |name: &str, text: String| {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("tasks.json", tasks.to_json() + "\n")?;
    write("synthetic.json", serde_json::to_string_pretty(&spec)? + "\n")?;

    let io = |e: std::io::Error| Error::io("<stdout>", e);
    writeln!(out, "wrote {} bags to {}", bags.len(), a.out.display()).map_err(io)?;
    writeln!(
        out,
        "tasks {}, categories {}, vocabulary size {}",
        tasks.task_count(),
        tasks.total_categories(),
        tasks.vocab().len()
    )
    .map_err(io)?;
    let mut counts: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    for b in &bags {
        *counts.entry((b.task_id, b.label_term.as_str())).or_default() += 1;
    }
    for (t, def) in tasks.tasks().iter().enumerate() {
        let per: Vec<String> = def
            .categories
            .iter()
            .map(|c| format!("{:?} {}", c.term, counts.get(&(t, c.term.as_str())).unwrap_or(&0)))
            .collect();
        writeln!(out, "  {}: {}", def.name, per.join(", ")).map_err(io)?;
    }
    writeln!(
        out,
        "splits: train {}, val {}, test {}",
        partition.train.len(),
        partition.val.len(),
        partition.test.len()
    )
    .map_err(io)?;
    Ok(())
}

fn out_io(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut run = prepare(
        &a.run,
        |c| format!("train-{}-seed{}", variant_name(&c.model), c.train.seed),
        false,
    )?;
    let data = load_data(&mut run)?;
    let cfg = &run.config;
    let use_decoder = cfg.model.use_decoder;
    let train_set = examples(data.subset(Split::Train), &run.spec, use_decoder)?;
    let val_bags = data.subset(Split::Val);
    let val_set = examples(val_bags.iter().copied(), &run.spec, use_decoder)?;
    let dir = RunDir::create(&run.run_dir, &snapshot(cfg))?;
    let meta = run.spec.to_json();
    let mut model = Mecformer::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |rec, m| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            if rec.improved { "  *" } else { "" }
        );
        dir.record_epoch(rec, m, &meta)
    })?;
    let (_, report) = evaluate(&model, &run.spec, val_bags.iter().copied())?;
    dir.write_text("val_metrics.json", &report.to_json())?;
    dir.write_text("val_metrics.txt", &report.to_text())?;
    writeln!(
        out,
        "best epoch {} (val loss {:.6}) of {}{}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
        if outcome.stopped_early { ", stopped early" } else { "" }
    )
    .map_err(out_io)?;
    writeln!(out, "best checkpoint {}", dir.best_checkpoint_path()?.display()).map_err(out_io)?;
    write!(out, "validation\n{}", report.to_text()).map_err(out_io)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Mecformer, TaskSpec)> {
    let file = if path.is_dir() {
        RunDir::open(path).best_checkpoint_path()?
    } else {
        path.to_path_buf()
    };
    let ckpt = read_checkpoint(&file)?;
    let spec = TaskSpec::from_json(&ckpt.metadata).map_err(|e| {
        Error::Incompatible(format!("checkpoint {} carries no valid task spec: {e}", file.display()))
    })?;
    Ok((ckpt.into_model()?, spec))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, spec) = load_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.task_spec {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        if TaskSpec::from_json(&text)? != spec {
            return Err(Error::Incompatible(format!(
                "task spec {} differs from the one the checkpoint was trained with",
                p.display()
            )));
        }
    }
    let data = load_manifest(&a.manifest, &spec, None)?;
    let bags = data.subset(a.split);
    if bags.is_empty() {
        return Err(Error::Contract(format!("split {} of the manifest is empty", a.split)));
    }
    for b in &bags {
        check_compatible(&model, &spec, Some(b.d_f()))?;
    }
    check_compatible(&model, &spec, None)?;
    let (records, report) = evaluate(&model, &spec, bags.iter().copied())?;
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json() + "\n").map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.predictions {
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    writeln!(out, "split {} ({} bags)", a.split, bags.len()).map_err(out_io)?;
    write!(out, "{}", report.to_text()).map_err(out_io)?;
    Ok(())
}

fn resolve_task(spec: &TaskSpec, arg: &str) -> Result<usize> {
    let id = match arg.parse::<usize>() {
        Ok(i) => i,
        Err(_) => spec
            .task_index(arg)
            .map_err(|_| Error::Config(format!("unknown task {arg:?}")))?,
    };
    if id >= spec.task_count() {
        return Err(Error::Config(format!(
            "task {id} is out of range; the model has {} tasks",
            spec.task_count()
        )));
    }
    Ok(id)
}

fn cmd_decode(a: &DecodeArgs, out: &mut dyn Write) -> Result<()> {
    let (model, spec) = load_checkpoint(&a.checkpoint)?;
    let task_id = resolve_task(&spec, &a.task)?;
    let bag = read_bag_file(&a.bag)?;
    check_compatible(&model, &spec, Some(bag.d_f()))?;
    if bag.task_id != task_id {
        eprintln!(
            "note: bag {:?} is stored under task {}, decoding as task {task_id}",
            bag.slide_id, bag.task_id
        );
    }
    let task = TaskIndicator::new(task_id, spec.task_count())?;
    let x = bag.to_tensor();
    if !model.config().use_decoder {
        let (global, _) = model.predict_category(&x, task)?;
        let (t, c) = spec
            .split_global(global)
            .ok_or_else(|| Error::Contract(format!("head predicted unknown category {global}")))?;
        writeln!(out, "term: {}", spec.tasks()[t].categories[c].term).map_err(out_io)?;
        writeln!(out, "model has no decoder; no step trace").map_err(out_io)?;
        return Ok(());
    }
    let g = model.generate(&x, task)?;
    let vocab = spec.vocab();
    writeln!(out, "term: {}", spec.detokenize(&g.tokens)?).map_err(out_io)?;
    for (i, step) in g.trace.iter().enumerate() {
        let top: Vec<String> = step
            .top_k(a.top_k)
            .into_iter()
            .map(|(t, l)| Ok(format!("{}={l:.4}", vocab.word(t)?)))
            .collect::<Result<_>>()?;
        writeln!(
            out,
            "step {}: {}{}  top: {}",
            i + 1,
            vocab.word(step.token)?,
            if step.token == EOS { " (end)" } else { "" },
            top.join(" ")
        )
        .map_err(out_io)?;
    }
    writeln!(out, "truncated: {}", g.truncated).map_err(out_io)?;
    Ok(())
}

/// Returns whether every cell succeeded on every seed.
fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<bool> {
    let mut run = prepare(
        &a.run,
        |c| {
            let grid = a.grid.unwrap_or(c.ablation.grid);
            format!("ablate-{}-seed{}", grid_name(grid), c.train.seed)
        },
        true,
    )?;
    if let Some(g) = a.grid {
        run.config.ablation.grid = g;
    }
    if let Some(n) = a.seeds {
        if n == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        run.config.ablation.seeds = n;
    }
    let data = load_data(&mut run)?;
    let cfg = &run.config;
    std::fs::create_dir_all(&run.run_dir).map_err(|e| Error::io(&run.run_dir, e))?;
    let dir = RunDir::open(&run.run_dir);
    dir.write_text("config.json", &snapshot(cfg))?;
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64).map(|i| cfg.train.seed + i).collect();
    let setup = AblationSetup {
        spec: &run.spec,
        bags: &data.bags,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        fractions: cfg.split,
        seeds,
        run_root: Some(run.run_dir.clone()),
    };
    let cells = cfg.ablation.grid.cells();
    let report = run_ablation(&setup, &cells, &mut |line| eprintln!("{line}"))?;
    dir.write_text("report.json", &(report.to_json() + "\n"))?;
    let text = report.to_text();
    dir.write_text("report.txt", &text)?;
    write!(out, "{text}").map_err(out_io)?;
    Ok(report.cells.iter().all(|c| c.failures().next().is_none()))
}

fn grid_name(g: Grid) -> &'static str {
    match g {
        Grid::Projection => "projection",
        Grid::Decoder => "decoder",
    }
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let mut config = match a.size.as_str() {
        "tiny" => tiny_config(),
        "small" => ModelConfig {
            d_model: 16,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_landmarks: 3,
            ..tiny_config()
        },
        other => return Err(Error::Config(format!("unknown size {other:?}, expected tiny or small"))),
    };
    if let Some(p) = a.projection {
        config.projection = p;
    }
    if a.no_decoder {
        config.use_decoder = false;
    }
    let started = std::time::Instant::now();
    if let Some(op) = a.inject_fault {
        writeln!(out, "injected fault: backward rule of {} scaled by 1.5", op.name()).map_err(out_io)?;
    }
    let mut ok = true;
    writeln!(out, "backward rules (worst relative error over 5 random cases)").map_err(out_io)?;
    for c in op_suite(5, a.seed, a.inject_fault)? {
        let pass = c.worst_rel_error <= TOLERANCE;
        ok &= pass;
        writeln!(
            out,
            "  {:<4} {:<14} {:.3e}",
            if pass { "ok" } else { "FAIL" },
            c.op,
            c.worst_rel_error
        )
        .map_err(out_io)?;
    }
    writeln!(
        out,
        "model d_f={} d_model={} heads={} layers={}/{} tasks={} vocab={} projection={} decoder={}",
        config.d_f,
        config.d_model,
        config.heads,
        config.encoder_layers,
        config.decoder_layers,
        config.tasks,
        config.vocab_size,
        config.projection,
        config.use_decoder
    )
    .map_err(out_io)?;
    for g in check_model(config, a.seed, a.inject_fault)? {
        ok &= g.passed();
        writeln!(
            out,
            "  {:<4} {:<22} {:>5} scalars  {:.3e}",
            if g.passed() { "ok" } else { "FAIL" },
            g.group,
            g.scalars,
            g.worst_rel_error
        )
        .map_err(out_io)?;
    }
    let failing: Vec<&str> = match a.inject_fault {
        Some(op) if !ok => vec![op.name()],
        _ => Vec::new(),
    };
    writeln!(
        out,
        "{} at tolerance {TOLERANCE:e} in {:.1}s{}",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        if failing.is_empty() {
            String::new()
        } else {
            format!(" (corrupted op: {})", failing.join(", "))
        }
    )
    .map_err(out_io)?;
    Ok(ok)
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Incompatible(_) => 3,
        _ => 1,
    }
}

/// Runs one command; `Ok(false)` means it ran but some check or cell failed.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, out).map(|_| true),
        Command::Train(a) => cmd_train(a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(a, out).map(|_| true),
        Command::Decode(a) => cmd_decode(a, out).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}
