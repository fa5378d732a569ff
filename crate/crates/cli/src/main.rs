use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use stgraph::dataset::{load_dataset, save_dataset, Dataset, TaskSchema};
use stgraph::export::{attention_records, write_records};
use stgraph::flops::{estimate_flops, SceneShape};
use stgraph::gradcheck::{gradcheck, DEFAULT_FLOOR, DEFAULT_STEP};
use stgraph::heads::{ReadoutKind, DEFAULT_LAMBDA};
use stgraph::model::{check_schema, evaluate, prepare_clips, EvalReport, Model, Split};
use stgraph::passing::{MessageFn, ModelConfig};
use stgraph::train::{init_params, load_checkpoint, save_checkpoint, train_loop, TrainOptions};
use stgraph::{synth, Model64};

#[derive(Parser, Debug)]
#[command(
    name = "stgraph",
    version,
    about = "Spatio-temporal graph models over precomputed video features"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Task {
    Action,
    Scenegraph,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MessageChoice {
    Gat,
    Nonlocal,
    Both,
}

impl MessageChoice {
    fn functions(self) -> Vec<MessageFn> {
        match self {
            MessageChoice::Gat => vec![MessageFn::Gat],
            MessageChoice::Nonlocal => vec![MessageFn::NonLocal],
            MessageChoice::Both => vec![MessageFn::NonLocal, MessageFn::Gat],
        }
    }
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    task: Option<Task>,
    #[arg(long, global = true)]
    tau_c: Option<usize>,
    #[arg(long, global = true)]
    tau_s: Option<usize>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    message_fn: Option<MessageChoice>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest and write a checkpoint plus per-epoch log.
    Train {
        /// Training manifest (overrides `train_manifest` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Manifest evaluated after training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        /// Manifest to check on; defaults to a built-in eight-node clip.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Export attention weights of one keyframe.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        keyframe: i64,
    },
    /// Multiply-add counts of the graph model for a scene shape.
    Flops {
        #[arg(long)]
        n_fg: u64,
        #[arg(long)]
        n_context: u64,
        #[arg(long, default_value_t = 1)]
        keyframes: u64,
        #[arg(long, default_value_t = synth::CHANNELS)]
        channels: usize,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long, default_value_t = 80)]
        classes: usize,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 24)]
        clips: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        objects: usize,
        #[arg(long, default_value_t = 3)]
        relations: usize,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Action,
    Temporal,
    Scenegraph,
    Tiny,
}

/// Contents of `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    task: Option<Task>,
    d: usize,
    heads: usize,
    iterations: usize,
    message_fn: MessageChoice,
    tau_c: usize,
    tau_s: usize,
    lambda: f64,
    ln_eps: f64,
    seed: u64,
    train_manifest: Option<PathBuf>,
    eval_manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, ReadoutKind::Action { classes: 1 });
        Self {
            task: None,
            d: m.d,
            heads: m.heads,
            iterations: m.iterations,
            message_fn: MessageChoice::Gat,
            tau_c: m.tau_c,
            tau_s: m.tau_s,
            lambda: DEFAULT_LAMBDA,
            ln_eps: m.ln_eps,
            seed: 0,
            train_manifest: None,
            eval_manifest: None,
            out: None,
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let mut rc: RunConfig = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let mut rc: RunConfig = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new(""));
                for path in [&mut rc.train_manifest, &mut rc.eval_manifest, &mut rc.out]
                    .into_iter()
                    .flatten()
                {
                    if path.is_relative() {
                        *path = base.join(&*path);
                    }
                }
                rc
            }
            None => RunConfig::default(),
        };
        if let Some(v) = common.seed {
            rc.seed = v;
        }
        if let Some(v) = &common.out {
            rc.out = Some(v.clone());
        }
        if let Some(v) = common.task {
            rc.task = Some(v);
        }
        if let Some(v) = common.tau_c {
            rc.tau_c = v;
        }
        if let Some(v) = common.tau_s {
            rc.tau_s = v;
        }
        if let Some(v) = common.iterations {
            rc.iterations = v;
        }
        if let Some(v) = common.heads {
            rc.heads = v;
        }
        if let Some(v) = common.message_fn {
            rc.message_fn = v;
        }
        Ok(rc)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn readout(&self, schema: &TaskSchema) -> Result<ReadoutKind> {
        let task = match schema {
            TaskSchema::Action { .. } => Task::Action,
            TaskSchema::SceneGraph { .. } => Task::Scenegraph,
        };
        if let Some(t) = self.task {
            if t != task {
                bail!("task {t:?} requested but the dataset is labeled for {task:?}");
            }
        }
        Ok(match *schema {
            TaskSchema::Action { classes } => ReadoutKind::Action { classes },
            TaskSchema::SceneGraph { objects, relations } => ReadoutKind::SceneGraph {
                objects,
                relations,
                lambda: self.lambda,
            },
        })
    }

    fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let (_, _, channels) = dataset.grid_shape().context("dataset has no grids")?;
        let mut cfg = ModelConfig::new(channels, self.readout(&dataset.schema)?);
        cfg.d = self.d;
        cfg.heads = self.heads;
        cfg.iterations = self.iterations;
        cfg.message_fns = self.message_fn.functions();
        cfg.tau_c = self.tau_c;
        cfg.tau_s = self.tau_s;
        cfg.ln_eps = self.ln_eps;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies flag overrides to a checkpoint's configuration.
fn override_config(common: &Common, mut cfg: ModelConfig) -> ModelConfig {
    if let Some(v) = common.tau_c {
        cfg.tau_c = v;
    }
    if let Some(v) = common.tau_s {
        cfg.tau_s = v;
    }
    if let Some(v) = common.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = common.heads {
        cfg.heads = v;
    }
    if let Some(v) = common.message_fn {
        cfg.message_fns = v.functions();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    cfg
}

fn read_dataset(path: Option<&PathBuf>, what: &str) -> Result<Dataset> {
    let path =
        path.with_context(|| format!("no {what} manifest given (use --data or the config file)"))?;
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model64> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    print!("{}", report.to_text());
    Ok(())
}

fn eval_dataset(model: &Model64, dataset: &Dataset) -> Result<EvalReport> {
    check_schema(&model.config, &dataset.schema)?;
    let clips = prepare_clips(&dataset.clips, &model.config, Split::Eval)?;
    Ok(evaluate(model, &clips)?)
}

fn cmd_train(
    rc: &RunConfig,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    init: Option<PathBuf>,
) -> Result<()> {
    let dataset = read_dataset(data.as_ref().or(rc.train_manifest.as_ref()), "training")?;
    let config = rc.model_config(&dataset)?;
    check_schema(&config, &dataset.schema)?;
    let mut options = rc.train.clone();
    if let Some(e) = epochs {
        options.epochs = e;
    }
    if let Some(b) = batch_size {
        options.batch_size = b;
    }
    let params = match &init {
        Some(p) => {
            let base = load_model(p)?;
            base.params.check(&config).with_context(|| {
                format!("checkpoint {} does not fit the configuration", p.display())
            })?;
            base.params
        }
        None => init_params(&config, rc.seed)?,
    };
    let mut model = Model::new(config, params)?;
    let clips = prepare_clips(&dataset.clips, &model.config, Split::Train)?;
    let out = rc.out_dir()?;
    let mut log_lines = String::new();
    let log = train_loop(&mut model, &clips, &options, |e| {
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.6}", e.epoch, e.loss, e.lr);
    })?;
    for e in &log {
        log_lines.push_str(&serde_json::to_string(e)?);
        log_lines.push('\n');
    }
    fs::write(out.join("train_log.jsonl"), log_lines)?;
    save_checkpoint(&model, &out.join("checkpoint.json"))?;
    eprintln!("wrote {}", out.join("checkpoint.json").display());
    if let Some(p) = eval_data.as_ref().or(rc.eval_manifest.as_ref()) {
        let report = eval_dataset(&model, &read_dataset(Some(p), "evaluation")?)?;
        write_report(&out, &report)?;
    }
    Ok(())
}

fn cmd_eval(
    rc: &RunConfig,
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let config = override_config(common, model.config.clone());
    let model = Model::new(config, model.params)
        .context("checkpoint does not match the requested configuration")?;
    let dataset = read_dataset(data.as_ref().or(rc.eval_manifest.as_ref()), "evaluation")?;
    let report = eval_dataset(&model, &dataset)?;
    write_report(&rc.out_dir()?, &report)
}

fn cmd_gradcheck(rc: &RunConfig, data: Option<PathBuf>, tolerance: f64, step: f64) -> Result<bool> {
    let datasets = match data.as_ref() {
        Some(p) => vec![read_dataset(Some(p), "gradcheck")?],
        None => {
            let tasks = match rc.task {
                Some(Task::Action) => vec![Task::Action],
                Some(Task::Scenegraph) => vec![Task::Scenegraph],
                None => vec![Task::Action, Task::Scenegraph],
            };
            tasks
                .into_iter()
                .map(|t| {
                    let schema = match t {
                        Task::Action => TaskSchema::Action { classes: 3 },
                        Task::Scenegraph => TaskSchema::SceneGraph {
                            objects: 4,
                            relations: 3,
                        },
                    };
                    synth::tiny_dataset(rc.seed, &schema)
                })
                .collect()
        }
    };
    let mut ok = true;
    for dataset in datasets {
        let config = rc.model_config(&dataset)?;
        let model = Model::new(config.clone(), init_params(&config, rc.seed)?)?;
        let clips = prepare_clips(&dataset.clips, &config, Split::Train)?;
        let report = gradcheck(&model, &clips, step, DEFAULT_FLOOR)?;
        println!("task={}", config.readout.task_name());
        for g in &report.groups {
            println!("{}={:.3e}", g.group, g.max_rel_err);
        }
        let pass = report.passed(tolerance);
        println!(
            "max_rel_err={:.3e} tolerance={tolerance:e} {}",
            report.max_rel_err,
            if pass { "PASS" } else { "FAIL" }
        );
        ok &= pass;
    }
    Ok(ok)
}

fn cmd_dump_attention(
    rc: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    clip_id: &str,
    keyframe: i64,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let dataset = read_dataset(data.as_ref().or(rc.eval_manifest.as_ref()), "attention")?;
    check_schema(&model.config, &dataset.schema)?;
    let record = dataset.clip(clip_id)?;
    let clip = stgraph::model::prepare_clip(record, &model.config, Split::Eval)?;
    let records = attention_records(&model, &clip, keyframe)?;
    let path = rc
        .out_dir()?
        .join(format!("attention_{clip_id}_{keyframe}.jsonl"));
    write_records(&path, &records)?;
    println!("{} records -> {}", records.len(), path.display());
    Ok(())
}

fn cmd_flops(
    rc: &RunConfig,
    shape: SceneShape,
    channels: usize,
    d: Option<usize>,
    classes: usize,
) -> Result<()> {
    let readout = match rc.task {
        Some(Task::Scenegraph) => ReadoutKind::SceneGraph {
            objects: 35,
            relations: 25,
            lambda: rc.lambda,
        },
        _ => ReadoutKind::Action { classes },
    };
    let mut cfg = ModelConfig::new(channels, readout);
    cfg.d = d.unwrap_or(rc.d);
    cfg.heads = rc.heads;
    cfg.iterations = rc.iterations;
    cfg.message_fns = rc.message_fn.functions();
    cfg.tau_c = rc.tau_c;
    cfg.tau_s = rc.tau_s;
    cfg.validate()?;
    let r = estimate_flops(&cfg, shape);
    let text = format!(
        "projection={}\nnonlocal_spatial={}\nnonlocal_temporal={}\ngat_spatial={}\ngat_temporal={}\ncombine={}\nreadout={}\ntotal={}\n",
        r.projection, r.nonlocal_spatial, r.nonlocal_temporal, r.gat_spatial, r.gat_temporal, r.combine, r.readout, r.total
    );
    print!("{text}");
    if let Some(out) = &rc.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("flops.txt"), &text)?;
        fs::write(
            out.join("flops.json"),
            serde_json::to_string_pretty(&r)? + "\n",
        )?;
    }
    Ok(())
}

fn cmd_synth(
    rc: &RunConfig,
    kind: SynthKind,
    clips: usize,
    classes: usize,
    objects: usize,
    relations: usize,
) -> Result<()> {
    if clips == 0 {
        bail!("--clips must be at least 1");
    }
    let ds = match kind {
        SynthKind::Action => {
            if !(1..=5).contains(&classes) {
                bail!("--classes must be in 1..=5 for the action generator");
            }
            synth::action_dataset(rc.seed, clips, classes)
        }
        SynthKind::Temporal => synth::temporal_dataset(rc.seed, clips, rc.tau_s),
        SynthKind::Scenegraph => {
            if !(1..=5).contains(&objects) || relations == 0 {
                bail!("--objects must be in 1..=5 and --relations at least 1");
            }
            synth::scene_graph_dataset(rc.seed, clips, objects, relations)
        }
        SynthKind::Tiny => {
            let schema = match rc.task {
                Some(Task::Scenegraph) => TaskSchema::SceneGraph { objects, relations },
                _ => TaskSchema::Action { classes },
            };
            synth::tiny_dataset(rc.seed, &schema)
        }
    };
    let path = rc.out_dir()?.join("manifest.jsonl");
    save_dataset(&ds, &path)?;
    println!("{} clips -> {}", ds.clips.len(), path.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STGRAPH_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).with_context(|| {
                format!("STGRAPH_THREADS must be a positive integer, got `{v}`")
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    let rc = RunConfig::load(&cli.common)?;
    match cli.command {
        Command::Train {
            data,
            eval_data,
            epochs,
            batch_size,
            init,
        } => cmd_train(&rc, data, eval_data, epochs, batch_size, init)?,
        Command::Eval { checkpoint, data } => cmd_eval(&rc, &cli.common, &checkpoint, data)?,
        Command::Gradcheck {
            data,
            tolerance,
            step,
        } => return cmd_gradcheck(&rc, data, tolerance, step),
        Command::DumpAttention {
            checkpoint,
            data,
            clip,
            keyframe,
        } => cmd_dump_attention(&rc, &checkpoint, data, &clip, keyframe)?,
        Command::Flops {
            n_fg,
            n_context,
            keyframes,
            channels,
            d,
            classes,
        } => cmd_flops(
            &rc,
            SceneShape {
                n_fg,
                n_context,
                keyframes,
            },
            channels,
            d,
            classes,
        )?,
        Command::Synth {
            kind,
            clips,
            classes,
            objects,
            relations,
        } => cmd_synth(&rc, kind, clips, classes, objects, relations)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
