use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpsguard::artifacts::ArtifactWriter;
use dpsguard::core::datagen::{
    build_dataset, examples, fit_scaling, shard_for_gossip, Position, SampleRow, ShardPolicy, Task,
};
use dpsguard::core::eval::{collect_scores, evaluate_detector, Detector, NnDetector, SdDetector, TdDetector};
use dpsguard::core::features::FeatureKind;
use dpsguard::core::neural::{detector_layout, init, train_from};
use dpsguard::core::rng::{derive_rng, derive_seed};
use dpsguard::experiments::{
    base_scenario, gossip_models, manhattan, run_family, simulate, training_seeds, with_positions,
};
use dpsguard::formats::{
    cell, decode_model, encode_model, features_csv, loss_csv, parse_rows_jsonl, read_artifact, roc_csv,
    rows_jsonl, table_csv, telemetry_csv, verdict_csv, ModelMeta, VerdictRecord,
};
use dpsguard::spec::{ExperimentSpec, Family};
use dpsguard::{CliError, Result};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dpsguard", version, about = "Insider attack detection for gossip-based distributed optimization")]
struct Cli {
    /// Output root; subcommands write below it.
    #[arg(long, global = true, env = "DPSGUARD_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Experiment document (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the full sample budgets.
    #[arg(long)]
    scale: Option<f64>,
    /// Full sample budgets (same as `--scale 1`).
    #[arg(long, conflicts_with = "scale")]
    full: bool,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Nd,
    Nl,
}

impl TaskArg {
    fn task(self) -> Task {
        match self {
            TaskArg::Nd => Task::Nd,
            TaskArg::Nl => Task::Nl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NetArg {
    Tdnn,
    Sdnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorArg {
    Td,
    Sd,
    Tdnn,
    Sdnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaseArg {
    /// One agent holds a small share of the data.
    Starved,
    /// Agents hold attack rows of a single position each.
    Position,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Protocol runs with and without an attacker: traces and convergence report.
    Simulate(Common),
    /// Labeled detection and localization datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Trains a detector network on generated data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nd")]
        task: TaskArg,
        #[arg(long, value_enum)]
        detector: NetArg,
        /// Dataset directory (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue training a saved model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Gossip training across the agents of the Manhattan network.
    TrainGossip {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "starved")]
        case: CaseArg,
        /// Train each agent on its own shard only.
        #[arg(long)]
        isolated: bool,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// ROC curves and AUC of detectors on a shared test set.
    EvalRoc {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "nd")]
        task: TaskArg,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "td,sd")]
        detectors: Vec<DetectorArg>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory (defaults to `<out>/models`).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Runs a whole experiment family.
    Experiment {
        #[arg(value_enum)]
        family: Family,
        #[command(flatten)]
        common: Common,
    },
}

fn load_spec(common: &Common, family: Family) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::for_family(family),
    };
    spec.family = family;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(s) = common.scale {
        spec.scale = s;
    }
    if common.full {
        spec.scale = 1.0;
    }
    if let Some(r) = common.repetitions {
        spec.repetitions = r;
    }
    spec.validate()?;
    Ok(spec)
}

fn out_root(cli_out: &Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_rows(dir: &Path, task: Task, split: &str) -> Result<Vec<SampleRow>> {
    let path = dir.join(task.as_str()).join(format!("{split}.rows.jsonl"));
    let bytes = read_artifact(&path, "gen-data")?;
    parse_rows_jsonl(&bytes, &path)
}

fn require_instances(rows: &[SampleRow], k: usize, field: &str) -> Result<()> {
    match rows.iter().map(|r| r.instances()).min() {
        Some(have) if have >= k => Ok(()),
        Some(have) => Err(CliError::config(
            field,
            format!("needs {k} instances per sample but the data holds {have}"),
        )),
        None => Err(CliError::config("data", "dataset is empty")),
    }
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    scenario: &'a dpsguard::core::datagen::Scenario,
    budget: dpsguard::core::datagen::Budget,
    config_digest: String,
    tasks: Vec<TaskManifest>,
}

#[derive(Serialize)]
struct TaskManifest {
    task: Task,
    seed: u64,
    train_rows: usize,
    test_rows: usize,
    positions: Vec<(Position, usize)>,
    /// Uniform shard of every training row over the agents.
    shards: Vec<Vec<usize>>,
}

fn gen_data(spec: &ExperimentSpec, root: &Path, only: Option<Task>) -> Result<()> {
    let mut out = ArtifactWriter::new(root.join("data"))?;
    let base = base_scenario(manhattan(spec)?, spec.protocol.config())?;
    let budget = spec.budget()?;
    let (nd_seed, nl_seed) = training_seeds(derive_seed(spec.seed, 0));
    let mut tasks = Vec::new();
    for (task, seed) in [(Task::Nd, nd_seed), (Task::Nl, nl_seed)] {
        if only.is_some_and(|t| t != task) {
            continue;
        }
        let ds = build_dataset(&base, &budget, task, seed)?;
        for (split, set) in [("train", &ds.train), ("test", &ds.test)] {
            let dir = format!("{}/{split}", task.as_str());
            out.write(&format!("{dir}.rows.jsonl"), &rows_jsonl(&set.rows))?;
            for kind in [FeatureKind::Temporal, FeatureKind::Spatial] {
                out.write(
                    &format!("{dir}.{}.csv", kind.as_str()),
                    &features_csv(&set.rows, kind, spec.protocol.instances, spec.detectors.slots)?,
                )?;
            }
        }
        let shards = shard_for_gossip(
            &ds.train.rows,
            &ShardPolicy::Uniform { agents: base.graph.n() },
            &mut derive_rng(seed, 9),
        )?;
        tasks.push(TaskManifest {
            task,
            seed,
            train_rows: ds.train.len(),
            test_rows: ds.test.len(),
            positions: [Position::None, Position::NextTo, Position::FarFrom]
                .into_iter()
                .map(|p| (p, ds.train.count_position(p)))
                .collect(),
            shards,
        });
        eprintln!("{}: {} train rows, {} test rows", task.as_str(), ds.train.len(), ds.test.len());
    }
    out.write_json(
        "dataset.json",
        &DatasetManifest {
            scenario: &base,
            budget,
            config_digest: spec.digest(),
            tasks,
        },
    )?;
    out.finish("gen-data", &spec.digest())?;
    Ok(())
}

fn net_kind(net: NetArg) -> (FeatureKind, &'static str) {
    match net {
        NetArg::Tdnn => (FeatureKind::Temporal, "tdnn"),
        NetArg::Sdnn => (FeatureKind::Spatial, "sdnn"),
    }
}

fn train_cmd(
    spec: &ExperimentSpec,
    root: &Path,
    task: Task,
    net: NetArg,
    data: &Path,
    epochs: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let rows = load_rows(data, task, "train")?;
    let (kind, name) = net_kind(net);
    let slots = spec.detectors.slots;
    let (mut model, meta) = match resume {
        Some(path) => {
            let bytes = read_artifact(path, "train")?;
            let (model, meta) = decode_model(&bytes, path)?;
            let meta = meta.ok_or_else(|| CliError::format(path, "model carries no training metadata"))?;
            if meta.task != task || meta.kind != kind {
                return Err(CliError::config(
                    "--resume",
                    format!("model was trained for {} / {}", meta.task.as_str(), meta.kind.as_str()),
                ));
            }
            (model, meta)
        }
        None => {
            let instances = match net {
                NetArg::Tdnn => spec.detectors.tdnn_instances,
                NetArg::Sdnn => spec.detectors.sdnn_instances,
            };
            let seed = derive_seed(spec.seed, 0x7261_696e);
            let outputs = if task == Task::Nd { 1 } else { slots };
            let model = init(&detector_layout(slots, outputs), derive_seed(seed, 0))?;
            require_instances(&rows, instances, "detectors")?;
            let scaling = if spec.detectors.standardize {
                fit_scaling(&rows, kind, instances)?
            } else {
                Default::default()
            };
            let meta = ModelMeta {
                task,
                kind,
                instances,
                scaling,
                epochs_completed: 0,
                train: spec.training.config(derive_seed(seed, 1)),
            };
            (model, meta)
        }
    };
    require_instances(&rows, meta.instances, "detectors")?;
    let mut config = meta.train;
    config.epochs = epochs.unwrap_or(spec.training.epochs);
    if config.epochs < meta.epochs_completed {
        return Err(CliError::config("--epochs", "fewer epochs than the model already completed"));
    }
    let data = examples(&rows, task, kind, meta.instances, model.inputs(), &meta.scaling)?;
    let losses = train_from(&mut model, &data, &config, meta.epochs_completed)?;
    let meta = ModelMeta {
        epochs_completed: config.epochs,
        train: config,
        ..meta
    };
    let mut out = ArtifactWriter::new(root.join("models").join(format!("{name}_{}", task.as_str())))?;
    let first = config.epochs - losses.len();
    out.write("model.bin", &encode_model(&model, Some(&meta)))?;
    out.write(&format!("loss_from_epoch{first}.csv"), &loss_csv(&losses, first))?;
    out.finish("train", &spec.digest())?;
    if let Some(l) = losses.last() {
        eprintln!("{name} {}: {} epochs, final loss {l:.5}", task.as_str(), config.epochs);
    }
    Ok(())
}

fn train_gossip_cmd(spec: &ExperimentSpec, root: &Path, case: CaseArg, isolated: bool, data: &Path) -> Result<()> {
    let rows = load_rows(data, Task::Nd, "train")?;
    require_instances(&rows, spec.gossip.instances, "gossip.instances")?;
    let graph = manhattan(spec)?;
    let n = graph.n();
    let seed = derive_seed(spec.seed, 0x676f_7373);
    let (rows, policy, tag) = match case {
        CaseArg::Starved => (
            with_positions(&rows, &[Position::None, Position::NextTo]),
            ShardPolicy::Starved {
                agents: n,
                starved: spec.gossip.starved_agent,
                fraction: spec.gossip.starved_fraction,
            },
            "starved",
        ),
        CaseArg::Position => (
            rows,
            ShardPolicy::PositionHomogeneous {
                positions: (0..n)
                    .map(|a| if a % 2 == 0 { Position::NextTo } else { Position::FarFrom })
                    .collect(),
            },
            "position",
        ),
    };
    let shards = shard_for_gossip(&rows, &policy, &mut derive_rng(seed, 0))?;
    let graph_ref = (!isolated).then_some(&graph);
    let (models, metrics) = gossip_models(spec, &rows, &shards, Task::Nd, graph_ref, derive_seed(seed, 1))?;
    let mode = if isolated { "isolated" } else { "collaborative" };
    let mut out = ArtifactWriter::new(root.join("gossip").join(format!("{tag}_{mode}")))?;
    out.write("telemetry.csv", &telemetry_csv(&metrics))?;
    out.write_json("shards.json", &shards)?;
    for (agent, model) in models.iter().enumerate() {
        let meta = ModelMeta {
            task: Task::Nd,
            kind: spec.gossip.kind,
            instances: spec.gossip.instances,
            scaling: Default::default(),
            epochs_completed: 0,
            train: spec.training.config(0),
        };
        out.write(&format!("models/agent{agent}.bin"), &encode_model(model, Some(&meta)))?;
    }
    out.finish("train-gossip", &spec.digest())?;
    if let Some(m) = metrics.last() {
        eprintln!("{tag} {mode}: {} rounds, dispersion {:.3e}", m.round + 1, m.dispersion);
    }
    Ok(())
}

#[derive(Serialize)]
struct RocSummary {
    detector: String,
    task: Task,
    instances: usize,
    auc: f64,
    n_pos: usize,
    n_neg: usize,
    config_digest: String,
}

fn load_net(models: &Path, net: NetArg, task: Task) -> Result<NnDetector> {
    let (kind, name) = net_kind(net);
    let path = models.join(format!("{name}_{}", task.as_str())).join("model.bin");
    let bytes = read_artifact(&path, "train")?;
    let (model, meta) = decode_model(&bytes, &path)?;
    let meta = meta.ok_or_else(|| CliError::format(&path, "model carries no training metadata"))?;
    if meta.kind != kind || meta.task != task {
        return Err(CliError::format(&path, "model was trained for another detector or task"));
    }
    Ok(NnDetector {
        name,
        model,
        kind,
        instances: meta.instances,
        scaling: meta.scaling,
    })
}

fn verdicts<D: Detector + ?Sized>(det: &D, rows: &[SampleRow], task: Task, instances: usize) -> Result<Vec<VerdictRecord>> {
    let (scores, labels) = collect_scores(det, rows, task)?;
    let orientation = match task {
        Task::Nd => det.nd_orientation(),
        Task::Nl => det.nl_orientation(),
    };
    let units = rows.iter().enumerate().flat_map(|(r, row)| match task {
        Task::Nd => vec![(r, row.monitor, None)],
        Task::Nl if row.is_h1() => row.neighbors.iter().map(|&j| (r, row.monitor, Some(j))).collect(),
        Task::Nl => Vec::new(),
    });
    Ok(units
        .zip(scores.into_iter().zip(labels))
        .map(|((row, agent, neighbor), (score, label))| VerdictRecord {
            row,
            agent,
            neighbor,
            method: format!("{}_K{instances}", det.name()),
            score,
            orientation: orientation.as_str(),
            label,
        })
        .collect())
}

fn eval_roc_cmd(
    spec: &ExperimentSpec,
    root: &Path,
    task: Task,
    detectors: &[DetectorArg],
    data: &Path,
    models: &Path,
) -> Result<()> {
    let rows = load_rows(data, task, "test")?;
    let mut out = ArtifactWriter::new(root.join("roc").join(task.as_str()))?;
    let mut table = Vec::new();
    for &which in detectors {
        let (det, instances): (Box<dyn Detector>, usize) = match which {
            DetectorArg::Td => {
                let k = spec.detectors.tdnn_instances;
                (Box::new(TdDetector { instances: k }), k)
            }
            DetectorArg::Sd => {
                let k = spec.detectors.sdnn_instances;
                (Box::new(SdDetector { instances: k }), k)
            }
            DetectorArg::Tdnn | DetectorArg::Sdnn => {
                let net = if which == DetectorArg::Tdnn { NetArg::Tdnn } else { NetArg::Sdnn };
                let det = load_net(models, net, task)?;
                let k = det.instances;
                (Box::new(det), k)
            }
        };
        require_instances(&rows, instances, "detectors")?;
        let (curve, summary) = evaluate_detector(det.as_ref(), &rows, task)?;
        let name = det.name().to_string();
        out.write(&format!("{name}.csv"), &roc_csv(&curve))?;
        out.write(&format!("scores/{name}.csv"), &verdict_csv(&verdicts(det.as_ref(), &rows, task, instances)?))?;
        out.write_json(
            &format!("{name}.json"),
            &RocSummary {
                detector: name.clone(),
                task,
                instances,
                auc: summary.auc,
                n_pos: summary.n_pos,
                n_neg: summary.n_neg,
                config_digest: spec.digest(),
            },
        )?;
        eprintln!("{name} {} K={instances}: AUC {:.4}", task.as_str(), summary.auc);
        table.push(vec![
            name,
            task.as_str().to_string(),
            instances.to_string(),
            cell(summary.auc),
            summary.n_pos.to_string(),
            summary.n_neg.to_string(),
        ]);
    }
    out.write("auc.csv", &table_csv(&["detector", "task", "K", "auc", "n_pos", "n_neg"], table))?;
    out.finish("eval-roc", &spec.digest())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(common) => {
            let spec = load_spec(common, Family::Converge)?;
            let root = out_root(&cli.out, &spec);
            let mut out = ArtifactWriter::new(root.join("simulate"))?;
            let report = simulate(&spec, &mut out)?;
            out.finish("simulate", &spec.digest())?;
            for c in &report.convergence {
                eprintln!(
                    "rep {} attacked={}: gap {:.3e}, disagreement {:.3e}{}",
                    c.repetition,
                    c.attacked,
                    c.objective_gap,
                    c.disagreement,
                    c.distance_to_target
                        .map(|v| format!(", distance to target {v:.3e}"))
                        .unwrap_or_default()
                );
            }
        }
        Command::GenData { common, task } => {
            let spec = load_spec(common, Family::OneAttacker)?;
            let root = out_root(&cli.out, &spec);
            gen_data(&spec, &root, task.map(TaskArg::task))?;
        }
        Command::Train {
            common,
            task,
            detector,
            data,
            epochs,
            resume,
        } => {
            let spec = load_spec(common, Family::OneAttacker)?;
            let root = out_root(&cli.out, &spec);
            let data = data.clone().unwrap_or_else(|| root.join("data"));
            train_cmd(&spec, &root, task.task(), *detector, &data, *epochs, resume.as_deref())?;
        }
        Command::TrainGossip {
            common,
            case,
            isolated,
            rounds,
            data,
        } => {
            let mut spec = load_spec(common, Family::GossipLearning)?;
            if let Some(r) = rounds {
                spec.gossip.rounds = *r;
                spec.validate()?;
            }
            let root = out_root(&cli.out, &spec);
            let data = data.clone().unwrap_or_else(|| root.join("data"));
            train_gossip_cmd(&spec, &root, *case, *isolated, &data)?;
        }
        Command::EvalRoc {
            common,
            task,
            detectors,
            data,
            models,
        } => {
            let spec = load_spec(common, Family::OneAttacker)?;
            let root = out_root(&cli.out, &spec);
            let data = data.clone().unwrap_or_else(|| root.join("data"));
            let models = models.clone().unwrap_or_else(|| root.join("models"));
            eval_roc_cmd(&spec, &root, task.task(), detectors, &data, &models)?;
        }
        Command::Experiment { family, common } => {
            let spec = load_spec(common, *family)?;
            let root = out_root(&cli.out, &spec);
            let mut out = ArtifactWriter::new(root.join("experiments").join(family.as_str()))?;
            let report = run_family(&spec, &mut out)?;
            out.finish(&format!("experiment {family}"), &spec.digest())?;
            eprintln!(
                "{family}: {} AUC records, {} convergence records",
                report.aucs.len(),
                report.convergence.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
