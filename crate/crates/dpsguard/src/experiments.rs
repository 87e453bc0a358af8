//! Experiment families. Each family runs `spec.repetitions` independent
//! repetitions, writes its ROC curves and tables, and returns the AUC and
//! convergence records it produced.

use std::collections::BTreeMap;

use dpsguard_core::datagen::{
    build_event_rows, build_split, examples, fit_scaling, generate_rows, shard_for_gossip,
    task_events, InitialLaw, Placement, Position, SampleRow, Scenario, ShardPolicy, Split, Task,
};
use dpsguard_core::eval::{collect_scores, evaluate_detector, Detector, NnDetector, SdDetector, TdDetector};
use dpsguard_core::features::{FeatureKind, InputScaling};
use dpsguard_core::gossip_train::{run_gossip_training, LearnerState, RoundMetrics};
use dpsguard_core::neural::{detector_layout, init, train, Mlp};
use dpsguard_core::protocol::{
    convergence_report_at, generate_problem, run_instance, AttackConfig, ProtocolConfig, ATTACK_TARGET_LAW,
};
use dpsguard_core::rng::{derive_path, derive_rng, derive_seed};
use dpsguard_core::topology::{manhattan_grid, second_largest_eigenvalue, small_world};
use dpsguard_core::{AttackerMask, Graph};
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactWriter;
use crate::error::{CliError, Result};
use crate::formats::{cell, encode_trace, roc_csv, table_csv, telemetry_csv, trace_csv, GraphDocument, TraceSidecar};
use crate::spec::{ExperimentSpec, Family};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRecord {
    pub repetition: usize,
    pub setting: String,
    pub detector: String,
    pub task: Task,
    pub instances: usize,
    pub d: usize,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub repetition: usize,
    pub attacked: bool,
    pub objective_gap: f64,
    pub disagreement: f64,
    pub distance_to_target: Option<f64>,
}

/// Selects AUC records.
#[derive(Debug, Clone, Copy, Default)]
pub struct Query<'a> {
    pub setting: Option<&'a str>,
    pub detector: Option<&'a str>,
    pub task: Option<Task>,
    pub instances: Option<usize>,
    pub d: Option<usize>,
}

impl Query<'_> {
    fn matches(&self, r: &AucRecord) -> bool {
        self.setting.map_or(true, |s| s == r.setting)
            && self.detector.map_or(true, |s| s == r.detector)
            && self.task.map_or(true, |t| t == r.task)
            && self.instances.map_or(true, |k| k == r.instances)
            && self.d.map_or(true, |d| d == r.d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub aucs: Vec<AucRecord>,
    pub convergence: Vec<ConvergenceRecord>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

impl FamilyReport {
    /// AUC per repetition of the records matching `q`.
    pub fn aucs(&self, q: Query<'_>) -> Vec<f64> {
        self.aucs.iter().filter(|r| q.matches(r)).map(|r| r.auc).collect()
    }

    pub fn median_auc(&self, q: Query<'_>) -> Option<f64> {
        median(&mut self.aucs(q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MedianRow {
    setting: String,
    detector: String,
    task: Task,
    instances: usize,
    d: usize,
    median_auc: f64,
    repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Summary {
    family: Family,
    config_digest: String,
    spec: ExperimentSpec,
    medians: Vec<MedianRow>,
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    out: &'a mut ArtifactWriter,
    report: FamilyReport,
    rep: usize,
}

struct Eval<'a> {
    setting: &'a str,
    instances: usize,
    d: usize,
}

impl Ctx<'_> {
    fn rep_seed(&self) -> u64 {
        derive_seed(self.spec.seed, self.rep as u64)
    }

    /// Evaluates one detector and records its AUC. Skipped (returns `None`)
    /// when the rows hold only one class for the task.
    fn evaluate<D: Detector + ?Sized>(&mut self, e: &Eval<'_>, det: &D, rows: &[SampleRow], task: Task) -> Result<Option<f64>> {
        let (_, labels) = collect_scores(det, rows, task)?;
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            return Ok(None);
        }
        let (curve, summary) = evaluate_detector(det, rows, task)?;
        let name = format!(
            "roc/rep{}/{}/{}_K{}_d{}_{}.csv",
            self.rep,
            e.setting,
            det.name(),
            e.instances,
            e.d,
            task.as_str()
        );
        self.out.write(&name, &roc_csv(&curve))?;
        self.report.aucs.push(AucRecord {
            repetition: self.rep,
            setting: e.setting.to_string(),
            detector: det.name().to_string(),
            task,
            instances: e.instances,
            d: e.d,
            auc: summary.auc,
            n_pos: summary.n_pos,
            n_neg: summary.n_neg,
        });
        Ok(Some(summary.auc))
    }
}

pub fn manhattan(spec: &ExperimentSpec) -> Result<Graph> {
    Ok(manhattan_grid(spec.protocol.grid_rows, spec.protocol.grid_cols)?)
}

fn attack_free() -> Placement {
    Placement::Random {
        attackers: 0,
        position: Position::None,
    }
}

pub fn base_scenario(graph: Graph, protocol: ProtocolConfig) -> Result<Scenario> {
    Ok(Scenario::new(graph, attack_free(), protocol)?)
}

fn protocol_with(spec: &ExperimentSpec, d: usize, instances: usize) -> ProtocolConfig {
    ProtocolConfig {
        d,
        instances,
        ..spec.protocol.config()
    }
}

/// Trains a detector network on `rows`.
pub fn train_detector(
    spec: &ExperimentSpec,
    name: &'static str,
    rows: &[SampleRow],
    task: Task,
    kind: FeatureKind,
    instances: usize,
    seed: u64,
) -> Result<(NnDetector, Vec<f64>)> {
    let slots = spec.detectors.slots;
    let scaling = if spec.detectors.standardize {
        fit_scaling(rows, kind, instances)?
    } else {
        InputScaling::IDENTITY
    };
    let data = examples(rows, task, kind, instances, slots, &scaling)?;
    let outputs = match task {
        Task::Nd => 1,
        Task::Nl => slots,
    };
    let mut model = init(&detector_layout(slots, outputs), derive_seed(seed, 0))?;
    let losses = train(&mut model, &data, &spec.training.config(derive_seed(seed, 1)))?;
    Ok((
        NnDetector {
            name,
            model,
            kind,
            instances,
            scaling,
        },
        losses,
    ))
}

/// Networks trained on the one-attacker Manhattan training split.
pub struct References {
    pub tdnn_nd: NnDetector,
    pub tdnn_nl: NnDetector,
    pub sdnn_nd: NnDetector,
    pub sdnn_nl: NnDetector,
}

/// Detection and localization dataset seeds of a repetition.
pub fn training_seeds(rep_seed: u64) -> (u64, u64) {
    (derive_seed(rep_seed, 1), derive_seed(rep_seed, 2))
}

pub fn train_references(spec: &ExperimentSpec, nd_train: &[SampleRow], nl_train: &[SampleRow], rep_seed: u64) -> Result<References> {
    let det = &spec.detectors;
    let s = |k: u64| derive_path(rep_seed, &[20, k]);
    Ok(References {
        tdnn_nd: train_detector(spec, "tdnn", nd_train, Task::Nd, FeatureKind::Temporal, det.tdnn_instances, s(0))?.0,
        tdnn_nl: train_detector(spec, "tdnn", nl_train, Task::Nl, FeatureKind::Temporal, det.tdnn_instances, s(1))?.0,
        sdnn_nd: train_detector(spec, "sdnn", nd_train, Task::Nd, FeatureKind::Spatial, det.sdnn_instances, s(2))?.0,
        sdnn_nl: train_detector(spec, "sdnn", nl_train, Task::Nl, FeatureKind::Spatial, det.sdnn_instances, s(3))?.0,
    })
}

fn reference_training(spec: &ExperimentSpec, rep_seed: u64) -> Result<(Scenario, References)> {
    let base = base_scenario(manhattan(spec)?, spec.protocol.config())?;
    let budget = spec.budget()?;
    let (nd_seed, nl_seed) = training_seeds(rep_seed);
    let nd = build_split(&base, &budget, Task::Nd, nd_seed, Split::Train)?;
    let nl = build_split(&base, &budget, Task::Nl, nl_seed, Split::Train)?;
    let refs = train_references(spec, &nd.rows, &nl.rows, rep_seed)?;
    Ok((base, refs))
}

/// TD and TDNN, SD and SDNN on the same detection rows and localization rows.
fn evaluate_suite(ctx: &mut Ctx<'_>, setting: &str, refs: &References, nd: &[SampleRow], nl: &[SampleRow]) -> Result<()> {
    let det = &ctx.spec.detectors;
    let (kt, ks) = (det.tdnn_instances, det.sdnn_instances);
    let d = nd.first().or(nl.first()).map_or(0, |r| r.d);
    let et = Eval { setting, instances: kt, d };
    let es = Eval { setting, instances: ks, d };
    for (rows, task, td_nn, sd_nn) in [
        (nd, Task::Nd, &refs.tdnn_nd, &refs.sdnn_nd),
        (nl, Task::Nl, &refs.tdnn_nl, &refs.sdnn_nl),
    ] {
        if rows.is_empty() {
            continue;
        }
        ctx.evaluate(&et, &TdDetector { instances: kt }, rows, task)?;
        ctx.evaluate(&et, td_nn, rows, task)?;
        ctx.evaluate(&es, &SdDetector { instances: ks }, rows, task)?;
        ctx.evaluate(&es, sd_nn, rows, task)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- families

fn run_converge(ctx: &mut Ctx<'_>, all_traces: bool) -> Result<()> {
    let spec = ctx.spec;
    let graph = manhattan(spec)?;
    let (n, d) = (graph.n(), spec.protocol.d);
    let config = spec.protocol.config();
    let rep_seed = ctx.rep_seed();
    if ctx.rep == 0 {
        ctx.out.write_json("graph.json", &GraphDocument::from_graph(&graph, None))?;
    }
    let mut rng = derive_rng(rep_seed, 0);
    let problem = generate_problem(n, d, &mut rng)?;
    let initial = InitialLaw::S0.bounds().sample(n * d, &mut rng);
    let attack = AttackConfig::new(ATTACK_TARGET_LAW.sample(d, &mut rng), second_largest_eigenvalue(&graph))?;
    let stride = spec.converge.trajectory_stride;
    let mut trajectory = Vec::new();
    for attacked in [false, true] {
        let mask = if attacked {
            AttackerMask::from_ids(n, &[spec.converge.attacker])?
        } else {
            AttackerMask::none(n)
        };
        let att = attacked.then_some(&attack);
        let trace = run_instance(&graph, &mask, &problem, &initial, &config, att, &mut derive_rng(rep_seed, 1 + attacked as u64))?;
        let last = trace.iterations();
        let mut ts: Vec<usize> = (0..=last).step_by(stride).collect();
        if ts.last() != Some(&last) {
            ts.push(last);
        }
        for &t in &ts {
            let r = convergence_report_at(&trace, t, &mask, &problem, att)?;
            trajectory.push(vec![
                ctx.rep.to_string(),
                attacked.to_string(),
                t.to_string(),
                cell(r.objective_gap),
                cell(r.disagreement),
                r.distance_to_target.map(cell).unwrap_or_default(),
            ]);
        }
        let r = convergence_report_at(&trace, last, &mask, &problem, att)?;
        ctx.report.convergence.push(ConvergenceRecord {
            repetition: ctx.rep,
            attacked,
            objective_gap: r.objective_gap,
            disagreement: r.disagreement,
            distance_to_target: r.distance_to_target,
        });
        if all_traces || ctx.rep == 0 {
            let stem = format!("traces/rep{}_{}", ctx.rep, if attacked { "attacked" } else { "clean" });
            ctx.out.write(&format!("{stem}.bin"), &encode_trace(&trace))?;
            ctx.out.write(&format!("{stem}.csv"), &trace_csv(&trace))?;
            ctx.out.write_json(
                &format!("{stem}.json"),
                &TraceSidecar {
                    n,
                    d,
                    iterations: last,
                    instance: trace.instance,
                    seed: rep_seed,
                    protocol: config,
                    attackers: mask.attackers(),
                    target: att.map(|a| a.target.clone()),
                    noise_decay: att.map(|a| a.noise_decay),
                },
            )?;
        }
    }
    ctx.out.write(
        &format!("trajectory/rep{}.csv", ctx.rep),
        &table_csv(
            &["repetition", "attacked", "t", "objective_gap", "disagreement", "distance_to_target"],
            trajectory,
        ),
    )?;
    Ok(())
}

fn run_one_attacker(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let budget = spec.budget()?;
    let (nd_seed, nl_seed) = training_seeds(rep_seed);
    let graph = manhattan(spec)?;
    let mut dims = vec![spec.protocol.d];
    dims.extend(spec.detectors.td_extra_dims.iter().filter(|&&d| d != spec.protocol.d));
    for (index, &d) in dims.iter().enumerate() {
        let base = base_scenario(graph.clone(), protocol_with(spec, d, spec.protocol.instances))?;
        let nd_test = build_split(&base, &budget, Task::Nd, nd_seed, Split::Test)?.rows;
        let nl_test = build_split(&base, &budget, Task::Nl, nl_seed, Split::Test)?.rows;
        for &k in &spec.detectors.score_instances {
            let e = Eval { setting: "manhattan", instances: k, d };
            for (rows, task) in [(&nd_test, Task::Nd), (&nl_test, Task::Nl)] {
                ctx.evaluate(&e, &TdDetector { instances: k }, rows, task)?;
                if index == 0 {
                    ctx.evaluate(&e, &SdDetector { instances: k }, rows, task)?;
                }
            }
        }
        if index == 0 {
            let nd_train = build_split(&base, &budget, Task::Nd, nd_seed, Split::Train)?.rows;
            let nl_train = build_split(&base, &budget, Task::Nl, nl_seed, Split::Train)?.rows;
            let refs = train_references(spec, &nd_train, &nl_train, rep_seed)?;
            let det = &spec.detectors;
            let et = Eval { setting: "manhattan", instances: det.tdnn_instances, d };
            let es = Eval { setting: "manhattan", instances: det.sdnn_instances, d };
            ctx.evaluate(&et, &refs.tdnn_nd, &nd_test, Task::Nd)?;
            ctx.evaluate(&et, &refs.tdnn_nl, &nl_test, Task::Nl)?;
            ctx.evaluate(&es, &refs.sdnn_nd, &nd_test, Task::Nd)?;
            ctx.evaluate(&es, &refs.sdnn_nl, &nl_test, Task::Nl)?;
        }
    }
    Ok(())
}

/// Detection rows (attack-free, then attacked) and localization rows
/// (attacked) for a fixed monitor.
fn fixed_monitor_rows(
    base: &Scenario,
    attackers: &[usize],
    monitor: usize,
    count: usize,
    seeds: (u64, u64),
) -> Result<(Vec<SampleRow>, Vec<SampleRow>)> {
    let clean = base.with_placement(Placement::Fixed {
        attackers: Vec::new(),
        monitor,
    })?;
    let attacked = base.with_placement(Placement::Fixed {
        attackers: attackers.to_vec(),
        monitor,
    })?;
    let mut nd = generate_rows(&clean, Task::Nd, count, seeds.0, 1)?;
    let h1 = generate_rows(&attacked, Task::Nd, count, seeds.1, 1)?;
    nd.extend(h1.iter().cloned());
    Ok((nd, h1))
}

fn run_multi_attacker(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let (base, refs) = reference_training(spec, rep_seed)?;
    let count = spec.budget()?.nd_test_per_event;
    let graph = base.graph.clone();
    for &m in &spec.multi_attacker.counts {
        let attackers: Vec<usize> = (0..m).collect();
        let mask = AttackerMask::from_ids(graph.n(), &attackers)?;
        let mut monitors: BTreeMap<usize, usize> = BTreeMap::new();
        for i in (0..graph.n()).filter(|&i| !mask.is_attacker(i)) {
            monitors.entry(mask.attacking_neighbors(&graph, i)).or_insert(i);
        }
        for (&c, &monitor) in &monitors {
            let setting = format!("m{m}_c{c}");
            let seeds = (derive_path(rep_seed, &[30, monitor as u64]), derive_path(rep_seed, &[31, m as u64, c as u64]));
            let (nd, h1) = fixed_monitor_rows(&base, &attackers, monitor, count, seeds)?;
            let nl = if c > 0 { h1 } else { Vec::new() };
            evaluate_suite(ctx, &setting, &refs, &nd, &nl)?;
        }
    }
    Ok(())
}

fn run_degree_tailor(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let (base, refs) = reference_training(spec, rep_seed)?;
    let count = spec.budget()?.nd_test_per_event;
    let dt = &spec.degree_tailor;
    let mut graph = base.graph.clone();
    for p in 0..=dt.cuts.len() {
        if p > 0 {
            graph = graph.remove_edge(dt.monitor, dt.cuts[p - 1])?;
        }
        if ctx.rep == 0 {
            ctx.out.write_json(&format!("graphs/p{p}.json"), &GraphDocument::from_graph(&graph, None))?;
        }
        let scenario = Scenario::new(graph.clone(), attack_free(), base.protocol)?;
        let seeds = (derive_path(rep_seed, &[40]), derive_path(rep_seed, &[41]));
        let (nd, nl) = fixed_monitor_rows(&scenario, &[dt.attacker], dt.monitor, count, seeds)?;
        evaluate_suite(ctx, &format!("p{p}"), &refs, &nd, &nl)?;
    }
    Ok(())
}

fn run_mismatch(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let (base, refs) = reference_training(spec, rep_seed)?;
    let budget = spec.budget()?;
    let (nd_seed, nl_seed) = training_seeds(rep_seed);
    for law in InitialLaw::ALL {
        let scenario = base.with_initial_law(law);
        let nd = build_split(&scenario, &budget, Task::Nd, nd_seed, Split::Test)?.rows;
        let nl = build_split(&scenario, &budget, Task::Nl, nl_seed, Split::Test)?.rows;
        evaluate_suite(ctx, law.as_str(), &refs, &nd, &nl)?;
    }
    Ok(())
}

fn run_small_world(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let (base, refs) = reference_training(spec, rep_seed)?;
    let sw = &spec.small_world;
    let graph_seed = derive_seed(rep_seed, 50);
    let graph = small_world(sw.agents, sw.mean_degree, sw.rewire_prob, &mut derive_rng(graph_seed, 0))?;
    ctx.out.write_json(
        &format!("graphs/small_world_rep{}.json", ctx.rep),
        &GraphDocument::from_graph(&graph, Some(graph_seed)),
    )?;
    let mask = AttackerMask::from_ids(graph.n(), &sw.attackers)?;
    let monitors: Vec<usize> = (0..graph.n())
        .filter(|&i| !mask.is_attacker(i) && mask.attacking_neighbors(&graph, i) > 0)
        .collect();
    if monitors.is_empty() {
        return Err(CliError::config("small_world.attackers", "no trustworthy agent is next to an attacker"));
    }
    let per_monitor = spec.budget()?.nd_test_per_event.div_ceil(monitors.len());
    let scenario = Scenario::new(graph, attack_free(), base.protocol)?;
    let (mut nd, mut nl) = (Vec::new(), Vec::new());
    for &monitor in &monitors {
        let seeds = (derive_path(rep_seed, &[51, monitor as u64]), derive_path(rep_seed, &[52, monitor as u64]));
        let (a, b) = fixed_monitor_rows(&scenario, &sw.attackers, monitor, per_monitor, seeds)?;
        nd.extend(a);
        nl.extend(b);
    }
    evaluate_suite(ctx, "small_world", &refs, &nd, &nl)
}

/// Trains one learner per shard from a common initialization; `graph`
/// `None` trains every learner on its own shard only.
pub fn gossip_models(
    spec: &ExperimentSpec,
    rows: &[SampleRow],
    shards: &[Vec<usize>],
    task: Task,
    graph: Option<&Graph>,
    seed: u64,
) -> Result<(Vec<Mlp>, Vec<RoundMetrics>)> {
    let g = &spec.gossip;
    let slots = spec.detectors.slots;
    let outputs = if task == Task::Nd { 1 } else { slots };
    let start = init(&detector_layout(slots, outputs), derive_seed(seed, 0))?;
    let mut learners = shards
        .iter()
        .enumerate()
        .map(|(agent, shard)| {
            let local: Vec<SampleRow> = shard.iter().map(|&r| rows[r].clone()).collect();
            let data = examples(&local, task, g.kind, g.instances, slots, &InputScaling::IDENTITY)?;
            Ok(LearnerState::new(agent, start.clone(), data, derive_path(seed, &[1, agent as u64])))
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = run_gossip_training(
        &mut learners,
        graph,
        g.rounds,
        &g.config(&spec.training),
        &mut derive_rng(seed, 2),
    )?;
    Ok((learners.into_iter().map(|l| l.model).collect(), metrics))
}

pub fn gossip_detector(spec: &ExperimentSpec, name: &'static str, model: &Mlp) -> NnDetector {
    NnDetector {
        name,
        model: model.clone(),
        kind: spec.gossip.kind,
        instances: spec.gossip.instances,
        scaling: InputScaling::IDENTITY,
    }
}

pub fn with_positions(rows: &[SampleRow], keep: &[Position]) -> Vec<SampleRow> {
    rows.iter().filter(|r| keep.contains(&r.position)).cloned().collect()
}

fn run_gossip_learning(ctx: &mut Ctx<'_>) -> Result<()> {
    let spec = ctx.spec;
    let rep_seed = ctx.rep_seed();
    let g = &spec.gossip;
    let graph = manhattan(spec)?;
    let n = graph.n();
    let base = base_scenario(graph.clone(), protocol_with(spec, spec.protocol.d, g.instances))?;
    let budget = spec.budget()?;
    let data_seed = derive_seed(rep_seed, 1);
    let events = task_events(Task::Nd, 1);
    let train_rows = build_event_rows(&base, &events, Task::Nd, budget.nd_train_per_event, data_seed, Split::Train)?;
    let test_rows = build_event_rows(&base, &events, Task::Nd, budget.nd_test_per_event, data_seed, Split::Test)?;
    let d = spec.protocol.d;
    let k = g.instances;
    let rep = ctx.rep;
    let telemetry = |ctx: &mut Ctx<'_>, name: &str, m: &[RoundMetrics]| -> Result<()> {
        ctx.out.write(&format!("gossip/rep{rep}/{name}.csv"), &telemetry_csv(m))?;
        Ok(())
    };

    // Case 1: one data-starved agent among data-rich ones.
    let case1_train = with_positions(&train_rows, &[Position::None, Position::NextTo]);
    let case1_test = with_positions(&test_rows, &[Position::None, Position::NextTo]);
    let policy = ShardPolicy::Starved {
        agents: n,
        starved: g.starved_agent,
        fraction: g.starved_fraction,
    };
    for (task, rows, tag) in [
        (Task::Nd, case1_train.clone(), 0u64),
        (Task::Nl, with_positions(&case1_train, &[Position::NextTo]), 1),
    ] {
        let shards = shard_for_gossip(&rows, &policy, &mut derive_rng(rep_seed, 60 + tag))?;
        let seed = derive_seed(rep_seed, 70 + tag);
        let (collab, mc) = gossip_models(spec, &rows, &shards, task, Some(&graph), seed)?;
        let (iso, mi) = gossip_models(spec, &rows, &shards, task, None, seed)?;
        telemetry(ctx, &format!("case1_{}_collaborative", task.as_str()), &mc)?;
        telemetry(ctx, &format!("case1_{}_isolated", task.as_str()), &mi)?;
        let e = Eval { setting: "case1", instances: k, d };
        let s = g.starved_agent;
        ctx.evaluate(&e, &gossip_detector(spec, "collaborative", &collab[s]), &case1_test, task)?;
        ctx.evaluate(&e, &gossip_detector(spec, "isolated", &iso[s]), &case1_test, task)?;
    }

    // Case 2: agents hold attack data of a single position each.
    let positions: Vec<Position> = (0..n)
        .map(|a| if a % 2 == 0 { Position::NextTo } else { Position::FarFrom })
        .collect();
    let shards = shard_for_gossip(&train_rows, &ShardPolicy::PositionHomogeneous { positions }, &mut derive_rng(rep_seed, 62))?;
    let seed = derive_seed(rep_seed, 72);
    let (collab, mc) = gossip_models(spec, &train_rows, &shards, Task::Nd, Some(&graph), seed)?;
    let (ind, mi) = gossip_models(spec, &train_rows, &shards, Task::Nd, None, seed)?;
    telemetry(ctx, "case2_nd_collaborative", &mc)?;
    telemetry(ctx, "case2_nd_independent", &mi)?;
    let detectors = [
        gossip_detector(spec, "collaborative@0", &collab[0]),
        gossip_detector(spec, "collaborative@1", &collab[1]),
        gossip_detector(spec, "independent@0", &ind[0]),
        gossip_detector(spec, "independent@1", &ind[1]),
    ];
    for (setting, p) in [("case2_test_next_to", Position::NextTo), ("case2_test_far_from", Position::FarFrom)] {
        let rows = with_positions(&test_rows, &[Position::None, p]);
        let e = Eval { setting, instances: k, d };
        for det in &detectors {
            ctx.evaluate(&e, det, &rows, Task::Nd)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- driver

fn run_repetitions(spec: &ExperimentSpec, out: &mut ArtifactWriter, all_traces: bool) -> Result<FamilyReport> {
    spec.validate()?;
    let mut ctx = Ctx {
        spec,
        out,
        report: FamilyReport::default(),
        rep: 0,
    };
    for rep in 0..spec.repetitions {
        ctx.rep = rep;
        match spec.family {
            Family::Converge => run_converge(&mut ctx, all_traces)?,
            Family::OneAttacker => run_one_attacker(&mut ctx)?,
            Family::MultiAttacker => run_multi_attacker(&mut ctx)?,
            Family::DegreeTailor => run_degree_tailor(&mut ctx)?,
            Family::Mismatch => run_mismatch(&mut ctx)?,
            Family::GossipLearning => run_gossip_learning(&mut ctx)?,
            Family::SmallWorld => run_small_world(&mut ctx)?,
        }
    }
    let report = ctx.report;
    write_tables(spec, out, &report)?;
    Ok(report)
}

/// Runs the family named in `spec`, writing artifacts through `out`.
pub fn run_family(spec: &ExperimentSpec, out: &mut ArtifactWriter) -> Result<FamilyReport> {
    run_repetitions(spec, out, false)
}

/// Convergence runs with every trace exported.
pub fn simulate(spec: &ExperimentSpec, out: &mut ArtifactWriter) -> Result<FamilyReport> {
    let spec = ExperimentSpec {
        family: Family::Converge,
        ..spec.clone()
    };
    run_repetitions(&spec, out, true)
}

fn write_tables(spec: &ExperimentSpec, out: &mut ArtifactWriter, report: &FamilyReport) -> Result<()> {
    if !report.convergence.is_empty() {
        out.write(
            "convergence.csv",
            &table_csv(
                &["repetition", "attacked", "objective_gap", "disagreement", "distance_to_target"],
                report.convergence.iter().map(|c| {
                    vec![
                        c.repetition.to_string(),
                        c.attacked.to_string(),
                        cell(c.objective_gap),
                        cell(c.disagreement),
                        c.distance_to_target.map(cell).unwrap_or_default(),
                    ]
                }),
            ),
        )?;
    }
    let mut medians = Vec::new();
    if !report.aucs.is_empty() {
        out.write(
            "auc.csv",
            &table_csv(
                &["repetition", "setting", "detector", "task", "K", "d", "auc", "n_pos", "n_neg"],
                report.aucs.iter().map(|r| {
                    vec![
                        r.repetition.to_string(),
                        r.setting.clone(),
                        r.detector.clone(),
                        r.task.as_str().to_string(),
                        r.instances.to_string(),
                        r.d.to_string(),
                        cell(r.auc),
                        r.n_pos.to_string(),
                        r.n_neg.to_string(),
                    ]
                }),
            ),
        )?;
        let mut groups: Vec<(String, String, Task, usize, usize)> = Vec::new();
        for r in &report.aucs {
            let key = (r.setting.clone(), r.detector.clone(), r.task, r.instances, r.d);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        for (setting, detector, task, instances, d) in groups {
            let q = Query {
                setting: Some(&setting),
                detector: Some(&detector),
                task: Some(task),
                instances: Some(instances),
                d: Some(d),
            };
            let values = report.aucs(q);
            medians.push(MedianRow {
                median_auc: median(&mut values.clone()).unwrap_or(f64::NAN),
                repetitions: values.len(),
                setting,
                detector,
                task,
                instances,
                d,
            });
        }
    }
    out.write_json(
        "summary.json",
        &Summary {
            family: spec.family,
            config_digest: spec.digest(),
            spec: ExperimentSpec {
                output: None,
                ..spec.clone()
            },
            medians,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
