//! Labeled detection/localization datasets: protocol runs with a known
//! attacker placement, reduced to the features one monitoring agent sees.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{
    average_sums, instance_sums, tailor_inputs, FeatureKind, InputScaling, InstanceSums,
    NeighborScores, SdScoreFeatures,
};
use crate::neural::Example;
use crate::protocol::{
    generate_problem, run_instance, AttackConfig, ProtocolConfig, UniformBox, ATTACK_TARGET_LAW,
};
use crate::rng::{derive_path, rng_from_seed};
use crate::topology::{second_largest_eigenvalue, AttackerMask, Graph};

/// Laws of the trustworthy agents' initial states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitialLaw {
    S0,
    S1,
    S2,
    S3,
    S4,
}

impl InitialLaw {
    pub const ALL: [InitialLaw; 5] = [Self::S0, Self::S1, Self::S2, Self::S3, Self::S4];

    pub fn bounds(self) -> UniformBox {
        match self {
            Self::S0 => UniformBox::new(0.0, 1.0),
            Self::S1 => UniformBox::new(0.2, 0.8),
            Self::S2 => UniformBox::new(-0.2, 1.2),
            Self::S3 => UniformBox::new(0.2, 1.2),
            Self::S4 => UniformBox::new(-0.2, 0.8),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::S0 => "S0",
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
        }
    }
}

/// Where the monitoring agent sits relative to the attackers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// No attacker in the network.
    None,
    /// Adjacent to at least one attacker.
    NextTo,
    /// At graph distance at least 2 from every attacker.
    FarFrom,
}

impl Position {
    pub fn as_str(self) -> &'static str {
        match self {
            Position::None => "none",
            Position::NextTo => "next_to",
            Position::FarFrom => "far_from",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Placement {
    /// A fresh uniformly drawn attacker set of the given size per sample and
    /// a monitor drawn uniformly among agents in the requested position.
    Random { attackers: usize, position: Position },
    /// Fixed attackers; the monitor is drawn per sample.
    FixedAttackers { attackers: Vec<usize>, position: Position },
    /// Fixed attackers and monitor.
    Fixed { attackers: Vec<usize>, monitor: usize },
}

const PLACEMENT_ATTEMPTS: usize = 100;

impl Placement {
    pub fn attacker_count(&self) -> usize {
        match self {
            Placement::Random { attackers, .. } => *attackers,
            Placement::FixedAttackers { attackers, .. } | Placement::Fixed { attackers, .. } => {
                attackers.len()
            }
        }
    }
}

fn position_of(graph: &Graph, attackers: &[usize], monitor: usize) -> Position {
    if attackers.is_empty() {
        return Position::None;
    }
    let dist = graph.distances_from(attackers);
    if dist[monitor] == 1 {
        Position::NextTo
    } else {
        Position::FarFrom
    }
}

fn eligible_monitors(graph: &Graph, attackers: &[usize], position: Position) -> Vec<usize> {
    let dist = graph.distances_from(attackers);
    (0..graph.n())
        .filter(|&i| !attackers.contains(&i))
        .filter(|&i| match position {
            Position::None => true,
            Position::NextTo => dist[i] == 1,
            Position::FarFrom => dist[i] >= 2,
        })
        .collect()
}

/// Everything needed to generate one family of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: Graph,
    pub placement: Placement,
    pub initial_law: InitialLaw,
    pub target_law: UniformBox,
    /// `d`, `T`, `K` and the step rule.
    pub protocol: ProtocolConfig,
    /// `λ̂`; defaults to the second-largest eigenvalue of `E[A]`.
    pub noise_decay: f64,
}

impl Scenario {
    pub fn new(graph: Graph, placement: Placement, protocol: ProtocolConfig) -> Result<Self> {
        let noise_decay = second_largest_eigenvalue(&graph);
        let s = Self {
            graph,
            placement,
            initial_law: InitialLaw::S0,
            target_law: ATTACK_TARGET_LAW,
            protocol,
            noise_decay,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_placement(&self, placement: Placement) -> Result<Self> {
        let s = Self {
            placement,
            ..self.clone()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_initial_law(&self, law: InitialLaw) -> Self {
        Self {
            initial_law: law,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if self.protocol.instances == 0 {
            return Err(invalid("instances", "must be at least 1"));
        }
        let n = self.graph.n();
        let check_ids = |ids: &[usize]| -> Result<()> {
            if let Some(&id) = ids.iter().find(|&&id| id >= n) {
                return Err(Error::AgentOutOfRange { id, n });
            }
            let mut sorted = ids.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return Err(invalid("attackers", "duplicate attacker id"));
            }
            Ok(())
        };
        match &self.placement {
            Placement::Random {
                attackers,
                position,
            } => {
                if (*attackers == 0) != (*position == Position::None) {
                    return Err(invalid("placement", "position `none` iff there are no attackers"));
                }
                if *attackers >= n {
                    return Err(invalid("placement", "at least one agent must stay trustworthy"));
                }
            }
            Placement::FixedAttackers {
                attackers,
                position,
            } => {
                check_ids(attackers)?;
                if (attackers.is_empty()) != (*position == Position::None) {
                    return Err(invalid("placement", "position `none` iff there are no attackers"));
                }
                if eligible_monitors(&self.graph, attackers, *position).is_empty() {
                    return Err(invalid("placement", "no agent satisfies the requested position"));
                }
            }
            Placement::Fixed { attackers, monitor } => {
                check_ids(attackers)?;
                if *monitor >= n {
                    return Err(Error::AgentOutOfRange { id: *monitor, n });
                }
                if attackers.contains(monitor) {
                    return Err(invalid("monitor", "the monitor must be trustworthy"));
                }
            }
        }
        if !(self.noise_decay > 0.0 && self.noise_decay < 1.0) {
            return Err(invalid("noise_decay", "must lie in (0, 1)"));
        }
        Ok(())
    }

    fn place<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<usize>, usize)> {
        let n = self.graph.n();
        match &self.placement {
            Placement::Fixed { attackers, monitor } => Ok((attackers.clone(), *monitor)),
            Placement::FixedAttackers {
                attackers,
                position,
            } => {
                let pool = eligible_monitors(&self.graph, attackers, *position);
                Ok((attackers.clone(), pool[rng.gen_range(0..pool.len())]))
            }
            Placement::Random {
                attackers: m,
                position,
            } => {
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let mut attackers = (0..n).choose_multiple(rng, *m);
                    attackers.sort_unstable();
                    let pool = eligible_monitors(&self.graph, &attackers, *position);
                    if !pool.is_empty() {
                        let monitor = pool[rng.gen_range(0..pool.len())];
                        return Ok((attackers, monitor));
                    }
                }
                Err(invalid(
                    "placement",
                    format!("no placement with the requested position after {PLACEMENT_ATTEMPTS} draws"),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Neighborhood detection.
    Nd,
    /// Neighborhood localization.
    Nl,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nd => "nd",
            Task::Nl => "nl",
        }
    }
}

/// One labeled sample: the per-instance sums a monitor gathered over `K`
/// independent protocol runs with a common attacker placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub monitor: usize,
    pub neighbors: Vec<usize>,
    pub attackers: Vec<usize>,
    pub position: Position,
    pub d: usize,
    pub sums: Vec<InstanceSums>,
}

impl SampleRow {
    pub fn is_h1(&self) -> bool {
        !self.attackers.is_empty()
    }

    pub fn nd_label(&self) -> f64 {
        if self.is_h1() {
            1.0
        } else {
            0.0
        }
    }

    /// Per-neighbor attacker indicators, in neighbor-list order.
    pub fn neighbor_labels(&self) -> Vec<bool> {
        self.neighbors
            .iter()
            .map(|j| self.attackers.contains(j))
            .collect()
    }

    pub fn instances(&self) -> usize {
        self.sums.len()
    }

    fn prefix(&self, instances: usize) -> Result<&[InstanceSums]> {
        if instances == 0 || instances > self.sums.len() {
            return Err(invalid("instances", "must be between 1 and the recorded instance count"));
        }
        Ok(&self.sums[..instances])
    }

    /// `ξ` or `χ` over the first `instances` instances.
    pub fn scores(&self, kind: FeatureKind, instances: usize) -> Result<NeighborScores> {
        let sums = self.prefix(instances)?;
        let (values, self_value) = match kind {
            FeatureKind::Temporal => average_sums(sums, self.d, |s| (&s.temporal, s.temporal_self))?,
            FeatureKind::Spatial => average_sums(sums, self.d, |s| (&s.spatial, s.spatial_self))?,
        };
        Ok(NeighborScores {
            monitor: self.monitor,
            neighbors: self.neighbors.clone(),
            values,
            self_value,
        })
    }

    pub fn sd_features(&self, instances: usize) -> Result<SdScoreFeatures> {
        let sums = self.prefix(instances)?;
        Ok(SdScoreFeatures::from_sums(
            self.monitor,
            self.neighbors.clone(),
            self.d,
            sums,
        ))
    }
}

/// Runs `K` instances for one sample. NL requests require an attacker.
pub fn generate_sample<R: Rng + ?Sized>(
    scenario: &Scenario,
    task: Task,
    rng: &mut R,
) -> Result<SampleRow> {
    if task == Task::Nl && scenario.placement.attacker_count() == 0 {
        return Err(Error::LocalizationUnderNullHypothesis);
    }
    let (attackers, monitor) = scenario.place(rng)?;
    let graph = &scenario.graph;
    let (n, d) = (graph.n(), scenario.protocol.d);
    let mask = AttackerMask::from_ids(n, &attackers)?;
    let neighbors = graph.neighbors(monitor).to_vec();
    let law = scenario.initial_law.bounds();
    let mut sums = Vec::with_capacity(scenario.protocol.instances);
    for k in 0..scenario.protocol.instances {
        let problem = generate_problem(n, d, rng)?;
        let initial = law.sample(n * d, rng);
        let attack = AttackConfig::new(scenario.target_law.sample(d, rng), scenario.noise_decay)?;
        let mut trace = run_instance(
            graph,
            &mask,
            &problem,
            &initial,
            &scenario.protocol,
            Some(&attack),
            rng,
        )?;
        trace.instance = k;
        sums.push(instance_sums(&trace, &neighbors, monitor));
    }
    Ok(SampleRow {
        monitor,
        position: position_of(graph, &attackers, monitor),
        neighbors,
        attackers,
        d,
        sums,
    })
}

/// Generates `count` rows; row `r` uses the generator seeded by
/// `(seed, stream, r)`, independent of every other row.
pub fn generate_rows(
    scenario: &Scenario,
    task: Task,
    count: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<SampleRow>> {
    (0..count)
        .map(|r| {
            let mut rng = rng_from_seed(derive_path(seed, &[stream, r as u64]));
            generate_sample(scenario, task, &mut rng)
        })
        .collect()
}

/// Rows per event and split. ND draws `nd_*` rows for each of the three
/// events (no attacker, next to, far from); NL draws next-to rows only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub nd_train_per_event: usize,
    pub nd_test_per_event: usize,
    pub nl_train: usize,
    pub nl_test: usize,
}

impl Budget {
    pub const FULL: Budget = Budget {
        nd_train_per_event: 10_000,
        nd_test_per_event: 6_000,
        nl_train: 10_000,
        nl_test: 6_000,
    };

    /// Budget scaled by `factor`, rounding each count and keeping at least one
    /// row per event.
    pub fn scaled(factor: f64) -> Result<Budget> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(invalid("scale", "must lie in (0, 1]"));
        }
        let s = |v: usize| (libm::round(v as f64 * factor) as usize).max(1);
        Ok(Budget {
            nd_train_per_event: s(Self::FULL.nd_train_per_event),
            nd_test_per_event: s(Self::FULL.nd_test_per_event),
            nl_train: s(Self::FULL.nl_train),
            nl_test: s(Self::FULL.nl_test),
        })
    }

    pub fn desk() -> Budget {
        Budget {
            nd_train_per_event: 1_000,
            nd_test_per_event: 600,
            nl_train: 1_000,
            nl_test: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub task: Task,
    pub rows: Vec<SampleRow>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count_position(&self, p: Position) -> usize {
        self.rows.iter().filter(|r| r.position == p).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Events of a task, paired with the placements producing them.
pub fn task_events(task: Task, attackers: usize) -> Vec<(Position, Placement)> {
    let random = |position| Placement::Random {
        attackers,
        position,
    };
    match task {
        Task::Nd => vec![
            (
                Position::None,
                Placement::Random {
                    attackers: 0,
                    position: Position::None,
                },
            ),
            (Position::NextTo, random(Position::NextTo)),
            (Position::FarFrom, random(Position::FarFrom)),
        ],
        Task::Nl => vec![(Position::NextTo, random(Position::NextTo))],
    }
}

/// Rows of one split for the given events, `per_event` rows each. Event `e`
/// draws from seed stream `(seed, e, split)`, so the splits never share a
/// protocol run and a subset of events reproduces the same rows.
pub fn build_event_rows(
    base: &Scenario,
    events: &[(Position, Placement)],
    task: Task,
    per_event: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<SampleRow>> {
    let mut rows = Vec::with_capacity(events.len() * per_event);
    for (position, placement) in events {
        let scenario = base.with_placement(placement.clone())?;
        let event_seed = derive_path(seed, &[event_index(*position)]);
        rows.extend(generate_rows(&scenario, task, per_event, event_seed, split.stream())?);
    }
    Ok(rows)
}

fn event_index(p: Position) -> u64 {
    match p {
        Position::None => 0,
        Position::NextTo => 1,
        Position::FarFrom => 2,
    }
}

/// One split of the task's dataset. `base` supplies the graph, the laws and
/// the protocol settings; its placement is replaced per event by a random
/// single-attacker placement.
pub fn build_split(base: &Scenario, budget: &Budget, task: Task, seed: u64, split: Split) -> Result<LabeledDataset> {
    let per_event = match (task, split) {
        (Task::Nd, Split::Train) => budget.nd_train_per_event,
        (Task::Nd, Split::Test) => budget.nd_test_per_event,
        (Task::Nl, Split::Train) => budget.nl_train,
        (Task::Nl, Split::Test) => budget.nl_test,
    };
    if per_event == 0 {
        return Err(invalid("budget", "every count must be at least 1"));
    }
    Ok(LabeledDataset {
        task,
        rows: build_event_rows(base, &task_events(task, 1), task, per_event, seed, split)?,
    })
}

/// Train and test sets for `task`.
pub fn build_dataset(base: &Scenario, budget: &Budget, task: Task, seed: u64) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: build_split(base, budget, task, seed, Split::Train)?,
        test: build_split(base, budget, task, seed, Split::Test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ShardPolicy {
    /// Shuffled rows dealt round-robin.
    Uniform { agents: usize },
    /// Agent `a` receives attack rows of position `positions[a]` only;
    /// attacker-free rows are dealt to every agent.
    PositionHomogeneous { positions: Vec<Position> },
    /// Agent `starved` receives `round(fraction · rows)` rows; the rest are
    /// dealt uniformly to the others.
    Starved {
        agents: usize,
        starved: usize,
        fraction: f64,
    },
}

fn deal(indices: &[usize], agents: &[usize], shards: &mut [Vec<usize>]) {
    for (k, &row) in indices.iter().enumerate() {
        shards[agents[k % agents.len()]].push(row);
    }
}

/// Splits row indices `0..rows.len()` into disjoint per-agent shards whose
/// union is every row.
pub fn shard_for_gossip<R: Rng + ?Sized>(
    rows: &[SampleRow],
    policy: &ShardPolicy,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    match policy {
        ShardPolicy::Uniform { agents } => {
            if *agents == 0 {
                return Err(Error::InfeasiblePolicy("no agents".to_string()));
            }
            let mut shards = vec![Vec::new(); *agents];
            deal(&order, &(0..*agents).collect::<Vec<_>>(), &mut shards);
            Ok(shards)
        }
        ShardPolicy::PositionHomogeneous { positions } => {
            if positions.is_empty() {
                return Err(Error::InfeasiblePolicy("no agents".to_string()));
            }
            if positions.contains(&Position::None) {
                return Err(Error::InfeasiblePolicy(
                    "an agent needs an attack position to be homogeneous in".to_string(),
                ));
            }
            let mut shards = vec![Vec::new(); positions.len()];
            let all: Vec<usize> = (0..positions.len()).collect();
            let clean: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&r| rows[r].position == Position::None)
                .collect();
            deal(&clean, &all, &mut shards);
            for p in [Position::NextTo, Position::FarFrom] {
                let tagged: Vec<usize> = order
                    .iter()
                    .copied()
                    .filter(|&r| rows[r].position == p)
                    .collect();
                let owners: Vec<usize> = all.iter().copied().filter(|&a| positions[a] == p).collect();
                match (tagged.is_empty(), owners.is_empty()) {
                    (false, true) => {
                        return Err(Error::InfeasiblePolicy(format!(
                            "rows tagged `{}` but no agent holds that position",
                            p.as_str()
                        )))
                    }
                    (true, false) => {
                        return Err(Error::InfeasiblePolicy(format!(
                            "agents assigned `{}` but no such rows",
                            p.as_str()
                        )))
                    }
                    _ => deal(&tagged, &owners, &mut shards),
                }
            }
            Ok(shards)
        }
        ShardPolicy::Starved {
            agents,
            starved,
            fraction,
        } => {
            if *agents < 2 || starved >= agents {
                return Err(Error::InfeasiblePolicy(
                    "need at least two agents and a valid starved agent".to_string(),
                ));
            }
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InfeasiblePolicy("fraction must lie in (0, 1)".to_string()));
            }
            let take = libm::round(rows.len() as f64 * fraction) as usize;
            let mut shards = vec![Vec::new(); *agents];
            shards[*starved] = order[..take].to_vec();
            let others: Vec<usize> = (0..*agents).filter(|a| a != starved).collect();
            deal(&order[take..], &others, &mut shards);
            Ok(shards)
        }
    }
}

/// Converts rows into model examples. Each tailored group of a row becomes
/// one example; NL targets mark attacking neighbors and mask padded slots.
/// NL conversion keeps attack rows only.
pub fn examples(
    rows: &[SampleRow],
    task: Task,
    kind: FeatureKind,
    instances: usize,
    slots: usize,
    scaling: &InputScaling,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if task == Task::Nl && !row.is_h1() {
            continue;
        }
        let scores = row.scores(kind, instances)?;
        let labels = row.neighbor_labels();
        for group in tailor_inputs(&scores.values, scores.self_value, slots)? {
            let input = scaling.apply_all(&group.values);
            let example = match task {
                Task::Nd => Example::new(input, vec![row.nd_label()]),
                Task::Nl => Example {
                    input,
                    target: group
                        .slots
                        .iter()
                        .map(|s| match s {
                            Some(idx) if labels[*idx] => 1.0,
                            _ => 0.0,
                        })
                        .collect(),
                    mask: group.mask(),
                },
            };
            out.push(example);
        }
    }
    Ok(out)
}

/// Scaling fitted on every neighbor and self value the rows expose.
pub fn fit_scaling(rows: &[SampleRow], kind: FeatureKind, instances: usize) -> Result<InputScaling> {
    let mut values = Vec::new();
    for row in rows {
        let s = row.scores(kind, instances)?;
        values.extend(s.values);
        values.push(s.self_value);
    }
    InputScaling::fit(values.iter())
}
