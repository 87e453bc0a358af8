//! Detector inputs extracted from traces: temporal endpoint differences,
//! spatial deviations from the neighborhood mean, the spatial-difference
//! score aggregates, and fitting a neighbor list onto a fixed number of
//! model input slots.
//!
//! All per-instance quantities are sums over the `d` coordinates (`1ᵀv`); the
//! K-instance features divide the total by `K·d`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::protocol::Trace;
use crate::topology::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Temporal,
    Spatial,
}

impl FeatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::Temporal => "temporal",
            FeatureKind::Spatial => "spatial",
        }
    }
}

/// Coordinate-summed statistics one monitoring agent gathers from a single
/// instance. Vectors are indexed like the sorted neighbor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSums {
    /// `1ᵀ(x_j(T) − x_j(0))`.
    pub temporal: Vec<f64>,
    pub temporal_self: f64,
    /// `1ᵀ Σ_t (x_j(t) − x̄_i(t))`, the spatial deviation sum.
    pub spatial: Vec<f64>,
    pub spatial_self: f64,
    /// `1ᵀ [Σ_t (x_j(t) − x_i(t)) − φ̄_ii]`, the localization aggregate.
    pub local: Vec<f64>,
    pub local_self: f64,
}

/// Computes [`InstanceSums`] for monitor `i` with the given neighbor list.
///
/// The temporal term telescopes the per-iteration increments to the endpoint
/// difference; the spatial terms use the time-summed states
/// `S_j = Σ_t 1ᵀx_j(t)`, since every spatial statistic is linear in them.
pub fn instance_sums(trace: &Trace, neighbors: &[usize], i: usize) -> InstanceSums {
    let last = trace.iterations();
    let endpoint = |j: usize| -> f64 {
        trace
            .state(last, j)
            .iter()
            .zip(trace.state(0, j))
            .map(|(a, b)| a - b)
            .sum()
    };
    let time_sum = |j: usize| -> f64 {
        (0..=last).map(|t| trace.state(t, j).iter().sum::<f64>()).sum()
    };
    let own = time_sum(i);
    let sums: Vec<f64> = neighbors.iter().map(|&j| time_sum(j)).collect();
    let mean = (own + sums.iter().sum::<f64>()) / (neighbors.len() + 1) as f64;
    let spatial_self = own - mean;
    InstanceSums {
        temporal: neighbors.iter().map(|&j| endpoint(j)).collect(),
        temporal_self: endpoint(i),
        spatial: sums.iter().map(|s| s - mean).collect(),
        spatial_self,
        local: sums.iter().map(|s| s - own - spatial_self).collect(),
        local_self: -spatial_self,
    }
}

/// Per-neighbor feature values for one monitor, plus its own value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborScores {
    pub monitor: usize,
    pub neighbors: Vec<usize>,
    pub values: Vec<f64>,
    pub self_value: f64,
}

fn check_traces(traces: &[Trace]) -> Result<()> {
    let first = traces.first().ok_or(Error::Empty("traces"))?;
    for t in traces {
        if (t.n(), t.d(), t.iterations()) != (first.n(), first.d(), first.iterations()) {
            return Err(invalid("traces", "all traces must share n, d and T"));
        }
    }
    Ok(())
}

/// Averages coordinate sums over instances: `(1/Kd) Σ_k`.
pub fn average_sums(
    sums: &[InstanceSums],
    d: usize,
    pick: impl Fn(&InstanceSums) -> (&[f64], f64),
) -> Result<(Vec<f64>, f64)> {
    let first = sums.first().ok_or(Error::Empty("instances"))?;
    let width = pick(first).0.len();
    let mut values = vec![0.0; width];
    let mut own = 0.0;
    for s in sums {
        let (v, o) = pick(s);
        if v.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                actual: v.len(),
            });
        }
        for (acc, x) in values.iter_mut().zip(v) {
            *acc += x;
        }
        own += o;
    }
    let scale = 1.0 / (sums.len() * d) as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok((values, own * scale))
}

fn scores(
    traces: &[Trace],
    graph: &Graph,
    i: usize,
    pick: impl Fn(&InstanceSums) -> (&[f64], f64),
) -> Result<NeighborScores> {
    check_traces(traces)?;
    let neighbors = graph.neighbors(i).to_vec();
    let sums: Vec<InstanceSums> = traces
        .iter()
        .map(|t| instance_sums(t, &neighbors, i))
        .collect();
    let (values, self_value) = average_sums(&sums, traces[0].d(), pick)?;
    Ok(NeighborScores {
        monitor: i,
        neighbors,
        values,
        self_value,
    })
}

/// `ξ_ij = (1/Kd) Σ_k 1ᵀ(x_j^k(T) − x_j^k(0))` for `j ∈ N_i`, and `ξ_ii`.
pub fn temporal_scores(traces: &[Trace], graph: &Graph, i: usize) -> Result<NeighborScores> {
    scores(traces, graph, i, |s| (&s.temporal, s.temporal_self))
}

/// `χ_ij = (1/Kd) Σ_k 1ᵀ Σ_t (x_j^k(t) − x̄_i^k(t))` for `j ∈ N_i`, and `χ_ii`.
pub fn spatial_scores(traces: &[Trace], graph: &Graph, i: usize) -> Result<NeighborScores> {
    scores(traces, graph, i, |s| (&s.spatial, s.spatial_self))
}

/// Mean of the states of `{i} ∪ neighbors` at iteration `t`.
pub fn neighborhood_average(trace: &Trace, neighbors: &[usize], i: usize, t: usize) -> Vec<f64> {
    let mut avg = trace.state(t, i).to_vec();
    for &j in neighbors {
        for (a, x) in avg.iter_mut().zip(trace.state(t, j)) {
            *a += x;
        }
    }
    let count = (neighbors.len() + 1) as f64;
    avg.iter_mut().for_each(|a| *a /= count);
    avg
}

/// Per-instance aggregates used by the spatial-difference score detector.
/// Entries are coordinate sums; `detection[k][j] = 1ᵀφ̄_ij^k` and
/// `localization[k][j] = 1ᵀφ_ij^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdScoreFeatures {
    pub monitor: usize,
    pub neighbors: Vec<usize>,
    pub d: usize,
    pub detection: Vec<Vec<f64>>,
    pub detection_self: Vec<f64>,
    pub localization: Vec<Vec<f64>>,
    pub localization_self: Vec<f64>,
}

impl SdScoreFeatures {
    pub fn from_sums(monitor: usize, neighbors: Vec<usize>, d: usize, sums: &[InstanceSums]) -> Self {
        Self {
            monitor,
            neighbors,
            d,
            detection: sums.iter().map(|s| s.spatial.clone()).collect(),
            detection_self: sums.iter().map(|s| s.spatial_self).collect(),
            localization: sums.iter().map(|s| s.local.clone()).collect(),
            localization_self: sums.iter().map(|s| s.local_self).collect(),
        }
    }

    pub fn instances(&self) -> usize {
        self.detection.len()
    }
}

pub fn sd_aggregates(traces: &[Trace], graph: &Graph, i: usize) -> Result<SdScoreFeatures> {
    check_traces(traces)?;
    let neighbors = graph.neighbors(i).to_vec();
    let sums: Vec<InstanceSums> = traces
        .iter()
        .map(|t| instance_sums(t, &neighbors, i))
        .collect();
    Ok(SdScoreFeatures::from_sums(i, neighbors, traces[0].d(), &sums))
}

/// One fixed-width model input. `slots[s]` is the index into the monitor's
/// neighbor list feeding slot `s`, or `None` for a padded slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailoredGroup {
    pub values: Vec<f64>,
    pub slots: Vec<Option<usize>>,
}

impl TailoredGroup {
    pub fn padded(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }
}

/// Maps `values` (one per neighbor) onto groups of exactly `m` slots.
///
/// More neighbors than slots: `⌈N/m⌉` consecutive windows, the last one
/// right-aligned so windows may overlap. Fewer: one group padded at the tail
/// with `self_value`.
pub fn tailor_inputs(values: &[f64], self_value: f64, m: usize) -> Result<Vec<TailoredGroup>> {
    if m == 0 {
        return Err(invalid("m", "must be at least 1"));
    }
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("neighbor list"));
    }
    if n <= m {
        let mut group_values = values.to_vec();
        group_values.resize(m, self_value);
        let slots = (0..m).map(|s| (s < n).then_some(s)).collect();
        return Ok(vec![TailoredGroup {
            values: group_values,
            slots,
        }]);
    }
    let groups = n.div_ceil(m);
    Ok((0..groups)
        .map(|g| {
            let start = if g + 1 == groups { n - m } else { g * m };
            TailoredGroup {
                values: values[start..start + m].to_vec(),
                slots: (start..start + m).map(Some).collect(),
            }
        })
        .collect())
}

/// A tailored input ready for export or inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub monitor: usize,
    pub kind: FeatureKind,
    pub instances: usize,
    pub d: usize,
    /// Neighbor agent id per slot; `None` marks padding.
    pub slot_agents: Vec<Option<usize>>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn from_group(
        scores: &NeighborScores,
        group: &TailoredGroup,
        kind: FeatureKind,
        instances: usize,
        d: usize,
    ) -> Self {
        Self {
            monitor: scores.monitor,
            kind,
            instances,
            d,
            slot_agents: group
                .slots
                .iter()
                .map(|s| s.map(|idx| scores.neighbors[idx]))
                .collect(),
            values: group.values.clone(),
        }
    }
}

/// Combines per-group neighbor verdict scores into one score per neighbor by
/// taking the maximum over every group that contains the neighbor.
pub fn merge_group_scores(
    neighbor_count: usize,
    groups: &[TailoredGroup],
    group_scores: &[Vec<f64>],
) -> Vec<f64> {
    let mut merged = vec![f64::NEG_INFINITY; neighbor_count];
    for (group, scores) in groups.iter().zip(group_scores) {
        for (slot, score) in group.slots.iter().zip(scores) {
            if let Some(idx) = slot {
                merged[*idx] = merged[*idx].max(*score);
            }
        }
    }
    merged
}

/// Affine input normalization `(v − offset) / scale`, shared by every slot so
/// the model stays symmetric in its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: f64,
    pub scale: f64,
}

impl Default for InputScaling {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl InputScaling {
    pub const IDENTITY: Self = Self {
        offset: 0.0,
        scale: 1.0,
    };

    /// Mean and standard deviation of all values; a degenerate spread falls
    /// back to unit scale.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for &v in values {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        if n == 0 {
            return Err(Error::Empty("scaling sample"));
        }
        let sd = libm::sqrt(m2 / n as f64);
        let scale = if sd.is_finite() && sd > 1e-12 { sd } else { 1.0 };
        Ok(Self {
            offset: mean,
            scale,
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}
