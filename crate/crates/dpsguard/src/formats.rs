//! On-disk formats: graph documents, binary traces, feature CSVs, sample
//! rows, model files, gossip messages and ROC/telemetry tables.

use std::path::Path;

use dpsguard_core::datagen::{SampleRow, Task};
use dpsguard_core::eval::RocCurve;
use dpsguard_core::features::{tailor_inputs, FeatureKind, InputScaling};
use dpsguard_core::gossip_train::RoundMetrics;
use dpsguard_core::neural::{Layer, Mlp, TrainConfig};
use dpsguard_core::protocol::{ProtocolConfig, Trace};
use dpsguard_core::topology::{GraphKind, GraphRecord};
use dpsguard_core::Graph;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Reads an input artifact, naming the producing subcommand if it is missing.
pub fn read_artifact(path: &Path, producer: &'static str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact {
                path: path.to_path_buf(),
                producer,
            }
        } else {
            CliError::io(path, e)
        }
    })
}

pub fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::format(path, e))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- graph

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl GraphDocument {
    pub fn from_graph(graph: &Graph, seed: Option<u64>) -> Self {
        let mut params = match serde_json::to_value(graph.kind()).expect("kind serializes") {
            serde_json::Value::Object(map) => map,
            _ => unreachable!("graph kinds serialize as objects"),
        };
        let kind = params
            .remove("type")
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Self {
            n: graph.n(),
            edges: graph.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            kind,
            seed,
            params,
        }
    }

    pub fn to_graph(&self) -> std::result::Result<Graph, String> {
        let mut tagged = self.params.clone();
        tagged.insert("type".into(), self.kind.clone().into());
        let kind: GraphKind =
            serde_json::from_value(serde_json::Value::Object(tagged)).map_err(|e| e.to_string())?;
        Graph::try_from(GraphRecord {
            n: self.n,
            edges: self.edges.iter().map(|e| (e[0], e[1])).collect(),
            kind,
        })
        .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------- traces

const U64: usize = 8;

/// Header `(n, d, T, k)` as little-endian `u64`, then the `(T+1)·n·d`
/// states as little-endian `f64`, row-major by iteration then agent.
pub fn encode_trace(trace: &Trace) -> Vec<u8> {
    let states = trace.raw_states();
    let mut out = Vec::with_capacity(4 * U64 + states.len() * U64);
    for v in [trace.n(), trace.d(), trace.iterations(), trace.instance] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for s in states {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes
        .get(at..at + U64)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(U64)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect()
}

pub fn decode_trace(bytes: &[u8], path: &Path) -> Result<Trace> {
    let bad = |m: &str| CliError::format(path, m);
    let header: Vec<usize> = (0..4)
        .map(|k| read_u64(bytes, k * U64).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated header"))?;
    let (n, d, t, k) = (header[0], header[1], header[2], header[3]);
    let expected = (t + 1)
        .checked_mul(n)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| bad("header sizes overflow"))?;
    let body = &bytes[4 * U64..];
    if body.len() != expected * U64 {
        return Err(bad("state block length does not match the header"));
    }
    Trace::from_states(n, d, read_f64s(body), Vec::new(), k).map_err(|e| CliError::format(path, e))
}

/// Settings and seed recorded next to a binary trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub n: usize,
    pub d: usize,
    pub iterations: usize,
    pub instance: usize,
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub attackers: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_decay: Option<f64>,
}

/// Columns `t, agent, x0, x1, ...`.
pub fn trace_csv(trace: &Trace) -> Vec<u8> {
    let mut header = strings(&["t", "agent"]);
    header.extend((0..trace.d()).map(|c| format!("x{c}")));
    let rows = (0..=trace.iterations()).flat_map(|t| {
        (0..trace.n()).map(move |i| {
            let mut r = vec![t.to_string(), i.to_string()];
            r.extend(trace.state(t, i).iter().map(|&v| fmt_f64(v)));
            r
        })
    });
    csv_bytes(&header, rows)
}

// ---------------------------------------------------------------- features

/// One line per tailored input group: `row, agent, kind, K, d, position`,
/// then `slots` feature values, the neighbor id feeding each slot (empty for
/// padding), the detection label and one localization label per slot.
pub fn features_csv(
    rows: &[SampleRow],
    kind: FeatureKind,
    instances: usize,
    slots: usize,
) -> Result<Vec<u8>> {
    let mut header = strings(&["row", "agent", "kind", "K", "d", "position"]);
    header.extend((0..slots).map(|s| format!("v{s}")));
    header.extend((0..slots).map(|s| format!("neighbor{s}")));
    header.push("label".into());
    header.extend((0..slots).map(|s| format!("label{s}")));
    let mut lines = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let scores = row.scores(kind, instances)?;
        let labels = row.neighbor_labels();
        for group in tailor_inputs(&scores.values, scores.self_value, slots)? {
            let mut line = vec![
                r.to_string(),
                row.monitor.to_string(),
                kind.as_str().to_string(),
                instances.to_string(),
                row.d.to_string(),
                row.position.as_str().to_string(),
            ];
            line.extend(group.values.iter().map(|&v| fmt_f64(v)));
            line.extend(
                group
                    .slots
                    .iter()
                    .map(|s| s.map(|i| row.neighbors[i].to_string()).unwrap_or_default()),
            );
            line.push(u8::from(row.is_h1()).to_string());
            line.extend(
                group
                    .slots
                    .iter()
                    .map(|s| s.map(|i| u8::from(labels[i]).to_string()).unwrap_or_default()),
            );
            lines.push(line);
        }
    }
    Ok(csv_bytes(&header, lines))
}

/// One JSON object per line; keeps every per-instance sum, so any instance
/// prefix and either feature family can be recomputed.
pub fn rows_jsonl(rows: &[SampleRow]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    out
}

pub fn parse_rows_jsonl(bytes: &[u8], path: &Path) -> Result<Vec<SampleRow>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::format(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| CliError::format(path, format!("line {}: {e}", k + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------- models

/// Training provenance stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: Task,
    pub kind: FeatureKind,
    pub instances: usize,
    pub scaling: InputScaling,
    pub epochs_completed: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<ModelMeta>,
}

fn activation_tags(layers: usize) -> Vec<String> {
    (0..layers)
        .map(|l| if l + 1 == layers { "sigmoid" } else { "relu" }.to_string())
        .collect()
}

/// `u64` LE header length, the JSON header, then every parameter as LE
/// `f64` (per layer: weights row-major, then biases).
pub fn encode_model(mlp: &Mlp, meta: Option<&ModelMeta>) -> Vec<u8> {
    let header = ModelHeader {
        layer_sizes: mlp.layer_sizes(),
        activations: activation_tags(mlp.layers().len()),
        seed: mlp.seed(),
        meta: meta.cloned(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(U64 + header.len() + mlp.num_params() * U64);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in mlp.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes a model and returns the number of bytes consumed.
fn decode_model_prefix(bytes: &[u8], path: &Path) -> Result<(Mlp, Option<ModelMeta>, usize)> {
    let bad = |m: &str| CliError::format(path, m);
    let len = read_u64(bytes, 0).ok_or_else(|| bad("truncated model header"))? as usize;
    let header_bytes = bytes
        .get(U64..U64 + len)
        .ok_or_else(|| bad("truncated model header"))?;
    let header: ModelHeader = parse_json(header_bytes, path)?;
    if header.layer_sizes.len() < 2 {
        return Err(bad("a model needs at least two layer sizes"));
    }
    if header.activations != activation_tags(header.layer_sizes.len() - 1) {
        return Err(bad("unsupported activation layout"));
    }
    let mut at = U64 + len;
    let mut layers = Vec::new();
    for w in header.layer_sizes.windows(2) {
        let (inputs, outputs) = (w[0], w[1]);
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let block = bytes
                .get(at..at + count * U64)
                .ok_or_else(|| bad("truncated parameter block"))?;
            at += count * U64;
            Ok(read_f64s(block))
        };
        let weights = take(inputs * outputs)?;
        let biases = take(outputs)?;
        layers.push(Layer {
            inputs,
            outputs,
            weights,
            biases,
        });
    }
    let mlp = Mlp::from_layers(layers, header.seed).map_err(|e| CliError::format(path, e))?;
    Ok((mlp, header.meta, at))
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<(Mlp, Option<ModelMeta>)> {
    let (mlp, meta, used) = decode_model_prefix(bytes, path)?;
    if used != bytes.len() {
        return Err(CliError::format(path, "trailing bytes after the parameter block"));
    }
    Ok((mlp, meta))
}

/// A model in transit: `u64` sender id, `u64` round, then the model file.
pub fn encode_message(sender: usize, round: usize, mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(sender as u64).to_le_bytes());
    out.extend_from_slice(&(round as u64).to_le_bytes());
    out.extend(encode_model(mlp, None));
    out
}

pub fn decode_message(bytes: &[u8], path: &Path) -> Result<(usize, usize, Mlp)> {
    let sender = read_u64(bytes, 0).ok_or_else(|| CliError::format(path, "truncated message"))?;
    let round = read_u64(bytes, U64).ok_or_else(|| CliError::format(path, "truncated message"))?;
    let (mlp, _) = decode_model(&bytes[2 * U64..], path)?;
    Ok((sender as usize, round as usize, mlp))
}

// ---------------------------------------------------------------- tables

pub fn telemetry_csv(metrics: &[RoundMetrics]) -> Vec<u8> {
    csv_bytes(
        &strings(&["round", "mean_loss", "dispersion"]),
        metrics.iter().map(|m| {
            vec![
                m.round.to_string(),
                fmt_f64(m.mean_loss),
                fmt_f64(m.dispersion),
            ]
        }),
    )
}

pub fn loss_csv(losses: &[f64], first_epoch: usize) -> Vec<u8> {
    csv_bytes(
        &strings(&["epoch", "loss"]),
        losses
            .iter()
            .enumerate()
            .map(|(e, l)| vec![(first_epoch + e).to_string(), fmt_f64(*l)]),
    )
}

pub fn roc_csv(curve: &RocCurve) -> Vec<u8> {
    csv_bytes(
        &strings(&["threshold", "p_f", "p_d"]),
        curve.points.iter().map(|p| {
            vec![fmt_f64(p.threshold), fmt_f64(p.p_f), fmt_f64(p.p_d)]
        }),
    )
}

/// One scored decision unit: a row (detection) or a row/neighbor pair
/// (localization).
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictRecord {
    pub row: usize,
    pub agent: usize,
    pub neighbor: Option<usize>,
    pub method: String,
    pub score: f64,
    pub orientation: &'static str,
    pub label: bool,
}

pub fn verdict_csv(records: &[VerdictRecord]) -> Vec<u8> {
    csv_bytes(
        &strings(&["row", "agent", "neighbor", "method", "score", "orientation", "label"]),
        records.iter().map(|v| {
            vec![
                v.row.to_string(),
                v.agent.to_string(),
                v.neighbor.map(|j| j.to_string()).unwrap_or_default(),
                v.method.clone(),
                fmt_f64(v.score),
                v.orientation.to_string(),
                u8::from(v.label).to_string(),
            ]
        }),
    )
}

/// Generic table writer for the experiment record types.
pub fn table_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    csv_bytes(&strings(header), rows)
}

pub fn cell(v: f64) -> String {
    fmt_f64(v)
}
