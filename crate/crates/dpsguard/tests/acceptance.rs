//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails. `ACCEPTANCE_ONLY=1,6,13` limits
//! the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dpsguard::artifacts::ArtifactWriter;
use dpsguard::core::datagen::Task;
use dpsguard::core::eval::{mann_whitney, roc_curve};
use dpsguard::core::features::{sd_aggregates, spatial_scores, temporal_scores};
use dpsguard::core::linalg::SquareMatrix;
use dpsguard::core::neural::{init, Example};
use dpsguard::core::protocol::Trace;
use dpsguard::core::rng::rng_from_seed;
use dpsguard::core::score::{sd_detection_score, sd_localization_scores, td_detection_score, Orientation};
use dpsguard::core::topology::{
    expected_transition_matrix, manhattan_grid, pair_averaging_matrix, sample_gossip_pair, GraphKind,
};
use dpsguard::core::Graph;
use dpsguard::experiments::{median, run_family, FamilyReport, Query};
use dpsguard::spec::{ExperimentSpec, Family};
use rand::Rng;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

type Outcome = Result<(bool, String), String>;

fn run_family_in_temp(spec: &ExperimentSpec) -> Result<FamilyReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut out = ArtifactWriter::new(dir.path()).map_err(|e| e.to_string())?;
    run_family(spec, &mut out).map_err(|e| e.to_string())
}

fn desk(family: Family) -> ExperimentSpec {
    ExperimentSpec::for_family(family)
}

fn q<'a>(setting: &'a str, detector: &'a str, task: Task, k: usize, d: usize) -> Query<'a> {
    Query {
        setting: Some(setting),
        detector: Some(detector),
        task: Some(task),
        instances: Some(k),
        d: Some(d),
    }
}

fn med(report: &FamilyReport, query: Query<'_>) -> Result<f64, String> {
    report
        .median_auc(query)
        .ok_or_else(|| format!("no records for {query:?}"))
}

// ---------------------------------------------------------------- 1, 2

fn converge_report() -> Result<(FamilyReport, f64), String> {
    let spec = desk(Family::Converge);
    let start = Instant::now();
    let report = run_family_in_temp(&spec)?;
    let per_run = start.elapsed().as_secs_f64() / (2 * spec.repetitions) as f64;
    Ok((report, per_run))
}

fn criterion_1(report: &FamilyReport, per_run: f64) -> Outcome {
    let clean: Vec<_> = report.convergence.iter().filter(|c| !c.attacked).collect();
    let gap = median(&mut clean.iter().map(|c| c.objective_gap).collect::<Vec<_>>()).ok_or("no runs")?;
    let dis = median(&mut clean.iter().map(|c| c.disagreement).collect::<Vec<_>>()).ok_or("no runs")?;
    Ok((
        clean.len() == 10 && gap <= 1e-2 && dis <= 0.05 && per_run <= 5.0,
        format!(
            "median gap {gap:.3e} (<= 1e-2), median disagreement {dis:.3e} (<= 0.05), {per_run:.3} s per run, {} seeds",
            clean.len()
        ),
    ))
}

fn criterion_2(report: &FamilyReport) -> Outcome {
    let mut dist: Vec<f64> = report
        .convergence
        .iter()
        .filter(|c| c.attacked)
        .filter_map(|c| c.distance_to_target)
        .collect();
    let n = dist.len();
    let m = median(&mut dist).ok_or("no runs")?;
    Ok((
        n == 10 && m <= 0.05,
        format!("median max_i |x_i(T) - alpha| = {m:.4} (<= 0.05), {n} seeds; per-seed {dist:.4?}"),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let g = manhattan_grid(3, 3).map_err(|e| e.to_string())?;
    let n = g.n();
    let closed = expected_transition_matrix(&g);
    let mut rng = rng_from_seed(3);
    let draws = 100_000;
    let mut acc = vec![0.0; n * n];
    for _ in 0..draws {
        let (i, j) = sample_gossip_pair(&g, &mut rng);
        for (a, v) in acc.iter_mut().zip(pair_averaging_matrix(n, i, j).as_slice()) {
            *a += v;
        }
    }
    let empirical = SquareMatrix::from_rows(n, acc.iter().map(|v| v / draws as f64).collect());
    let dev = empirical.max_abs_diff(&closed);
    let mut stoch: f64 = 0.0;
    for i in 0..n {
        let row: f64 = closed.row(i).iter().sum();
        let col: f64 = (0..n).map(|r| closed.row(r)[i]).sum();
        stoch = stoch.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    Ok((
        dev <= 0.005 && stoch <= 1e-12,
        format!("max entrywise |mean - E[A]| = {dev:.5} (<= 0.005), doubly stochastic to {stoch:.1e}"),
    ))
}

// ---------------------------------------------------------------- 4

/// Brute-force statistics for monitor `i` straight from the state arrays.
struct Brute {
    xi: Vec<f64>,
    chi: Vec<f64>,
    sd_detect: f64,
    sd_localize: Vec<f64>,
}

fn brute_force(traces: &[Vec<Vec<Vec<f64>>>], neighbors: &[usize], i: usize, d: usize) -> Brute {
    let k = traces.len() as f64;
    let scale = 1.0 / (k * d as f64);
    let mut xi = vec![0.0; neighbors.len()];
    let mut chi = vec![0.0; neighbors.len()];
    let mut loc = vec![0.0; neighbors.len()];
    for x in traces {
        let last = x.len() - 1;
        let mut group = vec![i];
        group.extend_from_slice(neighbors);
        for (s, &j) in neighbors.iter().enumerate() {
            for c in 0..d {
                xi[s] += scale * (x[last][j][c] - x[0][j][c]);
            }
        }
        for t in 0..x.len() {
            for c in 0..d {
                let mean: f64 = group.iter().map(|&a| x[t][a][c]).sum::<f64>() / group.len() as f64;
                let own_dev = x[t][i][c] - mean;
                for (s, &j) in neighbors.iter().enumerate() {
                    chi[s] += scale * (x[t][j][c] - mean);
                    loc[s] += scale * ((x[t][j][c] - x[t][i][c]) - own_dev);
                }
            }
        }
    }
    let sd_detect = chi.iter().map(|v| v * v).sum::<f64>() / chi.len() as f64;
    Brute {
        xi,
        sd_detect,
        sd_localize: loc.iter().map(|v| v * v).collect(),
        chi,
    }
}

fn criterion_4() -> Outcome {
    let g = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)], GraphKind::Custom).map_err(|e| e.to_string())?;
    let path = Graph::from_edges(3, &[(0, 1), (1, 2)], GraphKind::Custom).map_err(|e| e.to_string())?;
    let (n, d, t_max) = (3usize, 1usize, 2usize);
    // x[k][t][agent][coord], hand-picked values.
    let raw: [[[f64; 3]; 3]; 2] = [
        [[0.1, 0.7, -0.3], [0.25, 0.5, -0.1], [0.3, 0.45, 0.05]],
        [[1.0, -0.5, 0.2], [0.6, -0.2, 0.2], [0.55, 0.1, 0.3]],
    ];
    let nested: Vec<Vec<Vec<Vec<f64>>>> = raw
        .iter()
        .map(|k| k.iter().map(|t| t.iter().map(|&v| vec![v]).collect()).collect())
        .collect();
    let traces: Vec<Trace> = raw
        .iter()
        .enumerate()
        .map(|(k, inst)| {
            let flat: Vec<f64> = inst.iter().flatten().copied().collect();
            Trace::from_states(n, d, flat, Vec::new(), k).unwrap()
        })
        .collect();
    assert_eq!(traces[0].iterations(), t_max);
    let mut worst: f64 = 0.0;
    for graph in [&g, &path] {
        for i in 0..n {
            let nb = graph.neighbors(i).to_vec();
            let b = brute_force(&nested, &nb, i, d);
            let ts = temporal_scores(&traces, graph, i).map_err(|e| e.to_string())?;
            let ss = spatial_scores(&traces, graph, i).map_err(|e| e.to_string())?;
            let agg = sd_aggregates(&traces, graph, i).map_err(|e| e.to_string())?;
            let td_mine = td_detection_score(&ts.values).map_err(|e| e.to_string())?;
            let mean = b.xi.iter().sum::<f64>() / b.xi.len() as f64;
            let td_brute = b.xi.iter().map(|v| (v - mean).abs()).sum::<f64>() / b.xi.len() as f64;
            let sd_mine = sd_detection_score(&agg, 2, d).map_err(|e| e.to_string())?;
            let loc_mine = sd_localization_scores(&agg, 2, d).map_err(|e| e.to_string())?;
            let diffs = ts
                .values
                .iter()
                .zip(&b.xi)
                .chain(ss.values.iter().zip(&b.chi))
                .chain(loc_mine.iter().zip(&b.sd_localize))
                .map(|(a, b)| (a - b).abs())
                .chain([(td_mine - td_brute).abs(), (sd_mine - b.sd_detect).abs()]);
            for v in diffs {
                worst = worst.max(v);
            }
        }
    }
    Ok((worst <= 1e-12, format!("max |library - brute force| = {worst:.2e} (<= 1e-12) over 6 monitors")))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = rng_from_seed(5);
    let mut worst_excess: f64 = f64::NEG_INFINITY;
    let mut failures = 0;
    let h = 1e-6;
    for probe in 0..100 {
        let mut mlp = init(&[4, 5, 3, 2, 1], 100 + probe / 10).map_err(|e| e.to_string())?;
        for b in mlp.layers_mut().iter_mut().flat_map(|l| l.biases.iter_mut()) {
            *b = rng.gen_range(-0.5..0.5);
        }
        let batch: Vec<Example> = (0..6)
            .map(|_| {
                Example::new(
                    (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    vec![if rng.gen::<bool>() { 1.0 } else { 0.0 }],
                )
            })
            .collect();
        let (_, grad) = mlp.loss_and_grad(&batch).map_err(|e| e.to_string())?;
        let index = rng.gen_range(0..mlp.num_params());
        let analytic = grad.flat_params()[index];
        let base = mlp.flat_params();
        let loss_at = |delta: f64| -> Result<f64, String> {
            let mut m = mlp.clone();
            let mut p = base.clone();
            p[index] += delta;
            m.set_flat_params(&p).map_err(|e| e.to_string())?;
            Ok(m.loss_and_grad(&batch).map_err(|e| e.to_string())?.0)
        };
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        let err = (analytic - numeric).abs();
        let allowed = (1e-5 * analytic.abs().max(numeric.abs())).max(1e-7);
        worst_excess = worst_excess.max(err / allowed);
        if err > allowed {
            failures += 1;
        }
    }
    Ok((
        failures == 0,
        format!("100 probes on [4,5,3,2,1], {failures} outside tolerance, worst error/allowance {worst_excess:.3}"),
    ))
}

// ---------------------------------------------------------------- 6, 7

fn criterion_6(r: &FamilyReport) -> Vec<(&'static str, Outcome)> {
    let get = |det: &str, task: Task, k: usize| med(r, q("manhattan", det, task, k, 2));
    let a = (|| {
        let (nn, td) = (get("tdnn", Task::Nd, 5)?, get("td", Task::Nd, 5)?);
        Ok((nn >= td + 0.02, format!("AUC(TDNN,K=5) {nn:.4} >= AUC(TD,K=5) {td:.4} + 0.02")))
    })();
    let b = (|| {
        let (sd2, td5, td2) = (get("sd", Task::Nd, 2)?, get("td", Task::Nd, 5)?, get("td", Task::Nd, 2)?);
        let tdnn = get("tdnn", Task::Nd, 5)?;
        Ok((
            sd2 >= td5 - 0.02 && sd2 >= td2 + 0.05,
            format!(
                "AUC(SD,K=2) {sd2:.4} >= AUC(TD,K=5) {td5:.4} - 0.02 and >= AUC(TD,K=2) {td2:.4} + 0.05 (TDNN K=5: {tdnn:.4})"
            ),
        ))
    })();
    let c = (|| {
        let v = get("sdnn", Task::Nl, 2)?;
        Ok((v >= 0.99, format!("AUC(SDNN NL,K=2, oracle ND) {v:.4} >= 0.99")))
    })();
    let d = (|| {
        let mut ok = true;
        let mut text = Vec::new();
        for task in [Task::Nd, Task::Nl] {
            let (k1, k2, k5) = (get("td", task, 1)?, get("td", task, 2)?, get("td", task, 5)?);
            ok &= k5 >= k2 - 0.01 && k2 >= k1 - 0.01;
            text.push(format!("{}: K=5 {k5:.4} >= K=2 {k2:.4} >= K=1 {k1:.4}", task.as_str()));
        }
        Ok((ok, format!("TD {} (-0.01 allowance)", text.join("; "))))
    })();
    vec![("6a", a), ("6b", b), ("6c", c), ("6d", d)]
}

fn criterion_7(r: &FamilyReport) -> Outcome {
    let mut ok = true;
    let mut text = Vec::new();
    for task in [Task::Nd, Task::Nl] {
        let k2d1 = med(r, q("manhattan", "td", task, 2, 1))?;
        let k1d2 = med(r, q("manhattan", "td", task, 1, 2))?;
        ok &= (k2d1 - k1d2).abs() <= 0.03;
        text.push(format!("{}: (K=2,d=1) {k2d1:.4} vs (K=1,d=2) {k1d2:.4}", task.as_str()));
    }
    Ok((ok, format!("TD {} (|diff| <= 0.03)", text.join("; "))))
}

// ---------------------------------------------------------------- 8, 9

fn criterion_8(r: &FamilyReport) -> Outcome {
    let col = med(r, q("case1", "collaborative", Task::Nd, 1, 2))?;
    let iso = med(r, q("case1", "isolated", Task::Nd, 1, 2))?;
    let col_nl = med(r, q("case1", "collaborative", Task::Nl, 1, 2))?;
    let iso_nl = med(r, q("case1", "isolated", Task::Nl, 1, 2))?;
    let mut gains: Vec<f64> = r
        .aucs(q("case1", "collaborative", Task::Nd, 1, 2))
        .iter()
        .zip(r.aucs(q("case1", "isolated", Task::Nd, 1, 2)))
        .map(|(c, i)| c - i)
        .collect();
    let paired = median(&mut gains).unwrap_or(f64::NAN);
    Ok((
        col >= iso + 0.05,
        format!(
            "starved agent ND: collaborative {col:.4} >= isolated {iso:.4} + 0.05 (median paired gain {paired:.4}; NL: {col_nl:.4} vs {iso_nl:.4})"
        ),
    ))
}

fn criterion_9(r: &FamilyReport) -> Outcome {
    let g = |setting: &str, det: &str| med(r, q(setting, det, Task::Nd, 1, 2));
    let (next, far) = ("case2_test_next_to", "case2_test_far_from");
    // Agent 0 trained on next-to attacks, agent 1 on far-from attacks.
    let mis_far = (g(far, "collaborative@0")?, g(far, "independent@0")?);
    let mis_next = (g(next, "collaborative@1")?, g(next, "independent@1")?);
    let mat_next = (g(next, "collaborative@0")?, g(next, "independent@0")?);
    let mat_far = (g(far, "collaborative@1")?, g(far, "independent@1")?);
    let ok = mis_far.0 >= mis_far.1
        && mis_next.0 >= mis_next.1
        && mat_next.0 >= mat_next.1 - 0.03
        && mat_far.0 >= mat_far.1 - 0.03;
    Ok((
        ok,
        format!(
            "mismatched: far-from test {:.4} >= {:.4}, next-to test {:.4} >= {:.4}; matched: next-to {:.4} >= {:.4} - 0.03, far-from {:.4} >= {:.4} - 0.03",
            mis_far.0, mis_far.1, mis_next.0, mis_next.1, mat_next.0, mat_next.1, mat_far.0, mat_far.1
        ),
    ))
}

// ---------------------------------------------------------------- 10, 11

fn criterion_10(r: &FamilyReport) -> Outcome {
    let mut ok = true;
    let mut text = Vec::new();
    for task in [Task::Nd, Task::Nl] {
        let base = med(r, q("p0", "sdnn", task, 2, 2))?;
        let mut parts = vec![format!("p=0 {base:.4}")];
        for p in ["p1", "p2"] {
            let v = med(r, q(p, "sdnn", task, 2, 2))?;
            ok &= (v - base).abs() <= 0.05;
            parts.push(format!("{}={} {v:.4}", &p[..1], &p[1..]));
        }
        text.push(format!("{}: {}", task.as_str(), parts.join(", ")));
    }
    Ok((ok, format!("SDNN {} (within 0.05 of p=0)", text.join("; "))))
}

fn criterion_11(r: &FamilyReport) -> Outcome {
    let mut ok = true;
    let mut text = Vec::new();
    for (det, k) in [("tdnn", 5), ("sdnn", 2)] {
        for task in [Task::Nd, Task::Nl] {
            let s = |law: &str| med(r, q(law, det, task, k, 2));
            let (s0, s1, s2) = (s("S0")?, s("S1")?, s("S2")?);
            ok &= s1 >= s0 - 0.02 && s0 >= s2 - 0.02;
            text.push(format!("{det} {}: S1 {s1:.4} >= S0 {s0:.4} >= S2 {s2:.4}", task.as_str()));
        }
    }
    Ok((ok, format!("{} (-0.02 allowance)", text.join("; "))))
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    let mut rng = rng_from_seed(12);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let len = rng.gen_range(2..=500);
        let levels = if trial % 2 == 0 { 7 } else { 1_000_000 };
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..len).map(|_| rng.gen::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        for orientation in [Orientation::GreaterIsH1, Orientation::SmallerIsH1] {
            let curve = roc_curve(&scores, &labels, orientation).map_err(|e| e.to_string())?;
            let mw = mann_whitney(&scores, &labels, orientation).map_err(|e| e.to_string())?;
            worst = worst.max((curve.auc - mw).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |trapezoid AUC - Mann-Whitney| = {worst:.2e} over 400 curves (<= 1e-12)")))
}

// ---------------------------------------------------------------- 13

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn criterion_13() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for family in Family::ALL {
        let spec = ExperimentSpec::from_json(
            &format!(
                r#"{{"family": "{family}", "repetitions": 1, "scale": 0.01,
                    "protocol": {{"iterations": 100}}, "training": {{"epochs": 2}},
                    "gossip": {{"rounds": 3}}}}"#
            ),
            Path::new("tiny"),
        )
        .map_err(|e| e.to_string())?;
        let mut trees = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut out = ArtifactWriter::new(dir.path()).map_err(|e| e.to_string())?;
            run_family(&spec, &mut out).map_err(|e| e.to_string())?;
            out.finish("experiment", &spec.digest()).map_err(|e| e.to_string())?;
            trees.push(read_tree(dir.path()));
        }
        let same = trees[0] == trees[1];
        ok &= same && !trees[0].is_empty();
        notes.push(format!("{family} {} files {}", trees[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    Ok((ok, notes.join(", ")))
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|v| v.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().map_or(true, |o| o.iter().any(|v| v == id));
    let start = Instant::now();
    let mut lines: Vec<Line> = Vec::new();
    let push = |lines: &mut Vec<Line>, id: &'static str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {id:>3}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        lines.push(Line { id, pass, detail });
    };

    if wanted("1") || wanted("2") {
        match converge_report() {
            Ok((r, per_run)) => {
                push(&mut lines, "1", criterion_1(&r, per_run));
                push(&mut lines, "2", criterion_2(&r));
            }
            Err(e) => {
                push(&mut lines, "1", Err(e.clone()));
                push(&mut lines, "2", Err(e));
            }
        }
    }
    if wanted("3") {
        push(&mut lines, "3", criterion_3());
    }
    if wanted("4") {
        push(&mut lines, "4", criterion_4());
    }
    if wanted("5") {
        push(&mut lines, "5", criterion_5());
    }
    if wanted("6") || wanted("7") {
        match run_family_in_temp(&desk(Family::OneAttacker)) {
            Ok(r) => {
                for (id, o) in criterion_6(&r) {
                    push(&mut lines, id, o);
                }
                push(&mut lines, "7", criterion_7(&r));
            }
            Err(e) => push(&mut lines, "6", Err(e)),
        }
    }
    if wanted("8") || wanted("9") {
        match run_family_in_temp(&desk(Family::GossipLearning)) {
            Ok(r) => {
                push(&mut lines, "8", criterion_8(&r));
                push(&mut lines, "9", criterion_9(&r));
            }
            Err(e) => push(&mut lines, "8", Err(e)),
        }
    }
    if wanted("10") {
        let o = run_family_in_temp(&desk(Family::DegreeTailor)).and_then(|r| criterion_10(&r));
        push(&mut lines, "10", o);
    }
    if wanted("11") {
        let o = run_family_in_temp(&desk(Family::Mismatch)).and_then(|r| criterion_11(&r));
        push(&mut lines, "11", o);
    }
    if wanted("12") {
        push(&mut lines, "12", criterion_12());
    }
    if wanted("13") {
        push(&mut lines, "13", criterion_13());
    }

    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} s",
        lines.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for l in &failed {
            eprintln!("failed criterion {}: {}", l.id, l.detail);
        }
        std::process::exit(1);
    }
}
