use dpsguard_core::datagen::{build_split, examples, fit_scaling, Budget, Placement, Position, Scenario, Split, Task};
use dpsguard_core::eval::roc_curve;
use dpsguard_core::features::{instance_sums, neighborhood_average, tailor_inputs, FeatureKind};
use dpsguard_core::linalg::SquareMatrix;
use dpsguard_core::neural::{init, nd_predict, nl_predict, sigmoid, train, Example, Mlp, TrainConfig};
use dpsguard_core::protocol::{
    attacker_state, convergence_report, generate_problem, project, run_instance, subgradient, AttackConfig,
    ProjectionBox, ProtocolConfig, Trace,
};
use dpsguard_core::rng::rng_from_seed;
use dpsguard_core::score::{Hypothesis, Orientation};
use dpsguard_core::topology::{
    expected_transition_matrix, manhattan_grid, pair_averaging_matrix, sample_gossip_pair,
    second_largest_eigenvalue, small_world,
};
use dpsguard_core::AttackerMask;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn small_world_seed_seven_is_connected_with_eighty_edges() {
    let g = small_world(20, 8, 0.2, &mut rng_from_seed(7)).unwrap();
    let mut seen = vec![false; 20];
    let mut queue = vec![0];
    seen[0] = true;
    while let Some(v) = queue.pop() {
        for &w in g.neighbors(v) {
            if !seen[w] {
                seen[w] = true;
                queue.push(w);
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!((0..20).map(|i| g.degree(i)).sum::<usize>(), 160);
    assert_eq!(g.edge_count(), 80);
}

#[test]
fn gossip_pair_frequencies() {
    let g = manhattan_grid(3, 3).unwrap();
    let mut rng = rng_from_seed(63);
    let draws = 1_000_000;
    let (mut waker0, mut pair01) = (0usize, 0usize);
    for _ in 0..draws {
        let (i, j) = sample_gossip_pair(&g, &mut rng);
        waker0 += (i == 0) as usize;
        pair01 += ((i, j) == (0, 1) || (i, j) == (1, 0)) as usize;
    }
    assert!((waker0 as f64 / draws as f64 - 1.0 / 9.0).abs() <= 0.002);
    assert!((pair01 as f64 / draws as f64 - 2.0 / 36.0).abs() <= 0.002);
}

#[test]
fn expected_matrix_matches_sampled_average() {
    let g = manhattan_grid(3, 3).unwrap();
    let closed = expected_transition_matrix(&g);
    let mut rng = rng_from_seed(86);
    let draws = 100_000;
    let mut acc = vec![0.0; 81];
    for _ in 0..draws {
        let (i, j) = sample_gossip_pair(&g, &mut rng);
        for (a, v) in acc.iter_mut().zip(pair_averaging_matrix(9, i, j).as_slice()) {
            *a += v;
        }
    }
    let mean = SquareMatrix::from_rows(9, acc.into_iter().map(|v| v / draws as f64).collect());
    assert!(mean.max_abs_diff(&closed) <= 0.005);
    for i in 0..9 {
        assert!((closed[(i, i)] - 8.0 / 9.0).abs() < 1e-15);
    }
}

#[test]
fn second_eigenvalue_matches_deflated_power_iteration() {
    let g = manhattan_grid(3, 3).unwrap();
    let m = expected_transition_matrix(&g);
    // Deflate the consensus direction, then iterate on M + I (positive spectrum).
    let n = 9;
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let mv = m.mul_vec(&v);
        let w: Vec<f64> = mv.iter().zip(&v).map(|(a, b)| a + b).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>() - 1.0;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    let lam = second_largest_eigenvalue(&g);
    assert!(lam > 0.0 && lam < 1.0);
    assert!((lam - lambda).abs() < 1e-9, "{lam} vs {lambda}");
}

#[test]
fn subgradient_matches_finite_differences() {
    let mut rng = rng_from_seed(146);
    let problem = generate_problem(9, 3, &mut rng).unwrap();
    for _ in 0..200 {
        let i = rng.gen_range(0..9);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = subgradient(&problem, i, &x).unwrap();
        for c in 0..3 {
            let h = 1e-5;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[c] += h;
            down[c] -= h;
            let fd = (problem.local_value(i, &up) - problem.local_value(i, &down)) / (2.0 * h);
            assert!((fd - g[c]).abs() <= 1e-6 * g[c].abs().max(1.0), "{fd} vs {}", g[c]);
        }
    }
}

#[test]
fn projection_nonexpansive_over_many_pairs() {
    let set = ProjectionBox::default();
    let mut rng = rng_from_seed(155);
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-25.0..25.0)).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-25.0..25.0)).collect();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(d(&project(&x, &set), &project(&y, &set)) <= d(&x, &y) + 1e-12);
    }
}

#[test]
fn attacker_noise_is_zero_mean() {
    let attack = AttackConfig::new(vec![0.2, -0.4], 0.9).unwrap();
    let mut rng = rng_from_seed(164);
    let draws = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..draws {
        let s = attacker_state(&attack, 1, &mut rng);
        sum[0] += s[0];
        sum[1] += s[1];
    }
    assert!((sum[0] / draws as f64 - 0.2).abs() <= 0.01);
    assert!((sum[1] / draws as f64 + 0.4).abs() <= 0.01);
}

fn attacked_distance(seed: u64, iterations: usize) -> f64 {
    let g = manhattan_grid(3, 3).unwrap();
    let mut rng = rng_from_seed(seed);
    let problem = generate_problem(9, 2, &mut rng).unwrap();
    let initial: Vec<f64> = (0..18).map(|_| rng.gen::<f64>()).collect();
    let mask = AttackerMask::from_ids(9, &[0]).unwrap();
    let attack = AttackConfig::new(vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)], second_largest_eigenvalue(&g))
        .unwrap();
    let config = ProtocolConfig {
        iterations,
        ..ProtocolConfig::default()
    };
    let trace = run_instance(&g, &mask, &problem, &initial, &config, Some(&attack), &mut rng).unwrap();
    convergence_report(&trace, &mask, &problem, Some(&attack)).unwrap().distance_to_target.unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[test]
fn attack_distance_shrinks_with_horizon() {
    let medians: Vec<f64> = [500, 1000, 2000]
        .iter()
        .map(|&t| median((0..20).map(|s| attacked_distance(s, t)).collect()))
        .collect();
    assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "{medians:?}");
}

#[test]
fn neighborhood_average_and_sums_match_direct_summation() {
    let mut rng = rng_from_seed(239);
    let (n, d, steps) = (9, 2, 6);
    let states: Vec<f64> = (0..(steps + 1) * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let trace = Trace::from_states(n, d, states.clone(), Vec::new(), 0).unwrap();
    let g = manhattan_grid(3, 3).unwrap();
    let x = |t: usize, a: usize, c: usize| states[(t * n + a) * d + c];
    for i in 0..n {
        let nb = g.neighbors(i);
        let mut group = vec![i];
        group.extend_from_slice(nb);
        for t in 0..=steps {
            let avg = neighborhood_average(&trace, nb, i, t);
            for c in 0..d {
                let mut s = 0.0;
                for &a in &group {
                    s += x(t, a, c);
                }
                assert!((avg[c] - s / 5.0).abs() < 1e-13);
            }
        }
        let sums = instance_sums(&trace, nb, i);
        for (s, &j) in nb.iter().enumerate() {
            let (mut temporal, mut spatial, mut local) = (0.0, 0.0, 0.0);
            for c in 0..d {
                temporal += x(steps, j, c) - x(0, j, c);
                for t in 0..=steps {
                    let mean: f64 = group.iter().map(|&a| x(t, a, c)).sum::<f64>() / 5.0;
                    spatial += x(t, j, c) - mean;
                    local += (x(t, j, c) - x(t, i, c)) - (x(t, i, c) - mean);
                }
            }
            assert!((sums.temporal[s] - temporal).abs() < 1e-12);
            assert!((sums.spatial[s] - spatial).abs() < 1e-12);
            assert!((sums.local[s] - local).abs() < 1e-12);
        }
        assert!((sums.local_self + sums.spatial_self).abs() < 1e-12);
    }
}

#[test]
fn six_neighbors_use_two_overlapping_windows() {
    let values = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let groups = tailor_inputs(&values, 0.0, 4).unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].slots, vec![Some(0), Some(1), Some(2), Some(3)]);
    assert_eq!(groups[1].slots, vec![Some(2), Some(3), Some(4), Some(5)]);
}

fn reference_forward(mlp: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut a = input.to_vec();
    let depth = mlp.layers().len();
    for (h, layer) in mlp.layers().iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = layer.biases[r];
            for (c, ac) in a.iter().enumerate() {
                acc += layer.weights[r * layer.inputs + c] * ac;
            }
            *zr = acc;
        }
        a = if h + 1 == depth {
            z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
    }
    a
}

#[test]
fn forward_matches_reference_arithmetic() {
    let mut rng = rng_from_seed(382);
    for seed in 0..20 {
        let mut mlp = init(&[5, 7, 4, 3], seed).unwrap();
        for b in mlp.layers_mut().iter_mut().flat_map(|l| l.biases.iter_mut()) {
            *b = rng.gen_range(-0.3..0.3);
        }
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for (a, b) in mlp.forward(&input).unwrap().iter().zip(reference_forward(&mlp, &input)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = rng_from_seed(390);
    let mut mlp = init(&[4, 5, 3, 2, 1], 390).unwrap();
    for b in mlp.layers_mut().iter_mut().flat_map(|l| l.biases.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    let batch: Vec<Example> = (0..8)
        .map(|k| Example::new((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(), vec![(k % 2) as f64]))
        .collect();
    let (_, grad) = mlp.loss_and_grad(&batch).unwrap();
    let base = mlp.flat_params();
    let h = 1e-6;
    for (index, analytic) in grad.flat_params().into_iter().enumerate() {
        let mut loss = |delta: f64| {
            let mut p = base.clone();
            p[index] += delta;
            mlp.set_flat_params(&p).unwrap();
            mlp.loss_and_grad(&batch).unwrap().0
        };
        let numeric = (loss(h) - loss(-h)) / (2.0 * h);
        let allowed = (1e-5 * analytic.abs().max(numeric.abs())).max(1e-7);
        assert!((analytic - numeric).abs() <= allowed, "param {index}: {analytic} vs {numeric}");
    }
}

#[test]
fn separable_toy_task_is_learned() {
    let mut rng = rng_from_seed(400);
    let data: Vec<Example> = (0..200)
        .map(|_| {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = if x[0] + 0.5 * x[1] - x[3] > 0.0 { 1.0 } else { 0.0 };
            Example::new(x, vec![y])
        })
        .collect();
    let mut mlp = init(&[4, 200, 100, 50, 1], 400).unwrap();
    let config = TrainConfig {
        learning_rate: 0.1,
        batch_size: 16,
        epochs: 50,
        seed: 400,
    };
    train(&mut mlp, &data, &config).unwrap();
    let correct = data
        .iter()
        .filter(|e| {
            let (_, h) = nd_predict(&mlp, &e.input, 0.5).unwrap();
            (h == Hypothesis::H1) == (e.target[0] == 1.0)
        })
        .count();
    assert!(correct as f64 / 200.0 >= 0.99, "accuracy {}", correct as f64 / 200.0);
}

#[test]
fn one_hot_toy_localizes_the_hot_slot() {
    let mut rng = rng_from_seed(410);
    let data: Vec<Example> = (0..400)
        .map(|_| {
            let hot = rng.gen_range(0..4);
            let x: Vec<f64> = (0..4).map(|s| if s == hot { 0.0 } else { rng.gen_range(0.5..1.5) }).collect();
            let y: Vec<f64> = (0..4).map(|s| (s == hot) as u8 as f64).collect();
            Example::new(x, y)
        })
        .collect();
    let mut mlp = init(&[4, 32, 4], 410).unwrap();
    let config = TrainConfig {
        learning_rate: 0.1,
        batch_size: 16,
        epochs: 60,
        seed: 410,
    };
    train(&mut mlp, &data, &config).unwrap();
    for e in data.iter().take(100) {
        let out = nl_predict(&mlp, &e.input, 0.5, &[true; 4]).unwrap();
        let best = (0..4)
            .max_by(|&a, &b| out[a].unwrap().0.total_cmp(&out[b].unwrap().0))
            .unwrap();
        assert_eq!(e.target[best], 1.0);
    }
}

#[test]
fn saturated_logits_stay_inside_the_unit_interval() {
    for x in [-800.0, -40.0, 0.0, 40.0, 800.0] {
        let p = sigmoid(x);
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn permuted_labels_give_chance_auc() {
    let mut rng = rng_from_seed(584);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
    let mut labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
    labels.shuffle(&mut rng);
    let auc = roc_curve(&scores, &labels, Orientation::GreaterIsH1).unwrap().auc;
    assert!((auc - 0.5).abs() <= 0.02, "{auc}");
}

#[test]
fn detection_loss_falls_over_the_first_epochs() {
    let g = manhattan_grid(3, 3).unwrap();
    let placement = Placement::Random {
        attackers: 0,
        position: Position::None,
    };
    let protocol = ProtocolConfig {
        instances: 2,
        ..ProtocolConfig::default()
    };
    let scenario = Scenario::new(g, placement, protocol).unwrap();
    let rows = build_split(&scenario, &Budget::desk(), Task::Nd, 418, Split::Train).unwrap();
    let scaling = fit_scaling(&rows.rows, FeatureKind::Spatial, 2).unwrap();
    let data = examples(&rows.rows, Task::Nd, FeatureKind::Spatial, 2, 4, &scaling).unwrap();
    let drops: Vec<f64> = (0..5)
        .map(|seed| {
            let mut mlp = init(&[4, 200, 100, 50, 1], seed).unwrap();
            let config = TrainConfig {
                epochs: 5,
                seed,
                ..TrainConfig::default()
            };
            let losses = train(&mut mlp, &data, &config).unwrap();
            losses[0] - losses[4]
        })
        .collect();
    assert!(median(drops.clone()) > 0.0, "{drops:?}");
}
