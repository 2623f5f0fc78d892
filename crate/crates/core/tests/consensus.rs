use faer::Side;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarm_density::consensus::{build_graph, consensus_error, laplacian, CommGraph, ConsensusState, PiGains};
use swarm_density::suites::ring_static_consensus;
use swarm_density::Error;

fn brute_force_edges(pos: &[[f64; 2]], d: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let r = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
            if r <= d {
                out.push((i, j));
            }
        }
    }
    out
}

fn bfs_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([0]);
    seen[0] = true;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[test]
fn graph_matches_brute_force_on_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for trial in 0..50 {
        let n = rng.random_range(1..120);
        let d = rng.random_range(0.02..0.6);
        let pos: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let g = build_graph(&pos, d, 0.0);
        let expected = brute_force_edges(&pos, d);
        assert_eq!(g.edges().collect::<Vec<_>>(), expected, "trial {trial}");
        assert_eq!(g.is_connected(), bfs_connected(n, &expected), "trial {trial}");
    }
}

#[test]
fn edge_at_exact_radius_is_kept() {
    let g = build_graph(&[[0.0, 0.0], [0.25, 0.0], [0.5001, 0.0]], 0.25, 0.0);
    assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    assert_eq!(g.component_count(), 2);
}

#[test]
fn complete_graph_laplacian_spectrum() {
    let g = CommGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]);
    let l = laplacian(&g).to_dense();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(l[(i, j)], if i == j { 2.0 } else { -1.0 });
        }
    }
    let mut ev = l.self_adjoint_eigenvalues(Side::Lower).unwrap();
    ev.sort_by(f64::total_cmp);
    let expected = [0.0, 3.0, 3.0];
    for (a, b) in ev.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{ev:?}");
    }
}

#[test]
fn ring_static_inputs_converge_to_mean() {
    let run = ring_static_consensus(10, PiGains::default(), 0.1, 100_000).unwrap();
    let settled = run.settling_step(0.01).expect("error never settles below 1% of spread");
    println!(
        "ring consensus within 1% of spread from step {settled} (t = {:.1} s)",
        settled as f64 * 0.1
    );
    assert!(run.max_error[settled..].iter().all(|e| *e < 0.01 * run.input_spread));
    assert!(run.eta_sum_drift <= 1e-9);
}

#[test]
fn consensus_error_matches_direct_difference() {
    let g = CommGraph::ring(10);
    let u: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
    let mut s = ConsensusState::new(&u, PiGains::default()).unwrap();
    for _ in 0..500 {
        s.pi_step(&g, &u, 0.1).unwrap();
    }
    let mean: Vec<f64> = (0..2).map(|k| u.iter().map(|ui| ui[k]).sum::<f64>() / 10.0).collect();
    let cell_area = 0.25;
    let errs = consensus_error(&s, &u, cell_area).unwrap();
    for (i, e) in errs.iter().enumerate() {
        let direct = ((s.estimate(i)[0] - mean[0]).powi(2) + (s.estimate(i)[1] - mean[1]).powi(2)) * cell_area;
        assert!((e - direct.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn tracking_error_scales_with_input_rate() {
    let g = CommGraph::ring(10);
    let amps: Vec<f64> = (0..10).map(|i| 1.0 + 0.3 * i as f64).collect();
    let sup_error = |omega: f64| {
        let inputs = |t: f64| -> Vec<Vec<f64>> { amps.iter().map(|a| vec![a * (omega * t).sin()]).collect() };
        let mut s = ConsensusState::new(&inputs(0.0), PiGains::default()).unwrap();
        let mut worst: f64 = 0.0;
        for k in 1..=4000 {
            let u = inputs(k as f64 * 0.1);
            s.pi_step(&g, &u, 0.1).unwrap();
            worst = worst.max(consensus_error(&s, &u, 1.0).unwrap().into_iter().fold(0.0, f64::max));
        }
        worst
    };
    let e: Vec<f64> = [0.04, 0.02, 0.01].iter().map(|&w| sup_error(w)).collect();
    assert!(e.iter().all(|x| x.is_finite()));
    assert!(e[1] < e[0] && e[2] < e[1], "sup errors {e:?}");
}

#[test]
fn disconnected_components_run_independently() {
    let g = CommGraph::from_edges(4, &[(0, 1), (2, 3)]);
    let u = vec![vec![0.0], vec![2.0], vec![10.0], vec![20.0]];
    let mut s = ConsensusState::new(&u, PiGains::default()).unwrap();
    for _ in 0..200 {
        s.pi_step(&g, &u, 0.1).unwrap();
    }
    // each component's estimate sum relaxes to its input sum at rate alpha
    assert!((s.estimate(0)[0] + s.estimate(1)[0] - 2.0).abs() < 1e-3);
    assert!((s.estimate(2)[0] + s.estimate(3)[0] - 30.0).abs() < 1e-3);
    for _ in 0..30_000 {
        s.pi_step(&g, &u, 0.1).unwrap();
    }
    assert!((s.estimate(0)[0] - 1.0).abs() < 1e-3);
    assert!((s.estimate(1)[0] - 1.0).abs() < 1e-3);
    assert!((s.estimate(3)[0] - 15.0).abs() < 1e-3);
}

#[test]
fn shape_mismatch_is_rejected() {
    let u = vec![vec![0.0, 1.0]; 3];
    let mut s = ConsensusState::new(&u, PiGains::default()).unwrap();
    let g = CommGraph::ring(4);
    assert!(matches!(s.pi_step(&g, &u, 0.1), Err(Error::ShapeMismatch { .. })));
    assert!(ConsensusState::new(&[vec![0.0], vec![0.0, 1.0]], PiGains::default()).is_err());
}

proptest! {
    #[test]
    fn graph_symmetric_and_laplacian_rows_vanish(seed in any::<u64>(), n in 1usize..80, d in 0.01f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let g = build_graph(&pos, d, 0.0);
        for i in 0..n {
            prop_assert!(!g.neighbors(i).contains(&i));
            for &j in g.neighbors(i) {
                prop_assert!(g.neighbors(j).contains(&i));
            }
        }
        let l = laplacian(&g);
        prop_assert!(l.is_symmetric(0.0));
        prop_assert!(l.mul_vec(&vec![1.0; n]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eta_sums_conserved(seed in any::<u64>(), n in 2usize..30, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ConsensusState::new(
            &(0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>(),
            PiGains::default(),
        ).unwrap();
        let eta0 = s.eta_cell_sums();
        for _ in 0..100 {
            // a new graph and new inputs every round
            let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
            let g = build_graph(&pos, 0.4, 0.0);
            let u: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            s.pi_advance(&g, &u, 0.1).unwrap();
        }
        for (a, b) in s.eta_cell_sums().iter().zip(&eta0) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn advance_always_respects_stability(n in 2usize..60, dt in 0.01f64..2.0) {
        let pos: Vec<[f64; 2]> = (0..n).map(|i| [0.001 * i as f64, 0.0]).collect();
        let g = build_graph(&pos, 1.0, 0.0);
        let u = vec![vec![1.0]; n];
        let mut s = ConsensusState::new(&u, PiGains::default()).unwrap();
        let stats = s.pi_advance(&g, &u, dt).unwrap();
        prop_assert!(dt / stats.substeps as f64 <= PiGains::default().safe_dt(g.max_degree()));
    }
}
