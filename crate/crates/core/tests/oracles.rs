//! Algorithm steps checked against independent straight-line and dense
//! linear-algebra computations.

use blocksona::algorithm::{
    communication_step, optimization_step, run, run_observed, AgentState, DistributedProblem, RunOptions,
    SmoothNetworkProblem, SurrogateFamily,
};
use blocksona::block_consensus::{build_block_weights, consensus_step, BlockLayout, BlockSchedule, ScheduleRule};
use blocksona::prox::{BlockRegularizer, BoxSet};
use blocksona::surrogates::{Objective, SolverOptions};
use blocksona::topology::{build_column_stochastic, generate_connected_erdos_renyi, Digraph};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `sum_k a_k (x_k - c_k)^2`
struct DiagQuadratic {
    a: Vec<f64>,
    c: Vec<f64>,
}

impl Objective for DiagQuadratic {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        (0..x.len()).map(|k| self.a[k] * (x[k] - self.c[k]).powi(2)).sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = 2.0 * self.a[k] * (x[k] - self.c[k]);
        }
    }
}

/// `0.5 x^T Q x + c^T x`
struct Quadratic {
    q: DMatrix<f64>,
    c: DVector<f64>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.q * &x)) + self.c.dot(&x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let g = &self.q * DVector::from_column_slice(x) + &self.c;
        out.copy_from_slice(g.as_slice());
    }

    fn block_hessian(&self, _x: &[f64], range: std::ops::Range<usize>) -> Option<DMatrix<f64>> {
        Some(self.q.view((range.start, range.start), (range.len(), range.len())).clone_owned())
    }
}

fn line_graph() -> Digraph {
    Digraph::new(3, [(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap()
}

#[test]
fn ring_consensus_matches_matrix_powers() {
    let ring = Digraph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
    let base = build_column_stochastic(&ring);

    // Oracle: powers of the dense base matrix applied to the mass and weight vectors.
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(base.get(i, j), a[(i, j)]);
        }
    }
    let x0 = DVector::from_column_slice(&[0.0, 3.0, 6.0]);
    let phi0 = DVector::from_element(3, 1.0);
    let power = a.pow(200);
    let oracle = (&power * x0.component_mul(&phi0)).component_div(&(&power * &phi0));

    let mut weights = vec![1.0; 3];
    let mut values = vec![vec![0.0], vec![3.0], vec![6.0]];
    let w = build_block_weights(&ring, &base, &[0, 0, 0], 0);
    for _ in 0..200 {
        let (nw, nv) = consensus_step(&weights, &values, &w).unwrap();
        weights = nw;
        values = nv;
    }
    for i in 0..3 {
        assert!((values[i][0] - 3.0).abs() < 1e-10);
        assert!((oracle[i] - 3.0).abs() < 1e-10);
    }
}

#[test]
fn one_iteration_on_a_line_matches_straight_line_evaluation() {
    let a = [[1.0, 2.0], [0.5, 1.5], [3.0, 0.25]];
    let c = [[1.0, -2.0], [0.5, 4.0], [-1.0, 2.0]];
    let problem = SmoothNetworkProblem {
        costs: (0..3).map(|i| Box::new(DiagQuadratic { a: a[i].to_vec(), c: c[i].to_vec() }) as Box<dyn Objective>).collect(),
        layout: BlockLayout::new(2, 1).unwrap(),
        set: BoxSet::unbounded(),
        regularizer: BlockRegularizer::Zero,
        family: SurrogateFamily::ProxLinear,
        tau: 1.0,
    };
    let graph = line_graph();
    let base = build_column_stochastic(&graph);
    let gamma = 0.5;
    let n = 3.0;

    // Straight-line evaluation.
    let grad = |i: usize, x: [f64; 2]| [2.0 * a[i][0] * (x[0] - c[i][0]), 2.0 * a[i][1] * (x[1] - c[i][1])];
    let x0 = [[0.0; 2]; 3];
    let y0: Vec<[f64; 2]> = (0..3).map(|i| grad(i, x0[i])).collect();
    let pi0: Vec<[f64; 2]> = y0.iter().map(|y| [(n - 1.0) * y[0], (n - 1.0) * y[1]]).collect();
    let sel = [0usize, 1, 0];
    let mut v = x0;
    for i in 0..3 {
        let l = sel[i];
        // Prox-linear with tau = 1: minimizer of g w + pi w + (w - x)^2.
        let x_hat = x0[i][l] - (y0[i][l] + pi0[i][l]) / 2.0;
        v[i][l] = x0[i][l] + gamma * (x_hat - x0[i][l]);
    }
    // Base weights: out-degrees (self included) are 2, 3, 2.
    let at = [[0.5, 1.0 / 3.0, 0.0], [0.5, 1.0 / 3.0, 0.5], [0.0, 1.0 / 3.0, 0.5]];
    let weight = |i: usize, j: usize, l: usize| {
        if sel[j] == l {
            at[i][j]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    };
    let mut phi = [[0.0; 2]; 3];
    let mut x1 = [[0.0; 2]; 3];
    let mut ymass = [[0.0; 2]; 3];
    for i in 0..3 {
        for l in 0..2 {
            for j in 0..3 {
                let w = weight(i, j, l);
                phi[i][l] += w;
                x1[i][l] += w * v[j][l];
                ymass[i][l] += w * y0[j][l];
            }
            x1[i][l] /= phi[i][l];
        }
    }
    let mut y1 = [[0.0; 2]; 3];
    let mut pi1 = [[0.0; 2]; 3];
    for i in 0..3 {
        let g1 = grad(i, x1[i]);
        let g0 = grad(i, x0[i]);
        for l in 0..2 {
            y1[i][l] = (ymass[i][l] + g1[l] - g0[l]) / phi[i][l];
            pi1[i][l] = n * y1[i][l] - g1[l];
        }
    }

    // Library.
    let mut states: Vec<AgentState> = (0..3).map(|i| AgentState::initial(&problem, i, vec![0.0; 2])).collect();
    for i in 0..3 {
        optimization_step(&problem, i, &mut states[i], sel[i], gamma, &SolverOptions::default()).unwrap();
        assert_eq!(states[i].v, v[i].to_vec());
    }
    let traffic = communication_step(&problem, &graph, &base, &mut states, &sel).unwrap();
    assert_eq!(traffic.messages, 4);
    assert_eq!(traffic.reals, 4 * 3);
    for i in 0..3 {
        for l in 0..2 {
            let close = |p: f64, q: f64| (p - q).abs() <= 1e-14 * (1.0 + q.abs());
            assert!(close(states[i].phi[l], phi[i][l]), "phi {i} {l}");
            assert!(close(states[i].x[l], x1[i][l]), "x {i} {l}");
            assert!(close(states[i].y[l], y1[i][l]), "y {i} {l}");
            assert!(close(states[i].pi[l], pi1[i][l]), "pi {i} {l}");
        }
    }
}

fn random_quadratic(m: usize, rng: &mut ChaCha8Rng) -> Quadratic {
    let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    Quadratic { q: g.transpose() * &g / m as f64 + DMatrix::identity(m, m) * 0.1, c: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)) }
}

fn quadratic_network(family: SurrogateFamily, seed: u64) -> (SmoothNetworkProblem, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 8;
    let costs: Vec<Quadratic> = (0..6).map(|_| random_quadratic(m, &mut rng)).collect();
    let q: DMatrix<f64> = costs.iter().map(|c| c.q.clone()).fold(DMatrix::zeros(m, m), |a, b| a + b);
    let lin: DVector<f64> = costs.iter().map(|c| c.c.clone()).fold(DVector::zeros(m), |a, b| a + b);
    let minimizer = q.lu().solve(&(-lin)).unwrap();
    let problem = SmoothNetworkProblem {
        costs: costs.into_iter().map(|c| Box::new(c) as Box<dyn Objective>).collect(),
        layout: BlockLayout::new(4, 2).unwrap(),
        set: BoxSet::new(-1e3, 1e3),
        regularizer: BlockRegularizer::Zero,
        family,
        tau: 1.0,
    };
    (problem, minimizer)
}

#[test]
fn convex_quadratic_network_reaches_centralized_minimizer() {
    for family in [SurrogateFamily::ProxLinear, SurrogateFamily::SecondOrder, SurrogateFamily::PartialConvexity] {
        let (problem, minimizer) = quadratic_network(family, 3);
        let (graph, _) = generate_connected_erdos_renyi(6, 0.5, 4).unwrap();
        let opts = RunOptions { max_iterations: 3000, tolerance: Some(1e-9), ..RunOptions::default() };
        let mut z = Vec::new();
        run_observed(&problem, &graph, BlockSchedule::new(ScheduleRule::ShiftedRoundRobin, 4), &opts, |sim| {
            z = sim.z_bar();
        })
        .unwrap();
        let err = z.iter().zip(minimizer.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "{family:?}: {err}");
    }
}

#[test]
fn single_agent_reduces_to_centralized_sca() {
    let problem = SmoothNetworkProblem {
        costs: vec![Box::new(DiagQuadratic { a: vec![1.0, 2.0, 0.5, 1.0], c: vec![1.0, 2.0, 3.0, 4.0] })],
        layout: BlockLayout::new(2, 2).unwrap(),
        set: BoxSet::unbounded(),
        regularizer: BlockRegularizer::Zero,
        family: SurrogateFamily::ProxLinear,
        tau: 1.0,
    };
    let graph = Digraph::new(1, std::iter::empty()).unwrap();
    let base = build_column_stochastic(&graph);
    let mut states = vec![AgentState::initial(&problem, 0, vec![0.0; 4])];
    assert_eq!(states[0].pi, vec![0.0; 4]);
    optimization_step(&problem, 0, &mut states[0], 1, 0.7, &SolverOptions::default()).unwrap();
    let v = states[0].v.clone();
    let traffic = communication_step(&problem, &graph, &base, &mut states, &[1]).unwrap();
    assert_eq!(traffic.messages, 0);
    let s = &states[0];
    assert_eq!(s.x, v);
    assert_eq!(s.phi, vec![1.0, 1.0]);
    let mut g = vec![0.0; 4];
    problem.local_gradient(0, &s.x, &mut g);
    assert_eq!(s.y, g);
    assert!(s.pi.iter().all(|p| *p == 0.0));
}

#[test]
fn optimization_step_extremes() {
    let problem = SmoothNetworkProblem {
        costs: vec![
            Box::new(DiagQuadratic { a: vec![1.0, 1.0], c: vec![1.0, -1.0] }),
            Box::new(DiagQuadratic { a: vec![2.0, 1.0], c: vec![0.0, 3.0] }),
        ],
        layout: BlockLayout::new(2, 1).unwrap(),
        set: BoxSet::unbounded(),
        regularizer: BlockRegularizer::Zero,
        family: SurrogateFamily::PartialConvexity,
        tau: 0.5,
    };
    let solver = SolverOptions::default();
    let initial = AgentState::initial(&problem, 0, vec![0.25, 0.5]);

    let mut s = initial.clone();
    optimization_step(&problem, 0, &mut s, 0, 0.0, &solver).unwrap();
    assert_eq!(s.v, s.x);

    // gamma = 1 lands on the surrogate minimizer: 2(w - 1) + 2 * 0.5 (w - x) + pi = 0.
    let mut s = initial.clone();
    optimization_step(&problem, 0, &mut s, 0, 1.0, &solver).unwrap();
    let expected = (2.0 + 1.0 * 0.25 - initial.pi[0]) / 3.0;
    assert!((s.v[0] - expected).abs() < 1e-9);
    assert_eq!(s.v[1], 0.5);

    // Block-stationary point: pi cancels the local gradient and x is its own minimizer.
    let mut s = initial.clone();
    let mut g = vec![0.0; 2];
    problem.local_gradient(0, &s.x, &mut g);
    s.pi = g.iter().map(|v| -v).collect();
    optimization_step(&problem, 0, &mut s, 1, 0.8, &solver).unwrap();
    assert!((s.v[1] - s.x[1]).abs() < 1e-9);
}

#[test]
fn identical_agents_stay_identical() {
    let cost = || Box::new(DiagQuadratic { a: vec![1.0, 2.0, 3.0, 4.0], c: vec![1.0, 0.0, -1.0, 2.0] }) as Box<dyn Objective>;
    let problem = SmoothNetworkProblem {
        costs: (0..4).map(|_| cost()).collect(),
        layout: BlockLayout::new(2, 2).unwrap(),
        set: BoxSet::new(-5.0, 5.0),
        regularizer: BlockRegularizer::L1 { weight: 0.1 },
        family: SurrogateFamily::ProxLinear,
        tau: 1.0,
    };
    let graph = Digraph::new(4, (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))).unwrap();
    run_observed(&problem, &graph, BlockSchedule::new(ScheduleRule::RoundRobin, 2), &RunOptions { max_iterations: 30, ..RunOptions::default() }, |sim| {
        let first = &sim.states()[0];
        for s in sim.states() {
            assert_eq!(s, first);
        }
    })
    .unwrap();
}

#[test]
fn single_block_uses_the_base_matrix_every_iteration() {
    let (graph, _) = generate_connected_erdos_renyi(7, 0.4, 9).unwrap();
    let base = build_column_stochastic(&graph);
    let schedule = BlockSchedule::new(ScheduleRule::ShiftedRoundRobin, 1);
    for t in 0..5 {
        let w = build_block_weights(&graph, &base, &schedule.selections(7, t), 0).to_dense();
        assert_eq!(&w, base.entries());
    }
}

#[test]
fn message_accounting_is_block_sized() {
    let (problem, _) = quadratic_network(SurrogateFamily::ProxLinear, 1);
    let (graph, _) = generate_connected_erdos_renyi(6, 0.5, 2).unwrap();
    let log = run(&problem, &graph, BlockSchedule::new(ScheduleRule::ShiftedRoundRobin, 4), &RunOptions { max_iterations: 10, ..RunOptions::default() }).unwrap();
    let e = graph.edge_count() as u64;
    for (t, r) in log.rows.iter().enumerate() {
        assert_eq!(r.msgs, t as u64 * e);
        assert_eq!(r.reals_tx, t as u64 * e * (2 * 2 + 1));
    }
}
