//! Discretised minimum-energy oracle, solved as a sparse QP.
//!
//! Variables are the grid speeds `v_0..v_N`. Cost `Σ (v_{k+1} - v_k)² / h`
//! approximates `∫u²`; distance is the trapezoid sum; speed and per-step
//! acceleration bounds are box/difference inequalities.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

pub struct QpInstance {
    pub horizon: f64,
    pub dist: f64,
    pub v0: f64,
    pub v1: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

pub struct QpSolution {
    pub h: f64,
    pub speeds: Vec<f64>,
    pub energy: f64,
}

/// `None` if the solver does not report an optimal (or almost optimal) point.
pub fn solve(inst: &QpInstance, grid: f64) -> Option<QpSolution> {
    let n_steps = (inst.horizon / grid).round().max(1.0) as usize;
    let h = inst.horizon / n_steps as f64;
    let n = n_steps + 1;

    // Upper triangle of P, with the QP in ½xᵀPx form.
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..n {
        let deg = if k == 0 || k == n - 1 { 1.0 } else { 2.0 };
        pi.push(k);
        pj.push(k);
        pv.push(2.0 * deg / h);
        if k + 1 < n {
            pi.push(k);
            pj.push(k + 1);
            pv.push(-2.0 / h);
        }
    }
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
    let q = vec![0.0; n];

    let (mut ai, mut aj, mut av, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut row = 0;
    let mut push = |entries: &[(usize, f64)], rhs: f64, b: &mut Vec<f64>| {
        for &(j, v) in entries {
            ai.push(row);
            aj.push(j);
            av.push(v);
        }
        b.push(rhs);
        row += 1;
    };
    push(&[(0, 1.0)], inst.v0, &mut b);
    push(&[(n - 1, 1.0)], inst.v1, &mut b);
    let trap: Vec<(usize, f64)> = (0..n).map(|k| (k, if k == 0 || k == n - 1 { 0.5 * h } else { h })).collect();
    push(&trap, inst.dist, &mut b);
    let n_eq = 3;
    for k in 0..n {
        push(&[(k, 1.0)], inst.v_max, &mut b);
        push(&[(k, -1.0)], -inst.v_min, &mut b);
    }
    for k in 0..n_steps {
        push(&[(k + 1, 1.0), (k, -1.0)], inst.u_max * h, &mut b);
        push(&[(k + 1, -1.0), (k, 1.0)], -inst.u_min * h, &mut b);
    }
    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);
    let cones = [SupportedConeT::ZeroConeT(n_eq), SupportedConeT::NonnegativeConeT(m - n_eq)];

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .ok()?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).ok()?;
    solver.solve();
    if !matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return None;
    }
    let speeds = solver.solution.x.clone();
    let energy = speeds.windows(2).map(|w| (w[1] - w[0]).powi(2) / h).sum();
    Some(QpSolution { h, speeds, energy })
}
