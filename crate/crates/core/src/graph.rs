//! Factor-graph data model and batch MAP solver.
//!
//! Variables are per-keyframe state tuples (base pose, velocity, contact
//! pose, IMU bias); measurements enter as factors defining residuals over
//! those variables. The solver lifts the cost to the stacked tangent space
//! with numerically differentiated Jacobians, solves damped normal equations
//! with a skyline Cholesky factorization, and retracts the update back onto
//! the manifold (Levenberg-Marquardt). Marginal covariances come from
//! selected columns of the information-matrix inverse at the solution.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::contact::PreintegratedContact;
use crate::imu::{
    bias_random_walk_residual, imu_factor_residual, integrate_deltas, preintegrate, ImuBias,
    ImuNoise, ImuSample,
};
use crate::kinematics::{fk_factor_covariance, fk_factor_residual, ContactFrame, EncoderReading, RobotModel};
use crate::manifold::{se3_exp, se3_log, Pose, Twist};

/// Step size for the optimizer's central-difference Jacobians on the
/// retraction.
pub const GRAPH_JACOBIAN_STEP: f64 = 1e-6;

/// Errors raised by graph construction and solving.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("factor references unknown node key {0}")]
    UnknownKey(usize),
    #[error("node key {0} already present")]
    DuplicateKey(usize),
    #[error("factor covariance is not symmetric positive definite: {0}")]
    BadCovariance(String),
    #[error("normal equations are singular; the graph is under-constrained")]
    SingularNormalEquations,
    #[error("residual evaluation failed: {0}")]
    ResidualEvaluation(String),
}

/// The per-keyframe state tuple. The contact pose is only present while a
/// tracked contact interval is active; nodes without one expose a smaller
/// tangent space.
#[derive(Debug, Clone)]
pub struct StateNode {
    pub key: usize,
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub contact: Option<Pose>,
    pub bias: ImuBias,
}

impl StateNode {
    pub fn new(key: usize, t: f64, pose: Pose, velocity: Vector3<f64>, contact: Option<Pose>, bias: ImuBias) -> Self {
        StateNode { key, t, pose, velocity, contact, bias }
    }

    /// Tangent dimension: pose (6) + velocity (3) + contact (6, if present)
    /// + bias (6).
    pub fn tangent_dim(&self) -> usize {
        if self.contact.is_some() { 21 } else { 15 }
    }

    /// Applies a tangent increment: poses retract multiplicatively, vectors
    /// add. Layout: [dx(6), dv(3), dc(6 if contact), db(6)].
    pub fn retracted(&self, dx: &[f64]) -> StateNode {
        assert_eq!(dx.len(), self.tangent_dim(), "tangent increment dimension");
        let pose = self.pose
            * se3_exp(&Twist::new(
                Vector3::new(dx[0], dx[1], dx[2]),
                Vector3::new(dx[3], dx[4], dx[5]),
            ));
        let velocity = self.velocity + Vector3::new(dx[6], dx[7], dx[8]);
        let (contact, b0) = match self.contact {
            Some(c) => (
                Some(
                    c * se3_exp(&Twist::new(
                        Vector3::new(dx[9], dx[10], dx[11]),
                        Vector3::new(dx[12], dx[13], dx[14]),
                    )),
                ),
                15,
            ),
            None => (None, 9),
        };
        let bias = ImuBias::from_vector(
            &(self.bias.to_vector() + Vector6::new(dx[b0], dx[b0 + 1], dx[b0 + 2], dx[b0 + 3], dx[b0 + 4], dx[b0 + 5])),
        );
        StateNode { key: self.key, t: self.t, pose, velocity, contact, bias }
    }

    fn retracted_coord(&self, idx: usize, eps: f64) -> StateNode {
        let mut dx = vec![0.0; self.tangent_dim()];
        dx[idx] = eps;
        self.retracted(&dx)
    }
}

/// Factor kinds, used for reporting and targeted tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Prior,
    Imu,
    Fk,
    Contact,
    RelPose,
    Terrain,
    BiasWalk,
}

type ResidualFn = dyn Fn(&[&StateNode]) -> Result<DVector<f64>, GraphError> + Send + Sync;

/// A residual-defining factor over one or more nodes, weighted by the
/// inverse of its covariance.
pub struct Factor {
    pub kind: FactorKind,
    pub keys: Vec<usize>,
    covariance: DMatrix<f64>,
    weight: DMatrix<f64>,
    residual: Box<ResidualFn>,
}

impl std::fmt::Debug for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factor")
            .field("kind", &self.kind)
            .field("keys", &self.keys)
            .field("dim", &self.covariance.nrows())
            .finish()
    }
}

impl Factor {
    /// Builds a factor, validating that the covariance is symmetric positive
    /// definite (callers regularize singular covariances beforehand).
    pub fn new(
        kind: FactorKind,
        keys: Vec<usize>,
        covariance: DMatrix<f64>,
        residual: Box<ResidualFn>,
    ) -> Result<Self, GraphError> {
        let n = covariance.nrows();
        if covariance.ncols() != n {
            return Err(GraphError::BadCovariance("not square".into()));
        }
        if (&covariance - covariance.transpose()).norm() > 1e-9 * (1.0 + covariance.norm()) {
            return Err(GraphError::BadCovariance("not symmetric".into()));
        }
        let mut uniq = keys.clone();
        uniq.dedup();
        if uniq.len() != keys.len() {
            return Err(GraphError::BadCovariance("factor keys must be distinct".into()));
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| GraphError::BadCovariance("not positive definite".into()))?;
        let weight = chol.inverse();
        Ok(Factor { kind, keys, covariance: sym, weight, residual })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn evaluate(&self, nodes: &[&StateNode]) -> Result<DVector<f64>, GraphError> {
        let r = (self.residual)(nodes)?;
        if r.len() != self.dim() {
            return Err(GraphError::ResidualEvaluation(format!(
                "residual dimension {} does not match covariance dimension {}",
                r.len(),
                self.dim()
            )));
        }
        Ok(r)
    }
}

/// Options for the Levenberg-Marquardt solver.
#[derive(Debug, Clone)]
pub struct LmOptions {
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_iterations: usize,
    /// Converged when the relative cost decrease of an improving step falls
    /// below this.
    pub relative_decrease_tol: f64,
    /// Converged when the step norm falls below this.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_iterations: 100,
            relative_decrease_tol: 1e-9,
            step_tol: 1e-10,
        }
    }
}

/// Outcome of a solve: cost trace and convergence status. Marginal
/// covariances are recovered on demand via
/// [`FactorGraph::marginal_covariance`].
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Cost after every accepted step.
    pub cost_history: Vec<f64>,
}

/// The factor graph: keyed state nodes plus factors over them.
#[derive(Debug, Default)]
pub struct FactorGraph {
    nodes: BTreeMap<usize, StateNode>,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph { nodes: BTreeMap::new(), factors: Vec::new() }
    }

    pub fn add_node(&mut self, node: StateNode) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.key) {
            return Err(GraphError::DuplicateKey(node.key));
        }
        self.nodes.insert(node.key, node);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<(), GraphError> {
        for k in &factor.keys {
            if !self.nodes.contains_key(k) {
                return Err(GraphError::UnknownKey(*k));
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn node(&self, key: usize) -> Result<&StateNode, GraphError> {
        self.nodes.get(&key).ok_or(GraphError::UnknownKey(key))
    }

    /// Swaps in a new estimate for an existing node.
    pub fn replace_node(&mut self, node: StateNode) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&node.key) {
            return Err(GraphError::UnknownKey(node.key));
        }
        self.nodes.insert(node.key, node);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &StateNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    fn gather<'a>(&'a self, keys: &[usize]) -> Result<Vec<&'a StateNode>, GraphError> {
        keys.iter().map(|k| self.node(*k)).collect()
    }

    /// Total weighted cost `sum r^T S^{-1} r` at the current estimates.
    pub fn cost(&self) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for f in &self.factors {
            let nodes = self.gather(&f.keys)?;
            let r = f.evaluate(&nodes)?;
            total += (&f.weight * &r).dot(&r);
        }
        Ok(total)
    }

    fn layout(&self) -> (Vec<(usize, usize, usize)>, usize) {
        let mut entries = Vec::with_capacity(self.nodes.len());
        let mut off = 0;
        for (k, n) in &self.nodes {
            entries.push((*k, off, n.tangent_dim()));
            off += n.tangent_dim();
        }
        (entries, off)
    }

    fn offset_of(layout: &[(usize, usize, usize)], key: usize) -> (usize, usize) {
        let idx = layout.binary_search_by_key(&key, |(k, _, _)| *k).expect("key in layout");
        (layout[idx].1, layout[idx].2)
    }

    /// Assembles the Gauss-Newton normal equations `J^T S^{-1} J` and
    /// `J^T S^{-1} r` over the stacked tangent space at the current
    /// estimates.
    pub fn linearize(&self) -> Result<NormalEquations, GraphError> {
        let (layout, dim) = self.layout();
        // Row profiles: every factor couples its variables' spans down to
        // the smallest offset among them.
        let mut first: Vec<usize> = (0..dim).collect();
        for f in &self.factors {
            let offsets: Vec<(usize, usize)> =
                f.keys.iter().map(|k| Self::offset_of(&layout, *k)).collect();
            let min_off = offsets.iter().map(|(o, _)| *o).min().unwrap_or(0);
            for (off, d) in &offsets {
                for r in *off..*off + *d {
                    first[r] = first[r].min(min_off);
                }
            }
        }
        let mut h = SkylineMatrix::new(dim, first);
        let mut g = DVector::zeros(dim);
        let mut cost = 0.0;

        for f in &self.factors {
            let nodes = self.gather(&f.keys)?;
            let r = f.evaluate(&nodes)?;
            cost += (&f.weight * &r).dot(&r);
            let jacs = numerical_factor_jacobian(f, &nodes, GRAPH_JACOBIAN_STEP)?;
            let wr = &f.weight * &r;
            let offsets: Vec<(usize, usize)> =
                f.keys.iter().map(|k| Self::offset_of(&layout, *k)).collect();
            for (a, ja) in jacs.iter().enumerate() {
                let (off_a, dim_a) = offsets[a];
                let ga = ja.transpose() * &wr;
                for i in 0..dim_a {
                    g[off_a + i] += ga[i];
                }
                for (b, jb) in jacs.iter().enumerate() {
                    let (off_b, dim_b) = offsets[b];
                    if off_b > off_a {
                        continue;
                    }
                    let block = ja.transpose() * &f.weight * jb;
                    for i in 0..dim_a {
                        for j in 0..dim_b {
                            let (ri, cj) = (off_a + i, off_b + j);
                            if ri >= cj {
                                h.add(ri, cj, block[(i, j)]);
                            }
                        }
                    }
                }
            }
        }
        Ok(NormalEquations { layout, h, g, cost })
    }

    fn apply_step(&mut self, layout: &[(usize, usize, usize)], step: &DVector<f64>) {
        for (key, off, dim) in layout {
            let node = self.nodes.get_mut(key).expect("layout key");
            let dx: Vec<f64> = (0..*dim).map(|i| step[off + i]).collect();
            *node = node.retracted(&dx);
        }
    }

    /// Batch Levenberg-Marquardt: damps the normal equations, accepts steps
    /// that decrease the cost, and retracts accepted updates onto the
    /// manifold.
    pub fn solve_lm(&mut self, opts: &LmOptions) -> Result<SolveReport, GraphError> {
        if self.factors.is_empty() || self.nodes.is_empty() {
            return Err(GraphError::SingularNormalEquations);
        }
        // An under-constrained graph is a modeling error; detect it once at
        // the initial linearization point.
        {
            let lin = self.linearize()?;
            if lin.h.cholesky().is_none() {
                return Err(GraphError::SingularNormalEquations);
            }
        }

        let mut lambda = opts.initial_lambda;
        let mut report = SolveReport {
            iterations: 0,
            accepted_steps: 0,
            initial_cost: self.cost()?,
            final_cost: 0.0,
            converged: false,
            cost_history: Vec::new(),
        };
        let mut current_cost = report.initial_cost;

        'outer: while report.iterations < opts.max_iterations {
            report.iterations += 1;
            let lin = self.linearize()?;
            current_cost = lin.cost;

            loop {
                let mut damped = lin.h.clone();
                damped.add_diagonal(lambda);
                let chol = match damped.cholesky() {
                    Some(c) => c,
                    None => {
                        lambda *= opts.lambda_factor;
                        if lambda > 1e14 {
                            break 'outer;
                        }
                        continue;
                    }
                };
                let step = chol.solve(&(-&lin.g));
                if step.norm() < opts.step_tol {
                    report.converged = true;
                    break 'outer;
                }
                let backup: Vec<StateNode> = self.nodes.values().cloned().collect();
                self.apply_step(&lin.layout, &step);
                let new_cost = self.cost()?;
                if new_cost.is_finite() && new_cost < current_cost {
                    let rel = (current_cost - new_cost) / current_cost.max(f64::MIN_POSITIVE);
                    if rel < opts.relative_decrease_tol {
                        // Improvement is below resolution; restore and stop
                        // so that re-solving from the solution is a no-op.
                        for n in backup {
                            self.nodes.insert(n.key, n);
                        }
                        report.converged = true;
                        break 'outer;
                    }
                    current_cost = new_cost;
                    report.accepted_steps += 1;
                    report.cost_history.push(new_cost);
                    lambda = (lambda / opts.lambda_factor).max(1e-12);
                    break;
                }
                // Reject: restore estimates and increase damping.
                for n in backup {
                    self.nodes.insert(n.key, n);
                }
                lambda *= opts.lambda_factor;
                if lambda > 1e14 {
                    break 'outer;
                }
            }
        }
        report.final_cost = current_cost;
        Ok(report)
    }

    /// Marginal covariance of one node at the current estimates: its block
    /// of the inverse Gauss-Newton information matrix.
    pub fn marginal_covariance(&self, key: usize) -> Result<DMatrix<f64>, GraphError> {
        let lin = self.linearize()?;
        let chol = lin.h.cholesky().ok_or(GraphError::SingularNormalEquations)?;
        let (off, dim) = Self::offset_of(&lin.layout, key);
        self.node(key)?;
        let n = lin.g.len();
        let mut cov = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = DVector::zeros(n);
            e[off + j] = 1.0;
            let col = chol.solve(&e);
            for i in 0..dim {
                cov[(i, j)] = col[off + i];
            }
        }
        Ok((&cov + cov.transpose()) * 0.5)
    }

    /// Log-determinant of the 6x6 base-pose block of a node's marginal
    /// covariance, the uncertainty scalar tracked by the vision-dropout
    /// analysis.
    pub fn base_pose_logdet(&self, key: usize) -> Result<f64, GraphError> {
        let cov = self.marginal_covariance(key)?;
        let block = cov.view((0, 0), (6, 6)).clone_owned();
        logdet_small(&block)
    }

    /// Base-pose marginal log-determinants for every node, sharing a single
    /// linearization and factorization.
    pub fn all_base_pose_logdets(&self) -> Result<Vec<(usize, f64)>, GraphError> {
        let lin = self.linearize()?;
        let chol = lin.h.cholesky().ok_or(GraphError::SingularNormalEquations)?;
        let n = lin.g.len();
        let mut out = Vec::with_capacity(lin.layout.len());
        for (key, off, _) in &lin.layout {
            let mut block = DMatrix::zeros(6, 6);
            for j in 0..6 {
                let mut e = DVector::zeros(n);
                e[off + j] = 1.0;
                let col = chol.solve(&e);
                for i in 0..6 {
                    block[(i, j)] = col[off + i];
                }
            }
            let block = (&block + block.transpose()) * 0.5;
            out.push((*key, logdet_small(&block)?));
        }
        Ok(out)
    }
}

fn logdet_small(m: &DMatrix<f64>) -> Result<f64, GraphError> {
    let chol = m.clone().cholesky().ok_or(GraphError::SingularNormalEquations)?;
    let mut logdet = 0.0;
    for i in 0..m.nrows() {
        logdet += chol.l_dirty()[(i, i)].ln();
    }
    Ok(2.0 * logdet)
}

/// Assembled normal equations at one linearization point.
pub struct NormalEquations {
    pub layout: Vec<(usize, usize, usize)>,
    pub h: SkylineMatrix,
    pub g: DVector<f64>,
    pub cost: f64,
}

/// Central-difference Jacobian blocks of a factor's residual with respect to
/// each referenced node's tangent coordinates, at step `h`.
pub fn numerical_factor_jacobian(
    factor: &Factor,
    nodes: &[&StateNode],
    h: f64,
) -> Result<Vec<DMatrix<f64>>, GraphError> {
    let m = factor.dim();
    let mut jacs = Vec::with_capacity(nodes.len());
    for (v, node) in nodes.iter().enumerate() {
        let dim = node.tangent_dim();
        let mut jac = DMatrix::zeros(m, dim);
        for c in 0..dim {
            let plus_node = node.retracted_coord(c, h);
            let minus_node = node.retracted_coord(c, -h);
            let mut working: Vec<&StateNode> = nodes.to_vec();
            working[v] = &plus_node;
            let r_plus = factor.evaluate(&working)?;
            working[v] = &minus_node;
            let r_minus = factor.evaluate(&working)?;
            let col = (r_plus - r_minus) / (2.0 * h);
            jac.column_mut(c).copy_from(&col);
        }
        jacs.push(jac);
    }
    Ok(jacs)
}

// ---------------------------------------------------------------------------
// Skyline (profile) symmetric matrix and its Cholesky factorization.
// ---------------------------------------------------------------------------

/// Lower-triangular skyline storage: row `i` holds columns
/// `first[i] ..= i`. Factor-graph normal equations from chain-structured
/// problems have small profiles, and profile Cholesky produces no fill-in
/// outside the envelope.
#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    n: usize,
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl SkylineMatrix {
    pub fn new(n: usize, first: Vec<usize>) -> Self {
        assert_eq!(first.len(), n);
        let rows = (0..n).map(|i| vec![0.0; i - first[i] + 1]).collect();
        SkylineMatrix { n, first, rows }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds to entry (i, j), i >= j, which must lie inside the profile.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j, "lower triangle only");
        debug_assert!(j >= self.first[i], "entry outside skyline profile");
        let p = j - self.first[i];
        self.rows[i][p] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            let p = i - self.first[i];
            self.rows[i][p] += v;
        }
    }

    /// Dense copy, for small-problem cross-checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in self.first[i]..=i {
                m[(i, j)] = self.get(i, j);
                m[(j, i)] = m[(i, j)];
            }
        }
        m
    }

    /// Profile Cholesky. Returns `None` when a pivot drops below the
    /// relative tolerance, i.e. the matrix is (numerically) not positive
    /// definite.
    pub fn cholesky(&self) -> Option<SkylineCholesky> {
        let n = self.n;
        let mut l = self.rows.clone();
        let first = &self.first;
        let max_diag = (0..n)
            .map(|i| self.get(i, i).abs())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let tol = 1e-12 * max_diag;
        for i in 0..n {
            for j in first[i]..=i {
                let start = first[i].max(first[j]);
                let mut s = l[i][j - first[i]];
                for k in start..j {
                    s -= l[i][k - first[i]] * l[j][k - first[j]];
                }
                if j < i {
                    l[i][j - first[i]] = s / l[j][j - first[j]];
                } else {
                    if s <= tol {
                        return None;
                    }
                    l[i][i - first[i]] = s.sqrt();
                }
            }
        }
        // Column index lists for the transposed backsolve.
        let mut cols: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in first[i]..i {
                cols[j].push(i as u32);
            }
        }
        Some(SkylineCholesky { n, first: self.first.clone(), rows: l, cols })
    }
}

/// Cholesky factor of a [`SkylineMatrix`].
pub struct SkylineCholesky {
    n: usize,
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
    cols: Vec<Vec<u32>>,
}

impl SkylineCholesky {
    /// Solves `L L^T x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in self.first[i]..i {
                s -= self.rows[i][k - self.first[i]] * y[k];
            }
            y[i] = s / self.rows[i][i - self.first[i]];
        }
        let mut x = y;
        for i in (0..n).rev() {
            let mut s = x[i];
            for &k in &self.cols[i] {
                let k = k as usize;
                s -= self.rows[k][i - self.first[k]] * x[k];
            }
            x[i] = s / self.rows[i][i - self.first[i]];
        }
        x
    }

    /// `log det` of the factored matrix.
    pub fn logdet(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            s += self.rows[i][i - self.first[i]].ln();
        }
        2.0 * s
    }
}

// ---------------------------------------------------------------------------
// Factor constructors.
// ---------------------------------------------------------------------------

fn eval_err(e: impl std::fmt::Display) -> GraphError {
    GraphError::ResidualEvaluation(e.to_string())
}

fn pose_log(p: &Pose) -> Result<Vector6<f64>, GraphError> {
    Ok(se3_log(p).map_err(eval_err)?.to_vector())
}

/// Unary prior over a full state node, anchoring the graph.
pub fn prior_factor(mean: StateNode, covariance: DMatrix<f64>) -> Result<Factor, GraphError> {
    let key = mean.key;
    let dim = mean.tangent_dim();
    if covariance.nrows() != dim {
        return Err(GraphError::BadCovariance(format!(
            "prior covariance is {}x{}, node tangent dimension is {dim}",
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let n = nodes[0];
        let mut r = DVector::zeros(dim);
        let dx = pose_log(&(mean.pose.inverse() * n.pose))?;
        r.rows_mut(0, 6).copy_from(&dx);
        r.rows_mut(6, 3).copy_from(&(n.velocity - mean.velocity));
        let b0 = match (&mean.contact, &n.contact) {
            (Some(cm), Some(c)) => {
                let dc = pose_log(&(cm.inverse() * *c))?;
                r.rows_mut(9, 6).copy_from(&dc);
                15
            }
            (None, None) => 9,
            _ => {
                return Err(GraphError::ResidualEvaluation(
                    "prior and node disagree on contact presence".into(),
                ))
            }
        };
        r.rows_mut(b0, 6)
            .copy_from(&(n.bias.to_vector() - mean.bias.to_vector()));
        Ok(r)
    };
    Factor::new(FactorKind::Prior, vec![key], covariance, Box::new(residual))
}

/// Unary prior over velocity and bias only, for anchoring nodes whose pose
/// is constrained by relative factors.
pub fn velocity_bias_prior_factor(
    key: usize,
    v_mean: Vector3<f64>,
    b_mean: ImuBias,
    covariance: DMatrix<f64>,
) -> Result<Factor, GraphError> {
    if covariance.nrows() != 9 {
        return Err(GraphError::BadCovariance("velocity/bias prior covariance must be 9x9".into()));
    }
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let n = nodes[0];
        let mut r = DVector::zeros(9);
        r.rows_mut(0, 3).copy_from(&(n.velocity - v_mean));
        r.rows_mut(3, 6)
            .copy_from(&(n.bias.to_vector() - b_mean.to_vector()));
        Ok(r)
    };
    Factor::new(FactorKind::Prior, vec![key], covariance, Box::new(residual))
}

/// Binary relative-pose factor (visual odometry or loop closure):
/// `r = Log(L~^{-1} X_i^{-1} X_j)`.
pub fn relpose_factor(i: usize, j: usize, measured: Pose, covariance: Matrix6<f64>) -> Result<Factor, GraphError> {
    let cov = DMatrix::from_fn(6, 6, |r, c| covariance[(r, c)]);
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let rel = nodes[0].pose.inverse() * nodes[1].pose;
        Ok(DVector::from_column_slice(pose_log(&(measured.inverse() * rel))?.as_slice()))
    };
    Factor::new(FactorKind::RelPose, vec![i, j], cov, Box::new(residual))
}

/// Preintegrated IMU factor between consecutive keyframes. The residual
/// rebuilds the deltas at the bias of node `i` on every evaluation, so the
/// bias block is differentiated exactly by the numeric Jacobians; the
/// weight stays at the linearization bias.
pub fn imu_factor(
    i: usize,
    j: usize,
    samples: Vec<ImuSample>,
    t_end: f64,
    noise: &ImuNoise,
    gravity: Vector3<f64>,
    lin_bias: &ImuBias,
) -> Result<Factor, GraphError> {
    let full = preintegrate(&samples, t_end, lin_bias, noise).map_err(eval_err)?;
    let mut cov = DMatrix::zeros(9, 9);
    for r in 0..9 {
        for c in 0..9 {
            cov[(r, c)] = full.covariance()[(r, c)];
        }
        cov[(r, r)] += 1e-14;
    }
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let (delta_r, delta_v, delta_p, dt) =
            integrate_deltas(&samples, t_end, &nodes[0].bias).map_err(eval_err)?;
        let r = imu_factor_residual(
            &nodes[0].pose,
            &nodes[0].velocity,
            &nodes[1].pose,
            &nodes[1].velocity,
            &delta_r,
            &delta_v,
            &delta_p,
            dt,
            &gravity,
        )
        .map_err(eval_err)?;
        Ok(DVector::from_column_slice(r.as_slice()))
    };
    Factor::new(FactorKind::Imu, vec![i, j], cov, Box::new(residual))
}

/// Bias random-walk factor between consecutive keyframes; covariance is the
/// walk density scaled by the inter-keyframe time.
pub fn bias_walk_factor(i: usize, j: usize, walk_covariance: Matrix6<f64>) -> Result<Factor, GraphError> {
    let cov = DMatrix::from_fn(6, 6, |r, c| walk_covariance[(r, c)]);
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        Ok(DVector::from_column_slice(
            bias_random_walk_residual(&nodes[0].bias, &nodes[1].bias).as_slice(),
        ))
    };
    Factor::new(FactorKind::BiasWalk, vec![i, j], cov, Box::new(residual))
}

/// Unary forward-kinematic factor tying the contact pose to the base pose
/// through the measured joint encoders.
pub fn fk_factor(
    key: usize,
    robot: Arc<RobotModel>,
    reading: EncoderReading,
    frame: ContactFrame,
) -> Result<Factor, GraphError> {
    let cov6 = fk_factor_covariance(&robot, &reading, frame).map_err(eval_err)?;
    let cov = DMatrix::from_fn(6, 6, |r, c| cov6.matrix()[(r, c)]);
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let n = nodes[0];
        let c = n
            .contact
            .as_ref()
            .ok_or_else(|| GraphError::ResidualEvaluation("fk factor on node without contact pose".into()))?;
        let r = fk_factor_residual(&robot, &n.pose, c, &reading, frame).map_err(eval_err)?;
        Ok(DVector::from_column_slice(r.to_vector().as_slice()))
    };
    Factor::new(FactorKind::Fk, vec![key], cov, Box::new(residual))
}

/// Binary hybrid preintegrated contact factor relating the contact poses of
/// two keyframes across any number of contact switches.
pub fn contact_factor(i: usize, j: usize, preint: PreintegratedContact) -> Result<Factor, GraphError> {
    let sigma = preint.regularized_sigma();
    let cov = DMatrix::from_fn(6, 6, |r, c| sigma[(r, c)]);
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let ci = nodes[0]
            .contact
            .as_ref()
            .ok_or_else(|| GraphError::ResidualEvaluation("contact factor on node without contact pose".into()))?;
        let cj = nodes[1]
            .contact
            .as_ref()
            .ok_or_else(|| GraphError::ResidualEvaluation("contact factor on node without contact pose".into()))?;
        let r = preint.residual(ci, cj).map_err(eval_err)?;
        Ok(DVector::from_column_slice(r.to_vector().as_slice()))
    };
    Factor::new(FactorKind::Contact, vec![i, j], cov, Box::new(residual))
}

/// Unary terrain factor: the contact frame z-translation matches a prior
/// map height (flat ground by default).
pub fn terrain_factor(key: usize, map_height: f64, sigma_z: f64) -> Result<Factor, GraphError> {
    let cov = DMatrix::from_element(1, 1, sigma_z * sigma_z);
    let residual = move |nodes: &[&StateNode]| -> Result<DVector<f64>, GraphError> {
        let c = nodes[0]
            .contact
            .as_ref()
            .ok_or_else(|| GraphError::ResidualEvaluation("terrain factor on node without contact pose".into()))?;
        Ok(DVector::from_element(1, c.translation[2] - map_height))
    };
    Factor::new(FactorKind::Terrain, vec![key], cov, Box::new(residual))
}

/// Terrain residual in isolation (see [`terrain_factor`]).
pub fn terrain_residual(contact: &Pose, map_height: f64) -> f64 {
    contact.translation[2] - map_height
}
