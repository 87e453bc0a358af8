//! The asynchronous gossip projected-subgradient protocol over least-squares
//! local objectives, with stubborn attackers that emit a common target plus
//! exponentially decaying noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dist2, dot, psd_min_norm_solve, SquareMatrix};
use crate::topology::{sample_gossip_pair, AttackerMask, Graph};

/// Axis-aligned box `[lo, hi]^d` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lo: f64,
    pub hi: f64,
}

impl UniformBox {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        (0..d)
            .map(|_| self.lo + (self.hi - self.lo) * rng.gen::<f64>())
            .collect()
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Local objectives `f_i(x) = |θ_iᵀx − φ_i|²` for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresProblem {
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    /// The optimum the targets were generated from, when known.
    pub planted: Option<Vec<f64>>,
}

pub const THETA_LAW: UniformBox = UniformBox::new(0.5, 2.5);
pub const OPTIMUM_LAW: UniformBox = UniformBox::new(0.0, 1.0);

/// Draws `θ_i ~ U[0.5, 2.5]^d`, `x* ~ U[0, 1]^d` and sets `φ_i = θ_iᵀx*`.
pub fn generate_problem<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<LeastSquaresProblem> {
    if n == 0 || d == 0 {
        return Err(invalid("n/d", "must be at least 1"));
    }
    let theta: Vec<Vec<f64>> = (0..n).map(|_| THETA_LAW.sample(d, rng)).collect();
    let optimum = OPTIMUM_LAW.sample(d, rng);
    let phi = theta.iter().map(|t| dot(t, &optimum)).collect();
    Ok(LeastSquaresProblem {
        theta,
        phi,
        planted: Some(optimum),
    })
}

impl LeastSquaresProblem {
    pub fn from_parts(theta: Vec<Vec<f64>>, phi: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Empty("theta"));
        }
        if theta.len() != phi.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                actual: phi.len(),
            });
        }
        let d = theta[0].len();
        if let Some(bad) = theta.iter().find(|t| t.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        Ok(Self {
            theta,
            phi,
            planted: None,
        })
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    pub fn d(&self) -> usize {
        self.theta[0].len()
    }

    pub fn local_value(&self, i: usize, x: &[f64]) -> f64 {
        let r = dot(&self.theta[i], x) - self.phi[i];
        r * r
    }

    /// `f(x) = (1/n) Σ_i f_i(x)`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|i| self.local_value(i, x)).sum::<f64>() / self.n() as f64
    }

    fn gradient_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let scale = 2.0 * (dot(&self.theta[i], x) - self.phi[i]);
        for (o, t) in out.iter_mut().zip(&self.theta[i]) {
            *o = scale * t;
        }
    }
}

/// Gradient `2θ_i(θ_iᵀx − φ_i)` of agent `i`'s local objective.
pub fn subgradient(problem: &LeastSquaresProblem, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    if i >= problem.n() {
        return Err(Error::AgentOutOfRange {
            id: i,
            n: problem.n(),
        });
    }
    if x.len() != problem.d() {
        return Err(Error::DimensionMismatch {
            expected: problem.d(),
            actual: x.len(),
        });
    }
    let mut g = vec![0.0; x.len()];
    problem.gradient_into(i, x, &mut g);
    Ok(g)
}

/// Projection set: the box `[lo, hi]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBox {
    pub lo: f64,
    pub hi: f64,
}

impl ProjectionBox {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.partial_cmp(&hi) != Some(core::cmp::Ordering::Less) {
            return Err(invalid("projection", "lo must be smaller than hi"));
        }
        Ok(Self { lo, hi })
    }

    fn project_in_place(&self, x: &mut [f64]) {
        for v in x {
            *v = v.clamp(self.lo, self.hi);
        }
    }
}

impl Default for ProjectionBox {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0 }
    }
}

/// Componentwise clamp onto the box.
pub fn project(x: &[f64], set: &ProjectionBox) -> Vec<f64> {
    let mut out = x.to_vec();
    set.project_in_place(&mut out);
    out
}

/// Stepsize schedule `γ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepSize {
    /// `scale / (offset + t)`.
    Harmonic { scale: f64, offset: f64 },
    /// Constant; only meaningful for tests (zero disables the gradient step).
    Constant { value: f64 },
}

impl StepSize {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSize::Harmonic { scale, offset } => scale / (offset + t as f64),
            StepSize::Constant { value } => value,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            StepSize::Harmonic { scale, offset } if scale > 0.0 && offset > -1.0 => Ok(()),
            StepSize::Constant { value } if value >= 0.0 => Ok(()),
            _ => Err(invalid("step_size", "stepsize must be non-negative and finite")),
        }
    }
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Harmonic {
            scale: 1.0,
            offset: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub d: usize,
    pub iterations: usize,
    pub instances: usize,
    pub step_size: StepSize,
    pub projection: ProjectionBox,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            d: 2,
            iterations: 2000,
            instances: 1,
            step_size: StepSize::default(),
            projection: ProjectionBox::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        self.step_size.validate()?;
        ProjectionBox::new(self.projection.lo, self.projection.hi)?;
        Ok(())
    }
}

/// Attack parameters shared by all attackers of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Common target `α`.
    pub target: Vec<f64>,
    /// Decay base `λ̂` of the noise `r(t) ~ U[−λ̂ᵗ, λ̂ᵗ]^d`.
    pub noise_decay: f64,
}

pub const ATTACK_TARGET_LAW: UniformBox = UniformBox::new(-0.5, 0.5);

impl AttackConfig {
    pub fn new(target: Vec<f64>, noise_decay: f64) -> Result<Self> {
        if !(noise_decay > 0.0 && noise_decay < 1.0) {
            return Err(invalid("noise_decay", "must lie in (0, 1)"));
        }
        Ok(Self {
            target,
            noise_decay,
        })
    }

    fn state_into<R: Rng + ?Sized>(&self, t: usize, rng: &mut R, out: &mut [f64]) {
        let amplitude = libm::pow(self.noise_decay, t as f64);
        for (o, a) in out.iter_mut().zip(&self.target) {
            *o = a + amplitude * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
}

/// `α + r(t)` with `r(t)` uniform in `[−λ̂ᵗ, λ̂ᵗ]` per coordinate.
pub fn attacker_state<R: Rng + ?Sized>(attack: &AttackConfig, t: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; attack.target.len()];
    attack.state_into(t, rng, &mut out);
    out
}

/// Every agent's state at every iteration of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    n: usize,
    d: usize,
    states: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    pub instance: usize,
}

impl Trace {
    /// Builds a trace from `(T+1)·n·d` row-major states. `pairs` may be empty
    /// for synthetic traces.
    pub fn from_states(
        n: usize,
        d: usize,
        states: Vec<f64>,
        pairs: Vec<(usize, usize)>,
        instance: usize,
    ) -> Result<Self> {
        let row = n * d;
        if row == 0 || states.is_empty() || states.len() % row != 0 {
            return Err(invalid("states", "length must be a positive multiple of n·d"));
        }
        let t = states.len() / row - 1;
        if !pairs.is_empty() && pairs.len() != t {
            return Err(Error::DimensionMismatch {
                expected: t,
                actual: pairs.len(),
            });
        }
        Ok(Self {
            n,
            d,
            states,
            pairs,
            instance,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of iterations `T`; states exist for `t = 0..=T`.
    pub fn iterations(&self) -> usize {
        self.states.len() / (self.n * self.d) - 1
    }

    pub fn state(&self, t: usize, i: usize) -> &[f64] {
        let start = (t * self.n + i) * self.d;
        &self.states[start..start + self.d]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.states[t * w..(t + 1) * w]
    }

    pub fn final_state(&self, i: usize) -> &[f64] {
        self.state(self.iterations(), i)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }
}

/// Runs one instance for `config.iterations` iterations.
///
/// `initial` holds `n·d` row-major starting states; entries belonging to
/// attackers are ignored and replaced by `α + r(0)`. At iteration `t` the
/// sampled pair averages its pre-iteration states; a trustworthy member then
/// takes a projected gradient step from the average, an attacker member emits
/// `α + r(t)`. Everyone else keeps its state.
pub fn run_instance<R: Rng + ?Sized>(
    graph: &Graph,
    mask: &AttackerMask,
    problem: &LeastSquaresProblem,
    initial: &[f64],
    config: &ProtocolConfig,
    attack: Option<&AttackConfig>,
    rng: &mut R,
) -> Result<Trace> {
    config.validate()?;
    let (n, d) = (graph.n(), config.d);
    for (expected, actual) in [
        (n, mask.n()),
        (n, problem.n()),
        (d, problem.d()),
        (n * d, initial.len()),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch { expected, actual });
        }
    }
    let attackers = mask.attackers();
    let attack = match (attackers.is_empty(), attack) {
        (true, _) => None,
        (false, Some(a)) if a.target.len() == d => Some(a),
        (false, Some(a)) => {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: a.target.len(),
            })
        }
        (false, None) => return Err(invalid("attack", "attackers present but no attack config")),
    };

    let steps = config.iterations;
    let width = n * d;
    let mut states = Vec::with_capacity((steps + 1) * width);
    states.extend_from_slice(initial);
    if let Some(attack) = attack {
        for &a in &attackers {
            attack.state_into(0, rng, &mut states[a * d..(a + 1) * d]);
        }
    }
    let mut pairs = Vec::with_capacity(steps);
    let mut avg = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for t in 1..=steps {
        let (i, j) = sample_gossip_pair(graph, rng);
        pairs.push((i, j));
        let prev = (t - 1) * width;
        states.extend_from_within(prev..prev + width);
        let cur = t * width;
        for k in 0..d {
            avg[k] = 0.5 * (states[prev + i * d + k] + states[prev + j * d + k]);
        }
        let gamma = config.step_size.at(t);
        for member in [i, j] {
            let slot = &mut states[cur + member * d..cur + (member + 1) * d];
            if mask.is_attacker(member) {
                // `attack` is Some whenever an attacker exists.
                attack.unwrap().state_into(t, rng, slot);
            } else {
                problem.gradient_into(member, &avg, &mut grad);
                for k in 0..d {
                    slot[k] = avg[k] - gamma * grad[k];
                }
                config.projection.project_in_place(slot);
            }
        }
    }
    Ok(Trace {
        n,
        d,
        states,
        pairs,
        instance: 0,
    })
}

/// Minimizer of `f` and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub rank: usize,
}

/// Solves the aggregate normal equations `(Σθθᵀ) x = Σθφ`, returning the
/// minimum-norm solution when the normal matrix is rank deficient.
pub fn optimal_value(problem: &LeastSquaresProblem) -> Result<Optimum> {
    let d = problem.d();
    let mut normal = SquareMatrix::zeros(d);
    let mut rhs = vec![0.0; d];
    for (theta, phi) in problem.theta.iter().zip(&problem.phi) {
        for r in 0..d {
            rhs[r] += theta[r] * phi;
            for c in 0..d {
                normal[(r, c)] += theta[r] * theta[c];
            }
        }
    }
    let (x, rank) = psd_min_norm_solve(&normal, &rhs, 1e-12);
    if rank == 0 {
        return Err(Error::SingularNormalMatrix);
    }
    let value = problem.objective(&x);
    Ok(Optimum { x, value, rank })
}

/// Summary of where an instance ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `max_i f(x_i(T)) − f*` over trustworthy agents.
    pub objective_gap: f64,
    /// `max_ij ‖x_i(T) − x_j(T)‖` over trustworthy agents.
    pub disagreement: f64,
    /// `max_i ‖x_i(T) − α‖` over trustworthy agents, when attacked.
    pub distance_to_target: Option<f64>,
}

pub fn convergence_report(
    trace: &Trace,
    mask: &AttackerMask,
    problem: &LeastSquaresProblem,
    attack: Option<&AttackConfig>,
) -> Result<ConvergenceReport> {
    convergence_report_at(trace, trace.iterations(), mask, problem, attack)
}

pub fn convergence_report_at(
    trace: &Trace,
    t: usize,
    mask: &AttackerMask,
    problem: &LeastSquaresProblem,
    attack: Option<&AttackConfig>,
) -> Result<ConvergenceReport> {
    let optimum = optimal_value(problem)?;
    let honest: Vec<usize> = (0..trace.n()).filter(|&i| !mask.is_attacker(i)).collect();
    let objective_gap = honest
        .iter()
        .map(|&i| problem.objective(trace.state(t, i)) - optimum.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut disagreement: f64 = 0.0;
    for (a, &i) in honest.iter().enumerate() {
        for &j in &honest[a + 1..] {
            disagreement = disagreement.max(dist2(trace.state(t, i), trace.state(t, j)));
        }
    }
    let distance_to_target = attack.filter(|_| mask.count() > 0).map(|a| {
        honest
            .iter()
            .map(|&i| dist2(trace.state(t, i), &a.target))
            .fold(0.0, f64::max)
    });
    Ok(ConvergenceReport {
        objective_gap,
        disagreement,
        distance_to_target,
    })
}
