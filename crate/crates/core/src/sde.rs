//! Brownian paths and a fixed-step Stratonovich integrator for
//! `dZ = f(Z) dt + g(Z) ∘ dΩ` with diagonal diffusion.
//!
//! Integration runs on an autodiff [`Tape`] so gradients flow through the
//! unrolled solver. Several trajectories (rows) can be solved in lock-step,
//! each on its own time grid: shorter grids are padded with zero-length
//! steps, which leave the state bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;
use tnsde_autodiff::{AdError, NodeId, Tape, Tensor};

/// States beyond this magnitude abort integration.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("empty time grid: no output times")]
    EmptyGrid,
    #[error("Brownian dimension must be at least 1")]
    InvalidDim,
    #[error("row {row}: Brownian path does not match its time grid ({reason})")]
    PathMismatch { row: usize, reason: String },
    #[error("state diverged at step {step}, row {row}: |z| = {value:e}")]
    Diverged { step: usize, row: usize, value: f64 },
    #[error("non-finite state at step {step}: {source}")]
    NonFinite { step: usize, source: AdError },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Uniform stepping grid `t0 + k·h` merged with the requested output times.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    h: f64,
    outputs: Vec<f64>,
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t0: f64, h: f64, outputs: Vec<f64>) -> Result<Self, SdeError> {
        if !t0.is_finite() || !(h > 0.0 && h.is_finite()) {
            return Err(SdeError::InvalidGrid(format!("t0 = {t0}, h = {h}")));
        }
        if outputs.is_empty() {
            return Err(SdeError::EmptyGrid);
        }
        if outputs.iter().any(|t| !t.is_finite() || *t < t0) {
            return Err(SdeError::InvalidGrid("output times must be finite and >= t0".into()));
        }
        if outputs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SdeError::InvalidGrid("output times must be strictly increasing".into()));
        }
        let end = *outputs.last().expect("non-empty");
        let tol = 1e-9 * h;
        let mut points = vec![t0];
        let mut next_out = outputs.iter().copied().skip_while(|&t| t <= t0 + tol).peekable();
        let mut k = 1usize;
        loop {
            let uniform = t0 + k as f64 * h;
            let candidate = match next_out.peek() {
                Some(&o) if o <= uniform + tol => {
                    next_out.next();
                    if (o - uniform).abs() <= tol {
                        k += 1;
                    }
                    o
                }
                Some(_) => {
                    k += 1;
                    uniform
                }
                None => break,
            };
            points.push(candidate);
            if candidate >= end {
                break;
            }
        }
        Ok(Self {
            t0,
            h,
            outputs,
            points,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Internal stepping points, starting at `t0`.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Step lengths of the internal grid.
    pub fn dts(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// For each output time, the number of steps taken when it is reached.
    pub fn output_steps(&self) -> Vec<usize> {
        let mut idx = 0;
        self.outputs
            .iter()
            .map(|&t| {
                while self.points[idx] != t {
                    idx += 1;
                }
                idx
            })
            .collect()
    }
}

/// Gaussian increments `ΔΩ ~ N(0, Δt·I)`, one `dim`-vector per grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    seed: u64,
    dim: usize,
    dts: Vec<f64>,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.dts.len()
    }

    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.dim..(step + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    fn check(&self, grid: &TimeGrid, dim: usize, row: usize) -> Result<(), SdeError> {
        let mismatch = |reason: String| SdeError::PathMismatch { row, reason };
        if self.dim != dim {
            return Err(mismatch(format!("dimension {} vs state width {dim}", self.dim)));
        }
        if self.dts != grid.dts() {
            return Err(mismatch(format!(
                "{} path steps vs {} grid steps",
                self.dts.len(),
                grid.n_steps()
            )));
        }
        Ok(())
    }
}

pub fn sample_path(grid: &TimeGrid, dim: usize, seed: u64) -> Result<BrownianPath, SdeError> {
    if dim == 0 {
        return Err(SdeError::InvalidDim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dts = grid.dts();
    let mut increments = Vec::with_capacity(dts.len() * dim);
    for &dt in &dts {
        let sd = dt.sqrt();
        for _ in 0..dim {
            let n: f64 = StandardNormal.sample(&mut rng);
            increments.push(n * sd);
        }
    }
    Ok(BrownianPath {
        seed,
        dim,
        dts,
        increments,
    })
}

/// Drift and diffusion evaluated batched on a tape: `z` is `[rows, width]`.
pub trait TapeDynamics {
    fn drift(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId, AdError>;
    /// `None` means zero diffusion.
    fn diffusion(&self, tape: &mut Tape, z: NodeId) -> Result<Option<NodeId>, AdError>;
}

type TapeFn = fn(&mut Tape, NodeId) -> Result<NodeId, AdError>;

/// [`TapeDynamics`] from closures.
pub struct FnDynamics<F, G = TapeFn> {
    drift: F,
    diffusion: Option<G>,
}

impl<F> FnDynamics<F> {
    pub fn drift_only(drift: F) -> Self {
        Self {
            drift,
            diffusion: None,
        }
    }
}

impl<F, G> FnDynamics<F, G> {
    pub fn new(drift: F, diffusion: G) -> Self {
        Self {
            drift,
            diffusion: Some(diffusion),
        }
    }
}

impl<F, G> TapeDynamics for FnDynamics<F, G>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AdError>,
    G: Fn(&mut Tape, NodeId) -> Result<NodeId, AdError>,
{
    fn drift(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId, AdError> {
        (self.drift)(tape, z)
    }

    fn diffusion(&self, tape: &mut Tape, z: NodeId) -> Result<Option<NodeId>, AdError> {
        self.diffusion.as_ref().map(|g| g(tape, z)).transpose()
    }
}

/// Both schemes share the Stratonovich diffusion corrector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Drift averaged over predictor and start point: second order in the
    /// drift, exact Heun method when `g ≡ 0`.
    #[default]
    Heun,
    /// Drift evaluated at the start point only.
    EulerHeun,
}

/// One predictor/corrector step. `dt` and `dw` have the shape of `z`.
pub fn euler_heun_step<D: TapeDynamics + ?Sized>(
    tape: &mut Tape,
    dynamics: &D,
    z: NodeId,
    dt: NodeId,
    dw: NodeId,
    scheme: Scheme,
) -> Result<NodeId, AdError> {
    let f0 = dynamics.drift(tape, z)?;
    let f0dt = tape.mul(f0, dt)?;
    let g0 = dynamics.diffusion(tape, z)?;
    let Some(g0) = g0 else {
        return match scheme {
            Scheme::EulerHeun => tape.add(z, f0dt),
            Scheme::Heun => {
                let pred = tape.add(z, f0dt)?;
                let f1 = dynamics.drift(tape, pred)?;
                let fsum = tape.add(f0, f1)?;
                let fdt = tape.mul(fsum, dt)?;
                let half = tape.scale(fdt, 0.5)?;
                tape.add(z, half)
            }
        };
    };
    let g0dw = tape.mul(g0, dw)?;
    let partial = tape.add(z, f0dt)?;
    let pred = tape.add(partial, g0dw)?;
    let g1 = dynamics
        .diffusion(tape, pred)?
        .expect("diffusion presence does not depend on the state");
    let gsum = tape.add(g0, g1)?;
    let gdw = tape.mul(gsum, dw)?;
    let noise = tape.scale(gdw, 0.5)?;
    let drift_term = match scheme {
        Scheme::EulerHeun => f0dt,
        Scheme::Heun => {
            let f1 = dynamics.drift(tape, pred)?;
            let fsum = tape.add(f0, f1)?;
            let fdt = tape.mul(fsum, dt)?;
            tape.scale(fdt, 0.5)?
        }
    };
    let moved = tape.add(z, drift_term)?;
    tape.add(moved, noise)
}

/// One trajectory of a batched solve.
#[derive(Clone, Debug)]
pub struct RowPlan {
    pub grid: TimeGrid,
    pub path: BrownianPath,
}

/// Per-step `dt` and `ΔΩ` matrices for the lock-stepped batch.
struct BatchSchedule {
    rows: usize,
    width: usize,
    steps: usize,
    /// `(row, output index, step)`, ordered by row then output.
    gathers: Vec<(usize, usize, usize)>,
}

impl BatchSchedule {
    fn new(plans: &[RowPlan], width: usize) -> Result<Self, SdeError> {
        let mut gathers = Vec::new();
        for (row, plan) in plans.iter().enumerate() {
            plan.path.check(&plan.grid, width, row)?;
            for (o, step) in plan.grid.output_steps().into_iter().enumerate() {
                gathers.push((row, o, step));
            }
        }
        Ok(Self {
            rows: plans.len(),
            width,
            steps: plans.iter().map(|p| p.grid.n_steps()).max().unwrap_or(0),
            gathers,
        })
    }

    fn inputs(&self, plans: &[RowPlan], step: usize) -> (Tensor, Tensor) {
        let n = self.rows * self.width;
        let mut dt = vec![0.0; n];
        let mut dw = vec![0.0; n];
        for (row, plan) in plans.iter().enumerate() {
            if step < plan.grid.n_steps() {
                let d = plan.path.dts[step];
                dt[row * self.width..(row + 1) * self.width].fill(d);
                dw[row * self.width..(row + 1) * self.width].copy_from_slice(plan.path.increment(step));
            }
        }
        let shape = vec![self.rows, self.width];
        (
            Tensor::new(shape.clone(), dt).expect("finite schedule"),
            Tensor::new(shape, dw).expect("finite schedule"),
        )
    }
}

fn guard(value: &Tensor, width: usize, step: usize) -> Result<(), SdeError> {
    if let Some((i, v)) = value
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| v.abs() > DIVERGENCE_LIMIT)
    {
        return Err(SdeError::Diverged {
            step,
            row: i / width,
            value: v.abs(),
        });
    }
    Ok(())
}

fn step_error(step: usize) -> impl Fn(AdError) -> SdeError {
    move |source| match source {
        AdError::NonFinite { .. } | AdError::NonFiniteInput { .. } => SdeError::NonFinite { step, source },
        other => SdeError::Autodiff(other),
    }
}

/// Output states of a batched solve, `[Σ outputs, width]`, ordered by row
/// then output time. `rows[k]` is the plan row of state `k`.
#[derive(Clone, Debug)]
pub struct BatchSolution<T> {
    pub states: T,
    pub rows: Vec<usize>,
}

/// Differentiable solve of every row in `plans` from `z0` (`[rows, width]`).
pub fn solve_batch<D: TapeDynamics + ?Sized>(
    tape: &mut Tape,
    dynamics: &D,
    z0: NodeId,
    plans: &[RowPlan],
    scheme: Scheme,
) -> Result<BatchSolution<NodeId>, SdeError> {
    let shape = tape.shape(z0).to_vec();
    if shape.len() != 2 || shape[0] != plans.len() {
        return Err(SdeError::InvalidGrid(format!(
            "initial state shape {shape:?} does not match {} rows",
            plans.len()
        )));
    }
    let schedule = BatchSchedule::new(plans, shape[1])?;
    let mut at_step: Vec<Vec<(usize, usize)>> = vec![Vec::new(); schedule.steps + 1];
    for (k, &(row, _, step)) in schedule.gathers.iter().enumerate() {
        at_step[step].push((k, row));
    }
    let mut picked: Vec<Option<NodeId>> = vec![None; schedule.gathers.len()];
    let mut z = z0;
    for (step, wanted) in at_step.iter().enumerate() {
        if step > 0 {
            let (dt, dw) = schedule.inputs(plans, step - 1);
            let (dt, dw) = (tape.constant(dt), tape.constant(dw));
            z = euler_heun_step(tape, dynamics, z, dt, dw, scheme).map_err(step_error(step - 1))?;
            guard(tape.value(z), schedule.width, step - 1)?;
        }
        for &(k, row) in wanted {
            picked[k] = Some(tape.slice(z, 0, row, 1)?);
        }
    }
    let picked: Vec<NodeId> = picked.into_iter().map(|p| p.expect("every output gathered")).collect();
    let states = tape.concat(&picked, 0)?;
    Ok(BatchSolution {
        states,
        rows: schedule.gathers.iter().map(|g| g.0).collect(),
    })
}

/// Non-differentiable batched solve. Each step runs on a fresh tape built
/// by `make`, so memory stays constant in the number of steps.
pub fn solve_batch_values<D, M>(
    make: M,
    z0: &Tensor,
    plans: &[RowPlan],
    scheme: Scheme,
) -> Result<BatchSolution<Tensor>, SdeError>
where
    D: TapeDynamics,
    M: Fn(&mut Tape) -> D,
{
    let shape = z0.shape();
    if shape.len() != 2 || shape[0] != plans.len() {
        return Err(SdeError::InvalidGrid(format!(
            "initial state shape {shape:?} does not match {} rows",
            plans.len()
        )));
    }
    let width = shape[1];
    let schedule = BatchSchedule::new(plans, width)?;
    let mut out = vec![0.0; schedule.gathers.len() * width];
    let mut at_step: Vec<Vec<(usize, usize)>> = vec![Vec::new(); schedule.steps + 1];
    for (k, &(row, _, step)) in schedule.gathers.iter().enumerate() {
        at_step[step].push((k, row));
    }
    let mut z = z0.clone();
    for (step, wanted) in at_step.iter().enumerate() {
        if step > 0 {
            let mut tape = Tape::new();
            let dynamics = make(&mut tape);
            let (dt, dw) = schedule.inputs(plans, step - 1);
            let zi = tape.constant(z);
            let (dt, dw) = (tape.constant(dt), tape.constant(dw));
            let next = euler_heun_step(&mut tape, &dynamics, zi, dt, dw, scheme).map_err(step_error(step - 1))?;
            z = tape.value(next).clone();
            guard(&z, width, step - 1)?;
        }
        for &(k, row) in wanted {
            out[k * width..(k + 1) * width].copy_from_slice(&z.data()[row * width..(row + 1) * width]);
        }
    }
    Ok(BatchSolution {
        states: Tensor::matrix(schedule.gathers.len(), width, out)?,
        rows: schedule.gathers.iter().map(|g| g.0).collect(),
    })
}

/// Single-trajectory solve from `z0` (`[1, width]`); returns `[T, width]`
/// states at the grid's output times.
pub fn solve<D: TapeDynamics + ?Sized>(
    tape: &mut Tape,
    dynamics: &D,
    z0: NodeId,
    grid: &TimeGrid,
    path: &BrownianPath,
    scheme: Scheme,
) -> Result<NodeId, SdeError> {
    let plan = RowPlan {
        grid: grid.clone(),
        path: path.clone(),
    };
    Ok(solve_batch(tape, dynamics, z0, std::slice::from_ref(&plan), scheme)?.states)
}
