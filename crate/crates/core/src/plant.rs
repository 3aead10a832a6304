//! Discrete-time dynamics, input boxes and trajectory rollouts.

use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// Componentwise tolerance for box membership.
pub const BOX_TOL: f64 = 1e-12;

/// Componentwise tolerance for trajectory consistency checks.
pub const TRAJECTORY_TOL: f64 = 1e-12;

/// A pure map `(x, u) -> x⁺`.
///
/// Rollouts, costs and the DP oracle are written against this trait so the
/// blocking machinery does not depend on the dynamics being linear.
pub trait StateMap {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Successor state. Callers guarantee the dimensions.
    fn next_state(&self, x: &Vector, u: &Vector) -> Vector;

    fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(self.next_state(x, u))
    }
}

/// Adapter turning a closure into a [`StateMap`].
pub struct FnStateMap<F> {
    state_dim: usize,
    input_dim: usize,
    f: F,
}

impl<F> FnStateMap<F>
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    pub fn new(state_dim: usize, input_dim: usize, f: F) -> Self {
        Self {
            state_dim,
            input_dim,
            f,
        }
    }
}

impl<F> StateMap for FnStateMap<F>
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn next_state(&self, x: &Vector, u: &Vector) -> Vector {
        (self.f)(x, u)
    }
}

/// Linear time-invariant plant `x⁺ = A x + B u`, `y = C x`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    A: Matrix,
    B: Matrix,
    C: Matrix,
}

#[allow(non_snake_case)]
impl LinearPlant {
    pub fn new(A: Matrix, B: Matrix, C: Matrix) -> Result<Self> {
        let n = A.nrows();
        if n == 0 {
            return Err(Error::contract("state dimension must be positive"));
        }
        check_dim("A columns", n, A.ncols())?;
        check_dim("B rows", n, B.nrows())?;
        check_dim("C columns", n, C.ncols())?;
        if B.ncols() == 0 {
            return Err(Error::contract("input dimension must be positive"));
        }
        let finite = |m: &Matrix| m.iter().all(|v| v.is_finite());
        if !(finite(&A) && finite(&B) && finite(&C)) {
            return Err(Error::contract("plant matrices must be finite"));
        }
        Ok(Self { A, B, C })
    }

    /// Plant whose full state is the output.
    pub fn with_full_output(A: Matrix, B: Matrix) -> Result<Self> {
        let n = A.nrows();
        Self::new(A, B, Matrix::identity(n, n))
    }

    pub fn a(&self) -> &Matrix {
        &self.A
    }

    pub fn b(&self) -> &Matrix {
        &self.B
    }

    pub fn c(&self) -> &Matrix {
        &self.C
    }

    pub fn output_dim(&self) -> usize {
        self.C.nrows()
    }

    pub fn output(&self, x: &Vector) -> Result<Vector> {
        check_dim("state", self.state_dim(), x.len())?;
        Ok(&self.C * x)
    }
}

impl StateMap for LinearPlant {
    fn state_dim(&self) -> usize {
        self.A.nrows()
    }

    fn input_dim(&self) -> usize {
        self.B.ncols()
    }

    fn next_state(&self, x: &Vector, u: &Vector) -> Vector {
        &self.A * x + &self.B * u
    }
}

/// Per-channel input bounds. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    lower: Vector,
    upper: Vector,
}

impl InputBox {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if lo.is_nan() || hi.is_nan() {
                return Err(Error::contract(format!("box channel {i} has a NaN bound")));
            }
            if lo > hi {
                return Err(Error::contract(format!(
                    "box channel {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Same `[lo, hi]` interval on every one of `m` channels.
    pub fn uniform(m: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(Vector::from_element(m, lo), Vector::from_element(m, hi))
    }

    pub fn unbounded(m: usize) -> Self {
        Self {
            lower: Vector::from_element(m, f64::NEG_INFINITY),
            upper: Vector::from_element(m, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&lo, &hi))| v.max(lo).min(hi)),
        )
    }

    pub fn contains(&self, u: &Vector) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(&v, (&lo, &hi))| v >= lo - BOX_TOL && v <= hi + BOX_TOL)
    }
}

/// Ordered input samples over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    input_dim: usize,
    samples: Vec<Vector>,
}

impl ControlSequence {
    pub fn new(input_dim: usize, samples: Vec<Vector>) -> Result<Self> {
        for s in &samples {
            check_dim("control sample", input_dim, s.len())?;
        }
        Ok(Self { input_dim, samples })
    }

    /// Builds a sequence and checks every sample against `bounds`.
    pub fn within(bounds: &InputBox, samples: Vec<Vector>) -> Result<Self> {
        let seq = Self::new(bounds.dim(), samples)?;
        seq.check_box(bounds)?;
        Ok(seq)
    }

    pub fn zeros(input_dim: usize, len: usize) -> Self {
        Self {
            input_dim,
            samples: vec![Vector::zeros(input_dim); len],
        }
    }

    pub fn empty(input_dim: usize) -> Self {
        Self::zeros(input_dim, 0)
    }

    /// Scalar-input sequence from plain values.
    pub fn scalar(values: &[f64]) -> Self {
        Self {
            input_dim: 1,
            samples: values.iter().map(|&v| Vector::from_element(1, v)).collect(),
        }
    }

    /// Splits a stacked vector `[u(0); u(1); ...]` into samples of size `input_dim`.
    pub fn from_stacked(input_dim: usize, stacked: &Vector) -> Result<Self> {
        if input_dim == 0 || !stacked.len().is_multiple_of(input_dim) {
            return Err(Error::contract(format!(
                "stacked length {} is not a multiple of input dimension {input_dim}",
                stacked.len()
            )));
        }
        let samples = stacked
            .as_slice()
            .chunks(input_dim)
            .map(Vector::from_column_slice)
            .collect();
        Ok(Self { input_dim, samples })
    }

    pub fn to_stacked(&self) -> Vector {
        Vector::from_iterator(
            self.samples.len() * self.input_dim,
            self.samples.iter().flat_map(|s| s.iter().copied()),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vector] {
        &self.samples
    }

    pub fn get(&self, k: usize) -> Option<&Vector> {
        self.samples.get(k)
    }

    pub fn first(&self) -> Option<&Vector> {
        self.samples.first()
    }

    /// Copy of samples `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            input_dim: self.input_dim,
            samples: self.samples[range].to_vec(),
        }
    }

    /// Last `count` samples.
    pub fn tail(&self, count: usize) -> Self {
        self.slice(self.len() - count..self.len())
    }

    pub fn concat(&self, other: &ControlSequence) -> Result<Self> {
        check_dim("concatenated input", self.input_dim, other.input_dim)?;
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(Self {
            input_dim: self.input_dim,
            samples,
        })
    }

    pub fn push(&mut self, u: Vector) -> Result<()> {
        check_dim("control sample", self.input_dim, u.len())?;
        self.samples.push(u);
        Ok(())
    }

    pub fn check_box(&self, bounds: &InputBox) -> Result<()> {
        check_dim("box", self.input_dim, bounds.dim())?;
        match self.samples.iter().position(|u| !bounds.contains(u)) {
            None => Ok(()),
            Some(k) => Err(Error::contract(format!(
                "control sample {k} = {:?} lies outside the input box",
                self.samples[k].as_slice()
            ))),
        }
    }
}

/// States `x(0..=L)` and the inputs `u(0..L)` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<Vector>,
    inputs: ControlSequence,
}

impl Trajectory {
    /// Starts a trajectory at `x0` with no inputs applied yet.
    pub fn start(x0: Vector, input_dim: usize) -> Self {
        Self {
            states: vec![x0],
            inputs: ControlSequence::empty(input_dim),
        }
    }

    pub fn from_parts(states: Vec<Vector>, inputs: ControlSequence) -> Result<Self> {
        if states.len() != inputs.len() + 1 {
            return Err(Error::contract(format!(
                "trajectory needs {} states for {} inputs, got {}",
                inputs.len() + 1,
                inputs.len(),
                states.len()
            )));
        }
        Ok(Self { states, inputs })
    }

    /// Applies `u` through `map` and appends the result.
    pub fn advance<M: StateMap + ?Sized>(&mut self, map: &M, u: Vector) -> Result<&Vector> {
        let next = map.step(self.last_state(), &u)?;
        self.inputs.push(u)?;
        self.states.push(next);
        Ok(self.last_state())
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn inputs(&self) -> &ControlSequence {
        &self.inputs
    }

    /// Number of applied inputs.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn last_state(&self) -> &Vector {
        self.states.last().expect("trajectory always has an initial state")
    }

    /// Pairs `(x(k), u(k))` for every applied input.
    pub fn stages(&self) -> impl Iterator<Item = (&Vector, &Vector)> {
        self.states.iter().zip(self.inputs.samples())
    }

    /// First `k` steps of the trajectory.
    pub fn prefix(&self, k: usize) -> Self {
        Self {
            states: self.states[..=k].to_vec(),
            inputs: self.inputs.slice(0..k),
        }
    }

    /// Checks `states[k+1] == map(states[k], inputs[k])` componentwise.
    pub fn is_consistent<M: StateMap + ?Sized>(&self, map: &M, tol: f64) -> bool {
        self.stages().zip(&self.states[1..]).all(|((x, u), next)| {
            let pred = map.next_state(x, u);
            pred.iter().zip(next.iter()).all(|(a, b)| (a - b).abs() <= tol)
        })
    }
}

/// Simulates `useq` from `x0` through `map`.
pub fn rollout<M: StateMap + ?Sized>(
    map: &M,
    x0: &Vector,
    useq: &ControlSequence,
) -> Result<Trajectory> {
    if useq.is_empty() {
        return Err(Error::contract("rollout needs a nonempty control sequence"));
    }
    check_dim("initial state", map.state_dim(), x0.len())?;
    check_dim("control sequence", map.input_dim(), useq.input_dim())?;
    let mut traj = Trajectory::start(x0.clone(), useq.input_dim());
    for u in useq.samples() {
        traj.advance(map, u.clone())?;
    }
    Ok(traj)
}

/// Final state after applying `useq` from `x0`; `x0` itself for an empty sequence.
pub fn propagate<M: StateMap + ?Sized>(
    map: &M,
    x0: &Vector,
    useq: &ControlSequence,
) -> Result<Vector> {
    check_dim("initial state", map.state_dim(), x0.len())?;
    let mut x = x0.clone();
    for u in useq.samples() {
        x = map.step(&x, u)?;
    }
    Ok(x)
}
