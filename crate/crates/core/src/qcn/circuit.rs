//! The quantum convolutional network: a ladder of convolution and pooling
//! unitaries over amplitude-encoded features, read out on a single wire.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::{rx_matrix, ry_matrix, rz_matrix, x_matrix, StateVector};
use crate::error::{Error, Result};
use crate::nn::{CustomBackward, Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    Ry,
    X,
    Cnot,
    Crz,
    Crx,
}

impl GateKind {
    fn is_controlled_rotation(self) -> bool {
        matches!(self, GateKind::Crz | GateKind::Crx)
    }
}

/// One gate of the circuit. Single-qubit gates use `wires.0`; two-qubit gates
/// use `(control, target)`. `param` indexes the angle vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instr {
    pub kind: GateKind,
    pub wires: (usize, usize),
    pub param: Option<usize>,
}

/// Where each layer's angles live in the flat angle vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub active: Vec<usize>,
    /// `(keep, drop)` pairs; the convolution acts on `(keep, drop)` too.
    pub pairs: Vec<(usize, usize)>,
    /// `[theta0, theta1]` indices for each pair.
    pub conv: Vec<[usize; 2]>,
    /// Pool angle index for each pair.
    pub pool: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcnConfig {
    pub qubits: usize,
    pub layers: usize,
    /// Measured wire; `None` measures the last active qubit.
    pub wire: Option<usize>,
}

impl Default for QcnConfig {
    fn default() -> Self {
        Self { qubits: 8, layers: 3, wire: None }
    }
}

/// Compiled circuit: gate list plus angle layout.
#[derive(Clone, Debug, PartialEq)]
pub struct QcnCircuit {
    n_qubits: usize,
    instrs: Vec<Instr>,
    layers: Vec<LayerLayout>,
    n_params: usize,
    wire: usize,
    final_active: Vec<usize>,
}

/// Trainable rotation angles (radians) of a [`QcnCircuit`].
#[derive(Clone, Debug, PartialEq)]
pub struct QcnParams<T> {
    pub angles: Vec<T>,
}

impl<T: Real> QcnParams<T> {
    pub fn zeros(circuit: &QcnCircuit) -> Self {
        Self { angles: vec![T::zero(); circuit.n_params()] }
    }

    /// Angles drawn uniformly from `[-pi, pi)`.
    pub fn random(circuit: &QcnCircuit, rng: &mut impl Rng) -> Self {
        let pi = std::f64::consts::PI;
        Self { angles: (0..circuit.n_params()).map(|_| T::lit(rng.random_range(-pi..pi))).collect() }
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.angles.clone())
    }
}

impl QcnCircuit {
    /// Builds the ladder: each layer pairs adjacent active qubits
    /// `(a0,a1), (a2,a3), ...`, applies the convolution unitary to every pair,
    /// then pools every pair keeping its first member.
    pub fn new(config: QcnConfig) -> Result<Self> {
        let n = config.qubits;
        if !(2..=super::state::MAX_QUBITS).contains(&n) {
            return Err(Error::Argument(format!("qcn needs 2..={} qubits, got {n}", super::state::MAX_QUBITS)));
        }
        if config.layers == 0 {
            return Err(Error::Argument("qcn needs at least one layer".into()));
        }
        let mut active: Vec<usize> = (0..n).collect();
        let mut instrs = Vec::new();
        let mut layers = Vec::new();
        let mut next = 0usize;
        for layer in 0..config.layers {
            if active.len() < 2 {
                return Err(Error::Argument(format!(
                    "{} layers exceed what {n} qubits can pool (stopped at layer {layer})",
                    config.layers
                )));
            }
            let pairs: Vec<(usize, usize)> = active.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            let mut conv = Vec::with_capacity(pairs.len());
            for &(a, b) in &pairs {
                let (p0, p1) = (next, next + 1);
                next += 2;
                instrs.push(Instr { kind: GateKind::Ry, wires: (a, a), param: Some(p0) });
                instrs.push(Instr { kind: GateKind::Ry, wires: (b, b), param: Some(p1) });
                instrs.push(Instr { kind: GateKind::Cnot, wires: (a, b), param: None });
                conv.push([p0, p1]);
            }
            let mut pool = Vec::with_capacity(pairs.len());
            for &(keep, drop) in &pairs {
                let p = next;
                next += 1;
                instrs.push(Instr { kind: GateKind::Crz, wires: (drop, keep), param: Some(p) });
                instrs.push(Instr { kind: GateKind::X, wires: (drop, drop), param: None });
                instrs.push(Instr { kind: GateKind::Crx, wires: (drop, keep), param: Some(p) });
                pool.push(p);
            }
            let layout_active = active.clone();
            let mut survivors: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            if active.len() % 2 == 1 {
                survivors.push(*active.last().unwrap());
            }
            layers.push(LayerLayout { active: layout_active, pairs, conv, pool });
            active = survivors;
        }
        let wire = config.wire.unwrap_or(*active.last().unwrap());
        if wire >= n {
            return Err(Error::Argument(format!("measured wire {wire} out of range for {n} qubits")));
        }
        Ok(Self { n_qubits: n, instrs, layers, n_params: next, wire, final_active: active })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn wire(&self) -> usize {
        self.wire
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn final_active(&self) -> &[usize] {
        &self.final_active
    }

    fn check_angles<T: Real>(&self, angles: &[T]) -> Result<()> {
        if angles.len() != self.n_params {
            return Err(Error::Shape(format!("qcn expects {} angles, got {}", self.n_params, angles.len())));
        }
        Ok(())
    }

    fn apply<T: Real>(&self, s: &mut StateVector<T>, ins: &Instr, angle: T, inverse: bool) -> Result<()> {
        let a = if inverse { -angle } else { angle };
        let (w0, w1) = ins.wires;
        match ins.kind {
            GateKind::Ry => s.apply_single(w0, &ry_matrix(a)),
            GateKind::X => s.apply_single(w0, &x_matrix()),
            GateKind::Cnot => s.apply_controlled(w0, w1, &x_matrix()),
            GateKind::Crz => s.apply_controlled(w0, w1, &rz_matrix(a)),
            GateKind::Crx => s.apply_controlled(w0, w1, &rx_matrix(a)),
        }
    }

    fn angle_of<T: Real>(ins: &Instr, angles: &[T]) -> T {
        ins.param.map_or(T::zero(), |p| angles[p])
    }

    /// Applies gates `range` in order; `shift` adds to one gate's angle.
    fn run_range<T: Real>(
        &self,
        s: &mut StateVector<T>,
        angles: &[T],
        range: std::ops::Range<usize>,
        shift: Option<(usize, T)>,
    ) -> Result<()> {
        for j in range {
            let ins = &self.instrs[j];
            let mut a = Self::angle_of(ins, angles);
            if let Some((g, d)) = shift {
                if g == j {
                    a += d;
                }
            }
            self.apply(s, ins, a, false)?;
        }
        Ok(())
    }

    /// Runs the ansatz on an already encoded state.
    pub fn evolve<T: Real>(&self, mut s: StateVector<T>, angles: &[T]) -> Result<StateVector<T>> {
        self.check_angles(angles)?;
        if s.n_qubits() != self.n_qubits {
            return Err(Error::Shape(format!("state has {} qubits, circuit {}", s.n_qubits(), self.n_qubits)));
        }
        self.run_range(&mut s, angles, 0..self.instrs.len(), None)?;
        Ok(s)
    }

    /// Encode, evolve and measure: `[p(0), p(1)]` of the measured wire.
    pub fn forward<T: Real>(&self, v: &[T], angles: &[T]) -> Result<[T; 2]> {
        if v.len() != self.input_dim() {
            return Err(Error::Shape(format!("qcn input has {} values, expected {}", v.len(), self.input_dim())));
        }
        let s = self.evolve(StateVector::amplitude_encode(v)?, angles)?;
        s.measure_probs(self.wire)
    }

    /// `d p(0) / d angles[k]` by the parameter-shift rule. Every gate that
    /// uses the angle contributes: `Ry` through the two-term rule, the
    /// controlled rotations through the four-term rule their spectrum needs.
    pub fn parameter_shift_grad<T: Real>(&self, v: &[T], angles: &[T], k: usize) -> Result<T> {
        if k >= self.n_params {
            return Err(Error::Argument(format!("angle index {k} out of range {}", self.n_params)));
        }
        self.check_angles(angles)?;
        let psi = StateVector::amplitude_encode(v)?;
        Ok(self.shift_grads(&psi, angles, Some(k))?[k])
    }

    /// `d p(0) / d angles` for every angle.
    pub fn parameter_shift_grads<T: Real>(&self, v: &[T], angles: &[T]) -> Result<Vec<T>> {
        self.check_angles(angles)?;
        let psi = StateVector::amplitude_encode(v)?;
        self.shift_grads(&psi, angles, None)
    }

    fn shift_grads<T: Real>(&self, psi: &StateVector<T>, angles: &[T], only: Option<usize>) -> Result<Vec<T>> {
        let mut grads = vec![T::zero(); self.n_params];
        let half_pi = T::FRAC_PI_2();
        let two = T::lit(2.0);
        let root2 = two.sqrt();
        let c_plus = (root2 + T::one()) / (T::lit(4.0) * root2);
        let c_minus = (root2 - T::one()) / (T::lit(4.0) * root2);
        let mut prefix = psi.clone();
        let end = self.instrs.len();
        for (j, ins) in self.instrs.iter().enumerate() {
            if let Some(k) = ins.param.filter(|&k| only.is_none_or(|o| o == k)) {
                let eval = |shift: T| -> Result<T> {
                    let mut s = prefix.clone();
                    self.run_range(&mut s, angles, j..end, Some((j, shift)))?;
                    Ok(s.measure_probs(self.wire)?[0])
                };
                let d = if ins.kind.is_controlled_rotation() {
                    let three = T::lit(3.0);
                    c_plus * (eval(half_pi)? - eval(-half_pi)?) - c_minus * (eval(three * half_pi)? - eval(-three * half_pi)?)
                } else {
                    (eval(half_pi)? - eval(-half_pi)?) / two
                };
                grads[k] += d;
            }
            self.apply(&mut prefix, ins, Self::angle_of(ins, angles), false)?;
        }
        Ok(grads)
    }

    /// Gradient of `a * p(0) + b * p(1)` with respect to the unnormalized
    /// input `v`, by one adjoint sweep through the inverse gates.
    pub fn input_grad<T: Real>(&self, v: &[T], angles: &[T], a: T, b: T) -> Result<Vec<T>> {
        self.check_angles(angles)?;
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let psi = StateVector::amplitude_encode(v)?;
        let mut phi = self.evolve(psi.clone(), angles)?;
        let bit = 1usize << (self.n_qubits - 1 - self.wire);
        for (i, amp) in phi.amplitudes_mut().iter_mut().enumerate() {
            *amp *= if i & bit == 0 { a } else { b };
        }
        for ins in self.instrs.iter().rev() {
            self.apply(&mut phi, ins, Self::angle_of(ins, angles), true)?;
        }
        let two = T::lit(2.0);
        let g_psi: Vec<T> = phi.amplitudes().iter().map(|l| two * l.re).collect();
        let dot: T = psi.amplitudes().iter().zip(&g_psi).map(|(p, &g)| p.re * g).sum();
        Ok(psi.amplitudes().iter().zip(&g_psi).map(|(p, &g)| (g - p.re * dot) / norm).collect())
    }
}

struct QcnBackward {
    circuit: Arc<QcnCircuit>,
}

impl<T: Real> CustomBackward<T> for QcnBackward {
    fn name(&self) -> &'static str {
        "qcn"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, angles) = (inputs[0], inputs[1].data());
        let n = x.shape()[0];
        let d = self.circuit.input_dim();
        let mut gx = vec![T::zero(); n * d];
        let mut ga = vec![T::zero(); angles.len()];
        for r in 0..n {
            let (a, b) = (g[2 * r], g[2 * r + 1]);
            let row = x.row(r);
            gx[r * d..(r + 1) * d].copy_from_slice(&self.circuit.input_grad(row, angles, a, b)?);
            // p(1) = 1 - p(0) on normalized states
            let coeff = a - b;
            if coeff != T::zero() {
                for (acc, dp) in ga.iter_mut().zip(self.circuit.parameter_shift_grads(row, angles)?) {
                    *acc += coeff * dp;
                }
            }
        }
        Ok(vec![Some(gx), Some(ga)])
    }
}

/// Records the circuit on a tape: `x: [N, 2^n]`, `angles: [P]` -> `[N, 2]`.
pub fn qcn_layer<T: Real>(tape: &mut Tape<T>, circuit: &Arc<QcnCircuit>, x: Var, angles: Var) -> Result<Var> {
    let tx = tape.value(x);
    let [n, d] = *tx.shape() else {
        return Err(Error::Shape(format!("qcn layer expects [N, {}], got {:?}", circuit.input_dim(), tx.shape())));
    };
    if d != circuit.input_dim() {
        return Err(Error::Shape(format!("qcn layer expects {} features, got {d}", circuit.input_dim())));
    }
    let ta = tape.value(angles).data().to_vec();
    let mut out = Vec::with_capacity(2 * n);
    for r in 0..n {
        out.extend(circuit.forward(tx.row(r), &ta)?);
    }
    let out = Tensor::new(vec![n, 2], out)?;
    tape.custom(&[x, angles], out, Box::new(QcnBackward { circuit: Arc::clone(circuit) }))
}
