//! Dense statevector register.
//!
//! Wire `q` of an `n`-qubit register is bit `n - 1 - q` of the basis index,
//! so wire 0 is the most significant bit and `|q0 q1 ...>` reads left to
//! right in index order.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Amp<T> = Complex<T>;

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 12;

/// 2x2 complex matrix in row-major order.
pub type Mat2<T> = [[Amp<T>; 2]; 2];

pub(crate) fn c<T: Real>(re: T, im: T) -> Amp<T> {
    Complex::new(re, im)
}

pub fn ry_matrix<T: Real>(theta: T) -> Mat2<T> {
    let half = theta / T::lit(2.0);
    let (s, co) = half.sin_cos();
    let z = T::zero();
    [[c(co, z), c(-s, z)], [c(s, z), c(co, z)]]
}

pub fn rz_matrix<T: Real>(phi: T) -> Mat2<T> {
    let half = phi / T::lit(2.0);
    let (s, co) = half.sin_cos();
    let z = T::zero();
    [[c(co, -s), c(z, z)], [c(z, z), c(co, s)]]
}

pub fn rx_matrix<T: Real>(phi: T) -> Mat2<T> {
    let half = phi / T::lit(2.0);
    let (s, co) = half.sin_cos();
    let z = T::zero();
    [[c(co, z), c(z, -s)], [c(z, -s), c(co, z)]]
}

pub fn x_matrix<T: Real>() -> Mat2<T> {
    let (z, o) = (T::zero(), T::one());
    [[c(z, z), c(o, z)], [c(o, z), c(z, z)]]
}

/// Register of `n` qubits holding `2^n` amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector<T> {
    n_qubits: usize,
    amps: Vec<Amp<T>>,
}

impl<T: Real> StateVector<T> {
    /// `|0...0>`.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        check_width(n_qubits)?;
        let mut amps = vec![c(T::zero(), T::zero()); 1 << n_qubits];
        amps[0] = c(T::one(), T::zero());
        Ok(Self { n_qubits, amps })
    }

    /// Computational basis state `|index>`.
    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        check_width(n_qubits)?;
        if index >= 1 << n_qubits {
            return Err(Error::Argument(format!("basis index {index} out of range")));
        }
        let mut amps = vec![c(T::zero(), T::zero()); 1 << n_qubits];
        amps[index] = c(T::one(), T::zero());
        Ok(Self { n_qubits, amps })
    }

    /// Amplitude encoding: `v / ||v||` as real amplitudes.
    pub fn amplitude_encode(v: &[T]) -> Result<Self> {
        if v.len() < 2 || !v.len().is_power_of_two() {
            return Err(Error::Argument(format!("amplitude encoding needs a power-of-two length >= 2, got {}", v.len())));
        }
        let n_qubits = v.len().trailing_zeros() as usize;
        check_width(n_qubits)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault("non-finite value in encoded vector".into()));
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm <= T::zero() {
            return Err(Error::Encoding("cannot amplitude-encode the zero vector".into()));
        }
        let amps = v.iter().map(|&x| c(x / norm, T::zero())).collect();
        Ok(Self { n_qubits, amps })
    }

    /// Wraps raw amplitudes; the caller is responsible for normalization.
    pub fn from_amplitudes(amps: Vec<Amp<T>>) -> Result<Self> {
        if amps.len() < 2 || !amps.len().is_power_of_two() {
            return Err(Error::Argument(format!("{} amplitudes is not a register", amps.len())));
        }
        let n_qubits = amps.len().trailing_zeros() as usize;
        check_width(n_qubits)?;
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Amp<T>] {
        &self.amps
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Amp<T>] {
        &mut self.amps
    }

    pub fn norm_sqr(&self) -> T {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn bit(&self, wire: usize) -> Result<usize> {
        if wire >= self.n_qubits {
            return Err(Error::Argument(format!("wire {wire} out of range for {} qubits", self.n_qubits)));
        }
        Ok(1 << (self.n_qubits - 1 - wire))
    }

    /// Applies a single-qubit gate.
    pub fn apply_single(&mut self, wire: usize, m: &Mat2<T>) -> Result<()> {
        let bit = self.bit(wire)?;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | bit]);
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[i | bit] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
        Ok(())
    }

    /// Applies `m` to `target` on the subspace where `control` is `|1>`.
    pub fn apply_controlled(&mut self, control: usize, target: usize, m: &Mat2<T>) -> Result<()> {
        let (cb, tb) = (self.bit(control)?, self.bit(target)?);
        if control == target {
            return Err(Error::Argument(format!("control and target are both wire {control}")));
        }
        for i in 0..self.amps.len() {
            if i & cb != 0 && i & tb == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | tb]);
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[i | tb] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
        Ok(())
    }

    pub fn apply_ry(&mut self, wire: usize, theta: T) -> Result<()> {
        self.apply_single(wire, &ry_matrix(theta))
    }

    pub fn apply_x(&mut self, wire: usize) -> Result<()> {
        self.apply_single(wire, &x_matrix())
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.apply_controlled(control, target, &x_matrix())
    }

    pub fn apply_crz(&mut self, control: usize, target: usize, phi: T) -> Result<()> {
        self.apply_controlled(control, target, &rz_matrix(phi))
    }

    pub fn apply_crx(&mut self, control: usize, target: usize, phi: T) -> Result<()> {
        self.apply_controlled(control, target, &rx_matrix(phi))
    }

    /// Convolution unitary `CNOT(a -> b) . (Ry(theta0) on a  x  Ry(theta1) on b)`.
    pub fn conv_unitary(&mut self, (a, b): (usize, usize), theta0: T, theta1: T) -> Result<()> {
        check_pair(self.n_qubits, a, b)?;
        self.apply_ry(a, theta0)?;
        self.apply_ry(b, theta1)?;
        self.apply_cnot(a, b)
    }

    /// Pooling unitary: `CRz(phi)` controlled by `drop` on `keep`, `X` on
    /// `drop`, then `CRx(phi)` controlled by `drop` on `keep`.
    pub fn pool_op(&mut self, (keep, drop): (usize, usize), phi: T) -> Result<()> {
        check_pair(self.n_qubits, keep, drop)?;
        self.apply_crz(drop, keep, phi)?;
        self.apply_x(drop)?;
        self.apply_crx(drop, keep, phi)
    }

    /// Marginal basis probabilities `[p(0), p(1)]` of one wire.
    pub fn measure_probs(&self, wire: usize) -> Result<[T; 2]> {
        let bit = self.bit(wire)?;
        let mut p = [T::zero(), T::zero()];
        for (i, a) in self.amps.iter().enumerate() {
            p[usize::from(i & bit != 0)] += a.norm_sqr();
        }
        Ok(p)
    }
}

fn check_width(n: usize) -> Result<()> {
    if n == 0 || n > MAX_QUBITS {
        return Err(Error::Argument(format!("register width {n} outside 1..={MAX_QUBITS}")));
    }
    Ok(())
}

fn check_pair(n: usize, a: usize, b: usize) -> Result<()> {
    if a >= n || b >= n {
        return Err(Error::Argument(format!("wire pair ({a}, {b}) out of range for {n} qubits")));
    }
    if a == b {
        return Err(Error::Argument(format!("wire pair ({a}, {b}) is not distinct")));
    }
    Ok(())
}
