//! The gate-level simulator driven side by side with the dense oracle.

use hsemis::qcn::{rx_matrix, rz_matrix, Amp, QcnCircuit, QcnConfig, StateVector};
use rand::Rng;

use super::{c, fd_gradient, rng, uniform_vec, Matrix, C};

pub fn random_state(r: &mut impl Rng, n: usize) -> Vec<C> {
    let raw: Vec<C> = (0..1 << n).map(|_| c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect();
    let norm = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    raw.into_iter().map(|a| a / norm).collect()
}

pub fn to_state(amps: &[C]) -> StateVector<f64> {
    StateVector::from_amplitudes(amps.iter().map(|a| Amp::new(a.re, a.im)).collect()).unwrap()
}

pub fn max_diff(a: &[Amp<f64>], b: &[C]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x.re - y.re).powi(2) + (x.im - y.im).powi(2)).sqrt()).fold(0.0, f64::max)
}

pub fn two_wires(r: &mut impl Rng, n: usize) -> (usize, usize) {
    let a = r.random_range(0..n);
    let mut b = r.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Applies one random gate to both representations.
pub fn random_gate(r: &mut impl Rng, n: usize, s: &mut StateVector<f64>) -> Matrix {
    let theta = r.random_range(-std::f64::consts::TAU..std::f64::consts::TAU);
    let (a, b) = two_wires(r, n);
    match r.random_range(0..9) {
        0 => {
            s.apply_ry(a, theta).unwrap();
            super::single(n, a, &super::ry(theta))
        }
        1 => {
            s.apply_x(a).unwrap();
            super::single(n, a, &super::pauli_x())
        }
        2 => {
            s.apply_single(a, &rz_matrix(theta)).unwrap();
            super::single(n, a, &super::rz(theta))
        }
        3 => {
            s.apply_single(a, &rx_matrix(theta)).unwrap();
            super::single(n, a, &super::rx(theta))
        }
        4 => {
            s.apply_cnot(a, b).unwrap();
            super::controlled(n, a, b, &super::pauli_x())
        }
        5 => {
            s.apply_crz(a, b, theta).unwrap();
            super::controlled(n, a, b, &super::rz(theta))
        }
        6 => {
            s.apply_crx(a, b, theta).unwrap();
            super::controlled(n, a, b, &super::rx(theta))
        }
        7 => {
            let t1 = r.random_range(-3.0..3.0);
            s.conv_unitary((a, b), theta, t1).unwrap();
            super::conv_unitary(n, a, b, theta, t1)
        }
        _ => {
            s.pool_op((a, b), theta).unwrap();
            super::pool_unitary(n, a, b, theta)
        }
    }
}

/// Worst amplitude error and worst norm drift over `sequences` random gate
/// sequences on 2 to 4 qubits.
pub fn gate_sequence_errors(sequences: u64) -> (f64, f64) {
    let (mut amp, mut norm) = (0.0f64, 0.0f64);
    for seed in 0..sequences {
        let mut r = rng(seed);
        let n = r.random_range(2..5);
        let mut want = random_state(&mut r, n);
        let mut s = to_state(&want);
        for _ in 0..r.random_range(1..12) {
            let u = random_gate(&mut r, n, &mut s);
            want = super::apply(&u, &want);
        }
        amp = amp.max(max_diff(s.amplitudes(), &want));
        norm = norm.max((s.norm_sqr() - 1.0).abs());
    }
    (amp, norm)
}

/// Worst gap between parameter-shift and central-difference gradients of
/// `p(0)` over every angle of the default 8-qubit, 3-layer circuit.
pub fn parameter_shift_error(trials: u64) -> f64 {
    let circuit = QcnCircuit::new(QcnConfig::default()).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut r = rng(40 + seed);
        let angles = uniform_vec(&mut r, circuit.n_params(), -3.0, 3.0);
        let v = uniform_vec(&mut r, circuit.input_dim(), -1.0, 1.0);
        let shift = circuit.parameter_shift_grads(&v, &angles).unwrap();
        let fd = fd_gradient(&angles, 1e-5, |a| circuit.forward(&v, a).unwrap()[0]);
        worst = shift.iter().zip(&fd).map(|(s, f)| (s - f).abs()).fold(worst, f64::max);
    }
    worst
}
