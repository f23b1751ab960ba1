//! State-vector simulation of the quantum convolutional classifier head.

mod circuit;
mod state;

pub use circuit::{qcn_layer, GateKind, Instr, LayerLayout, QcnCircuit, QcnConfig, QcnParams};
pub use state::{rx_matrix, ry_matrix, rz_matrix, x_matrix, Amp, Mat2, StateVector, MAX_QUBITS};
