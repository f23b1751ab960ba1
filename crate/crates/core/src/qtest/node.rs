//! The teacher-student node: two base networks sharing one circuit.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore, Tape, Var};
use crate::qcn::{qcn_layer, QcnCircuit, QcnConfig, QcnParams};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::network::{l2_tanh_rows, BaseConfig, BaseNetwork, EVAL_CHUNK};

/// EMA coefficient of the teacher.
pub const DEFAULT_MU: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug)]
pub struct NodeModel<T> {
    pub student: BaseNetwork<T>,
    pub teacher: BaseNetwork<T>,
    pub circuit: Arc<QcnCircuit>,
    /// Shared by both roles.
    pub angles: QcnParams<T>,
    pub mu: f64,
    pub omega: f64,
    /// Images per forward pass in [`NodeModel::predict_probs`].
    pub eval_batch: usize,
}

/// Leaves recorded by one [`NodeModel::forward`].
pub struct NodeForward {
    pub probs: Var,
    pub base_vars: Vec<Var>,
    pub angles: Var,
}

impl<T: Real> NodeModel<T> {
    /// Student and teacher are initialized from independent streams of `seed`.
    pub fn new(base: &BaseConfig, qcn: QcnConfig, in_ch: usize, mu: f64, omega: f64, seed: u64) -> Result<Self> {
        let circuit = Arc::new(QcnCircuit::new(qcn)?);
        if base.proj != circuit.input_dim() {
            return Err(Error::Argument(format!(
                "projection width {} must equal 2^{} = {}",
                base.proj,
                circuit.n_qubits(),
                circuit.input_dim()
            )));
        }
        let student = BaseNetwork::new(base, in_ch, &mut rng::stream(seed, "node.student"))?;
        let teacher = BaseNetwork::new(base, in_ch, &mut rng::stream(seed, "node.teacher"))?;
        let angles = QcnParams::random(&circuit, &mut rng::stream(seed, "node.qcn"));
        Ok(Self { student, teacher, circuit, angles, mu, omega, eval_batch: EVAL_CHUNK })
    }

    pub fn net(&self, role: Role) -> &BaseNetwork<T> {
        match role {
            Role::Teacher => &self.teacher,
            Role::Student => &self.student,
        }
    }

    fn net_mut(&mut self, role: Role) -> &mut BaseNetwork<T> {
        match role {
            Role::Teacher => &mut self.teacher,
            Role::Student => &mut self.student,
        }
    }

    /// Base network, projection, L2-tanh and circuit: `[N, h, w, ch]` to
    /// `[N, 2]` probabilities. `train` selects batch statistics (and updates
    /// that role's running averages); `trainable` marks the base parameters
    /// and the angles as requiring gradients.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, role: Role, train: bool, trainable: bool) -> Result<NodeForward> {
        let net = self.net(role);
        let base_vars = net.params.bind(tape, trainable)?;
        let mut buffers = net.buffers.clone();
        let f = {
            let mut cx = Ctx { tape, vars: &base_vars, buffers: &mut buffers, train };
            let f = net.features(&mut cx, x)?;
            net.project(&mut cx, f)?
        };
        self.net_mut(role).buffers = buffers;
        let f = l2_tanh_rows(tape, f, T::lit(self.omega))?;
        let angles = tape.leaf(self.angles.as_tensor(), trainable)?;
        let probs = qcn_layer(tape, &self.circuit, f, angles)?;
        Ok(NodeForward { probs, base_vars, angles })
    }

    /// Evaluation-mode probabilities for a set of images.
    pub fn predict_probs(&mut self, images: &[Tensor<T>], role: Role) -> Result<Vec<[T; 2]>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.eval_batch.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(chunk)?)?;
            let fw = self.forward(&mut tape, x, role, false, false)?;
            let p = tape.value(fw.probs);
            out.extend((0..chunk.len()).map(|r| [p.row(r)[0], p.row(r)[1]]));
        }
        Ok(out)
    }

    /// `theta_teacher <- mu theta_teacher + (1 - mu) theta_student` over the
    /// base-network parameters; the shared angles are untouched.
    pub fn ema_step(&mut self) -> Result<()> {
        ema_update(&mut self.teacher.params, &self.student.params, self.mu)
    }
}

pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, mu: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    let (m, one_m) = (T::lit(mu), T::lit(1.0 - mu));
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        t.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a = m * *a + one_m * b);
    }
    Ok(())
}

/// Sum over samples of the squared Euclidean distance between rows.
pub fn consistency_loss<T: Real>(tape: &mut Tape<T>, teacher: Var, student: Var) -> Result<Var> {
    let (a, b) = (tape.value(teacher).shape().to_vec(), tape.value(student).shape().to_vec());
    if a != b {
        return Err(Error::Shape(format!("consistency between {a:?} and {b:?}")));
    }
    let d = tape.sub(student, teacher)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}
