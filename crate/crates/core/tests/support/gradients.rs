//! Central finite-difference checks of every differentiable tape primitive
//! and of the full node forward pass.

use std::sync::Arc;

use hsemis::nn::{NormKind, Tape, Var};
use hsemis::qcn::{qcn_layer, QcnCircuit, QcnConfig};
use hsemis::qtest::{l2_tanh_rows, BaseConfig, NodeModel, Role};
use hsemis::tensor::Tensor;
use rand::Rng;

use super::{away_from_zero, fd_gradient, rel_error, rng, uniform_vec};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CONFIGS: u64 = 20;

/// Worst relative error of one primitive over its random configurations.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub configs: u64,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.configs >= CONFIGS && self.worst < TOL
    }
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;
type Case = (Vec<Tensor<f64>>, Box<Build>);

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    tensor(shape, uniform_vec(r, n, -1.0, 1.0))
}

fn rand_dims(r: &mut impl Rng) -> [usize; 2] {
    [r.random_range(1..5), r.random_range(1..6)]
}

/// Scalar loss: the output contracted with fixed random weights (or the
/// output itself when it is already a scalar).
fn loss_of(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let len = tape.value(out).len();
    if len == 1 {
        return out;
    }
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(tensor(&shape, uniform_vec(&mut rng(seed ^ 0xfeed), len, -1.0, 1.0))).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn eval(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    let loss = loss_of(&mut tape, out, seed);
    tape.value(loss).item().unwrap()
}

/// Relative error between the tape's gradient of every input and central
/// differences of the same loss.
pub fn check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    let loss = loss_of(&mut tape, out, seed);
    tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        analytic.extend(tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]));
        numeric.extend(fd_gradient(t.data(), H, |x| {
            let mut moved = inputs.to_vec();
            moved[i] = tensor(t.shape(), x.to_vec());
            eval(&moved, build, seed)
        }));
    }
    rel_error(&analytic, &numeric)
}

fn run(name: &'static str, case: impl Fn(u64) -> Case) -> GradCheck {
    let worst = (0..CONFIGS)
        .map(|seed| {
            let (inputs, build) = case(seed);
            check(&inputs, build.as_ref(), seed)
        })
        .fold(0.0, f64::max);
    GradCheck { name, configs: CONFIGS, worst }
}

/// A random small convolution geometry.
pub struct ConvCase {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_case(r: &mut impl Rng) -> ConvCase {
    let k = [1, 2, 3][r.random_range(0..3)];
    ConvCase {
        n: r.random_range(1..3),
        h: r.random_range(k.max(2)..6),
        w: r.random_range(k.max(2)..6),
        cin: r.random_range(1..4),
        cout: r.random_range(1..4),
        k,
        stride: r.random_range(1..3),
        pad: r.random_range(0..k.min(2)),
    }
}

/// Every primitive, in tape order.
pub fn primitive_cases() -> Vec<(&'static str, Box<dyn Fn(u64) -> Case>)> {
    fn binary(op: fn(&mut Tape<f64>, Var, Var) -> hsemis::Result<Var>) -> Box<dyn Fn(u64) -> Case> {
        Box::new(move |seed| {
            let mut r = rng(seed);
            let s = rand_dims(&mut r);
            let build: Box<Build> = Box::new(move |t, v| op(t, v[0], v[1]).unwrap());
            (vec![rand_tensor(&mut r, &s), rand_tensor(&mut r, &s)], build)
        })
    }
    // Activations see inputs kept away from the kink at zero.
    fn unary(op: fn(&mut Tape<f64>, Var) -> hsemis::Result<Var>) -> Box<dyn Fn(u64) -> Case> {
        Box::new(move |seed| {
            let mut r = rng(seed);
            let s = rand_dims(&mut r);
            let x = tensor(&s, away_from_zero(&mut r, s[0] * s[1], 0.05));
            let build: Box<Build> = Box::new(move |t, v| op(t, v[0]).unwrap());
            (vec![x], build)
        })
    }
    fn case(f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Case + 'static) -> Box<dyn Fn(u64) -> Case> {
        Box::new(move |seed| f(&mut rng(seed)))
    }

    vec![
        ("add", binary(Tape::add)),
        ("sub", binary(Tape::sub)),
        ("mul", binary(Tape::mul)),
        (
            "scale",
            case(|r| {
                let s = rand_dims(r);
                let c = r.random_range(-3.0..3.0);
                (vec![rand_tensor(r, &s)], Box::new(move |t, v| t.scale(v[0], c).unwrap()))
            }),
        ),
        (
            "add_bias",
            case(|r| {
                let (n, h, c) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..5));
                (vec![rand_tensor(r, &[n, h, h, c]), rand_tensor(r, &[c])], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()))
            }),
        ),
        ("relu", unary(Tape::relu)),
        ("leaky_relu", unary(|t, x| t.leaky_relu(x, 0.2))),
        ("tanh", unary(Tape::tanh)),
        ("sigmoid", unary(Tape::sigmoid)),
        (
            "matmul",
            case(|r| {
                let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
                (vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
            }),
        ),
        (
            "conv2d",
            case(|r| {
                let c = conv_case(r);
                let inputs = vec![rand_tensor(r, &[c.n, c.h, c.w, c.cin]), rand_tensor(r, &[c.k, c.k, c.cin, c.cout])];
                let (s, p) = (c.stride, c.pad);
                (inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], s, p).unwrap()))
            }),
        ),
        (
            "conv_transpose2d",
            case(|r| {
                let c = conv_case(r);
                let inputs = vec![rand_tensor(r, &[c.n, c.h, c.w, c.cin]), rand_tensor(r, &[c.k, c.k, c.cout, c.cin])];
                let (s, p) = (c.stride, c.pad);
                (inputs, Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], s, p).unwrap()))
            }),
        ),
        (
            "max_pool2",
            case(|r| {
                let (n, h, w, c) = (r.random_range(1..3), r.random_range(2..7), r.random_range(2..7), r.random_range(1..4));
                (vec![rand_tensor(r, &[n, h, w, c])], Box::new(|t, v| t.max_pool2(v[0]).unwrap()))
            }),
        ),
        (
            "global_avg_pool",
            case(|r| {
                let (n, h, w, c) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
                (vec![rand_tensor(r, &[n, h, w, c])], Box::new(|t, v| t.global_avg_pool(v[0]).unwrap()))
            }),
        ),
        (
            "batch_norm",
            case(|r| {
                let (n, h, c) = (r.random_range(2..4), r.random_range(2..4), r.random_range(1..4));
                (vec![rand_tensor(r, &[n, h, h, c])], Box::new(|t, v| t.normalize(v[0], NormKind::Batch).unwrap().0))
            }),
        ),
        (
            "instance_norm",
            case(|r| {
                let (n, h, c) = (r.random_range(1..4), r.random_range(2..4), r.random_range(1..4));
                (vec![rand_tensor(r, &[n, h, h, c])], Box::new(|t, v| t.normalize(v[0], NormKind::Instance).unwrap().0))
            }),
        ),
        (
            "normalize_fixed",
            case(|r| {
                let (n, c) = (r.random_range(1..4), r.random_range(1..4));
                let mean = uniform_vec(r, c, -1.0, 1.0);
                let var = uniform_vec(r, c, 0.1, 2.0);
                (vec![rand_tensor(r, &[n, 2, 2, c])], Box::new(move |t, v| t.normalize_fixed(v[0], &mean, &var).unwrap()))
            }),
        ),
        (
            "channel_affine",
            case(|r| {
                let (n, c) = (r.random_range(1..4), r.random_range(1..4));
                let inputs = vec![rand_tensor(r, &[n, 2, 3, c]), rand_tensor(r, &[c]), rand_tensor(r, &[c])];
                (inputs, Box::new(|t, v| t.channel_affine(v[0], v[1], v[2]).unwrap()))
            }),
        ),
        (
            "concat",
            case(|r| {
                let (n, a, b) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
                (vec![rand_tensor(r, &[n, a]), rand_tensor(r, &[n, b])], Box::new(|t, v| t.concat(v[0], v[1]).unwrap()))
            }),
        ),
        (
            "select",
            case(|r| {
                let len = r.random_range(2..10);
                let idx: Vec<usize> = (0..r.random_range(1..12)).map(|_| r.random_range(0..len)).collect();
                (vec![rand_tensor(r, &[len])], Box::new(move |t, v| t.select(v[0], &idx).unwrap()))
            }),
        ),
        (
            "reshape",
            case(|r| {
                let [a, b] = rand_dims(r);
                (vec![rand_tensor(r, &[a, b])], Box::new(move |t, v| t.reshape(v[0], &[b, a]).unwrap()))
            }),
        ),
        (
            "sum",
            case(|r| {
                let s = rand_dims(r);
                (vec![rand_tensor(r, &s)], Box::new(|t, v| t.sum(v[0]).unwrap()))
            }),
        ),
        (
            "mean",
            case(|r| {
                let s = rand_dims(r);
                (vec![rand_tensor(r, &s)], Box::new(|t, v| t.mean(v[0]).unwrap()))
            }),
        ),
        (
            "l2_normalize_rows",
            case(|r| {
                let s = [r.random_range(1..4), r.random_range(2..6)];
                (vec![rand_tensor(r, &s)], Box::new(|t, v| t.l2_normalize_rows(v[0]).unwrap()))
            }),
        ),
        (
            "l2_tanh_rows",
            case(|r| {
                let s = [r.random_range(1..4), r.random_range(2..9)];
                let omega = r.random_range(0.5..3.0);
                (vec![rand_tensor(r, &s)], Box::new(move |t, v| l2_tanh_rows(t, v[0], omega).unwrap()))
            }),
        ),
        (
            "bce",
            case(|r| {
                let n = r.random_range(1..8);
                let targets: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect();
                let pred = tensor(&[n], uniform_vec(r, n, 0.05, 0.95));
                (vec![pred], Box::new(move |t, v| t.bce(v[0], &targets).unwrap()))
            }),
        ),
        (
            "l1",
            case(|r| {
                let s = rand_dims(r);
                let a = rand_tensor(r, &s);
                let gap = away_from_zero(r, a.len(), 0.05);
                let b = tensor(&s, a.data().iter().zip(&gap).map(|(x, g)| x + g).collect());
                (vec![a, b], Box::new(|t, v| t.l1(v[0], v[1]).unwrap()))
            }),
        ),
        ("mse", binary(Tape::mse)),
        (
            "cross_entropy",
            case(|r| {
                let (n, k) = (r.random_range(1..5), r.random_range(2..6));
                let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                (vec![rand_tensor(r, &[n, k])], Box::new(move |t, v| t.cross_entropy(v[0], &targets).unwrap()))
            }),
        ),
        (
            "nll_prob",
            case(|r| {
                let n = r.random_range(1..5);
                let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
                let probs = tensor(&[n, 2], uniform_vec(r, 2 * n, 0.1, 1.0));
                (vec![probs], Box::new(move |t, v| t.nll_prob(v[0], &targets).unwrap()))
            }),
        ),
        (
            "qcn_layer",
            case(|r| {
                let qubits = r.random_range(2..5);
                let layers = r.random_range(1..=max_layers(qubits));
                let circuit = Arc::new(QcnCircuit::new(QcnConfig { qubits, layers, wire: None }).unwrap());
                let n = r.random_range(1..4);
                let d = circuit.input_dim();
                let x = tensor(&[n, d], away_from_zero(r, n * d, 0.05));
                let angles = tensor(&[circuit.n_params()], uniform_vec(r, circuit.n_params(), -3.0, 3.0));
                (vec![x, angles], Box::new(move |t, v| qcn_layer(t, &circuit, v[0], v[1]).unwrap()))
            }),
        ),
    ]
}

/// Layers a ladder over `qubits` wires can hold before one wire is left.
pub fn max_layers(qubits: usize) -> usize {
    let (mut active, mut layers) = (qubits, 0);
    while active >= 2 {
        active = active.div_ceil(2);
        layers += 1;
    }
    layers
}

pub fn primitive_suite() -> Vec<GradCheck> {
    primitive_cases().into_iter().map(|(name, case)| run(name, case)).collect()
}

/// The whole node (base network in training mode, projection, L2-tanh,
/// circuit) differentiated with respect to every base parameter and every
/// angle at once, over random small architectures.
pub fn node_forward_check() -> GradCheck {
    // Tiny ReLU networks occasionally zero a whole projection row, where the
    // L2 normalisation is undefined; such draws are replaced by fresh ones.
    let worst = (0..)
        .filter_map(node_forward_error)
        .take(CONFIGS as usize)
        .fold(0.0, f64::max);
    GradCheck { name: "node_forward", configs: CONFIGS, worst }
}

fn node_forward_error(seed: u64) -> Option<f64> {
    let mut r = rng(1000 + seed);
    let qubits = r.random_range(2..4);
    let base = BaseConfig {
        filters: [r.random_range(2..4), r.random_range(2..4), 2, 2, r.random_range(2..4)],
        fc1: r.random_range(3..7),
        fc2: r.random_range(3..7),
        proj: 1 << qubits,
    };
    let qcn = QcnConfig { qubits, layers: r.random_range(1..=max_layers(qubits)), wire: None };
    let in_ch = r.random_range(1..3);
    let omega = r.random_range(0.5..2.0);
    let model = NodeModel::<f64>::new(&base, qcn, in_ch, 0.99, omega, seed).unwrap();
    let (n, side) = (r.random_range(2..4), [4, 8][r.random_range(0..2)]);
    let images = rand_tensor(&mut r, &[n, side, side, in_ch]);
    let weights = uniform_vec(&mut r, 2 * n, -1.0, 1.0);

    let loss_at = |model: &mut NodeModel<f64>, tape: &mut Tape<f64>| {
        let x = tape.constant(images.clone()).unwrap();
        let fw = model.forward(tape, x, Role::Student, true, true)?;
        let w = tape.constant(tensor(&[n, 2], weights.clone())).unwrap();
        let prod = tape.mul(fw.probs, w).unwrap();
        Ok::<_, hsemis::Error>((tape.sum(prod).unwrap(), fw))
    };

    let mut m = model.clone();
    let mut tape = Tape::new();
    let (loss, fw) = loss_at(&mut m, &mut tape).ok()?;
    tape.backward(loss).unwrap();
    let mut analytic: Vec<f64> = m.student.params.grads(&tape, &fw.base_vars).iter().flat_map(|g| g.data().to_vec()).collect();
    analytic.extend(tape.grad(fw.angles).unwrap().data());

    let mut theta: Vec<f64> = model.student.params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    theta.extend(&model.angles.angles);
    let numeric = fd_gradient(&theta, H, |theta| {
        let mut m = model.clone();
        let mut off = 0;
        for t in m.student.params.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        m.angles.angles.copy_from_slice(&theta[off..]);
        let mut tape = Tape::new();
        let (loss, _) = loss_at(&mut m, &mut tape).unwrap();
        tape.value(loss).item().unwrap()
    });
    Some(rel_error(&analytic, &numeric))
}
