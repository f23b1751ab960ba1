//! The classical feature extractor and the projection into the circuit's
//! amplitude space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Dense, ParamStore, Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    /// Filters of the five feature-extraction blocks.
    pub filters: [usize; 5],
    pub fc1: usize,
    /// Width of the base feature vector.
    pub fc2: usize,
    /// Width of the projection (the circuit's amplitude count); 0 builds
    /// the network without a projection.
    pub proj: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self { filters: [32, 64, 128, 256, 512], fc1: 1024, fc2: 512, proj: 256 }
    }
}

/// Five conv3x3-ReLU-BN-maxpool blocks, two position-wise dense layers,
/// global average pooling, then an affine projection.
#[derive(Clone, Debug)]
pub struct BaseNetwork<T> {
    pub config: BaseConfig,
    pub in_ch: usize,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    blocks: Vec<(Conv2d, BatchNorm)>,
    fc1: Dense,
    fc2: Dense,
    proj: Option<Dense>,
}

impl<T: Real> BaseNetwork<T> {
    pub fn new(config: &BaseConfig, in_ch: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_ch == 0 || config.filters.contains(&0) || config.fc1 == 0 || config.fc2 == 0 {
            return Err(Error::Argument("base network widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut cin = in_ch;
        let blocks = config
            .filters
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let conv = Conv2d::same3(&mut params, &format!("fex{i}.conv"), cin, f, rng);
                let bn = BatchNorm::new(&mut params, &mut buffers, &format!("fex{i}.bn"), f);
                cin = f;
                (conv, bn)
            })
            .collect();
        let fc1 = Dense::new(&mut params, "fc1", cin, config.fc1, rng);
        let fc2 = Dense::new(&mut params, "fc2", config.fc1, config.fc2, rng);
        let proj = (config.proj > 0).then(|| Dense::new(&mut params, "proj", config.fc2, config.proj, rng));
        Ok(Self { config: config.clone(), in_ch, params, buffers, blocks, fc1, fc2, proj })
    }

    /// Output of the five blocks, `[N, h', w', filters[4]]`. A block whose
    /// input is too small for 2x2 pooling averages its map to 1x1 instead.
    pub fn feature_map(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        for (conv, bn) in &self.blocks {
            x = conv.forward(cx, x)?;
            x = cx.tape.relu(x)?;
            x = bn.forward(cx, x)?;
            let s = cx.tape.value(x).shape().to_vec();
            x = if s[1] >= 2 && s[2] >= 2 {
                cx.tape.max_pool2(x)?
            } else {
                let g = cx.tape.global_avg_pool(x)?;
                cx.tape.reshape(g, &[s[0], 1, 1, s[3]])?
            };
        }
        Ok(x)
    }

    /// `F_base`: `[N, fc2]`.
    pub fn features(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let m = self.feature_map(cx, x)?;
        let m = self.fc1.forward(cx, m)?;
        let m = cx.tape.relu(m)?;
        let m = self.fc2.forward(cx, m)?;
        cx.tape.global_avg_pool(m)
    }

    /// `F_t = F_base W + b`: `[N, fc2] -> [N, proj]`.
    pub fn project(&self, cx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        self.projection()?.forward(cx, f)
    }

    fn projection(&self) -> Result<&Dense> {
        self.proj.as_ref().ok_or_else(|| Error::State("network was built without a projection".into()))
    }

    /// The projection on a single vector, outside any tape.
    pub fn project_vec(&self, f: &[T]) -> Result<Vec<T>> {
        let proj = self.projection()?;
        let (w, b) = (self.params.get(proj.weight), self.params.get(proj.bias));
        let (din, dout) = (proj.fan_in, proj.fan_out);
        if f.len() != din {
            return Err(Error::Shape(format!("projection expects {din} features, got {}", f.len())));
        }
        let mut out = b.data().to_vec();
        for (i, &fi) in f.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(&w.data()[i * dout..(i + 1) * dout]) {
                *o += fi * wij;
            }
        }
        Ok(out)
    }

    /// Evaluation-mode `F_base` for a set of images, in chunks.
    pub fn extract(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape, false)?;
            let x = tape.constant(Tensor::stack(chunk)?)?;
            let mut buffers = self.buffers.clone();
            let mut cx = Ctx { tape: &mut tape, vars: &vars, buffers: &mut buffers, train: false };
            let f = self.features(&mut cx, x)?;
            let t = tape.value(f);
            out.extend((0..chunk.len()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }
}

pub(crate) const EVAL_CHUNK: usize = 32;

/// `tanh(omega * v / |v|)`.
pub fn l2_tanh_normalize<T: Real>(v: &[T], omega: T) -> Result<Vec<T>> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm <= T::zero() {
        return Err(Error::Normalization("zero vector cannot be L2-normalized".into()));
    }
    Ok(v.iter().map(|&x| (omega * x / norm).tanh()).collect())
}

/// Row-wise [`l2_tanh_normalize`] on a tape.
pub fn l2_tanh_rows<T: Real>(tape: &mut Tape<T>, x: Var, omega: T) -> Result<Var> {
    let u = tape.l2_normalize_rows(x)?;
    let u = tape.scale(u, omega)?;
    tape.tanh(u)
}
