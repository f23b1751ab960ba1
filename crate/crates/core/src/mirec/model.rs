//! Encoder-decoder generator with gated skips, and the patch discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{patch_offsets, MaskPlan, PatchSet};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, BatchNorm, Conv2d, ConvTranspose2d, Ctx, ParamId, ParamStore, Tape, Var, LEAKY_SLOPE};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Number of encoder (and decoder) blocks.
pub const DEPTH: usize = 5;

/// Image and patch geometry shared by both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub ch: usize,
    pub p: usize,
}

impl Geometry {
    pub fn n_patches(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    pub fn patch_len(&self) -> usize {
        self.p * self.p * self.ch
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w * self.ch
    }

    fn validate(&self) -> Result<()> {
        let scale = 1 << DEPTH;
        if self.h == 0 || self.w == 0 || self.ch == 0 || !self.h.is_multiple_of(scale) || !self.w.is_multiple_of(scale) {
            return Err(Error::Argument(format!(
                "reconstruction needs image sides divisible by {scale}, got {}x{}x{}",
                self.h, self.w, self.ch
            )));
        }
        if !self.p.is_power_of_two() || self.p.trailing_zeros() as usize > DEPTH {
            return Err(Error::Argument(format!("patch size {} must be a power of two <= {scale}", self.p)));
        }
        Ok(())
    }
}

/// conv3x3(stride) - BN - ReLU - conv3x3 - BN, plus a 1x1 projection skip
/// when the shape changes, then add and ReLU.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), 3, cin, cout, stride, 1, rng);
        let bn1 = BatchNorm::new(store, buffers, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng);
        let bn2 = BatchNorm::new(store, buffers, &format!("{name}.bn2"), cout);
        let skip = (stride != 1 || cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), 1, cin, cout, stride, 0, rng));
        Self { conv1, bn1, conv2, bn2, skip }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.tape.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        let s = match &self.skip {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        let y = cx.tape.add(y, s)?;
        cx.tape.relu(y)
    }
}

/// Additive attention gate: `sigmoid(W_u up + W_s skip) * skip`.
#[derive(Clone, Debug)]
struct AttentionGate {
    from_up: Conv2d,
    from_skip: Conv2d,
}

impl AttentionGate {
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, up: Var, skip: Var) -> Result<Var> {
        let a = self.from_up.forward(cx, up)?;
        let b = self.from_skip.forward(cx, skip)?;
        let g = cx.tape.add(a, b)?;
        let g = cx.tape.sigmoid(g)?;
        cx.tape.mul(g, skip)
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: ConvTranspose2d,
    gate: AttentionGate,
    refine: ResBlock,
}

/// The reconstruction generator. Parameters live in `params`, batch-norm
/// running statistics in `buffers`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub geometry: Geometry,
    pub widths: [usize; DEPTH],
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    mask_token: ParamId,
    encoder: Vec<ResBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl<T: Real> Generator<T> {
    pub fn new(geometry: Geometry, widths: [usize; DEPTH], rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        if widths.contains(&0) {
            return Err(Error::Argument("generator widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let len = geometry.patch_len();
        let mask_token = params.add("mask_token", Tensor::zeros(&[len]));
        let mut encoder = Vec::with_capacity(DEPTH);
        let mut cin = geometry.ch;
        for (k, &c) in widths.iter().enumerate() {
            encoder.push(ResBlock::new(&mut params, &mut buffers, &format!("enc{k}"), cin, c, 2, rng));
            cin = c;
        }
        // Decoder block k consumes the deeper map and the skip of encoder
        // level k (level 0 being the input itself).
        let mut decoder = Vec::with_capacity(DEPTH);
        for k in (0..DEPTH).rev() {
            let c_skip = if k == 0 { geometry.ch } else { widths[k - 1] };
            let c_out = if k == 0 { widths[0] } else { widths[k - 1] };
            let name = format!("dec{k}");
            let up = ConvTranspose2d::upsample(&mut params, &format!("{name}.up"), 2, cin, c_out, rng);
            let gate = AttentionGate {
                from_up: Conv2d::new(&mut params, &format!("{name}.att_up"), 1, c_out, c_skip, 1, 0, rng),
                from_skip: Conv2d::new(&mut params, &format!("{name}.att_skip"), 1, c_skip, c_skip, 1, 0, rng),
            };
            let refine = ResBlock::new(&mut params, &mut buffers, &format!("{name}.res"), c_skip + c_out, c_out, 1, rng);
            decoder.push(DecoderBlock { up, gate, refine });
            cin = c_out;
        }
        let head = Conv2d::new(&mut params, "head", 1, cin, geometry.ch, 1, 0, rng);
        Ok(Self { geometry, widths, params, buffers, mask_token, encoder, decoder, head })
    }

    /// Generator input for a batch: every slot carries its positional
    /// encoding; visible slots add the patch content, masked slots add the
    /// learned mask token. Returns `[N, h, w, ch]`.
    pub fn assemble_input(&self, tape: &mut Tape<T>, vars: &[Var], batch: &[(&PatchSet<T>, &MaskPlan)]) -> Result<Var> {
        let g = self.geometry;
        let (np, len) = (g.n_patches(), g.patch_len());
        if batch.is_empty() {
            return Err(Error::Argument("empty generator batch".into()));
        }
        let n = batch.len();
        let mut base = vec![T::zero(); n * g.pixels()];
        let mut is_masked = vec![T::zero(); n * np];
        let mut gather = vec![0usize; n * g.pixels()];
        for (b, (ps, plan)) in batch.iter().enumerate() {
            if ps.n_patches() != np || ps.patch_len() != len || plan.n_patches() != np {
                return Err(Error::Argument("patch set or mask plan does not match the generator geometry".into()));
            }
            let flags = plan.flags();
            for i in 0..np {
                is_masked[b * np + i] = if flags[i] { T::one() } else { T::zero() };
                let content = if flags[i] { ps.positional()[i].clone() } else { ps.embedded(i) };
                for (j, o) in patch_offsets(g.w, g.ch, g.p, i).into_iter().enumerate() {
                    base[b * g.pixels() + o] = content[j];
                    gather[b * g.pixels() + o] = (b * np + i) * len + j;
                }
            }
        }
        let shape = [n, g.h, g.w, g.ch];
        let sel = tape.constant(Tensor::new(vec![n * np, 1], is_masked)?)?;
        let token = tape.reshape(vars[self.mask_token.0], &[1, len])?;
        let tokens = tape.matmul(sel, token)?;
        let tokens = tape.select(tokens, &gather)?;
        let tokens = tape.reshape(tokens, &shape)?;
        let base = tape.constant(Tensor::new(shape.to_vec(), base)?)?;
        tape.add(base, tokens)
    }

    /// Deepest encoder map `[N, h/32, w/32, widths[4]]`.
    pub fn encode(&self, cx: &mut Ctx<'_, T>, input: Var) -> Result<Var> {
        let mut x = input;
        for block in &self.encoder {
            x = block.forward(cx, x)?;
        }
        Ok(x)
    }

    /// `[N, h, w, ch]` assembled input to `[N, h, w, ch]` image in `(0, 1)`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, input: Var) -> Result<Var> {
        let mut skips = vec![input];
        let mut x = input;
        for block in &self.encoder {
            x = block.forward(cx, x)?;
            skips.push(x);
        }
        skips.pop();
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder block");
            let up = block.up.forward(cx, x)?;
            let att = block.gate.forward(cx, up, skip)?;
            let cat = cx.tape.concat(att, up)?;
            x = block.refine.forward(cx, cat)?;
        }
        let y = self.head.forward(cx, x)?;
        cx.tape.sigmoid(y)
    }
}

/// Patch discriminator: five conv-instance-norm-leaky-ReLU blocks, the
/// first `log2 p` with stride 2, then a 1x1 sigmoid head giving one
/// probability per patch.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub geometry: Geometry,
    pub widths: [usize; DEPTH],
    pub params: ParamStore<T>,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Real> Discriminator<T> {
    pub fn new(geometry: Geometry, widths: [usize; DEPTH], rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        if widths.contains(&0) {
            return Err(Error::Argument("discriminator widths must be positive".into()));
        }
        let mut params = ParamStore::new();
        let down = geometry.p.trailing_zeros() as usize;
        let mut cin = geometry.ch;
        let mut blocks = Vec::with_capacity(DEPTH);
        for (k, &c) in widths.iter().enumerate() {
            let stride = if k < down { 2 } else { 1 };
            blocks.push(Conv2d::new(&mut params, &format!("block{k}"), 3, cin, c, stride, 1, rng));
            cin = c;
        }
        let head = Conv2d::new(&mut params, "head", 1, cin, 1, 1, 0, rng);
        Ok(Self { geometry, widths, params, blocks, head })
    }

    /// `[N, h, w, ch]` to per-patch probabilities `[N, h/p, w/p, 1]`.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        for conv in &self.blocks {
            x = conv.forward(cx, x)?;
            x = instance_norm(cx.tape, x)?;
            x = cx.tape.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
        }
        let y = self.head.forward(cx, x)?;
        cx.tape.sigmoid(y)
    }
}
