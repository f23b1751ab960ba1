//! Alternating adversarial training of the reconstruction networks, and
//! inference over image sets.

use serde::{Deserialize, Serialize};

use super::loss::{discriminator_loss, generator_loss};
use super::model::{Discriminator, Generator, Geometry, DEPTH};
use super::patch::{patch_offsets, repair, sample_mask, MaskPlan, PatchSet};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Ctx, ParamStore, Tape, Var};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirecConfig {
    pub patch: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub gen_widths: [usize; DEPTH],
    pub dis_widths: [usize; DEPTH],
    pub optimizer: AdamConfig,
    /// Images in the fixed probe batch used to measure masked-patch L1.
    pub probe: usize,
    pub seed: u64,
}

impl Default for MirecConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            mask_ratio: 0.75,
            alpha: 1.0,
            steps: 2000,
            batch: 8,
            gen_widths: [16, 32, 64, 128, 256],
            dis_widths: [16, 32, 64, 64, 64],
            optimizer: AdamConfig::default(),
            probe: 16,
            seed: 42,
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirecLogRow {
    pub step: usize,
    pub gen_loss: f64,
    pub dis_loss: f64,
    /// Mean absolute error over the masked pixels of the training batch.
    pub l1: f64,
}

#[derive(Clone, Debug)]
pub struct MirecModel<T> {
    pub config: MirecConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

#[derive(Clone, Debug)]
pub struct MirecOutcome<T> {
    pub model: MirecModel<T>,
    pub log: Vec<MirecLogRow>,
    /// Masked-patch L1 of the probe batch before the first update.
    pub probe_l1_initial: f64,
    /// The same measurement after the last update.
    pub probe_l1_final: f64,
}

impl<T: Real> MirecModel<T> {
    /// Fresh networks for images of shape `[h, w, ch]`.
    pub fn new(config: &MirecConfig, h: usize, w: usize, ch: usize) -> Result<Self> {
        let geometry = Geometry { h, w, ch, p: config.patch };
        let mut rng_g = rng::stream(config.seed, "mirec.generator");
        let mut rng_d = rng::stream(config.seed, "mirec.discriminator");
        Ok(Self {
            config: config.clone(),
            generator: Generator::new(geometry, config.gen_widths, &mut rng_g)?,
            discriminator: Discriminator::new(geometry, config.dis_widths, &mut rng_d)?,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.generator.geometry
    }

    /// Generator forward on a batch; returns the tape, the parameter
    /// leaves and the `[N, h, w, ch]` output.
    fn generate(&mut self, batch: &[(&PatchSet<T>, &MaskPlan)], train: bool, trainable: bool) -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = self.generator.params.bind(&mut tape, trainable)?;
        let input = self.generator.assemble_input(&mut tape, &vars, batch)?;
        let gen = &self.generator;
        let mut buffers = gen.buffers.clone();
        let out = {
            let mut cx = Ctx { tape: &mut tape, vars: &vars, buffers: &mut buffers, train };
            gen.forward(&mut cx, input)?
        };
        self.generator.buffers = buffers;
        Ok((tape, vars, out))
    }

    /// Reconstructed patches (one per masked index, in plan order) for each
    /// image, with the generator in evaluation mode.
    pub fn reconstruct_patches(&mut self, batch: &[(&PatchSet<T>, &MaskPlan)]) -> Result<Vec<Vec<Vec<T>>>> {
        let g = self.geometry();
        let (tape, _, out) = self.generate(batch, false, false)?;
        let data = tape.value(out).data();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, (_, plan))| {
                let img = &data[b * g.pixels()..(b + 1) * g.pixels()];
                plan.masked
                    .iter()
                    .map(|&i| patch_offsets(g.w, g.ch, g.p, i).into_iter().map(|o| img[o]).collect())
                    .collect()
            })
            .collect())
    }

    /// Mean absolute error between reconstructed and original masked pixels
    /// (evaluation mode).
    pub fn masked_l1(&mut self, images: &[Tensor<T>], plans: &[MaskPlan]) -> Result<f64> {
        let sets = patch_sets(images, self.config.patch)?;
        let pairs: Vec<_> = sets.iter().zip(plans).collect();
        let rec = self.reconstruct_patches(&pairs)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for ((ps, plan), rec) in pairs.iter().zip(&rec) {
            for (&i, r) in plan.masked.iter().zip(rec) {
                for (&a, &b) in ps.patches()[i].iter().zip(r) {
                    sum += (a - b).abs().as_f64();
                    count += 1;
                }
            }
        }
        Ok(sum / count as f64)
    }

    /// Globally pooled deepest encoder features of unmasked images
    /// (evaluation mode), one vector per image.
    pub fn encoder_features(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let np = self.geometry().n_patches();
        let open = MaskPlan { masked: Vec::new(), visible: (0..np).collect(), ratio: 0.0, seed: 0 };
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(RECON_CHUNK) {
            let sets = patch_sets(chunk, self.config.patch)?;
            let pairs: Vec<_> = sets.iter().map(|s| (s, &open)).collect();
            let mut tape = Tape::new();
            let vars = self.generator.params.bind(&mut tape, false)?;
            let input = self.generator.assemble_input(&mut tape, &vars, &pairs)?;
            let mut buffers = self.generator.buffers.clone();
            let mut cx = Ctx { tape: &mut tape, vars: &vars, buffers: &mut buffers, train: false };
            let e = self.generator.encode(&mut cx, input)?;
            let f = tape.global_avg_pool(e)?;
            let t = tape.value(f);
            out.extend((0..chunk.len()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    /// `x_rec`: each image repaired with its reconstruction under a fresh
    /// mask drawn from `seed` and the image index.
    pub fn reconstruct(&mut self, images: &[Tensor<T>], seed: u64) -> Result<Vec<Tensor<T>>> {
        let np = self.geometry().n_patches();
        let mut out = Vec::with_capacity(images.len());
        for (c, chunk) in images.chunks(RECON_CHUNK).enumerate() {
            let sets = patch_sets(chunk, self.config.patch)?;
            let plans = (0..chunk.len())
                .map(|i| sample_mask(np, self.config.mask_ratio, derive_seed(seed, (c * RECON_CHUNK + i) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = sets.iter().zip(&plans).collect();
            let rec = self.reconstruct_patches(&pairs)?;
            for ((ps, plan), r) in pairs.iter().zip(&rec) {
                out.push(repair(ps, r, plan)?);
            }
        }
        Ok(out)
    }
}

const RECON_CHUNK: usize = 32;

fn patch_sets<T: Real>(images: &[Tensor<T>], p: usize) -> Result<Vec<PatchSet<T>>> {
    images.iter().map(|img| PatchSet::patchify(img, p)).collect()
}

/// Flat pixel indices (into a `[N, h, w, ch]` batch) of every masked patch,
/// and flat patch indices (into `[N, h/p, w/p, 1]`) of the masked slots.
fn masked_indices(g: Geometry, plans: &[&MaskPlan]) -> (Vec<usize>, Vec<usize>) {
    let (mut pixels, mut slots) = (Vec::new(), Vec::new());
    for (b, plan) in plans.iter().enumerate() {
        for &i in &plan.masked {
            pixels.extend(patch_offsets(g.w, g.ch, g.p, i).into_iter().map(|o| b * g.pixels() + o));
            slots.push(b * g.n_patches() + i);
        }
    }
    (pixels, slots)
}

fn check_images<T: Real>(images: &[Tensor<T>]) -> Result<(usize, usize, usize)> {
    let first = images.first().ok_or_else(|| Error::Argument("no images to train on".into()))?;
    let [h, w, ch] = *first.shape() else {
        return Err(Error::Shape(format!("images must be [h, w, ch], got {:?}", first.shape())));
    };
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", first.shape(), bad.shape())));
    }
    Ok((h, w, ch))
}

/// Trains generator and discriminator with alternating Adam steps. Every
/// step draws `batch` images (with replacement) and a fresh mask per image;
/// the discriminator is updated against the current reconstructions, then
/// the generator against the updated discriminator.
pub fn train_mirec<T: Real>(images: &[Tensor<T>], config: &MirecConfig) -> Result<MirecOutcome<T>> {
    let (h, w, ch) = check_images(images)?;
    if config.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut model = MirecModel::new(config, h, w, ch)?;
    let g = model.geometry();
    let np = g.n_patches();
    let alpha = T::lit(config.alpha);

    // Fixed probe batch and masks for the before/after reconstruction error.
    let probe_n = config.probe.clamp(1, images.len());
    let probe_plans = (0..probe_n)
        .map(|i| sample_mask(np, config.mask_ratio, derive_seed(rng::derive_seed(config.seed, rng::label("mirec.probe")), i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let probe_images = &images[..probe_n];
    let probe_l1_initial = model.masked_l1(probe_images, &probe_plans)?;

    let mut adam_g = AdamState::new(config.optimizer, &model.generator.params);
    let mut adam_d = AdamState::new(config.optimizer, &model.discriminator.params);
    let mut rng = rng::stream(config.seed, "mirec.batches");
    let sets = patch_sets(images, config.patch)?;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..images.len())).collect();
        let plans = (0..config.batch)
            .map(|_| sample_mask(np, config.mask_ratio, rng.random()))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<_> = picks.iter().map(|&i| &sets[i]).zip(&plans).collect();
        let plan_refs: Vec<_> = plans.iter().collect();
        let (pixels, slots) = masked_indices(g, &plan_refs);

        let real = Tensor::stack(&picks.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
        let mut visible = vec![T::zero(); real.len()];
        for (b, plan) in plans.iter().enumerate() {
            for &i in &plan.visible {
                for o in patch_offsets(g.w, g.ch, g.p, i) {
                    visible[b * g.pixels() + o] = T::one();
                }
            }
        }

        // Generator forward; x_rep keeps the visible pixels of the input.
        let (mut tape, g_vars, out) = model.generate(&batch, true, true)?;
        let keep = tape.constant(Tensor::new(real.shape().to_vec(), visible.iter().map(|&v| T::one() - v).collect())?)?;
        let kept = tape.constant(Tensor::new(real.shape().to_vec(), real.data().iter().zip(&visible).map(|(&x, &v)| x * v).collect())?)?;
        let fill = tape.mul(out, keep)?;
        let x_rep = tape.add(fill, kept)?;

        // Discriminator step on real images and the detached repairs.
        let dis_loss = {
            let mut dt = Tape::new();
            let d_vars = model.discriminator.params.bind(&mut dt, true)?;
            let mut none = ParamStore::new();
            let xr = dt.constant(real.clone())?;
            let xf = dt.constant(tape.value(x_rep).clone())?;
            let (d_real, d_fake) = {
                let mut cx = Ctx { tape: &mut dt, vars: &d_vars, buffers: &mut none, train: true };
                (model.discriminator.forward(&mut cx, xr)?, model.discriminator.forward(&mut cx, xf)?)
            };
            let d_real = dt.select(d_real, &slots)?;
            let d_fake = dt.select(d_fake, &slots)?;
            let loss = discriminator_loss(&mut dt, d_real, d_fake, alpha)?;
            dt.backward(loss)?;
            let grads = model.discriminator.params.grads(&dt, &d_vars);
            adam_d.step(&mut model.discriminator.params, &grads)?;
            dt.value(loss).item()?
        };

        // Generator step against the updated discriminator.
        let d_vars = model.discriminator.params.bind(&mut tape, false)?;
        let mut none = ParamStore::new();
        let d_fake = {
            let mut cx = Ctx { tape: &mut tape, vars: &d_vars, buffers: &mut none, train: true };
            model.discriminator.forward(&mut cx, x_rep)?
        };
        let d_fake = tape.select(d_fake, &slots)?;
        let rec = tape.select(out, &pixels)?;
        let orig = tape.constant(Tensor::new(vec![pixels.len()], pixels.iter().map(|&o| real.data()[o]).collect())?)?;
        let gen_loss = generator_loss(&mut tape, d_fake, rec, orig, alpha)?;
        let l1 = {
            let (r, o) = (tape.value(rec).data(), tape.value(orig).data());
            r.iter().zip(o).map(|(&a, &b)| (a - b).abs().as_f64()).sum::<f64>() / r.len() as f64
        };
        tape.backward(gen_loss)?;
        let grads = model.generator.params.grads(&tape, &g_vars);
        adam_g.step(&mut model.generator.params, &grads)?;

        log.push(MirecLogRow { step, gen_loss: tape.value(gen_loss).item()?.as_f64(), dis_loss: dis_loss.as_f64(), l1 });
    }
    let probe_l1_final = model.masked_l1(probe_images, &probe_plans)?;
    Ok(MirecOutcome { model, log, probe_l1_initial, probe_l1_final })
}

/// The loss log as CSV with header `step,gen_loss,dis_loss,l1`.
pub fn log_csv(log: &[MirecLogRow]) -> String {
    let mut s = String::from("step,gen_loss,dis_loss,l1\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.gen_loss, r.dis_loss, r.l1));
    }
    s
}
