//! Alternating WGAN-GP training of the generator against both critics.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use autodiff::{weights, Adam, AdamConfig, Params, Resampler, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::loss::{adversarial_gen_loss, discount_tensor, discounted_l1_var, wgan_gp_loss, CriticFn};
use super::nets::{local_crop, Critic, Generator, LOCAL_SIZE};
use super::sample::{generator_input, TrainingSample};
use crate::raster::{Image, Mask};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Critic updates per generator update.
    pub critic_ratio: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Full passes over the samples, counted in generator updates.
    pub epochs: usize,
    pub tile: usize,
    pub seed: u64,
    pub num_samples: usize,
    pub epsilon: f64,
    /// Write a checkpoint every this many generator steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 8,
            critic_ratio: 2,
            lambda: 10.0,
            gamma: 0.99,
            epochs: 200,
            tile: 64,
            seed: 0,
            num_samples: 200,
            epsilon: crate::reprojection::DEFAULT_EPSILON,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gamma >= 1.0 {
            return Err(Error::config("gamma must be below 1"));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("critic_ratio", self.critic_ratio),
            ("epochs", self.epochs),
            ("num_samples", self.num_samples),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.tile < 16 || self.tile % 16 != 0 {
            return Err(Error::config(format!("tile must be a positive multiple of 16, got {}", self.tile)));
        }
        Ok(())
    }
}

/// Generator and critics with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub generator: Generator,
    pub global: Critic,
    pub local: Critic,
    pub g: Params<f32>,
    pub dg: Params<f32>,
    pub dl: Params<f32>,
}

impl Model {
    pub fn new(tile: usize, seed: u64) -> Self {
        let generator = Generator::new();
        let global = Critic::global(tile);
        let local = Critic::local();
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let g = generator.init(seeds.gen());
        let dg = global.init(seeds.gen());
        let dl = local.init(seeds.gen());
        Self {
            generator,
            global,
            local,
            g,
            dg,
            dl,
        }
    }

    /// Runs the generator on one image of any size divisible by 8.
    pub fn inpaint(&self, holed: &Image, holes: &Mask, reprojections: &[Image]) -> Result<Image> {
        if reprojections.len() != 4 || !holed.same_dims(holes) || reprojections.iter().any(|r| !r.same_dims(holes)) {
            return Err(Error::dimension("inpainting needs a hole mask and four aligned reprojections"));
        }
        let (w, h) = holed.dims();
        let mut tape = Tape::new();
        let vars = self.g.bind(&mut tape);
        let x = tape.leaf(Tensor::new(&[1, 16, h, w], generator_input(holed, holes, reprojections))?);
        let y = self.generator.forward(&mut tape, &vars, x, Rc::new(hole_tensor(&[holes])))?;
        Image::from_planar(w, h, tape.value(y).data())
    }
}

fn hole_tensor(holes: &[&Mask]) -> Tensor<f32> {
    let (w, h) = holes[0].dims();
    let mut data = Vec::with_capacity(holes.len() * 3 * w * h);
    for m in holes {
        for _ in 0..3 {
            data.extend(m.data().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        }
    }
    Tensor::new(&[holes.len(), 3, h, w], data).expect("hole tensor shape")
}

/// Stacked batch tensors.
struct Batch {
    input: Tensor<f32>,
    target: Tensor<f32>,
    holes: Rc<Tensor<f32>>,
    crop: Rc<Resampler>,
    discount: Rc<Tensor<f32>>,
}

impl Batch {
    fn new(samples: &[&TrainingSample], gamma: f64) -> Result<Self> {
        let (w, h) = samples[0].dims();
        if samples.iter().any(|s| s.dims() != (w, h) || s.reprojections.len() != 4) {
            return Err(Error::dimension("batch samples differ in size"));
        }
        let n = samples.len();
        let input = samples.iter().flat_map(|s| s.generator_input()).collect();
        let target = samples.iter().flat_map(|s| s.target.to_planar()).collect();
        let masks: Vec<&Mask> = samples.iter().map(|s| &s.holes).collect();
        let owned: Vec<Mask> = masks.iter().map(|&m| m.clone()).collect();
        Ok(Self {
            input: Tensor::new(&[n, 16, h, w], input)?,
            target: Tensor::new(&[n, 3, h, w], target)?,
            holes: Rc::new(hole_tensor(&masks)),
            crop: Rc::new(local_crop(&owned, LOCAL_SIZE)?),
            discount: Rc::new(discount_tensor(&owned, gamma)?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    /// Critic loss of the last critic update (both critics summed).
    pub critic_loss: f64,
    pub gen_adversarial: f64,
    pub discounted_l1: f64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::format(format!("bad rng position `{}`", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: u64,
    config: TrainConfig,
    adam_steps: [u64; 3],
    rng: RngState,
}

const NETS: [&str; 3] = ["generator", "critic_global", "critic_local"];

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: [Adam<f32>; 3],
    rng: ChaCha8Rng,
    step: u64,
    pub history: Vec<StepStats>,
}

fn numeric(what: &str, step: u64, e: autodiff::Error) -> Error {
    match e {
        autodiff::Error::NonFinite { name } => Error::Numeric(format!("{what} gradient of `{name}` at step {step}")),
        other => Error::Tensor(other),
    }
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v} at step {step}")))
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.tile, config.seed);
        let cfg = AdamConfig::with_lr(config.lr);
        let adam = [
            Adam::new(cfg, &model.g),
            Adam::new(cfg, &model.dg),
            Adam::new(cfg, &model.dl),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Generator updates so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn fake(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        tape.detached(|tape| {
            let vars = self.model.g.bind(tape);
            let x = tape.leaf(batch.input.clone());
            let y = self.model.generator.forward(tape, &vars, x, batch.holes.clone())?;
            Ok(tape.value(y).clone())
        })
    }

    fn critic_step(&mut self, batch: &Batch) -> Result<f64> {
        let fake = self.fake(batch)?;
        let n = batch.target.shape()[0];
        let u: Vec<f32> = (0..n).map(|_| self.rng.gen()).collect();
        let m = &self.model;
        let mut tape = Tape::new();
        let gv = m.dg.bind(&mut tape);
        let lv = m.dl.bind(&mut tape);
        let global = |t: &mut Tape<f32>, x: Var| m.global.forward(t, &gv, x, None);
        let local = |t: &mut Tape<f32>, x: Var| m.local.forward(t, &lv, x, Some(&batch.crop));
        let lambda = self.config.lambda as f32;
        let a = wgan_gp_loss(&mut tape, &global as &CriticFn<f32>, &batch.target, &fake, &batch.holes, &u, lambda)?;
        let b = wgan_gp_loss(&mut tape, &local as &CriticFn<f32>, &batch.target, &fake, &batch.holes, &u, lambda)?;
        let total = tape.add(a.total, b.total)?;
        let loss = finite(tape.value(total).item() as f64, "critic loss", self.step)?;
        let wrt: Vec<Var> = gv.iter().chain(&lv).copied().collect();
        let grads = tape.grad(total, &wrt, false)?;
        let grads: Vec<Tensor<f32>> = grads.iter().map(|g| tape.value(*g).clone()).collect();
        let (g_global, g_local) = grads.split_at(gv.len());
        let step = self.step;
        self.adam[1].step(&mut self.model.dg, g_global).map_err(|e| numeric("critic", step, e))?;
        self.adam[2].step(&mut self.model.dl, g_local).map_err(|e| numeric("critic", step, e))?;
        Ok(loss)
    }

    fn generator_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let m = &self.model;
        let mut tape = Tape::new();
        let vars = m.g.bind(&mut tape);
        let gv = m.dg.bind(&mut tape);
        let lv = m.dl.bind(&mut tape);
        let x = tape.leaf(batch.input.clone());
        let out = m.generator.forward(&mut tape, &vars, x, batch.holes.clone())?;
        let global = |t: &mut Tape<f32>, x: Var| m.global.forward(t, &gv, x, None);
        let local = |t: &mut Tape<f32>, x: Var| m.local.forward(t, &lv, x, Some(&batch.crop));
        let a = adversarial_gen_loss(&mut tape, &global as &CriticFn<f32>, out)?;
        let b = adversarial_gen_loss(&mut tape, &local as &CriticFn<f32>, out)?;
        let adv = tape.add(a, b)?;
        let l1 = discounted_l1_var(&mut tape, out, &batch.target, batch.discount.clone())?;
        let total = tape.add(adv, l1)?;
        let adv_v = finite(tape.value(adv).item() as f64, "generator adversarial loss", self.step)?;
        let l1_v = finite(tape.value(l1).item() as f64, "discounted L1", self.step)?;
        let grads = tape.grad(total, &vars, false)?;
        let grads: Vec<Tensor<f32>> = grads.iter().map(|g| tape.value(*g).clone()).collect();
        let step = self.step;
        self.adam[0].step(&mut self.model.g, &grads).map_err(|e| numeric("generator", step, e))?;
        Ok((adv_v, l1_v))
    }

    /// `critic_ratio` critic updates followed by one generator update.
    pub fn step(&mut self, samples: &[&TrainingSample]) -> Result<StepStats> {
        if samples.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let batch = Batch::new(samples, self.config.gamma)?;
        if batch.target.shape()[2] != self.config.tile || batch.target.shape()[3] != self.config.tile {
            return Err(Error::dimension(format!("samples are not {0}x{0} tiles", self.config.tile)));
        }
        let mut critic_loss = 0.0;
        for _ in 0..self.config.critic_ratio {
            critic_loss = self.critic_step(&batch)?;
        }
        let (gen_adversarial, discounted_l1) = self.generator_step(&batch)?;
        self.step += 1;
        let stats = StepStats {
            step: self.step,
            critic_loss,
            gen_adversarial,
            discounted_l1,
        };
        self.history.push(stats);
        Ok(stats)
    }

    /// One shuffled pass over `data` in batches.
    pub fn epoch(&mut self, data: &[TrainingSample], checkpoint: Option<&Path>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("no training samples"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
            self.step(&batch)?;
            if let (Some(dir), k) = (checkpoint, self.config.checkpoint_every) {
                if k > 0 && self.step % k == 0 {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    /// All configured epochs, then a final checkpoint if `checkpoint` is set.
    pub fn fit(&mut self, data: &[TrainingSample], checkpoint: Option<&Path>) -> Result<()> {
        for _ in 0..self.config.epochs {
            self.epoch(data, checkpoint)?;
        }
        if let Some(dir) = checkpoint {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let params = [&self.model.g, &self.model.dg, &self.model.dl];
        for ((name, p), adam) in NETS.iter().zip(params).zip(&self.adam) {
            let meta = json!({ "kind": name, "tile": self.config.tile });
            weights::save(&dir.join(format!("{name}.json")), p, meta)?;
            let mut moments = Params::new();
            for (k, (m, v)) in adam.first_moments().iter().zip(adam.second_moments()).enumerate() {
                moments.push(format!("m.{}", p.names()[k]), m.clone());
                moments.push(format!("v.{}", p.names()[k]), v.clone());
            }
            weights::save(&dir.join(format!("adam_{name}.json")), &moments, json!({ "kind": "adam-moments" }))?;
        }
        let state = TrainState {
            step: self.step,
            config: self.config.clone(),
            adam_steps: [0, 1, 2].map(|k| self.adam[k].step_count()),
            rng: RngState::capture(&self.rng),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)? + "\n")?;
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let state: TrainState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)
            .map_err(|e| Error::format(format!("state.json: {e}")))?;
        let mut trainer = Self::new(state.config)?;
        let cfg = AdamConfig::with_lr(trainer.config.lr);
        let model = &mut trainer.model;
        let params = [&mut model.g, &mut model.dg, &mut model.dl];
        for (k, (name, p)) in NETS.iter().zip(params).enumerate() {
            let (_, loaded) = weights::load(&dir.join(format!("{name}.json"))).map_err(Error::from_weights)?;
            weights::assign(p, &loaded).map_err(Error::from_weights)?;
            let (_, moments) = weights::load(&dir.join(format!("adam_{name}.json"))).map_err(Error::from_weights)?;
            if moments.len() != 2 * p.len() {
                return Err(Error::format(format!("adam_{name}: wrong tensor count")));
            }
            let first = (0..p.len()).map(|i| moments.get(2 * i).clone()).collect();
            let second = (0..p.len()).map(|i| moments.get(2 * i + 1).clone()).collect();
            trainer.adam[k] = Adam::from_parts(cfg, state.adam_steps[k], first, second);
        }
        trainer.rng = state.rng.restore()?;
        trainer.step = state.step;
        Ok(trainer)
    }
}

/// Loads the generator half of a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<Model> {
    Ok(Trainer::resume(dir)?.model)
}
