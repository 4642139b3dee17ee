//! Alternating two-phase training, annealing schedules and the trainer
//! state machine.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::corpus::{batchify, Batch, Pair, Vocab};
use crate::error::{Error, Result};
use crate::latent::LossBreakdown;
use crate::model::{Mode, Model, ModelConfig};
use crate::numeric::{adam_step, AdamConfig, AdamState, Graph, Group, Phase, Rng, Trainable};

/// Fixed offsets of the per-component random streams derived from the root seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CVAE_BATCHES: u64 = 3;
    pub const LABEL_BATCHES: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const EVAL: u64 = 6;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// KL annealing length in CVAE steps; `None` means one epoch of batches.
    pub kla_steps: Option<usize>,
    pub wd_rate: f64,
    pub lambda_max: f64,
    /// CVAE-phase steps per iteration.
    pub m: usize,
    /// Labeling-phase steps per iteration.
    pub n: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Slcvae,
            embed: 32,
            hidden: 32,
            latent: 8,
            lr: 1e-4,
            batch_size: 64,
            epochs: 20,
            kla_steps: None,
            wd_rate: 0.25,
            lambda_max: 1.0,
            m: 1,
            n: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.embed == 0 || self.hidden == 0 || self.latent == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.wd_rate) {
            return bad(format!("word dropout rate {} outside [0, 1]", self.wd_rate));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda-max must be non-negative, got {}", self.lambda_max));
        }
        if self.m == 0 || self.n == 0 {
            return bad("m and n must be at least 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            vocab_size,
            embed: self.embed,
            hidden: self.hidden,
            latent: self.latent,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Linear annealing weight `min(1, step / anneal_steps)`; 1 when
/// `anneal_steps` is 0.
pub fn kla_schedule(step: u64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / anneal_steps as f64).min(1.0)
    }
}

fn divergence(component: &str, value: f64) -> Error {
    Error::Divergence(format!("{component} became non-finite ({value})"))
}

fn check_breakdown(b: &LossBreakdown) -> Result<()> {
    for (name, v) in [("reconstruction loss", b.recon), ("KL term", b.kl), ("expressiveness loss", b.exp), ("bag-of-words loss", b.bow)] {
        if !v.is_finite() {
            return Err(divergence(name, v));
        }
    }
    Ok(())
}

fn check_grads(model: &Model) -> Result<()> {
    for (_, p) in model.store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::Divergence(format!("gradient of {} became non-finite", p.name)));
        }
    }
    Ok(())
}

fn check_frozen(model: &Model, active: Phase) -> Result<()> {
    for (_, p) in model.store.iter() {
        if p.group.phase() != active && p.grad.data().iter().any(|&g| g != 0.0) {
            return Err(Error::Contract(format!("frozen parameter {} received a gradient", p.name)));
        }
    }
    Ok(())
}

/// One CVAE-phase update: forward every network, back-propagate the total
/// loss, then one Adam step on the recognition, prior and decoder
/// parameters. The labeling network only supplies detached targets.
#[allow(clippy::too_many_arguments)]
pub fn cvae_phase_step(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    batch: &Batch,
    kla_weight: f64,
    lambda_weight: f64,
    wd_rate: f64,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut g = Graph::with_trainable(Trainable::Phase(Phase::Cvae));
    let fwd = model.cvae_forward(&mut g, batch, kla_weight, lambda_weight, wd_rate, rng)?;
    let breakdown = fwd.breakdown(&g);
    check_breakdown(&breakdown)?;
    model.store.zero_grads();
    g.backward(fwd.total, &mut model.store)?;
    check_grads(model)?;
    check_frozen(model, Phase::Cvae)?;
    phase_step(model, adam, cfg, Phase::Cvae);
    model.store.zero_grads();
    Ok(breakdown)
}

fn phase_step(model: &mut Model, adam: &mut AdamState, cfg: &AdamConfig, active: Phase) {
    let phases: Vec<Phase> = model.store.iter().map(|(_, p)| p.group.phase()).collect();
    adam_step(&mut model.store, adam, cfg, |id| phases[id.index()] == active);
}

/// One labeling-phase update: reconstruction through the frozen decoder
/// conditioned on the labeling network's output, Adam on the labeling
/// parameters only.
pub fn labeling_phase_step(model: &mut Model, adam: &mut AdamState, cfg: &AdamConfig, batch: &Batch) -> Result<f64> {
    if model.mode() != Mode::Slcvae {
        return Err(Error::Contract(format!("mode {} has no labeling phase", model.mode())));
    }
    let mut g = Graph::with_trainable(Trainable::Phase(Phase::Labeling));
    let loss = model.labeling_loss(&mut g, batch)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(divergence("labeling loss", value));
    }
    model.store.zero_grads();
    g.backward(loss, &mut model.store)?;
    check_grads(model)?;
    check_frozen(model, Phase::Labeling)?;
    phase_step(model, adam, cfg, Phase::Labeling);
    model.store.zero_grads();
    Ok(value)
}

/// Position in an endless sequence of seeded epochs of batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPos {
    pub epoch: u64,
    pub cursor: usize,
}

fn epoch_seed(seed: u64, salt: u64, epoch: u64) -> u64 {
    Rng::derived(seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03), salt).next_u64()
}

impl StreamPos {
    /// The next batch of the stream; advances to a freshly shuffled epoch
    /// when the current one is used up.
    pub fn next_batch(&mut self, pairs: &[Pair], batch_size: usize, seed: u64, salt: u64) -> Batch {
        let batches = batchify(pairs, batch_size, epoch_seed(seed, salt, self.epoch));
        let n = batches.len();
        let b = batches.into_iter().nth(self.cursor).expect("cursor inside the epoch");
        self.cursor += 1;
        if self.cursor == n {
            self.epoch += 1;
            self.cursor = 0;
        }
        b
    }
}

/// Everything besides parameters and optimizer moments that a resumed run
/// needs to continue exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// CVAE-phase steps taken.
    pub global_step: u64,
    /// Labeling-phase steps taken.
    pub labeling_steps: u64,
    pub cvae_stream: StreamPos,
    pub label_stream: StreamPos,
    /// Latent noise and word-dropout draws.
    pub rng: Rng,
    /// Running sums over the current epoch: (CVAE total, steps, labeling loss, steps).
    pub epoch_sums: (f64, u64, f64, u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean training total over the epoch's CVAE steps.
    pub train_total: f64,
    /// Mean labeling loss over the epoch's labeling steps (0 outside slcvae).
    pub train_labeling: f64,
    pub valid: LossBreakdown,
    /// Mean KL per validation pair (0 for seq2seq).
    pub valid_kl: f64,
}

/// Losses of one iteration of the alternating schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub cvae: Vec<LossBreakdown>,
    pub labeling: Vec<f64>,
}

/// Reported to an observer around every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Before(Phase),
    After(Phase),
}

pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub adam: AdamState,
    pub state: TrainerState,
    pub history: Vec<EpochLog>,
    train: Vec<Pair>,
    valid: Vec<Pair>,
}

impl Trainer {
    /// A fresh run with seeded initial parameters.
    pub fn new(config: TrainConfig, vocab: Vocab, train: Vec<Pair>, valid: Vec<Pair>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab.len()), &mut Rng::derived(config.seed, streams::INIT))?;
        let adam = AdamState::new(&model.store);
        let state = TrainerState {
            global_step: 0,
            labeling_steps: 0,
            cvae_stream: StreamPos::default(),
            label_stream: StreamPos::default(),
            rng: Rng::derived(config.seed, streams::NOISE),
            epoch_sums: (0.0, 0, 0.0, 0),
        };
        Self::assemble(config, vocab, model, adam, state, Vec::new(), train, valid)
    }

    /// Continues the run stored in `ck` on the same data.
    pub fn resume(ck: Checkpoint, train: Vec<Pair>, valid: Vec<Pair>) -> Result<Self> {
        let model = ck.model()?;
        let Checkpoint {
            config,
            vocab,
            adam,
            state,
            history,
            ..
        } = ck;
        Self::assemble(config, vocab, model, adam, state, history, train, valid)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        vocab: Vocab,
        model: Model,
        adam: AdamState,
        state: TrainerState,
        history: Vec<EpochLog>,
        train: Vec<Pair>,
        valid: Vec<Pair>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if let Some(p) = train.iter().chain(&valid).find(|p| p.source.is_empty() || p.target.is_empty()) {
            return Err(Error::Contract(format!("empty source or target in pair {p:?}")));
        }
        let v = vocab.len();
        if let Some(p) = train.iter().chain(&valid).find(|p| p.source.iter().chain(&p.target).any(|&t| t >= v)) {
            return Err(Error::Contract(format!("token id outside the vocabulary in pair {p:?}")));
        }
        Ok(Self {
            config,
            vocab,
            model,
            adam,
            state,
            history,
            train,
            valid,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    pub fn anneal_steps(&self) -> u64 {
        self.config.kla_steps.unwrap_or(self.batches_per_epoch()) as u64
    }

    /// Current (KL weight, expressiveness weight). The expressiveness weight
    /// rises in lockstep with the KL weight up to `lambda_max`.
    pub fn weights(&self) -> (f64, f64) {
        let kla = kla_schedule(self.state.global_step, self.anneal_steps());
        let lambda = if self.config.mode == Mode::Slcvae { self.config.lambda_max * kla } else { 0.0 };
        (kla, lambda)
    }

    pub fn finished(&self) -> bool {
        self.state.cvae_stream.epoch >= self.config.epochs as u64
    }

    /// `m` CVAE-phase steps, then (in slcvae mode) `n` labeling-phase steps
    /// on fresh batches. Logs validation losses when an epoch completes.
    pub fn iteration(&mut self) -> Result<IterationLog> {
        self.iteration_observed(&mut |_, _| {})
    }

    /// Like `iteration`, calling `observe` with the model before and after
    /// each phase step.
    pub fn iteration_observed(&mut self, observe: &mut dyn FnMut(StepEvent, &Model)) -> Result<IterationLog> {
        let cfg = self.config.adam();
        let mut log = IterationLog {
            cvae: Vec::with_capacity(self.config.m),
            labeling: Vec::new(),
        };
        for _ in 0..self.config.m {
            if self.finished() {
                break;
            }
            let (kla, lambda) = self.weights();
            let epoch = self.state.cvae_stream.epoch;
            let batch = self.state.cvae_stream.next_batch(&self.train, self.config.batch_size, self.config.seed, streams::CVAE_BATCHES);
            observe(StepEvent::Before(Phase::Cvae), &self.model);
            let b = cvae_phase_step(
                &mut self.model,
                &mut self.adam,
                &cfg,
                &batch,
                kla,
                lambda,
                self.config.wd_rate,
                &mut self.state.rng,
            )?;
            observe(StepEvent::After(Phase::Cvae), &self.model);
            self.state.global_step += 1;
            debug!("step {} total {:.6} recon {:.6} kl {:.6} exp {:.6} bow {:.6}", self.state.global_step, b.total, b.recon, b.kl, b.exp, b.bow);
            self.state.epoch_sums.0 += b.total;
            self.state.epoch_sums.1 += 1;
            log.cvae.push(b);
            if self.state.cvae_stream.epoch > epoch {
                self.end_epoch(epoch)?;
            }
        }
        if self.config.mode == Mode::Slcvae && !log.cvae.is_empty() {
            for _ in 0..self.config.n {
                let batch = self.state.label_stream.next_batch(&self.train, self.config.batch_size, self.config.seed, streams::LABEL_BATCHES);
                observe(StepEvent::Before(Phase::Labeling), &self.model);
                let l = labeling_phase_step(&mut self.model, &mut self.adam, &cfg, &batch)?;
                observe(StepEvent::After(Phase::Labeling), &self.model);
                self.state.labeling_steps += 1;
                self.state.epoch_sums.2 += l;
                self.state.epoch_sums.3 += 1;
                log.labeling.push(l);
            }
        }
        Ok(log)
    }

    fn end_epoch(&mut self, epoch: u64) -> Result<()> {
        let (valid, valid_kl) = self.validate(epoch)?;
        let (t, tn, l, ln) = self.state.epoch_sums;
        let entry = EpochLog {
            epoch,
            train_total: t / tn.max(1) as f64,
            train_labeling: l / ln.max(1) as f64,
            valid,
            valid_kl,
        };
        info!(
            "epoch {} train {:.5} labeling {:.5} valid total {:.5} recon {:.5} kl {:.5} exp {:.5} bow {:.5}",
            epoch + 1,
            entry.train_total,
            entry.train_labeling,
            valid.total,
            valid.recon,
            valid_kl,
            valid.exp,
            valid.bow
        );
        self.history.push(entry);
        self.state.epoch_sums = (0.0, 0, 0.0, 0);
        Ok(())
    }

    /// Mean validation loss components and mean KL per pair, with the
    /// current schedule weights and no word dropout. Sampling uses its own
    /// stream so validation never perturbs training.
    pub fn validate(&self, epoch: u64) -> Result<(LossBreakdown, f64)> {
        if self.valid.is_empty() {
            return Ok((LossBreakdown::default(), 0.0));
        }
        let (kla, lambda) = self.weights();
        let mut rng = Rng::derived(self.config.seed ^ epoch, streams::VALIDATION);
        let mut sum = LossBreakdown::default();
        let mut kl_sum = 0.0;
        let n = self.valid.len() as f64;
        for chunk in self.valid.chunks(self.config.batch_size) {
            let batch = Batch::from_pairs(chunk);
            let w = chunk.len() as f64 / n;
            let mut g = Graph::inference();
            let b = self.model.cvae_forward(&mut g, &batch, kla, lambda, 0.0, &mut rng)?.breakdown(&g);
            sum.recon += w * b.recon;
            sum.kl += w * b.kl;
            sum.exp += w * b.exp;
            sum.bow += w * b.bow;
            sum.total += w * b.total;
            if self.model.mode().has_latent() {
                kl_sum += self.model.kl_per_pair(&batch)?.iter().sum::<f64>();
            }
        }
        sum.kla_weight = kla;
        sum.lambda_weight = lambda;
        Ok((sum, kl_sum / n))
    }

    /// Runs until the configured number of epochs is complete.
    pub fn run(&mut self) -> Result<()> {
        self.run_observed(&mut |_, _| {})
    }

    pub fn run_observed(&mut self, observe: &mut dyn FnMut(StepEvent, &Model)) -> Result<()> {
        info!("training {} pairs ({} validation), {} batches per epoch", self.train.len(), self.valid.len(), self.batches_per_epoch());
        while !self.finished() {
            self.iteration_observed(observe)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// Parameter values of one group, flattened in store order.
    pub fn group_snapshot(&self, group: Group) -> Vec<f64> {
        group_snapshot(&self.model, group)
    }
}

pub fn group_snapshot(model: &Model, group: Group) -> Vec<f64> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.group == group)
        .flat_map(|(_, p)| p.value.data().iter().copied())
        .collect()
}

/// Trains a fresh model on `train` and returns the final checkpoint.
pub fn train(config: TrainConfig, vocab: Vocab, train: Vec<Pair>, valid: Vec<Pair>) -> Result<Checkpoint> {
    info!("resolved training configuration: {}", serde_json::to_string(&config)?);
    let mut t = Trainer::new(config, vocab, train, valid)?;
    t.run()?;
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{flatten, split_items, synth_generate};
    use proptest::prelude::*;
    use crate::numeric::Rng;

    fn small(mode: Mode, seed: u64) -> (TrainConfig, Vocab, Vec<Pair>, Vec<Pair>) {
        let ex = synth_generate(12, 2, 3);
        let vocab = Vocab::build(&ex, 1);
        let (tr, va) = split_items(&ex, 0.25);
        let cfg = TrainConfig {
            mode,
            embed: 6,
            hidden: 5,
            latent: 3,
            lr: 1e-3,
            batch_size: 4,
            epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        (cfg, vocab.clone(), flatten(&tr, &vocab), flatten(&va, &vocab))
    }

    fn trainer(mode: Mode, seed: u64) -> Trainer {
        let (cfg, vocab, tr, va) = small(mode, seed);
        Trainer::new(cfg, vocab, tr, va).unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(kla_schedule(0, 10), 0.0);
        assert_eq!(kla_schedule(10, 10), 1.0);
        assert_eq!(kla_schedule(5, 10), 0.5);
        assert_eq!(kla_schedule(50, 10), 1.0);
        assert_eq!(kla_schedule(0, 0), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_monotone(a in 0u64..1000, b in 0u64..1000, steps in 0u64..500) {
            let (lo, hi) = (a.min(b), a.max(b));
            let (wl, wh) = (kla_schedule(lo, steps), kla_schedule(hi, steps));
            prop_assert!(wl <= wh && (0.0..=1.0).contains(&wl) && wh <= 1.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { m: 0, ..TrainConfig::default() },
            TrainConfig { wd_rate: 1.5, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { hidden: 0, ..TrainConfig::default() },
            TrainConfig { lambda_max: -1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let (cfg, vocab, _, va) = small(Mode::Cvae, 0);
        assert!(matches!(Trainer::new(cfg, vocab, Vec::new(), va), Err(Error::Contract(_))));
    }

    fn batch_of(t: &Trainer) -> Batch {
        Batch::from_pairs(&t.train[..4])
    }

    fn fixed_loss(t: &Trainer, batch: &Batch) -> f64 {
        let mut g = Graph::inference();
        t.model.cvae_forward(&mut g, batch, 1.0, 0.5, 0.0, &mut Rng::new(77)).unwrap().breakdown(&g).total
    }

    #[test]
    fn cvae_step_descends_and_freezes_labeling() {
        let mut t = trainer(Mode::Slcvae, 1);
        let batch = batch_of(&t);
        let labeling = t.group_snapshot(Group::Labeling);
        let cfg = AdamConfig::with_lr(1e-4);
        let mut losses = vec![fixed_loss(&t, &batch)];
        for _ in 0..2 {
            cvae_phase_step(&mut t.model, &mut t.adam, &cfg, &batch, 1.0, 0.5, 0.0, &mut Rng::new(77)).unwrap();
            losses.push(fixed_loss(&t, &batch));
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        assert_eq!(t.group_snapshot(Group::Labeling), labeling);
        assert!(t.model.store.iter().all(|(_, p)| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn zero_lambda_step_matches_plain_cvae() {
        // Labeling parameters are created last, so both models share every
        // other initial value.
        let mut sl = trainer(Mode::Slcvae, 2);
        let mut cv = trainer(Mode::Cvae, 2);
        let batch = batch_of(&sl);
        let cfg = AdamConfig::with_lr(1e-3);
        let a = cvae_phase_step(&mut sl.model, &mut sl.adam, &cfg, &batch, 0.3, 0.0, 0.25, &mut Rng::new(5)).unwrap();
        let b = cvae_phase_step(&mut cv.model, &mut cv.adam, &cfg, &batch, 0.3, 0.0, 0.25, &mut Rng::new(5)).unwrap();
        assert_eq!(a.total, b.total);
        for (_, p) in cv.model.store.iter() {
            let q = sl.model.store.get(sl.model.store.id(&p.name).unwrap());
            assert!(p.value.bit_eq(&q.value), "{}", p.name);
        }
    }

    #[test]
    fn labeling_step_descends_and_freezes_the_rest() {
        let mut t = trainer(Mode::Slcvae, 3);
        let batch = batch_of(&t);
        let frozen: Vec<Vec<f64>> = [Group::Recognition, Group::Decoder, Group::Prior]
            .iter()
            .map(|&g| t.group_snapshot(g))
            .collect();
        let cfg = AdamConfig::with_lr(1e-4);
        let eval = |t: &Trainer| {
            let mut g = Graph::inference();
            let l = t.model.labeling_loss(&mut g, &batch).unwrap();
            g.value(l).item()
        };
        let mut losses = vec![eval(&t)];
        for _ in 0..3 {
            let l = labeling_phase_step(&mut t.model, &mut t.adam, &cfg, &batch).unwrap();
            assert_eq!(l, *losses.last().unwrap());
            losses.push(eval(&t));
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        let after: Vec<Vec<f64>> = [Group::Recognition, Group::Decoder, Group::Prior]
            .iter()
            .map(|&g| t.group_snapshot(g))
            .collect();
        assert_eq!(frozen, after);

        let mut cv = trainer(Mode::Cvae, 3);
        let before = cv.checkpoint();
        assert!(matches!(
            labeling_phase_step(&mut cv.model, &mut cv.adam, &cfg, &batch),
            Err(Error::Contract(_))
        ));
        assert_eq!(cv.checkpoint(), before);
    }

    #[test]
    fn zero_epochs_is_the_seeded_initialization() {
        let (mut cfg, vocab, tr, va) = small(Mode::Slcvae, 4);
        cfg.epochs = 0;
        let ck = train(cfg.clone(), vocab.clone(), tr, va).unwrap();
        let init = Model::new(cfg.model_config(vocab.len()), &mut Rng::derived(4, streams::INIT)).unwrap();
        assert_eq!(ck.params.len(), init.store.len());
        for ((name, v), (_, p)) in ck.params.iter().zip(init.store.iter()) {
            assert_eq!(name, &p.name);
            assert!(v.bit_eq(&p.value));
        }
        assert_eq!(ck.state.global_step, 0);
    }

    #[test]
    fn epochs_and_iterations() {
        let mut t = trainer(Mode::Slcvae, 5);
        let per_epoch = t.batches_per_epoch() as u64;
        t.run().unwrap();
        assert_eq!(t.state.global_step, 2 * per_epoch);
        assert_eq!(t.state.labeling_steps, 2 * per_epoch);
        assert_eq!(t.history.len(), 2);
        assert!(t.history.iter().all(|h| h.valid.total.is_finite() && h.valid_kl >= 0.0));
        assert_eq!(t.weights(), (1.0, 1.0));
    }

    #[test]
    fn overfits_a_single_pair() {
        let ex = vec![crate::corpus::OneToManyExample::from_text("red shirt", &["a red shirt"]).unwrap()];
        let vocab = Vocab::build(&ex, 1);
        let pairs = flatten(&ex, &vocab);
        let cfg = TrainConfig {
            mode: Mode::Seq2seq,
            embed: 8,
            hidden: 8,
            lr: 1e-2,
            epochs: 200,
            wd_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, vocab, pairs.clone(), pairs).unwrap();
        t.run().unwrap();
        assert!(t.history.last().unwrap().valid.recon < 0.1);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let mut t = trainer(Mode::CvaeBow, 6);
        t.iteration().unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let model = back.model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(t.model.store.iter()) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn logged_floats_survive_the_manifest(x in any::<f64>().prop_filter("finite", |v| v.is_finite()), y in 1e-300f64..1e300) {
            let mut ck = trainer(Mode::Seq2seq, 2).checkpoint();
            ck.history.push(EpochLog { epoch: 0, train_total: x, train_labeling: y, valid: LossBreakdown { kl: y / 3.0, ..Default::default() }, valid_kl: x / 7.0 });
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.history, ck.history);
        }
    }

    #[test]
    fn corrupt_checkpoints_have_distinct_errors() {
        let bytes = trainer(Mode::Cvae, 7).checkpoint().to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::CheckpointPayload(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::CheckpointHeader(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..3]), Err(Error::CheckpointHeader(_))));
        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let mut bad_json = bytes.clone();
        bad_json[8] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&bad_json), Err(Error::CheckpointHeader(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CheckpointPayload(_))));
    }

    #[test]
    fn identical_runs_give_identical_checkpoints() {
        let run = || {
            let (cfg, vocab, tr, va) = small(Mode::Slcvae, 8);
            train(cfg, vocab, tr, va).unwrap().to_bytes().unwrap()
        };
        assert!(run() == run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for mode in Mode::ALL {
            let mut full = trainer(mode, 9);
            for _ in 0..5 {
                full.iteration().unwrap();
            }
            let mut first = trainer(mode, 9);
            for _ in 0..4 {
                first.iteration().unwrap();
            }
            let bytes = first.checkpoint().to_bytes().unwrap();
            let (_, _, tr, va) = small(mode, 9);
            let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), tr, va).unwrap();
            resumed.iteration().unwrap();
            assert_eq!(resumed.checkpoint(), full.checkpoint(), "{mode}");
            assert!(resumed.checkpoint().to_bytes().unwrap() == full.checkpoint().to_bytes().unwrap());
        }
    }
}
