//! Optimization loop: dual-stream objective assembly, gradient accumulation
//! over micro-batches, checkpointing and rotation.

pub mod adam;
pub mod checkpoint;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::batch::Batch;
use crate::data::features::FeatureTable;
use crate::data::vocab::PAD;
use crate::data::ParallelExample;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, MultimodalTransformer};
use crate::rng::RngBundle;
use crate::tensor::Var;

pub use adam::{adam_update, lr_at, AdamConfig, OptimizerState};
pub use checkpoint::{average_checkpoints, Checkpoint};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub seed: u64,
    pub max_epochs: Option<u64>,
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub update_freq: usize,
    pub token_budget: usize,
    /// Checkpoint every N optimizer steps; None checkpoints per epoch.
    pub checkpoint_every: Option<u64>,
    pub keep_last: usize,
    pub label_smoothing: f32,
    pub weights: LossWeights,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 1,
            max_epochs: None,
            max_steps: None,
            adam: AdamConfig::default(),
            update_freq: 4,
            token_budget: 2048,
            checkpoint_every: None,
            keep_last: 10,
            label_smoothing: 0.1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_freq == 0 || self.keep_last == 0 || self.token_budget == 0 {
            return Err(Error::Data(
                "update_freq, keep_last and token_budget must be >= 1".into(),
            ));
        }
        if self.max_epochs.is_none() && self.max_steps.is_none() {
            return Err(Error::Data("one of max_epochs / max_steps must be set".into()));
        }
        self.weights.validate()
    }
}

/// Forward both streams over a batch and assemble the combined objective.
/// Translation and KL components are normalized by target-token count, the
/// transport loss by example count.
pub fn batch_loss(
    model: &mut MultimodalTransformer,
    batch: &Batch,
    weights: LossWeights,
    label_smoothing: f32,
    rngs: &mut RngBundle,
    train: bool,
) -> Result<(Var, LossBreakdown)> {
    let fwd = model.forward_pair(batch, rngs, train)?;
    let tape = model.tape_mut();
    let mut ce_syn = Vec::with_capacity(batch.size);
    let mut ce_aut = Vec::with_capacity(batch.size);
    let mut kl = Vec::with_capacity(batch.size);
    let mut pairs = Vec::with_capacity(batch.size);
    let mut tokens = 0usize;
    for b in 0..batch.size {
        let (s, s_count) =
            tape.cross_entropy_ls_sum(fwd.logits_syn[b], &fwd.gold[b], PAD, label_smoothing)?;
        let (a, _) =
            tape.cross_entropy_ls_sum(fwd.logits_aut[b], &fwd.gold[b], PAD, label_smoothing)?;
        let (k, _) =
            tape.kl_consistency_sum(fwd.logits_syn[b], fwd.logits_aut[b], &fwd.gold_mask[b])?;
        tokens += s_count;
        ce_syn.push(s);
        ce_aut.push(a);
        kl.push(k);
        pairs.push((fwd.h_syn[b], fwd.h_aut[b]));
    }
    if tokens == 0 {
        return Err(Error::Data("batch contains no real target tokens".into()));
    }
    let inv = 1.0 / tokens as f32;
    let syn_sum = tape.add_list(&ce_syn)?;
    let l_syn = tape.scale(syn_sum, inv);
    let aut_sum = tape.add_list(&ce_aut)?;
    let l_aut = tape.scale(aut_sum, inv);
    let kl_sum = tape.add_list(&kl)?;
    let l_kl = tape.scale(kl_sum, inv);
    let l_ot = losses::ot_loss_batch(tape, &pairs)?;
    losses::total_loss(tape, l_syn, l_aut, l_kl, l_ot, weights)
}

/// One log record per optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_syn: f64,
    pub l_aut: f64,
    pub l_trans: f64,
    pub l_kl: f64,
    pub l_ot: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub enum TrainEvent {
    Step(StepLog),
    /// A step hit non-finite state and was rolled back.
    NumericsRollback { step: u64, message: String },
    CheckpointSaved { step: u64, path: PathBuf },
}

pub struct Trainer {
    pub model: MultimodalTransformer,
    pub cfg: TrainerConfig,
    opt: OptimizerState,
    rngs: RngBundle,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rngs = RngBundle::from_seed(cfg.seed);
        let model = MultimodalTransformer::new(model_cfg, &mut rngs.init)?;
        let sizes: Vec<usize> =
            model.named_params().iter().map(|(_, v)| model.tape().data(*v).len()).collect();
        Ok(Trainer { model, cfg, opt: OptimizerState::new(&sizes), rngs, step: 0 })
    }

    /// Resume from a checkpoint: parameters, optimizer state, RNG streams and
    /// step counter all restored, so the continuation is bitwise identical to
    /// the uninterrupted run.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.to_model()?;
        let sizes: Vec<usize> =
            model.named_params().iter().map(|(_, v)| model.tape().data(*v).len()).collect();
        let opt = match &ckpt.opt {
            Some(o) => {
                if !o.matches(&sizes) {
                    return Err(Error::Format(
                        "checkpoint optimizer state does not match model shapes".into(),
                    ));
                }
                o.clone()
            }
            None => OptimizerState::new(&sizes),
        };
        Ok(Trainer { model, cfg, opt, rngs: ckpt.rng.clone(), step: ckpt.step })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rngs_mut(&mut self) -> &mut RngBundle {
        &mut self.rngs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.opt), self.step, &self.rngs)
    }

    fn snapshot(&self) -> (Vec<Vec<f32>>, OptimizerState, u64) {
        let params = self
            .model
            .named_params()
            .iter()
            .map(|(_, v)| self.model.tape().data(*v).to_vec())
            .collect();
        (params, self.opt.clone(), self.step)
    }

    fn restore(&mut self, snap: (Vec<Vec<f32>>, OptimizerState, u64)) {
        let vars: Vec<Var> = self.model.named_params().iter().map(|(_, v)| *v).collect();
        for (var, data) in vars.iter().zip(&snap.0) {
            self.model.tape_mut().data_mut(*var).copy_from_slice(data);
        }
        self.opt = snap.1;
        self.step = snap.2;
    }

    /// One optimizer step over an accumulation window of micro-batches.
    /// Per-micro-batch losses are scaled by 1/len so accumulation is the
    /// mean; non-finite state rolls parameters back and reports Numerics.
    pub fn train_step(&mut self, micro_batches: &[Batch]) -> Result<LossBreakdown> {
        if micro_batches.is_empty() {
            return Err(Error::Data("train_step with no micro-batches".into()));
        }
        let snap = self.snapshot();
        match self.train_step_inner(micro_batches) {
            Ok(b) => Ok(b),
            Err(e) => {
                self.restore(snap);
                self.model.reset();
                Err(e)
            }
        }
    }

    fn train_step_inner(&mut self, micro_batches: &[Batch]) -> Result<LossBreakdown> {
        let inv = 1.0 / micro_batches.len() as f64;
        self.model.tape_mut().zero_grad();
        let mut acc = LossBreakdown::default();
        for mb in micro_batches {
            self.model.reset();
            let (total, breakdown) = batch_loss(
                &mut self.model,
                mb,
                self.cfg.weights,
                self.cfg.label_smoothing,
                &mut self.rngs,
                true,
            )?;
            let scaled = self.model.tape_mut().scale(total, inv as f32);
            self.model.tape_mut().backward(scaled)?;
            acc.l_syn += breakdown.l_syn * inv;
            acc.l_aut += breakdown.l_aut * inv;
            acc.l_trans += breakdown.l_trans * inv;
            acc.l_kl += breakdown.l_kl * inv;
            acc.l_ot += breakdown.l_ot * inv;
            acc.total += breakdown.total * inv;
        }
        let vars: Vec<Var> = self.model.named_params().iter().map(|(_, v)| *v).collect();
        for &v in &vars {
            if let Some(g) = self.model.tape().grad(v) {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::Numerics("non-finite gradient".into()));
                }
            }
        }
        let lr = lr_at(&self.cfg.adam, self.step + 1);
        adam_update(self.model.tape_mut(), &vars, &mut self.opt, &self.cfg.adam, lr)?;
        for &v in &vars {
            if !self.model.tape().data(v).iter().all(|x| x.is_finite()) {
                return Err(Error::Numerics("non-finite parameter after update".into()));
            }
        }
        self.step += 1;
        self.model.reset();
        if !acc.is_finite() {
            return Err(Error::Numerics(format!("non-finite loss {acc:?}")));
        }
        Ok(acc)
    }

    /// Full training loop. Batch composition is fixed; batch order reshuffles
    /// every epoch from a seed derived from (config seed, epoch), so a resumed
    /// run rebuilds the exact schedule of the uninterrupted one.
    pub fn run(
        &mut self,
        examples: &[ParallelExample],
        syn: &FeatureTable,
        aut: &FeatureTable,
        checkpoint_dir: Option<&Path>,
        mut on_event: impl FnMut(TrainEvent),
    ) -> Result<()> {
        let probe = crate::data::make_batches(
            examples,
            syn,
            aut,
            self.cfg.token_budget,
            epoch_seed(self.cfg.seed, 0),
        )?;
        let batches_per_epoch = probe.len() as u64;
        drop(probe);
        let steps_per_epoch = batches_per_epoch.div_ceil(self.cfg.update_freq as u64);

        loop {
            if self.done(steps_per_epoch) {
                break;
            }
            let epoch = self.step / steps_per_epoch;
            let skip_windows = (self.step % steps_per_epoch) as usize;
            let batches = crate::data::make_batches(
                examples,
                syn,
                aut,
                self.cfg.token_budget,
                epoch_seed(self.cfg.seed, epoch),
            )?;
            let windows: Vec<&[Batch]> = batches.chunks(self.cfg.update_freq).collect();
            for window in windows.into_iter().skip(skip_windows) {
                if self.done(steps_per_epoch) {
                    break;
                }
                let lr = lr_at(&self.cfg.adam, self.step + 1);
                match self.train_step(window) {
                    Ok(b) => on_event(TrainEvent::Step(StepLog {
                        step: self.step,
                        epoch,
                        lr,
                        l_syn: b.l_syn,
                        l_aut: b.l_aut,
                        l_trans: b.l_trans,
                        l_kl: b.l_kl,
                        l_ot: b.l_ot,
                        total: b.total,
                    })),
                    Err(Error::Numerics(msg)) => {
                        on_event(TrainEvent::NumericsRollback { step: self.step, message: msg });
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                let due = match self.cfg.checkpoint_every {
                    Some(every) => every > 0 && self.step % every == 0,
                    None => self.step % steps_per_epoch == 0,
                };
                if due {
                    if let Some(dir) = checkpoint_dir {
                        let path = self.save_rotated(dir)?;
                        on_event(TrainEvent::CheckpointSaved { step: self.step, path });
                    }
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            let latest = checkpoint_path(dir, self.step);
            if !latest.exists() {
                let path = self.save_rotated(dir)?;
                on_event(TrainEvent::CheckpointSaved { step: self.step, path });
            }
        }
        Ok(())
    }

    fn done(&self, steps_per_epoch: u64) -> bool {
        if let Some(max) = self.cfg.max_steps {
            if self.step >= max {
                return true;
            }
        }
        if let Some(max) = self.cfg.max_epochs {
            if self.step >= max * steps_per_epoch {
                return true;
            }
        }
        false
    }

    fn save_rotated(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = checkpoint_path(dir, self.step);
        self.checkpoint().save(&path)?;
        for old in list_checkpoints(dir)?.into_iter().rev().skip(self.cfg.keep_last) {
            std::fs::remove_file(old.1)?;
        }
        Ok(path)
    }
}

fn epoch_seed(master: u64, epoch: u64) -> u64 {
    crate::rng::RngStream::named(master, "shuffle")
        .state()
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.mmtb"))
}

/// Checkpoints in a directory, sorted by ascending step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(step) = name
            .strip_prefix("checkpoint_")
            .and_then(|s| s.strip_suffix(".mmtb"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}
