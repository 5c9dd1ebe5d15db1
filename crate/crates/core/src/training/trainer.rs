use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::Dataset;
use crate::data::social::{sample_friends, SocialGraph};
use crate::diffmath::{DiffError, Dropout, Tape, Var};
use crate::error::{Error, Result};
use crate::evalcli::evaluate::{rank_users, Target};
use crate::evalcli::metrics::metrics_at_k;
use crate::model::config::parse;
use crate::model::{prepare_input, Model, ModelParams, ModelVars, UserInput};

use super::adam::{adam_step, AdamState};
use super::loss::{bpr_loss, joint_loss, regularizer, tpp_nll};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub dropout: f64,
    pub negatives: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Return the best-validation parameters instead of the last ones.
    pub keep_best: bool,
    pub squared_l2: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 50,
            gamma: 1e-4,
            dropout: 0.2,
            negatives: 1,
            patience: 10,
            keep_best: true,
            squared_l2: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma", "must be >= 0"));
        }
        if !(0.0..=0.9).contains(&self.dropout) {
            return Err(Error::config("train.dropout", "must be in [0, 0.9]"));
        }
        for (field, v) in
            [("train.batch_size", self.batch_size), ("train.epochs", self.epochs), ("train.negatives", self.negatives)]
        {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Applies one `train.*` key; returns `false` for keys of other sections.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.gamma" => self.gamma = parse(key, value)?,
            "train.dropout" => self.dropout = parse(key, value)?,
            "train.negatives" => self.negatives = parse(key, value)?,
            "train.patience" => self.patience = parse(key, value)?,
            "train.keep_best" => self.keep_best = parse(key, value)?,
            "train.squared_l2" => self.squared_l2 = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            k if k.starts_with("train.") => return Err(Error::config(k, "unknown key")),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.gamma", self.gamma.to_string()),
            ("train.dropout", self.dropout.to_string()),
            ("train.negatives", self.negatives.to_string()),
            ("train.patience", self.patience.to_string()),
            ("train.keep_best", self.keep_best.to_string()),
            ("train.squared_l2", self.squared_l2.to_string()),
            ("train.seed", self.seed.to_string()),
        ]
    }
}

/// One user's training sequence with sampled negatives, `negatives` per target.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub input: UserInput,
    pub negatives: Vec<usize>,
}

impl Instance {
    /// Number of next-item targets (`len - 1`).
    pub fn cuts(&self) -> usize {
        self.input.len() - 1
    }
}

/// Uniform item outside `history`.
pub fn sample_negative<R: Rng + ?Sized>(
    num_items: usize,
    history: &std::collections::HashSet<usize>,
    rng: &mut R,
) -> Result<usize> {
    if history.len() >= num_items {
        return Err(Error::Data("user has interacted with every item; no negative exists".into()));
    }
    loop {
        let i = rng.random_range(0..num_items);
        if !history.contains(&i) {
            return Ok(i);
        }
    }
}

/// `None` when the user has fewer than two training events.
pub fn make_instance<R: Rng + ?Sized>(
    dataset: &Dataset,
    friends: &[usize],
    user: usize,
    model: &Model,
    negatives: usize,
    rng: &mut R,
) -> Result<Option<Instance>> {
    let input = prepare_input(dataset, friends, user, dataset.train_len(user), &model.config);
    if input.len() < 2 {
        return Ok(None);
    }
    let history = dataset.history(user);
    let n = (input.len() - 1) * negatives;
    let negs = (0..n).map(|_| sample_negative(dataset.num_items, &history, rng)).collect::<Result<_>>()?;
    Ok(Some(Instance { input, negatives: negs }))
}

/// Forward pass of a batch, kept alive for the backward sweep.
pub struct BatchLoss {
    pub tape: Tape,
    pub vars: ModelVars,
    pub loss: Var,
    /// Batch means of the components, and the unweighted regularizer.
    pub bpr: f64,
    pub tpp: f64,
    pub reg: f64,
}

impl fmt::Debug for BatchLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BatchLoss")
            .field("loss", &self.value())
            .field("bpr", &self.bpr)
            .field("tpp", &self.tpp)
            .finish()
    }
}

impl BatchLoss {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    /// Adds parameter gradients into the registry.
    pub fn backward_into(&self, params: &mut ModelParams) -> Result<()> {
        let grads = self.tape.backward(self.loss)?;
        for (v, (_, t)) in self.vars.all().into_iter().zip(params.named_mut()) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }
}

/// `(1/B) Σ_u (L_BPR,u + L_TPP,u) + γ‖Θ‖`, where both per-user terms are sums
/// over that user's training sequence.
pub fn batch_loss(
    model: &Model,
    batch: &[Instance],
    gamma: f64,
    squared: bool,
    mut dropout: Option<&mut Dropout>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let use_tpp = !model.config.ablation.no_tc;
    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let g = model.embed(&mut tape, &vars)?;
    let mut total: Option<Var> = None;
    let (mut bpr_sum, mut tpp_sum) = (0.0, 0.0);
    for inst in batch {
        let input = &inst.input;
        let cuts: Vec<usize> = (0..inst.cuts()).collect();
        let k = inst.negatives.len() / cuts.len();
        let enc = model.encode(&mut tape, &vars, &g, input, &cuts, dropout.as_deref_mut())?;
        let rep: Vec<usize> = cuts.iter().flat_map(|&c| std::iter::repeat_n(c, k)).collect();
        let targets: Vec<usize> = rep.iter().map(|&c| input.items[c + 1]).collect();
        let h = tape.gather_rows(enc.hybrid, &rep)?;
        let pos_rows = tape.gather_rows(vars.item, &targets)?;
        let neg_rows = tape.gather_rows(vars.item, &inst.negatives)?;
        let pos = tape.mul(h, pos_rows)?;
        let pos = tape.row_sum(pos)?;
        let neg = tape.mul(h, neg_rows)?;
        let neg = tape.row_sum(neg)?;
        let mean = bpr_loss(&mut tape, pos, neg)?;
        let mut user_loss = tape.affine(mean, rep.len() as f64, 0.0)?;
        bpr_sum += tape.scalar(user_loss);
        if use_tpp {
            let dt: Vec<f64> = input.times.windows(2).map(|w| (w[1] - w[0]).min(model.scale.clip)).collect();
            let t = tpp_nll(&mut tape, enc.lambdas, &dt)?;
            tpp_sum += tape.scalar(t);
            user_loss = tape.add(user_loss, t)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, user_loss)?,
            None => user_loss,
        });
    }
    let b = batch.len() as f64;
    let mean = tape.affine(total.expect("non-empty batch"), 1.0 / b, 0.0)?;
    let reg = regularizer(&mut tape, &vars, squared)?;
    // the point-process term is already inside `mean`
    let loss = joint_loss(&mut tape, mean, None, reg, gamma)?;
    let reg = tape.scalar(reg);
    Ok(BatchLoss { tape, vars, loss, bpr: bpr_sum / b, tpp: tpp_sum / b, reg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub bpr: f64,
    pub tpp: f64,
    pub reg: f64,
    pub val_recall: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} bpr={:.6} tpp={:.6} reg={:.6} val_recall@10={:.4} seconds={:.2}",
            self.epoch, self.loss, self.bpr, self.tpp, self.reg, self.val_recall, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub stopped_early: bool,
    /// Set when a non-finite loss ended training; `params` are the last good ones.
    pub diverged: Option<String>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diff(DiffError::NonFinite { .. })) || e.to_string().contains("non-finite")
}

/// Mini-batch training with validation-based early stopping.
///
/// `on_epoch` sees each log line as soon as the epoch ends.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    graph: &SocialGraph,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 1));
    let mut dropout = (config.dropout > 0.0).then(|| Dropout::new(config.dropout, mix(config.seed, 2)));
    let mut adam = AdamState::new(model.params.named().into_iter().map(|(_, t)| t));
    let mut history = Vec::new();
    let mut best = (model.params.clone(), 0usize, f64::NEG_INFINITY);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut diverged = None;

    'epochs: for epoch in 1..=config.epochs {
        let start = Instant::now();
        let friend_seed = mix(config.seed, 100 + epoch as u64);
        let mut instances = Vec::new();
        for u in 0..dataset.num_users {
            let friends = sample_friends(graph, u, model.config.friends, friend_seed);
            if let Some(inst) = make_instance(dataset, &friends, u, model, config.negatives, &mut rng)? {
                instances.push(inst);
            }
        }
        if instances.is_empty() {
            return Err(Error::Data("no user has two training events".into()));
        }
        instances.shuffle(&mut rng);

        let good = model.params.clone();
        let (mut loss, mut bpr, mut tpp, mut reg) = (0.0, 0.0, 0.0, 0.0);
        let batches = instances.chunks(config.batch_size);
        let nb = batches.len() as f64;
        for batch in batches {
            let step = batch_loss(model, batch, config.gamma, config.squared_l2, dropout.as_mut()).and_then(|b| {
                if !b.value().is_finite() {
                    return Err(Error::Diverged { epoch, msg: "loss is not finite".into() });
                }
                b.backward_into(&mut model.params)?;
                adam_step(&mut model.params.named_mut(), &mut adam, config.learning_rate)?;
                Ok(b)
            });
            model.params.zero_grad();
            match step {
                Ok(b) => {
                    loss += b.value() / nb;
                    bpr += b.bpr / nb;
                    tpp += b.tpp / nb;
                    reg += b.reg / nb;
                }
                Err(e) if matches!(e, Error::Diverged { .. }) || is_divergence(&e) => {
                    log::warn!("epoch {epoch}: {e}; keeping parameters from the last good epoch");
                    model.params = good;
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let ranks = rank_users(model, dataset, graph, Target::Validation)?;
        let val_recall = metrics_at_k(&ranks, 10)?.recall;
        let entry = EpochLog { epoch, loss, bpr, tpp, reg, val_recall, seconds: start.elapsed().as_secs_f64() };
        log::info!("{}", entry.to_line());
        on_epoch(&entry);
        history.push(entry);

        if val_recall > best.2 {
            best = (model.params.clone(), epoch, val_recall);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_params, best_epoch, best_val_recall) = best;
    if config.keep_best && best_epoch > 0 {
        model.params = best_params;
    }
    Ok(TrainOutcome { params: model.params.clone(), history, best_epoch, best_val_recall, stopped_early, diverged })
}
