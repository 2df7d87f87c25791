//! Descriptor learning from bag triplets.
//!
//! The per-triplet loss is the ratio `S(K, K-) / (S(K, K+) + eps)` of relaxed
//! matching scores. Training runs in rounds: each round draws a pool of
//! triplets, performs a fixed number of RMSprop steps on mini-batches drawn
//! from the pool (gradients summed over the batch), then evaluates a fixed
//! validation triplet list. The learning rate halves whenever validation
//! loss has not improved for `patience` rounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bag_match::{soft_match_backward, soft_match_score, GramPair, MatchConfig};
use crate::data::{sample_triplet, BagDataset, BagTriplet, TripletIndex};
use crate::error::{Error, Result};
use crate::net::{param_name, DescriptorNet, Gradients};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub matching: MatchConfig,
    pub lr0: f64,
    pub batch_size: usize,
    pub iters_per_round: usize,
    pub triplets_per_round: usize,
    pub rounds: usize,
    /// Rounds without validation improvement before the rate is halved.
    pub patience: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Size of the fixed validation triplet list.
    pub val_triplets: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            lr0: 0.001,
            batch_size: 32,
            iters_per_round: 512,
            triplets_per_round: 5000,
            rounds: 128,
            patience: 5,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            val_triplets: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("iters_per_round", self.iters_per_round),
            ("triplets_per_round", self.triplets_per_round),
            ("rounds", self.rounds),
            ("patience", self.patience),
            ("val_triplets", self.val_triplets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rmsprop_decay must lie in (0, 1), got {}",
                self.rmsprop_decay
            )));
        }
        if !(self.rmsprop_eps > 0.0) {
            return Err(Error::InvalidArgument("rmsprop_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Loss of one triplet and its gradients with respect to the three
/// descriptor matrices.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Ratio loss from descriptor matrices.
pub fn ratio_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, cfg: &MatchConfig) -> Result<f64> {
    let pos = soft_match_score(&GramPair::new(anchor.clone(), positive.clone())?, cfg).score;
    let neg = soft_match_score(&GramPair::new(anchor.clone(), negative.clone())?, cfg).score;
    Ok(neg / (pos + cfg.epsilon))
}

/// Ratio loss and its gradients from descriptor matrices.
pub fn ratio_loss_grad(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    cfg: &MatchConfig,
) -> Result<TripletGrad> {
    let pos_pair = GramPair::new(anchor.clone(), positive.clone())?;
    let neg_pair = GramPair::new(anchor.clone(), negative.clone())?;
    let pos = soft_match_score(&pos_pair, cfg);
    let neg = soft_match_score(&neg_pair, cfg);
    let denom = pos.score + cfg.epsilon;
    let loss = neg.score / denom;
    let (da_pos, d_positive) = soft_match_backward(&pos_pair, &pos, cfg, -neg.score / (denom * denom));
    let (da_neg, d_negative) = soft_match_backward(&neg_pair, &neg, cfg, 1.0 / denom);
    let anchor_grad: Vec<f64> = da_pos.data().iter().zip(da_neg.data()).map(|(a, b)| a + b).collect();
    Ok(TripletGrad {
        loss,
        anchor: Tensor::new(anchor.shape(), anchor_grad)?,
        positive: d_positive,
        negative: d_negative,
    })
}

/// Loss of one triplet of bags under the current network.
pub fn triplet_loss(net: &DescriptorNet, t: &BagTriplet<'_>, cfg: &MatchConfig) -> Result<f64> {
    let a = net.forward_bag(&t.anchor.patches)?;
    let p = net.forward_bag(&t.positive.patches)?;
    let n = net.forward_bag(&t.negative.patches)?;
    ratio_loss(&a, &p, &n, cfg)
}

/// Loss of one triplet; accumulates its parameter gradient into `grads`.
pub fn triplet_loss_backward(
    net: &DescriptorNet,
    t: &BagTriplet<'_>,
    cfg: &MatchConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    let (a, ta) = net.forward_bag_traced(&t.anchor.patches)?;
    let (p, tp) = net.forward_bag_traced(&t.positive.patches)?;
    let (n, tn) = net.forward_bag_traced(&t.negative.patches)?;
    let g = ratio_loss_grad(&a, &p, &n, cfg)?;
    net.backward_bag(&ta, &g.anchor, grads)?;
    net.backward_bag(&tp, &g.positive, grads)?;
    net.backward_bag(&tn, &g.negative, grads)?;
    Ok(g.loss)
}

/// Summed loss of a batch of triplets; accumulates the summed gradient into
/// `grads`. Each distinct bag is described and backpropagated once with the
/// total gradient of every triplet it takes part in. Per-bag gradients are
/// reduced in bag-index order, so the result does not depend on the number
/// of worker threads.
pub fn batch_loss_backward(
    net: &DescriptorNet,
    dataset: &BagDataset,
    batch: &[TripletIndex],
    cfg: &MatchConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for t in batch {
        for b in [t.anchor, t.positive, t.negative] {
            let next = slots.len();
            slots.entry(b).or_insert(next);
        }
    }
    let order: Vec<usize> = {
        let mut v: Vec<(usize, usize)> = slots.iter().map(|(&b, &s)| (s, b)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, b)| b).collect()
    };
    let traced = order
        .par_iter()
        .map(|&b| net.forward_bag_traced(&dataset.bags[b].patches))
        .collect::<Result<Vec<_>>>()?;

    let d = net.descriptor_dim();
    let n = dataset.bag_size;
    let mut bag_grads: Vec<Tensor> = (0..order.len()).map(|_| Tensor::zeros(&[n, d])).collect();
    let mut total = 0.0;
    for t in batch {
        let (ia, ip, ineg) = (slots[&t.anchor], slots[&t.positive], slots[&t.negative]);
        let g = ratio_loss_grad(&traced[ia].0, &traced[ip].0, &traced[ineg].0, cfg)?;
        total += g.loss;
        for (slot, grad) in [(ia, &g.anchor), (ip, &g.positive), (ineg, &g.negative)] {
            for (acc, v) in bag_grads[slot].data_mut().iter_mut().zip(grad.data()) {
                *acc += v;
            }
        }
    }

    let arch = *net.architecture();
    let partial = traced
        .par_iter()
        .zip(&bag_grads)
        .map(|((_, acts), ge)| {
            let mut g = Gradients::zeros(&arch);
            net.backward_bag(acts, ge, &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    for g in &partial {
        grads.add_assign(g);
    }
    Ok(total)
}

/// One RMSprop update on flat slices:
/// `v = decay v + (1 - decay) g^2`, `p -= lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, decay: f64, eps: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
}

/// RMSprop state for every parameter tensor of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    mean_square: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(net: &DescriptorNet, decay: f64, eps: f64) -> Self {
        Self {
            decay,
            eps,
            mean_square: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies the gradients accumulated in the parameters' grad slots.
    pub fn step(&mut self, net: &mut DescriptorNet, lr: f64) -> Result<()> {
        for (i, p) in net.params().iter().enumerate() {
            if let Some(g) = &p.grad {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} at element {j}",
                        param_name(i)
                    )));
                }
            }
        }
        for (p, state) in net.params_mut().iter_mut().zip(&mut self.mean_square) {
            let Some(g) = p.grad.take() else { continue };
            rmsprop_step(p.data_mut(), &g, state, lr, self.decay, self.eps);
            p.grad = Some(g);
        }
        Ok(())
    }
}

/// Outcome of one training round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundReport {
    /// Mean per-triplet loss over all iterations, `None` without iterations.
    pub mean_train_loss: Option<f64>,
}

/// Samples the round's triplet pool, then runs `iters_per_round` optimizer
/// steps, each on `batch_size` triplets drawn from the pool.
pub fn run_round<R: Rng>(
    net: &mut DescriptorNet,
    optimizer: &mut RmsProp,
    trainset: &BagDataset,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<RoundReport> {
    if cfg.iters_per_round == 0 {
        return Ok(RoundReport { mean_train_loss: None });
    }
    let pool = (0..cfg.triplets_per_round)
        .map(|_| sample_triplet(trainset, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..cfg.iters_per_round {
        let batch: Vec<TripletIndex> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let mut grads = Gradients::zeros(net.architecture());
        let loss = batch_loss_backward(net, trainset, &batch, &cfg.matching, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        loss_sum += loss;
        count += batch.len();
        net.zero_grad();
        net.accumulate_grads(&grads);
        optimizer.step(net, lr)?;
    }
    net.zero_grad();
    Ok(RoundReport {
        mean_train_loss: Some(loss_sum / count as f64),
    })
}

/// A validation split with a fixed triplet list.
#[derive(Debug, Clone)]
pub struct ValidationSet<'a> {
    pub dataset: &'a BagDataset,
    pub triplets: Vec<TripletIndex>,
}

impl<'a> ValidationSet<'a> {
    pub fn sample(dataset: &'a BagDataset, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triplets = (0..count)
            .map(|_| sample_triplet(dataset, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dataset, triplets })
    }
}

/// Mean triplet loss over the validation list, without updating anything.
/// Each bag is described once.
pub fn validate(net: &DescriptorNet, valset: &ValidationSet<'_>, cfg: &MatchConfig) -> Result<f64> {
    if valset.triplets.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut needed: Vec<usize> = valset
        .triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let described = needed
        .par_iter()
        .map(|&b| net.forward_bag(&valset.dataset.bags[b].patches))
        .collect::<Result<Vec<_>>>()?;
    let lookup: BTreeMap<usize, &Tensor> = needed.iter().copied().zip(&described).collect();
    let mut sum = 0.0;
    for t in &valset.triplets {
        sum += ratio_loss(lookup[&t.anchor], lookup[&t.positive], lookup[&t.negative], cfg)?;
    }
    Ok(sum / valset.triplets.len() as f64)
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this round.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub net: DescriptorNet,
    pub curve: Vec<RoundRecord>,
    pub best_round: usize,
}

/// Full training run from a seeded initialization.
pub fn train(trainset: &BagDataset, valset: &BagDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let net = DescriptorNet::init(derive_seed(cfg.seed, "init", 0));
    train_from(net, trainset, valset, cfg, |_| {})
}

/// Trains `net`, calling `on_round` after every round.
pub fn train_from(
    mut net: DescriptorNet,
    trainset: &BagDataset,
    valset: &BagDataset,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_ids = trainset.object_ids();
    if let Some(shared) = valset.object_ids().iter().find(|id| train_ids.contains(id)) {
        return Err(Error::InvalidArgument(format!(
            "object {shared} appears in both training and validation data"
        )));
    }
    let validation = ValidationSet::sample(valset, cfg.val_triplets, derive_seed(cfg.seed, "validation", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sampling", 0));
    let mut optimizer = RmsProp::new(&net, cfg.rmsprop_decay, cfg.rmsprop_eps);
    let mut schedule = LrSchedule::new(cfg.lr0, cfg.patience);
    let mut curve = Vec::with_capacity(cfg.rounds);
    let mut best = (f64::INFINITY, net.clone(), 0);

    for round in 1..=cfg.rounds {
        let lr = schedule.lr();
        let report = run_round(&mut net, &mut optimizer, trainset, cfg, lr, &mut rng)?;
        let val_loss = validate(&net, &validation, &cfg.matching)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss in round {round}")));
        }
        let record = RoundRecord {
            round,
            train_loss: report.mean_train_loss.unwrap_or(f64::NAN),
            val_loss,
            lr,
        };
        on_round(&record);
        curve.push(record);
        if val_loss < best.0 {
            best = (val_loss, net.clone(), round);
        }
        schedule.observe(val_loss);
    }
    Ok(TrainOutcome {
        net: best.1,
        curve,
        best_round: best.2,
    })
}

/// Halves the rate after `patience` consecutive rounds without a new best
/// validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64, patience: usize) -> Self {
        Self {
            lr: lr0,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= 0.5;
                self.stale = 0;
            }
        }
    }
}

/// `round,train_loss,val_loss,lr` CSV.
pub fn loss_curve_csv(curve: &[RoundRecord]) -> String {
    let mut out = String::from("round,train_loss,val_loss,lr\n");
    for r in curve {
        let _ = writeln!(out, "{},{},{},{}", r.round, r.train_loss, r.val_loss, r.lr);
    }
    out
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[RoundRecord]) -> Result<()> {
    fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}
