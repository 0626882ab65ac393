//! The pre-training loop.
//!
//! Each step, in order: augment `M` views per instance, encode the `M − 1`
//! queries on a tape and the key without one, evaluate the batch loss,
//! backpropagate and apply SGD with momentum to the query encoder, move the
//! key encoder toward it, and push the keys into the negative queue.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    apply_override, beta_at, cosine_lr, parse_table, validate_schedule, BetaStep, EncoderSection, LossForm,
    OptimConfig, PriorSection, TrainConfig,
};
pub use metrics::{EpochSummary, MetricsWriter, Observer, Recorder, StepRecord};

use crate::autodiff::Tape;
use crate::data::{epoch_order, ViewSampler};
use crate::encoder::EncoderPair;
use crate::error::{Error, Result};
use crate::losses::{lorac_batch_loss_with, lorac_bs_loss, Batch, InstanceViews};
use crate::queue::NegativeQueue;
use crate::tensor::Tensor;

const QUEUE_SEED_SALT: u64 = 0x5155_4555_4500_0001;

/// Everything needed to continue training: the checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub pair: EncoderPair,
    pub queue: NegativeQueue,
    /// SGD momentum buffers, one per query-encoder tensor.
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    /// Fresh encoders, zero velocity, and a queue filled with keys of
    /// augmented `samples` from the initial key encoder.
    pub fn init(config: &TrainConfig, samples: &Tensor) -> Result<Self> {
        config.validate()?;
        let (n, d_in) = samples.dims2()?;
        if n == 0 {
            return Err(Error::Contract("empty dataset".into()));
        }
        let pair = EncoderPair::new(&config.encoder_config(d_in), config.optim.momentum_encoder)?;
        let queue = NegativeQueue::new(config.queue_size, config.encoder.d_out, config.seed ^ QUEUE_SEED_SALT)?;
        let velocity = pair
            .query
            .tensors()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut state = Self {
            config: config.clone(),
            pair,
            queue,
            velocity,
            epoch: 0,
            step: 0,
        };
        let sampler = state.sampler()?;
        let rows: Vec<Vec<f64>> = (0..config.queue_size)
            .map(|j| sampler.fill_view(samples.row(j % n), j as u64))
            .collect();
        let keys = state.pair.forward_key(&Tensor::from_rows(&rows)?)?;
        state.queue.push_batch(&keys)?;
        Ok(state)
    }

    pub fn d_in(&self) -> usize {
        self.pair.query.d_in()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn sampler(&self) -> Result<ViewSampler> {
        ViewSampler::new(self.config.seed, self.config.augment)
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// One optimisation step on the instances `batch` (row indices into
/// `samples`). On error the state is left untouched.
pub fn train_step(state: &mut TrainState, samples: &Tensor, batch: &[usize], lr: f64) -> Result<StepRecord> {
    let cfg = state.config.clone();
    let (_, d_in) = samples.dims2()?;
    if d_in != state.d_in() {
        return Err(Error::dim("train_step", format!("samples of width {d_in}, encoder expects {}", state.d_in())));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let m1 = cfg.views - 1;
    let prior = cfg.prior.at_epoch(state.epoch);

    // (1) views
    let sampler = state.sampler()?;
    let mut query_rows = Vec::with_capacity(batch.len() * m1 * d_in);
    let mut key_rows = Vec::with_capacity(batch.len() * d_in);
    for &i in batch {
        let v = sampler.make_views(samples.row(i), cfg.views, state.epoch, i as u64)?;
        query_rows.extend_from_slice(v.queries.data());
        key_rows.extend_from_slice(&v.key);
    }
    let query_raw = Tensor::matrix(batch.len() * m1, d_in, query_rows)?;
    let key_raw = Tensor::matrix(batch.len(), d_in, key_rows)?;

    // (2) encode
    let tape = Tape::new();
    let bound = state.pair.query.bind(&tape);
    let q_all = state.pair.forward_query(&bound, &tape.constant(query_raw))?;
    let keys = state.pair.forward_key(&key_raw)?;

    // (3) loss
    let instances = (0..batch.len())
        .map(|b| {
            Ok(InstanceViews {
                queries: q_all.slice_rows(b * m1, m1)?,
                k_pos: Tensor::vector(keys.row(b).to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lb = Batch {
        instances,
        negatives: state.queue.as_negatives(),
    };
    let out = match cfg.loss {
        LossForm::Instance => {
            let subset = (!cfg.q_view_subset.is_empty()).then_some(cfg.q_view_subset.as_slice());
            lorac_batch_loss_with(&lb, &prior, subset)?
        }
        LossForm::BatchShared => lorac_bs_loss(&lb, &prior)?,
    };
    let loss = out.loss.item();
    let nuc_norm = out.nuc_norms.iter().sum::<f64>() / out.nuc_norms.len() as f64;
    if !loss.is_finite() || !nuc_norm.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            what: format!("loss {loss}, nuclear norm {nuc_norm}"),
        });
    }

    // (4) backward and SGD with momentum
    let grads = bound.gradients(&tape.backward(&out.loss)?);
    let mut query = state.pair.query.clone();
    let mut velocity = state.velocity.clone();
    let (mu, wd) = (cfg.optim.sgd_momentum, cfg.optim.weight_decay);
    for ((p, v), g) in query.tensors_mut().into_iter().zip(velocity.iter_mut()).zip(&grads) {
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    if !query.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            what: "query encoder parameters after the update".into(),
        });
    }
    state.pair.query = query;
    state.velocity = velocity;

    // (5) key encoder, (6) queue
    state.pair.momentum_update();
    state.queue.push_batch(&keys)?;

    let record = StepRecord {
        step: state.step,
        epoch: state.epoch,
        loss,
        nuc_norm,
        beta: prior.beta.is_finite().then_some(prior.beta),
        lr,
    };
    state.step += 1;
    Ok(record)
}

/// Runs the remaining epochs of `state`. Reports every step and epoch to
/// `observer`. On a numeric abort, `state` holds the last good values.
pub fn run(state: &mut TrainState, samples: &Tensor, observer: &mut dyn Observer) -> Result<()> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Contract("empty dataset".into()));
    }
    let spe = steps_per_epoch(n, state.config.batch_size);
    let total = spe * state.config.epochs;
    while !state.is_finished() {
        let order = epoch_order(state.config.seed, state.epoch, n);
        let (mut loss_sum, mut nuc_sum, mut lr, mut count) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(state.config.batch_size) {
            lr = cosine_lr(state.step, total, state.config.optim.lr_base, state.config.optim.lr_final);
            let rec = train_step(state, samples, chunk, lr)?;
            loss_sum += rec.loss;
            nuc_sum += rec.nuc_norm;
            count += 1;
            observer.on_step(&rec)?;
        }
        let beta = beta_at(&state.config.prior.beta_schedule, state.epoch);
        let summary = EpochSummary {
            epoch: state.epoch,
            mean_loss: loss_sum / count as f64,
            mean_nuc_norm: nuc_sum / count as f64,
            beta: beta.is_finite().then_some(beta),
            lr,
        };
        state.epoch += 1;
        observer.on_epoch(state, &summary)?;
    }
    Ok(())
}

/// Initialises and trains from scratch.
pub fn train(config: &TrainConfig, samples: &Tensor, observer: &mut dyn Observer) -> Result<TrainState> {
    let mut state = TrainState::init(config, samples)?;
    run(&mut state, samples, observer)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            views: 3,
            batch_size: 4,
            queue_size: 16,
            encoder: EncoderSection {
                hidden: vec![8],
                d_out: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn queue_head_advances_by_batch() {
        let ds = gen_synthetic(2, 5, 6, 0.1, 0).unwrap();
        let mut st = TrainState::init(&tiny(), ds.samples()).unwrap();
        let head = st.queue.head();
        train_step(&mut st, ds.samples(), &[0, 1, 2, 3], 0.1).unwrap();
        assert_eq!(st.queue.head(), (head + 4) % 16);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn key_follows_updated_query() {
        let ds = gen_synthetic(2, 5, 6, 0.1, 0).unwrap();
        let mut st = TrainState::init(&tiny(), ds.samples()).unwrap();
        // Make query and key differ first.
        train_step(&mut st, ds.samples(), &[0, 1, 2, 3], 0.5).unwrap();
        let key_before = st.pair.key.clone();
        train_step(&mut st, ds.samples(), &[4, 5, 6, 7], 0.5).unwrap();
        let m = st.pair.momentum;
        for ((k, kb), q) in st.pair.key.tensors().into_iter().zip(key_before.tensors()).zip(st.pair.query.tensors()) {
            for ((a, b), c) in k.data().iter().zip(kb.data()).zip(q.data()) {
                assert_eq!(*a, m * b + (1.0 - m) * c);
            }
        }
    }

    #[test]
    fn epoch_zero_is_initialisation() {
        let ds = gen_synthetic(2, 5, 6, 0.1, 0).unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny() };
        let st = train(&cfg, ds.samples(), &mut Recorder::default()).unwrap();
        assert_eq!(st, TrainState::init(&cfg, ds.samples()).unwrap());
    }

    #[test]
    fn step_count_and_records() {
        let ds = gen_synthetic(2, 5, 6, 0.1, 0).unwrap();
        let mut rec = Recorder::default();
        let st = train(&tiny(), ds.samples(), &mut rec).unwrap();
        assert_eq!(st.step, 2 * 3);
        assert_eq!(rec.steps.len(), 6);
        assert_eq!(rec.epochs.len(), 2);
        assert!(rec.steps.iter().all(|r| r.loss.is_finite() && r.nuc_norm.is_finite() && r.lr.is_finite()));
    }

    #[test]
    fn huge_learning_rate_aborts_cleanly() {
        let ds = gen_synthetic(2, 5, 6, 0.1, 0).unwrap();
        let mut cfg = tiny();
        cfg.optim.lr_base = 1e308;
        cfg.optim.lr_final = 1e308;
        let mut st = TrainState::init(&cfg, ds.samples()).unwrap();
        let err = run(&mut st, ds.samples(), &mut Recorder::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(st.pair.query.is_finite());
    }
}
