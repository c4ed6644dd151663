//! Training loop: Adam over the tape gradients, step-decay learning rate,
//! deterministic batch sampling, and CSV loss logging.

use crate::cgt::Mode;
use crate::config::TrainConfig;
use crate::episodes::generate_episode;
use crate::error::Error;
use crate::matrix::Matrix;
use crate::model::{forward_episode, prepare_episode, Model, PreparedEpisode};
use crate::rng::RngStream;
use crate::tape::Tape;
use crate::Result;

/// Stream ids, fixed so checkpoints replay identically.
pub const STREAM_MODEL_INIT: u64 = 0;
pub const STREAM_TRAIN_POOL: u64 = 1;
pub const STREAM_SAMPLES: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_BATCH: u64 = 5;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment state, aligned with the model's parameter registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        let zeros: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One Adam update with bias correction.
    pub fn update(&mut self, model: &mut Model, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = m.scale(ADAM_BETA1).add(&grad.scale(1.0 - ADAM_BETA1));
            *v = v
                .scale(ADAM_BETA2)
                .add(&grad.hadamard(grad).scale(1.0 - ADAM_BETA2));
            let update = Matrix::from_fn(param.rows(), param.cols(), |r, c| {
                let mh = m.get(r, c) / bc1;
                let vh = v.get(r, c) / bc2;
                lr * mh / (vh.sqrt() + ADAM_EPS)
            });
            *param = param.sub(&update);
        }
    }
}

/// Step-decay schedule: x0.1 at 80% of the step budget, x0.01 at 90%.
pub fn lr_at(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let s80 = total_steps * 8 / 10;
    let s90 = total_steps * 9 / 10;
    if step >= s90 {
        base * 0.01
    } else if step >= s80 {
        base * 0.1
    } else {
        base
    }
}

/// Per-step loss record; `to_csv_line` matches the training log header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub kl: f64,
    pub sparse: f64,
}

pub const LOG_HEADER: &str = "step,loss_total,loss_heatmap,loss_offset,loss_kl,loss_sparse";

impl LossRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.heatmap, self.offset, self.kl, self.sparse
        )
    }
}

/// Everything that evolves during training. Checkpoints capture this struct
/// bit-exactly, including the stream counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub rng_batch: RngStream,
    pub rng_samples: RngStream,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<TrainState> {
        let mut init_rng = RngStream::new(cfg.seed, STREAM_MODEL_INIT);
        let model = Model::init(cfg.model_config(), &mut init_rng)?;
        let adam = Adam::new(&model);
        Ok(TrainState {
            model,
            adam,
            step: 0,
            rng_batch: RngStream::new(cfg.seed, STREAM_BATCH),
            rng_samples: RngStream::new(cfg.seed, STREAM_SAMPLES),
        })
    }
}

/// Builds the training pool deterministically from the config seed. Resume
/// regenerates the identical pool.
pub fn build_pool(cfg: &TrainConfig) -> Result<Vec<PreparedEpisode>> {
    let synth = cfg.synth_config();
    let mut rng = RngStream::new(cfg.seed, STREAM_TRAIN_POOL);
    let mut pool = Vec::with_capacity(cfg.train_episodes);
    for _ in 0..cfg.train_episodes {
        let ep = generate_episode(&synth, &mut rng)?;
        pool.push(prepare_episode(&ep, cfg.model_config().m)?);
    }
    Ok(pool)
}

/// One optimizer step over a batch of prepared episodes.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PreparedEpisode],
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    assert!(!batch.is_empty());
    let mut tape = Tape::new();
    let params = state.model.insert_params(&mut tape);

    let scale = 1.0 / batch.len() as f64;
    let mut total_acc = None;
    let mut heat = 0.0;
    let mut offset = 0.0;
    let mut kl = 0.0;
    let mut sparse = 0.0;
    for ep in batch {
        let fwd = forward_episode(
            &mut tape,
            &state.model,
            &params,
            ep,
            Mode::Training,
            &mut state.rng_samples,
        )?;
        heat += fwd.heatmap_value * scale;
        offset += tape.scalar(fwd.offset) * scale;
        kl += fwd.kl_sum * scale;
        sparse += fwd.sparsity_sum * scale;
        total_acc = Some(match total_acc {
            None => fwd.total,
            Some(prev) => tape.add(prev, fwd.total),
        });
    }
    let sum = total_acc.expect("non-empty batch");
    let mean = tape.scale(sum, scale);
    let total = tape.scalar(mean);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at step {} (heatmap {heat}, offset {offset}, kl {kl}, sparse {sparse})",
            state.step
        )));
    }

    let grads = tape.backward(mean);
    let grad_mats: Vec<Matrix> = params
        .flat()
        .iter()
        .map(|&v| {
            let val = tape.value(v);
            grads.wrt_or_zeros(v, val.rows(), val.cols())
        })
        .collect();

    let lr = lr_at(cfg.lr, state.step, cfg.steps);
    state.adam.update(&mut state.model, &grad_mats, lr);

    let record = LossRecord {
        step: state.step,
        total,
        heatmap: heat,
        offset,
        kl,
        sparse,
    };
    state.step += 1;
    Ok(record)
}

/// Draws a batch of pool indices from the batch stream.
pub fn sample_batch_indices(
    rng: &mut RngStream,
    pool_len: usize,
    batch_size: usize,
) -> Vec<usize> {
    (0..batch_size).map(|_| rng.next_below(pool_len)).collect()
}

/// Runs `n_steps` optimizer steps, appending one record per step.
pub fn run_steps(
    state: &mut TrainState,
    pool: &[PreparedEpisode],
    cfg: &TrainConfig,
    n_steps: u64,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    for _ in 0..n_steps {
        let idx = sample_batch_indices(&mut state.rng_batch, pool.len(), cfg.batch_size);
        let batch: Vec<&PreparedEpisode> = idx.iter().map(|&i| &pool[i]).collect();
        let record = train_step(state, &batch, cfg)?;
        log.push(record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.m = 4;
        cfg.d = 8;
        cfg.d_z = 4;
        cfg.hidden = 16;
        cfg.l_d = 2;
        cfg.grid_h = 8;
        cfg.grid_w = 8;
        cfg.batch_size = 4;
        cfg.train_episodes = 8;
        cfg.steps = 10;
        cfg.lr = 1e-3;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_exact() {
        let mut cfg = tiny_cfg();
        cfg.lr = 0.0;
        let pool = build_pool(&cfg).unwrap();
        let mut state = TrainState::init(&cfg).unwrap();
        let before = state.model.clone();
        let mut log = Vec::new();
        run_steps(&mut state, &pool, &cfg, 3, &mut log).unwrap();
        for (a, b) in state.model.params().iter().zip(before.params()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let cfg = tiny_cfg();
        let run = || {
            let pool = build_pool(&cfg).unwrap();
            let mut state = TrainState::init(&cfg).unwrap();
            let mut log = Vec::new();
            run_steps(&mut state, &pool, &cfg, 5, &mut log).unwrap();
            log.iter().map(|r| r.to_csv_line()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_fixed_tiny_dataset() {
        let mut cfg = tiny_cfg();
        cfg.steps = 200;
        cfg.lr = 3e-3;
        cfg.train_episodes = 4;
        cfg.batch_size = 4;
        let pool = build_pool(&cfg).unwrap();
        let mut state = TrainState::init(&cfg).unwrap();
        let mut log = Vec::new();
        run_steps(&mut state, &pool, &cfg, 200, &mut log).unwrap();
        let first = log.first().unwrap().total;
        let last = log.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn lr_schedule_decays_at_80_and_90_percent() {
        assert_eq!(lr_at(1.0, 0, 100), 1.0);
        assert_eq!(lr_at(1.0, 79, 100), 1.0);
        assert!((lr_at(1.0, 80, 100) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, 89, 100) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, 90, 100) - 0.01).abs() < 1e-15);
        assert!((lr_at(1.0, 99, 100) - 0.01).abs() < 1e-15);
    }
}
