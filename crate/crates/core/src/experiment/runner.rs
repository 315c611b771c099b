use std::collections::BTreeSet;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ArchConfig, DataConfig, ExperimentConfig, InitConfig};
use crate::analysis::{
    full_batch_gradient, gradient_profile, reinit_sweep, ActiveFrequencyMap,
    ActiveFrequencyTracker, GradientProfile, SweepPoint,
};
use crate::data::{
    balanced_subset, load_checkpoint, load_cifar10, load_idx_dir, minibatch_order, synthetic,
    Dataset,
};
use crate::error::{Error, Result};
use crate::model::{
    backward, backward_selected, evaluate, forward_with_tape, predict, softmax_cross_entropy,
    xavier_init, Evaluation, Network, ParamStore,
};
use crate::optim::{lr_at, OptimizerState};
use crate::policy::{LayerSelection, SelectionPolicy};

const INIT_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Independent RNG stream `id` derived from a run seed.
pub fn seed_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed for the per-epoch mini-batch shuffles of a run.
pub fn shuffle_seed(seed: u64) -> u64 {
    seed_stream(seed, SHUFFLE_STREAM).next_u64()
}

/// A validated config with its data loaded and network built.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub net: Network,
    pub train: Dataset,
    pub test: Dataset,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = match &config.data {
            DataConfig::Idx { dir, source } => load_idx_dir(dir, *source)?,
            DataConfig::Cifar10 {
                train_files,
                test_files,
            } => (load_cifar10(train_files)?, load_cifar10(test_files)?),
            DataConfig::Synthetic {
                train_size,
                test_size,
                shape,
                classes,
                noise,
                seed,
            } => {
                let all = synthetic(train_size + test_size, shape, *classes, *noise, *seed)?;
                let split = |r: std::ops::Range<usize>| all.subset(&r.collect::<Vec<_>>());
                (split(0..*train_size)?, split(*train_size..all.len())?)
            }
        };
        let train = match config.subset {
            Some(n) => balanced_subset(
                &train,
                n,
                &mut ChaCha8Rng::seed_from_u64(config.subset_seed),
            )?,
            None => train,
        };
        let test = match config.test_subset {
            Some(n) => test.head(n)?,
            None => test,
        };
        let sample = train.sample_shape().to_vec();
        let classes = train.classes();
        let net = match config.arch {
            ArchConfig::ReluNet { depth, width } => {
                Network::relu_net(depth, width, sample.iter().product(), classes)?
            }
            ArchConfig::ConvNet { depth, width } => {
                Network::conv_net_for(depth, width, &sample, classes)?
            }
            ArchConfig::Vgg { variant } => {
                let net = Network::vgg(variant)?;
                if net.input_shape() != sample.as_slice() || net.classes() != classes {
                    return Err(Error::Config(format!(
                        "{variant} expects {:?} inputs and {} classes, data has {sample:?} and {classes}",
                        net.input_shape(),
                        net.classes()
                    )));
                }
                net
            }
        };
        Ok(Self {
            config,
            net,
            train,
            test,
        })
    }

    pub fn policy(&self) -> Result<SelectionPolicy> {
        let l = self.net.num_parametric();
        SelectionPolicy::with_max_k(
            self.config.policy.kind,
            l,
            self.config.policy.max_k.unwrap_or(l),
        )
    }

    /// Initial parameters for a seed: Xavier from the init stream, or the
    /// configured checkpoint.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        match &self.config.init {
            InitConfig::Xavier => Ok(xavier_init(&self.net, &mut seed_stream(seed, INIT_STREAM))),
            InitConfig::Checkpoint { path } => load_checkpoint(path)?.into_params(&self.net),
        }
    }

    pub fn evaluate_test(&self, params: &ParamStore<f32>) -> Result<Evaluation> {
        evaluate(
            &self.net,
            params,
            self.test.images(),
            self.test.labels(),
            self.config.eval_batch_size,
        )
    }

    pub fn evaluate_train(&self, params: &ParamStore<f32>) -> Result<Evaluation> {
        evaluate(
            &self.net,
            params,
            self.train.images(),
            self.train.labels(),
            self.config.eval_batch_size,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 0 is the initial evaluation before any update.
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss over the epoch (full evaluation at epoch 0).
    pub train_loss: f64,
    /// Accuracy of the pre-update predictions over the epoch.
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub selection: Option<LayerSelection>,
    pub backward_time_s: f64,
    pub cumulative_backward_time_s: f64,
    pub epoch_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_test: Evaluation,
    pub total_backward_time_s: f64,
    pub total_time_s: f64,
    pub params: ParamStore<f32>,
}

impl RunRecord {
    pub fn selections(&self) -> Vec<&LayerSelection> {
        self.epochs
            .iter()
            .filter_map(|e| e.selection.as_ref())
            .collect()
    }

    /// Layers never selected in any epoch.
    pub fn frozen_layers(&self, num_layers: usize) -> Vec<usize> {
        let used: BTreeSet<usize> = self
            .selections()
            .iter()
            .flat_map(|s| s.selected().iter().copied())
            .collect();
        (1..=num_layers).filter(|l| !used.contains(l)).collect()
    }
}

/// Called with the epoch count completed so far (0 before training) and
/// the current parameters.
pub type EpochHook<'a> = dyn FnMut(usize, &ParamStore<f32>) -> Result<()> + 'a;

/// Trains one seed under the configured policy.
pub fn train_seed(exp: &Experiment, seed: u64, hook: &mut EpochHook<'_>) -> Result<RunRecord> {
    let cfg = &exp.config;
    let net = &exp.net;
    let start = Instant::now();
    let mut params = exp.init_params(seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &params)?;
    let policy = exp.policy()?;
    let mut policy_rng = seed_stream(seed, POLICY_STREAM);
    let shuffle = shuffle_seed(seed);

    let train0 = exp.evaluate_train(&params)?;
    let test0 = exp.evaluate_test(&params)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        lr: lr_at(&cfg.schedule, 0),
        train_loss: train0.loss,
        train_acc: train0.accuracy,
        test_loss: Some(test0.loss),
        test_acc: Some(test0.accuracy),
        selection: None,
        backward_time_s: 0.0,
        cumulative_backward_time_s: 0.0,
        epoch_time_s: start.elapsed().as_secs_f64(),
    }];
    hook(0, &params)?;
    let mut final_test = test0;
    let mut cumulative = 0.0;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let selection = policy.select(&mut policy_rng);
        let lr = lr_at(&cfg.schedule, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut backward_time = 0.0;
        for batch in minibatch_order(exp.train.len(), cfg.batch_size, shuffle, epoch) {
            let (x, y) = exp.train.gather(&batch)?;
            let (logits, tape) = forward_with_tape(net, &params, &x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    message: format!("seed {seed}: training loss is {loss}"),
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            correct += predict(&logits)
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            let t = Instant::now();
            let grad = backward_selected(net, &params, tape, &grad_logits, selection.selected())?;
            backward_time += t.elapsed().as_secs_f64();
            opt.step(&mut params, &grad, lr)?;
        }
        cumulative += backward_time;
        let done = epoch + 1;
        let last = done == cfg.epochs;
        let test = if last || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let ev = exp.evaluate_test(&params)?;
            final_test = ev;
            Some(ev)
        } else {
            None
        };
        let n = exp.train.len() as f64;
        epochs.push(EpochRecord {
            epoch: done,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_loss: test.map(|e| e.loss),
            test_acc: test.map(|e| e.accuracy),
            selection: Some(selection),
            backward_time_s: backward_time,
            cumulative_backward_time_s: cumulative,
            epoch_time_s: epoch_start.elapsed().as_secs_f64(),
        });
        hook(done, &params)?;
    }
    Ok(RunRecord {
        seed,
        epochs,
        final_test,
        total_backward_time_s: cumulative,
        total_time_s: start.elapsed().as_secs_f64(),
        params,
    })
}

/// One training run per configured seed, strictly sequential.
pub fn run_experiment(exp: &Experiment) -> Result<Vec<RunRecord>> {
    exp.config
        .seeds
        .iter()
        .map(|&seed| train_seed(exp, seed, &mut |_, _| Ok(())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReinitRow {
    pub seed: u64,
    #[serde(flatten)]
    pub point: SweepPoint,
}

#[derive(Clone, Debug)]
pub struct ReinitResult {
    pub records: Vec<RunRecord>,
    pub rows: Vec<ReinitRow>,
}

/// Trains each seed, then evaluates active and lazy re-initialization of
/// the final parameters over the configured grid.
pub fn run_reinit_experiment(exp: &Experiment) -> Result<ReinitResult> {
    let grid = &exp.config.analysis.reinit_grid;
    if grid.is_empty() {
        return Err(Error::Config("analysis.reinit_grid is empty".into()));
    }
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &seed in &exp.config.seeds {
        let rec = train_seed(exp, seed, &mut |_, _| Ok(()))?;
        let points = reinit_sweep(
            &exp.net,
            rec.params.theta(),
            rec.params.theta0(),
            grid,
            exp.test.images(),
            exp.test.labels(),
            exp.config.eval_batch_size,
        )?;
        rows.extend(points.into_iter().map(|point| ReinitRow { seed, point }));
        records.push(rec);
    }
    Ok(ReinitResult { records, rows })
}

#[derive(Clone, Debug)]
pub struct FrequencyResult {
    pub records: Vec<RunRecord>,
    /// `(seed, map)` for every seed and configured alpha.
    pub maps: Vec<(u64, ActiveFrequencyMap)>,
}

/// Trains each seed and, after every epoch, counts which parameters are in
/// the top `alpha`% of the exact full-training-set gradient.
pub fn run_frequency_experiment(exp: &Experiment) -> Result<FrequencyResult> {
    let alphas = &exp.config.analysis.alphas;
    if alphas.is_empty() {
        return Err(Error::Config("analysis.alphas is empty".into()));
    }
    let p = exp.net.param_count();
    let mut records = Vec::new();
    let mut maps = Vec::new();
    for &seed in &exp.config.seeds {
        let mut trackers = alphas
            .iter()
            .map(|&a| ActiveFrequencyTracker::new(p, a))
            .collect::<Result<Vec<_>>>()?;
        let rec = train_seed(exp, seed, &mut |epoch, params| {
            if epoch == 0 {
                return Ok(());
            }
            let g = full_batch_gradient(
                &exp.net,
                params,
                exp.train.images(),
                exp.train.labels(),
                exp.config.eval_batch_size,
            )?;
            trackers.iter_mut().try_for_each(|t| t.record(&g))
        })?;
        maps.extend(trackers.into_iter().map(|t| (seed, t.finish())));
        records.push(rec);
    }
    Ok(FrequencyResult { records, maps })
}

/// Gradient of the mean loss over the first mini-batch of `epoch`.
pub fn stochastic_gradient(
    exp: &Experiment,
    params: &ParamStore<f32>,
    seed: u64,
    epoch: usize,
) -> Result<Vec<f32>> {
    let order = minibatch_order(
        exp.train.len(),
        exp.config.batch_size,
        shuffle_seed(seed),
        epoch,
    );
    let (x, y) = exp.train.gather(&order[0])?;
    let (logits, tape) = forward_with_tape(&exp.net, params, &x)?;
    let (_, g) = softmax_cross_entropy(&logits, &y)?;
    Ok(backward(&exp.net, params, tape, &g, 1)?.to_dense())
}

#[derive(Clone, Debug)]
pub struct ProfileResult {
    pub records: Vec<RunRecord>,
    /// `(seed, profile)` for every seed and profiled epoch.
    pub profiles: Vec<(u64, GradientProfile)>,
}

/// Sorted gradient magnitudes at the configured epochs: the stochastic
/// gradient of the next mini-batch, or the full-batch gradient.
pub fn run_profile_experiment(exp: &Experiment) -> Result<ProfileResult> {
    let wanted: BTreeSet<usize> = exp.config.analysis.profile_epochs.iter().copied().collect();
    if wanted.is_empty() {
        return Err(Error::Config("analysis.profile_epochs is empty".into()));
    }
    let full = exp.config.analysis.profile_full_batch;
    let mut records = Vec::new();
    let mut profiles = Vec::new();
    for &seed in &exp.config.seeds {
        let rec = train_seed(exp, seed, &mut |epoch, params| {
            if !wanted.contains(&epoch) {
                return Ok(());
            }
            let g = if full {
                full_batch_gradient(
                    &exp.net,
                    params,
                    exp.train.images(),
                    exp.train.labels(),
                    exp.config.eval_batch_size,
                )?
            } else {
                stochastic_gradient(exp, params, seed, epoch)?
            };
            let mut profile = gradient_profile(&g);
            profile.epoch = Some(epoch);
            profile.full_batch = full;
            profiles.push((seed, profile));
            Ok(())
        })?;
        records.push(rec);
    }
    Ok(ProfileResult { records, profiles })
}

/// Wall time of one backward call per stop layer, median over repeats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StopLayerTiming {
    pub stop_layer: usize,
    pub median_s: f64,
}

/// Times `backward(.., stop_layer)` on one training mini-batch for every
/// stop layer, `repeats` times each.
pub fn backward_timings(
    exp: &Experiment,
    params: &ParamStore<f32>,
    repeats: usize,
) -> Result<Vec<StopLayerTiming>> {
    let n = exp.config.batch_size.min(exp.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = exp.train.gather(&idx)?;
    let mut out = Vec::new();
    for stop in 1..=exp.net.num_parametric() {
        let mut times = Vec::with_capacity(repeats.max(1));
        for _ in 0..repeats.max(1) {
            let (logits, tape) = forward_with_tape(&exp.net, params, &x)?;
            let (_, g) = softmax_cross_entropy(&logits, &y)?;
            let t = Instant::now();
            backward(&exp.net, params, tape, &g, stop)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        out.push(StopLayerTiming {
            stop_layer: stop,
            median_s: median_sorted(&times),
        });
    }
    Ok(out)
}

fn median_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub policy_records: Vec<RunRecord>,
    pub full_records: Vec<RunRecord>,
    pub stop_layer_timings: Vec<StopLayerTiming>,
}

impl BenchResult {
    /// Summed backward time of the policy runs over the full-training runs.
    pub fn time_ratio(&self) -> f64 {
        let sum = |r: &[RunRecord]| r.iter().map(|x| x.total_backward_time_s).sum::<f64>();
        sum(&self.policy_records) / sum(&self.full_records)
    }
}

/// Runs the configured policy and a full-training baseline for every seed,
/// one after the other, plus a per-stop-layer backward timing sweep.
pub fn run_bench(exp: &Experiment) -> Result<BenchResult> {
    let mut full_cfg = exp.config.clone();
    full_cfg.policy.kind = crate::policy::PolicyKind::Full;
    full_cfg.raw.insert("policy.kind".into(), "full".into());
    let full_exp = Experiment {
        config: full_cfg,
        net: exp.net.clone(),
        train: exp.train.clone(),
        test: exp.test.clone(),
    };
    let mut policy_records = Vec::new();
    let mut full_records = Vec::new();
    for &seed in &exp.config.seeds {
        policy_records.push(train_seed(exp, seed, &mut |_, _| Ok(()))?);
        full_records.push(train_seed(&full_exp, seed, &mut |_, _| Ok(()))?);
    }
    let params = exp.init_params(exp.config.seeds[0])?;
    let stop_layer_timings = backward_timings(exp, &params, exp.config.bench_repeats)?;
    Ok(BenchResult {
        policy_records,
        full_records,
        stop_layer_timings,
    })
}
