//! Post-training re-initialization, per-epoch gradient activity counts,
//! layer heatmaps and sorted gradient profiles.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, evaluate, forward_with_tape, softmax_cross_entropy, LayerSpec, Network, ParamStore,
};
use crate::tensor::{Scalar, Tensor};

/// Parameter indices ordered by `|theta_t - theta_0|`, largest first, ties
/// by ascending index.
#[derive(Clone, Debug, PartialEq)]
pub struct MovementRanking {
    pub order: Vec<usize>,
    /// `|theta_t - theta_0|` per parameter, in original index order.
    pub movement: Vec<f64>,
}

impl MovementRanking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn desc_then_index(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

pub fn rank_by_movement<T: Scalar>(theta_t: &[T], theta_0: &[T]) -> Result<MovementRanking> {
    if theta_t.len() != theta_0.len() {
        return Err(Error::dim(
            "rank_by_movement",
            &[theta_t.len()],
            &[theta_0.len()],
        ));
    }
    let movement: Vec<f64> = theta_t
        .iter()
        .zip(theta_0)
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .collect();
    let mut order: Vec<usize> = (0..movement.len()).collect();
    order.sort_unstable_by(desc_then_index(&movement));
    Ok(MovementRanking { order, movement })
}

/// `round(pct / 100 * p)`, halves rounded up.
pub fn percent_to_count(pct: f64, p: usize) -> usize {
    let k = (pct * p as f64 / 100.0 + 0.5).floor();
    (k.max(0.0) as usize).min(p)
}

fn check_reinit_args<T>(
    theta_t: &[T],
    theta_0: &[T],
    ranking: &MovementRanking,
    pct: f64,
) -> Result<()> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Input(format!("percentage {pct} outside [0, 100]")));
    }
    if theta_t.len() != theta_0.len() || ranking.len() != theta_t.len() {
        return Err(Error::dim(
            "re-initialization",
            &[theta_t.len(), theta_0.len()],
            &[ranking.len()],
        ));
    }
    Ok(())
}

/// Resets the `round(gamma% p)` most-moved parameters to `theta_0`.
pub fn active_reinit<T: Scalar>(
    theta_t: &[T],
    theta_0: &[T],
    ranking: &MovementRanking,
    gamma: f64,
) -> Result<Vec<T>> {
    check_reinit_args(theta_t, theta_0, ranking, gamma)?;
    let k = percent_to_count(gamma, theta_t.len());
    let mut out = theta_t.to_vec();
    for &i in &ranking.order[..k] {
        out[i] = theta_0[i];
    }
    Ok(out)
}

/// Keeps the `round(epsilon% p)` most-moved parameters and resets the rest
/// to `theta_0`.
pub fn lazy_reinit<T: Scalar>(
    theta_t: &[T],
    theta_0: &[T],
    ranking: &MovementRanking,
    epsilon: f64,
) -> Result<Vec<T>> {
    check_reinit_args(theta_t, theta_0, ranking, epsilon)?;
    let k = percent_to_count(epsilon, theta_t.len());
    let mut out = theta_0.to_vec();
    for &i in &ranking.order[..k] {
        out[i] = theta_t[i];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReinitMode {
    Active,
    Lazy,
}

impl ReinitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReinitMode::Active => "active",
            ReinitMode::Lazy => "lazy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mode: ReinitMode,
    pub percent: f64,
    pub test_accuracy: f64,
}

/// Test accuracy of both re-initializations at every grid percentage.
pub fn reinit_sweep<T: Scalar>(
    net: &Network,
    theta_t: &[T],
    theta_0: &[T],
    grid: &[f64],
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Input("re-initialization grid is empty".into()));
    }
    let ranking = rank_by_movement(theta_t, theta_0)?;
    let mut out = Vec::with_capacity(grid.len() * 2);
    for mode in [ReinitMode::Active, ReinitMode::Lazy] {
        for &pct in grid {
            let theta = match mode {
                ReinitMode::Active => active_reinit(theta_t, theta_0, &ranking, pct)?,
                ReinitMode::Lazy => lazy_reinit(theta_t, theta_0, &ranking, pct)?,
            };
            let params = ParamStore::new(net, theta)?;
            let ev = evaluate(net, &params, images, labels, batch_size)?;
            out.push(SweepPoint {
                mode,
                percent: pct,
                test_accuracy: ev.accuracy,
            });
        }
    }
    Ok(out)
}

/// Number of active parameters per epoch: `ceil(alpha% p)`.
pub fn active_count(alpha: f64, p: usize) -> usize {
    ((alpha * p as f64 / 100.0).ceil().max(0.0) as usize).min(p)
}

/// Indices of the `k` largest `|g|`, ties by ascending index.
fn top_k_indices<T: Scalar>(grad: &[T], k: usize) -> Vec<usize> {
    let mags: Vec<f64> = grad.iter().map(|g| g.abs().as_f64()).collect();
    let mut idx: Vec<usize> = (0..mags.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, desc_then_index(&mags));
        idx.truncate(k);
    }
    idx
}

/// How often each parameter was among the top `alpha`% gradient magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveFrequencyMap {
    pub alpha: f64,
    pub epochs: usize,
    pub counts: Vec<u32>,
}

/// Accumulates an [`ActiveFrequencyMap`] one epoch gradient at a time.
#[derive(Clone, Debug)]
pub struct ActiveFrequencyTracker {
    map: ActiveFrequencyMap,
    per_epoch: usize,
}

impl ActiveFrequencyTracker {
    pub fn new(p: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 100.0) {
            return Err(Error::Input(format!("alpha {alpha} outside (0, 100]")));
        }
        Ok(Self {
            map: ActiveFrequencyMap {
                alpha,
                epochs: 0,
                counts: vec![0; p],
            },
            per_epoch: active_count(alpha, p),
        })
    }

    pub fn record<T: Scalar>(&mut self, grad: &[T]) -> Result<()> {
        if grad.len() != self.map.counts.len() {
            return Err(Error::dim(
                "active_frequency",
                &[grad.len()],
                &[self.map.counts.len()],
            ));
        }
        for i in top_k_indices(grad, self.per_epoch) {
            self.map.counts[i] += 1;
        }
        self.map.epochs += 1;
        Ok(())
    }

    pub fn map(&self) -> &ActiveFrequencyMap {
        &self.map
    }

    pub fn finish(self) -> ActiveFrequencyMap {
        self.map
    }
}

pub fn active_frequency<T: Scalar>(grads: &[Vec<T>], alpha: f64) -> Result<ActiveFrequencyMap> {
    let p = grads.first().map(Vec::len).unwrap_or(0);
    let mut tracker = ActiveFrequencyTracker::new(p, alpha)?;
    for g in grads {
        tracker.record(g)?;
    }
    Ok(tracker.finish())
}

/// Active frequencies of one parametric layer, arranged like its weights and
/// divided by the epoch count.
///
/// Dense layers give a `fan_out x fan_in` grid. Convolutions give an
/// `(out * 3) x (in * 3)` grid of 3x3 kernel blocks. Biases are kept apart.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerHeatmap {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerHeatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks_exact(self.cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn bias_csv(&self) -> String {
        let mut s = String::from("index,frequency\n");
        for (i, v) in self.bias.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn layer_heatmap(map: &ActiveFrequencyMap, net: &Network) -> Result<Vec<LayerHeatmap>> {
    if map.counts.len() != net.param_count() {
        return Err(Error::dim(
            "layer_heatmap",
            &[map.counts.len()],
            &[net.param_count()],
        ));
    }
    let t = map.epochs.max(1) as f64;
    let norm = |c: u32| c as f64 / t;
    let mut out = Vec::with_capacity(net.num_parametric());
    for seg in net.segments() {
        let counts = &map.counts[seg.range()];
        let (weights, bias) = counts.split_at(seg.weight_len());
        let spec = net
            .parametric_layer(seg.layer)
            .expect("segment layer exists");
        let (rows, cols, values) = match spec {
            LayerSpec::Dense { fan_in, fan_out } => {
                (fan_out, fan_in, weights.iter().map(|&c| norm(c)).collect())
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => {
                let (rows, cols) = (out_channels * 3, in_channels * 3);
                let mut grid = vec![0.0; rows * cols];
                for (idx, &c) in weights.iter().enumerate() {
                    let (o, rem) = (idx / (in_channels * 9), idx % (in_channels * 9));
                    let (i, k) = (rem / 9, rem % 9);
                    let (ky, kx) = (k / 3, k % 3);
                    grid[(o * 3 + ky) * cols + i * 3 + kx] = norm(c);
                }
                (rows, cols, grid)
            }
            _ => unreachable!("segments belong to parametric layers"),
        };
        out.push(LayerHeatmap {
            layer: seg.layer,
            rows,
            cols,
            values,
            bias: bias.iter().map(|&c| norm(c)).collect(),
        });
    }
    Ok(out)
}

/// Mean active frequency (weights and bias) of every layer, bottom first.
pub fn layer_mean_frequency(map: &ActiveFrequencyMap, net: &Network) -> Result<Vec<f64>> {
    if map.counts.len() != net.param_count() {
        return Err(Error::dim(
            "layer_mean_frequency",
            &[map.counts.len()],
            &[net.param_count()],
        ));
    }
    let t = map.epochs.max(1) as f64;
    Ok(net
        .segments()
        .iter()
        .map(|seg| {
            let total: u64 = map.counts[seg.range()].iter().map(|&c| c as u64).sum();
            total as f64 / (t * seg.len as f64)
        })
        .collect())
}

/// Gradient magnitudes sorted in descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    pub magnitudes: Vec<f64>,
    pub epoch: Option<usize>,
    pub full_batch: bool,
}

impl GradientProfile {
    /// `rank,magnitude` rows, rank starting at 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,magnitude\n");
        for (i, m) in self.magnitudes.iter().enumerate() {
            let _ = writeln!(s, "{},{m}", i + 1);
        }
        s
    }
}

pub fn gradient_profile<T: Scalar>(grad: &[T]) -> GradientProfile {
    let mut magnitudes: Vec<f64> = grad.iter().map(|g| g.abs().as_f64()).collect();
    magnitudes.sort_unstable_by(|a, b| b.total_cmp(a));
    GradientProfile {
        magnitudes,
        epoch: None,
        full_batch: false,
    }
}

/// Exact mean loss gradient over a whole dataset, accumulated batch by batch.
pub fn full_batch_gradient<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<Vec<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 || n != labels.len() {
        return Err(Error::dim(
            "full_batch_gradient",
            images.shape(),
            &[labels.len()],
        ));
    }
    let bs = batch_size.max(1);
    let mut acc = vec![0.0f64; net.param_count()];
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let x = images.slice_rows(start, end)?;
        let (logits, tape) = forward_with_tape(net, params, &x)?;
        let (_, g) = softmax_cross_entropy(&logits, &labels[start..end])?;
        let grad = backward(net, params, tape, &g, 1)?;
        let w = (end - start) as f64;
        for lg in &grad.layers {
            for (a, v) in acc[lg.offset..].iter_mut().zip(&lg.values) {
                *a += v.as_f64() * w;
            }
        }
        start = end;
    }
    Ok(acc
        .into_iter()
        .map(|a| T::from_f64_lossy(a / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_hand_examples() {
        let r = rank_by_movement(&[1.0f64, -3.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        let same = rank_by_movement(&[0.5f32, 0.5, 0.5, 0.5], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(same.order, vec![0, 1, 2, 3]);
        assert!(rank_by_movement(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reinit_hand_examples() {
        let t0 = [0.0f64; 4];
        let tt = [4.0, 1.0, 3.0, 2.0];
        let r = rank_by_movement(&tt, &t0).unwrap();
        assert_eq!(
            active_reinit(&tt, &t0, &r, 50.0).unwrap(),
            vec![0.0, 1.0, 0.0, 2.0]
        );
        assert_eq!(
            lazy_reinit(&tt, &t0, &r, 50.0).unwrap(),
            vec![4.0, 0.0, 3.0, 0.0]
        );
        assert_eq!(active_reinit(&tt, &t0, &r, 0.0).unwrap(), tt.to_vec());
        assert_eq!(active_reinit(&tt, &t0, &r, 100.0).unwrap(), t0.to_vec());
        assert_eq!(lazy_reinit(&tt, &t0, &r, 100.0).unwrap(), tt.to_vec());
        assert_eq!(lazy_reinit(&tt, &t0, &r, 0.0).unwrap(), t0.to_vec());
        assert!(matches!(
            active_reinit(&tt, &t0, &r, 100.5),
            Err(Error::Input(_))
        ));
        assert!(lazy_reinit(&tt, &t0, &r, -1.0).is_err());
    }

    #[test]
    fn percent_rounding_is_half_up() {
        assert_eq!(percent_to_count(50.0, 3), 2);
        assert_eq!(percent_to_count(10.0, 79_510), 7_951);
        assert_eq!(percent_to_count(0.0, 10), 0);
        assert_eq!(percent_to_count(100.0, 10), 10);
    }

    #[test]
    fn frequency_hand_example() {
        let grads = vec![vec![1.0f64, 0.1, 0.2, 0.05], vec![0.05, 1.0, 0.2, 0.1]];
        let map = active_frequency(&grads, 25.0).unwrap();
        assert_eq!(map.counts, vec![1, 1, 0, 0]);
        assert_eq!(map.epochs, 2);
        let all = active_frequency(&grads, 100.0).unwrap();
        assert_eq!(all.counts, vec![2, 2, 2, 2]);
        assert!(active_frequency(&grads, 0.0).is_err());
        let ragged = vec![vec![1.0f64, 2.0], vec![1.0]];
        assert!(matches!(
            active_frequency(&ragged, 50.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn frequency_ties_go_to_lower_index() {
        let map = active_frequency(&[vec![1.0f32, 1.0, 1.0, 1.0]], 50.0).unwrap();
        assert_eq!(map.counts, vec![1, 1, 0, 0]);
    }

    #[test]
    fn heatmap_uniform_and_single_cell() {
        let net = Network::conv_net(1, 2).unwrap();
        let p = net.param_count();
        let uniform = ActiveFrequencyMap {
            alpha: 10.0,
            epochs: 4,
            counts: vec![3; p],
        };
        for h in layer_heatmap(&uniform, &net).unwrap() {
            assert!(h.values.iter().chain(&h.bias).all(|&v| v == 0.75));
        }
        let mut counts = vec![0; p];
        // Kernel (out 1, in 0, ky 2, kx 1) of the conv layer.
        counts[9 + 2 * 3 + 1] = 4;
        let single = ActiveFrequencyMap {
            alpha: 10.0,
            epochs: 4,
            counts,
        };
        let maps = layer_heatmap(&single, &net).unwrap();
        assert_eq!((maps[0].rows, maps[0].cols), (6, 3));
        assert_eq!(maps[0].get(5, 1), 1.0);
        let nonzero: usize = maps
            .iter()
            .map(|h| h.values.iter().filter(|&&v| v != 0.0).count())
            .sum();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn heatmap_rejects_wrong_length() {
        let net = Network::relu_net(1, 3, 4, 2).unwrap();
        let map = ActiveFrequencyMap {
            alpha: 1.0,
            epochs: 1,
            counts: vec![0; 3],
        };
        assert!(layer_heatmap(&map, &net).is_err());
    }

    #[test]
    fn profile_sorts_magnitudes() {
        assert_eq!(
            gradient_profile(&[-3.0f64, 1.0, 2.0]).magnitudes,
            vec![3.0, 2.0, 1.0]
        );
        assert_eq!(gradient_profile(&[0.0f32; 3]).magnitudes, vec![0.0; 3]);
        let csv = gradient_profile(&[-3.0f64, 1.0]).to_csv();
        assert_eq!(csv, "rank,magnitude\n1,3\n2,1\n");
    }
}
