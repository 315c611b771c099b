use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Location of one parametric layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// 1-based parametric layer index.
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
}

impl Segment {
    pub fn weight_len(&self) -> usize {
        self.len - self.bias_len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector `theta` plus the snapshot `theta0` taken when the
/// store was created.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    theta: Vec<T>,
    theta0: Vec<T>,
    segments: Vec<Segment>,
    fingerprint: u64,
    generation: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(net: &Network, theta: Vec<T>) -> Result<Self> {
        if theta.len() != net.param_count() {
            return Err(Error::dim(
                "ParamStore::new",
                &[theta.len()],
                &[net.param_count()],
            ));
        }
        Ok(Self {
            theta0: theta.clone(),
            theta,
            segments: net.segments().to_vec(),
            fingerprint: net.fingerprint(),
            generation: 0,
        })
    }

    pub fn zeros(net: &Network) -> Self {
        Self::new(net, vec![T::zero(); net.param_count()]).expect("length matches")
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    /// Parameters as they were when the store was created.
    pub fn theta0(&self) -> &[T] {
        &self.theta0
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        self.generation += 1;
        &mut self.theta
    }

    /// Copy of the current `theta`, isolated from later updates.
    pub fn snapshot(&self) -> Vec<T> {
        self.theta.clone()
    }

    /// Overwrites `theta` in place, keeping `theta0`.
    pub fn restore(&mut self, theta: &[T]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::dim(
                "ParamStore::restore",
                &[theta.len()],
                &[self.theta.len()],
            ));
        }
        self.theta.copy_from_slice(theta);
        self.generation += 1;
        Ok(())
    }

    /// Bumped on every mutable access; activation tapes remember it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, layer: usize) -> Result<&Segment> {
        layer
            .checked_sub(1)
            .and_then(|i| self.segments.get(i))
            .ok_or_else(|| {
                Error::Input(format!(
                    "layer {layer} out of range 1..={}",
                    self.segments.len()
                ))
            })
    }

    pub fn layer(&self, layer: usize) -> Result<&[T]> {
        let r = self.segment(layer)?.range();
        Ok(&self.theta[r])
    }

    pub fn layer_mut(&mut self, layer: usize) -> Result<&mut [T]> {
        let r = self.segment(layer)?.range();
        self.generation += 1;
        Ok(&mut self.theta[r])
    }

    /// `(weights, bias)` of a layer.
    pub fn weights_and_bias(&self, layer: usize) -> Result<(&[T], &[T])> {
        let seg = self.segment(layer)?;
        let split = seg.weight_len();
        Ok(self.theta[seg.range()].split_at(split))
    }

    pub(crate) fn check_network(&self, net: &Network) -> Result<()> {
        if self.fingerprint != net.fingerprint() || self.theta.len() != net.param_count() {
            return Err(Error::State(
                "parameter store was built for a different network".into(),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect();
        ParamStore {
            theta: conv(&self.theta),
            theta0: conv(&self.theta0),
            segments: self.segments.clone(),
            fingerprint: self.fingerprint,
            generation: 0,
        }
    }
}

/// Standard deviation of the Xavier normal initializer for a layer.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws `n` weights from `N(0, 2 / (fan_in + fan_out))`.
pub fn xavier_weights<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    n: usize,
    rng: &mut R,
) -> Vec<T> {
    let normal = Normal::new(0.0, xavier_std(fan_in, fan_out)).expect("positive std");
    (0..n)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect()
}

/// Xavier-normal weights and zero biases for every parametric layer.
///
/// Samples are drawn in f64, so the same RNG state yields the same values
/// (up to rounding) in any precision.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(net: &Network, rng: &mut R) -> ParamStore<T> {
    let mut theta = Vec::with_capacity(net.param_count());
    for seg in net.segments() {
        let spec = net
            .parametric_layer(seg.layer)
            .expect("segment layer exists");
        let (fan_in, fan_out) = spec.fans().expect("parametric");
        theta.extend(xavier_weights::<T, R>(
            fan_in,
            fan_out,
            seg.weight_len(),
            rng,
        ));
        theta.extend(std::iter::repeat_n(T::zero(), seg.bias_len));
    }
    ParamStore::new(net, theta).expect("length matches")
}

/// Gradient of one parametric layer, laid out like its parameter segment.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T = f32> {
    pub layer: usize,
    pub offset: usize,
    pub values: Vec<T>,
}

/// Gradient restricted to a subset of layers; absent layers are implicitly
/// zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<T = f32> {
    pub p: usize,
    /// Sorted by ascending layer index.
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> SparseGrad<T> {
    pub fn layer(&self, layer: usize) -> Option<&[T]> {
        self.layers
            .iter()
            .find(|g| g.layer == layer)
            .map(|g| g.values.as_slice())
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|g| g.layer).collect()
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.p];
        for g in &self.layers {
            out[g.offset..g.offset + g.values.len()].copy_from_slice(&g.values);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.values.iter().all(|v| v.is_finite()))
    }
}
