//! Layer-selection policies for layer-wise sparse SGD.
//!
//! Layers are 1-based parametric indices, `1` at the input and `L` at the
//! output. A selection is drawn once per epoch; the backward pass then only
//! needs to descend to its lowest selected layer.

use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    TopK {
        k: usize,
    },
    BottomQ {
        q: usize,
    },
    TopKBottomQStatic {
        k: usize,
        q: usize,
    },
    MiddleOnly,
    /// Top `k` always; bottom `q` added on a Bernoulli(`rho`) hit.
    TopKBottomQProb {
        k: usize,
        q: usize,
        rho: f64,
    },
    /// Top `k` always; every layer on a Bernoulli(`rho`) hit.
    TopKAllBottoms {
        k: usize,
        rho: f64,
    },
    /// Top `k` with `k` uniform on `1..=max_k`.
    RandomUniform,
    /// Top `k` with `k = round(1 + (max_k - 1) x)`, `x ~ Beta(alpha, beta)`.
    RandomBeta {
        alpha: f64,
        beta: f64,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::TopK { .. } => "top_k",
            PolicyKind::BottomQ { .. } => "bottom_q",
            PolicyKind::TopKBottomQStatic { .. } => "top_k_bottom_q_static",
            PolicyKind::MiddleOnly => "middle_only",
            PolicyKind::TopKBottomQProb { .. } => "top_k_bottom_q_prob",
            PolicyKind::TopKAllBottoms { .. } => "top_k_all_bottoms",
            PolicyKind::RandomUniform => "random_uniform",
            PolicyKind::RandomBeta { .. } => "random_beta",
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(
            self,
            PolicyKind::Full
                | PolicyKind::TopK { .. }
                | PolicyKind::BottomQ { .. }
                | PolicyKind::TopKBottomQStatic { .. }
                | PolicyKind::MiddleOnly
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The parametric layers trained in one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    selected: Vec<usize>,
    stop_layer: usize,
}

impl LayerSelection {
    /// Sorts and deduplicates `layers`; all must lie in `1..=num_layers`.
    pub fn new(mut layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        let stop_layer = truncation_of(&layers)?;
        if stop_layer == 0 || *layers.last().expect("non-empty") > num_layers {
            return Err(Error::Logic(format!(
                "selection {layers:?} outside 1..={num_layers}"
            )));
        }
        Ok(Self {
            selected: layers,
            stop_layer,
        })
    }

    /// Ascending layer indices.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn stop_layer(&self) -> usize {
        self.stop_layer
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.selected.binary_search(&layer).is_ok()
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.selected.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Lowest selected layer, where back-propagation may stop.
pub fn truncation_of(selected: &[usize]) -> Result<usize> {
    selected
        .iter()
        .copied()
        .min()
        .ok_or_else(|| Error::Logic("empty layer selection".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    kind: PolicyKind,
    num_layers: usize,
    max_k: usize,
}

impl SelectionPolicy {
    /// Policy over `num_layers` layers; random-k policies draw from
    /// `1..=num_layers`.
    pub fn new(kind: PolicyKind, num_layers: usize) -> Result<Self> {
        Self::with_max_k(kind, num_layers, num_layers)
    }

    /// Like [`SelectionPolicy::new`] with an explicit upper bound for the
    /// random-k policies.
    pub fn with_max_k(kind: PolicyKind, num_layers: usize, max_k: usize) -> Result<Self> {
        let l = num_layers;
        let bad = |msg: String| Err(Error::Config(format!("policy {kind}: {msg}")));
        if l == 0 {
            return bad("network has no parametric layers".into());
        }
        let in_range = |v: usize| (1..=l).contains(&v);
        let rho_ok = |rho: f64| rho > 0.0 && rho <= 1.0;
        match kind {
            PolicyKind::TopK { k } | PolicyKind::TopKAllBottoms { k, .. } if !in_range(k) => {
                return bad(format!("k = {k} outside 1..={l}"))
            }
            PolicyKind::BottomQ { q } if !in_range(q) => {
                return bad(format!("q = {q} outside 1..={l}"))
            }
            PolicyKind::TopKBottomQStatic { k, q } | PolicyKind::TopKBottomQProb { k, q, .. }
                if !in_range(k) || !in_range(q) || k + q > l =>
            {
                return bad(format!(
                    "need 1 <= k, q and k + q <= {l}, got k = {k}, q = {q}"
                ))
            }
            PolicyKind::MiddleOnly if l < 3 => {
                return bad(format!("needs at least 3 layers, network has {l}"))
            }
            _ => {}
        }
        match kind {
            PolicyKind::TopKBottomQProb { rho, .. } | PolicyKind::TopKAllBottoms { rho, .. }
                if !rho_ok(rho) =>
            {
                return bad(format!("rho = {rho} outside (0, 1]"))
            }
            PolicyKind::RandomBeta { alpha, beta }
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) =>
            {
                return bad(format!(
                    "beta parameters ({alpha}, {beta}) must be positive"
                ))
            }
            PolicyKind::RandomUniform | PolicyKind::RandomBeta { .. } if !in_range(max_k) => {
                return bad(format!("max_k = {max_k} outside 1..={l}"))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            num_layers,
            max_k,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn max_k(&self) -> usize {
        self.max_k
    }

    fn top(&self, k: usize) -> Vec<usize> {
        (self.num_layers + 1 - k..=self.num_layers).collect()
    }

    fn bottom(&self, q: usize) -> Vec<usize> {
        (1..=q).collect()
    }

    /// Selection of a static policy; `None` for probabilistic ones.
    pub fn select_static(&self) -> Option<LayerSelection> {
        let l = self.num_layers;
        let layers = match self.kind {
            PolicyKind::Full => (1..=l).collect(),
            PolicyKind::TopK { k } => self.top(k),
            PolicyKind::BottomQ { q } => self.bottom(q),
            PolicyKind::TopKBottomQStatic { k, q } => {
                let mut v = self.bottom(q);
                v.extend(self.top(k));
                v
            }
            PolicyKind::MiddleOnly => (2..l).collect(),
            _ => return None,
        };
        Some(LayerSelection::new(layers, l).expect("validated policy"))
    }

    /// One epoch's draw. Static policies ignore `rng`.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerSelection {
        if let Some(sel) = self.select_static() {
            return sel;
        }
        let l = self.num_layers;
        let layers = match self.kind {
            PolicyKind::TopKBottomQProb { k, q, rho } => {
                let mut v = self.top(k);
                if rng.random_bool(rho) {
                    v.extend(self.bottom(q));
                }
                v
            }
            PolicyKind::TopKAllBottoms { k, rho } => {
                if rng.random_bool(rho) {
                    (1..=l).collect()
                } else {
                    self.top(k)
                }
            }
            PolicyKind::RandomUniform => self.top(rng.random_range(1..=self.max_k)),
            PolicyKind::RandomBeta { alpha, beta } => {
                let x = Beta::new(alpha, beta).expect("validated").sample(rng);
                self.top(beta_to_k(x, self.max_k))
            }
            _ => unreachable!("static policies handled above"),
        };
        LayerSelection::new(layers, l).expect("validated policy")
    }
}

/// Maps `x` in `[0, 1]` to `clamp(round_half_up(1 + (max_k - 1) x), 1, max_k)`.
pub fn beta_to_k(x: f64, max_k: usize) -> usize {
    let k = (1.0 + (max_k as f64 - 1.0) * x + 0.5).floor();
    (k.max(1.0) as usize).min(max_k)
}
