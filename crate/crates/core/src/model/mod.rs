//! The vector-field model: a small time-conditioned transformer over
//! frame-synchronous inputs, with paired-layer skip connections and exact
//! manual reverse-mode gradients in f64.
//!
//! Per-frame input is the sum of a feature projection (prompt features on
//! the prefix, the flow state on the body), one embedding per token
//! stream, and a shared time embedding. Layer `i`'s output is merged by a
//! learned two-scalar gate into layer `n_layers - 1 - i`'s input, pairing
//! the first half of the stack with the second.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{forward, gradients, time_embed, time_features, ForwardInput, ModelField, TrainItem};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};
use crate::tokens::vocab_size;

fn default_vocab() -> usize {
    vocab_size()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Must be even so layers pair up for the skip merges.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_features: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Rotary position information on queries and keys. Disabling it makes
    /// the forward pass permutation-equivariant.
    #[serde(default = "default_true")]
    pub use_rope: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    /// Desk-scale configuration: full training runs in minutes on a CPU.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_features: 16,
            vocab_size: vocab_size(),
            use_rope: true,
        }
    }
}

impl ModelConfig {
    /// Smallest sane configuration, for fast tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_features: 8,
            vocab_size: vocab_size(),
            use_rope: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_layers must be even and positive, got {}",
                self.n_layers
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.use_rope && (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::InvalidConfig(
                "rotary positions need an even head dimension".into(),
            ));
        }
        if self.d_features == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("d_features and vocab_size must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn n_pairs(&self) -> usize {
        self.n_layers / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
}

/// Every named tensor of the model, in the canonical checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub embed_z1: Array2<f64>,
    pub embed_z2: Array2<f64>,
    pub feat_w: Array2<f64>,
    pub feat_b: Array1<f64>,
    pub time_w1: Array2<f64>,
    pub time_b1: Array1<f64>,
    pub time_w2: Array2<f64>,
    pub time_b2: Array1<f64>,
    pub layers: Vec<LayerParams>,
    /// Gate scalars per layer pair: contribution of the running activation
    /// and of the skipped-in activation. `(1, 0)` reduces the network to a
    /// plain transformer.
    pub merge_own: Array1<f64>,
    pub merge_skip: Array1<f64>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Borrowed view of one named tensor.
pub enum TensorView<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

impl ParameterSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.d_model;
        let m = config.d_mlp();
        let layer = || LayerParams {
            ln1_g: Array1::zeros(c),
            ln1_b: Array1::zeros(c),
            wq: Array2::zeros((c, c)),
            bq: Array1::zeros(c),
            wk: Array2::zeros((c, c)),
            bk: Array1::zeros(c),
            wv: Array2::zeros((c, c)),
            bv: Array1::zeros(c),
            wo: Array2::zeros((c, c)),
            bo: Array1::zeros(c),
            ln2_g: Array1::zeros(c),
            ln2_b: Array1::zeros(c),
            w_up: Array2::zeros((c, m)),
            b_up: Array1::zeros(m),
            w_down: Array2::zeros((m, c)),
            b_down: Array1::zeros(c),
        };
        Self {
            embed_z1: Array2::zeros((config.vocab_size, c)),
            embed_z2: Array2::zeros((config.vocab_size, c)),
            feat_w: Array2::zeros((config.d_features, c)),
            feat_b: Array1::zeros(c),
            time_w1: Array2::zeros((c, c)),
            time_b1: Array1::zeros(c),
            time_w2: Array2::zeros((c, c)),
            time_b2: Array1::zeros(c),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            merge_own: Array1::zeros(config.n_pairs()),
            merge_skip: Array1::zeros(config.n_pairs()),
            lnf_g: Array1::zeros(c),
            lnf_b: Array1::zeros(c),
            out_w: Array2::zeros((c, config.d_features)),
            out_b: Array1::zeros(config.d_features),
        }
    }

    /// Seeded initialization: fan-in scaled Gaussian weights, zero biases,
    /// identity norms, identity skip gates (own 1, skip 0), and a zeroed
    /// output projection so the initial field is exactly zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = seeded(seed);
        let mut fill = |m: &mut Array2<f64>, std: f64| {
            for v in m.iter_mut() {
                *v = standard_normal(&mut rng) * std;
            }
        };
        fill(&mut p.embed_z1, 0.02);
        fill(&mut p.embed_z2, 0.02);
        let c = config.d_model as f64;
        fill(&mut p.feat_w, 1.0 / (config.d_features as f64).sqrt());
        fill(&mut p.time_w1, 1.0 / c.sqrt());
        fill(&mut p.time_w2, 1.0 / c.sqrt());
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                for v in w.iter_mut() {
                    *v = standard_normal(&mut rng) / c.sqrt();
                }
            }
            for v in l.w_up.iter_mut() {
                *v = standard_normal(&mut rng) / c.sqrt();
            }
            for v in l.w_down.iter_mut() {
                *v = standard_normal(&mut rng) / (config.d_mlp() as f64).sqrt();
            }
        }
        p.merge_own.fill(1.0);
        p.lnf_g.fill(1.0);
        // out_w / out_b stay zero
        p
    }

    /// Visit tensors in the canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorView<'a>)) {
        use TensorView::{M, V};
        f("embed_z1".into(), M(&self.embed_z1));
        f("embed_z2".into(), M(&self.embed_z2));
        f("feat_w".into(), M(&self.feat_w));
        f("feat_b".into(), V(&self.feat_b));
        f("time_w1".into(), M(&self.time_w1));
        f("time_b1".into(), V(&self.time_b1));
        f("time_w2".into(), M(&self.time_w2));
        f("time_b2".into(), V(&self.time_b2));
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.ln1_g"), V(&l.ln1_g));
            f(format!("layers.{i}.ln1_b"), V(&l.ln1_b));
            f(format!("layers.{i}.wq"), M(&l.wq));
            f(format!("layers.{i}.bq"), V(&l.bq));
            f(format!("layers.{i}.wk"), M(&l.wk));
            f(format!("layers.{i}.bk"), V(&l.bk));
            f(format!("layers.{i}.wv"), M(&l.wv));
            f(format!("layers.{i}.bv"), V(&l.bv));
            f(format!("layers.{i}.wo"), M(&l.wo));
            f(format!("layers.{i}.bo"), V(&l.bo));
            f(format!("layers.{i}.ln2_g"), V(&l.ln2_g));
            f(format!("layers.{i}.ln2_b"), V(&l.ln2_b));
            f(format!("layers.{i}.w_up"), M(&l.w_up));
            f(format!("layers.{i}.b_up"), V(&l.b_up));
            f(format!("layers.{i}.w_down"), M(&l.w_down));
            f(format!("layers.{i}.b_down"), V(&l.b_down));
        }
        f("merge_own".into(), V(&self.merge_own));
        f("merge_skip".into(), V(&self.merge_skip));
        f("lnf_g".into(), V(&self.lnf_g));
        f("lnf_b".into(), V(&self.lnf_b));
        f("out_w".into(), M(&self.out_w));
        f("out_b".into(), V(&self.out_b));
    }

    /// Flat storage in the canonical order; all arrays are standard layout
    /// so the slices cover every scalar.
    pub fn flat_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        macro_rules! push {
            ($($t:expr),* $(,)?) => {
                $(out.push($t.as_slice().expect("standard layout"));)*
            };
        }
        push!(
            self.embed_z1,
            self.embed_z2,
            self.feat_w,
            self.feat_b,
            self.time_w1,
            self.time_b1,
            self.time_w2,
            self.time_b2
        );
        for l in &self.layers {
            push!(
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
                l.w_up, l.b_up, l.w_down, l.b_down
            );
        }
        push!(
            self.merge_own,
            self.merge_skip,
            self.lnf_g,
            self.lnf_b,
            self.out_w,
            self.out_b
        );
        out
    }

    pub fn flat_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        macro_rules! push {
            ($($t:expr),* $(,)?) => {
                $(out.push($t.as_slice_mut().expect("standard layout"));)*
            };
        }
        push!(
            self.embed_z1,
            self.embed_z2,
            self.feat_w,
            self.feat_b,
            self.time_w1,
            self.time_b1,
            self.time_w2,
            self.time_b2
        );
        for l in &mut self.layers {
            push!(
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b,
                l.w_up, l.b_up, l.w_down, l.b_down
            );
        }
        push!(
            self.merge_own,
            self.merge_skip,
            self.lnf_g,
            self.lnf_b,
            self.out_w,
            self.out_b
        );
        out
    }

    pub fn flat_len(&self) -> usize {
        self.flat_slices().iter().map(|s| s.len()).sum()
    }

    pub fn flat_get(&self, idx: usize) -> f64 {
        let mut i = idx;
        for s in self.flat_slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn flat_set(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for s in self.flat_slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) {
        let b = other.flat_slices();
        for (sa, sb) in self.flat_slices_mut().into_iter().zip(b) {
            for (x, y) in sa.iter_mut().zip(sb.iter()) {
                *x += scale * *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flat_slices()
            .into_iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Content digest over the canonical tensor order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |name, view| {
            hasher.update(name.as_bytes());
            let push = |h: &mut Sha256, it: &mut dyn Iterator<Item = &f64>| {
                for v in it {
                    h.update(v.to_le_bytes());
                }
            };
            match view {
                TensorView::V(a) => push(&mut hasher, &mut a.iter()),
                TensorView::M(a) => push(&mut hasher, &mut a.iter()),
            }
        });
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
