//! Conditional flow matching: the interpolation path, the masked L2
//! objective, classifier-free guidance, and the ODE sampler.
//!
//! Training regresses the model onto the constant true flow
//! `target = m - (1 - sigma_min) * m0` along the path
//! `w(t) = (1 - (1 - sigma_min) * t) * m0 + t * m`. Sampling integrates the
//! guided field from t=0 to t=1 starting at Gaussian noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::{standard_normal_matrix, ChaCha8Rng};
use crate::tokens::{TokenId, TokenScheme};

/// Fixed-step ODE solvers. `nfe` counts vector-field evaluations: Euler
/// takes `nfe` steps, midpoint takes `nfe / 2` two-evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Euler,
    Midpoint,
}

/// Flow-matching hyperparameters. The defaults are the reference values:
/// sigma_min 0.1, p_uncond 0.2, guidance strength 1.0, 32 function
/// evaluations with the Euler solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub p_uncond: f64,
    pub alpha: f64,
    pub nfe: usize,
    pub solver: SolverKind,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.1,
            p_uncond: 0.20,
            alpha: 1.0,
            nfe: 32,
            solver: SolverKind::Euler,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma_min {} not in (0, 1)",
                self.sigma_min
            )));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidConfig(format!(
                "p_uncond {} not in [0, 1]",
                self.p_uncond
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha {} < 0", self.alpha)));
        }
        if self.nfe == 0 {
            return Err(Error::InvalidConfig("nfe must be >= 1".into()));
        }
        if self.solver == SolverKind::Midpoint && self.nfe % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "midpoint solver needs an even nfe, got {}",
                self.nfe
            )));
        }
        Ok(())
    }
}

/// A point on the interpolation path with its regression target.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub t: f64,
    pub w: FeatureSequence,
    pub target: FeatureSequence,
    /// Per-frame loss mask; callers replace this when a prefix is present.
    pub mask: Vec<bool>,
}

fn check_same_shape(a: &FeatureSequence, b: &FeatureSequence) -> Result<()> {
    if a.0.dim() != b.0.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.0.dim()),
            got: format!("{:?}", b.0.dim()),
        });
    }
    Ok(())
}

/// Interpolate between noise `m0` and data `m` at flow time `t`.
///
/// `w = (1 - (1 - sigma_min) t) m0 + t m`; the target
/// `m - (1 - sigma_min) m0` does not depend on `t`.
pub fn sample_flow(
    m: &FeatureSequence,
    m0: &FeatureSequence,
    t: f64,
    sigma_min: f64,
) -> Result<FlowSample> {
    check_same_shape(m, m0)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("flow time {t} not in [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let w = FeatureSequence(&(&m0.0 * a) + &(&m.0 * t));
    let target = FeatureSequence(&m.0 - &(&m0.0 * (1.0 - sigma_min)));
    let mask = vec![true; m.n_frames()];
    Ok(FlowSample { t, w, target, mask })
}

/// Masked flow-matching loss: the mean of squared differences over
/// unmasked frames and all feature dimensions.
pub fn fm_loss(pred: &FeatureSequence, target: &FeatureSequence, mask: &[bool]) -> Result<f64> {
    check_same_shape(pred, target)?;
    if mask.len() != pred.n_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mask entries", pred.n_frames()),
            got: format!("{}", mask.len()),
        });
    }
    let unmasked = mask.iter().filter(|m| **m).count();
    if unmasked == 0 {
        return Err(Error::AllMasked);
    }
    let mut sum = 0.0;
    for (f, keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for d in 0..pred.dim() {
            let diff = pred.0[[f, d]] - target.0[[f, d]];
            sum += diff * diff;
        }
    }
    Ok(sum / (unmasked * pred.dim()) as f64)
}

/// Conditioning for the vector field: an optional clean feature prefix and
/// the token streams over the full (prefix + body) length.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prefix: Option<FeatureSequence>,
    pub z1: Vec<TokenId>,
    pub z2: Vec<TokenId>,
}

impl Conditioning {
    pub fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, |p| p.n_frames())
    }

    pub fn total_len(&self) -> usize {
        self.z1.len()
    }

    /// The null condition over `body_len` frames: no prefix, all-silence
    /// streams (the generic silence token).
    pub fn null(body_len: usize) -> Self {
        let silence = TokenScheme::GenericSilence.silence_for(0).id().expect("silence in vocab");
        Self {
            prefix: None,
            z1: vec![silence; body_len],
            z2: vec![silence; body_len],
        }
    }
}

/// Jointly drop both conditioning inputs with probability `p_uncond`.
/// Returns `None` for the unconditioned branch; the prompt and streams are
/// never dropped separately.
pub fn cfg_dropout(
    cond: Conditioning,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Conditioning> {
    let u: f64 = rng.gen();
    if u < p_uncond {
        None
    } else {
        Some(cond)
    }
}

/// Guided field `(1 + alpha) v_cond - alpha v_uncond`, computed as
/// `v_cond + alpha (v_cond - v_uncond)` so the cancellation and alpha = 0
/// identities are exact in floating point.
pub fn cfg_field(
    v_cond: &FeatureSequence,
    v_uncond: &FeatureSequence,
    alpha: f64,
) -> Result<FeatureSequence> {
    check_same_shape(v_cond, v_uncond)?;
    let diff = &v_cond.0 - &v_uncond.0;
    Ok(FeatureSequence(&v_cond.0 + &(diff * alpha)))
}

/// Anything that can serve as the flow's vector field: the trained model,
/// or a closed-form oracle field in tests.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Evaluate the field on the body `w` at time `t`. `None` conditioning
    /// means the null condition.
    fn eval(&self, w: &FeatureSequence, t: f64, cond: Option<&Conditioning>) -> FeatureSequence;
}

/// Generate a feature sequence by integrating the guided field from t=0 to
/// t=1. Noise covers only the body; prompt-prefix frames are part of the
/// conditioning and stay clean at every step. Returns the body.
pub fn ode_sample(
    field: &dyn VectorField,
    cond: Option<&Conditioning>,
    body_len: usize,
    config: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSequence> {
    config.validate()?;
    if let Some(c) = cond {
        if c.total_len() != c.prefix_len() + body_len {
            return Err(Error::ShapeMismatch {
                expected: format!("{} stream frames", c.prefix_len() + body_len),
                got: format!("{}", c.total_len()),
            });
        }
        if let Some(p) = &c.prefix {
            if p.dim() != field.dim() {
                return Err(Error::DimensionMismatch {
                    expected: field.dim(),
                    got: p.dim(),
                });
            }
        }
    }
    let mut w = FeatureSequence(standard_normal_matrix(rng, body_len, field.dim()));
    let guided = |w: &FeatureSequence, t: f64| -> Result<FeatureSequence> {
        match cond {
            Some(c) if config.alpha != 0.0 => {
                let v_c = field.eval(w, t, Some(c));
                let null = Conditioning::null(body_len);
                let v_u = field.eval(w, t, Some(&null));
                cfg_field(&v_c, &v_u, config.alpha)
            }
            Some(c) => Ok(field.eval(w, t, Some(c))),
            None => Ok(field.eval(w, t, None)),
        }
    };
    match config.solver {
        SolverKind::Euler => {
            let n = config.nfe;
            let h = 1.0 / n as f64;
            for i in 0..n {
                let t = i as f64 * h;
                let v = guided(&w, t)?;
                w.0 += &(&v.0 * h);
            }
        }
        SolverKind::Midpoint => {
            let n = config.nfe / 2;
            let h = 1.0 / n as f64;
            for i in 0..n {
                let t = i as f64 * h;
                let k1 = guided(&w, t)?;
                let mid = FeatureSequence(&w.0 + &(&k1.0 * (0.5 * h)));
                let k2 = guided(&mid, t + 0.5 * h)?;
                w.0 += &(&k2.0 * h);
            }
        }
    }
    Ok(w)
}
