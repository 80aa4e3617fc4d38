//! Deterministic, invertible token-to-feature oracle.
//!
//! Stands in for real spectrograms: every character has a unit-norm base
//! pattern, every synthetic speaker a unit-norm timbre vector plus its own
//! orthogonal rotation of the character basis, and an active frame
//! contributes `voiced_pattern + timbre`. Voicing the patterns per speaker
//! keeps the mixture of two simultaneous speakers uniquely decomposable;
//! with a shared pattern set, `(p_a + t_1) + (p_b + t_2)` would equal
//! `(p_b + t_1) + (p_a + t_2)` and the token-to-speaker pairing would be
//! lost on every overlapped frame. Continuation frames sustain the
//! preceding character's pattern with exponential decay while the timbre
//! stays constant; silence contributes nothing; simultaneous speakers add.
//! Decoding scores 0-, 1- and 2-source hypotheses per frame against a
//! precomputed candidate table.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::{derive_seed, seeded, standard_normal, ChaCha8Rng};
use crate::streams::SpeakerStreamPair;
use crate::tokens::{char_vocab, Token};

/// Everything needed to rebuild a codebook deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub dim: usize,
    pub n_timbres: usize,
    pub seed: u64,
    /// Per-frame decay of a sustained character pattern.
    pub lambda: f64,
    /// Residual tolerance; the per-source penalty in decoding is `tau^2`.
    pub tau: f64,
    /// Decay steps enumerated explicitly by the decoder.
    pub kmax: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n_timbres: 8,
            seed: 1,
            lambda: 0.6,
            tau: 0.25,
            kmax: 8,
        }
    }
}

/// The realized codebook: a shared character basis, one timbre per
/// synthetic speaker, and the per-speaker voiced patterns.
#[derive(Debug, Clone)]
pub struct OracleCodebook {
    pub spec: OracleSpec,
    base_patterns: Vec<Array1<f64>>,
    timbres: Vec<Array1<f64>>,
    /// `voiced[s][c]`: speaker `s`'s rotation applied to character `c`.
    voiced: Vec<Vec<Array1<f64>>>,
}

/// One decoded source on a frame: the token it carries and the synthetic
/// speaker it belongs to. `contribution` is the fitted codebook vector,
/// kept so downstream metrics can remove the pattern part again.
#[derive(Debug, Clone)]
pub struct DecodedSource {
    pub token: Token,
    pub timbre: usize,
    pub contribution: Array1<f64>,
}

/// Per-frame decode result: zero, one, or two sources plus the residual
/// norm of the best fit.
#[derive(Debug, Clone)]
pub struct FrameDecode {
    pub sources: Vec<DecodedSource>,
    pub residual: f64,
}

impl FrameDecode {
    pub fn is_silence(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn is_overlap(&self) -> bool {
        self.sources.len() == 2
    }
}

impl OracleCodebook {
    /// Build a codebook whose patterns and timbres are signed columns of
    /// seeded random orthonormal bases. Construction retries with derived
    /// seeds until the separation invariants hold.
    pub fn build(spec: OracleSpec) -> Result<Self> {
        if spec.dim == 0 || spec.n_timbres == 0 {
            return Err(Error::InvalidConfig("oracle dim and n_timbres must be > 0".into()));
        }
        if !(0.0 < spec.lambda && spec.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!("lambda {} not in (0,1)", spec.lambda)));
        }
        if spec.n_timbres > 2 * spec.dim {
            return Err(Error::InvalidConfig(format!(
                "cannot place {} separated timbres in dimension {}",
                spec.n_timbres, spec.dim
            )));
        }
        let n_chars = char_vocab().len();
        let min_dist = 2.0 * spec.tau;
        for attempt in 0..64 {
            let mut rng = seeded(derive_seed(spec.seed, 0xC0DE ^ attempt));
            let base_patterns = signed_basis_vectors(&mut rng, spec.dim, n_chars);
            let timbres = signed_basis_vectors(&mut rng, spec.dim, spec.n_timbres);
            if min_pairwise_distance(&base_patterns) <= min_dist
                || min_pairwise_distance(&timbres) <= min_dist
            {
                continue;
            }
            // per-speaker voicing: an orthogonal rotation of the character
            // basis, which preserves norms and pairwise separation
            let voiced: Vec<Vec<Array1<f64>>> = (0..spec.n_timbres)
                .map(|_| {
                    let rot = random_orthonormal(&mut rng, spec.dim);
                    base_patterns.iter().map(|p| rotate(&rot, p)).collect()
                })
                .collect();
            return Ok(Self {
                spec,
                base_patterns,
                timbres,
                voiced,
            });
        }
        Err(Error::InvalidConfig(
            "could not construct a separated codebook; lower tau or raise dim".into(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_timbres(&self) -> usize {
        self.timbres.len()
    }

    /// The shared (unvoiced) pattern basis for character `char_idx`.
    pub fn base_pattern(&self, char_idx: usize) -> &Array1<f64> {
        &self.base_patterns[char_idx]
    }

    /// Character `char_idx` as voiced by `timbre_id`.
    pub fn pattern(&self, timbre_id: usize, char_idx: usize) -> Result<&Array1<f64>> {
        Ok(&self
            .voiced
            .get(timbre_id)
            .ok_or(Error::UnknownTimbre(timbre_id))?[char_idx])
    }

    pub fn timbre(&self, id: usize) -> Result<&Array1<f64>> {
        self.timbres.get(id).ok_or(Error::UnknownTimbre(id))
    }

    pub fn max_timbre_cosine(&self) -> f64 {
        let mut worst = -1.0f64;
        for (i, a) in self.timbres.iter().enumerate() {
            for b in &self.timbres[i + 1..] {
                worst = worst.max(a.dot(b));
            }
        }
        worst
    }
}

/// Unit vectors `+q0, +q1, ..., -q0, -q1, ...` over as many random
/// orthonormal bases as needed to reach `count`.
fn signed_basis_vectors(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Array1<f64>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let basis = random_orthonormal(rng, dim);
        for sign in [1.0, -1.0] {
            for col in &basis {
                if out.len() == count {
                    return out;
                }
                out.push(col * sign);
            }
        }
    }
    out
}

/// Gram-Schmidt on seeded Gaussian draws.
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = Array1::from_shape_fn(dim, |_| standard_normal(rng));
        for b in &basis {
            let proj = v.dot(b);
            v = &v - &(b * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    basis
}

/// Apply a rotation given as orthonormal columns: `sum_j p[j] * q_j`.
fn rotate(columns: &[Array1<f64>], p: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(p.len());
    for (j, col) in columns.iter().enumerate() {
        out += &(col * p[j]);
    }
    out
}

fn min_pairwise_distance(vs: &[Array1<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in vs.iter().enumerate() {
        for b in &vs[i + 1..] {
            let d = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Per-stream synthesis state: the sustained character and its decay step.
#[derive(Clone, Copy)]
struct SustainState {
    last_char: Option<usize>,
    k: u32,
}

impl SustainState {
    fn new() -> Self {
        Self {
            last_char: None,
            k: 0,
        }
    }
}

/// Ground-truth features for a stream pair voiced by two timbres.
pub fn synth_features(
    streams: &SpeakerStreamPair,
    speakers: (usize, usize),
    codebook: &OracleCodebook,
) -> Result<FeatureSequence> {
    let ids = [speakers.0, speakers.1];
    let timbres = [codebook.timbre(speakers.0)?, codebook.timbre(speakers.1)?];
    let dim = codebook.dim();
    let mut out = Array2::zeros((streams.n_frames(), dim));
    for stream_idx in 0..2 {
        let z = streams.stream(stream_idx);
        let timbre = timbres[stream_idx];
        let voice = ids[stream_idx];
        let mut state = SustainState::new();
        for (f, tok) in z.iter().enumerate() {
            match tok {
                Token::Char(c) => {
                    let ci = crate::tokens::char_index(*c)?;
                    state = SustainState {
                        last_char: Some(ci),
                        k: 0,
                    };
                    let mut row = out.row_mut(f);
                    row += &(codebook.pattern(voice, ci)? + timbre);
                }
                Token::Pad => {
                    state.k += 1;
                    let mut row = out.row_mut(f);
                    match state.last_char {
                        Some(ci) => {
                            let scale = codebook.spec.lambda.powi(state.k as i32);
                            row += &(&(codebook.pattern(voice, ci)? * scale) + timbre);
                        }
                        // a pad run with no preceding character sustains
                        // only the timbre
                        None => row += timbre,
                    }
                }
                _ => state = SustainState::new(),
            }
        }
    }
    Ok(FeatureSequence(out))
}

/// Precomputed per-timbre unit tables for decoding.
///
/// A source contribution is `unit + timbre`, where the unit is a decayed
/// voiced pattern (or zero, for a fully decayed sustain). Decoding is
/// timbre-first: rank timbres by their best one-source fit, then for the
/// top timbre pairs alternately fit the two unit parts. Anchoring the
/// search on timbres keeps the two-source decomposition from collapsing
/// into a wrong local fit.
struct Decoder<'a> {
    codebook: &'a OracleCodebook,
    /// Per timbre: one row per unit (chars at every decay step, then zero).
    units: Vec<Array2<f64>>,
    unit_norms2: Vec<Vec<f64>>,
    /// Token per unit row (shared layout across timbres).
    unit_token: Vec<Token>,
}

impl<'a> Decoder<'a> {
    fn new(codebook: &'a OracleCodebook) -> Self {
        let chars = char_vocab();
        let dim = codebook.dim();
        let n_units = chars.len() * (1 + codebook.spec.kmax) + 1;
        let mut unit_token = Vec::with_capacity(n_units);
        for &c in chars {
            for k in 0..=codebook.spec.kmax {
                unit_token.push(if k == 0 { Token::Char(c) } else { Token::Pad });
            }
        }
        unit_token.push(Token::Pad); // fully decayed sustain

        let mut units = Vec::with_capacity(codebook.n_timbres());
        let mut unit_norms2 = Vec::with_capacity(codebook.n_timbres());
        for s in 0..codebook.n_timbres() {
            let mut mat = Array2::zeros((n_units, dim));
            let mut norms = Vec::with_capacity(n_units);
            let mut row = 0;
            for ci in 0..chars.len() {
                for k in 0..=codebook.spec.kmax {
                    let scale = codebook.spec.lambda.powi(k as i32);
                    let v = codebook.pattern(s, ci).expect("in range") * scale;
                    mat.row_mut(row).assign(&v);
                    norms.push(v.dot(&v));
                    row += 1;
                }
            }
            norms.push(0.0); // zero unit row stays zero
            units.push(mat);
            unit_norms2.push(norms);
        }
        Self {
            codebook,
            units,
            unit_norms2,
            unit_token,
        }
    }

    /// Best unit of timbre `s` against `target`: (row, squared residual).
    fn fit_unit(&self, s: usize, target: &Array1<f64>) -> (usize, f64) {
        let t2 = target.dot(target);
        let proj = self.units[s].dot(target);
        let mut best = (0usize, f64::INFINITY);
        for (idx, (p, n2)) in proj.iter().zip(&self.unit_norms2[s]).enumerate() {
            let r = (t2 - 2.0 * p + n2).max(0.0);
            if r < best.1 {
                best = (idx, r);
            }
        }
        best
    }

    fn source(&self, s: usize, unit_idx: usize) -> DecodedSource {
        let tau = self.codebook.timbre(s).expect("in range");
        DecodedSource {
            token: self.unit_token[unit_idx],
            timbre: s,
            contribution: &self.units[s].row(unit_idx) + tau,
        }
    }

    /// Alternating two-unit fit for the timbre pair (s, t) against `rho`
    /// (the frame with both timbres removed). `u_first` controls which
    /// side is fitted first.
    fn fit_pair(&self, s: usize, t: usize, rho: &Array1<f64>, u_first: bool) -> (usize, usize, f64) {
        let (mut u, mut v) = (self.unit_norms2[s].len() - 1, self.unit_norms2[t].len() - 1);
        let mut r = f64::INFINITY;
        for round in 0..4 {
            let fit_u = (round % 2 == 0) == u_first;
            let (nu, nv, nr) = if fit_u {
                let leftover = rho - &self.units[t].row(v);
                let (nu, _) = self.fit_unit(s, &leftover);
                let left_u = rho - &self.units[s].row(nu);
                let (nv, nr) = self.fit_unit(t, &left_u);
                (nu, nv, nr)
            } else {
                let leftover = rho - &self.units[s].row(u);
                let (nv, _) = self.fit_unit(t, &leftover);
                let left_v = rho - &self.units[t].row(nv);
                let (nu, nr) = self.fit_unit(s, &left_v);
                (nu, nv, nr)
            };
            if nr < r - 1e-15 {
                (u, v, r) = (nu, nv, nr);
            } else {
                break;
            }
        }
        (u, v, r)
    }

    fn decode_frame(&self, frame: &Array1<f64>) -> FrameDecode {
        let kappa = self.codebook.spec.tau * self.codebook.spec.tau;
        let n_timbres = self.codebook.n_timbres();
        let score0 = frame.dot(frame);

        // best one-source fit per timbre
        let mut singles: Vec<(usize, usize, f64)> = Vec::with_capacity(n_timbres);
        for s in 0..n_timbres {
            let rho = frame - self.codebook.timbre(s).expect("in range");
            let (u, r) = self.fit_unit(s, &rho);
            singles.push((s, u, r));
        }
        let best1 = singles
            .iter()
            .copied()
            .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
            .expect("at least one timbre");

        // two-source search over the best-ranked timbre pairs
        let mut ranked: Vec<usize> = (0..n_timbres).collect();
        ranked.sort_by(|&a, &b| singles[a].2.total_cmp(&singles[b].2).then(a.cmp(&b)));
        let top = &ranked[..ranked.len().min(4)];
        let mut best2: Option<(usize, usize, usize, usize, f64)> = None;
        for (i, &s) in top.iter().enumerate() {
            for &t in &top[i + 1..] {
                let rho = frame
                    - self.codebook.timbre(s).expect("in range")
                    - self.codebook.timbre(t).expect("in range");
                for u_first in [true, false] {
                    let (u, v, r) = self.fit_pair(s, t, &rho, u_first);
                    if best2.is_none_or(|(.., b)| r < b) {
                        best2 = Some((s, u, t, v, r));
                    }
                }
            }
        }

        // model selection: residual plus tau^2 per source
        let score1 = best1.2 + kappa;
        let score2 = best2.map_or(f64::INFINITY, |(.., r)| r + 2.0 * kappa);

        if score0 <= score1 && score0 <= score2 {
            FrameDecode {
                sources: Vec::new(),
                residual: score0.sqrt(),
            }
        } else if score1 <= score2 {
            FrameDecode {
                sources: vec![self.source(best1.0, best1.1)],
                residual: best1.2.sqrt(),
            }
        } else {
            let (s, u, t, v, r) = best2.expect("score2 finite implies a pair");
            // order by timbre id for determinism
            let (first, second) = if s <= t { ((s, u), (t, v)) } else { ((t, v), (s, u)) };
            FrameDecode {
                sources: vec![self.source(first.0, first.1), self.source(second.0, second.1)],
                residual: r.sqrt(),
            }
        }
    }
}

/// Decode every frame into its best (token, speaker) hypothesis set.
pub fn decode_features(features: &FeatureSequence, codebook: &OracleCodebook) -> Result<Vec<FrameDecode>> {
    if features.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            got: features.dim(),
        });
    }
    let decoder = Decoder::new(codebook);
    Ok((0..features.n_frames())
        .map(|f| decoder.decode_frame(&features.0.row(f).to_owned()))
        .collect())
}

/// Estimate a sequence's timbre: the mean of `frame - fitted pattern` over
/// single-source frames.
pub fn timbre_estimate(features: &FeatureSequence, codebook: &OracleCodebook) -> Result<Array1<f64>> {
    let decoded = decode_features(features, codebook)?;
    let mut acc = Array1::<f64>::zeros(codebook.dim());
    let mut n = 0usize;
    for (f, d) in decoded.iter().enumerate() {
        if d.sources.len() == 1 {
            let src = &d.sources[0];
            let tau = codebook.timbre(src.timbre)?;
            let pattern_part = &src.contribution - tau;
            acc += &(&features.0.row(f).to_owned() - &pattern_part);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllSilent);
    }
    Ok(acc / n as f64)
}
