//! Seeded corpus generation and the on-disk corpus layout.
//!
//! A corpus is a list of (transcript, timbre pair, feature sequence)
//! samples. The monologue stage emits single-speaker samples only; the
//! dialogue-mix stage draws each sample's category from the configured
//! weights: sequential dialogues, monologues, or overlap-simulated
//! dialogues with the overlap ratio uniform on [0, 1].

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::oracle::{synth_features, OracleCodebook};
use crate::rng::{derive_seed, seeded, ChaCha8Rng};
use crate::sim::{simulate_dialogue, PoolUtterance, SimulationSpec};
use crate::streams::{disentangle, estimate_duration_floored};
use crate::tokens::TokenScheme;
use crate::transcript::{DialogueTranscript, FrameGrid, Speaker, TranscriptSegment, DEFAULT_HOP_S};

/// Which curriculum stage a corpus feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusStage {
    Monologue,
    DialogueMix,
}

/// Category of one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCategory {
    Sequential,
    Monologue,
    Overlap,
}

/// Mixing weights for the dialogue stage; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub sequential: f64,
    pub monologue: f64,
    pub overlap: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            sequential: 0.5,
            monologue: 0.3,
            overlap: 0.2,
        }
    }
}

impl MixWeights {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.sequential, self.monologue, self.overlap];
        if parts.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SampleCategory {
        let u: f64 = rng.gen();
        if u < self.sequential {
            SampleCategory::Sequential
        } else if u < self.sequential + self.monologue {
            SampleCategory::Monologue
        } else {
            SampleCategory::Overlap
        }
    }
}

/// Generation knobs for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusGenConfig {
    pub hop_s: f64,
    pub scheme: TokenScheme,
    /// Utterance texts are drawn from this word list.
    pub lexicon: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    /// Speaking rate is drawn uniformly from this range per utterance.
    pub rate_range: (f64, f64),
    /// Floor on utterance duration; keeps every turn long enough to serve
    /// as a prompt candidate.
    pub min_utterance_s: f64,
    /// Gap range for sequential dialogues and between monologue utterances.
    pub gap_range: (f64, f64),
    pub dialogue_turns: (usize, usize),
    pub monologue_utterances: (usize, usize),
    /// Silence appended after the last segment.
    pub trailing_silence_s: f64,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        Self {
            hop_s: DEFAULT_HOP_S,
            scheme: TokenScheme::GenericSilence,
            lexicon: desk_lexicon(),
            min_words: 2,
            max_words: 3,
            rate_range: (4.2, 5.8),
            min_utterance_s: 0.65,
            gap_range: (0.08, 0.3),
            dialogue_turns: (2, 3),
            monologue_utterances: (1, 2),
            trailing_silence_s: 0.1,
        }
    }
}

/// Small word list used by the synthetic corpus.
pub fn desk_lexicon() -> Vec<String> {
    [
        "hi", "hey", "yes", "no", "well", "okay", "right", "sure", "good", "fine", "maybe",
        "really", "listen", "tell", "me", "more", "about", "that", "what", "do", "you", "think",
        "sounds", "great",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// One generated sample, fully determined by (config, seed, index).
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub id: usize,
    pub stage: CorpusStage,
    pub category: SampleCategory,
    pub transcript: DialogueTranscript,
    /// Timbres voicing stream 1 and stream 2. Monologues use only the
    /// timbre of the speaker present.
    pub timbres: (usize, usize),
    pub overlap_ratio: Option<f64>,
    pub seed: u64,
    pub features: FeatureSequence,
}

fn random_text(cfg: &CorpusGenConfig, rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    (0..n)
        .map(|_| cfg.lexicon[rng.gen_range(0..cfg.lexicon.len())].clone())
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_utterance(cfg: &CorpusGenConfig, rng: &mut ChaCha8Rng) -> (String, f64) {
    let text = random_text(cfg, rng);
    let rate = rng.gen_range(cfg.rate_range.0..cfg.rate_range.1);
    let mut dur = estimate_duration_floored(&text, rate, cfg.min_utterance_s)
        .expect("lexicon text is never empty");
    // never let the quantized span get too dense for the characters
    let dense_floor = text.chars().count() as f64 * cfg.hop_s * 1.5;
    if dur < dense_floor {
        dur = dense_floor;
    }
    (text, dur)
}

fn pick_two_timbres(n_timbres: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let a = rng.gen_range(0..n_timbres);
    let mut b = rng.gen_range(0..n_timbres - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn monologue_transcript(
    cfg: &CorpusGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(DialogueTranscript, Speaker)> {
    let speaker = if rng.gen::<bool>() { Speaker::Spk1 } else { Speaker::Spk2 };
    let n = rng.gen_range(cfg.monologue_utterances.0..=cfg.monologue_utterances.1);
    let mut segments = Vec::with_capacity(n);
    let mut cursor = 0.0;
    for i in 0..n {
        if i > 0 {
            cursor += rng.gen_range(cfg.gap_range.0..cfg.gap_range.1);
        }
        let (text, dur) = random_utterance(cfg, rng);
        segments.push(TranscriptSegment::new(speaker, cursor, cursor + dur, text));
        cursor += dur;
    }
    let total = cursor + cfg.trailing_silence_s;
    Ok((DialogueTranscript::new(segments, total)?, speaker))
}

fn dialogue_pool(
    cfg: &CorpusGenConfig,
    timbres: (usize, usize),
    per_speaker: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PoolUtterance> {
    let mut pool = Vec::new();
    for &timbre in &[timbres.0, timbres.1] {
        for _ in 0..per_speaker {
            let (text, duration_s) = random_utterance(cfg, rng);
            pool.push(PoolUtterance {
                timbre,
                text,
                duration_s,
            });
        }
    }
    pool
}

fn pad_total_duration(t: DialogueTranscript, extra_s: f64) -> DialogueTranscript {
    DialogueTranscript {
        total_duration_s: t.total_duration_s + extra_s,
        segments: t.segments,
    }
}

/// Generate one sample.
fn build_sample(
    id: usize,
    stage: CorpusStage,
    weights: &MixWeights,
    cfg: &CorpusGenConfig,
    codebook: &OracleCodebook,
    seed: u64,
) -> Result<CorpusSample> {
    let sample_seed = derive_seed(seed, id as u64);
    let mut rng = seeded(sample_seed);
    let category = match stage {
        CorpusStage::Monologue => SampleCategory::Monologue,
        CorpusStage::DialogueMix => weights.draw(&mut rng),
    };
    let n_timbres = codebook.n_timbres();
    let (transcript, timbres, overlap_ratio) = match category {
        SampleCategory::Monologue => {
            let (t, speaker) = monologue_transcript(cfg, &mut rng)?;
            let (a, b) = pick_two_timbres(n_timbres, &mut rng);
            // the silent stream's timbre is unused; keep the speaker's
            // voice on their own stream
            let pair = if speaker == Speaker::Spk1 { (a, b) } else { (b, a) };
            (t, pair, None)
        }
        SampleCategory::Sequential => {
            let timbres = pick_two_timbres(n_timbres, &mut rng);
            let n_turns = rng.gen_range(cfg.dialogue_turns.0..=cfg.dialogue_turns.1);
            let gap = rng.gen_range(cfg.gap_range.0..cfg.gap_range.1);
            let pool = dialogue_pool(cfg, timbres, n_turns, &mut rng);
            let spec = SimulationSpec {
                overlap_ratio: 0.0,
                silence_gap_s: gap,
                pool,
                seed: derive_seed(sample_seed, 1),
                n_turns,
            };
            let (t, pair) = simulate_dialogue(&spec)?;
            (pad_total_duration(t, cfg.trailing_silence_s), pair, None)
        }
        SampleCategory::Overlap => {
            let timbres = pick_two_timbres(n_timbres, &mut rng);
            let ratio: f64 = rng.gen();
            let pool = dialogue_pool(cfg, timbres, 2, &mut rng);
            let spec = SimulationSpec {
                overlap_ratio: ratio,
                silence_gap_s: 0.0,
                pool,
                seed: derive_seed(sample_seed, 2),
                n_turns: 2,
            };
            let (t, pair) = simulate_dialogue(&spec)?;
            (pad_total_duration(t, cfg.trailing_silence_s), pair, Some(ratio))
        }
    };
    let grid = FrameGrid::covering(cfg.hop_s, transcript.total_duration_s)?;
    let streams = disentangle(&transcript, &grid, cfg.scheme)?;
    let features = synth_features(&streams, timbres, codebook)?;
    Ok(CorpusSample {
        id,
        stage,
        category,
        transcript,
        timbres,
        overlap_ratio,
        seed: sample_seed,
        features,
    })
}

/// Generate `n` samples, reproducible from (stage, weights, config, seed).
pub fn build_corpus(
    stage: CorpusStage,
    n: usize,
    weights: &MixWeights,
    cfg: &CorpusGenConfig,
    codebook: &OracleCodebook,
    seed: u64,
) -> Result<Vec<CorpusSample>> {
    weights.validate()?;
    (0..n)
        .map(|id| build_sample(id, stage, weights, cfg, codebook, seed))
        .collect()
}

// ---------------------------------------------------------------------
// disk layout

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleMeta {
    id: usize,
    stage: CorpusStage,
    category: SampleCategory,
    timbre1: usize,
    timbre2: usize,
    overlap_ratio: Option<f64>,
    seed: u64,
}

/// Corpus directory manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub n_samples: usize,
    pub stage: CorpusStage,
    pub seed: u64,
    pub hop_s: f64,
    pub config_hash: String,
}

/// Digest of everything that determines corpus content.
pub fn corpus_config_hash(
    stage: CorpusStage,
    n: usize,
    weights: &MixWeights,
    cfg: &CorpusGenConfig,
    oracle_seed: u64,
    seed: u64,
) -> String {
    let blob = serde_json::json!({
        "stage": stage,
        "n": n,
        "weights": weights,
        "gen": cfg,
        "oracle_seed": oracle_seed,
        "seed": seed,
    });
    let mut hasher = Sha256::new();
    hasher.update(blob.to_string().as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sample_dir(root: &Path, id: usize) -> std::path::PathBuf {
    root.join(format!("sample_{id:05}"))
}

/// Write one sample directory per sample plus the manifest.
pub fn write_corpus(root: &Path, samples: &[CorpusSample], manifest: &CorpusManifest) -> Result<()> {
    fs::create_dir_all(root)?;
    for s in samples {
        let dir = sample_dir(root, s.id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("transcript.json"), s.transcript.to_json()?)?;
        s.features.write_to(&dir.join("features.bin"))?;
        let meta = SampleMeta {
            id: s.id,
            stage: s.stage,
            category: s.category,
            timbre1: s.timbres.0,
            timbre2: s.timbres.1,
            overlap_ratio: s.overlap_ratio,
            seed: s.seed,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(root.join("manifest.json")).map_err(|e| {
        Error::CorpusFormat(format!("{}: missing manifest.json ({e})", root.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Read a corpus directory back, ordered by sample id.
pub fn read_corpus(root: &Path) -> Result<Vec<CorpusSample>> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for id in 0..manifest.n_samples {
        let dir = sample_dir(root, id);
        let transcript =
            DialogueTranscript::from_json(&fs::read_to_string(dir.join("transcript.json"))?)?;
        let features = FeatureSequence::read_from(&dir.join("features.bin"))?;
        let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.id != id {
            return Err(Error::CorpusFormat(format!(
                "{}: meta id {} does not match directory {id}",
                dir.display(),
                meta.id
            )));
        }
        samples.push(CorpusSample {
            id,
            stage: meta.stage,
            category: meta.category,
            transcript,
            timbres: (meta.timbre1, meta.timbre2),
            overlap_ratio: meta.overlap_ratio,
            seed: meta.seed,
            features,
        });
    }
    Ok(samples)
}
