//! Prompt-level random masking.
//!
//! For each training sample we locate every monologue span (frames where
//! exactly one speaker is active), pick one uniformly per speaker, and
//! prefix the sample with those frames plus separators. The prefix carries
//! the target voices; its tokens are rewritten to prompt-range markers, and
//! the loss mask excludes it from the objective so the model generalizes
//! the voice instead of copying the prompt.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::ChaCha8Rng;
use crate::streams::SpeakerStreamPair;
use crate::tokens::{Token, TokenScheme};
use crate::transcript::{DialogueTranscript, FrameGrid, Speaker};

/// Prompt selection and layout parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Shortest usable monologue span, in frames.
    pub min_prompt_frames: usize,
    /// Longer candidates are truncated to their leading portion.
    pub max_prompt_frames: usize,
    /// Separator width after each prompt block.
    pub sep_frames: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            min_prompt_frames: 50,
            max_prompt_frames: 300,
            sep_frames: 1,
        }
    }
}

/// A monologue span usable as an acoustic prompt. The span indexes into
/// the owning sample's features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptCandidate {
    pub speaker: Speaker,
    pub frame_span: (usize, usize),
}

impl PromptCandidate {
    pub fn len(&self) -> usize {
        self.frame_span.1 - self.frame_span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-frame speaker-activity bitmask from the quantized segment spans.
pub fn activity_mask(transcript: &DialogueTranscript, grid: &FrameGrid) -> Vec<u8> {
    let mut mask = vec![0u8; grid.n_frames];
    for seg in &transcript.segments {
        let (start, end) = grid.span(seg.start_s, seg.end_s);
        let bit = 1u8 << seg.speaker.stream();
        for m in &mut mask[start..end] {
            *m |= bit;
        }
    }
    mask
}

/// Every maximal span where exactly one speaker is active and the span is
/// long enough, truncated to the configured maximum.
pub fn find_prompt_candidates(
    transcript: &DialogueTranscript,
    grid: &FrameGrid,
    config: &PromptConfig,
) -> Vec<PromptCandidate> {
    let mask = activity_mask(transcript, grid);
    let mut out = Vec::new();
    let mut f = 0;
    while f < mask.len() {
        let m = mask[f];
        if m == 1 || m == 2 {
            let start = f;
            while f < mask.len() && mask[f] == m {
                f += 1;
            }
            if f - start >= config.min_prompt_frames {
                let speaker = if m == 1 { Speaker::Spk1 } else { Speaker::Spk2 };
                out.push(PromptCandidate {
                    speaker,
                    frame_span: (start, start + (f - start).min(config.max_prompt_frames)),
                });
            }
        } else {
            f += 1;
        }
    }
    out
}

/// A prompt-prefixed, loss-masked training sample.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Prefix (copied prompt frames and zero separator frames) followed by
    /// the unchanged body features.
    pub features: FeatureSequence,
    /// Token streams over the full prefixed length.
    pub z1: Vec<Token>,
    pub z2: Vec<Token>,
    /// `false` exactly on the prefix.
    pub loss_mask: Vec<bool>,
    /// Selected prompt span per speaker, in prefix coordinates.
    pub prompt_spans: [Option<(usize, usize)>; 2],
    /// Prefix length in frames.
    pub prefix_len: usize,
}

impl TrainingExample {
    pub fn body_len(&self) -> usize {
        self.features.n_frames() - self.prefix_len
    }

    /// JSON debug dump for test fixtures.
    pub fn to_debug_json(&self) -> String {
        serde_json::json!({
            "prefix_len": self.prefix_len,
            "body_len": self.body_len(),
            "prompt_spans": self.prompt_spans,
            "z1": self.z1.iter().map(|t| t.name()).collect::<Vec<_>>(),
            "z2": self.z2.iter().map(|t| t.name()).collect::<Vec<_>>(),
            "loss_mask_true": self.loss_mask.iter().filter(|m| **m).count(),
        })
        .to_string()
    }
}

/// Assemble a training example: uniformly select one candidate per present
/// speaker, build the `[prompt1 | sep | prompt2 | sep]` prefix (speaker 1
/// first; a single block when only one speaker has a prompt), and mask the
/// prefix out of the loss.
pub fn assemble_training_example(
    features: &FeatureSequence,
    streams: &SpeakerStreamPair,
    candidates: &[PromptCandidate],
    scheme: TokenScheme,
    config: &PromptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    if features.n_frames() != streams.n_frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature frames", streams.n_frames()),
            got: format!("{}", features.n_frames()),
        });
    }
    let mut chosen: Vec<PromptCandidate> = Vec::new();
    for speaker in Speaker::BOTH {
        if !streams.speaker_active(speaker) {
            continue;
        }
        let of_speaker: Vec<&PromptCandidate> =
            candidates.iter().filter(|c| c.speaker == speaker).collect();
        if of_speaker.is_empty() {
            return Err(Error::NoCandidate(speaker));
        }
        let idx = rng.gen_range(0..of_speaker.len());
        chosen.push(*of_speaker[idx]);
    }

    let prefix_len: usize = chosen.iter().map(|c| c.len() + config.sep_frames).sum();
    let total = prefix_len + features.n_frames();
    let dim = features.dim();

    let mut out_features = FeatureSequence::zeros(total, dim);
    let mut z1 = vec![scheme.silence_for(0); prefix_len];
    let mut z2 = vec![scheme.silence_for(1); prefix_len];
    let mut prompt_spans: [Option<(usize, usize)>; 2] = [None, None];

    let mut cursor = 0;
    for cand in &chosen {
        let (s, e) = cand.frame_span;
        let len = e - s;
        out_features
            .0
            .slice_mut(ndarray::s![cursor..cursor + len, ..])
            .assign(&features.0.slice(ndarray::s![s..e, ..]));
        let (marker, stream): (Token, &mut Vec<Token>) = match cand.speaker {
            Speaker::Spk1 => (Token::PromptSpk1, &mut z1),
            Speaker::Spk2 => (Token::PromptSpk2, &mut z2),
        };
        for t in &mut stream[cursor..cursor + len] {
            *t = marker;
        }
        prompt_spans[cand.speaker.stream()] = Some((cursor, cursor + len));
        for i in 0..config.sep_frames {
            z1[cursor + len + i] = Token::Sep;
            z2[cursor + len + i] = Token::Sep;
            // separator feature frames stay zero
        }
        cursor += len + config.sep_frames;
    }

    out_features
        .0
        .slice_mut(ndarray::s![prefix_len.., ..])
        .assign(&features.0);
    z1.extend_from_slice(&streams.z1);
    z2.extend_from_slice(&streams.z2);

    let mut loss_mask = vec![false; prefix_len];
    loss_mask.resize(total, true);

    Ok(TrainingExample {
        features: out_features,
        z1,
        z2,
        loss_mask,
        prompt_spans,
        prefix_len,
    })
}

/// Inference-time conditioning prefix built from raw prompt features.
/// Prompts are audio-only; no transcription is required or accepted.
#[derive(Debug, Clone)]
pub struct InferenceContext {
    pub prefix_features: FeatureSequence,
    pub z1_prefix: Vec<Token>,
    pub z2_prefix: Vec<Token>,
    pub prompt_spans: [Option<(usize, usize)>; 2],
}

impl InferenceContext {
    pub fn prefix_len(&self) -> usize {
        self.prefix_features.n_frames()
    }
}

/// Lay out `[prompt1 | sep | prompt2 | sep]`, dropping the block of a
/// missing prompt. A speaker without a prompt is generated unconditioned:
/// the model samples a voice for it.
pub fn build_inference_context(
    prompt1: Option<&FeatureSequence>,
    prompt2: Option<&FeatureSequence>,
    dim: usize,
    scheme: TokenScheme,
    config: &PromptConfig,
) -> Result<InferenceContext> {
    if prompt1.is_none() && prompt2.is_none() {
        return Err(Error::NoPrompt);
    }
    for p in [prompt1, prompt2].into_iter().flatten() {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    let prefix_len: usize = [prompt1, prompt2]
        .into_iter()
        .flatten()
        .map(|p| p.n_frames() + config.sep_frames)
        .sum();
    let mut features = FeatureSequence::zeros(prefix_len, dim);
    let mut z1 = vec![scheme.silence_for(0); prefix_len];
    let mut z2 = vec![scheme.silence_for(1); prefix_len];
    let mut prompt_spans: [Option<(usize, usize)>; 2] = [None, None];

    let mut cursor = 0;
    for (stream_idx, prompt) in [(0usize, prompt1), (1usize, prompt2)] {
        let Some(p) = prompt else { continue };
        let len = p.n_frames();
        features
            .0
            .slice_mut(ndarray::s![cursor..cursor + len, ..])
            .assign(&p.0);
        let (marker, stream) = if stream_idx == 0 {
            (Token::PromptSpk1, &mut z1)
        } else {
            (Token::PromptSpk2, &mut z2)
        };
        for t in &mut stream[cursor..cursor + len] {
            *t = marker;
        }
        prompt_spans[stream_idx] = Some((cursor, cursor + len));
        for i in 0..config.sep_frames {
            z1[cursor + len + i] = Token::Sep;
            z2[cursor + len + i] = Token::Sep;
        }
        cursor += len + config.sep_frames;
    }

    Ok(InferenceContext {
        prefix_features: features,
        z1_prefix: z1,
        z2_prefix: z2,
        prompt_spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::streams::disentangle;
    use crate::transcript::TranscriptSegment;

    fn grid(n: usize) -> FrameGrid {
        FrameGrid::new(0.01, n).unwrap()
    }

    fn cfg(min: usize) -> PromptConfig {
        PromptConfig {
            min_prompt_frames: min,
            ..PromptConfig::default()
        }
    }

    #[test]
    fn candidates_no_overlap_every_long_segment() {
        let t = DialogueTranscript::new(
            vec![
                TranscriptSegment::new(Speaker::Spk1, 0.0, 1.0, "first turn"),
                TranscriptSegment::new(Speaker::Spk2, 1.2, 2.2, "second turn"),
            ],
            2.5,
        )
        .unwrap();
        let cands = find_prompt_candidates(&t, &grid(250), &cfg(50));
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].speaker, Speaker::Spk1);
        assert_eq!(cands[0].frame_span, (0, 100));
        assert_eq!(cands[1].speaker, Speaker::Spk2);
        assert_eq!(cands[1].frame_span, (120, 220));
    }

    #[test]
    fn candidates_fully_overlapped_is_empty() {
        let t = DialogueTranscript::new(
            vec![
                TranscriptSegment::new(Speaker::Spk1, 0.0, 1.0, "ab"),
                TranscriptSegment::new(Speaker::Spk2, 0.0, 1.0, "cd"),
            ],
            1.0,
        )
        .unwrap();
        assert!(find_prompt_candidates(&t, &grid(100), &cfg(10)).is_empty());
    }

    #[test]
    fn candidates_partial_overlap_keeps_solo_region() {
        let t = DialogueTranscript::new(
            vec![
                TranscriptSegment::new(Speaker::Spk1, 0.0, 2.0, "speaker one talks"),
                TranscriptSegment::new(Speaker::Spk2, 1.0, 2.0, "speaker two"),
            ],
            2.0,
        )
        .unwrap();
        let cands = find_prompt_candidates(&t, &grid(200), &cfg(50));
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].speaker, Speaker::Spk1);
        assert_eq!(cands[0].frame_span, (0, 100));
    }

    #[test]
    fn candidates_truncated_to_leading_portion() {
        let t = DialogueTranscript::new(
            vec![TranscriptSegment::new(Speaker::Spk1, 0.0, 5.0, "long monologue")],
            5.0,
        )
        .unwrap();
        let config = PromptConfig {
            min_prompt_frames: 50,
            max_prompt_frames: 120,
            sep_frames: 1,
        };
        let cands = find_prompt_candidates(&t, &grid(500), &config);
        assert_eq!(cands[0].frame_span, (0, 120));
    }

    fn dialogue_fixture() -> (FeatureSequence, SpeakerStreamPair, Vec<PromptCandidate>) {
        let t = DialogueTranscript::new(
            vec![
                TranscriptSegment::new(Speaker::Spk1, 0.0, 1.0, "first"),
                TranscriptSegment::new(Speaker::Spk2, 1.2, 2.2, "second"),
            ],
            2.5,
        )
        .unwrap();
        let g = grid(250);
        let streams = disentangle(&t, &g, TokenScheme::GenericSilence).unwrap();
        let features = FeatureSequence(ndarray::Array2::from_shape_fn((250, 4), |(i, j)| {
            i as f64 + j as f64 * 1000.0
        }));
        let cands = find_prompt_candidates(&t, &g, &cfg(50));
        (features, streams, cands)
    }

    #[test]
    fn assemble_layout_and_mask() {
        let (features, streams, cands) = dialogue_fixture();
        let mut rng = seeded(42);
        let ex = assemble_training_example(
            &features,
            &streams,
            &cands,
            TokenScheme::GenericSilence,
            &cfg(50),
            &mut rng,
        )
        .unwrap();
        // prefix = 100 + 1 + 100 + 1
        assert_eq!(ex.prefix_len, 202);
        assert_eq!(ex.features.n_frames(), 202 + 250);
        assert_eq!(ex.prompt_spans[0], Some((0, 100)));
        assert_eq!(ex.prompt_spans[1], Some((101, 201)));
        // mask false exactly on the prefix
        assert!(ex.loss_mask[..202].iter().all(|m| !*m));
        assert!(ex.loss_mask[202..].iter().all(|m| *m));
        // prompt tokens over spans, separators in both streams
        assert!(ex.z1[..100].iter().all(|t| *t == Token::PromptSpk1));
        assert!(ex.z2[..100].iter().all(|t| *t == Token::Silence));
        assert_eq!(ex.z1[100], Token::Sep);
        assert_eq!(ex.z2[100], Token::Sep);
        assert!(ex.z2[101..201].iter().all(|t| *t == Token::PromptSpk2));
        assert_eq!(ex.z1[201], Token::Sep);
        // prompt features copied verbatim
        let span = ex.prompt_spans[0].unwrap();
        for f in span.0..span.1 {
            for d in 0..4 {
                assert_eq!(ex.features.0[[f, d]], features.0[[f - span.0, d]]);
            }
        }
        // body unchanged
        for d in 0..4 {
            assert_eq!(ex.features.0[[202, d]], features.0[[0, d]]);
        }
        // separator feature frames are zero
        assert!(ex.features.0.row(100).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn assemble_monologue_single_prompt() {
        let t = DialogueTranscript::new(
            vec![TranscriptSegment::new(Speaker::Spk1, 0.0, 1.0, "only one")],
            1.2,
        )
        .unwrap();
        let g = grid(120);
        let streams = disentangle(&t, &g, TokenScheme::GenericSilence).unwrap();
        let features = FeatureSequence::zeros(120, 4);
        let cands = find_prompt_candidates(&t, &g, &cfg(50));
        let mut rng = seeded(0);
        let ex = assemble_training_example(
            &features,
            &streams,
            &cands,
            TokenScheme::GenericSilence,
            &cfg(50),
            &mut rng,
        )
        .unwrap();
        assert_eq!(ex.prefix_len, 101);
        assert_eq!(ex.prompt_spans[0], Some((0, 100)));
        assert_eq!(ex.prompt_spans[1], None);
        assert!(ex.z2[..100].iter().all(|t| *t == Token::Silence));
        assert_eq!(ex.z2[100], Token::Sep);
    }

    #[test]
    fn assemble_missing_candidate_errors() {
        let (features, streams, cands) = dialogue_fixture();
        let only_spk1: Vec<PromptCandidate> = cands
            .into_iter()
            .filter(|c| c.speaker == Speaker::Spk1)
            .collect();
        let mut rng = seeded(0);
        let err = assemble_training_example(
            &features,
            &streams,
            &only_spk1,
            TokenScheme::GenericSilence,
            &cfg(50),
            &mut rng,
        );
        assert!(matches!(err, Err(Error::NoCandidate(Speaker::Spk2))));
    }

    #[test]
    fn assemble_selection_is_seeded_and_pinned() {
        // three artificial candidates for one speaker; the choice under
        // seed 42 is a frozen regression value
        let t = DialogueTranscript::new(
            vec![
                TranscriptSegment::new(Speaker::Spk1, 0.0, 0.6, "one"),
                TranscriptSegment::new(Speaker::Spk1, 0.8, 1.6, "two"),
                TranscriptSegment::new(Speaker::Spk1, 1.8, 2.8, "three"),
            ],
            3.0,
        )
        .unwrap();
        let g = grid(300);
        let streams = disentangle(&t, &g, TokenScheme::GenericSilence).unwrap();
        let features = FeatureSequence::zeros(300, 4);
        let cands = find_prompt_candidates(&t, &g, &cfg(50));
        let lens: Vec<usize> = cands.iter().map(|c| c.len()).collect();
        assert_eq!(lens, vec![60, 80, 100]);

        let pick = |seed: u64| {
            let mut rng = seeded(seed);
            assemble_training_example(
                &features,
                &streams,
                &cands,
                TokenScheme::GenericSilence,
                &cfg(50),
                &mut rng,
            )
            .unwrap()
            .prompt_spans[0]
                .unwrap()
        };
        let first = pick(42);
        for _ in 0..3 {
            assert_eq!(pick(42), first, "same seed, same selection");
        }
        // frozen regression value (rand_chacha 0.3, seed 42): the third
        // candidate, 100 frames long
        assert_eq!(first, (0, 100));
    }

    #[test]
    fn inference_context_two_prompts() {
        let p1 = FeatureSequence::zeros(100, 4);
        let p2 = FeatureSequence::zeros(100, 4);
        let ctx = build_inference_context(
            Some(&p1),
            Some(&p2),
            4,
            TokenScheme::GenericSilence,
            &PromptConfig::default(),
        )
        .unwrap();
        assert_eq!(ctx.prefix_len(), 202);
        assert_eq!(ctx.prompt_spans[0], Some((0, 100)));
        assert_eq!(ctx.prompt_spans[1], Some((101, 201)));
        assert_eq!(ctx.z1_prefix[0], Token::PromptSpk1);
        assert_eq!(ctx.z2_prefix[150], Token::PromptSpk2);
        assert_eq!(ctx.z1_prefix[201], Token::Sep);
    }

    #[test]
    fn inference_context_single_prompt() {
        let p1 = FeatureSequence::zeros(80, 4);
        let ctx = build_inference_context(
            Some(&p1),
            None,
            4,
            TokenScheme::GenericSilence,
            &PromptConfig::default(),
        )
        .unwrap();
        assert_eq!(ctx.prefix_len(), 81);
        assert_eq!(ctx.prompt_spans[1], None);
    }

    #[test]
    fn inference_context_errors() {
        assert!(matches!(
            build_inference_context(None, None, 4, TokenScheme::GenericSilence, &PromptConfig::default()),
            Err(Error::NoPrompt)
        ));
        let bad = FeatureSequence::zeros(10, 3);
        assert!(matches!(
            build_inference_context(Some(&bad), None, 4, TokenScheme::GenericSilence, &PromptConfig::default()),
            Err(Error::DimensionMismatch { expected: 4, got: 3 })
        ));
    }
}
