//! Two-stream frame-aligned transcript encoding and its inverse.
//!
//! A dialogue transcript is disentangled into two parallel token streams,
//! one per speaker. Within each active segment the characters are placed
//! contiguously from the segment's first frame, one character per frame,
//! and the remainder of the segment is filled with the continuation token;
//! frames outside any segment hold silence. Cross-speaker overlap shows up
//! as simultaneous non-silence in both streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{Token, TokenScheme};
use crate::transcript::{DialogueTranscript, FrameGrid, Speaker, TranscriptSegment};

/// Default floor on an estimated utterance duration, in seconds.
pub const DEFAULT_MIN_UTTERANCE_S: f64 = 0.3;
/// Default silence appended after the last utterance at inference.
pub const DEFAULT_TRAILING_SILENCE_S: f64 = 0.5;
/// Default speaking rate in syllables per second.
pub const DEFAULT_SPEAKING_RATE: f64 = 5.0;

/// Two frame-synchronous token streams over a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStreamPair {
    pub z1: Vec<Token>,
    pub z2: Vec<Token>,
    pub grid: FrameGrid,
}

impl SpeakerStreamPair {
    pub fn all_silence(grid: FrameGrid, scheme: TokenScheme) -> Self {
        Self {
            z1: vec![scheme.silence_for(0); grid.n_frames],
            z2: vec![scheme.silence_for(1); grid.n_frames],
            grid,
        }
    }

    pub fn stream(&self, idx: usize) -> &[Token] {
        match idx {
            0 => &self.z1,
            _ => &self.z2,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.z1.len()
    }

    /// Frames where both streams carry active speech.
    pub fn overlap_frames(&self) -> usize {
        self.z1
            .iter()
            .zip(&self.z2)
            .filter(|(a, b)| a.is_active() && b.is_active())
            .count()
    }

    /// Does either stream carry active speech for this speaker?
    pub fn speaker_active(&self, speaker: Speaker) -> bool {
        self.stream(speaker.stream()).iter().any(|t| t.is_active())
    }

    /// Debug serialization: two JSON arrays of token names.
    pub fn to_debug_json(&self) -> String {
        let names = |z: &[Token]| -> Vec<String> { z.iter().map(|t| t.name()).collect() };
        serde_json::json!({
            "hop_s": self.grid.hop_s,
            "z1": names(&self.z1),
            "z2": names(&self.z2),
        })
        .to_string()
    }
}

/// Tokens for one segment over its quantized frame span: the characters,
/// left-aligned one per frame, then continuation padding.
pub fn render_segment_tokens(segment: &TranscriptSegment, grid: &FrameGrid) -> Result<Vec<Token>> {
    let (start, end) = grid.span(segment.start_s, segment.end_s);
    let span = end - start;
    let chars: Vec<char> = segment.text.chars().collect();
    if chars.len() > span {
        return Err(Error::SegmentTooDense {
            text: segment.text.clone(),
            chars: chars.len(),
            frames: span,
        });
    }
    let mut out = Vec::with_capacity(span);
    for &c in &chars {
        // validate against the vocabulary up front
        Token::Char(c).id()?;
        out.push(Token::Char(c));
    }
    out.resize(span, Token::Pad);
    Ok(out)
}

/// Convert a transcript to the two-stream representation.
pub fn disentangle(
    transcript: &DialogueTranscript,
    grid: &FrameGrid,
    scheme: TokenScheme,
) -> Result<SpeakerStreamPair> {
    transcript.validate()?;
    if (grid.n_frames as f64) * grid.hop_s < transcript.total_duration_s - 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "grid of {} frames at hop {} covers {:.4} s < transcript duration {:.4} s",
            grid.n_frames,
            grid.hop_s,
            grid.duration_s(),
            transcript.total_duration_s
        )));
    }
    let mut streams = SpeakerStreamPair::all_silence(*grid, scheme);
    let mut last_end = [0usize; 2];
    for seg in &transcript.segments {
        let (start, end) = grid.span(seg.start_s, seg.end_s);
        let s = seg.speaker.stream();
        // same-speaker spans may touch after quantization, but never overlap
        if start < last_end[s] {
            return Err(Error::SameSpeakerOverlap {
                speaker: seg.speaker,
                at_s: seg.start_s,
            });
        }
        last_end[s] = end;
        let tokens = render_segment_tokens(seg, grid)?;
        let stream = if s == 0 { &mut streams.z1 } else { &mut streams.z2 };
        stream[start..end].copy_from_slice(&tokens);
    }
    Ok(streams)
}

/// Inverse of [`disentangle`]: maximal runs of active tokens become
/// segments, with boundaries at run edges times the hop.
///
/// Characters are concatenated in frame order; continuation tokens
/// contribute none. Runs containing no character at all (which
/// [`disentangle`] never produces) are skipped. Two same-speaker segments
/// whose quantized spans touch reconstruct as a single merged segment, so
/// the round trip is exact only for transcripts whose same-speaker
/// segments are at least one frame apart.
pub fn reconstruct_transcript(streams: &SpeakerStreamPair) -> DialogueTranscript {
    let hop = streams.grid.hop_s;
    let mut segments = Vec::new();
    for (idx, speaker) in [(0, Speaker::Spk1), (1, Speaker::Spk2)] {
        let z = streams.stream(idx);
        let mut f = 0;
        while f < z.len() {
            if z[f].is_active() {
                let start = f;
                let mut text = String::new();
                while f < z.len() && z[f].is_active() {
                    if let Token::Char(c) = z[f] {
                        text.push(c);
                    }
                    f += 1;
                }
                if !text.is_empty() {
                    segments.push(TranscriptSegment::new(
                        speaker,
                        start as f64 * hop,
                        f as f64 * hop,
                        text,
                    ));
                }
            } else {
                f += 1;
            }
        }
    }
    segments.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.speaker.cmp(&b.speaker))
    });
    DialogueTranscript {
        segments,
        total_duration_s: streams.grid.duration_s(),
    }
}

/// Syllable count of a text: per whitespace-separated word, the number of
/// maximal vowel groups (a, e, i, o, u, y; case-insensitive), with a
/// minimum of one per word.
pub fn syllable_count(text: &str) -> usize {
    text.split_whitespace()
        .map(|word| {
            let mut groups = 0;
            let mut in_group = false;
            for c in word.chars() {
                let vowel = matches!(
                    c.to_ascii_lowercase(),
                    'a' | 'e' | 'i' | 'o' | 'u' | 'y'
                );
                if vowel && !in_group {
                    groups += 1;
                }
                in_group = vowel;
            }
            groups.max(1)
        })
        .sum()
}

/// Estimated utterance duration from syllable count and speaking rate,
/// floored at [`DEFAULT_MIN_UTTERANCE_S`].
pub fn estimate_duration(text: &str, speaking_rate: f64) -> Result<f64> {
    estimate_duration_floored(text, speaking_rate, DEFAULT_MIN_UTTERANCE_S)
}

pub fn estimate_duration_floored(text: &str, speaking_rate: f64, floor_s: f64) -> Result<f64> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    if speaking_rate <= 0.0 {
        return Err(Error::NonPositive(format!("speaking rate {speaking_rate}")));
    }
    Ok((syllable_count(text) as f64 / speaking_rate).max(floor_s))
}

/// One turn of an inference script. Timing fields override the policy's
/// sequential placement when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl ScriptTurn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
            start_s: None,
            duration_s: None,
        }
    }
}

/// Timing defaults for building inference streams from a raw script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingPolicy {
    /// Syllables per second for duration estimation.
    pub speaking_rate: f64,
    /// Gap between consecutive turns; negative values produce overlap.
    pub gap_s: f64,
    /// Floor on estimated durations.
    pub min_utterance_s: f64,
    /// Silence appended after the final turn.
    pub trailing_silence_s: f64,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        Self {
            speaking_rate: DEFAULT_SPEAKING_RATE,
            gap_s: 0.1,
            min_utterance_s: DEFAULT_MIN_UTTERANCE_S,
            trailing_silence_s: DEFAULT_TRAILING_SILENCE_S,
        }
    }
}

/// Assign timing to a raw script and encode it as speaker streams.
///
/// Default placement is sequential with `gap_s` between turns; explicit
/// start/duration overrides are honored exactly.
pub fn build_inference_streams(
    script: &[ScriptTurn],
    timing: &TimingPolicy,
    hop_s: f64,
    scheme: TokenScheme,
) -> Result<(SpeakerStreamPair, DialogueTranscript)> {
    if script.is_empty() {
        return Err(Error::InvalidConfig("inference script is empty".into()));
    }
    let mut segments = Vec::with_capacity(script.len());
    let mut prev_end = 0.0f64;
    for (i, turn) in script.iter().enumerate() {
        let duration = match turn.duration_s {
            Some(d) if d > 0.0 => d,
            Some(d) => return Err(Error::NonPositive(format!("duration override {d}"))),
            None => estimate_duration_floored(&turn.text, timing.speaking_rate, timing.min_utterance_s)?,
        };
        let start = match turn.start_s {
            Some(s) => s,
            None if i == 0 => 0.0,
            None => prev_end + timing.gap_s,
        };
        if start < 0.0 {
            return Err(Error::NegativeTime(start));
        }
        prev_end = start + duration;
        segments.push(TranscriptSegment::new(
            turn.speaker,
            start,
            start + duration,
            turn.text.clone(),
        ));
    }
    let total = segments
        .iter()
        .map(|s| s.end_s)
        .fold(0.0f64, f64::max)
        + timing.trailing_silence_s;
    let transcript = DialogueTranscript::new(segments, total)?;
    let grid = FrameGrid::covering(hop_s, total)?;
    let streams = disentangle(&transcript, &grid, scheme)?;
    Ok((streams, transcript))
}
