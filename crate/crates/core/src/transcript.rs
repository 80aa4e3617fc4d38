//! Timed, speaker-labeled dialogue transcripts and the frame grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paper-scale frame hop in seconds (one feature frame every 10.7 ms).
pub const DEFAULT_HOP_S: f64 = 0.0107;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Spk1,
    Spk2,
}

impl Speaker {
    pub const BOTH: [Speaker; 2] = [Speaker::Spk1, Speaker::Spk2];

    /// Stream index: speaker 1 owns stream 0, speaker 2 owns stream 1.
    pub fn stream(self) -> usize {
        match self {
            Speaker::Spk1 => 0,
            Speaker::Spk2 => 1,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Spk1 => Speaker::Spk2,
            Speaker::Spk2 => Speaker::Spk1,
        }
    }
}

/// One utterance: who said what, and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub speaker: Speaker,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl TranscriptSegment {
    pub fn new(speaker: Speaker, start_s: f64, end_s: f64, text: impl Into<String>) -> Self {
        Self {
            speaker,
            start_s,
            end_s,
            text: text.into(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    fn validate(&self) -> Result<()> {
        if !(self.end_s > self.start_s) {
            return Err(Error::InvalidTranscript(format!(
                "segment \"{}\" has end {} <= start {}",
                self.text, self.end_s, self.start_s
            )));
        }
        if self.start_s < 0.0 {
            return Err(Error::NegativeTime(self.start_s));
        }
        if self.text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(())
    }
}

/// An ordered list of segments covering a dialogue.
///
/// Segments are sorted by start time. Segments of the *same* speaker must
/// not overlap; cross-speaker overlap is allowed and expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub segments: Vec<TranscriptSegment>,
    #[serde(rename = "duration_s")]
    pub total_duration_s: f64,
}

impl DialogueTranscript {
    pub fn new(mut segments: Vec<TranscriptSegment>, total_duration_s: f64) -> Result<Self> {
        segments.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.speaker.cmp(&b.speaker))
        });
        let t = Self {
            segments,
            total_duration_s,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn empty(total_duration_s: f64) -> Self {
        Self {
            segments: Vec::new(),
            total_duration_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_duration_s < 0.0 {
            return Err(Error::InvalidTranscript(format!(
                "negative total duration {}",
                self.total_duration_s
            )));
        }
        let mut last_end = [f64::NEG_INFINITY; 2];
        let mut last_start = f64::NEG_INFINITY;
        for seg in &self.segments {
            seg.validate()?;
            if seg.start_s < last_start {
                return Err(Error::InvalidTranscript(
                    "segments are not sorted by start time".into(),
                ));
            }
            last_start = seg.start_s;
            let s = seg.speaker.stream();
            // strict overlap only; touching segments are legal
            if seg.start_s < last_end[s] - 1e-9 {
                return Err(Error::SameSpeakerOverlap {
                    speaker: seg.speaker,
                    at_s: seg.start_s,
                });
            }
            last_end[s] = last_end[s].max(seg.end_s);
            if seg.end_s > self.total_duration_s + 1e-9 {
                return Err(Error::InvalidTranscript(format!(
                    "segment \"{}\" ends at {} beyond total duration {}",
                    seg.text, seg.end_s, self.total_duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn segments_of(&self, speaker: Speaker) -> impl Iterator<Item = &TranscriptSegment> {
        self.segments.iter().filter(move |s| s.speaker == speaker)
    }

    pub fn speakers_present(&self) -> Vec<Speaker> {
        Speaker::BOTH
            .into_iter()
            .filter(|&sp| self.segments_of(sp).next().is_some())
            .collect()
    }

    /// Total cross-speaker overlap duration in seconds.
    pub fn overlap_duration_s(&self) -> f64 {
        let mut total = 0.0;
        for (i, a) in self.segments.iter().enumerate() {
            for b in &self.segments[i + 1..] {
                if b.speaker != a.speaker {
                    let lo = a.start_s.max(b.start_s);
                    let hi = a.end_s.min(b.end_s);
                    if hi > lo {
                        total += hi - lo;
                    }
                }
            }
        }
        total
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: DialogueTranscript = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

/// Uniform frame grid; frame `f` covers `[f*hop_s, (f+1)*hop_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub hop_s: f64,
    pub n_frames: usize,
}

impl FrameGrid {
    pub fn new(hop_s: f64, n_frames: usize) -> Result<Self> {
        if hop_s <= 0.0 {
            return Err(Error::InvalidConfig(format!("hop_s must be > 0, got {hop_s}")));
        }
        if n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be >= 1".into()));
        }
        Ok(Self { hop_s, n_frames })
    }

    /// Smallest grid at `hop_s` covering `duration_s`.
    pub fn covering(hop_s: f64, duration_s: f64) -> Result<Self> {
        Self::new(hop_s, frame_ceil(duration_s, hop_s).max(1))
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 * self.hop_s
    }

    /// Quantized frame span of a time interval: floor for the start,
    /// ceil for the end, so no active audio is clipped.
    pub fn span(&self, start_s: f64, end_s: f64) -> (usize, usize) {
        let s = frame_floor(start_s, self.hop_s).min(self.n_frames);
        let e = frame_ceil(end_s, self.hop_s).min(self.n_frames);
        (s, e.max(s))
    }
}

// Quantization guards: a hop count within 1e-6 of an integer is treated as
// that integer, so exact multiples of the hop survive fp division noise.
const FRAME_EPS: f64 = 1e-6;

pub fn frame_floor(t_s: f64, hop_s: f64) -> usize {
    let x = t_s / hop_s;
    (x + FRAME_EPS).floor().max(0.0) as usize
}

pub fn frame_ceil(t_s: f64, hop_s: f64) -> usize {
    let x = t_s / hop_s;
    (x - FRAME_EPS).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(sp: Speaker, a: f64, b: f64, text: &str) -> TranscriptSegment {
        TranscriptSegment::new(sp, a, b, text)
    }

    #[test]
    fn quantization_is_robust_to_fp_noise() {
        // 1.07 / 0.0107 is exactly 100 mathematically but not in binary fp.
        assert_eq!(frame_ceil(1.07, 0.0107), 100);
        assert_eq!(frame_floor(1.07, 0.0107), 100);
        assert_eq!(frame_floor(0.0, 0.0107), 0);
        assert_eq!(frame_ceil(0.001, 0.0107), 1);
        assert_eq!(frame_floor(0.001, 0.0107), 0);
    }

    #[test]
    fn same_speaker_overlap_rejected() {
        let err = DialogueTranscript::new(
            vec![seg(Speaker::Spk1, 0.0, 1.0, "ab"), seg(Speaker::Spk1, 0.5, 1.5, "cd")],
            2.0,
        );
        assert!(matches!(err, Err(Error::SameSpeakerOverlap { .. })));
    }

    #[test]
    fn cross_speaker_overlap_allowed() {
        let t = DialogueTranscript::new(
            vec![seg(Speaker::Spk1, 0.0, 1.0, "ab"), seg(Speaker::Spk2, 0.5, 1.5, "cd")],
            2.0,
        )
        .unwrap();
        assert!((t.overlap_duration_s() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn segment_invariants() {
        assert!(DialogueTranscript::new(vec![seg(Speaker::Spk1, 1.0, 1.0, "x")], 2.0).is_err());
        assert!(matches!(
            DialogueTranscript::new(vec![seg(Speaker::Spk1, 0.0, 1.0, "  ")], 2.0),
            Err(Error::EmptyText)
        ));
        assert!(DialogueTranscript::new(vec![seg(Speaker::Spk1, 0.0, 3.0, "x")], 2.0).is_err());
    }

    #[test]
    fn json_round_trip_uses_spec_names() {
        let t = DialogueTranscript::new(
            vec![seg(Speaker::Spk2, 0.0, 1.0, "hi there")],
            1.5,
        )
        .unwrap();
        let js = t.to_json().unwrap();
        assert!(js.contains("\"duration_s\""));
        assert!(js.contains("\"spk2\""));
        assert_eq!(DialogueTranscript::from_json(&js).unwrap(), t);
    }
}
