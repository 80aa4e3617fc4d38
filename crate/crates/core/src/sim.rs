//! Dialogue simulation and clip segmentation.
//!
//! Simulated dialogues pair utterances from two synthetic speakers and
//! place each turn with either a controlled overlap ratio or a silence
//! gap. Long dialogues are segmented into shorter clips, cutting only
//! where no segment is active.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, ChaCha8Rng};
use crate::transcript::{DialogueTranscript, Speaker, TranscriptSegment};

/// One utterance available to the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolUtterance {
    pub timbre: usize,
    pub text: String,
    pub duration_s: f64,
}

/// Recipe for one simulated dialogue. Exactly one regime applies:
/// either turns overlap by `overlap_ratio` of the shorter turn, or they
/// are separated by `silence_gap_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub overlap_ratio: f64,
    pub silence_gap_s: f64,
    pub pool: Vec<PoolUtterance>,
    pub seed: u64,
    pub n_turns: usize,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::InvalidSpec(format!(
                "overlap_ratio {} not in [0, 1]",
                self.overlap_ratio
            )));
        }
        if self.silence_gap_s < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "silence_gap_s {} < 0",
                self.silence_gap_s
            )));
        }
        if self.overlap_ratio > 0.0 && self.silence_gap_s > 0.0 {
            return Err(Error::InvalidSpec(
                "overlap_ratio and silence_gap_s cannot both be nonzero".into(),
            ));
        }
        if self.n_turns < 2 {
            return Err(Error::InvalidSpec("a dialogue needs at least 2 turns".into()));
        }
        let mut timbres: Vec<usize> = self.pool.iter().map(|u| u.timbre).collect();
        timbres.sort_unstable();
        timbres.dedup();
        if timbres.len() < 2 {
            return Err(Error::InvalidSpec(
                "utterance pool must cover at least two synthetic speakers".into(),
            ));
        }
        Ok(())
    }

    fn distinct_timbres(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.pool.iter().map(|u| u.timbre).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

fn pick_utterance<'a>(
    pool: &'a [PoolUtterance],
    timbre: usize,
    rng: &mut ChaCha8Rng,
) -> &'a PoolUtterance {
    let of_timbre: Vec<&PoolUtterance> = pool.iter().filter(|u| u.timbre == timbre).collect();
    of_timbre[rng.gen_range(0..of_timbre.len())]
}

/// Simulate one two-speaker dialogue: pick two distinct timbres, alternate
/// turns between them, and place each turn after the first at
/// `previous_end - overlap_ratio * min(previous, current duration)` in the
/// overlap regime or `previous_end + silence_gap_s` in the gap regime.
///
/// Returns the transcript and the (speaker 1, speaker 2) timbre ids. High
/// overlap with more than two turns can make a speaker overlap itself;
/// that is reported as an invalid spec rather than silently clamped.
pub fn simulate_dialogue(spec: &SimulationSpec) -> Result<(DialogueTranscript, (usize, usize))> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let timbres = spec.distinct_timbres();
    let first = rng.gen_range(0..timbres.len());
    let second = {
        let mut idx = rng.gen_range(0..timbres.len() - 1);
        if idx >= first {
            idx += 1;
        }
        idx
    };
    let pair = (timbres[first], timbres[second]);

    let mut segments: Vec<TranscriptSegment> = Vec::with_capacity(spec.n_turns);
    let mut prev_end = 0.0f64;
    let mut prev_dur = 0.0f64;
    for turn in 0..spec.n_turns {
        let (speaker, timbre) = if turn % 2 == 0 {
            (Speaker::Spk1, pair.0)
        } else {
            (Speaker::Spk2, pair.1)
        };
        let utt = pick_utterance(&spec.pool, timbre, &mut rng);
        let start = if turn == 0 {
            0.0
        } else if spec.overlap_ratio > 0.0 {
            prev_end - spec.overlap_ratio * prev_dur.min(utt.duration_s)
        } else {
            prev_end + spec.silence_gap_s
        };
        segments.push(TranscriptSegment::new(
            speaker,
            start,
            start + utt.duration_s,
            utt.text.clone(),
        ));
        prev_end = start + utt.duration_s;
        prev_dur = utt.duration_s;
    }
    let total = segments.iter().map(|s| s.end_s).fold(0.0f64, f64::max);
    let transcript = DialogueTranscript::new(segments, total).map_err(|e| match e {
        Error::SameSpeakerOverlap { speaker, at_s } => Error::InvalidSpec(format!(
            "overlap ratio {} makes {speaker:?} overlap itself at {at_s:.2} s; use 2 turns for high overlap",
            spec.overlap_ratio
        )),
        other => other,
    })?;
    Ok((transcript, pair))
}

/// Maximal activity blocks: unions of strictly overlapping segments.
/// Touching segments stay in separate blocks, so a cut is allowed exactly
/// at their shared boundary.
fn activity_blocks(transcript: &DialogueTranscript) -> Vec<(f64, f64, Vec<usize>)> {
    let mut blocks: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    for (i, seg) in transcript.segments.iter().enumerate() {
        match blocks.last_mut() {
            Some((_, end, members)) if seg.start_s < *end - 1e-9 => {
                *end = end.max(seg.end_s);
                members.push(i);
            }
            _ => blocks.push((seg.start_s, seg.end_s, vec![i])),
        }
    }
    blocks
}

/// Cut a dialogue into clips of at most `max_clip_s`, cutting only where
/// no segment is active. Greedy: each clip takes as many whole activity
/// blocks as fit; a single block longer than the limit becomes its own
/// clip. Clip timestamps are rebased so each clip starts at zero.
pub fn segment_dialogue(
    transcript: &DialogueTranscript,
    max_clip_s: f64,
) -> Result<Vec<DialogueTranscript>> {
    if max_clip_s <= 0.0 {
        return Err(Error::NonPositive(format!("max_clip_s {max_clip_s}")));
    }
    transcript.validate()?;
    let blocks = activity_blocks(transcript);
    let mut clips = Vec::new();
    let mut i = 0;
    while i < blocks.len() {
        let clip_start = blocks[i].0;
        let mut j = i;
        while j + 1 < blocks.len() && blocks[j + 1].1 - clip_start <= max_clip_s + 1e-9 {
            j += 1;
        }
        // a lone block may exceed the limit; it still becomes one clip
        let clip_end = blocks[j].1;
        let mut segments = Vec::new();
        for b in &blocks[i..=j] {
            for &m in &b.2 {
                let seg = &transcript.segments[m];
                segments.push(TranscriptSegment::new(
                    seg.speaker,
                    seg.start_s - clip_start,
                    seg.end_s - clip_start,
                    seg.text.clone(),
                ));
            }
        }
        clips.push(DialogueTranscript::new(segments, clip_end - clip_start)?);
        i = j + 1;
    }
    Ok(clips)
}
