//! Bar-aligned music segmentation.
//!
//! An onset-strength envelope (half-wave rectified spectral flux over a Hann
//! windowed STFT) is searched for local maxima; the strongest peaks, kept at
//! least half a bar apart, become segment boundaries so that the mean segment
//! lasts roughly one bar of `4 · 60 / bpm` seconds.

use std::io::{Read, Seek, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MusicError {
    #[error("bpm must be positive, got {0}")]
    Bpm(f64),
    #[error("duration must be positive, got {0}")]
    Duration(f64),
    #[error("need frame_len >= hop >= 1, got frame_len={frame_len}, hop={hop}")]
    Framing { frame_len: usize, hop: usize },
    #[error("audio has {samples} samples, shorter than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("empty onset envelope")]
    EmptyEnvelope,
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("unsupported WAV format: {0}")]
    Format(String),
    #[error("cannot read WAV: {0}")]
    Wav(#[from] hound::Error),
}

/// Mono samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads 16-bit PCM; multi-channel input is averaged to mono.
    pub fn read_wav<R: Read>(reader: R) -> Result<Self, MusicError> {
        let mut wav = hound::WavReader::new(reader)?;
        let spec = wav.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(MusicError::Format(format!(
                "{:?} {}-bit (expected 16-bit PCM)",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        if spec.sample_rate == 0 {
            return Err(MusicError::SampleRate);
        }
        let channels = spec.channels.max(1) as usize;
        let raw: Vec<i16> = wav.samples::<i16>().collect::<Result<_, _>>()?;
        let samples = raw
            .chunks(channels)
            .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / frame.len() as f64)
            .collect();
        Ok(Self { samples, sample_rate: spec.sample_rate })
    }

    pub fn open_wav(path: impl AsRef<Path>) -> Result<Self, MusicError> {
        let file = std::fs::File::open(path).map_err(hound::Error::IoError)?;
        Self::read_wav(std::io::BufReader::new(file))
    }

    /// Writes 16-bit mono PCM, clipping to `[-1, 1]`.
    pub fn write_wav<W: Write + Seek>(&self, writer: W) -> Result<(), MusicError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(writer, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

/// Metronome track with single-sample clicks on every beat; the first beat of
/// each bar has amplitude `1.0` and the others `0.5`. The first click sits at
/// `t = 0`.
pub fn click_track(duration: f64, sample_rate: u32, bpm: f64) -> AudioBuffer {
    let n = (duration * sample_rate as f64).round() as usize;
    let mut samples = vec![0.0; n];
    let beat = 60.0 / bpm;
    let mut k = 0usize;
    loop {
        let idx = (k as f64 * beat * sample_rate as f64).round() as usize;
        if idx >= n {
            break;
        }
        samples[idx] = if k.is_multiple_of(4) { 1.0 } else { 0.5 };
        k += 1;
    }
    AudioBuffer { samples, sample_rate }
}

/// `4 · 60 / bpm` seconds.
pub fn bar_duration(bpm: f64) -> Result<f64, MusicError> {
    if !(bpm > 0.0) || !bpm.is_finite() {
        return Err(MusicError::Bpm(bpm));
    }
    Ok(4.0 * 60.0 / bpm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetEnvelope {
    pub values: Vec<f64>,
    pub hop_seconds: f64,
    /// Time of bin 0; [`onset_strength`] labels each bin by its frame centre.
    #[serde(default)]
    pub offset_seconds: f64,
}

impl OnsetEnvelope {
    pub fn time_of(&self, bin: usize) -> f64 {
        self.offset_seconds + bin as f64 * self.hop_seconds
    }
}

/// Spectral flux `Σ_bins max(0, |X_k| - |X_{k-1}|)` per frame, `0` for the
/// first frame. Frames start at multiples of `hop`; bin times are frame
/// centres.
pub fn onset_strength(audio: &AudioBuffer, frame_len: usize, hop: usize) -> Result<OnsetEnvelope, MusicError> {
    if hop == 0 || frame_len < hop {
        return Err(MusicError::Framing { frame_len, hop });
    }
    if audio.sample_rate == 0 {
        return Err(MusicError::SampleRate);
    }
    if audio.samples.len() < frame_len {
        return Err(MusicError::TooShort { samples: audio.samples.len(), frame_len });
    }
    let frames = 1 + (audio.samples.len() - frame_len) / hop;
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let bins = frame_len / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut prev = vec![0.0; bins];
    let mut cur = vec![0.0; bins];
    let mut values = Vec::with_capacity(frames);
    for k in 0..frames {
        let chunk = &audio.samples[k * hop..k * hop + frame_len];
        for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in cur.iter_mut().zip(&buf[..bins]) {
            *m = c.norm();
        }
        let flux = if k == 0 {
            0.0
        } else {
            cur.iter().zip(&prev).map(|(a, b)| (a - b).max(0.0)).sum()
        };
        values.push(flux);
        std::mem::swap(&mut prev, &mut cur);
    }
    let sr = audio.sample_rate as f64;
    Ok(OnsetEnvelope {
        values,
        hop_seconds: hop as f64 / sr,
        offset_seconds: (frame_len / 2) as f64 / sr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Peak {
    pub index: usize,
    pub strength: f64,
}

/// Interior peaks (`env[i] > env[i-1]` and `env[i] >= env[i+1]`), greedily
/// kept strongest-first (earlier index on ties) so that kept indices are at
/// least `min_gap` apart. Returned in selection order.
pub fn local_maxima(env: &[f64], min_gap: usize) -> Vec<Peak> {
    let candidates: Vec<Peak> = (1..env.len().saturating_sub(1))
        .filter(|&i| env[i] > env[i - 1] && env[i] >= env[i + 1])
        .map(|i| Peak { index: i, strength: env[i] })
        .collect();
    select_spaced(candidates, min_gap.max(1), usize::MAX)
}

fn select_spaced(mut candidates: Vec<Peak>, min_gap: usize, limit: usize) -> Vec<Peak> {
    candidates.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.index.cmp(&b.index)));
    let mut kept: Vec<Peak> = Vec::new();
    for c in candidates {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|k| k.index.abs_diff(c.index) >= min_gap) {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationSettings {
    pub frame_len: usize,
    pub hop: usize,
    /// Accepted relative deviation of the mean segment from one bar.
    pub bar_tolerance: f64,
}

impl Default for SegmentationSettings {
    fn default() -> Self {
        Self { frame_len: 1024, hop: 256, bar_tolerance: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub bpm: f64,
    pub duration: f64,
    /// Interior boundaries in seconds, strictly ascending.
    pub boundaries: Vec<f64>,
    pub segments: Vec<[f64; 2]>,
}

impl SegmentPlan {
    fn from_boundaries(bpm: f64, duration: f64, boundaries: Vec<f64>) -> Self {
        let mut edges = Vec::with_capacity(boundaries.len() + 2);
        edges.push(0.0);
        edges.extend(&boundaries);
        edges.push(duration);
        let segments = edges.windows(2).map(|w| [w[0], w[1]]).collect();
        Self { bpm, duration, boundaries, segments }
    }

    pub fn mean_segment(&self) -> f64 {
        self.duration / self.segments.len() as f64
    }

    /// Whether the mean segment is within `tolerance` (relative) of one bar.
    pub fn meets_bar_target(&self, tolerance: f64) -> bool {
        let bar = 240.0 / self.bpm;
        (self.mean_segment() - bar).abs() <= tolerance * bar
    }
}

/// Number of interior boundaries aimed for: `max(0, round(duration / bar) - 1)`.
pub fn target_boundary_count(duration: f64, bpm: f64) -> Result<usize, MusicError> {
    let bar = bar_duration(bpm)?;
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(MusicError::Duration(duration));
    }
    Ok(((duration / bar).round() as usize).saturating_sub(1))
}

/// Picks bar-spaced boundaries on envelope peaks.
pub fn segment_music(env: &OnsetEnvelope, bpm: f64, duration: f64) -> Result<SegmentPlan, MusicError> {
    if env.values.is_empty() {
        return Err(MusicError::EmptyEnvelope);
    }
    let k = target_boundary_count(duration, bpm)?;
    let bar = bar_duration(bpm)?;
    let min_gap = ((bar / 2.0) / env.hop_seconds).round().max(1.0) as usize;
    let v = &env.values;
    let candidates: Vec<Peak> = (1..v.len().saturating_sub(1))
        .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1])
        .filter(|&i| {
            let t = env.time_of(i);
            t > 0.0 && t < duration
        })
        .map(|i| Peak { index: i, strength: v[i] })
        .collect();
    let mut chosen: Vec<usize> = select_spaced(candidates, min_gap, k).into_iter().map(|p| p.index).collect();
    chosen.sort_unstable();
    let boundaries = chosen.into_iter().map(|i| env.time_of(i)).collect();
    Ok(SegmentPlan::from_boundaries(bpm, duration, boundaries))
}

/// Envelope plus plan for a whole audio buffer.
pub fn segment_audio(
    audio: &AudioBuffer,
    bpm: f64,
    settings: &SegmentationSettings,
) -> Result<(OnsetEnvelope, SegmentPlan), MusicError> {
    let env = onset_strength(audio, settings.frame_len, settings.hop)?;
    let plan = segment_music(&env, bpm, audio.duration())?;
    Ok((env, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(values: &[f64]) -> OnsetEnvelope {
        OnsetEnvelope { values: values.to_vec(), hop_seconds: 0.5, offset_seconds: 0.0 }
    }

    #[test]
    fn bar_lengths() {
        assert_eq!(bar_duration(120.0).unwrap(), 2.0);
        assert_eq!(bar_duration(60.0).unwrap(), 4.0);
        assert_eq!(bar_duration(240.0).unwrap(), 1.0);
        assert!(bar_duration(0.0).is_err());
        assert!(bar_duration(-3.0).is_err());
        assert!(bar_duration(f64::NAN).is_err());
    }

    #[test]
    fn silence_has_flat_envelope() {
        let audio = AudioBuffer { samples: vec![0.0; 8000], sample_rate: 8000 };
        let e = onset_strength(&audio, 1024, 256).unwrap();
        assert_eq!(e.values.len(), 1 + (8000 - 1024) / 256);
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert_eq!(e.hop_seconds, 256.0 / 8000.0);
    }

    #[test]
    fn click_peaks_near_click() {
        let sr = 8000;
        let mut samples = vec![0.0; sr as usize];
        let click = 4000;
        samples[click] = 1.0;
        let e = onset_strength(&AudioBuffer { samples, sample_rate: sr }, 1024, 256).unwrap();
        let (argmax, _) = e.values.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        // the peak frame contains the click
        assert!(argmax * 256 <= click && click < argmax * 256 + 1024, "peak at frame {argmax}");
    }

    #[test]
    fn steady_sine_is_quiet() {
        let sr = 8000u32;
        let n = sr as usize * 2;
        let sine: Vec<f64> = (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()).collect();
        let mut clicked = vec![0.0; n];
        clicked[n / 2] = 1.0;
        let sine_env = onset_strength(&AudioBuffer { samples: sine, sample_rate: sr }, 1024, 256).unwrap();
        let click_env = onset_strength(&AudioBuffer { samples: clicked, sample_rate: sr }, 1024, 256).unwrap();
        let click_peak = click_env.values.iter().copied().fold(0.0, f64::max);
        let sine_peak = sine_env.values[1..].iter().copied().fold(0.0, f64::max);
        assert!(sine_peak < 0.01 * click_peak, "sine {sine_peak} vs click {click_peak}");
    }

    #[test]
    fn short_audio_rejected() {
        let audio = AudioBuffer { samples: vec![0.0; 100], sample_rate: 8000 };
        assert!(matches!(onset_strength(&audio, 1024, 256), Err(MusicError::TooShort { .. })));
        assert!(matches!(onset_strength(&audio, 64, 128), Err(MusicError::Framing { .. })));
    }

    #[test]
    fn maxima_examples() {
        assert!(local_maxima(&[0.0, 1.0, 2.0, 3.0, 4.0], 1).is_empty());
        let p = local_maxima(&[0.0, 1.0, 0.0, 2.0, 0.0], 1);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![3, 1]);
        let p = local_maxima(&[0.0, 5.0, 0.0, 5.0, 0.0], 1);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1, 3]);
        // min_gap suppresses the weaker neighbour
        let p = local_maxima(&[0.0, 1.0, 0.0, 2.0, 0.0], 3);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![3]);
        // plateau counts once, at its left edge
        let p = local_maxima(&[0.0, 3.0, 3.0, 0.0], 1);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn one_bar_is_one_segment() {
        let plan = segment_music(&env(&[0.0, 1.0, 0.0, 1.0, 0.0]), 120.0, 2.0).unwrap();
        assert!(plan.boundaries.is_empty());
        assert_eq!(plan.segments, vec![[0.0, 2.0]]);
    }

    #[test]
    fn flat_envelope_keeps_partition() {
        let plan = segment_music(&env(&[1.0; 40]), 120.0, 20.0).unwrap();
        assert!(plan.boundaries.len() <= 9);
        assert!(plan.boundaries.is_empty());
        assert_eq!(plan.segments, vec![[0.0, 20.0]]);
        assert!(matches!(segment_music(&env(&[]), 120.0, 20.0), Err(MusicError::EmptyEnvelope)));
    }

    #[test]
    fn click_track_segments_on_bars() {
        let audio = click_track(60.0, 8000, 120.0);
        let (e, plan) = segment_audio(&audio, 120.0, &SegmentationSettings::default()).unwrap();
        assert_eq!(plan.boundaries.len(), 29);
        assert_eq!(plan.segments.len(), 30);
        assert!((plan.mean_segment() - 2.0).abs() <= e.hop_seconds);
        for (i, b) in plan.boundaries.iter().enumerate() {
            let bar_line = 2.0 * (i + 1) as f64;
            // the click lands inside the frame whose centre is labelled, so
            // centre labelling keeps boundaries within a hop of the beat
            assert!((b - bar_line).abs() <= e.hop_seconds + 1e-9, "boundary {b} far from {bar_line}");
        }
        assert!(plan.meets_bar_target(0.25));
    }

    #[test]
    fn plan_json_keys() {
        let plan = segment_music(&env(&[0.0, 1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0]), 240.0, 4.0).unwrap();
        let v = serde_json::to_value(&plan).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["boundaries", "bpm", "duration", "segments"]);
    }

    #[test]
    fn wav_round_trip_and_downmix() {
        let audio = AudioBuffer { samples: vec![0.0, 0.5, -0.5, 0.25], sample_rate: 8000 };
        let mut cur = std::io::Cursor::new(Vec::new());
        audio.write_wav(&mut cur).unwrap();
        let back = AudioBuffer::read_wav(std::io::Cursor::new(cur.into_inner())).unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in back.samples.iter().zip(&audio.samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut cur = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut cur, spec).unwrap();
            for (l, r) in [(16384i16, 0i16), (-8192, 8192)] {
                w.write_sample(l).unwrap();
                w.write_sample(r).unwrap();
            }
            w.finalize().unwrap();
        }
        let mono = AudioBuffer::read_wav(std::io::Cursor::new(cur.into_inner())).unwrap();
        assert_eq!(mono.samples, vec![0.25, 0.0]);
    }

    #[test]
    fn garbage_wav_rejected() {
        assert!(AudioBuffer::read_wav(&b"not a wav file at all"[..]).is_err());
    }

    proptest! {
        #[test]
        fn segments_partition_duration(values in prop::collection::vec(0.0f64..10.0, 3..200), bpm in 30.0f64..300.0, dur in 0.5f64..120.0) {
            let e = OnsetEnvelope { values, hop_seconds: 0.05, offset_seconds: 0.0 };
            let plan = segment_music(&e, bpm, dur).unwrap();
            prop_assert_eq!(plan.segments.len(), plan.boundaries.len() + 1);
            prop_assert_eq!(plan.segments[0][0], 0.0);
            prop_assert_eq!(plan.segments.last().unwrap()[1], dur);
            for w in plan.segments.windows(2) {
                prop_assert_eq!(w[0][1], w[1][0]);
                prop_assert!(w[0][0] < w[0][1]);
            }
            for b in &plan.boundaries {
                let i = (b / e.hop_seconds).round() as usize;
                prop_assert!(*b > 0.0 && *b < dur);
                prop_assert!(e.values[i] > e.values[i - 1] && e.values[i] >= e.values[i + 1]);
            }
        }

        #[test]
        fn faster_tempo_never_fewer_targets(dur in 0.5f64..600.0, bpm in 20.0f64..400.0) {
            let slow = target_boundary_count(dur, bpm).unwrap();
            let fast = target_boundary_count(dur, 2.0 * bpm).unwrap();
            prop_assert!(fast >= slow);
        }
    }
}
