//! Waveform rendering for typical and pseudo-EL speech.

use super::phones::{
    confusion_candidates, template, Excitation, PhoneId, FORMANT_BANDWIDTHS_HZ, SPECTRAL_TILT_GAIN,
};
use super::{CorpusError, SpeechType, Utterance};
use crate::rng::Prng;

pub const SAMPLE_RATE: u32 = 16000;
const RAMP_SECONDS: f64 = 0.005;
const MAX_HARMONIC_HZ: f64 = 4500.0;

/// Voice profile of a synthetic speaker.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    /// Mean F0 of the contour.
    pub base_f0_hz: f64,
    /// Relative depth of the slow F0 modulation.
    pub f0_range: f64,
    /// Multiplier on formant center frequencies (vocal tract length proxy).
    pub formant_scale: f64,
    /// Uniform per-symbol duration in milliseconds.
    pub phone_duration_ms: f64,
}

impl SpeakerSpec {
    pub fn new(id: &str, base_f0_hz: f64, formant_scale: f64) -> Self {
        SpeakerSpec {
            id: id.to_string(),
            base_f0_hz,
            f0_range: 0.06,
            formant_scale,
            phone_duration_ms: 80.0,
        }
    }
}

/// EL degradation settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ElSimulationParams {
    /// Duration stretch relative to the typical rendering (>= 1).
    pub tempo_factor: f64,
    /// Constant F0 of the robotic buzz.
    pub excitation_f0_hz: f64,
    /// Per-phoneme substitution probability in [0, 1).
    pub corruption_prob: f64,
    pub seed: u64,
}

impl Default for ElSimulationParams {
    fn default() -> Self {
        ElSimulationParams {
            tempo_factor: 1.32,
            excitation_f0_hz: 100.0,
            corruption_prob: 0.15,
            seed: 0,
        }
    }
}

/// The F0 contour used for voiced synthesis: a slow modulation around the
/// speaker's base pitch with a gentle declination, phase drawn from the
/// utterance seed. Exposed so tests can compare extracted F0 against it.
pub fn f0_contour(speaker: &SpeakerSpec, seed: u64, t_seconds: f64) -> f64 {
    let phase = Prng::derive(seed, "f0-phase", 0).uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let modulation = 1.0 + speaker.f0_range * (2.0 * std::f64::consts::PI * t_seconds / 1.7 + phase).sin();
    let declination = 1.0 - 0.02 * t_seconds;
    speaker.base_f0_hz * modulation * declination.max(0.7)
}

fn segment_ramp(i: usize, len: usize, ramp: usize) -> f64 {
    if i < ramp {
        0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
    } else if i + ramp >= len {
        let j = len - 1 - i;
        0.5 - 0.5 * (std::f64::consts::PI * j as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// Formant envelope value at frequency `f` for a voiced phone.
fn voiced_envelope(phone: &PhoneId, formant_scale: f64, f: f64) -> f64 {
    let tpl = template(*phone);
    let mut v = SPECTRAL_TILT_GAIN / (1.0 + f / 1000.0);
    for j in 0..3 {
        let center = tpl.formants_hz[j] * formant_scale;
        let bw = FORMANT_BANDWIDTHS_HZ[j] * formant_scale;
        let d = (f - center) / bw;
        v += tpl.shape[j] * (-0.5 * d * d).exp();
    }
    v
}

/// Neck-transmission muffling of EL speech: the buzz is injected through
/// tissue, so upper formants arrive strongly attenuated.
fn el_muffle(f: f64) -> f64 {
    1.0 / (1.0 + (f / 1300.0) * (f / 1300.0))
}

/// Renders one voiced segment as a phase-continuous harmonic stack.
#[allow(clippy::too_many_arguments)]
fn render_voiced(
    out: &mut Vec<f64>,
    phone: PhoneId,
    n_samples: usize,
    speaker: &SpeakerSpec,
    seed: u64,
    segment_offset: usize,
    f0_override: Option<f64>,
    harmonic_phases: &mut Vec<f64>,
) {
    let tpl = template(phone);
    let max_f0 = speaker.base_f0_hz * (1.0 + speaker.f0_range);
    let n_harmonics = (MAX_HARMONIC_HZ / f0_override.unwrap_or(max_f0).min(max_f0)).floor() as usize;
    let n_harmonics = n_harmonics.max(1);
    if harmonic_phases.len() < n_harmonics {
        harmonic_phases.resize(n_harmonics, 0.0);
    }
    let ramp = (RAMP_SECONDS * SAMPLE_RATE as f64) as usize;
    let start = out.len();
    out.resize(start + n_samples, 0.0);
    for i in 0..n_samples {
        let t_global = (segment_offset + i) as f64 / SAMPLE_RATE as f64;
        let f0 = f0_override.unwrap_or_else(|| f0_contour(speaker, seed, t_global));
        let mut sample = 0.0;
        let mut power = 0.0;
        for (h, phase) in harmonic_phases.iter_mut().enumerate().take(n_harmonics) {
            let freq = (h + 1) as f64 * f0;
            if freq > MAX_HARMONIC_HZ {
                break;
            }
            let mut amp = voiced_envelope(&phone, speaker.formant_scale, freq);
            if f0_override.is_some() {
                amp *= el_muffle(freq);
            }
            sample += amp * phase.sin();
            power += amp * amp;
            *phase += 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
            if *phase > 2.0 * std::f64::consts::PI {
                *phase -= 2.0 * std::f64::consts::PI;
            }
        }
        let rms_estimate = (power / 2.0).sqrt().max(1e-9);
        let gain = tpl.amplitude / rms_estimate;
        out[start + i] = sample * gain * segment_ramp(i, n_samples, ramp) / std::f64::consts::SQRT_2;
    }
}

/// Renders one unvoiced segment as resonator-filtered noise.
fn render_unvoiced(out: &mut Vec<f64>, phone: PhoneId, n_samples: usize, formant_scale: f64, rng: &mut Prng) {
    let tpl = template(phone);
    let center = tpl.formants_hz[0] * formant_scale;
    let bw = tpl.shape[1];
    // Two-pole resonator at the noise band center.
    let r = (-std::f64::consts::PI * bw / SAMPLE_RATE as f64).exp();
    let theta = 2.0 * std::f64::consts::PI * center.min(7800.0) / SAMPLE_RATE as f64;
    let (b1, b2) = (2.0 * r * theta.cos(), -r * r);
    let a0 = 1.0 - r;
    let ramp = (RAMP_SECONDS * SAMPLE_RATE as f64) as usize;
    let start = out.len();
    out.resize(start + n_samples, 0.0);
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut raw = Vec::with_capacity(n_samples);
    let mut sumsq = 0.0;
    for _ in 0..n_samples {
        let y = a0 * rng.normal() + b1 * y1 + b2 * y2;
        y2 = y1;
        y1 = y;
        sumsq += y * y;
        raw.push(y);
    }
    let rms = (sumsq / n_samples as f64).sqrt().max(1e-9);
    let gain = tpl.amplitude / rms;
    for (i, y) in raw.into_iter().enumerate() {
        out[start + i] = y * gain * segment_ramp(i, n_samples, ramp);
    }
}

/// Constant electrolarynx buzz mixed under a segment (the device keeps
/// running through unvoiced articulation). Advances the shared harmonic
/// phase clock so the buzz stays coherent across the utterance.
fn add_buzz_leak(out: &mut [f64], f0: f64, phases: &mut Vec<f64>, amplitude: f64) {
    let n_harmonics = ((MAX_HARMONIC_HZ / f0).floor() as usize).max(1);
    if phases.len() < n_harmonics {
        phases.resize(n_harmonics, 0.0);
    }
    let mut amps = Vec::with_capacity(n_harmonics);
    let mut power = 0.0;
    for h in 0..n_harmonics {
        let freq = (h + 1) as f64 * f0;
        let a = SPECTRAL_TILT_GAIN / (1.0 + freq / 1000.0) * el_muffle(freq);
        amps.push(a);
        power += a * a;
    }
    let gain = amplitude / (power / 2.0).sqrt().max(1e-9) / std::f64::consts::SQRT_2;
    for sample in out.iter_mut() {
        let mut v = 0.0;
        for (h, phase) in phases.iter_mut().enumerate().take(n_harmonics) {
            v += amps[h] * phase.sin();
            *phase += 2.0 * std::f64::consts::PI * (h + 1) as f64 * f0 / SAMPLE_RATE as f64;
            if *phase > 2.0 * std::f64::consts::PI {
                *phase -= 2.0 * std::f64::consts::PI;
            }
        }
        *sample += v * gain;
    }
}

fn render_sequence(
    phones: &[PhoneId],
    speaker: &SpeakerSpec,
    seed: u64,
    duration_per_phone_s: f64,
    f0_override: Option<f64>,
) -> Vec<f64> {
    let n_per_phone = (duration_per_phone_s * SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::with_capacity(phones.len() * n_per_phone);
    let mut noise_rng = Prng::derive(seed, "noise", 0);
    let mut phases = Vec::new();
    for &phone in phones {
        let offset = out.len();
        match template(phone).excitation {
            Excitation::Voiced => render_voiced(
                &mut out,
                phone,
                n_per_phone,
                speaker,
                seed,
                offset,
                f0_override,
                &mut phases,
            ),
            Excitation::Unvoiced => {
                render_unvoiced(&mut out, phone, n_per_phone, speaker.formant_scale, &mut noise_rng);
                if let Some(f0) = f0_override {
                    let start = out.len() - n_per_phone;
                    add_buzz_leak(&mut out[start..], f0, &mut phases, 0.12);
                }
            }
        }
    }
    out
}

/// Renders a typical-speech utterance for `text`.
///
/// Deterministic in (text, speaker, seed); the utterance id does not affect
/// the waveform.
pub fn generate_typical(
    id: &str,
    text: &[PhoneId],
    speaker: &SpeakerSpec,
    seed: u64,
) -> Result<Utterance, CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    if let Some(&bad) = text.iter().find(|&&p| p as usize >= super::phones::inventory_size()) {
        return Err(CorpusError::InvalidSymbol(bad as char));
    }
    let waveform = render_sequence(text, speaker, seed, speaker.phone_duration_ms / 1000.0, None);
    Ok(Utterance {
        id: id.to_string(),
        waveform,
        transcript: text.to_vec(),
        speech_type: SpeechType::Typical,
        speaker_id: speaker.id.clone(),
        source_id: None,
    })
}

/// Simulates EL speech from a typical utterance.
///
/// The rendering is slowed by `tempo_factor`, voiced excitation is replaced
/// by a constant-F0 buzz, and each phoneme is independently substituted
/// (voiced/unvoiced confusions) with probability `corruption_prob`. The
/// stored transcript stays the clean source text: EL speakers intend the
/// correct words, the waveform just fails to realize them.
pub fn simulate_el(
    src: &Utterance,
    speaker: &SpeakerSpec,
    params: &ElSimulationParams,
) -> Result<Utterance, CorpusError> {
    if src.speech_type != SpeechType::Typical {
        return Err(CorpusError::InvalidSpeechType);
    }
    let mut corrupt_rng = Prng::derive(params.seed, "corrupt", 0);
    let rendered: Vec<PhoneId> = src
        .transcript
        .iter()
        .map(|&p| {
            if params.corruption_prob > 0.0 && corrupt_rng.uniform() < params.corruption_prob {
                let candidates = confusion_candidates(p);
                candidates[corrupt_rng.below(candidates.len())]
            } else {
                p
            }
        })
        .collect();
    let duration_per_phone = speaker.phone_duration_ms / 1000.0 * params.tempo_factor;
    let waveform = render_sequence(
        &rendered,
        speaker,
        params.seed,
        duration_per_phone,
        Some(params.excitation_f0_hz),
    );
    Ok(Utterance {
        id: format!("{}_el", src.id),
        waveform,
        transcript: src.transcript.clone(),
        speech_type: SpeechType::El,
        speaker_id: speaker.id.clone(),
        source_id: Some(src.id.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::phones::parse_transcript;
    use crate::dsp::{extract_f0, DspParams};

    fn speaker() -> SpeakerSpec {
        SpeakerSpec::new("test_spk", 150.0, 1.0)
    }

    #[test]
    fn generation_is_deterministic() {
        let text = parse_transcript("aenoskamu").unwrap();
        let a = generate_typical("u1", &text, &speaker(), 5).unwrap();
        let b = generate_typical("u2", &text, &speaker(), 5).unwrap();
        assert_eq!(a.waveform, b.waveform);
        let c = generate_typical("u3", &text, &speaker(), 6).unwrap();
        assert_ne!(a.waveform, c.waveform);
    }

    #[test]
    fn duration_follows_symbol_count() {
        let text = parse_transcript("aeiouaeiousk").unwrap();
        let u = generate_typical("u", &text, &speaker(), 1).unwrap();
        let expected = text.len() as f64 * 0.080;
        assert!((u.duration_s() - expected).abs() <= 0.0101, "{}", u.duration_s());
    }

    #[test]
    fn empty_text_and_bad_symbols_are_rejected() {
        assert!(matches!(
            generate_typical("u", &[], &speaker(), 0),
            Err(CorpusError::EmptyInput)
        ));
        assert!(matches!(
            generate_typical("u", &[200], &speaker(), 0),
            Err(CorpusError::InvalidSymbol(_))
        ));
    }

    #[test]
    fn extracted_f0_tracks_the_synthesis_contour() {
        let text = parse_transcript("aeoumanowelui").unwrap();
        let spk = speaker();
        let seed = 77;
        let u = generate_typical("u", &text, &spk, seed).unwrap();
        let params = DspParams::default();
        let track = extract_f0(&u.waveform, &params).unwrap();
        let mut checked = 0;
        let mut within = 0;
        for (t, (&f, &v)) in track.f0_hz.iter().zip(&track.voiced).enumerate() {
            if !v {
                continue;
            }
            let center = (t * params.frame_shift + params.f0_window / 2) as f64 / 16000.0;
            let expected = f0_contour(&spk, seed, center);
            checked += 1;
            if (f - expected).abs() <= 5.0 {
                within += 1;
            }
        }
        assert!(checked > 20, "too few voiced frames: {checked}");
        assert!(
            within as f64 >= 0.9 * checked as f64,
            "{within}/{checked} frames within 5 Hz"
        );
    }

    #[test]
    fn el_requires_typical_source() {
        let text = parse_transcript("aeiou").unwrap();
        let u = generate_typical("u", &text, &speaker(), 0).unwrap();
        let el = simulate_el(&u, &speaker(), &ElSimulationParams::default()).unwrap();
        assert!(matches!(
            simulate_el(&el, &speaker(), &ElSimulationParams::default()),
            Err(CorpusError::InvalidSpeechType)
        ));
    }

    #[test]
    fn el_stretches_duration_by_tempo_factor() {
        let text = parse_transcript("aeskomnurati").unwrap();
        let u = generate_typical("u", &text, &speaker(), 3).unwrap();
        let params = ElSimulationParams {
            tempo_factor: 1.32,
            ..Default::default()
        };
        let el = simulate_el(&u, &speaker(), &params).unwrap();
        let ratio = el.duration_s() / u.duration_s();
        assert!((ratio - 1.32).abs() < 0.01, "ratio {ratio}");
        assert_eq!(el.speech_type, SpeechType::El);
        assert_eq!(el.source_id.as_deref(), Some("u"));
        assert_eq!(el.transcript, u.transcript);
    }

    #[test]
    fn zero_corruption_keeps_rendered_phones() {
        // With corruption off, the EL rendering realizes the clean text:
        // re-rendering from the stored transcript reproduces the waveform.
        let text = parse_transcript("aeskomnura").unwrap();
        let spk = speaker();
        let u = generate_typical("u", &text, &spk, 9).unwrap();
        let params = ElSimulationParams {
            corruption_prob: 0.0,
            seed: 4,
            ..Default::default()
        };
        let el = simulate_el(&u, &spk, &params).unwrap();
        let re = simulate_el(&u, &spk, &params).unwrap();
        assert_eq!(el.waveform, re.waveform);
        let duration = spk.phone_duration_ms / 1000.0 * params.tempo_factor;
        let direct = super::render_sequence(&text, &spk, params.seed, duration, Some(params.excitation_f0_hz));
        assert_eq!(el.waveform, direct);
    }

    #[test]
    fn el_buzz_has_flat_f0() {
        let text = parse_transcript("aeoumanowel").unwrap();
        let u = generate_typical("u", &text, &speaker(), 21).unwrap();
        let el = simulate_el(&u, &speaker(), &ElSimulationParams::default()).unwrap();
        let track = extract_f0(&el.waveform, &DspParams::default()).unwrap();
        let voiced = track.voiced_values();
        assert!(voiced.len() > 20);
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        let std = (voiced.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / voiced.len() as f64).sqrt();
        assert!(std < 1.0, "voiced F0 std {std}");
    }

    #[test]
    fn voicing_consistency_on_typical_output() {
        // At least 90% of non-silent frames of a typical rendering are
        // marked voiced: unvoiced phones are far quieter than voiced ones.
        let text = parse_transcript("askeotimunsafehlopk").unwrap();
        let u = generate_typical("u", &text, &speaker(), 13).unwrap();
        let params = DspParams::default();
        let track = extract_f0(&u.waveform, &params).unwrap();
        let mut non_silent = 0;
        let mut voiced = 0;
        for (t, &v) in track.voiced.iter().enumerate() {
            let start = t * params.frame_shift;
            let end = (start + params.frame_length).min(u.waveform.len());
            let rms = (u.waveform[start..end].iter().map(|x| x * x).sum::<f64>()
                / (end - start) as f64)
                .sqrt();
            if rms >= 0.06 {
                non_silent += 1;
                if v {
                    voiced += 1;
                }
            }
        }
        assert!(non_silent > 30);
        assert!(
            voiced as f64 >= 0.9 * non_silent as f64,
            "{voiced}/{non_silent} non-silent frames voiced"
        );
    }
}
