//! The fixed 20-symbol phoneme inventory and its acoustic templates.
//!
//! Voiced phones are rendered as harmonic stacks shaped by a three-formant
//! envelope; unvoiced phones as band-limited noise. Unvoiced segments are
//! rendered much quieter than voiced ones, as fricatives and stops are in
//! real speech, so periodicity dominates the energy of any utterance.

/// Index into [`INVENTORY`].
pub type PhoneId = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Excitation {
    Voiced,
    Unvoiced,
}

#[derive(Debug, Clone, Copy)]
pub struct PhoneTemplate {
    pub symbol: char,
    pub excitation: Excitation,
    /// Voiced: formant center frequencies. Unvoiced: [center, 0, 0].
    pub formants_hz: [f64; 3],
    /// Voiced: per-formant gains. Unvoiced: [gain, bandwidth, 0].
    pub shape: [f64; 3],
    /// Peak amplitude target for the rendered segment.
    pub amplitude: f64,
}

/// Formant bandwidths used for every voiced phone.
pub const FORMANT_BANDWIDTHS_HZ: [f64; 3] = [90.0, 120.0, 160.0];

/// Baseline spectral tilt so low harmonics are always present; keeps the
/// fundamental recoverable even when a formant sits on a high harmonic.
pub const SPECTRAL_TILT_GAIN: f64 = 0.22;

const V: Excitation = Excitation::Voiced;
const U: Excitation = Excitation::Unvoiced;

pub const INVENTORY: [PhoneTemplate; 20] = [
    PhoneTemplate { symbol: 'a', excitation: V, formants_hz: [730.0, 1090.0, 2440.0], shape: [1.0, 0.7, 0.30], amplitude: 0.30 },
    PhoneTemplate { symbol: 'e', excitation: V, formants_hz: [530.0, 1840.0, 2480.0], shape: [1.0, 0.6, 0.30], amplitude: 0.30 },
    PhoneTemplate { symbol: 'i', excitation: V, formants_hz: [270.0, 2290.0, 3010.0], shape: [1.0, 0.5, 0.25], amplitude: 0.28 },
    PhoneTemplate { symbol: 'o', excitation: V, formants_hz: [570.0, 840.0, 2410.0], shape: [1.0, 0.8, 0.25], amplitude: 0.30 },
    PhoneTemplate { symbol: 'u', excitation: V, formants_hz: [300.0, 870.0, 2240.0], shape: [1.0, 0.6, 0.20], amplitude: 0.28 },
    PhoneTemplate { symbol: 'm', excitation: V, formants_hz: [250.0, 1000.0, 2200.0], shape: [1.0, 0.3, 0.15], amplitude: 0.24 },
    PhoneTemplate { symbol: 'n', excitation: V, formants_hz: [250.0, 1700.0, 2600.0], shape: [1.0, 0.35, 0.18], amplitude: 0.24 },
    PhoneTemplate { symbol: 'w', excitation: V, formants_hz: [310.0, 610.0, 2200.0], shape: [1.0, 0.7, 0.18], amplitude: 0.26 },
    PhoneTemplate { symbol: 'y', excitation: V, formants_hz: [270.0, 2100.0, 3000.0], shape: [1.0, 0.55, 0.25], amplitude: 0.26 },
    PhoneTemplate { symbol: 'r', excitation: V, formants_hz: [310.0, 1060.0, 1380.0], shape: [1.0, 0.6, 0.45], amplitude: 0.26 },
    PhoneTemplate { symbol: 'l', excitation: V, formants_hz: [360.0, 1300.0, 2700.0], shape: [1.0, 0.5, 0.25], amplitude: 0.26 },
    PhoneTemplate { symbol: 'b', excitation: V, formants_hz: [220.0, 900.0, 2100.0], shape: [1.0, 0.5, 0.20], amplitude: 0.20 },
    PhoneTemplate { symbol: 'd', excitation: V, formants_hz: [250.0, 1750.0, 2600.0], shape: [1.0, 0.55, 0.25], amplitude: 0.20 },
    PhoneTemplate { symbol: 'g', excitation: V, formants_hz: [260.0, 1400.0, 2000.0], shape: [1.0, 0.6, 0.35], amplitude: 0.20 },
    PhoneTemplate { symbol: 's', excitation: U, formants_hz: [5400.0, 0.0, 0.0], shape: [1.0, 1400.0, 0.0], amplitude: 0.055 },
    PhoneTemplate { symbol: 't', excitation: U, formants_hz: [3900.0, 0.0, 0.0], shape: [1.0, 1100.0, 0.0], amplitude: 0.050 },
    PhoneTemplate { symbol: 'k', excitation: U, formants_hz: [2500.0, 0.0, 0.0], shape: [1.0, 900.0, 0.0], amplitude: 0.050 },
    PhoneTemplate { symbol: 'f', excitation: U, formants_hz: [4600.0, 0.0, 0.0], shape: [1.0, 1800.0, 0.0], amplitude: 0.045 },
    PhoneTemplate { symbol: 'p', excitation: U, formants_hz: [1500.0, 0.0, 0.0], shape: [1.0, 800.0, 0.0], amplitude: 0.045 },
    PhoneTemplate { symbol: 'h', excitation: U, formants_hz: [1100.0, 0.0, 0.0], shape: [1.0, 900.0, 0.0], amplitude: 0.040 },
];

pub fn inventory_size() -> usize {
    INVENTORY.len()
}

pub fn template(id: PhoneId) -> &'static PhoneTemplate {
    &INVENTORY[id as usize]
}

pub fn is_voiced(id: PhoneId) -> bool {
    template(id).excitation == Excitation::Voiced
}

pub fn symbol_to_id(symbol: char) -> Option<PhoneId> {
    INVENTORY
        .iter()
        .position(|p| p.symbol == symbol)
        .map(|i| i as PhoneId)
}

pub fn transcript_to_string(ids: &[PhoneId]) -> String {
    ids.iter().map(|&i| template(i).symbol).collect()
}

pub fn parse_transcript(text: &str) -> Option<Vec<PhoneId>> {
    text.chars().map(symbol_to_id).collect()
}

/// Substitution target for the EL corruption model, biased toward
/// voiced/unvoiced confusions: a voiced phone prefers an unvoiced
/// replacement and vice versa.
pub fn confusion_candidates(id: PhoneId) -> Vec<PhoneId> {
    let voiced = is_voiced(id);
    (0..INVENTORY.len() as PhoneId)
        .filter(|&other| other != id && is_voiced(other) != voiced)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_are_unique() {
        for (i, a) in INVENTORY.iter().enumerate() {
            for b in INVENTORY.iter().skip(i + 1) {
                assert_ne!(a.symbol, b.symbol);
            }
        }
    }

    #[test]
    fn transcript_round_trip() {
        let ids = parse_transcript("aeskomn").unwrap();
        assert_eq!(transcript_to_string(&ids), "aeskomn");
        assert!(parse_transcript("axz").is_none());
    }

    #[test]
    fn confusions_cross_the_voicing_boundary() {
        let a = symbol_to_id('a').unwrap();
        for c in confusion_candidates(a) {
            assert!(!is_voiced(c));
        }
        let s = symbol_to_id('s').unwrap();
        for c in confusion_candidates(s) {
            assert!(is_voiced(c));
        }
    }
}
