//! The three classifier archetypes and the domain-name encoding they share.
//!
//! All models consume integer-encoded domain names through an embedding
//! layer and emit one sigmoid probability (malicious-ness). The marker index
//! placed before the final dense layer makes every model splittable into a
//! feature extractor and a classification head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{Activation, EncodedDataset, InputSig, LayerSpec, ModelGraph};
use crate::{Error, Result};

/// Code for left-padding short names.
pub const PAD_CODE: u16 = 0;
/// Code for characters outside the alphabet.
pub const UNKNOWN_CODE: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Endgame,
    Nyu,
    Resnet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Endgame, ArchKind::Nyu, ArchKind::Resnet];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Endgame => "endgame",
            ArchKind::Nyu => "nyu",
            ArchKind::Resnet => "resnet",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endgame" => Ok(ArchKind::Endgame),
            "nyu" => Ok(ArchKind::Nyu),
            "resnet" => Ok(ArchKind::Resnet),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture id: which archetype, and the width scale applied to its
/// hidden sizes (1.0 reproduces the published 128-unit widths; 0.25 is the
/// desk-scale default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchId {
    pub kind: ArchKind,
    pub scale: f64,
}

impl ArchId {
    pub fn new(kind: ArchKind, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "arch scale must lie in (0, 1], got {scale}"
            )));
        }
        Ok(ArchId { kind, scale })
    }

    pub fn full(kind: ArchKind) -> Self {
        ArchId { kind, scale: 1.0 }
    }

    /// Hidden units / filter count: 128 scaled, at least 1.
    pub fn units(&self) -> usize {
        ((128.0 * self.scale).round() as usize).max(1)
    }
}

/// Character-to-integer encoding: a fixed alphabet, reserved pad (0) and
/// unknown (1) codes, and a fixed sequence length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    alphabet: Vec<char>,
    max_len: usize,
}

impl EncodingSpec {
    pub fn new(alphabet: &str, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidConfig("max length must be >= 1".into()));
        }
        let chars: Vec<char> = alphabet.chars().collect();
        let mut seen = std::collections::HashSet::new();
        for c in &chars {
            if !seen.insert(*c) {
                return Err(Error::InvalidConfig(format!(
                    "alphabet repeats character {c:?}"
                )));
            }
        }
        if chars.is_empty() {
            return Err(Error::InvalidConfig("alphabet is empty".into()));
        }
        Ok(EncodingSpec {
            alphabet: chars,
            max_len,
        })
    }

    /// Lowercase a–z, digits, '-', '.', '_' at sequence length 64: covers
    /// valid DNS labels plus the underscore seen in real NXD traffic.
    pub fn standard() -> Self {
        EncodingSpec::new("abcdefghijklmnopqrstuvwxyz0123456789-._", 64)
            .expect("standard alphabet is valid")
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Alphabet codes start at 2; pad and unknown are reserved.
    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + 2
    }

    pub fn code_of(&self, c: char) -> u16 {
        match self.alphabet.iter().position(|&a| a == c) {
            Some(i) => (i + 2) as u16,
            None => UNKNOWN_CODE,
        }
    }

    /// Stable tag carried by models built from this spec; combining models
    /// built from different specs is rejected by comparing tags.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for c in &self.alphabet {
            hasher.update((*c as u32).to_le_bytes());
        }
        hasher.update((self.max_len as u64).to_le_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn input_sig(&self) -> InputSig {
        InputSig {
            width: self.max_len,
            vocab: self.vocab_size(),
            tag: self.fingerprint(),
        }
    }
}

/// Integer-encode a domain name: lowercased, unknown characters mapped to
/// the unknown code, names longer than the window keep their trailing
/// characters (the TLD side), shorter ones are left-padded.
pub fn encode_domain(name: &str, spec: &EncodingSpec) -> Result<Vec<u16>> {
    let lower = name.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    if chars.is_empty() {
        return Err(Error::EmptyInput("cannot encode an empty domain name".into()));
    }
    let max = spec.max_len;
    let tail = if chars.len() > max {
        &chars[chars.len() - max..]
    } else {
        &chars[..]
    };
    let mut codes = vec![PAD_CODE; max - tail.len()];
    codes.extend(tail.iter().map(|&c| spec.code_of(c)));
    Ok(codes)
}

/// Encode a whole labeled corpus into an engine-ready dataset.
pub fn encode_dataset<'a, I>(samples: I, spec: &EncodingSpec) -> Result<EncodedDataset>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut codes = Vec::new();
    let mut targets = Vec::new();
    for (name, target) in samples {
        codes.extend(encode_domain(name, spec)?);
        targets.push(target);
    }
    EncodedDataset::new(codes, spec.max_len, targets)
}

/// Embedding width shared by the endgame and nyu models. The resnet model
/// embeds at its filter width instead so the residual identity skip
/// typechecks at every scale.
pub const EMBEDDING_DIM: usize = 32;
/// Kernel width of every conv1d layer.
pub const KERNEL: usize = 3;

/// Build one of the three archetypes with seeded Glorot initialization.
///
/// - `endgame`: embedding → LSTM(128·scale) → dense(1, sigmoid)
/// - `nyu`: embedding → conv1d(128·scale) ×2 → global max pool → dense(1, sigmoid)
/// - `resnet`: embedding → residual block of two conv1d(128·scale) with an
///   identity skip → global max pool → dense(1, sigmoid)
///
/// The extractor/head marker sits immediately before the final dense layer.
pub fn build_model(arch: ArchId, spec: &EncodingSpec, seed: u64) -> Result<ModelGraph> {
    ArchId::new(arch.kind, arch.scale)?; // revalidate scale
    let units = arch.units();
    let vocab = spec.vocab_size();
    let (layers, marker) = match arch.kind {
        ArchKind::Endgame => (
            vec![
                LayerSpec::Embedding {
                    vocab,
                    dim: EMBEDDING_DIM,
                },
                LayerSpec::RecurrentCell {
                    input: EMBEDDING_DIM,
                    hidden: units,
                },
                LayerSpec::Dense {
                    input: units,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
            2,
        ),
        ArchKind::Nyu => (
            vec![
                LayerSpec::Embedding {
                    vocab,
                    dim: EMBEDDING_DIM,
                },
                LayerSpec::Conv1d {
                    channels_in: EMBEDDING_DIM,
                    filters: units,
                    kernel: KERNEL,
                    activation: Activation::Relu,
                },
                LayerSpec::Conv1d {
                    channels_in: units,
                    filters: units,
                    kernel: KERNEL,
                    activation: Activation::Relu,
                },
                LayerSpec::GlobalMaxPool,
                LayerSpec::Dense {
                    input: units,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
            4,
        ),
        ArchKind::Resnet => (
            vec![
                LayerSpec::Embedding { vocab, dim: units },
                LayerSpec::ResidualBlock {
                    channels: units,
                    kernel: KERNEL,
                },
                LayerSpec::GlobalMaxPool,
                LayerSpec::Dense {
                    input: units,
                    output: 1,
                    activation: Activation::Sigmoid,
                },
            ],
            3,
        ),
    };
    ModelGraph::from_specs(&layers, marker, spec.input_sig(), seed)
}

/// Split a model at its head marker into (feature extractor, head).
pub fn split_extractor(model: &ModelGraph) -> Result<(ModelGraph, ModelGraph)> {
    model.split_at_marker()
}

/// Combine extractors in parallel under a freshly initialized dense sigmoid
/// head. Extractor weights come in frozen; only the head is trainable.
/// Extractors from different encoding specs are rejected; mixing classifier
/// *types* is fine.
pub fn combine_extractors(extractors: &[ModelGraph], head_seed: u64) -> Result<ModelGraph> {
    ModelGraph::parallel_compose(extractors, head_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncodedBatch;
    use rand::Rng;

    fn spec() -> EncodingSpec {
        EncodingSpec::standard()
    }

    #[test]
    fn standard_alphabet_has_39_characters_and_41_codes() {
        let s = spec();
        assert_eq!(s.vocab_size(), 41);
        assert_eq!(s.code_of('a'), 2);
        assert_eq!(s.code_of('z'), 27);
        assert_eq!(s.code_of('0'), 28);
        assert_eq!(s.code_of('_'), 40);
    }

    #[test]
    fn encode_lowercases_pads_left_and_maps_unknowns() {
        let s = EncodingSpec::new("abcdefghijklmnopqrstuvwxyz0123456789-.", 8).unwrap();
        let codes = encode_domain("AB.c", &s).unwrap();
        assert_eq!(
            codes,
            vec![0, 0, 0, 0, s.code_of('a'), s.code_of('b'), s.code_of('.'), s.code_of('c')]
        );
        let with_unknown = encode_domain("aü.c", &s).unwrap();
        assert_eq!(with_unknown[5], UNKNOWN_CODE);
        assert!(encode_domain("", &s).is_err());
    }

    #[test]
    fn long_names_keep_their_trailing_characters() {
        let s = spec();
        let long: String = std::iter::repeat('a')
            .take(90)
            .chain("suffix.example".chars())
            .collect();
        let codes = encode_domain(&long, &s).unwrap();
        assert_eq!(codes.len(), 64);
        let expected_tail: Vec<u16> = long
            .chars()
            .rev()
            .take(64)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .map(|c| s.code_of(c))
            .collect();
        assert_eq!(codes, expected_tail);
    }

    #[test]
    fn full_scale_endgame_has_one_lstm_with_128_units() {
        let model = build_model(ArchId::full(ArchKind::Endgame), &spec(), 0).unwrap();
        let specs = model.specs();
        let recurrent: Vec<_> = specs
            .iter()
            .filter(|l| matches!(l, LayerSpec::RecurrentCell { .. }))
            .collect();
        assert_eq!(recurrent.len(), 1);
        assert!(matches!(
            recurrent[0],
            LayerSpec::RecurrentCell { hidden: 128, .. }
        ));
        assert_eq!(model.head_marker(), 2);
        assert!(matches!(
            specs.last(),
            Some(LayerSpec::Dense {
                output: 1,
                activation: Activation::Sigmoid,
                ..
            })
        ));
    }

    #[test]
    fn full_scale_nyu_stacks_two_conv_layers_of_128_filters() {
        let model = build_model(ArchId::full(ArchKind::Nyu), &spec(), 0).unwrap();
        let convs: Vec<_> = model
            .specs()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv1d { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![128, 128]);
    }

    #[test]
    fn full_scale_resnet_has_one_residual_block_of_128_channels() {
        let model = build_model(ArchId::full(ArchKind::Resnet), &spec(), 0).unwrap();
        let blocks: Vec<_> = model
            .specs()
            .iter()
            .filter_map(|l| match l {
                LayerSpec::ResidualBlock { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect();
        assert_eq!(blocks, vec![128]);
    }

    #[test]
    fn desk_scale_units_are_32() {
        let arch = ArchId::new(ArchKind::Endgame, 0.25).unwrap();
        assert_eq!(arch.units(), 32);
        assert!(ArchId::new(ArchKind::Endgame, 0.0).is_err());
        assert!(ArchId::new(ArchKind::Endgame, 1.5).is_err());
    }

    fn tiny_batch(s: &EncodingSpec, rows: usize, seed: u64) -> EncodedBatch {
        let mut rng = crate::seed::rng(seed);
        let codes: Vec<u16> = (0..rows * s.max_len())
            .map(|_| rng.random_range(0..s.vocab_size() as u16))
            .collect();
        EncodedBatch::new(codes, rows, s.max_len()).unwrap()
    }

    #[test]
    fn split_soundness_for_all_archetypes() {
        let s = spec();
        let batch = tiny_batch(&s, 4, 9);
        for kind in ArchKind::ALL {
            let arch = ArchId::new(kind, 0.125).unwrap();
            let model = build_model(arch, &s, 5).unwrap();
            let (extractor, head) = split_extractor(&model).unwrap();
            assert_eq!(extractor.output_width().unwrap(), arch.units());
            let feats = extractor.forward_tensor(&batch).unwrap();
            let through_parts = head.forward_features(&feats).unwrap();
            assert_eq!(model.forward(&batch).unwrap(), through_parts.data());
        }
    }

    #[test]
    fn combine_widths_add_up_and_cross_type_mixing_is_allowed() {
        let s = spec();
        let a = build_model(ArchId::new(ArchKind::Endgame, 0.125).unwrap(), &s, 1).unwrap();
        let b = build_model(ArchId::new(ArchKind::Nyu, 0.0625).unwrap(), &s, 2).unwrap();
        let (ea, _) = split_extractor(&a).unwrap();
        let (eb, _) = split_extractor(&b).unwrap();
        let wa = ea.output_width().unwrap();
        let wb = eb.output_width().unwrap();
        assert_ne!(wa, wb, "test relies on differing widths");

        let single = combine_extractors(&[ea.clone()], 3).unwrap();
        let head_in = single.store().by_name("L1.w").unwrap().tensor.shape()[0];
        assert_eq!(head_in, wa);

        let mixed = combine_extractors(&[ea.clone(), eb, ea.clone()], 4).unwrap();
        let head_in = mixed.store().by_name("L1.w").unwrap().tensor.shape()[0];
        assert_eq!(head_in, 2 * wa + wb);
        let frozen = mixed
            .store()
            .entries()
            .iter()
            .filter(|e| !e.trainable)
            .count();
        assert_eq!(frozen, mixed.store().len() - 2);
    }

    #[test]
    fn combining_across_encoding_specs_is_rejected() {
        let s1 = spec();
        let s2 = EncodingSpec::new("abcdefghijklmnopqrstuvwxyz0123456789-._", 32).unwrap();
        let a = build_model(ArchId::new(ArchKind::Nyu, 0.125).unwrap(), &s1, 1).unwrap();
        let b = build_model(ArchId::new(ArchKind::Nyu, 0.125).unwrap(), &s2, 1).unwrap();
        let (ea, _) = split_extractor(&a).unwrap();
        let (eb, _) = split_extractor(&b).unwrap();
        assert!(matches!(
            combine_extractors(&[ea, eb], 0),
            Err(Error::EncodingMismatch(_))
        ));
    }

    #[test]
    fn same_seed_rebuilds_identical_models() {
        let s = spec();
        let arch = ArchId::new(ArchKind::Resnet, 0.25).unwrap();
        let a = build_model(arch, &s, 77).unwrap();
        let b = build_model(arch, &s, 77).unwrap();
        assert_eq!(a.arch_hash(), b.arch_hash());
        for (x, y) in a.store().entries().iter().zip(b.store().entries()) {
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
    }

    #[test]
    fn split_then_recombine_preserves_architecture_hash() {
        let s = spec();
        let model = build_model(ArchId::new(ArchKind::Nyu, 0.125).unwrap(), &s, 3).unwrap();
        let (extractor, head) = split_extractor(&model).unwrap();
        let recombined = ModelGraph::concat_parts(&extractor, &head).unwrap();
        assert_eq!(recombined.arch_hash(), model.arch_hash());
    }
}
