use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder stage whose output can feed an extra skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderStage {
    Stem,
    Entry1,
    Entry2,
    Entry3,
    Middle1,
    Middle2,
    Middle3,
}

impl EncoderStage {
    pub const ALL: [EncoderStage; 7] = [
        EncoderStage::Stem,
        EncoderStage::Entry1,
        EncoderStage::Entry2,
        EncoderStage::Entry3,
        EncoderStage::Middle1,
        EncoderStage::Middle2,
        EncoderStage::Middle3,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderStage::Stem => "stem",
            EncoderStage::Entry1 => "entry1",
            EncoderStage::Entry2 => "entry2",
            EncoderStage::Entry3 => "entry3",
            EncoderStage::Middle1 => "middle1",
            EncoderStage::Middle2 => "middle2",
            EncoderStage::Middle3 => "middle3",
        }
    }

    /// Output stride of the stage's output.
    pub fn stride(&self) -> usize {
        match self {
            EncoderStage::Stem => 2,
            EncoderStage::Entry1 => 4,
            EncoderStage::Entry2 => 8,
            _ => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub num_classes: usize,
    /// Width of the first entry stage; the stem uses half, later stages
    /// double it up to `4 * base_channels`.
    pub base_channels: usize,
    pub atrous_rates: Vec<usize>,
    pub output_stride: usize,
    pub aspp_channels: usize,
    pub decoder_channels: usize,
    pub low_level_channels: usize,
    pub skip_reduce_channels: usize,
    pub deep_u_lab: bool,
    pub skip_taps: Vec<EncoderStage>,
    pub include_image_pooling_branch: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            base_channels: 32,
            atrous_rates: vec![6, 12, 18],
            output_stride: 16,
            aspp_channels: 64,
            decoder_channels: 64,
            low_level_channels: 16,
            skip_reduce_channels: 16,
            deep_u_lab: false,
            skip_taps: vec![
                EncoderStage::Entry1,
                EncoderStage::Entry2,
                EncoderStage::Middle1,
            ],
            include_image_pooling_branch: true,
        }
    }
}

impl NetworkSpec {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("network spec: {msg}")));
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.output_stride != 16 {
            return fail(format!("output_stride must be 16, got {}", self.output_stride));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return fail(format!(
                "base_channels must be even and at least 2, got {}",
                self.base_channels
            ));
        }
        for (name, v) in [
            ("aspp_channels", self.aspp_channels),
            ("decoder_channels", self.decoder_channels),
            ("low_level_channels", self.low_level_channels),
            ("skip_reduce_channels", self.skip_reduce_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.atrous_rates.is_empty()
            || self.atrous_rates[0] == 0
            || self.atrous_rates.windows(2).any(|w| w[0] >= w[1])
        {
            return fail(format!(
                "atrous_rates must be positive and strictly increasing, got {:?}",
                self.atrous_rates
            ));
        }
        if self.deep_u_lab {
            if self.skip_taps.len() != 3 {
                return fail(format!(
                    "deep_u_lab needs exactly 3 skip_taps, got {}",
                    self.skip_taps.len()
                ));
            }
            let mut seen = self.skip_taps.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != 3 {
                return fail("skip_taps must be distinct".into());
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: EncoderStage) -> usize {
        let c = self.base_channels;
        match stage {
            EncoderStage::Stem => c / 2,
            EncoderStage::Entry1 => c,
            EncoderStage::Entry2 => 2 * c,
            _ => 4 * c,
        }
    }

    pub fn encoder_channels(&self) -> usize {
        self.stage_channels(EncoderStage::Middle3)
    }

    /// Channels entering ASPP: the encoder output plus one reduced tensor
    /// per extra skip.
    pub fn aspp_input_channels(&self) -> usize {
        let skips = if self.deep_u_lab { self.skip_taps.len() } else { 0 };
        self.encoder_channels() + skips * self.skip_reduce_channels
    }

    pub fn aspp_branches(&self) -> usize {
        1 + self.atrous_rates.len() + usize::from(self.include_image_pooling_branch)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        crate::fsio::sha256_hex(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        NetworkSpec::default().validate().unwrap();
        let s = NetworkSpec {
            deep_u_lab: true,
            ..Default::default()
        };
        s.validate().unwrap();
        assert_eq!(s.aspp_input_channels(), 128 + 48);
    }

    #[test]
    fn rejects_inconsistent() {
        let bad = [
            NetworkSpec {
                output_stride: 8,
                ..Default::default()
            },
            NetworkSpec {
                atrous_rates: vec![6, 6, 18],
                ..Default::default()
            },
            NetworkSpec {
                deep_u_lab: true,
                skip_taps: vec![EncoderStage::Entry1],
                ..Default::default()
            },
            NetworkSpec {
                num_classes: 1,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Validation(_))), "{s:?}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = NetworkSpec::default();
        assert_eq!(a.hash(), NetworkSpec::default().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), NetworkSpec::with_classes(2).hash());
    }

    #[test]
    fn json_round_trip() {
        let s = NetworkSpec {
            deep_u_lab: true,
            ..Default::default()
        };
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"entry1\""));
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<NetworkSpec>(r#"{"bogus": 1}"#).is_err());
    }
}
