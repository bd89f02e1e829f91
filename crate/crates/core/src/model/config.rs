use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::swin::SwinConfig;

/// Architecture and initialization settings of a [`super::TeslNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeslNetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Encoder widths `[c1, c2]`; `c2 = 2·c1`.
    pub widths: [usize; 2],
    pub swin: SwinConfig,
    /// ConvLSTM hidden width at the full- and half-resolution skips.
    pub lstm_hidden: [usize; 2],
    pub lstm_kernel: usize,
    pub dws_kernel: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Paper, Preset::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?} (expected paper or desk)")))
    }

    pub fn config(self) -> TeslNetConfig {
        match self {
            Preset::Paper => TeslNetConfig::paper(),
            Preset::Desk => TeslNetConfig::desk(),
        }
    }
}

impl Default for TeslNetConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TeslNetConfig {
    pub fn paper() -> Self {
        Self {
            input_size: 256,
            in_channels: 3,
            widths: [32, 64],
            swin: SwinConfig::default(),
            lstm_hidden: [32, 64],
            lstm_kernel: 3,
            dws_kernel: 3,
            seed: 42,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 64,
            widths: [8, 16],
            swin: SwinConfig {
                window: 4,
                ..SwinConfig::default()
            },
            lstm_hidden: [8, 16],
            ..Self::paper()
        }
    }

    /// Smallest configuration used for end-to-end finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            widths: [4, 8],
            swin: SwinConfig {
                window: 4,
                ..SwinConfig::default()
            },
            lstm_hidden: [4, 8],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let [c1, c2] = self.widths;
        let m = self.swin.window;
        if self.input_size == 0 || self.in_channels == 0 || c1 == 0 {
            return bad("input size, input channels and widths must be positive".into());
        }
        if c2 != 2 * c1 {
            return bad(format!("stage-2 width {c2} must be twice stage-1 width {c1}"));
        }
        if !self.input_size.is_multiple_of(4) {
            return bad(format!("input size {} is not divisible by 4", self.input_size));
        }
        if m == 0 {
            return bad("window size must be positive".into());
        }
        for extent in [self.input_size / 2, self.input_size / 4] {
            if extent % m != 0 {
                return bad(format!(
                    "pooled extent {extent} (input {}) is not divisible by window size {m}",
                    self.input_size
                ));
            }
        }
        for c in self.widths {
            if self.swin.heads == 0 || c % self.swin.heads != 0 {
                return bad(format!("width {c} is not divisible by {} attention heads", self.swin.heads));
            }
        }
        if self.swin.mlp_ratio == 0 || self.lstm_hidden.contains(&0) {
            return bad("mlp ratio and ConvLSTM widths must be positive".into());
        }
        for k in [self.lstm_kernel, self.dws_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel size {k} must be odd"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the architecture fields (everything except the seed).
    pub fn fingerprint(&self) -> String {
        let arch = TeslNetConfig { seed: 0, ..self.clone() };
        let json = serde_json::to_string(&arch).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            p.config().validate().unwrap();
            assert_eq!(Preset::from_name(p.name()).unwrap(), p);
        }
        TeslNetConfig::tiny().validate().unwrap();
        assert!(Preset::from_name("huge").is_err());
    }

    #[test]
    fn window_seven_rejected_naming_extent() {
        let mut c = TeslNetConfig::paper();
        c.swin.window = 7;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("128"), "{msg}");
    }

    #[test]
    fn width_must_double() {
        let mut c = TeslNetConfig::desk();
        c.widths = [8, 24];
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_seed_only() {
        let a = TeslNetConfig::desk();
        let b = TeslNetConfig { seed: 7, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), TeslNetConfig::paper().fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
