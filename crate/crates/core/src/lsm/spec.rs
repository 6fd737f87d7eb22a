use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalarPreset {
    Lightning,
    RetNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OuterPreset {
    Gfw,
    GateLoop,
}

/// The update-rule family of one linear sequence modeling method.
///
/// With row vectors `k_s, v_s`, state `M_s` (`d_k×d_v`) and pre-activation
/// gates described on [`GateSet`]:
///
/// | instance | update |
/// |---|---|
/// | `Bla`, `Rebased` | `M + φ(k)ᵀv` |
/// | `ScalarDecay` | `a·M + φ(k)ᵀv`, `a` fixed per head |
/// | `Gla`, `Rwkv6` | `diag(α)·M + φ(k)ᵀv` |
/// | `DeltaNet` | `(I − a·k̂ᵀk̂)·M + b·k̂ᵀv` |
/// | `GatedDeltaNet` | `α·(I − k̂ᵀk̂)·M + b·k̂ᵀv` |
/// | `OuterGate` | `(αᵀβ) ⊙ M + φ(k)ᵀv` |
/// | `Ttt` | `M − η·k̂ᵀ(k̂M − v)` |
/// | `Titans` | `α·M − η·k̂ᵀ(k̂M − v)` |
/// | `S4` | `exp(−Δᵢ·A_ij) ⊙ M + (Δ⊙b)ᵀv` |
/// | `Mamba` | `exp(−Δ_s,i·A_ij) ⊙ M + (Δ_s⊙k)ᵀv` |
/// | `Mamba2` | `exp(−a·Δ_s)·M + Δ_s·kᵀv` |
/// | `Hgrn2` | `diag(α)·M + (1 − α)ᵀv` |
/// | `Rwkv7` | `diag(α)·M − η·k̂ᵀ(k̂M − v)` |
///
/// `k̂` is the L2-normalized feature-mapped key. The last three columns of
/// the test-time-training rows are gradient descent steps on
/// `½‖kM − v‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Instance {
    Bla,
    ScalarDecay(ScalarPreset),
    Gla,
    DeltaNet,
    GatedDeltaNet,
    Rebased,
    OuterGate(OuterPreset),
    Ttt,
    Titans,
    S4,
    Mamba,
    Mamba2,
    Hgrn2,
    Rwkv6,
    Rwkv7,
}

impl Instance {
    pub const ALL: [Instance; 17] = [
        Instance::Bla,
        Instance::ScalarDecay(ScalarPreset::Lightning),
        Instance::ScalarDecay(ScalarPreset::RetNet),
        Instance::Gla,
        Instance::DeltaNet,
        Instance::Rebased,
        Instance::OuterGate(OuterPreset::Gfw),
        Instance::OuterGate(OuterPreset::GateLoop),
        Instance::GatedDeltaNet,
        Instance::Ttt,
        Instance::Titans,
        Instance::S4,
        Instance::Mamba,
        Instance::Mamba2,
        Instance::Hgrn2,
        Instance::Rwkv6,
        Instance::Rwkv7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Instance::Bla => "bla",
            Instance::ScalarDecay(ScalarPreset::Lightning) => "lightning",
            Instance::ScalarDecay(ScalarPreset::RetNet) => "retnet",
            Instance::Gla => "gla",
            Instance::DeltaNet => "deltanet",
            Instance::GatedDeltaNet => "gated-deltanet",
            Instance::Rebased => "rebased",
            Instance::OuterGate(OuterPreset::Gfw) => "gfw",
            Instance::OuterGate(OuterPreset::GateLoop) => "gateloop",
            Instance::Ttt => "ttt",
            Instance::Titans => "titans",
            Instance::S4 => "s4",
            Instance::Mamba => "mamba",
            Instance::Mamba2 => "mamba2",
            Instance::Hgrn2 => "hgrn2",
            Instance::Rwkv6 => "rwkv6",
            Instance::Rwkv7 => "rwkv7",
        }
    }

    /// Transition depends on the state itself (projection / test-time
    /// gradient rows); these run token by token inside a chunk.
    pub fn is_projection(self) -> bool {
        matches!(
            self,
            Instance::DeltaNet | Instance::GatedDeltaNet | Instance::Ttt | Instance::Titans | Instance::Rwkv7
        )
    }

    /// Decay varies along the value axis too, so no normalizer column can
    /// share it.
    pub fn has_full_decay(self) -> bool {
        matches!(self, Instance::OuterGate(_) | Instance::S4 | Instance::Mamba)
    }

    pub fn is_decay_free(self) -> bool {
        matches!(self, Instance::Bla | Instance::Rebased)
    }

    pub fn default_feature_map(self) -> FeatureMap {
        match self {
            Instance::Bla => FeatureMap::EluPlusOne,
            Instance::Rebased => FeatureMap::Squared,
            _ => FeatureMap::Identity,
        }
    }

    pub fn default_normalizer(self) -> bool {
        self.is_decay_free()
    }

    /// Which gate tensors this instance reads.
    pub fn gate_layout(self, d_k: usize, d_v: usize) -> GateLayout {
        use GateShape::*;
        let mut g = GateLayout::default();
        match self {
            Instance::Bla | Instance::Rebased | Instance::ScalarDecay(_) => {}
            Instance::Gla | Instance::Hgrn2 | Instance::Rwkv6 | Instance::Mamba => g.decay = Some(PerToken(d_k)),
            Instance::DeltaNet | Instance::GatedDeltaNet | Instance::Titans => {
                g.decay = Some(PerToken(1));
                g.rate = Some(PerToken(1));
            }
            Instance::OuterGate(_) => {
                g.decay = Some(PerToken(d_k));
                g.decay_col = Some(PerToken(d_v));
            }
            Instance::Ttt | Instance::Mamba2 => g.rate = Some(PerToken(1)),
            Instance::Rwkv7 => {
                g.decay = Some(PerToken(d_k));
                g.rate = Some(PerToken(1));
            }
            Instance::S4 => {
                g.step = Some(Static(1, d_k));
                g.input = Some(Static(1, d_k));
            }
        }
        match self {
            Instance::S4 | Instance::Mamba => g.transition = Some(Static(d_k, d_v)),
            Instance::Mamba2 => g.transition = Some(Static(1, 1)),
            _ => {}
        }
        g
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Instance {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Instance> for String {
    fn from(i: Instance) -> String {
        i.name().to_string()
    }
}

impl FromStr for Instance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Instance::ALL
            .into_iter()
            .find(|i| i.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown LSM instance `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    EluPlusOne,
    Squared,
}

impl FeatureMap {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            FeatureMap::Identity => x,
            FeatureMap::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            FeatureMap::Squared => x * x,
        }
    }

    pub fn is_positive(self) -> bool {
        self == FeatureMap::EluPlusOne
    }
}

impl FromStr for FeatureMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FeatureMap::Identity),
            "elu_plus_one" | "elu+1" => Ok(FeatureMap::EluPlusOne),
            "squared" => Ok(FeatureMap::Squared),
            _ => Err(Error::Config(format!("unknown feature map `{s}`"))),
        }
    }
}

/// Elementwise feature map on a vector.
pub fn feature_map(x: &[f64], kind: FeatureMap) -> Vec<f64> {
    x.iter().map(|&v| kind.apply_scalar(v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateShape {
    /// `N × width`, one row per token.
    PerToken(usize),
    /// Time-invariant `rows × cols`.
    Static(usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateLayout {
    pub decay: Option<GateShape>,
    pub decay_col: Option<GateShape>,
    pub rate: Option<GateShape>,
    pub step: Option<GateShape>,
    pub input: Option<GateShape>,
    pub transition: Option<GateShape>,
}

/// Pre-activation gate inputs for one head.
///
/// Activations per field:
/// - `decay`: `σ(x)` for Gla, Hgrn2, OuterGate (row gate), DeltaNet (erase
///   strength `a`), GatedDeltaNet and Titans; `exp(−exp(x))` for Rwkv6 and
///   Rwkv7; `softplus(x)` (step size Δ) for Mamba.
/// - `decay_col`: `σ(x)`, the OuterGate column gate.
/// - `rate`: `σ(x)` for DeltaNet/GatedDeltaNet (write strength `b`) and the
///   learning rate `η` of Ttt/Titans/Rwkv7; `softplus(x)` (Δ) for Mamba2.
/// - `step`: `softplus(x)`, S4 step size. `input`: S4 input vector `b`, raw.
/// - `transition`: `exp(x)`, the positive S4/Mamba matrix `A` or the Mamba2
///   scalar `a`.
#[derive(Clone, Debug)]
pub struct GateSet<T> {
    pub decay: Option<T>,
    pub decay_col: Option<T>,
    pub rate: Option<T>,
    pub step: Option<T>,
    pub input: Option<T>,
    pub transition: Option<T>,
}

impl<T> Default for GateSet<T> {
    fn default() -> Self {
        Self { decay: None, decay_col: None, rate: None, step: None, input: None, transition: None }
    }
}

impl<T> GateSet<T> {
    pub fn map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<GateSet<U>, E> {
        let mut g = |x: &Option<T>| x.as_ref().map(&mut f).transpose();
        Ok(GateSet {
            decay: g(&self.decay)?,
            decay_col: g(&self.decay_col)?,
            rate: g(&self.rate)?,
            step: g(&self.step)?,
            input: g(&self.input)?,
            transition: g(&self.transition)?,
        })
    }

    pub fn fields(&self) -> [(&'static str, Option<&T>); 6] {
        [
            ("decay", self.decay.as_ref()),
            ("decay_col", self.decay_col.as_ref()),
            ("rate", self.rate.as_ref()),
            ("step", self.step.as_ref()),
            ("input", self.input.as_ref()),
            ("transition", self.transition.as_ref()),
        ]
    }
}

/// Configuration of one LSM head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmSpec {
    pub instance: Instance,
    pub feature_map: FeatureMap,
    pub use_normalizer: bool,
    pub d_k: usize,
    pub d_v: usize,
    /// Fixed decay of `ScalarDecay` heads.
    #[serde(default)]
    pub scalar_decay: Option<f64>,
}

impl LsmSpec {
    pub fn new(instance: Instance, d_k: usize, d_v: usize) -> Self {
        Self {
            instance,
            feature_map: instance.default_feature_map(),
            use_normalizer: instance.default_normalizer(),
            d_k,
            d_v,
            scalar_decay: match instance {
                Instance::ScalarDecay(p) => Some(preset_decay(p, 0, 1)),
                _ => None,
            },
        }
    }

    pub fn with_feature_map(mut self, fm: FeatureMap) -> Self {
        self.feature_map = fm;
        self
    }

    pub fn with_normalizer(mut self, on: bool) -> Self {
        self.use_normalizer = on;
        self
    }

    pub fn with_scalar_decay(mut self, a: f64) -> Self {
        self.scalar_decay = Some(a);
        self
    }

    /// Copy configured for head `h` of `heads`; only scalar-decay presets
    /// differ between heads.
    pub fn for_head(&self, h: usize, heads: usize) -> Self {
        let mut s = self.clone();
        if let Instance::ScalarDecay(p) = self.instance {
            s.scalar_decay = Some(preset_decay(p, h, heads));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config(format!("{}: head dims must be positive", self.instance)));
        }
        if self.use_normalizer && self.instance.has_full_decay() {
            return Err(Error::Config(format!(
                "{}: the normalizer needs a decay shared across value columns",
                self.instance
            )));
        }
        if let Instance::ScalarDecay(_) = self.instance {
            match self.scalar_decay {
                Some(a) if a > 0.0 && a <= 1.0 => {}
                other => {
                    return Err(Error::Config(format!(
                        "{}: scalar decay must lie in (0, 1], got {other:?}",
                        self.instance
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn gate_layout(&self) -> GateLayout {
        self.instance.gate_layout(self.d_k, self.d_v)
    }
}

/// Per-head fixed decay: RetNet uses `1 − 2^(−5−h)`, Lightning an
/// ALiBi-style slope `exp(−2^(−8(h+1)/H))`.
pub fn preset_decay(preset: ScalarPreset, head: usize, heads: usize) -> f64 {
    match preset {
        ScalarPreset::RetNet => 1.0 - 2f64.powi(-5 - head as i32),
        ScalarPreset::Lightning => {
            let slope = 2f64.powf(-8.0 * (head + 1) as f64 / heads.max(1) as f64);
            (-slope).exp()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_distinct_names_round_trip() {
        let mut names: Vec<_> = Instance::ALL.iter().map(|i| i.name()).collect();
        for i in Instance::ALL {
            assert_eq!(i.name().parse::<Instance>().unwrap(), i);
        }
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 17);
    }

    #[test]
    fn feature_map_examples() {
        assert_eq!(feature_map(&[1.0, -1.0], FeatureMap::Identity), vec![1.0, -1.0]);
        assert_eq!(feature_map(&[0.0, 0.0], FeatureMap::EluPlusOne), vec![1.0, 1.0]);
        assert_eq!(feature_map(&[2.0, -3.0], FeatureMap::Squared), vec![4.0, 9.0]);
    }

    #[test]
    fn preset_decays_in_unit_interval() {
        for h in 0..8 {
            for p in [ScalarPreset::RetNet, ScalarPreset::Lightning] {
                let a = preset_decay(p, h, 8);
                assert!(a > 0.0 && a < 1.0, "{p:?} {h} {a}");
            }
        }
        assert_eq!(preset_decay(ScalarPreset::RetNet, 0, 4), 1.0 - 1.0 / 32.0);
    }

    #[test]
    fn normalizer_rejected_for_full_decay() {
        let s = LsmSpec::new(Instance::S4, 2, 2).with_normalizer(true);
        assert!(s.validate().is_err());
        assert!(LsmSpec::new(Instance::Bla, 2, 2).validate().is_ok());
    }
}
