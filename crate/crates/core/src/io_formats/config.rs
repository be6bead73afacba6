use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Flat run configuration parsed from `key = value` text.
        ///
        /// Every key has a default; [`RunConfig::parse`] rejects unknown and
        /// duplicate keys, reporting the offending line.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            /// All recognised keys, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| Error::Config {
                            line,
                            msg: format!("cannot parse {value:?} for key `{key}`"),
                        })?;
                    } )*
                    _ => return Err(Error::Config { line, msg: format!("unknown key `{key}`") }),
                }
                Ok(())
            }

            /// Renders every key with its current value; parses back to `self`.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), ConfigValue::render(&self.$name)); )*
                out
            }
        }
    };
}

run_config! {
    /// C, number of classes (one proxy each).
    num_classes: usize = 64,
    /// d, embedding dimension.
    feature_dim: usize = 32,
    /// n, dimension used by the vMF normalizer.
    vmf_dim: usize = 32,
    /// Raw input dimension of the synthetic data.
    input_dim: usize = 32,
    samples_per_class: usize = 500,
    /// Standard deviation of the angular noise around class directions, radians.
    noise_angle_std: f64 = 10f64.to_radians(),
    /// Mean of the log input norm ("quality").
    quality_log_mean: f64 = 0.0,
    quality_log_std: f64 = 0.25,
    data_seed: u64 = 1,
    /// Seed for initialisation, batching and proxy sampling.
    seed: u64 = 7,
    epochs: usize = 20,
    batch_size: usize = 128,
    learning_rate: f64 = 0.1,
    /// Learning rate is halved every this many epochs (0 disables).
    lr_halve_every: usize = 2,
    momentum: f64 = 0.9,
    /// Softmax temperature.
    tau: f64 = 1.0,
    /// Margin = margin_coef · EMA(‖z‖).
    margin_coef: f64 = 0.35,
    mu_norm_init: f64 = 20.0,
    /// Weight of the current batch mean in the norm EMA.
    ema_alpha: f64 = 0.1,
    lambda_pps: f64 = 5.0,
    lambda_pns: f64 = 20.0,
    lambda_pp: f64 = 150.0,
    lambda_sns: f64 = 150.0,
    sns_enabled: bool = false,
    cos_min: f64 = 0.5,
    cos_max: f64 = 0.9,
    /// Track only the first sample of each batch for the epoch mid.
    mid_strict_mode: bool = false,
    lambda_reco: f64 = 0.01,
    lambda_canon: f64 = 0.001,
    lambda_view: f64 = 0.001,
    lambda_flip: f64 = 0.5,
    lambda_perc: f64 = 1.0,
    lambda_smooth: f64 = 1.0,
    view_v1: f64 = 0.01,
    view_v2: f64 = 0.04,
    view_v3: f64 = 0.01,
    /// Append rendered depth/albedo/shading channels to the synthetic inputs.
    recon_augment: bool = false,
}

impl RunConfig {
    /// Large-scale settings: 512-d embeddings, n = 256.
    pub fn large_scale() -> Self {
        Self {
            feature_dim: 512,
            vmf_dim: 256,
            ..Self::default()
        }
    }

    /// The proxy-loss preset listed with the training algorithm (λ_pps = 10).
    pub fn alg_preset() -> Self {
        Self {
            lambda_pps: 10.0,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, found {content:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks cross-field constraints. Errors carry line 0.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config { line: 0, msg });
        if self.num_classes < 1 || self.feature_dim < 1 || self.input_dim < 1 {
            return fail("num_classes, feature_dim and input_dim must be positive".into());
        }
        if self.vmf_dim < 2 {
            return fail(format!("vmf_dim must be at least 2, got {}", self.vmf_dim));
        }
        if self.batch_size == 0 || self.samples_per_class == 0 {
            return fail("batch_size and samples_per_class must be positive".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return fail(format!("ema_alpha must lie in (0, 1], got {}", self.ema_alpha));
        }
        if !(0.0 <= self.cos_min && self.cos_min <= self.cos_max && self.cos_max <= 1.0) {
            return fail(format!(
                "need 0 <= cos_min <= cos_max <= 1, got {} and {}",
                self.cos_min, self.cos_max
            ));
        }
        let lambdas = [
            self.lambda_pps,
            self.lambda_pns,
            self.lambda_pp,
            self.lambda_sns,
            self.lambda_reco,
            self.lambda_canon,
            self.lambda_view,
            self.lambda_flip,
            self.lambda_perc,
            self.lambda_smooth,
        ];
        if lambdas.iter().any(|&l| l < 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if self.mu_norm_init <= 0.0 || self.margin_coef < 0.0 || self.learning_rate <= 0.0 {
            return fail("mu_norm_init and learning_rate must be positive, margin_coef >= 0".into());
        }
        if self.noise_angle_std < 0.0 || self.quality_log_std < 0.0 {
            return fail("noise and quality spreads must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.margin_coef, 0.35);
        assert_eq!(c.mu_norm_init, 20.0);
        assert_eq!((c.lambda_pps, c.lambda_pns, c.lambda_pp), (5.0, 20.0, 150.0));
        assert_eq!((c.cos_min, c.cos_max), (0.5, 0.9));
        assert_eq!((c.lambda_reco, c.lambda_canon, c.lambda_view), (0.01, 0.001, 0.001));
        let p = RunConfig::large_scale();
        assert_eq!((p.feature_dim, p.vmf_dim), (512, 256));
        assert_eq!(RunConfig::alg_preset().lambda_pps, 10.0);
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let c = RunConfig::parse("# header\n tau = 2.5  # inline\n\nnum_classes=10\nsns_enabled = true\n").unwrap();
        assert_eq!(c.tau, 2.5);
        assert_eq!(c.num_classes, 10);
        assert!(c.sns_enabled);
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("tau = 1\n\nbogus = 3\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_is_error() {
        assert!(matches!(
            RunConfig::parse("tau = 1\ntau = 2\n"),
            Err(Error::Config { line: 2, .. })
        ));
    }

    #[test]
    fn bad_value_and_missing_equals() {
        assert!(matches!(
            RunConfig::parse("epochs = many"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("\nepochs 3"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("cos_min = 0.95"),
            Err(Error::Config { line: 0, .. })
        ));
    }

    #[test]
    fn order_independent_and_text_round_trip() {
        let a = RunConfig::parse("tau = 0.5\nseed = 9\n").unwrap();
        let b = RunConfig::parse("seed = 9\ntau = 0.5\n").unwrap();
        assert_eq!(a, b);
        let mut c = RunConfig::default();
        c.noise_angle_std = 0.123456789;
        c.recon_augment = true;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::KEYS.len(), c.to_text().lines().count());
    }
}
