//! Plain-text training configuration.
//!
//! One `key = value` pair per line; `#` starts a comment, blank lines are
//! ignored and values may be quoted. Keys are the [`TrainConfig`] field
//! names. Unknown or repeated keys are errors.
//!
//! ```text
//! k = 4
//! stages = 5-10-20-40
//! lr0 = 0.01
//! epochs = 50
//! ```

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use cbcn_core::train::{GradientMode, TrainConfig};

use crate::{Error, Result};

pub const KEYS: &[&str] = &[
    "k",
    "stages",
    "lr0",
    "lr_decay_factor",
    "lr_decay_period",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "seed",
    "center_lambda",
    "center_alpha",
    "center_epochs",
    "gradient_mode",
    "surrogate_amplitude",
    "surrogate_sigma",
    "batch_norm",
    "dropout",
    "pad_to_32",
    "bn_recalibration",
];

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::ConfigSyntax {
        line,
        message: format!("invalid value `{raw}` for `{key}`"),
    })
}

fn parse_bool(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::ConfigSyntax {
            line,
            message: format!("invalid boolean `{raw}` for `{key}`"),
        }),
    }
}

fn parse_stages(raw: &str, line: usize) -> Result<Vec<usize>> {
    raw.split(['-', ','])
        .map(|s| value::<usize>("stages", s.trim(), line))
        .collect()
}

/// Applies one assignment; `line` is only used in error messages.
pub fn set(config: &mut TrainConfig, key: &str, raw: &str, line: usize) -> Result<()> {
    match key {
        "k" => config.k = value(key, raw, line)?,
        "stages" => config.stages = parse_stages(raw, line)?,
        "lr0" => config.lr0 = value(key, raw, line)?,
        "lr_decay_factor" => config.lr_decay_factor = value(key, raw, line)?,
        "lr_decay_period" => config.lr_decay_period = value(key, raw, line)?,
        "momentum" => config.momentum = value(key, raw, line)?,
        "weight_decay" => config.weight_decay = value(key, raw, line)?,
        "epochs" => config.epochs = value(key, raw, line)?,
        "batch_size" => config.batch_size = value(key, raw, line)?,
        "seed" => config.seed = value(key, raw, line)?,
        "center_lambda" => config.center_lambda = value(key, raw, line)?,
        "center_alpha" => config.center_alpha = value(key, raw, line)?,
        "center_epochs" => config.center_epochs = value(key, raw, line)?,
        "gradient_mode" => {
            config.gradient_mode = GradientMode::parse(raw).ok_or_else(|| Error::ConfigSyntax {
                line,
                message: format!("gradient_mode must be gaussian, clip or poly, got `{raw}`"),
            })?
        }
        "surrogate_amplitude" => config.surrogate_amplitude = value(key, raw, line)?,
        "surrogate_sigma" => config.surrogate_sigma = value(key, raw, line)?,
        "batch_norm" => config.batch_norm = parse_bool(key, raw, line)?,
        "dropout" => config.dropout = value(key, raw, line)?,
        "pad_to_32" => config.pad_to_32 = parse_bool(key, raw, line)?,
        "bn_recalibration" => config.bn_recalibration = value(key, raw, line)?,
        _ => {
            return Err(Error::UnknownKey {
                key: key.to_string(),
                line,
            })
        }
    }
    Ok(())
}

/// Parses and validates a configuration; missing keys keep their defaults.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let raw = raw.trim().trim_matches('"');
        if !KEYS.contains(&key) {
            return Err(Error::UnknownKey {
                key: key.to_string(),
                line,
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::ConfigSyntax {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        set(&mut config, key, raw, line)?;
    }
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Every key with its value, in [`KEYS`] order.
pub fn entries(config: &TrainConfig) -> Vec<(&'static str, String)> {
    let stages = config.stages.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
    vec![
        ("k", config.k.to_string()),
        ("stages", stages),
        ("lr0", config.lr0.to_string()),
        ("lr_decay_factor", config.lr_decay_factor.to_string()),
        ("lr_decay_period", config.lr_decay_period.to_string()),
        ("momentum", config.momentum.to_string()),
        ("weight_decay", config.weight_decay.to_string()),
        ("epochs", config.epochs.to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("seed", config.seed.to_string()),
        ("center_lambda", config.center_lambda.to_string()),
        ("center_alpha", config.center_alpha.to_string()),
        ("center_epochs", config.center_epochs.to_string()),
        ("gradient_mode", config.gradient_mode.name().to_string()),
        ("surrogate_amplitude", config.surrogate_amplitude.to_string()),
        ("surrogate_sigma", config.surrogate_sigma.to_string()),
        ("batch_norm", config.batch_norm.to_string()),
        ("dropout", config.dropout.to_string()),
        ("pad_to_32", config.pad_to_32.to_string()),
        ("bn_recalibration", config.bn_recalibration.to_string()),
    ]
}

/// Renders a configuration that [`parse`] reads back unchanged (floats use
/// the shortest round-trip representation).
pub fn render(config: &TrainConfig) -> String {
    entries(config).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(parse(&render(&c)).unwrap(), c);
        assert_eq!(entries(&c).len(), KEYS.len());
        for ((k, _), key) in entries(&c).iter().zip(KEYS) {
            assert_eq!(k, key);
        }
    }

    #[test]
    fn comments_quotes_and_stage_syntax() {
        let c = parse("# lenet\nk = 8  # orientations\nstages = \"4,8\"\n\nseed=7\n").unwrap();
        assert_eq!((c.k, c.stages.clone(), c.seed), (8, vec![4, 8], 7));
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        match parse("k = 4\nlearning_rate = 0.1\n") {
            Err(Error::UnknownKey { key, line }) => assert_eq!((key.as_str(), line), ("learning_rate", 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("k = 4\nk = 2\n"), Err(Error::ConfigSyntax { line: 2, .. })));
        assert!(matches!(parse("k 4\n"), Err(Error::ConfigSyntax { line: 1, .. })));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["k = 3", "lr0 = -1", "batch_norm = maybe", "gradient_mode = clip", "stages = 5-x"] {
            let e = parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }
}
