//! `key = value` run manifests.
//!
//! Keys are the training flag names, with `-` or `_`. Blank lines and text
//! after `#` are ignored.
//!
//! ```text
//! # thin objects
//! grid-res = 64
//! lambda_lap = 0.5
//! offsets = false
//! ```

use std::str::FromStr;

use crate::args::TrainFlags;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Option<T>, ConfigError> {
    raw.parse().map(Some).map_err(|_| ConfigError {
        line,
        msg: format!("invalid value '{raw}' for {key}"),
    })
}

pub fn parse(text: &str) -> Result<TrainFlags, ConfigError> {
    let mut flags = TrainFlags::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, val)) = content.split_once('=') else {
            return Err(ConfigError {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            });
        };
        let key = key.trim().replace('-', "_");
        let val = val.trim();
        match key.as_str() {
            "grid_res" => flags.grid_res = value(line, &key, val)?,
            "train_res" => flags.train_res = value(line, &key, val)?,
            "iters" => flags.iters = value(line, &key, val)?,
            "lr" => flags.lr = value(line, &key, val)?,
            "beta1" => flags.beta1 = value(line, &key, val)?,
            "beta2" => flags.beta2 = value(line, &key, val)?,
            "eps" => flags.eps = value(line, &key, val)?,
            "lambda_lap" => flags.lambda_lap = value(line, &key, val)?,
            "lambda_sdf" => flags.lambda_sdf = value(line, &key, val)?,
            "batch_views" => flags.batch_views = value(line, &key, val)?,
            "gamma" => flags.gamma = value(line, &key, val)?,
            "offsets" | "offsets_enabled" => flags.offsets = value(line, &key, val)?,
            "seed" => flags.seed = value(line, &key, val)?,
            "snapshot_every" => flags.snapshot_every = value(line, &key, val)?,
            _ => {
                return Err(ConfigError {
                    line,
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
    }
    Ok(flags)
}

/// `file` overridden by every flag set in `cli`.
pub fn merge(file: &TrainFlags, cli: &TrainFlags) -> TrainFlags {
    macro_rules! pick {
        ($($f:ident),*) => {
            TrainFlags { $($f: cli.$f.or(file.$f)),* }
        };
    }
    pick!(grid_res, train_res, iters, lr, beta1, beta2, eps, lambda_lap, lambda_sdf, batch_views, gamma, offsets, seed, snapshot_every)
}
