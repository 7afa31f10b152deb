//! `key = value` configuration files with `[net]`, `[train]`, `[data]`,
//! `[eal]` and `[rf]` sections and `#` comments.
//!
//! `[rf]` maps path names to comma-separated layer lists such as
//! `3x3/s1/d1, 3x3/s1/d4` for receptive-field tables. Unknown sections and
//! keys, duplicate keys and malformed values are errors naming the line.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::data::SceneConfig;
use crate::eal::EalConfig;
use crate::error::{Error, Result};
use crate::mrfm::LayerSpec;
use crate::segnet::{MrfmMode, NetConfig};
use crate::train::{LossKind, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: SceneConfig,
    pub eal: EalConfig,
    pub rf: Vec<(String, LayerSpec)>,
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

fn set_train(t: &mut TrainConfig, loss: &mut Option<String>, key: &str, value: &str) -> Result<()> {
    match key {
        "base_lr" => t.base_lr = num(key, value)?,
        "power" => t.power = num(key, value)?,
        "max_iter" => t.max_iter = num(key, value)?,
        "momentum" => t.momentum = num(key, value)?,
        "weight_decay" => t.weight_decay = num(key, value)?,
        "batch_size" => t.batch_size = num(key, value)?,
        "crop" => t.crop = num(key, value)?,
        "loss" => match value {
            "ce" | "eal" => *loss = Some(value.to_string()),
            _ => {
                return Err(Error::config(format!(
                    "loss: expected ce or eal, got '{value}'"
                )))
            }
        },
        "augment" => t.augment = boolean(key, value)?,
        "eval_every" => t.eval_every = num(key, value)?,
        "band" => t.band = num(key, value)?,
        "stage2_lr_scale" => t.stage2.lr_scale = num(key, value)?,
        "stage2_freeze_norm" => t.stage2.freeze_norm = boolean(key, value)?,
        "stage2_iters" => t.stage2.iters = Some(num(key, value)?),
        _ => return Err(Error::config(format!("unknown key '{key}' in [train]"))),
    }
    Ok(())
}

fn set_data(d: &mut SceneConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "canvas" => {
            let (h, w) = value
                .split_once('x')
                .ok_or_else(|| Error::config(format!("canvas: expected HxW, got '{value}'")))?;
            d.height = num(key, h.trim())?;
            d.width = num(key, w.trim())?;
        }
        "classes" => d.num_classes = num(key, value)?,
        "min_px" => d.min_px = num(key, value)?,
        "max_px" => d.max_px = num(key, value)?,
        "min_shapes" => d.min_shapes = num(key, value)?,
        "max_shapes" => d.max_shapes = num(key, value)?,
        "background" => d.background = num(key, value)?,
        "ignore_id" => d.ignore_id = num(key, value)?,
        "noise" => d.noise = num(key, value)?,
        "color_bias" => d.color_bias = num(key, value)?,
        _ => return Err(Error::config(format!("unknown key '{key}' in [data]"))),
    }
    Ok(())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        let mut loss: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let at = |e: Error| match e {
                Error::Config(m) => Error::config(format!("line {lineno}: {m}")),
                other => other,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(Error::config(format!("malformed section header '{line}'"))))?
                    .trim();
                if !["net", "train", "data", "eal", "rf"].contains(&name) {
                    return Err(at(Error::config(format!("unknown section [{name}]"))));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::config(format!("expected key = value, got '{line}'"))))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return Err(at(Error::config(format!(
                    "key '{key}' appears before any section"
                ))));
            };
            if key.is_empty() {
                return Err(at(Error::config("empty key".to_string())));
            }
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(at(Error::config(format!(
                    "duplicate key '{key}' in [{sec}]"
                ))));
            }
            let result = match sec {
                "net" => {
                    if NetConfig::KEYS.contains(&key) {
                        cfg.net.set(key, value)
                    } else {
                        Err(Error::config(format!("unknown key '{key}' in [net]")))
                    }
                }
                "train" => set_train(&mut cfg.train, &mut loss, key, value),
                "data" => set_data(&mut cfg.data, key, value),
                "eal" => match key {
                    "k" => num(key, value).map(|v| cfg.eal.k = v),
                    "m" => num(key, value).map(|v| cfg.eal.m = v),
                    _ => Err(Error::config(format!("unknown key '{key}' in [eal]"))),
                },
                _ => LayerSpec::parse(value).map(|spec| cfg.rf.push((key.to_string(), spec))),
            };
            result.map_err(at)?;
        }

        let has = |sec: &str, key: &str| seen.contains(&(sec.to_string(), key.to_string()));
        match (has("net", "num_classes"), has("data", "classes")) {
            (true, true) if cfg.net.num_classes != cfg.data.num_classes => {
                return Err(Error::config(format!(
                    "[net] num_classes = {} disagrees with [data] classes = {}",
                    cfg.net.num_classes, cfg.data.num_classes
                )));
            }
            (true, false) => cfg.data.num_classes = cfg.net.num_classes,
            (false, true) => cfg.net.num_classes = cfg.data.num_classes,
            _ => {}
        }
        if cfg.net.mrfm_mode == MrfmMode::Lite && !has("net", "mrfm_dilation") {
            cfg.net.mrfm_dilation = 2;
        }
        cfg.eal.validate()?;
        if loss.as_deref() == Some("eal") {
            cfg.train.loss = LossKind::Eal(cfg.eal);
        }
        cfg.net.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(
            Config::parse("# only a comment\n\n").unwrap(),
            Config::default()
        );
    }

    #[test]
    fn sections_and_values() {
        let cfg = Config::parse(
            "[net]\nmrfm_mode = lite # two-stage\n[train]\nmax_iter=10\nloss = eal\n[eal]\nk = 7\nm = 5\n[data]\nclasses = 4\ncanvas = 64x96\n[rf]\nwide = 3x3/s1/d4\n",
        )
        .unwrap();
        assert_eq!(cfg.net.mrfm_mode, MrfmMode::Lite);
        assert_eq!(cfg.net.mrfm_dilation, 2);
        assert_eq!(cfg.train.max_iter, 10);
        assert_eq!(cfg.train.loss, LossKind::Eal(EalConfig { k: 7, m: 5 }));
        assert_eq!((cfg.data.height, cfg.data.width), (64, 96));
        assert_eq!(cfg.rf[0].0, "wide");
    }

    #[test]
    fn errors_name_line_and_key() {
        let cases = [
            ("[net]\nbogus = 1\n", "line 2: unknown key 'bogus' in [net]"),
            (
                "max_iter = 3\n",
                "line 1: key 'max_iter' appears before any section",
            ),
            ("[model]\n", "line 1: unknown section [model]"),
            (
                "[train]\nmax_iter = 1\nmax_iter = 2\n",
                "line 3: duplicate key 'max_iter' in [train]",
            ),
            (
                "[train]\nmax_iter = many\n",
                "line 2: max_iter: cannot parse 'many'",
            ),
            ("[train]\njust words\n", "line 2: expected key = value"),
            ("[net]\nnum_classes = 3\n[data]\nclasses = 5\n", "disagrees"),
        ];
        for (text, needle) in cases {
            let err = Config::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }
}
