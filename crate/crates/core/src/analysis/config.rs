//! Training configuration files: `key = value` lines under `[model]`,
//! `[train]`, `[data]` and `[output]` headers. Unknown sections, unknown
//! keys and repeated keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::mim::{DataSource, TrainConfig};

const SECTIONS: [&str; 4] = ["model", "train", "data", "output"];

fn parse<V: FromStr>(section: &str, key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::config(format!("[{section}] {key}: cannot parse `{value}`")))
}

/// Parses a configuration text. Relative paths are resolved against `base`.
pub fn train_config_from_str(text: &str, base: &Path) -> Result<TrainConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("config syntax: {e}")))?;
    let mut cfg = TrainConfig::default();
    let mut model_pairs: Vec<(String, String)> = Vec::new();
    let mut decoder_width = None;
    let mut source = "synthetic".to_string();
    let mut count = None;
    let mut folder = None;
    let path = |v: &str| {
        let p = PathBuf::from(v.trim());
        if p.is_relative() { base.join(p) } else { p }
    };

    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(Error::config(format!("key `{k}` appears before any [section]")));
            }
            continue;
        };
        if !SECTIONS.contains(&section) {
            return Err(Error::config(format!("unknown section [{section}]; expected one of {}", SECTIONS.join(", "))));
        }
        for (key, value) in props.iter() {
            if props.get_all(key).count() > 1 {
                return Err(Error::config(format!("[{section}] {key} given more than once")));
            }
            match (section, key) {
                ("model", _) => model_pairs.push((key.to_string(), value.to_string())),
                ("train", "image_size") => cfg.image_size = parse(section, key, value)?,
                ("train", "batch_size") => cfg.batch_size = parse(section, key, value)?,
                ("train", "steps") => cfg.steps = parse(section, key, value)?,
                ("train", "lr") => cfg.lr = parse(section, key, value)?,
                ("train", "weight_decay") => cfg.weight_decay = parse(section, key, value)?,
                ("train", "mask_ratio") => cfg.mask_ratio = parse(section, key, value)?,
                ("train", "decoder_width") => decoder_width = Some(parse(section, key, value)?),
                ("train", "decoder_depth") => cfg.decoder_depth = parse(section, key, value)?,
                ("train", "seed") => cfg.seed = parse(section, key, value)?,
                ("data", "source") => source = value.trim().to_ascii_lowercase(),
                ("data", "count") => count = Some(parse(section, key, value)?),
                ("data", "path") => folder = Some(path(value)),
                ("output", "loss_csv") => cfg.loss_csv = Some(path(value)),
                ("output", "checkpoint") => cfg.checkpoint = Some(path(value)),
                _ => return Err(Error::config(format!("unknown key `{key}` in [{section}]"))),
            }
        }
    }

    cfg.model = cfg.model.clone().apply(model_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.decoder_width = decoder_width.unwrap_or(cfg.model.embed_dim / 2);
    cfg.data = match source.as_str() {
        "synthetic" => {
            if folder.is_some() {
                return Err(Error::config("[data] path is only valid with source = folder"));
            }
            DataSource::Synthetic { count: count.unwrap_or(256) }
        }
        "folder" => {
            if count.is_some() {
                return Err(Error::config("[data] count is only valid with source = synthetic"));
            }
            DataSource::Folder(folder.ok_or_else(|| Error::config("[data] source = folder needs a path"))?)
        }
        other => return Err(Error::config(format!("[data] source must be synthetic or folder, got `{other}`"))),
    };
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::config(format!("[train] mask_ratio must lie in (0, 1), got {}", cfg.mask_ratio)));
    }
    if cfg.image_size == 0 || cfg.image_size % cfg.model.patch_size != 0 {
        return Err(Error::config(format!(
            "[train] image_size {} is not a positive multiple of patch_size {}",
            cfg.image_size, cfg.model.patch_size
        )));
    }
    if cfg.decoder_width == 0 || cfg.batch_size == 0 {
        return Err(Error::config("[train] decoder_width and batch_size must be positive"));
    }
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    train_config_from_str(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    #[test]
    fn full_example() {
        let text = "\
# toy run
[model]
arch = vitae
embed_dim = 32
heads = 4
pcm_groups = 8

[train]
steps = 10
lr = 0.002
seed = 7

[data]
source = synthetic
count = 16

[output]
loss_csv = out/loss.csv
";
        let cfg = train_config_from_str(text, Path::new("/tmp/run")).unwrap();
        assert_eq!(cfg.model.arch, Arch::Vitae);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.decoder_width, 16);
        assert_eq!((cfg.steps, cfg.seed, cfg.lr), (10, 7, 0.002));
        assert_eq!(cfg.data, DataSource::Synthetic { count: 16 });
        assert_eq!(cfg.loss_csv, Some(PathBuf::from("/tmp/run/out/loss.csv")));
    }

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(train_config_from_str("", Path::new(".")).unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        for text in [
            "[train]\nstep = 3\n",
            "[model]\nwidth = 3\n",
            "[optimizer]\nlr = 1\n",
            "steps = 3\n",
            "[train]\nsteps = 3\nsteps = 4\n",
            "[train]\nsteps = many\n",
            "[data]\nsource = folder\n",
        ] {
            assert!(matches!(train_config_from_str(text, Path::new(".")), Err(Error::Config(_))), "{text}");
        }
    }
}
