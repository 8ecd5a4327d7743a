//! Run configuration: built-in defaults, overridden by a flat `key=value`
//! file, overridden by command-line settings.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `model.d=16`,
//! `train.lr=0.002`, `model.graph.views=item,neighbor` or
//! `data.rule={"kind":"spaced_click_cart","spacing":3}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{SpeedConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    pub bench: SpeedConfig,
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// ignored, as is anything after a ` #` on a line.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find(" #") {
            Some(k) => &raw[..k],
            None => raw,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` setting given on the command line.
pub fn parse_setting(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
    }
    *node = match node {
        // String-valued settings take the text verbatim.
        Value::String(_) => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    };
    Ok(())
}

impl RunConfig {
    /// Applies settings in order; later ones win.
    pub fn with_settings(&self, settings: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (k, raw) in settings {
            set_path(&mut v, k, raw)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, then the file at `path` if any, then `settings`.
    pub fn resolve(path: Option<&Path>, settings: &[(String, String)]) -> Result<Self> {
        let mut all = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            all = parse_pairs(&text, &p.display().to_string())?;
        }
        all.extend_from_slice(settings);
        let cfg = Self::default().with_settings(&all)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uses one seed for data, initialization and shuffling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.profile_dim != self.model.profile_dim {
            return Err(Error::Config(format!(
                "data.profile_dim {} differs from model.profile_dim {}",
                self.data.profile_dim, self.model.profile_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{TransitionView, ViewSet};
    use crate::train::OptimizerKind;

    #[test]
    fn file_lines_and_comments() {
        let text = "# comment\n\nmodel.d = 16\ntrain.lr=0.01 # inline\n";
        let pairs = parse_pairs(text, "f").unwrap();
        assert_eq!(pairs, vec![("model.d".into(), "16".into()), ("train.lr".into(), "0.01".into())]);
        match parse_pairs("a=1\nnonsense\n", "f.cfg") {
            Err(Error::Parse { line, path, .. }) => assert_eq!((line, path.as_str()), (2, "f.cfg")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn typed_settings() {
        let s = [
            ("model.d", "16"),
            ("train.optimizer", "sgd"),
            ("model.graph.views", "item,neighbor"),
            ("model.graph.max_gap", "7"),
            ("model.ffn_dim", "32"),
            ("data.rule", r#"{"kind":"spaced_click_cart","spacing":3}"#),
            ("bench.lengths", "[8,16]"),
        ]
        .map(|(a, b)| (a.to_string(), b.to_string()));
        let c = RunConfig::default().with_settings(&s).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.model.graph.views, ViewSet::all().without(TransitionView::Category));
        assert_eq!(c.model.graph.max_gap, Some(7));
        assert_eq!(c.model.ffn_dim, Some(32));
        assert_eq!(c.data.rule, crate::data::PlantedRule::SpacedClickCart { spacing: 3 });
        assert_eq!(c.bench.lengths, vec![8, 16]);
    }

    #[test]
    fn precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "model.d=16\ntrain.lr=0.5\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &[("train.lr".into(), "0.25".into())]).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_and_ill_typed_settings_fail() {
        let bad = |k: &str, v: &str| RunConfig::default().with_settings(&[(k.into(), v.into())]).is_err();
        assert!(bad("model.dd", "1"));
        assert!(bad("model.d", "many"));
        assert!(bad("model.graph.views", "item,bogus"));
        assert!(bad("train.optimizer", "rmsprop"));
    }

    #[test]
    fn mismatched_profile_widths_are_rejected() {
        let r = RunConfig::resolve(None, &[("data.profile_dim".into(), "3".into())]);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
