//! Flat `key = value` settings shared by every command.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Every recognised key. `out` and `jobs` do not affect results and are left
/// out of the echoed configuration.
pub const KEYS: &[Key] = &[
    key("out", "", "output directory (required)"),
    key("jobs", "0", "worker threads; 0 uses all cores"),
    key("train_data", "", "training set CSV"),
    key("test_data", "", "test set CSV"),
    key("checkpoint", "", "model checkpoint"),
    key("num_classes", "5", "number of classes K"),
    key("samples_per_class", "2000", "training samples per class"),
    key("test_samples_per_class", "2000", "test samples per class"),
    key("feature_dim", "8", "input features (>= K)"),
    key("class_separation", "3", "distance of each class mean from the origin"),
    key("confusion_pairs", "0-1,2-3", "class pairs pulled together, e.g. 0-1,2-3"),
    key("confusion_pull", "0.6", "fraction of the way each paired mean moves to the pair midpoint"),
    key("noise_scale", "1", "standard deviation of the per-feature noise"),
    key("data_seed", "0", "seed for the training split; the test split adds 1000003"),
    key("hidden", "32", "hidden layer widths, e.g. 32 or 64,32; empty for a linear model"),
    key("model_seed", "0", "initialization seed"),
    key("epochs", "30", "training epochs"),
    key("train_lr", "0.05", "training learning rate"),
    key("batch_size", "32", "training batch size"),
    key("train_clip", "1", "gradient clip during training; 0 disables"),
    key("train_seed", "0", "shuffling seed"),
    key("eta", "0.01", "refinement learning rate"),
    key("iterations", "1", "refinement steps T"),
    key("n_f", "2", "number of focus classes (>= 2)"),
    key("d12", "0.16", "uncertainty threshold on the top-1 minus top-2 probability gap"),
    key("loss", "ifo", "ifo, dofo, entropy or ce_focus"),
    key("weighted", "true", "weight focus logits by detached probabilities"),
    key("clip_norm", "1", "gradient clip during refinement; 0 disables"),
    key("max_uncertain", "20000", "cap on uncertain samples evaluated"),
    key("losses", "ifo,dofo,entropy,ce_focus", "loss kinds compared by `sweep`"),
    key("base_lr", "0.0001", "first rate of `lr-sweep`"),
    key("factor", "2", "ratio between consecutive rates"),
    key("count", "19", "number of rates"),
    key("d12_list", "0.04,0.16,0.84", "thresholds for `topk`"),
    key("ks", "1,2", "k values for `topk`"),
    key("t_multi", "8", "steps of the multi-step arm"),
    key("powers", "0,1,2,3", "single-step rates are eta * 2^power"),
    key("resolution", "1000", "points on the coefficient curve"),
    key("toy_c", "1,1,1,0,0.5,0.5,0.2", "toy coefficients c0..c6"),
    key("toy_x", "1,1,1,1", "toy features x0..x3"),
];

const NOT_ECHOED: [&str; 2] = ["out", "jobs"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let key = KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| ConfigError(format!("unknown key `{name}`")))?;
        self.values.insert(key.name, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("no key `{name}`"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| ConfigError(format!("invalid value for `{name}`: `{raw}` ({e})")))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(name);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|e| ConfigError(format!("invalid item `{}` in `{name}` ({e})", item.trim())))
            })
            .collect()
    }

    /// A value that must be set, such as an input path.
    pub fn required(&self, name: &str) -> Result<&str, ConfigError> {
        match self.raw(name) {
            "" => Err(ConfigError(format!("`{name}` is required for this command"))),
            v => Ok(v),
        }
    }

    /// Settings that influence results, for embedding in output records.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| !NOT_ECHOED.contains(k))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    /// The echoed settings in config-file form, loadable with [`Settings::apply_file`].
    pub fn to_file_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
