//! Flat `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys
//! are the `ExperimentConfig` field names (`N_batch`, `lr`, ...) plus the
//! loss-weight fields (`alpha`, `beta`, ...). `seeds` takes a
//! comma-separated list.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::experiment::ExperimentConfig;

/// Parsed pairs with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!(
                    "line {line_no}: expected key = value, got {line:?}"
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(LabError::Config(format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(LabError::Config(format!(
                    "line {line_no}: duplicate key {key}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| {
                LabError::Config(format!("line {line}: bad value {value:?} for {key}: {e}"))
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| {
                        LabError::Config(format!("line {line}: bad entry {s:?} in {key}: {e}"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                Err(LabError::Config(format!("line {line}: unknown key {key}")))
            }
        }
    }

    /// Applies every experiment key present onto `config`.
    pub fn apply_experiment(&mut self, config: &mut ExperimentConfig) -> Result<()> {
        macro_rules! set {
            ($key:literal => $($field:ident).+) => {
                if let Some(v) = self.take($key)? {
                    config.$($field).+ = v;
                }
            };
        }
        set!("d" => d);
        set!("d_out" => d_out);
        set!("n" => n);
        set!("k" => k);
        set!("N_batch" => n_batch);
        set!("steps" => steps);
        set!("lr" => lr);
        set!("n_domains" => n_domains);
        set!("domain_spread" => domain_spread);
        set!("noise_std" => noise_std);
        set!("ablation" => ablation);
        set!("fixed_batch" => fixed_batch);
        set!("alpha" => weights.alpha);
        set!("beta" => weights.beta);
        set!("gamma" => weights.gamma);
        set!("eps_norm" => weights.eps_norm);
        set!("tau_gate" => weights.tau_gate);
        set!("aux_normalization" => weights.aux_normalization);
        set!("dynamic_scaling" => weights.dynamic_scaling);
        if let Some(seeds) = self.take_list("seeds")? {
            config.seeds = seeds;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Ablation;
    use crate::losses::AuxNormalization;

    #[test]
    fn parses_every_experiment_key() {
        let text = "\
# desk run
d = 12
d_out=4
n = 6
k = 3
N_batch = 64   # small
steps = 10
lr = 0.05
n_domains = 5
domain_spread = 3.5
noise_std = 0
seeds = 1, 2,3
ablation = without_lo
fixed_batch = true
alpha = 0.5
beta = 0.25
gamma = 0.125
eps_norm = 1e-6
tau_gate = 0.01
aux_normalization = paper
dynamic_scaling = false
";
        let mut kv = KeyValues::parse(text).unwrap();
        let mut config = ExperimentConfig::default();
        kv.apply_experiment(&mut config).unwrap();
        kv.finish().unwrap();
        assert_eq!((config.d, config.d_out, config.n, config.k), (12, 4, 6, 3));
        assert_eq!(
            (config.n_batch, config.steps, config.n_domains),
            (64, 10, 5)
        );
        assert_eq!(
            (config.lr, config.domain_spread, config.noise_std),
            (0.05, 3.5, 0.0)
        );
        assert_eq!(config.seeds, vec![1, 2, 3]);
        assert_eq!(config.ablation, Ablation::WithoutLo);
        assert!(config.fixed_batch);
        let w = config.weights;
        assert_eq!((w.alpha, w.beta, w.gamma), (0.5, 0.25, 0.125));
        assert_eq!((w.eps_norm, w.tau_gate), (1e-6, 0.01));
        assert_eq!(w.aux_normalization, AuxNormalization::Paper);
        assert!(!w.dynamic_scaling);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(KeyValues::parse("steps 10").is_err());
        assert!(KeyValues::parse("= 3").is_err());
        assert!(KeyValues::parse("k = 1\nk = 2").is_err());
        let mut kv = KeyValues::parse("steps = ten").unwrap();
        assert!(kv
            .apply_experiment(&mut ExperimentConfig::default())
            .is_err());
        let mut kv = KeyValues::parse("stepz = 10").unwrap();
        kv.apply_experiment(&mut ExperimentConfig::default())
            .unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn empty_and_comment_only_files() {
        assert!(KeyValues::parse("").unwrap().is_empty());
        assert!(KeyValues::parse("# nothing\n\n   # here\n")
            .unwrap()
            .is_empty());
    }
}
