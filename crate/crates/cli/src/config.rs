//! Flat `key = value` experiment files.
//!
//! ```text
//! # houses, non-IID by |y|
//! dataset = data/cadata
//! format = libsvm
//! J = 10
//! lambda = 1e-6
//! sigma = 0.5
//! dbar = 70
//! partition = noniid_abs_y
//! seeds = 0..10
//! ```
//!
//! Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dekrr_core::experiment::{Coefficient, FeatureBudget, TopologySource};
use dekrr_core::{BaselineKind, ExperimentConfig, TableFormat};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io { path: PathBuf, message: String },
    Syntax { line: usize, message: String },
    UnknownKey { key: String, line: usize },
    DuplicateKey { key: String, first: usize, second: usize },
    Type { key: String, line: usize, message: String },
    Missing { key: String },
    Invalid { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } | ConfigError::Syntax { .. } => None,
            ConfigError::UnknownKey { key, .. }
            | ConfigError::DuplicateKey { key, .. }
            | ConfigError::Type { key, .. }
            | ConfigError::Missing { key }
            | ConfigError::Invalid { key, .. } => Some(key),
        }
    }

    pub fn lines(&self) -> Vec<usize> {
        match self {
            ConfigError::Syntax { line, .. } | ConfigError::UnknownKey { line, .. } | ConfigError::Type { line, .. } => {
                vec![*line]
            }
            ConfigError::DuplicateKey { first, second, .. } => vec![*first, *second],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, message } => write!(f, "cannot read {}: {message}", path.display()),
            ConfigError::Syntax { line, message } => write!(f, "line {line}: {message}"),
            ConfigError::UnknownKey { key, line } => write!(f, "line {line}: unknown key `{key}`"),
            ConfigError::DuplicateKey { key, first, second } => {
                write!(f, "key `{key}` set twice, on lines {first} and {second}")
            }
            ConfigError::Type { key, line, message } => write!(f, "line {line}: bad value for `{key}`: {message}"),
            ConfigError::Missing { key } => write!(f, "missing required key `{key}`"),
            ConfigError::Invalid { key, message } => write!(f, "invalid `{key}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key, required ones first.
pub const KEYS: &[&str] = &[
    "dataset",
    "J",
    "lambda",
    "sigma",
    "dbar",
    "features",
    "format",
    "target_column",
    "k",
    "edge_list",
    "partition",
    "c_nei",
    "c_self_mult",
    "mapping",
    "allocation",
    "d0_ratio",
    "seeds",
    "epsilon",
    "k_max",
    "methods",
    "probe_points",
    "output",
];

/// A parsed file: the typed config plus the defaults that were filled in.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub defaults: Vec<(String, String)>,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T>(&mut self, key: &str, conv: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => conv(&raw).map(Some).map_err(|message| ConfigError::Type {
                key: key.to_string(),
                line,
                message,
            }),
        }
    }
}

fn from_str<T: FromStr>(what: &'static str) -> impl Fn(&str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    move |s| s.parse::<T>().map_err(|e| format!("expected {what}, got `{s}` ({e})"))
}

fn list<T: FromStr>(what: &'static str) -> impl Fn(&str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    move |s| {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("expected a list of {what}, got `{p}` ({e})")))
            .collect()
    }
}

/// `0,3,7` or the half-open range `0..10`.
fn seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
        if b <= a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..b).collect());
    }
    list::<u64>("seeds")(s)
}

/// `0.5N` scales with the training-set size, a bare number is absolute.
pub fn coefficient(s: &str) -> Result<Coefficient, String> {
    let (num, per_sample) = match s.strip_suffix('N') {
        Some(n) => (n.trim(), true),
        None => (s, false),
    };
    let value: f64 = num.parse().map_err(|_| format!("expected a number or `<number>N`, got `{s}`"))?;
    Ok(Coefficient { value, per_sample })
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("expected a positive integer, got `{s}`")),
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<Parsed, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parsed = parse_config_str(&text, base)?;
    check_files(&parsed.config)?;
    Ok(parsed)
}

/// Parses without touching the file system. Relative paths are joined to `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<Parsed, ConfigError> {
    let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { key: key.into(), line });
        }
        if value.is_empty() {
            return Err(ConfigError::Type {
                key: key.into(),
                line,
                message: "empty value".into(),
            });
        }
        if let Some((first, _)) = map.get(key) {
            return Err(ConfigError::DuplicateKey {
                key: key.into(),
                first: *first,
                second: line,
            });
        }
        map.insert(key.into(), (line, value.into()));
    }
    let mut e = Entries { map };
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let missing = |key: &str| ConfigError::Missing { key: key.into() };

    let dataset = e.take("dataset").map(|(_, v)| resolve(&v)).ok_or_else(|| missing("dataset"))?;
    let nodes = e.parse("J", positive_usize)?.ok_or_else(|| missing("J"))?;
    let lambda: f64 = e.parse("lambda", from_str("a number"))?.ok_or_else(|| missing("lambda"))?;
    let sigma: f64 = e.parse("sigma", from_str("a number"))?.ok_or_else(|| missing("sigma"))?;
    let dbar = e.parse("dbar", positive_usize)?;
    let explicit = e.parse("features", list::<usize>("feature counts"))?;
    let features = match (dbar, explicit) {
        (Some(d), None) => FeatureBudget::Mean(d),
        (None, Some(v)) => FeatureBudget::Explicit(v),
        (None, None) => return Err(missing("dbar")),
        (Some(_), Some(_)) => {
            return Err(ConfigError::Invalid {
                key: "features".into(),
                message: "give either `dbar` or `features`, not both".into(),
            })
        }
    };

    let mut cfg = ExperimentConfig::with_defaults(dataset, TableFormat::Libsvm, nodes, lambda, sigma, 1);
    cfg.features = features;
    let mut defaults = Vec::new();
    let mut note = |key: &str, value: String| defaults.push((key.to_string(), value));

    let format = e.parse("format", |s| match s {
        "csv" | "libsvm" => Ok(s.to_string()),
        _ => Err(format!("expected `csv` or `libsvm`, got `{s}`")),
    })?;
    let target = e.take("target_column");
    cfg.format = match (format.as_deref(), target) {
        (Some("csv"), Some((_, column))) => TableFormat::Csv { target_column: column },
        (Some("csv"), None) => return Err(missing("target_column")),
        (_, Some((line, _))) => {
            return Err(ConfigError::Type {
                key: "target_column".into(),
                line,
                message: "only meaningful with `format = csv`".into(),
            })
        }
        (Some(_), None) => TableFormat::Libsvm,
        (None, None) => {
            note("format", "libsvm".into());
            TableFormat::Libsvm
        }
    };

    let degree = e.parse("k", positive_usize)?;
    let edges = e.take("edge_list");
    cfg.topology = match (degree, edges) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::Invalid {
                key: "edge_list".into(),
                message: "give either `k` or `edge_list`, not both".into(),
            })
        }
        (None, Some((_, p))) => TopologySource::EdgeList(resolve(&p)),
        (Some(k), None) => TopologySource::Ring { degree: k },
        (None, None) => {
            note("k", "4".into());
            TopologySource::Ring { degree: 4 }
        }
    };

    macro_rules! optional {
        ($key:literal, $field:expr, $conv:expr, $show:expr) => {
            match e.parse($key, $conv)? {
                Some(v) => $field = v,
                None => note($key, $show(&$field)),
            }
        };
    }
    optional!("partition", cfg.partition, from_str("a partition mode"), |v: &_| format!("{v}"));
    optional!("c_nei", cfg.c_nei, coefficient, |v: &_| format!("{v}"));
    optional!("c_self_mult", cfg.c_self_mult, from_str("a number"), |v: &_| format!("{v}"));
    optional!("mapping", cfg.mapping, from_str("a mapping kind"), |v: &_| format!("{v}"));
    optional!("allocation", cfg.allocation, from_str("an allocation strategy"), |v: &_| format!("{v}"));
    optional!("d0_ratio", cfg.d0_ratio, positive_usize, |v: &_| format!("{v}"));
    optional!("seeds", cfg.seeds, seeds, |v: &Vec<u64>| join(v));
    optional!("epsilon", cfg.tolerance, from_str("a number"), |v: &_| format!("{v:e}"));
    optional!("k_max", cfg.max_rounds, from_str("a round count"), |v: &_| format!("{v}"));
    optional!("methods", cfg.methods, list::<BaselineKind>("methods"), |v: &Vec<BaselineKind>| join(v));
    optional!("probe_points", cfg.probe_points, positive_usize, |v: &_| format!("{v}"));
    match e.take("output") {
        Some((_, p)) => cfg.output = resolve(&p),
        None => {
            cfg.output = base.join("out");
            note("output", cfg.output.display().to_string());
        }
    }
    debug_assert!(e.map.is_empty(), "unconsumed keys {:?}", e.map.keys());

    cfg.validate().map_err(|err| ConfigError::Invalid {
        key: "config".into(),
        message: err.to_string(),
    })?;
    Ok(Parsed { config: cfg, defaults })
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Checks that the dataset and edge-list files exist.
pub fn check_files(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let mut files = vec![("dataset", &cfg.dataset)];
    if let TopologySource::EdgeList(p) = &cfg.topology {
        files.push(("edge_list", p));
    }
    for (key, p) in files {
        if !p.is_file() {
            return Err(ConfigError::Invalid {
                key: key.into(),
                message: format!("no such file {}", p.display()),
            });
        }
    }
    Ok(())
}

/// SHA-256 over every result-relevant field, defaults and seeds included,
/// plus the mean feature counts actually run. The output directory is
/// excluded because it does not affect results.
pub fn config_hash(cfg: &ExperimentConfig, dbars: &[usize]) -> String {
    let mut canonical = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = canonical.as_object_mut() {
        obj.remove("output");
        obj.insert("dbars".into(), serde_json::json!(dbars));
    }
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = d.txt\nJ = 4\nlambda = 1e-4\nsigma = 0.5\ndbar = 10\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let p = parse_config_str(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(p.config.tolerance, 1e-6);
        assert_eq!(p.config.max_rounds, 2000);
        assert_eq!(p.config.c_self_mult, 5.0);
        assert_eq!(p.config.dataset, PathBuf::from("/tmp/d.txt"));
        let keys: Vec<&str> = p.defaults.iter().map(|(k, _)| k.as_str()).collect();
        assert!(keys.contains(&"epsilon") && keys.contains(&"k_max") && keys.contains(&"c_self_mult"));
    }

    #[test]
    fn type_errors_name_the_key_and_line() {
        let err = parse_config_str("dataset = d\nJ = ten\n", Path::new(".")).unwrap_err();
        assert_eq!(err.key(), Some("J"));
        assert_eq!(err.lines(), vec![2]);
        assert!(err.to_string().contains("`J`"));
    }

    #[test]
    fn duplicates_name_both_lines() {
        let err = parse_config_str(&format!("{MINIMAL}# again\nsigma = 2\n"), Path::new(".")).unwrap_err();
        assert_eq!(
            err,
            ConfigError::DuplicateKey {
                key: "sigma".into(),
                first: 4,
                second: 7
            }
        );
    }

    #[test]
    fn unknown_and_missing_keys() {
        let err = parse_config_str(&format!("{MINIMAL}gamma = 1\n"), Path::new(".")).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { key: "gamma".into(), line: 6 });
        let err = parse_config_str("dataset = d\nJ = 4\nsigma = 1\ndbar = 3\n", Path::new(".")).unwrap_err();
        assert_eq!(err, ConfigError::Missing { key: "lambda".into() });
    }

    #[test]
    fn value_forms() {
        let text = format!(
            "{MINIMAL}c_nei = 0.5N\nseeds = 3..6\nmethods = dkla_rff, dekrr_ddrf\nformat = csv\ntarget_column = price # comment\nk = 2\n"
        );
        let p = parse_config_str(&text, Path::new(".")).unwrap();
        assert_eq!(p.config.c_nei, Coefficient { value: 0.5, per_sample: true });
        assert_eq!(p.config.seeds, vec![3, 4, 5]);
        assert_eq!(p.config.methods, vec![BaselineKind::DklaRff, BaselineKind::DekrrDdrf]);
        assert_eq!(p.config.format, TableFormat::Csv { target_column: "price".into() });
        assert_eq!(p.config.topology, TopologySource::Ring { degree: 2 });
        assert_eq!(coefficient("250").unwrap(), Coefficient { value: 250.0, per_sample: false });
        assert!(coefficient("N").is_err());
    }

    #[test]
    fn hash_tracks_results_not_output() {
        let a = parse_config_str(MINIMAL, Path::new("/a")).unwrap().config;
        let mut b = a.clone();
        b.output = PathBuf::from("/elsewhere");
        assert_eq!(config_hash(&a, &[10]), config_hash(&b, &[10]));
        assert_ne!(config_hash(&a, &[10]), config_hash(&a, &[10, 20]));
        b.seeds = vec![1];
        assert_ne!(config_hash(&a, &[10]), config_hash(&b, &[10]));
    }
}
