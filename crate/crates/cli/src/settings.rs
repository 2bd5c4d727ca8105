//! Run configuration: config file, `--key value` overrides, defaults.

use std::path::{Path, PathBuf};

use mocae::config::KvConfig;

use crate::Failure;

const SECTIONS: [&str; 10] = [
    "data", "eval", "grid", "gradcheck", "io", "model", "phantom", "query", "retrieval", "train",
];

/// Paths any command may find in a shared config file.
const IO_KEYS: [&str; 10] = [
    "io.archive", "io.checkpoint", "io.dump_dir", "io.grid", "io.history", "io.index",
    "io.input_dir", "io.queries", "io.report", "io.report_csv",
];

/// The user's settings (file merged with overrides) and the resolved
/// configuration built up by the command.
pub struct Settings {
    user: KvConfig,
    pub resolved: KvConfig,
}

/// Splits `--key value` pairs; a `--config FILE` among them is honoured.
pub fn parse_overrides(
    config: Option<&str>,
    rest: &[String],
) -> Result<(Option<PathBuf>, KvConfig), Failure> {
    let mut file = config.map(PathBuf::from);
    let mut kv = KvConfig::new();
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--").filter(|k| !k.is_empty()) else {
            return Err(Failure::usage(format!("expected `--key value`, found {flag:?}")));
        };
        let value = it
            .next()
            .ok_or_else(|| Failure::usage(format!("--{key} needs a value")))?;
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else {
            kv.set(key, value);
        }
    }
    Ok((file, kv))
}

impl Settings {
    pub fn load(config: Option<&str>, rest: &[String]) -> Result<Self, Failure> {
        let (file, overrides) = parse_overrides(config, rest)?;
        let mut user = match &file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Failure::usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                KvConfig::parse(&text)?
            }
            None => KvConfig::new(),
        };
        user.merge(&overrides);
        Ok(Settings {
            user,
            resolved: KvConfig::new(),
        })
    }

    pub fn user(&self) -> &KvConfig {
        &self.user
    }

    /// A required path setting.
    pub fn path(&mut self, key: &str) -> Result<PathBuf, Failure> {
        let v = self
            .user
            .raw(key)
            .ok_or_else(|| Failure::usage(format!("missing setting {key}")))?
            .to_string();
        self.resolved.set(key, &v);
        Ok(PathBuf::from(v))
    }

    pub fn optional_path(&mut self, key: &str) -> Option<PathBuf> {
        let v = self.user.raw(key)?.to_string();
        self.resolved.set(key, &v);
        Some(PathBuf::from(v))
    }

    /// A path setting defaulting to `base` with `suffix` appended.
    pub fn derived_path(&mut self, key: &str, base: &Path, suffix: &str) -> PathBuf {
        let v = match self.user.raw(key) {
            Some(v) => v.to_string(),
            None => format!("{}{suffix}", base.display()),
        };
        self.resolved.set(key, &v);
        PathBuf::from(v)
    }

    pub fn value<V>(&mut self, key: &str, default: V) -> Result<V, Failure>
    where
        V: std::str::FromStr + std::fmt::Display,
        V::Err: std::fmt::Display,
    {
        let v = self.user.get_or(key, default)?;
        self.resolved.set(key, &v);
        Ok(v)
    }

    /// Adds a section rendered by a typed config.
    pub fn absorb(&mut self, kv: &KvConfig) {
        self.resolved.merge(kv);
    }

    /// Rejects misspelt keys, then prints the resolved configuration and
    /// its digest. Keys of sections other commands use are ignored.
    pub fn finish(&self) -> Result<String, Failure> {
        let section = |k: &str| k.split_once('.').map_or("", |(s, _)| s).to_string();
        let read: Vec<String> = self.resolved.iter().map(|(k, _)| section(k)).collect();
        let unknown: Vec<&str> = self
            .user
            .iter()
            .map(|(k, _)| k)
            .filter(|k| {
                let s = section(k);
                let foreign = !read.contains(&s) || IO_KEYS.contains(k);
                !self.resolved.contains(k) && !(foreign && SECTIONS.contains(&s.as_str()))
            })
            .collect();
        if !unknown.is_empty() {
            return Err(Failure::usage(format!(
                "unknown setting(s) for this command: {}",
                unknown.join(", ")
            )));
        }
        let digest = self.resolved.digest();
        println!("# resolved configuration");
        print!("{}", self.resolved.to_text());
        println!("# config digest {digest}");
        Ok(digest)
    }

    /// Writes the resolved configuration next to an output.
    pub fn write_beside(&self, output: &Path, digest: &str) -> Result<PathBuf, Failure> {
        let path = PathBuf::from(format!("{}.config", output.display()));
        let text = format!("# config digest {digest}\n{}", self.resolved.to_text());
        std::fs::write(&path, text).map_err(|e| Failure::op(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Fails with a usage error when `path` cannot be created.
pub fn check_writable(path: &Path) -> Result<(), Failure> {
    let existed = path.exists();
    let probe = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path);
    match probe {
        Ok(_) => {
            if !existed {
                let _ = std::fs::remove_file(path);
            }
            Ok(())
        }
        Err(e) => Err(Failure::usage(format!("cannot write {}: {e}", path.display()))),
    }
}
