//! Config-file overrides and atomically published output directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{MsmaError, Result};

/// Keys that describe where output goes rather than what was computed.
const PLACEMENT_KEYS: [&str; 2] = ["out", "force"];

/// Replace fields of `args` with the values of a JSON object file. Keys may
/// use `-` or `_`; unknown keys are rejected.
pub fn apply_config<T: Serialize + DeserializeOwned>(args: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return round_trip(args, Map::new());
    };
    let text = fs::read_to_string(path).map_err(|e| MsmaError::io(path, e))?;
    let overrides: Value =
        serde_json::from_str(&text).map_err(|e| MsmaError::validation("config", format!("{}: {e}", path.display())))?;
    let Value::Object(overrides) = overrides else {
        return Err(MsmaError::validation("config", "top level must be a JSON object"));
    };
    round_trip(args, overrides)
}

fn round_trip<T: Serialize + DeserializeOwned>(args: &T, overrides: Map<String, Value>) -> Result<T> {
    let Value::Object(mut fields) = serde_json::to_value(args)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in overrides {
        let key = k.replace('-', "_");
        if !fields.contains_key(&key) {
            return Err(MsmaError::validation("config", format!("unknown key {k:?}")));
        }
        fields.insert(key, v);
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| MsmaError::validation("config", e.to_string()))
}

/// The resolved arguments as embedded in reports.
pub fn recorded_args<T: Serialize>(args: &T) -> Result<Value> {
    let mut v = serde_json::to_value(args)?;
    if let Value::Object(m) = &mut v {
        for k in PLACEMENT_KEYS {
            m.remove(k);
        }
    }
    Ok(v)
}

/// Output directory that is filled under a temporary sibling name and
/// renamed into place by [`OutDir::commit`]. Dropping it uncommitted
/// removes the partial output.
#[derive(Debug)]
pub struct OutDir {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl OutDir {
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(MsmaError::validation(
                "out",
                format!("{} already exists (pass --force to replace it)", target.display()),
            ));
        }
        let name = target
            .file_name()
            .ok_or_else(|| MsmaError::validation("out", format!("{} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| MsmaError::io(&parent, e))?;
        let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| MsmaError::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| MsmaError::io(&tmp, e))?;
        Ok(OutDir {
            tmp,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    /// Staging directory; files written here appear under the target on commit.
    pub fn dir(&self) -> &Path {
        &self.tmp
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.tmp.join(name);
        fs::write(&p, text).map_err(|e| MsmaError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| MsmaError::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| MsmaError::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct A {
        seed: u64,
        min_separation: usize,
        out: String,
    }

    fn a() -> A {
        A {
            seed: 1,
            min_separation: 2,
            out: "x".into(),
        }
    }

    #[test]
    fn config_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 9, "min-separation": 3}"#).unwrap();
        let r = apply_config(&a(), Some(&p)).unwrap();
        assert_eq!((r.seed, r.min_separation, r.out.as_str()), (9, 3, "x"));
    }

    #[test]
    fn unknown_or_mistyped_keys_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        for body in [r#"{"sede": 9}"#, r#"{"seed": "nine"}"#, "[1]", "{"] {
            fs::write(&p, body).unwrap();
            assert!(apply_config(&a(), Some(&p)).unwrap_err().is_validation(), "{body}");
        }
    }

    #[test]
    fn placement_is_not_recorded() {
        let v = recorded_args(&a()).unwrap();
        assert!(v.get("out").is_none());
        assert_eq!(v["seed"], 1);
    }

    #[test]
    fn uncommitted_output_disappears() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        {
            let o = OutDir::create(&target, false).unwrap();
            o.write_text("a.txt", "hi").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        let o = OutDir::create(&target, false).unwrap();
        o.write_text("a.txt", "hi").unwrap();
        o.commit().unwrap();
        assert_eq!(fs::read_to_string(target.join("a.txt")).unwrap(), "hi");
        assert!(OutDir::create(&target, false).unwrap_err().is_validation());
        let o = OutDir::create(&target, true).unwrap();
        o.write_text("b.txt", "x").unwrap();
        o.commit().unwrap();
        assert!(!target.join("a.txt").exists());
    }
}
