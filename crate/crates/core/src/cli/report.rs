//! Merging the `table.csv` of several run directories into one summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{MsmaError, Result};

pub const TABLE_FILE: &str = "table.csv";
const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
struct RunTable {
    columns: Vec<String>,
    rows: Vec<(String, Vec<String>)>,
}

fn read_run_table(dir: &Path) -> Result<RunTable> {
    let path = dir.join(TABLE_FILE);
    if !path.is_file() {
        return Err(MsmaError::validation("run", format!("{} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("group") || header.len() < 2 {
        return Err(MsmaError::validation("run", format!("{}: first column must be `group`", path.display())));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let group = rec.get(0).unwrap_or_default().trim().to_string();
        if group.is_empty() {
            return Err(MsmaError::validation("run", format!("{}: empty group name", path.display())));
        }
        rows.push((group, rec.iter().skip(1).map(|s| s.trim().to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(MsmaError::validation("run", format!("{}: no rows", path.display())));
    }
    Ok(RunTable { columns, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub columns: Vec<String>,
    /// Sorted by group name; groups present in several runs carry `@<run>`.
    pub rows: Vec<(String, Vec<String>)>,
    /// Run directories that contributed rows, with their 1-based input position.
    pub runs: Vec<(usize, String)>,
    pub skipped: Vec<(String, String)>,
}

/// Merge run directories. Malformed ones are skipped with a warning; it is
/// an error when none is usable.
pub fn merge_runs(dirs: &[PathBuf]) -> Result<Summary> {
    if dirs.is_empty() {
        return Err(MsmaError::validation("runs", "no run directories given"));
    }
    let mut tables = Vec::new();
    let mut skipped = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        match read_run_table(d) {
            Ok(t) => tables.push((i + 1, d.display().to_string(), t)),
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                skipped.push((d.display().to_string(), e.to_string()));
            }
        }
    }
    if tables.is_empty() {
        return Err(MsmaError::validation("runs", "none of the run directories has a readable table"));
    }

    let mut columns: Vec<String> = Vec::new();
    for (_, _, t) in &tables {
        for c in &t.columns {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let mut runs_per_group: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, _, t) in &tables {
        let mut seen: Vec<&str> = t.rows.iter().map(|r| r.0.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        for g in seen {
            *runs_per_group.entry(g).or_default() += 1;
        }
    }

    let mut keyed = Vec::new();
    for (idx, _, t) in &tables {
        for (occurrence, (group, cells)) in t.rows.iter().enumerate() {
            let shared = runs_per_group[group.as_str()] > 1;
            let name = if shared { format!("{group}@{idx}") } else { group.clone() };
            let row: Vec<String> = columns
                .iter()
                .map(|c| {
                    t.columns
                        .iter()
                        .position(|x| x == c)
                        .and_then(|j| cells.get(j))
                        .filter(|v| !v.is_empty())
                        .cloned()
                        .unwrap_or_else(|| MISSING.into())
                })
                .collect();
            keyed.push(((group.clone(), *idx, occurrence), (name, row)));
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Summary {
        columns,
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
        runs: tables.iter().map(|(i, d, _)| (*i, d.clone())).collect(),
        skipped,
    })
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("group,{}\n", self.columns.join(","));
        for (g, cells) in &self.rows {
            out.push_str(&format!("{g},{}\n", cells.join(",")));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Run summary\n\n");
        out.push_str(&format!("| group | {} |\n", self.columns.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---|".repeat(self.columns.len())));
        for (g, cells) in &self.rows {
            out.push_str(&format!("| {g} | {} |\n", cells.join(" | ")));
        }
        out.push_str("\n## Runs\n\n");
        for (i, d) in &self.runs {
            out.push_str(&format!("- @{i}: `{d}`\n"));
        }
        if !self.skipped.is_empty() {
            out.push_str("\n## Skipped\n\n");
            for (d, why) in &self.skipped {
                out.push_str(&format!("- `{d}`: {why}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn run(root: &Path, name: &str, table: &str) -> PathBuf {
        let d = root.join(name);
        fs::create_dir(&d).unwrap();
        fs::write(d.join(TABLE_FILE), table).unwrap();
        d
    }

    #[test]
    fn rows_sorted_and_shared_names_suffixed() {
        let t = tempfile::tempdir().unwrap();
        let a = run(t.path(), "a", "group,KL_gm,MI_gm\nzeta,1,2\nfull,3,4\n");
        let b = run(t.path(), "b", "group,KL_gm,DC_gm\nfull,5,0.9\n");
        let s = merge_runs(&[a, b]).unwrap();
        assert_eq!(s.columns, ["KL_gm", "MI_gm", "DC_gm"]);
        let names: Vec<&str> = s.rows.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(names, ["full@1", "full@2", "zeta"]);
        assert_eq!(s.rows[1].1, ["5", "NA", "0.9"]);
        assert_eq!(s.rows[2].1, ["1", "2", "NA"]);
    }

    #[test]
    fn malformed_runs_are_skipped() {
        let t = tempfile::tempdir().unwrap();
        let good = run(t.path(), "good", "group,KL_gm\nbaseline,NA\n");
        let bad = run(t.path(), "bad", "name,KL_gm\nx,1\n");
        let missing = t.path().join("missing");
        let s = merge_runs(&[bad, good, missing]).unwrap();
        assert_eq!(s.rows, vec![("baseline".to_string(), vec!["NA".to_string()])]);
        assert_eq!(s.skipped.len(), 2);
        assert_eq!(s.runs, vec![(2, t.path().join("good").display().to_string())]);
        assert!(s.to_markdown().contains("| baseline | NA |"));
    }

    #[test]
    fn nothing_usable_is_an_error() {
        assert!(merge_runs(&[]).unwrap_err().is_validation());
        let t = tempfile::tempdir().unwrap();
        assert!(merge_runs(&[t.path().join("nope")]).unwrap_err().is_validation());
    }
}
