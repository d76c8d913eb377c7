//! CSV tables, run manifests and the markdown report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{sha256_hex, CellResult, EvalRow, SummaryRow};
use crate::guidance::GuidanceLogRow;
use crate::prompt_dt::TrainLogRow;
use crate::{Error, Result};

/// A row type with a fixed CSV column set. The header is written even for
/// an empty table.
pub trait CsvRow: Serialize {
    const COLUMNS: &'static [&'static str];
}

impl CsvRow for EvalRow {
    const COLUMNS: &'static [&'static str] = &[
        "family",
        "provider",
        "seed",
        "task",
        "episodes",
        "mean_return",
        "std_return",
        "status",
        "config_digest",
    ];
}

impl CsvRow for CellResult {
    const COLUMNS: &'static [&'static str] = &[
        "ablation",
        "family",
        "provider",
        "setting",
        "seed",
        "mean_return",
        "std_return",
        "tasks",
        "failed",
    ];
}

impl CsvRow for SummaryRow {
    const COLUMNS: &'static [&'static str] = &[
        "ablation",
        "family",
        "provider",
        "setting",
        "seeds",
        "mean_return",
        "std_return",
        "relative_return",
    ];
}

impl CsvRow for TrainLogRow {
    const COLUMNS: &'static [&'static str] = &["iteration", "loss", "wall_ms"];
}

impl CsvRow for GuidanceLogRow {
    const COLUMNS: &'static [&'static str] = &[
        "phase",
        "iteration",
        "loss_dm",
        "loss_dt",
        "cos_angle",
        "branch_taken",
        "grad_norm_dm",
        "grad_norm_dt",
        "skipped",
        "wall_ms",
    ];
}

pub fn write_csv<T: CsvRow>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    w.write_record(T::COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_csv`], rejecting a different header.
pub fn read_csv<T: CsvRow + DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != T::COLUMNS {
        return Err(Error::Format(format!(
            "{}: expected columns {:?}, found {header:?}",
            path.display(),
            T::COLUMNS
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Written last beside a command's outputs. `artifacts` are reproducible
/// byte for byte; `logs` carry wall-clock columns and are not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_digest: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub git_describe: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
    pub logs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Hashes every artifact (paths relative to `dir`) and the config text.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        dir: &Path,
        command: &str,
        args: &[String],
        config_text: &str,
        seeds: Vec<u64>,
        wall_time_s: f64,
        artifacts: &[String],
        logs: &[String],
    ) -> Result<Self> {
        let artifacts = artifacts
            .iter()
            .map(|p| {
                let full = dir.join(p);
                let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
                Ok(Artifact {
                    path: p.clone(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            command: command.into(),
            args: args.to_vec(),
            config_digest: sha256_hex(config_text.as_bytes()),
            config: config_text.into(),
            seeds,
            git_describe: git_describe(),
            wall_time_s,
            artifacts,
            logs: logs.to_vec(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "".into(), |v| format!("{:+.1}%", 100.0 * v))
}

/// Markdown table of summary rows, one section per ablation.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for r in rows {
        if current != Some(r.ablation.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            current = Some(&r.ablation);
            out.push_str(&format!("## {}\n\n", r.ablation));
            out.push_str(
                "| family | provider | setting | seeds | mean return | std | relative |\n",
            );
            out.push_str("|---|---|---|---:|---:|---:|---:|\n");
        }
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.3} | {:.3} | {} |\n",
            r.family,
            r.provider,
            r.setting,
            r.seeds,
            r.mean_return,
            r.std_return,
            fmt_opt(r.relative_return)
        ));
    }
    out
}

fn eval_section(rows: &[EvalRow]) -> String {
    let mut out = String::from(
        "| family | provider | seed | task | episodes | mean return | std | status |\n",
    );
    out.push_str("|---|---|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {} |\n",
            r.family, r.provider, r.seed, r.task, r.episodes, r.mean_return, r.std_return, r.status
        ));
    }
    out
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

pub const REPORT_FILE: &str = "report.md";

/// Collects every `summary.csv` and `eval.csv` under `dir` into
/// `dir/report.md` and returns its text.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::from("# Results\n");
    let mut found = false;
    let mut summaries = Vec::new();
    find_files(dir, "summary.csv", &mut summaries)?;
    for p in &summaries {
        let rows: Vec<SummaryRow> = read_csv(p)?;
        let rel = p.strip_prefix(dir).unwrap_or(p);
        out.push_str(&format!("\nSource: `{}`\n\n", rel.display()));
        out.push_str(&render_summary(&rows));
        found = true;
    }
    let mut evals = Vec::new();
    find_files(dir, "eval.csv", &mut evals)?;
    for p in &evals {
        let rows: Vec<EvalRow> = read_csv(p)?;
        let rel = p.strip_prefix(dir).unwrap_or(p);
        out.push_str(&format!("\n## eval `{}`\n\n", rel.display()));
        out.push_str(&eval_section(&rows));
        found = true;
    }
    if !found {
        return Err(Error::Missing(format!(
            "no summary.csv or eval.csv under {}",
            dir.display()
        )));
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(setting: &str, rel: Option<f64>) -> SummaryRow {
        SummaryRow {
            ablation: "guidance".into(),
            family: "vel".into(),
            provider: "diffuser".into(),
            setting: setting.into(),
            seeds: 3,
            mean_return: -12.345678901234567,
            std_return: 0.1,
            relative_return: rel,
        }
    }

    fn header_of<T: CsvRow>(row: &T) -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.lines()
            .next()
            .unwrap()
            .split(',')
            .map(String::from)
            .collect()
    }

    #[test]
    fn declared_columns_match_serialised_fields() {
        assert_eq!(header_of(&summary("dm-only", None)), SummaryRow::COLUMNS);
        let cell = CellResult {
            ablation: "a".into(),
            family: "f".into(),
            provider: "p".into(),
            setting: "s".into(),
            seed: 0,
            mean_return: 0.0,
            std_return: 0.0,
            tasks: 1,
            failed: 0,
        };
        assert_eq!(header_of(&cell), CellResult::COLUMNS);
        let ev = EvalRow {
            family: "f".into(),
            provider: "p".into(),
            seed: 0,
            task: 0,
            episodes: 1,
            mean_return: 0.0,
            std_return: 0.0,
            status: "ok".into(),
            config_digest: "x".into(),
        };
        assert_eq!(header_of(&ev), EvalRow::COLUMNS);
        let t = TrainLogRow {
            iteration: 0,
            loss: 1.0,
            wall_ms: 0,
        };
        assert_eq!(header_of(&t), TrainLogRow::COLUMNS);
        let g = GuidanceLogRow {
            phase: 1,
            iteration: 0,
            loss_dm: 0.0,
            loss_dt: 0.0,
            cos_angle: 0.0,
            branch_taken: "aligned".into(),
            grad_norm_dm: 0.0,
            grad_norm_dt: 0.0,
            skipped: false,
            wall_ms: 0,
        };
        assert_eq!(header_of(&g), GuidanceLogRow::COLUMNS);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.csv");
        let rows = vec![
            summary("dm-only", Some(0.0)),
            summary("projected", None),
            summary("x", Some(1.0 / 3.0)),
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<SummaryRow>(&p).unwrap(), rows);
        write_csv::<SummaryRow>(&p, &[]).unwrap();
        assert!(read_csv::<SummaryRow>(&p).unwrap().is_empty());
        assert!(read_csv::<CellResult>(&p).is_err());
    }

    #[test]
    fn report_collects_nested_tables() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
        let sub = dir.path().join("guidance");
        fs::create_dir(&sub).unwrap();
        write_csv(sub.join("summary.csv"), &[summary("projected", Some(0.25))]).unwrap();
        let text = report(dir.path()).unwrap();
        assert!(text.contains("| vel | diffuser | projected | 3 | -12.346 | 0.100 | +25.0% |"));
        assert_eq!(
            fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(),
            text
        );
    }

    #[test]
    fn manifest_hashes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"abc").unwrap();
        let c = super::super::ExperimentConfig::default();
        let m = Manifest::build(
            dir.path(),
            "x",
            &[],
            &c.canonical(),
            vec![0],
            1.5,
            &["a.txt".into()],
            &[],
        )
        .unwrap();
        assert_eq!(
            m.artifacts[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let p = m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(p).unwrap(), m);
    }
}
