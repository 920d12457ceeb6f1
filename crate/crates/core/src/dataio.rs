//! File formats: JSON-Lines demonstrations and token streams, JSON configs
//! and reports, CSV reward curves and binary checkpoints. Every write goes
//! to a temporary file in the target directory and is renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionChunk, Token};
use crate::policy::{self, PolicyParams, PromptContext};
use crate::tasks::Demonstration;
use crate::train::CurvePoint;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Line { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Content { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// 17 significant digits, which parse back to the same bits.
fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("string write");
}

fn fmt_array(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f64(out, *v);
    }
    out.push(']');
}

/// One demonstration as a flat record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoRecord {
    pub task_id: usize,
    pub demo_index: usize,
    pub obs: Vec<f64>,
    pub chunk: Vec<Vec<f64>>,
}

impl DemoRecord {
    pub fn from_demo(d: &Demonstration) -> Self {
        Self {
            task_id: d.task_id(),
            demo_index: d.demo_index,
            obs: d.context.observation.clone(),
            chunk: d.chunk.to_rows(),
        }
    }

    pub fn into_demo(self) -> Result<Demonstration, String> {
        if let Some(v) = self.obs.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite observation entry {v}"));
        }
        let chunk = ActionChunk::from_rows(&self.chunk).map_err(|e| e.to_string())?;
        Ok(Demonstration {
            context: PromptContext {
                observation: self.obs,
                instruction_id: self.task_id,
            },
            chunk,
            demo_index: self.demo_index,
        })
    }

    /// Compact line with keys in fixed order.
    pub fn to_line(&self) -> String {
        let mut s = format!("{{\"task_id\":{},\"demo_index\":{},\"obs\":", self.task_id, self.demo_index);
        fmt_array(&mut s, &self.obs);
        s.push_str(",\"chunk\":[");
        for (i, row) in self.chunk.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            fmt_array(&mut s, row);
        }
        s.push_str("]}");
        s
    }
}

pub fn demos_to_string(demos: &[Demonstration]) -> String {
    let mut out = String::new();
    for d in demos {
        out.push_str(&DemoRecord::from_demo(d).to_line());
        out.push('\n');
    }
    out
}

pub fn write_demos(demos: &[Demonstration], path: &Path) -> Result<(), DataError> {
    write_atomic(path, demos_to_string(demos).as_bytes())
}

fn parse_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map(|v| (i + 1, v)).map_err(|e| DataError::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Order-preserving load. All records must share one chunk shape and one
/// observation width.
pub fn read_demos(path: &Path) -> Result<Vec<Demonstration>, DataError> {
    let mut out: Vec<Demonstration> = Vec::new();
    for (line, rec) in parse_lines::<DemoRecord>(path)? {
        let err = |msg: String| DataError::Line {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let demo = rec.into_demo().map_err(err)?;
        if let Some(first) = out.first() {
            let shape = (first.chunk.h(), first.chunk.d(), first.context.observation.len());
            let this = (demo.chunk.h(), demo.chunk.d(), demo.context.observation.len());
            if shape != this {
                return Err(err(format!("shape (h, d, obs) {this:?} differs from first record {shape:?}")));
            }
        }
        out.push(demo);
    }
    Ok(out)
}

/// One JSON array of token ids per line.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<Token>>, DataError> {
    Ok(parse_lines(path)?.into_iter().map(|(_, t)| t).collect())
}

pub fn tokens_to_string(streams: &[Vec<Token>]) -> String {
    let mut out = String::new();
    for s in streams {
        out.push_str(&serde_json::to_string(s).expect("token list serializes"));
        out.push('\n');
    }
    out
}

pub fn write_token_lines(streams: &[Vec<Token>], path: &Path) -> Result<(), DataError> {
    write_atomic(path, tokens_to_string(streams).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| DataError::Content {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::Content {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub const CURVE_HEADER: &str = "step,mean_mdpr,mean_qacr,mean_ctar,mean_fcr,objective";

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        write!(out, "{}", p.step).expect("string write");
        for v in [p.mean_mdpr, p.mean_qacr, p.mean_ctar, p.mean_fcr, p.objective] {
            out.push(',');
            fmt_f64(&mut out, v);
        }
        out.push('\n');
    }
    out
}

/// Rejects non-finite values and non-increasing steps.
pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<(), DataError> {
    for (i, p) in curve.iter().enumerate() {
        let finite = [p.mean_mdpr, p.mean_qacr, p.mean_ctar, p.mean_fcr, p.objective]
            .iter()
            .all(|v| v.is_finite());
        let monotone = i == 0 || p.step > curve[i - 1].step;
        if !finite || !monotone {
            return Err(DataError::Content {
                path: path.to_path_buf(),
                msg: format!("curve row {i} (step {}) is non-finite or out of order", p.step),
            });
        }
    }
    write_atomic(path, curve_to_csv(curve).as_bytes())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, DataError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVE_HEADER => {}
        _ => {
            return Err(DataError::Line {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header {CURVE_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: String| DataError::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 6 {
                return Err(err(format!("{} fields, expected 6", fields.len())));
            }
            let step = fields[0].parse().map_err(|e| err(format!("step: {e}")))?;
            let v = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(CurvePoint {
                step,
                mean_mdpr: v[0],
                mean_qacr: v[1],
                mean_ctar: v[2],
                mean_fcr: v[3],
                objective: v[4],
            })
        })
        .collect()
}

pub fn write_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &policy::checkpoint_bytes(params))
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    policy::params_from_checkpoint(&bytes).map_err(|e| DataError::Content {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
