use std::path::Path;

use thiserror::Error;

use super::SimTime;
use crate::storage::NodeId;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("reading latency profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("latency matrix must be square, got {rows} rows and a row of {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("latency matrix diagonal must be zero (node {0})")]
    NonZeroDiagonal(usize),
    #[error("empty latency matrix")]
    Empty,
}

/// One-way latency between every pair of nodes plus a jitter bound.
///
/// Text format: one row per node of whitespace-separated one-way latencies
/// in milliseconds. Blank lines and `#` comments are ignored. An optional
/// `jitter <ms>` line sets the upper bound of uniform extra delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyProfile {
    one_way: Vec<Vec<SimTime>>,
    pub jitter: SimTime,
}

fn ms_to_ns(ms: f64) -> SimTime {
    (ms * 1e6).round() as SimTime
}

impl LatencyProfile {
    pub fn uniform(nodes: usize, one_way: SimTime, jitter: SimTime) -> LatencyProfile {
        let one_way = (0..nodes)
            .map(|a| (0..nodes).map(|b| if a == b { 0 } else { one_way }).collect())
            .collect();
        LatencyProfile { one_way, jitter }
    }

    /// Local-area default: 0.1 ms one way, up to 20 us jitter.
    pub fn lan(nodes: usize) -> LatencyProfile {
        LatencyProfile::uniform(nodes, 100_000, 20_000)
    }

    /// Three-site wide-area profile with representative cross-region
    /// delays (US East / US East 2 / US West). Editable; not measured.
    pub fn wan3() -> LatencyProfile {
        LatencyProfile::from_matrix_ms(
            &[vec![0.0, 6.0, 31.0], vec![6.0, 0.0, 25.0], vec![31.0, 25.0, 0.0]],
            0.5,
        )
        .expect("static profile is valid")
    }

    pub fn from_matrix_ms(rows: &[Vec<f64>], jitter_ms: f64) -> Result<LatencyProfile, ProfileError> {
        if rows.is_empty() {
            return Err(ProfileError::Empty);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(ProfileError::NotSquare { rows: rows.len(), cols: row.len() });
            }
            if row[i] != 0.0 {
                return Err(ProfileError::NonZeroDiagonal(i));
            }
        }
        Ok(LatencyProfile {
            one_way: rows.iter().map(|r| r.iter().map(|&v| ms_to_ns(v)).collect()).collect(),
            jitter: ms_to_ns(jitter_ms),
        })
    }

    pub fn parse(text: &str) -> Result<LatencyProfile, ProfileError> {
        let mut rows = Vec::new();
        let mut jitter = 0.0;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ProfileError::Parse { line: idx + 1, msg };
            if let Some(rest) = line.strip_prefix("jitter") {
                jitter = rest.trim().parse::<f64>().map_err(|e| err(format!("jitter: {e}")))?;
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    let v = tok.parse::<f64>().map_err(|e| err(format!("{tok:?}: {e}")))?;
                    if v < 0.0 || !v.is_finite() {
                        return Err(err(format!("negative or non-finite latency {tok}")));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        LatencyProfile::from_matrix_ms(&rows, jitter)
    }

    pub fn load(path: &Path) -> Result<LatencyProfile, ProfileError> {
        LatencyProfile::parse(&std::fs::read_to_string(path)?)
    }

    pub fn nodes(&self) -> usize {
        self.one_way.len()
    }

    pub fn one_way(&self, src: NodeId, dst: NodeId) -> SimTime {
        self.one_way[src as usize][dst as usize]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.nodes();
        (0..n).all(|a| (0..n).all(|b| self.one_way[a][b] == self.one_way[b][a]))
    }
}
