//! Routing trace: one record per (image, MoE layer), JSONL on disk.
//!
//! Gate weights are stored at 32-bit precision. `grid` is `[h, w]` for
//! spatial token grids; sequence-shaped layers (ViT token stacks with a
//! class token) use `[1, T]`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub image_id: u64,
    pub class_id: Option<u32>,
    pub layer_id: u32,
    pub grid: [usize; 2],
    /// Per token: the k chosen expert indices, strongest first.
    pub topk: Vec<Vec<u32>>,
    /// Per token: the matching raw gate weights.
    pub weights: Vec<Vec<f32>>,
}

impl TraceRecord {
    pub fn tokens(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn k(&self) -> usize {
        self.topk.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tokens();
        if t == 0 {
            return Err(Error::parse("trace record", "empty token grid"));
        }
        if self.topk.len() != t || self.weights.len() != t {
            return Err(Error::parse(
                "trace record",
                format!(
                    "token count {} != grid {}x{}",
                    self.topk.len(),
                    self.grid[0],
                    self.grid[1]
                ),
            ));
        }
        let k = self.k();
        if k == 0 {
            return Err(Error::parse("trace record", "empty top-k row"));
        }
        for (idx_row, w_row) in self.topk.iter().zip(&self.weights) {
            if idx_row.len() != k || w_row.len() != k {
                return Err(Error::parse(
                    "trace record",
                    format!("ragged top-k rows (expected k = {k})"),
                ));
            }
            if w_row.iter().any(|w| !w.is_finite()) {
                return Err(Error::parse("trace record", "non-finite gate weight"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTrace {
    pub records: Vec<TraceRecord>,
}

impl RoutingTrace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct layer ids, ascending.
    pub fn layer_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.layer_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::parse("trace serialize", e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("trace write", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("trace read", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| {
                Error::parse(format!("trace line {}", lineno + 1), e.to_string())
            })?;
            rec.validate()?;
            records.push(rec);
        }
        Ok(RoutingTrace { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TraceRecord {
        TraceRecord {
            image_id: 0,
            class_id: Some(3),
            layer_id: 5,
            grid: [2, 2],
            topk: vec![vec![0, 1], vec![1, 0], vec![2, 1], vec![0, 2]],
            weights: vec![
                vec![0.6, 0.2],
                vec![0.5, 0.3],
                vec![0.9, 0.05],
                vec![0.4, 0.3],
            ],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let trace = RoutingTrace {
            records: vec![record(), {
                let mut r = record();
                r.image_id = 1;
                r.class_id = None;
                r
            }],
        };
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let back = RoutingTrace::read_jsonl(&buf[..]).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn validation_rejects_ragged_and_mismatched() {
        let mut r = record();
        r.topk[1].pop();
        assert!(r.validate().is_err());

        let mut r = record();
        r.grid = [3, 2];
        assert!(r.validate().is_err());

        let mut r = record();
        r.weights[0][0] = f32::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn read_rejects_unknown_fields() {
        let line = r#"{"image_id":0,"class_id":null,"layer_id":1,"grid":[1,1],"topk":[[0]],"weights":[[1.0]],"extra":true}"#;
        assert!(RoutingTrace::read_jsonl(line.as_bytes()).is_err());
    }
}
