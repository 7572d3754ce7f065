use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::module_label;

/// `2L × S` matrix of per-module, per-token scalars.
///
/// Rows follow module order `attn0, mlp0, attn1, ...`. Holds either cosine
/// similarities or execution indicators (1 = module executed for the token,
/// 0 = skipped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TraceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "trace_matrix",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.rows).map(module_label).collect()
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    /// Splits a pooled batch matrix into one matrix per sequence.
    pub fn split_sequences(&self, seq_len: usize) -> Vec<Self> {
        (0..self.cols / seq_len)
            .map(|s| self.columns(s * seq_len, (s + 1) * seq_len))
            .collect()
    }

    /// Concatenates matrices with equal row counts along the token axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::contract(
                "concatenating trace matrices with different row counts",
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// CSV with a `module` label column and one column per token position.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("module");
        for c in 0..self.cols {
            let _ = write!(out, ",t{c}");
        }
        out.push('\n');
        for (r, label) in self.labels().iter().enumerate() {
            out.push_str(label);
            for v in self.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
