//! Pairwise sigmoid self-attention over encoder states.
//!
//! For every pair of valid positions `(t, t')`:
//!
//! ```text
//! g[t,t'] = tanh(h_t W_g + h_t' W_g2 + b_g)
//! a[t,t'] = sigmoid(g[t,t'] W_a + b_a)
//! l_t     = sum_t' a[t,t'] h_t'
//! ```
//!
//! Scores are not normalized across `t'`, so `l_t` grows with sequence
//! length.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::recurrent::xavier;
use crate::tensor::{valid_len, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d_h x d_a`
    pub w_g: Tensor,
    /// `d_h x d_a`
    pub w_g2: Tensor,
    /// `1 x d_a`
    pub b_g: Tensor,
    /// `d_a x 1`
    pub w_a: Tensor,
    /// `1 x 1`
    pub b_a: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng>(hidden_dim: usize, attention_dim: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_g: xavier(hidden_dim, attention_dim, rng),
            w_g2: xavier(hidden_dim, attention_dim, rng),
            b_g: Tensor::zeros(1, attention_dim),
            w_a: xavier(attention_dim, 1, rng),
            b_a: Tensor::zeros(1, 1),
        }
    }

    pub fn to_graph(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_g: g.input(self.w_g.clone()),
            w_g2: g.input(self.w_g2.clone()),
            b_g: g.input(self.b_g.clone()),
            w_a: g.input(self.w_a.clone()),
            b_a: g.input(self.b_a.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_g: Var,
    pub w_g2: Var,
    pub b_g: Var,
    pub w_a: Var,
    pub b_a: Var,
}

impl AttentionVars {
    fn check(&self, g: &Graph, hidden: Var) -> Result<()> {
        let h = g.value(hidden);
        let (w_g, w_g2) = (g.value(self.w_g), g.value(self.w_g2));
        let da = w_g.cols();
        let ok = w_g.rows() == h.cols()
            && w_g2.shape() == w_g.shape()
            && g.value(self.b_g).shape() == [1, da]
            && g.value(self.w_a).shape() == [da, 1]
            && g.value(self.b_a).shape() == [1, 1];
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op: "attend",
                lhs: h.shape().to_vec(),
                rhs: w_g.shape().to_vec(),
            })
        }
    }
}

/// Returns `(A: n x n, l: n x d_h)`. Rows and columns of `A` at padding
/// positions are zero, as are the padding rows of `l`.
pub fn attend(g: &mut Graph, p: &AttentionVars, hidden: Var, mask: &[bool]) -> Result<(Var, Var)> {
    p.check(g, hidden)?;
    let (n, dh) = (g.value(hidden).rows(), g.value(hidden).cols());
    if mask.len() != n {
        return Err(Error::contract(format!("mask length {} for {n} positions", mask.len())));
    }
    let m = valid_len(mask)?;
    if m == 0 {
        let a = g.constant(Tensor::zeros(n, n));
        let l = g.constant(Tensor::zeros(n, dh));
        return Ok((a, l));
    }
    let h = if m == n {
        hidden
    } else {
        let idx: Vec<usize> = (0..m).collect();
        g.row_select(hidden, &idx)?
    };
    let left = g.matmul(h, p.w_g)?;
    let right = g.matmul(h, p.w_g2)?;
    let pre = g.pairwise_sum(left, right)?;
    let pre = g.add(pre, p.b_g)?;
    let gate = g.tanh(pre)?;
    let score = g.matmul(gate, p.w_a)?;
    let score = g.add(score, p.b_a)?;
    let alpha = g.sigmoid(score)?;
    let alpha = g.reshape(alpha, m, m)?;
    let focused = g.matmul(alpha, h)?;
    if m == n {
        return Ok((alpha, focused));
    }
    // pad back to n x n and n x d_h
    let col_pad = g.constant(Tensor::zeros(m, n - m));
    let a = g.concat(&[alpha, col_pad], 1)?;
    let row_pad = g.constant(Tensor::zeros(n - m, n));
    let a = g.concat(&[a, row_pad], 0)?;
    let l_pad = g.constant(Tensor::zeros(n - m, dh));
    let l = g.concat(&[focused, l_pad], 0)?;
    Ok((a, l))
}

/// Attention weights with axis labels, for inspection and export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub tokens: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn new(tokens: Vec<String>, weights: &Tensor) -> Result<Self> {
        if weights.rows() != tokens.len() || weights.cols() != tokens.len() {
            return Err(Error::contract(format!(
                "attention matrix {:?} does not match {} tokens",
                weights.shape(),
                tokens.len()
            )));
        }
        let matrix = (0..weights.rows()).map(|r| weights.row(r).to_vec()).collect();
        Ok(AttentionMatrix { tokens, matrix })
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.tokens.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (tok, row) in self.tokens.iter().zip(&self.matrix) {
            let mut rec = vec![tok.clone()];
            // shortest representation that round-trips exactly
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(s.as_bytes());
        let mut records = r.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Validation("empty attention csv".into()))?
            .map_err(csv_err)?;
        let tokens: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut matrix = Vec::new();
        for rec in records {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Validation(e.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            matrix.push(row);
        }
        Ok(AttentionMatrix { tokens, matrix })
    }

    /// Writes `path` as CSV (token header row and column) and a JSON twin
    /// `{tokens, matrix}` next to it with a `.json` extension. Returns the
    /// JSON path.
    pub fn export_heatmap(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))?;
        let json_path = path.with_extension("json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("attention csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_scoring_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = AttentionParams::init(4, 3, &mut rng);
        p.w_a = Tensor::zeros(3, 1);
        let h = rand_tensor(3, 4, &mut rng);
        let mut g = Graph::default();
        let pv = p.to_graph(&mut g);
        let hv = g.constant(h.clone());
        let (a, l) = attend(&mut g, &pv, hv, &[true; 3]).unwrap();
        assert!(g.value(a).data().iter().all(|&x| x == 0.5));
        for t in 0..3 {
            for k in 0..4 {
                let expect = 0.5 * (0..3).map(|s| h.get(s, k)).sum::<f64>();
                assert!((g.value(l).get(t, k) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AttentionParams::init(3, 2, &mut rng);
        p.b_g = rand_tensor(1, 2, &mut rng);
        p.b_a = Tensor::scalar(0.3);
        let h = rand_tensor(1, 3, &mut rng);
        let mut g = Graph::default();
        let pv = p.to_graph(&mut g);
        let hv = g.constant(h.clone());
        let (a, l) = attend(&mut g, &pv, hv, &[true]).unwrap();
        let mut s = p.b_a.item();
        for j in 0..2 {
            let pre: f64 = (0..3).map(|k| h.data()[k] * (p.w_g.get(k, j) + p.w_g2.get(k, j))).sum::<f64>() + p.b_g.data()[j];
            s += pre.tanh() * p.w_a.data()[j];
        }
        let alpha = sig(s);
        assert!((g.value(a).item() - alpha).abs() < 1e-14);
        for k in 0..3 {
            assert!((g.value(l).data()[k] - alpha * h.data()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn padding_rows_and_columns_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::init(4, 4, &mut rng);
        let h = rand_tensor(5, 4, &mut rng);
        let mut g = Graph::default();
        let pv = p.to_graph(&mut g);
        let hv = g.constant(h);
        let (a, l) = attend(&mut g, &pv, hv, &[true, true, true, false, false]).unwrap();
        let av = g.value(a);
        for t in 0..5 {
            for s in 0..5 {
                let v = av.get(t, s);
                if t < 3 && s < 3 {
                    assert!(v > 0.0 && v < 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(g.value(l).row(4).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heatmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::matrix(2, 2, vec![0.123456789012345, 0.5, 1.0 / 3.0, 0.999]).unwrap();
        let m = AttentionMatrix::new(vec![",".into(), "duck".into()], &w).unwrap();
        let csv_path = dir.path().join("attn.csv");
        let json_path = m.export_heatmap(&csv_path).unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let back = AttentionMatrix::from_csv_str(&csv).unwrap();
        assert_eq!(back, m);
        let json: AttentionMatrix = serde_json::from_str(&fs::read_to_string(json_path).unwrap()).unwrap();
        assert_eq!(json, back);
    }

    #[test]
    fn token_count_must_match() {
        assert!(AttentionMatrix::new(vec!["a".into()], &Tensor::zeros(2, 2)).is_err());
    }
}
