//! Aggregated self-and-cross attention.
//!
//! Target queries attend over the keys of the target view followed by the
//! keys of every reference view, concatenated along the token axis:
//!
//! ```text
//! K = [K_tgt; K_1; …; K_N]     V = [V_tgt; V_1; …; V_N]
//! out = softmax(q Kᵀ / √d) V
//! ```
//!
//! Single head, row-wise max-subtracted softmax, fixed summation order.

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] = a.iter().zip(other.row(c)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::input("stacked matrices differ in width"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Mat {
        Mat {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Query rows of the target view with the key/value pairs of the target and
/// each reference view.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockInput {
    pub q: Mat,
    pub target_kv: (Mat, Mat),
    pub ref_kv: Vec<(Mat, Mat)>,
}

impl AttentionBlockInput {
    fn kv_pairs(&self) -> impl Iterator<Item = &(Mat, Mat)> {
        std::iter::once(&self.target_kv).chain(self.ref_kv.iter())
    }

    pub fn key_width(&self) -> usize {
        self.q.cols
    }

    pub fn value_width(&self) -> usize {
        self.target_kv.1.cols
    }

    pub fn total_keys(&self) -> usize {
        self.kv_pairs().map(|(k, _)| k.rows).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.q.cols;
        let dv = self.target_kv.1.cols;
        if d == 0 {
            return Err(Error::input("attention key width must be at least 1"));
        }
        for (view, (k, v)) in self.kv_pairs().enumerate() {
            if k.cols != d {
                return Err(Error::input(format!(
                    "keys of view {view} have width {}, queries have {d}",
                    k.cols
                )));
            }
            if v.cols != dv {
                return Err(Error::input(format!(
                    "values of view {view} have width {}, expected {dv}",
                    v.cols
                )));
            }
            if k.rows != v.rows {
                return Err(Error::input(format!(
                    "view {view} has {} keys but {} values",
                    k.rows, v.rows
                )));
            }
        }
        if self.total_keys() == 0 {
            return Err(Error::input("attention needs at least one key"));
        }
        if !self.q.is_finite() || self.kv_pairs().any(|(k, v)| !k.is_finite() || !v.is_finite()) {
            return Err(Error::numerical("attention inputs contain non-finite values"));
        }
        Ok(())
    }

    fn stacked(&self) -> Result<(Mat, Mat)> {
        let keys: Vec<&Mat> = self.kv_pairs().map(|(k, _)| k).collect();
        let values: Vec<&Mat> = self.kv_pairs().map(|(_, v)| v).collect();
        Ok((Mat::vstack(&keys)?, Mat::vstack(&values)?))
    }
}

/// Forward state needed by [`attention_backward_cached`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    keys: Mat,
    values: Mat,
    weights: Mat,
    view_rows: Vec<usize>,
}

impl AttentionCache {
    /// `T_t × (T_t + ΣT_r)` softmax weights.
    pub fn weights(&self) -> &Mat {
        &self.weights
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Mat,
    pub weights: Option<Mat>,
}

/// Forward pass that also returns the cache for the backward pass.
pub fn attention_forward(input: &AttentionBlockInput) -> Result<(Mat, AttentionCache)> {
    input.validate()?;
    let (keys, values) = input.stacked()?;
    let scale = 1.0 / (input.key_width() as f64).sqrt();
    let mut weights = input.q.matmul_t(&keys);
    for r in 0..weights.rows {
        let row = weights.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    let output = weights.matmul(&values);
    if !output.is_finite() {
        return Err(Error::numerical("attention output is not finite"));
    }
    let view_rows = input.kv_pairs().map(|(k, _)| k.rows).collect();
    Ok((
        output,
        AttentionCache {
            keys,
            values,
            weights,
            view_rows,
        },
    ))
}

/// `softmax(q Kᵀ/√d) V`; the weight matrix is returned only on request.
pub fn aggregated_attention(input: &AttentionBlockInput, return_weights: bool) -> Result<AttentionOutput> {
    let (output, cache) = attention_forward(input)?;
    Ok(AttentionOutput {
        output,
        weights: return_weights.then_some(cache.weights),
    })
}

/// Gradients of a scalar loss with respect to every attention input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub dq: Mat,
    pub d_target: (Mat, Mat),
    pub d_refs: Vec<(Mat, Mat)>,
}

/// Reverse-mode pass through the cached forward.
pub fn attention_backward_cached(
    input: &AttentionBlockInput,
    cache: &AttentionCache,
    upstream: &Mat,
) -> Result<AttentionGrads> {
    if upstream.rows != input.q.rows || upstream.cols != cache.values.cols {
        return Err(Error::input(format!(
            "upstream gradient is {}x{}, output is {}x{}",
            upstream.rows,
            upstream.cols,
            input.q.rows,
            cache.values.cols
        )));
    }
    if cache.keys.rows != input.total_keys() || cache.weights.rows != input.q.rows {
        return Err(Error::State("attention cache does not match the input".into()));
    }
    let scale = 1.0 / (input.key_width() as f64).sqrt();
    let p = &cache.weights;
    let d_values = p.t_matmul(upstream);
    let d_p = upstream.matmul_t(&cache.values);
    let mut d_s = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let (pr, dpr) = (p.row(r), d_p.row(r));
        let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dpv) in d_s.row_mut(r).iter_mut().zip(pr).zip(dpr) {
            *o = pv * (dpv - inner) * scale;
        }
    }
    let dq = d_s.matmul(&cache.keys);
    let d_keys = d_s.t_matmul(&input.q);

    let mut blocks = Vec::with_capacity(cache.view_rows.len());
    let mut start = 0;
    for &n in &cache.view_rows {
        blocks.push((d_keys.row_block(start, n), d_values.row_block(start, n)));
        start += n;
    }
    let mut blocks = blocks.into_iter();
    let d_target = blocks.next().expect("target block");
    Ok(AttentionGrads {
        dq,
        d_target,
        d_refs: blocks.collect(),
    })
}

/// Recomputes the forward pass and back-propagates `upstream`.
pub fn attention_backward(input: &AttentionBlockInput, upstream: &Mat) -> Result<AttentionGrads> {
    let (_, cache) = attention_forward(input)?;
    attention_backward_cached(input, &cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let input = AttentionBlockInput {
            q: m(2, 2, &[0.3, -1.0, 4.0, 2.0]),
            target_kv: (m(1, 2, &[1.0, 2.0]), m(1, 3, &[5.0, -6.0, 7.0])),
            ref_kv: vec![],
        };
        let out = aggregated_attention(&input, true).unwrap();
        assert_eq!(out.output.row(0), &[5.0, -6.0, 7.0]);
        assert_eq!(out.output.row(1), &[5.0, -6.0, 7.0]);
        assert_eq!(out.weights.unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let input = AttentionBlockInput {
            q: m(1, 2, &[0.5, 0.5]),
            target_kv: (m(1, 2, &[1.0, 1.0]), m(1, 2, &[2.0, 0.0])),
            ref_kv: vec![(m(1, 2, &[1.0, 1.0]), m(1, 2, &[4.0, 2.0]))],
        };
        let out = aggregated_attention(&input, false).unwrap();
        assert!(out.weights.is_none());
        assert!((out.output.get(0, 0) - 3.0).abs() < 1e-15);
        assert!((out.output.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_and_non_finite_inputs() {
        let bad_width = AttentionBlockInput {
            q: m(1, 2, &[0.0, 0.0]),
            target_kv: (m(1, 3, &[0.0; 3]), m(1, 1, &[0.0])),
            ref_kv: vec![],
        };
        assert!(matches!(aggregated_attention(&bad_width, false), Err(Error::Input(_))));
        let nan = AttentionBlockInput {
            q: m(1, 1, &[f64::NAN]),
            target_kv: (m(1, 1, &[0.0]), m(1, 1, &[0.0])),
            ref_kv: vec![],
        };
        assert!(matches!(aggregated_attention(&nan, false), Err(Error::Numerical(_))));
        let rows = AttentionBlockInput {
            q: m(1, 1, &[0.0]),
            target_kv: (m(2, 1, &[0.0, 1.0]), m(1, 1, &[0.0])),
            ref_kv: vec![],
        };
        assert!(aggregated_attention(&rows, false).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let input = AttentionBlockInput {
            q: m(2, 2, &[0.1, 0.2, 0.3, 0.4]),
            target_kv: (m(2, 2, &[1.0, 0.0, 0.0, 1.0]), m(2, 1, &[1.0, 2.0])),
            ref_kv: vec![(m(1, 2, &[0.5, 0.5]), m(1, 1, &[3.0]))],
        };
        let g = attention_backward(&input, &Mat::zeros(2, 1)).unwrap();
        assert!(g.dq.data.iter().all(|&v| v == 0.0));
        assert!(g.d_target.0.data.iter().chain(&g.d_target.1.data).all(|&v| v == 0.0));
        assert!(g.d_refs[0].0.data.iter().chain(&g.d_refs[0].1.data).all(|&v| v == 0.0));
        assert!(attention_backward(&input, &Mat::zeros(2, 2)).is_err());
    }
}
