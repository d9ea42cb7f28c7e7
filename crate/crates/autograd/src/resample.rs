//! Fixed sparse linear maps over the trailing axis, used for resizing and
//! gather-style reindexing.

use std::sync::Arc;

use crate::tensor::{Backward, BackwardCtx, Tensor};

#[derive(Debug, Clone)]
struct Csr {
    n_in: usize,
    n_out: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    fn from_rows(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_start.push(0);
        for row in rows {
            for &(c, w) in row {
                assert!(c < n_in, "sparse map column {c} out of range {n_in}");
                cols.push(c);
                weights.push(w);
            }
            row_start.push(cols.len());
        }
        Csr { n_in, n_out: rows.len(), row_start, cols, weights }
    }

    fn transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_in];
        for r in 0..self.n_out {
            for i in self.row_start[r]..self.row_start[r + 1] {
                rows[self.cols[i]].push((r, self.weights[i]));
            }
        }
        Csr::from_rows(self.n_out, &rows)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let batches = x.len() / self.n_in;
        let mut out = vec![0.0; batches * self.n_out];
        for (src, dst) in x.chunks_exact(self.n_in).zip(out.chunks_exact_mut(self.n_out)) {
            for (r, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in self.row_start[r]..self.row_start[r + 1] {
                    acc += self.weights[i] * src[self.cols[i]];
                }
                *d = acc;
            }
        }
        out
    }
}

/// A sparse matrix `M` (`n_out x n_in`) applied independently to every
/// length-`n_in` row of a tensor's trailing axis. Its adjoint is cached so
/// both directions cost the same.
#[derive(Debug, Clone)]
pub struct SparseMap {
    fwd: Arc<Csr>,
    adj: Arc<Csr>,
}

impl SparseMap {
    /// Builds the map from its rows; row `r` lists `(input index, weight)`.
    pub fn from_rows(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let fwd = Csr::from_rows(n_in, rows);
        let adj = fwd.transpose();
        SparseMap { fwd: Arc::new(fwd), adj: Arc::new(adj) }
    }

    pub fn n_in(&self) -> usize {
        self.fwd.n_in
    }

    pub fn n_out(&self) -> usize {
        self.fwd.n_out
    }

    pub fn transposed(&self) -> SparseMap {
        SparseMap { fwd: self.adj.clone(), adj: self.fwd.clone() }
    }

    /// Applies the map to raw data laid out as `[batches, n_in]`.
    pub fn apply_raw(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len() % self.fwd.n_in, 0, "input length not a multiple of n_in");
        self.fwd.apply(x)
    }

    /// Bilinear resize of `[.., in_h, in_w]` planes to `out_h x out_w`, with
    /// half-pixel centers. When `antialias` is set and the map shrinks an
    /// axis, the triangle kernel widens to the shrink factor.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize, antialias: bool) -> SparseMap {
        let wy = resize_weights(in_h, out_h, antialias);
        let wx = resize_weights(in_w, out_w, antialias);
        let mut rows = Vec::with_capacity(out_h * out_w);
        for ry in &wy {
            for rx in &wx {
                let mut row = Vec::with_capacity(ry.len() * rx.len());
                for &(iy, a) in ry {
                    for &(ix, b) in rx {
                        row.push((iy * in_w + ix, a * b));
                    }
                }
                rows.push(row);
            }
        }
        SparseMap::from_rows(in_h * in_w, &rows)
    }
}

/// One-dimensional triangle-filter weights mapping `n_in` samples to `n_out`.
pub fn resize_weights(n_in: usize, n_out: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    assert!(n_in > 0 && n_out > 0, "cannot resize empty axis");
    let scale = n_in as f64 / n_out as f64;
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in);
            let mut row: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|i| {
                    let d = ((i as f64 + 0.5 - center) / support).abs();
                    (d < 1.0).then_some((i, 1.0 - d))
                })
                .collect();
            if row.is_empty() {
                let i = (center.floor() as usize).min(n_in - 1);
                row.push((i, 1.0));
            }
            let total: f64 = row.iter().map(|r| r.1).sum();
            row.iter_mut().for_each(|r| r.1 /= total);
            row
        })
        .collect()
}

struct ApplySparse(SparseMap);

impl Backward for ApplySparse {
    fn name(&self) -> &'static str {
        "sparse_map"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad.apply_sparse(&self.0.transposed());
        vec![Some(g.reshape(ctx.inputs[0].shape()))]
    }
}

impl Tensor {
    /// Applies `map` along the flattened trailing axes. The input's leading
    /// axis is kept as the batch axis; the result has shape `[lead, n_out]`.
    pub fn apply_sparse(&self, map: &SparseMap) -> Tensor {
        let lead = self.numel() / map.n_in();
        assert_eq!(lead * map.n_in(), self.numel(), "sparse map input mismatch");
        let out = map.apply_raw(self.data());
        Tensor::from_op(out, &[lead, map.n_out()], ApplySparse(map.clone()), vec![self.clone()])
    }

    /// Bilinear resize of a `[C, H, W]` tensor.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor {
        assert_eq!(self.rank(), 3, "resize needs [C, H, W]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let map = SparseMap::resize(h, w, out_h, out_w, false);
        self.reshape(&[c, h * w]).apply_sparse(&map).reshape(&[c, out_h, out_w])
    }
}
