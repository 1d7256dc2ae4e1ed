//! Fully connected graphs over a batch of equally sized configurations.
//!
//! Edges are ordered by source node: the `N − 1` outgoing edges of node `u`
//! occupy rows `u·(N−1) .. (u+1)·(N−1)`, so summing messages onto their source is a
//! contiguous block reduction.

use ndarray::{Array2, ArrayView2, Axis};

#[derive(Debug, Clone)]
pub(crate) struct Graph {
    pub n: usize,
    pub samples: usize,
    pub dst: Vec<usize>,
}

impl Graph {
    pub fn new(n: usize, samples: usize) -> Self {
        let deg = n.saturating_sub(1);
        let mut dst = Vec::with_capacity(n * deg * samples);
        for s in 0..samples {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    dst.push(s * n + j);
                }
            }
        }
        Graph { n, samples, dst }
    }

    pub fn deg(&self) -> usize {
        self.n.saturating_sub(1)
    }

    pub fn n_nodes(&self) -> usize {
        self.n * self.samples
    }

    pub fn n_edges(&self) -> usize {
        self.dst.len()
    }

    #[inline]
    pub fn src(&self, e: usize) -> usize {
        e / self.deg()
    }

    /// `out[e] = a[src(e)] + b[dst(e)]`, repeated for `blocks` stacked copies
    /// (block `k` of `a`/`b` has `n_nodes` rows, block `k` of the output `n_edges`).
    pub fn gather_pair(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, blocks: usize) -> Array2<f64> {
        let c = a.ncols();
        let (nn, ne) = (self.n_nodes(), self.n_edges());
        let mut out = Array2::zeros((ne * blocks, c));
        let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
        let (asl, bsl) = (a.as_slice().unwrap(), b.as_slice().unwrap());
        let osl = out.as_slice_mut().unwrap();
        for k in 0..blocks {
            for e in 0..ne {
                let ra = (k * nn + self.src(e)) * c;
                let rb = (k * nn + self.dst[e]) * c;
                let ro = (k * ne + e) * c;
                for q in 0..c {
                    osl[ro + q] = asl[ra + q] + bsl[rb + q];
                }
            }
        }
        out
    }

    /// `out[e] = x[src(e)] − x[dst(e)]` per stacked block.
    pub fn edge_diff(&self, x: ArrayView2<'_, f64>, blocks: usize) -> Array2<f64> {
        let c = x.ncols();
        let (nn, ne) = (self.n_nodes(), self.n_edges());
        let mut out = Array2::zeros((ne * blocks, c));
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for k in 0..blocks {
            for e in 0..ne {
                let (ri, rj, ro) = ((k * nn + self.src(e)) * c, (k * nn + self.dst[e]) * c, (k * ne + e) * c);
                for q in 0..c {
                    osl[ro + q] = xs[ri + q] - xs[rj + q];
                }
            }
        }
        out
    }

    /// Sums edge rows onto their source node, per stacked block.
    pub fn scatter_src(&self, edges: ArrayView2<'_, f64>, blocks: usize) -> Array2<f64> {
        let c = edges.ncols();
        let deg = self.deg();
        let mut out = Array2::zeros((self.n_nodes() * blocks, c));
        if deg == 0 {
            return out;
        }
        for (u, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let group = edges.slice(ndarray::s![u * deg..(u + 1) * deg, ..]);
            row.assign(&group.sum_axis(Axis(0)));
        }
        out
    }

    /// Sums edge rows onto their destination node (single block).
    pub fn scatter_dst(&self, edges: ArrayView2<'_, f64>) -> Array2<f64> {
        let c = edges.ncols();
        let mut out = Array2::<f64>::zeros((self.n_nodes(), c));
        let edges = edges.as_standard_layout();
        let es = edges.as_slice().unwrap();
        let osl = out.as_slice_mut().unwrap();
        for (e, &j) in self.dst.iter().enumerate() {
            for q in 0..c {
                osl[j * c + q] += es[e * c + q];
            }
        }
        out
    }
}

/// Removes the per-sample geometric center from stacked `N`-row blocks.
pub(crate) fn center_blocks(x: &mut Array2<f64>, n: usize) {
    if n == 0 {
        return;
    }
    let d = x.ncols();
    for mut block in x.axis_chunks_iter_mut(Axis(0), n) {
        for k in 0..d {
            let mut col = block.column_mut(k);
            let mean = col.sum() / n as f64;
            col -= mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn edges_enumerate_ordered_pairs() {
        let g = Graph::new(3, 2);
        assert_eq!(g.n_edges(), 12);
        let pairs: Vec<(usize, usize)> = (0..g.n_edges()).map(|e| (g.src(e), g.dst[e])).collect();
        assert_eq!(&pairs[..6], &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        assert_eq!(pairs[6], (3, 4));
    }

    #[test]
    fn scatters_are_adjoint_to_gathers() {
        let g = Graph::new(3, 1);
        let x = array![[1.0], [2.0], [4.0]];
        let diff = g.edge_diff(x.view(), 1);
        assert_eq!(diff.column(0).to_vec(), vec![-1.0, -3.0, 1.0, -2.0, 3.0, 2.0]);
        let s = g.scatter_src(diff.view(), 1);
        assert_eq!(s.column(0).to_vec(), vec![-4.0, -1.0, 5.0]);
        let d = g.scatter_dst(diff.view());
        assert_eq!(d.column(0).to_vec(), vec![4.0, 1.0, -5.0]);
    }

    #[test]
    fn single_particle_has_no_edges() {
        let g = Graph::new(1, 3);
        assert_eq!(g.n_edges(), 0);
        let out = g.scatter_src(Array2::zeros((0, 2)).view(), 1);
        assert_eq!(out.dim(), (3, 2));
    }
}
