//! Forward-mode propagation of input tangents through a cached forward pass.
//!
//! `K` tangents are processed together, stacked as `K` copies of the batch layout so
//! every per-edge product stays one matrix multiply.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::forward::{silu_prime, VectorFieldEval};
use super::graph::center_blocks;
use super::params::EgnnParams;

/// Multiplies each `rows`-row chunk of `a` elementwise by `b`.
fn mul_tiled(a: &mut Array2<f64>, b: &Array2<f64>) {
    if b.nrows() == 0 {
        return;
    }
    for mut chunk in a.axis_chunks_iter_mut(Axis(0), b.nrows()) {
        chunk *= b;
    }
}

/// Jacobian-vector products `(∂v/∂x)·dx` for `k` stacked tangents.
///
/// `dx` holds `k` blocks shaped like the evaluated batch; so does the output.
pub(crate) fn jvp(params: &EgnnParams, eval: &VectorFieldEval, dx: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let flat = params.as_flat();
    let graph = &eval.graph;
    let ne = graph.n_edges();
    let nn = graph.n_nodes();
    debug_assert_eq!(dx.nrows(), nn * k);
    let mut dx_cur = dx.to_owned();
    let mut dh: Option<Array2<f64>> = None;

    for (sl, c) in params.layout.layers.iter().zip(&eval.layers) {
        let dr = graph.edge_diff(dx_cur.view(), k);
        let mut ds = Array1::<f64>::zeros(ne * k);
        for (e, drow) in dr.axis_iter(Axis(0)).enumerate() {
            ds[e] = 2.0 * c.r.row(e % ne).dot(&drow);
        }

        let mut dpre_e = match &dh {
            Some(dh) => {
                let da = dh.dot(&sl.e_wa.mat(flat).t());
                let db = dh.dot(&sl.e_wb.mat(flat).t());
                graph.gather_pair(da.view(), db.view(), k)
            }
            None => Array2::zeros((ne * k, c.pre_e.ncols())),
        };
        let wd = sl.e_wd.vec(flat);
        for (mut row, &s) in dpre_e.axis_iter_mut(Axis(0)).zip(ds.iter()) {
            row.scaled_add(s, &wd);
        }
        mul_tiled(&mut dpre_e, &c.pre_e.mapv(silu_prime));
        let dm = dpre_e.dot(&sl.e_w2.mat(flat).t());

        let mut dpre_d = dm.dot(&sl.d_w1.mat(flat).t());
        mul_tiled(&mut dpre_d, &c.pre_d.mapv(silu_prime));
        let dphi = dpre_d.dot(&sl.d_w2.vec(flat));

        let mut dshift = dr;
        for (e, mut row) in dshift.axis_iter_mut(Axis(0)).enumerate() {
            let i = e % ne;
            let denom = c.dist[i] + 1.0;
            let dd = ds[e] * 0.5 / c.dist[i];
            let dcoef = dphi[e] / denom - c.phi[i] * dd / (denom * denom);
            row *= c.coef[i];
            row.scaled_add(dcoef, &c.r.row(i));
        }
        dx_cur += &graph.scatter_src(dshift.view(), k);

        dh = c.node.as_ref().map(|node| {
            let g_prime = node.gate.mapv(|g| g * (1.0 - g));
            let dpre_g = dm.dot(&sl.m_w.vec(flat));
            let mut dgated = dm.clone();
            for (e, mut row) in dgated.axis_iter_mut(Axis(0)).enumerate() {
                let i = e % ne;
                row *= node.gate[i];
                row.scaled_add(g_prime[i] * dpre_g[e], &c.m.row(i));
            }
            let dmagg = graph.scatter_src(dgated.view(), k);
            let mut dpre_h = dmagg.dot(&sl.h_wm.mat(flat).t());
            if let Some(dh) = &dh {
                dpre_h += &dh.dot(&sl.h_wh.mat(flat).t());
            }
            mul_tiled(&mut dpre_h, &node.pre_h.mapv(silu_prime));
            dpre_h.dot(&sl.h_w2.mat(flat).t())
        });
    }

    let mut dv = dx_cur - dx;
    center_blocks(&mut dv, graph.n);
    dv
}

/// Exact divergence `Σ_{i,d} ∂v_{i,d}/∂x_{i,d}` of every configuration in the batch,
/// from `N·D` canonical tangents propagated at once per chunk.
pub(crate) fn divergence(params: &EgnnParams, eval: &VectorFieldEval, dim: usize) -> Array1<f64> {
    let graph = &eval.graph;
    let (n, nn) = (graph.n, graph.n_nodes());
    let total = n * dim;
    // keep the stacked edge arrays to a few tens of megabytes
    let per_tangent = graph.n_edges().max(1) * params.config().n_hidden.max(dim);
    let chunk = (2_000_000 / per_tangent).clamp(1, total.max(1));
    let mut div = Array1::<f64>::zeros(graph.samples);
    let mut start = 0;
    while start < total {
        let k = chunk.min(total - start);
        let mut dx = Array2::<f64>::zeros((nn * k, dim));
        for j in 0..k {
            let (i, d) = ((start + j) / dim, (start + j) % dim);
            for s in 0..graph.samples {
                dx[[j * nn + s * n + i, d]] = 1.0;
            }
        }
        let dv = jvp(params, eval, dx.view(), k);
        for j in 0..k {
            let (i, d) = ((start + j) / dim, (start + j) % dim);
            for s in 0..graph.samples {
                div[s] += dv[[j * nn + s * n + i, d]];
            }
        }
        start += k;
    }
    div
}

