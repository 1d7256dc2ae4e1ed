//! Forward evaluation of the vector field with the intermediates the backward and
//! tangent passes reuse.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::graph::{center_blocks, Graph};
use super::params::{EgnnParams, LayerSlots};
use crate::geom::ParticleTyping;

/// Softening inside the distance used by the coordinate update.
pub(crate) const DIST_EPS: f64 = 1e-16;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn linear(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: Option<ArrayView1<'_, f64>>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

pub(crate) fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// Per-node state the coordinate-only last layer does not need.
#[derive(Debug, Clone)]
pub(crate) struct NodeCache {
    pub gate: Array1<f64>,
    pub magg: Array2<f64>,
    pub pre_h: Array2<f64>,
    pub z_h: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub h_in: Array2<f64>,
    pub r: Array2<f64>,
    pub dist: Array1<f64>,
    pub pre_e: Array2<f64>,
    pub z_e: Array2<f64>,
    pub m: Array2<f64>,
    pub pre_d: Array2<f64>,
    pub z_d: Array2<f64>,
    pub phi: Array1<f64>,
    pub coef: Array1<f64>,
    pub node: Option<NodeCache>,
}

/// Output of a forward pass over a batch of configurations.
#[derive(Debug, Clone)]
pub struct VectorFieldEval {
    /// Stacked `N x D` blocks, one per configuration; each block sums to zero per column.
    pub v: Array2<f64>,
    pub(crate) graph: Graph,
    pub(crate) layers: Vec<LayerCache>,
}

impl VectorFieldEval {
    pub fn n_samples(&self) -> usize {
        self.graph.samples
    }

    /// Field of configuration `k`.
    pub fn block(&self, k: usize) -> ArrayView2<'_, f64> {
        let n = self.graph.n;
        self.v.slice(ndarray::s![k * n..(k + 1) * n, ..])
    }
}

pub(crate) fn initial_hidden(params: &EgnnParams, ts: &[f64], n: usize, typing: &ParticleTyping) -> Array2<f64> {
    let flat = params.as_flat();
    let h = params.config().n_hidden;
    let emb_w = params.layout.emb_w.mat(flat);
    let emb_b = params.layout.emb_b.vec(flat);
    let mut h0 = Array2::zeros((n * ts.len(), h));
    for (s, &t) in ts.iter().enumerate() {
        for i in 0..n {
            let mut row = h0.row_mut(s * n + i);
            row[0] = t;
            let ty = typing.type_ids()[i];
            for q in 0..h - 1 {
                row[q + 1] = emb_w[[q, ty]] + emb_b[q];
            }
        }
    }
    h0
}

fn layer_forward(
    flat: &[f64],
    sl: &LayerSlots,
    graph: &Graph,
    x: &Array2<f64>,
    h: Array2<f64>,
    update_nodes: bool,
) -> (Array2<f64>, Option<Array2<f64>>, LayerCache) {
    let r = graph.edge_diff(x.view(), 1);
    let sq: Array1<f64> = r.map_axis(Axis(1), |row| row.dot(&row));
    let dist = sq.mapv(|s| (s + DIST_EPS).sqrt());

    let ha = linear(h.view(), sl.e_wa.mat(flat), None);
    let hb = linear(h.view(), sl.e_wb.mat(flat), None);
    let mut pre_e = graph.gather_pair(ha.view(), hb.view(), 1);
    let wd = sl.e_wd.vec(flat);
    let b1 = sl.e_b1.vec(flat);
    for (mut row, &s) in pre_e.axis_iter_mut(Axis(0)).zip(sq.iter()) {
        row.scaled_add(s, &wd);
        row += &b1;
    }
    let z_e = silu(&pre_e);
    let m = linear(z_e.view(), sl.e_w2.mat(flat), Some(sl.e_b2.vec(flat)));

    let pre_d = linear(m.view(), sl.d_w1.mat(flat), Some(sl.d_b1.vec(flat)));
    let z_d = silu(&pre_d);
    let phi = z_d.dot(&sl.d_w2.vec(flat)) + sl.d_b2.scalar(flat);
    let coef = &phi / &(&dist + 1.0);

    let mut shift = r.clone();
    for (mut row, &c) in shift.axis_iter_mut(Axis(0)).zip(coef.iter()) {
        row *= c;
    }
    let x_out = x + &graph.scatter_src(shift.view(), 1);

    let (h_out, node) = if update_nodes {
        let gate = (m.dot(&sl.m_w.vec(flat)) + sl.m_b.scalar(flat)).mapv(sigmoid);
        let mut gated = m.clone();
        for (mut row, &g) in gated.axis_iter_mut(Axis(0)).zip(gate.iter()) {
            row *= g;
        }
        let magg = graph.scatter_src(gated.view(), 1);
        let mut pre_h = linear(h.view(), sl.h_wh.mat(flat), Some(sl.h_b1.vec(flat)));
        pre_h += &linear(magg.view(), sl.h_wm.mat(flat), None);
        let z_h = silu(&pre_h);
        let h_out = linear(z_h.view(), sl.h_w2.mat(flat), Some(sl.h_b2.vec(flat)));
        (Some(h_out), Some(NodeCache { gate, magg, pre_h, z_h }))
    } else {
        (None, None)
    };

    let cache = LayerCache { h_in: h, r, dist, pre_e, z_e, m, pre_d, z_d, phi, coef, node };
    (x_out, h_out, cache)
}

/// Evaluates the field on `ts.len()` configurations stacked in `xs` (`N` rows each).
///
/// The geometric center is removed from the output of every block: the layer update
/// only conserves it when edge messages are symmetric, which holds at the first layer
/// for identical particles but not in general.
pub(crate) fn forward_batch(
    params: &EgnnParams,
    ts: &[f64],
    xs: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> VectorFieldEval {
    let n = typing.n_particles();
    let graph = Graph::new(n, ts.len());
    let flat = params.as_flat();
    let n_layers = params.layout.layers.len();
    let mut x = xs.to_owned();
    let mut h = initial_hidden(params, ts, n, typing);
    let mut layers = Vec::with_capacity(n_layers);
    for (l, sl) in params.layout.layers.iter().enumerate() {
        let (x_out, h_out, cache) = layer_forward(flat, sl, &graph, &x, h, l + 1 < n_layers);
        layers.push(cache);
        x = x_out;
        h = h_out.unwrap_or_else(|| Array2::zeros((0, 0)));
    }
    let mut v = x - xs;
    center_blocks(&mut v, n);
    VectorFieldEval { v, graph, layers }
}
