//! Reverse accumulation of parameter gradients through the layer stack.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::forward::{silu_prime, VectorFieldEval, DIST_EPS};
use super::graph::center_blocks;
use super::params::EgnnParams;
use crate::geom::ParticleTyping;

fn add_colsum(dst: &mut ndarray::ArrayViewMut1<'_, f64>, m: &Array2<f64>) {
    *dst += &m.sum_axis(Axis(0));
}

/// Adds `∂(Σ grad_v ⊙ v)/∂θ` to `grad` for a forward pass over a batch.
pub(crate) fn backward(
    params: &EgnnParams,
    eval: &VectorFieldEval,
    grad_v: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
    grad: &mut [f64],
) {
    let flat = params.as_flat();
    let graph = &eval.graph;
    let n = graph.n;
    let mut gx = grad_v.to_owned();
    center_blocks(&mut gx, n);
    let mut gh: Option<Array2<f64>> = None;

    for (sl, c) in params.layout.layers.iter().zip(&eval.layers).rev() {
        let ne = graph.n_edges();
        let hidden = c.m.ncols();
        let mut gh_in = Array2::<f64>::zeros(c.h_in.dim());
        let mut gm = Array2::<f64>::zeros((ne, hidden));

        if let (Some(node), Some(gh_out)) = (&c.node, gh.as_ref()) {
            let gz_h = gh_out.dot(&sl.h_w2.mat(flat));
            sl.h_w2.mat_mut(grad).scaled_add(1.0, &gh_out.t().dot(&node.z_h));
            add_colsum(&mut sl.h_b2.vec_mut(grad), gh_out);
            let gpre_h = gz_h * &node.pre_h.mapv(silu_prime);
            sl.h_wh.mat_mut(grad).scaled_add(1.0, &gpre_h.t().dot(&c.h_in));
            sl.h_wm.mat_mut(grad).scaled_add(1.0, &gpre_h.t().dot(&node.magg));
            add_colsum(&mut sl.h_b1.vec_mut(grad), &gpre_h);
            gh_in += &gpre_h.dot(&sl.h_wh.mat(flat));
            let gmagg = gpre_h.dot(&sl.h_wm.mat(flat));

            // magg[u] = Σ_{e from u} gate_e m_e
            let m_w = sl.m_w.vec(flat);
            let mut gpre_gate = Array1::<f64>::zeros(ne);
            for e in 0..ne {
                let up = gmagg.row(graph.src(e));
                let g = node.gate[e];
                let gg = up.dot(&c.m.row(e));
                gpre_gate[e] = gg * g * (1.0 - g);
                let mut row = gm.row_mut(e);
                row.scaled_add(g, &up);
                row.scaled_add(gpre_gate[e], &m_w);
            }
            sl.m_w.vec_mut(grad).scaled_add(1.0, &c.m.t().dot(&gpre_gate));
            grad[sl.m_b.offset] += gpre_gate.sum();
        }

        // x_out = x_in + Σ_{e from u} r_e coef_e
        let d = gx.ncols();
        let mut gr = Array2::<f64>::zeros((ne, d));
        let mut gsq = Array1::<f64>::zeros(ne);
        let mut gphi = Array1::<f64>::zeros(ne);
        for e in 0..ne {
            let up = gx.row(graph.src(e));
            let gcoef = up.dot(&c.r.row(e));
            gr.row_mut(e).scaled_add(c.coef[e], &up);
            let denom = c.dist[e] + 1.0;
            gphi[e] = gcoef / denom;
            let gdist = -gcoef * c.phi[e] / (denom * denom);
            gsq[e] = gdist * 0.5 / c.dist[e].max(DIST_EPS.sqrt());
        }

        // phi = z_d · w2 + b2
        sl.d_w2.vec_mut(grad).scaled_add(1.0, &c.z_d.t().dot(&gphi));
        grad[sl.d_b2.offset] += gphi.sum();
        let d_w2 = sl.d_w2.vec(flat);
        let mut gpre_d = c.pre_d.mapv(silu_prime);
        for (mut row, &gp) in gpre_d.axis_iter_mut(Axis(0)).zip(gphi.iter()) {
            row *= &(&d_w2 * gp);
        }
        sl.d_w1.mat_mut(grad).scaled_add(1.0, &gpre_d.t().dot(&c.m));
        add_colsum(&mut sl.d_b1.vec_mut(grad), &gpre_d);
        gm += &gpre_d.dot(&sl.d_w1.mat(flat));

        // m = z_e · W2ᵀ + b2
        sl.e_w2.mat_mut(grad).scaled_add(1.0, &gm.t().dot(&c.z_e));
        add_colsum(&mut sl.e_b2.vec_mut(grad), &gm);
        let gpre_e = gm.dot(&sl.e_w2.mat(flat)) * &c.pre_e.mapv(silu_prime);

        // pre_e = Wa h_src + Wb h_dst + wd · |r|² + b1
        let sq = c.r.map_axis(Axis(1), |row| row.dot(&row));
        sl.e_wd.vec_mut(grad).scaled_add(1.0, &gpre_e.t().dot(&sq));
        add_colsum(&mut sl.e_b1.vec_mut(grad), &gpre_e);
        gsq += &gpre_e.dot(&sl.e_wd.vec(flat));
        let gha = graph.scatter_src(gpre_e.view(), 1);
        let ghb = graph.scatter_dst(gpre_e.view());
        sl.e_wa.mat_mut(grad).scaled_add(1.0, &gha.t().dot(&c.h_in));
        sl.e_wb.mat_mut(grad).scaled_add(1.0, &ghb.t().dot(&c.h_in));
        gh_in += &gha.dot(&sl.e_wa.mat(flat));
        gh_in += &ghb.dot(&sl.e_wb.mat(flat));

        // |r|² and r = x_src − x_dst
        for e in 0..ne {
            let s2 = 2.0 * gsq[e];
            let rr = c.r.row(e);
            gr.row_mut(e).scaled_add(s2, &rr);
        }
        let gsrc = graph.scatter_src(gr.view(), 1);
        let gdst = graph.scatter_dst(gr.view());
        gx += &gsrc;
        gx -= &gdst;
        gh = Some(gh_in);
    }

    // h0 = [t, emb_w[:, type] + emb_b]
    if let Some(gh0) = gh {
        let width = params.config().embedding_width();
        let types = typing.type_ids();
        let mut gw = params.layout.emb_w.mat_mut(grad);
        for (u, row) in gh0.axis_iter(Axis(0)).enumerate() {
            let ty = types[u % n];
            for q in 0..width {
                gw[[q, ty]] += row[q + 1];
            }
        }
        let mut gb = params.layout.emb_b.vec_mut(grad);
        for row in gh0.axis_iter(Axis(0)) {
            for q in 0..width {
                gb[q] += row[q + 1];
            }
        }
    }
}
