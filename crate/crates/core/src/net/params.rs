//! Flat parameter storage and its layout.
//!
//! All weights live in one contiguous vector so the optimizer and the checkpoint
//! see a single flat view. Matrices are row-major `(out, in)`.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use super::config::EgnnConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    fan_in: usize,
    zero_init: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn mat<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &flat[self.offset..self.offset + self.len()]).unwrap()
    }

    pub fn mat_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let len = self.len();
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut flat[self.offset..self.offset + len]).unwrap()
    }

    pub fn vec<'a>(&self, flat: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&flat[self.offset..self.offset + self.len()])
    }

    pub fn vec_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        let len = self.len();
        ArrayViewMut1::from(&mut flat[self.offset..self.offset + len])
    }

    pub fn scalar(&self, flat: &[f64]) -> f64 {
        flat[self.offset]
    }
}

/// Weights of one message-passing layer.
///
/// * edge network: `[h_i, h_j, d²] -> hidden -> message`, with the first linear map
///   split into `e_wa · h_i + e_wb · h_j + e_wd · d²`
/// * coordinate network: `message -> hidden -> scalar`
/// * gate: `sigmoid(m_w · message + m_b)`
/// * node network: `[h_i, m_i] -> hidden -> h`, first map split into `h_wh`, `h_wm`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub e_wa: Slot,
    pub e_wb: Slot,
    pub e_wd: Slot,
    pub e_b1: Slot,
    pub e_w2: Slot,
    pub e_b2: Slot,
    pub d_w1: Slot,
    pub d_b1: Slot,
    pub d_w2: Slot,
    pub d_b2: Slot,
    pub m_w: Slot,
    pub m_b: Slot,
    pub h_wh: Slot,
    pub h_wm: Slot,
    pub h_b1: Slot,
    pub h_w2: Slot,
    pub h_b2: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub emb_w: Slot,
    pub emb_b: Slot,
    pub layers: Vec<LayerSlots>,
    pub len: usize,
}

struct Alloc {
    next: usize,
    slots: Vec<Slot>,
}

impl Alloc {
    fn take(&mut self, rows: usize, cols: usize, fan_in: usize, zero_init: bool) -> Slot {
        let s = Slot { offset: self.next, rows, cols, fan_in, zero_init };
        self.next += rows * cols;
        self.slots.push(s);
        s
    }
}

impl Layout {
    pub fn new(cfg: &EgnnConfig) -> Self {
        let h = cfg.n_hidden;
        let emb = cfg.embedding_width();
        let mut a = Alloc { next: 0, slots: Vec::new() };
        let emb_w = a.take(emb, cfg.n_particle_types, cfg.n_particle_types, false);
        let emb_b = a.take(1, emb, cfg.n_particle_types, false);
        let edge_in = 2 * h + 1;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                e_wa: a.take(h, h, edge_in, false),
                e_wb: a.take(h, h, edge_in, false),
                e_wd: a.take(1, h, edge_in, false),
                e_b1: a.take(1, h, edge_in, false),
                e_w2: a.take(h, h, h, false),
                e_b2: a.take(1, h, h, false),
                d_w1: a.take(h, h, h, false),
                d_b1: a.take(1, h, h, false),
                d_w2: a.take(1, h, h, true),
                d_b2: a.take(1, 1, h, true),
                m_w: a.take(1, h, h, false),
                m_b: a.take(1, 1, h, false),
                h_wh: a.take(h, h, 2 * h, false),
                h_wm: a.take(h, h, 2 * h, false),
                h_b1: a.take(1, h, 2 * h, false),
                h_w2: a.take(h, h, h, false),
                h_b2: a.take(1, h, h, false),
            })
            .collect();
        let len = a.next;
        Layout { emb_w, emb_b, layers, len }
    }

    fn all_slots(&self) -> Vec<Slot> {
        let mut v = vec![self.emb_w, self.emb_b];
        for l in &self.layers {
            v.extend([
                l.e_wa, l.e_wb, l.e_wd, l.e_b1, l.e_w2, l.e_b2, l.d_w1, l.d_b1, l.d_w2, l.d_b2, l.m_w, l.m_b, l.h_wh,
                l.h_wm, l.h_b1, l.h_w2, l.h_b2,
            ]);
        }
        v
    }
}

/// All network weights as one flat vector plus the shape it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct EgnnParams {
    config: EgnnConfig,
    pub(crate) layout: Layout,
    flat: Vec<f64>,
}

impl EgnnParams {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`; the output layer of
    /// every coordinate network starts at zero, so the initial field is identically 0.
    pub fn init<R: Rng + ?Sized>(config: EgnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut flat = vec![0.0; layout.len];
        for slot in layout.all_slots() {
            if slot.zero_init {
                continue;
            }
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut flat[slot.offset..slot.offset + slot.len()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(EgnnParams { config, layout, flat })
    }

    pub fn from_flat(config: EgnnConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if flat.len() != layout.len {
            return Err(Error::shape(format!("{} parameters", layout.len), flat.len()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(EgnnParams { config, layout, flat })
    }

    pub fn config(&self) -> &EgnnConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    /// Sets every coordinate-network output layer to zero, making the field vanish.
    pub fn zero_field(&mut self) {
        for l in self.layout.layers.clone() {
            l.d_w2.vec_mut(&mut self.flat).fill(0.0);
            l.d_b2.vec_mut(&mut self.flat).fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_contiguous() {
        let cfg = EgnnConfig::new(3, 32, 1, 3).unwrap();
        let layout = Layout::new(&cfg);
        let mut slots = layout.all_slots();
        slots.sort_by_key(|s| s.offset);
        let mut next = 0;
        for s in slots {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, layout.len);
        // 3 layers of 7426 weights plus a 31-wide embedding of one type
        assert_eq!(layout.len, 3 * 7426 + 62);
    }

    #[test]
    fn init_is_seeded_and_zeroes_coordinate_heads() {
        let cfg = EgnnConfig::new(2, 4, 2, 2).unwrap();
        let a = EgnnParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = EgnnParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for l in &a.layout.layers {
            assert!(l.d_w2.vec(a.as_flat()).iter().all(|&v| v == 0.0));
            assert_eq!(l.d_b2.scalar(a.as_flat()), 0.0);
        }
        assert!(EgnnParams::from_flat(cfg, vec![0.0; 3]).is_err());
    }
}
