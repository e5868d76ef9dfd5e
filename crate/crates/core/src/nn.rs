//! Dense layers built on the autodiff graph.

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.kaiming(&format!("{name}.w"), &[fan_in, fan_out], fan_in);
        let b = store.zeros(&format!("{name}.b"), &[1, fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
        x.matmul(&g.param(self.w))?.add(&g.param(self.b))
    }
}

/// Stack of [`Linear`] layers with relu between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = layer.forward(g, &h)?;
        }
        Ok(h)
    }
}

/// Sets every listed parameter to zero.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).fill(0.0);
    }
}
