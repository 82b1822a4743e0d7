//! Adam moment estimation and the consolidation-aware hidden weight update.

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::net::{BatchNorm, Gradients, Network};
use crate::quantgrid::{MetaParams, QuantGrid};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam-processed update directions, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub weights: Vec<Array2<f64>>,
    pub gamma: Vec<Option<Array1<f64>>>,
    pub beta: Vec<Option<Array1<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m_w: Vec<Array2<f64>>,
    pub v_w: Vec<Array2<f64>>,
    pub m_gamma: Vec<Option<Array1<f64>>>,
    pub v_gamma: Vec<Option<Array1<f64>>>,
    pub m_beta: Vec<Option<Array1<f64>>>,
    pub v_beta: Vec<Option<Array1<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn moment_step(m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, c1: f64, c2: f64, eps: f64) -> f64 {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    (*m / c1) / ((*v / c2).sqrt() + eps)
}

impl AdamState {
    /// Zeroed moments matching the parameters of `net`.
    pub fn for_network(net: &Network) -> Self {
        let zeros_w: Vec<Array2<f64>> = net.layers.iter().map(|l| Array2::zeros(l.w_hidden.dim())).collect();
        let zeros_bn: Vec<Option<Array1<f64>>> = net
            .layers
            .iter()
            .map(|l| l.bn.as_ref().map(|bn| Array1::zeros(bn.gamma.len())))
            .collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            t: 0,
            m_w: zeros_w.clone(),
            v_w: zeros_w,
            m_gamma: zeros_bn.clone(),
            v_gamma: zeros_bn.clone(),
            m_beta: zeros_bn.clone(),
            v_beta: zeros_bn,
        }
    }

    fn check(&self, grads: &Gradients) -> Result<()> {
        let ours: Vec<_> = self.m_w.iter().map(|m| m.dim()).collect();
        let theirs: Vec<_> = grads.weights.iter().map(|g| g.dim()).collect();
        if ours != theirs {
            return Err(Error::shape("Adam weight moments", ours, theirs));
        }
        let bn_ours: Vec<_> = self.m_gamma.iter().map(|m| m.as_ref().map(|a| a.len())).collect();
        let bn_theirs: Vec<_> = grads.gamma.iter().map(|m| m.as_ref().map(|a| a.len())).collect();
        if bn_ours != bn_theirs {
            return Err(Error::shape("Adam BN moments", bn_ours, bn_theirs));
        }
        Ok(())
    }

    /// One bias-corrected Adam step: returns `m_hat / (sqrt(v_hat) + eps)`
    /// for every parameter.
    pub fn adam_step(&mut self, grads: &Gradients) -> Result<UpdateVector> {
        self.check(grads)?;
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);

        let weights = self
            .m_w
            .iter_mut()
            .zip(self.v_w.iter_mut())
            .zip(&grads.weights)
            .map(|((m, v), g)| {
                let mut u = Array2::zeros(g.dim());
                Zip::from(&mut u).and(m).and(v).and(g).for_each(|u, m, v, &g| {
                    *u = moment_step(m, v, g, b1, b2, c1, c2, eps);
                });
                u
            })
            .collect();

        let step_vec = |m: &mut Option<Array1<f64>>, v: &mut Option<Array1<f64>>, g: &Option<Array1<f64>>| {
            match (m.as_mut(), v.as_mut(), g.as_ref()) {
                (Some(m), Some(v), Some(g)) => {
                    let mut u = Array1::zeros(g.len());
                    Zip::from(&mut u).and(m).and(v).and(g).for_each(|u, m, v, &g| {
                        *u = moment_step(m, v, g, b1, b2, c1, c2, eps);
                    });
                    Some(u)
                }
                _ => None,
            }
        };
        let gamma = (0..grads.gamma.len())
            .map(|l| step_vec(&mut self.m_gamma[l], &mut self.v_gamma[l], &grads.gamma[l]))
            .collect();
        let beta = (0..grads.beta.len())
            .map(|l| step_vec(&mut self.m_beta[l], &mut self.v_beta[l], &grads.beta[l]))
            .collect();
        Ok(UpdateVector { weights, gamma, beta })
    }
}

/// How hidden weights respond to an update direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// `W_H <- W_H - eta * U` unconditionally.
    Plain,
    /// Updates that push `W_H` away from its quantized level are scaled by
    /// the metaplastic function.
    Metaplastic(MetaParams),
}

/// Applies one hidden-weight update elementwise and clips the result to the
/// grid's clip bounds. `w_quant`/`level_index` must be the projection of
/// `w_hidden`; the modulation is evaluated before the weight moves.
pub fn metaplastic_update(
    w_hidden: &mut Array2<f64>,
    w_quant: &Array2<f64>,
    level_index: &Array2<u16>,
    u_w: &Array2<f64>,
    grid: &QuantGrid,
    rule: UpdateRule,
    eta: f64,
) -> Result<()> {
    let dim = w_hidden.dim();
    if w_quant.dim() != dim || level_index.dim() != dim || u_w.dim() != dim {
        return Err(Error::shape(
            "metaplastic update",
            dim,
            (w_quant.dim(), level_index.dim(), u_w.dim()),
        ));
    }
    let (lo, hi) = grid.clip_bounds();
    match rule {
        UpdateRule::Plain => {
            Zip::from(w_hidden).and(u_w).for_each(|h, &u| {
                *h = (*h - eta * u).clamp(lo, hi);
            });
        }
        UpdateRule::Metaplastic(params) => {
            Zip::from(w_hidden)
                .and(w_quant)
                .and(level_index)
                .and(u_w)
                .for_each(|h, &s, &idx, &u| {
                    let step = eta * u;
                    let delta = if u * (*h - s) < 0.0 {
                        step * grid.meta_value(params, *h, s, idx as usize)
                    } else {
                        step
                    };
                    *h = (*h - delta).clamp(lo, hi);
                });
        }
    }
    Ok(())
}

/// Plain update of the batch-norm affine parameters.
pub fn bn_update(bn: &mut BatchNorm, u_gamma: &Array1<f64>, u_beta: &Array1<f64>, eta: f64) -> Result<()> {
    if u_gamma.len() != bn.gamma.len() || u_beta.len() != bn.beta.len() {
        return Err(Error::shape(
            "batch-norm update",
            (bn.gamma.len(), bn.beta.len()),
            (u_gamma.len(), u_beta.len()),
        ));
    }
    bn.gamma.scaled_add(-eta, u_gamma);
    bn.beta.scaled_add(-eta, u_beta);
    Ok(())
}

/// Writes an update vector into a network: hidden weights follow `rule`,
/// BN parameters take plain steps, then every layer is re-projected.
/// Returns the number of quantized weights that changed level.
pub fn apply_updates(net: &mut Network, update: &UpdateVector, rule: UpdateRule, eta: f64) -> Result<usize> {
    if update.weights.len() != net.layers.len() {
        return Err(Error::shape("update vector", net.layers.len(), update.weights.len()));
    }
    for (l, layer) in net.layers.iter_mut().enumerate() {
        metaplastic_update(
            &mut layer.w_hidden,
            &layer.w_quant,
            &layer.level_index,
            &update.weights[l],
            &layer.grid,
            rule,
            eta,
        )?;
        if let (Some(bn), Some(ug), Some(ub)) = (&mut layer.bn, &update.gamma[l], &update.beta[l]) {
            bn_update(bn, ug, ub, eta)?;
        }
    }
    Ok(net.requantize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn grid() -> QuantGrid {
        QuantGrid::uniform(17, -1.5, 1.5).unwrap()
    }

    fn one_weight_grads(g: f64) -> Gradients {
        Gradients {
            weights: vec![array![[g]]],
            gamma: vec![None],
            beta: vec![None],
        }
    }

    fn one_weight_state() -> AdamState {
        let net = Network::new(&[1, 1], &grid(), false).unwrap();
        AdamState::for_network(&net)
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        for g in [0.3, -2.0, 1e-3] {
            let mut st = one_weight_state();
            let u = st.adam_step(&one_weight_grads(g)).unwrap();
            let expected = g / (g.abs() + EPSILON);
            assert!((u.weights[0][[0, 0]] - expected).abs() < 1e-12);
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let mut st = one_weight_state();
        let u = st.adam_step(&one_weight_grads(0.0)).unwrap();
        assert_eq!(u.weights[0][[0, 0]], 0.0);
    }

    #[test]
    fn constant_gradient_converges_to_unit_direction() {
        let mut st = one_weight_state();
        let mut last = 0.0;
        for _ in 0..2000 {
            last = st.adam_step(&one_weight_grads(-0.37)).unwrap().weights[0][[0, 0]];
        }
        assert!((last + 1.0).abs() < 1e-6);
        assert!(st.v_w[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut st = one_weight_state();
        let bad = Gradients { weights: vec![array![[1.0, 2.0]]], gamma: vec![None], beta: vec![None] };
        assert!(st.adam_step(&bad).is_err());
    }

    fn single_update(h: f64, u: f64, rule: UpdateRule, eta: f64) -> f64 {
        let g = grid();
        let p = g.project(h).unwrap();
        let mut wh = array![[h]];
        metaplastic_update(&mut wh, &array![[p.value]], &array![[p.index as u16]], &array![[u]], &g, rule, eta).unwrap();
        wh[[0, 0]]
    }

    #[test]
    fn away_from_level_takes_metaplastic_branch() {
        let m3 = UpdateRule::Metaplastic(MetaParams::new(3.0).unwrap());
        // U_W * (W_H - W_S) = -0.01 * 0.05 < 0 -> modulated
        let moved = single_update(0.05, -0.01, m3, 1.0) - 0.05;
        let g = grid();
        let expected = 0.01 * g.meta_value(MetaParams::new(3.0).unwrap(), 0.05, 0.0, 8);
        assert!((moved - expected).abs() < 1e-15);
        assert!(moved < 0.01);
    }

    #[test]
    fn toward_level_takes_plain_branch() {
        let m3 = UpdateRule::Metaplastic(MetaParams::new(3.0).unwrap());
        let eta = 0.005;
        assert_eq!(single_update(0.05, 0.01, m3, eta), 0.05 - eta * 0.01);
    }

    #[test]
    fn zero_product_takes_plain_branch() {
        let m3 = UpdateRule::Metaplastic(MetaParams::new(3.0).unwrap());
        assert_eq!(single_update(0.375, 0.5, m3, 0.01), 0.375 - 0.005);
    }

    #[test]
    fn steep_consolidation_freezes_weights_on_level() {
        let m20 = UpdateRule::Metaplastic(MetaParams::new(20.0).unwrap());
        let g = grid();
        let q = g.level(10);
        // exactly on the level the branch product is zero, so start a hair above
        let p = g.project(q + 1e-9).unwrap();
        let mut wh = array![[q + 1e-9]];
        metaplastic_update(&mut wh, &array![[p.value]], &array![[p.index as u16]], &array![[-1.0]], &g, m20, 0.01).unwrap();
        let scale = (wh[[0, 0]] - (q + 1e-9)) / 0.01;
        assert!(scale < 1e-8, "scale {scale}");
    }

    #[test]
    fn clipping_bounds_hidden_weights() {
        let h = single_update(1.59, -1.0, UpdateRule::Plain, 0.5);
        assert_eq!(h, 1.59375);
        let h = single_update(-1.59, 1.0, UpdateRule::Plain, 0.5);
        assert_eq!(h, -1.59375);
    }

    #[test]
    fn bn_update_cases() {
        let mut bn = BatchNorm::new(3);
        let before = bn.clone();
        bn_update(&mut bn, &Array1::zeros(3), &Array1::zeros(3), 0.1).unwrap();
        assert_eq!(bn, before);
        assert!(bn_update(&mut bn, &Array1::zeros(2), &Array1::zeros(3), 0.1).is_err());
        for _ in 0..1000 {
            bn_update(&mut bn, &Array1::from_elem(3, 1.0), &Array1::from_elem(3, -1.0), 0.01).unwrap();
        }
        assert!(bn.gamma.iter().all(|g| g.is_finite()));
        assert!((bn.gamma[0] - (1.0 - 10.0)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn m_star_zero_equals_plain(h in -1.6f64..1.6, u in -3.0f64..3.0, eta in 1e-4f64..0.1) {
            let a = single_update(h, u, UpdateRule::Metaplastic(MetaParams::new(0.0).unwrap()), eta);
            let b = single_update(h, u, UpdateRule::Plain, eta);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn away_moves_less_than_toward(i in 1usize..15, frac in 0.01f64..0.49, m in 0.2f64..6.0, mag in 0.01f64..1.0) {
            let g = grid();
            let rule = UpdateRule::Metaplastic(MetaParams::new(m).unwrap());
            let h = g.level(i) + frac * g.interval(i);
            let eta = 1e-4;
            let away = (single_update(h, -mag, rule, eta) - h).abs();
            let toward = (single_update(h, mag, rule, eta) - h).abs();
            prop_assert!(away < toward);
        }
    }
}
