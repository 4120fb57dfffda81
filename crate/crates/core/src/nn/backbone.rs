//! Per-frame spatial backbone: three residual blocks at strides 1/2/2, the
//! deeper two upsampled back to full resolution by transposed convolution
//! and concatenated, giving an H x W x (c0 + c1 + c2) feature map.
//!
//! All frames of a sequence run through the same parameters; callers express
//! that by using one `Binder` so each weight binds to a single graph node.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{add_conv, Binder, ParamStore};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Input channels of the pseudo image fed to block 1.
    pub c_in: usize,
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.c0 + self.c1 + self.c2
    }
}

pub fn init_backbone(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &BackboneConfig,
) -> Result<(), NnError> {
    init_res_block(store, rng, &format!("{prefix}.block1"), cfg.c_in, cfg.c0, 1)?;
    init_res_block(store, rng, &format!("{prefix}.block2"), cfg.c0, cfg.c1, 2)?;
    init_res_block(store, rng, &format!("{prefix}.block3"), cfg.c1, cfg.c2, 2)?;
    add_conv(store, rng, &format!("{prefix}.up2"), 2, 2, cfg.c1, cfg.c1)?;
    add_conv(store, rng, &format!("{prefix}.up3"), 4, 4, cfg.c2, cfg.c2)?;
    Ok(())
}

pub(crate) fn init_res_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    ic: usize,
    oc: usize,
    stride: usize,
) -> Result<(), NnError> {
    add_conv(store, rng, &format!("{prefix}.conv1"), 3, 3, ic, oc)?;
    add_conv(store, rng, &format!("{prefix}.conv2"), 3, 3, oc, oc)?;
    if ic != oc || stride != 1 {
        add_conv(store, rng, &format!("{prefix}.skip"), 1, 1, ic, oc)?;
    }
    Ok(())
}

/// Two 3x3 convolutions plus a skip connection (identity where shapes allow,
/// 1x1 projection otherwise), ReLU after the join.
pub(crate) fn res_block(
    g: &mut Graph,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    ic: usize,
    oc: usize,
    stride: usize,
) -> Result<Var, NnError> {
    let w1 = binder.get(g, &format!("{prefix}.conv1.w"))?;
    let b1 = binder.get(g, &format!("{prefix}.conv1.b"))?;
    let w2 = binder.get(g, &format!("{prefix}.conv2.w"))?;
    let b2 = binder.get(g, &format!("{prefix}.conv2.b"))?;
    let h = g.conv2d(x, w1, b1, stride, 1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w2, b2, 1, 1)?;
    let s = if ic != oc || stride != 1 {
        let ws = binder.get(g, &format!("{prefix}.skip.w"))?;
        let bs = binder.get(g, &format!("{prefix}.skip.b"))?;
        g.conv2d(x, ws, bs, stride, 0)?
    } else {
        x
    };
    let sum = g.add(h, s)?;
    Ok(g.relu(sum))
}

/// Runs the backbone on one H x W x c_in pseudo image. H and W must be
/// divisible by 4 so the upsampled paths land back on the input grid.
pub fn backbone(
    g: &mut Graph,
    binder: &mut Binder,
    x: Var,
    prefix: &str,
    cfg: &BackboneConfig,
) -> Result<Var, NnError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.c_in {
        return Err(NnError::BadShape {
            op: "backbone",
            detail: format!("want (h, w, {}), got {shape:?}", cfg.c_in),
        });
    }
    if shape[0] % 4 != 0 || shape[1] % 4 != 0 {
        return Err(NnError::BadShape {
            op: "backbone",
            detail: format!("spatial side must divide by 4, got {}x{}", shape[0], shape[1]),
        });
    }

    let f1 = res_block(g, binder, x, &format!("{prefix}.block1"), cfg.c_in, cfg.c0, 1)?;
    let f2 = res_block(g, binder, f1, &format!("{prefix}.block2"), cfg.c0, cfg.c1, 2)?;
    let f3 = res_block(g, binder, f2, &format!("{prefix}.block3"), cfg.c1, cfg.c2, 2)?;

    let w2 = binder.get(g, &format!("{prefix}.up2.w"))?;
    let b2 = binder.get(g, &format!("{prefix}.up2.b"))?;
    let u2 = g.deconv2d(f2, w2, b2, 2)?;
    let w3 = binder.get(g, &format!("{prefix}.up3.w"))?;
    let b3 = binder.get(g, &format!("{prefix}.up3.b"))?;
    let u3 = g.deconv2d(f3, w3, b3, 4)?;

    g.concat(&[f1, u2, u3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    #[test]
    fn output_is_full_resolution_with_concatenated_channels() {
        let cfg = BackboneConfig { c_in: 4, c0: 3, c1: 5, c2: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut rng, "bb", &cfg).unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let data: Vec<f64> = (0..16 * 16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = g.input(Tensor::from_vec(&[16, 16, 4], data).unwrap());
        let y = backbone(&mut g, &mut binder, x, "bb", &cfg).unwrap();
        assert_eq!(g.value(y).shape(), &[16, 16, 14]);
    }

    #[test]
    fn rejects_grids_not_divisible_by_four() {
        let cfg = BackboneConfig { c_in: 2, c0: 2, c1: 2, c2: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut rng, "bb", &cfg).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let x = g.input(Tensor::zeros(&[10, 12, 2]));
        assert!(backbone(&mut g, &mut binder, x, "bb", &cfg).is_err());
    }

    #[test]
    fn two_frames_share_one_parameter_binding() {
        let cfg = BackboneConfig { c_in: 2, c0: 2, c1: 3, c2: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut rng, "bb", &cfg).unwrap();

        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let xa = g.input(Tensor::filled(&[8, 8, 2], 0.3));
        let xb = g.input(Tensor::filled(&[8, 8, 2], -0.7));
        backbone(&mut g, &mut binder, xa, "bb", &cfg).unwrap();
        backbone(&mut g, &mut binder, xb, "bb", &cfg).unwrap();
        // One param node per tensor despite two frames using the backbone.
        assert_eq!(g.param_vars().len(), store.len());
    }
}
