//! Stage-2 network: dual-branch en-face RNV membrane segmentation, the
//! case-level diagnosis rule, and flow-signal vessel refinement.
//!
//! The five-channel [`EnFaceStack`] splits by modality: a structural branch
//! encodes {oct_vitreous, oct_gcc} and a flow branch encodes
//! {octa_vitreous, octa_gcc, octa_subtracted}. Each branch stage is
//! conv3×3 → depthwise-separable conv3×3 (the second conv of the block) →
//! squeeze-excitation → maxpool; the bottleneck concatenates both branch
//! bottoms, and each decoder stage upsamples, concatenates the matching
//! skip from BOTH branches, convolves, and re-weights channels with another
//! SE block. A multiscale fusion block and a 1×1 sigmoid head emit the
//! per-pixel membrane probability. Training minimizes the region-balanced
//! MSE `L_D` (foreground and background errors averaged separately and
//! reweighted), and diagnosis applies a probability threshold plus a
//! minimum connected-component area.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::image::{self, Image, Mask2};
use crate::nn::checkpoint::{Checkpoint, LayerKind, LayerSpec};
use crate::nn::layers::{Conv2d, DwSepConv2d, SeBlock};
use crate::nn::ops;
use crate::nn::{AdamState, Tensor};
use crate::preprocess;
use crate::scalar::Scalar;
use crate::slab::EnFaceStack;
use crate::volume::{LesionMask, Spacing};
use crate::vri::{stack_to_tensor, train_val_split, MsBlock, MsCache, LOSS_EPS};

// ============================================================
// Configuration
// ============================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RnvNetConfig {
    /// Encoder stages per branch; spatial dims must divide by 2^stages.
    pub stages: usize,
    pub base_channels: usize,
    /// Channel-squeeze ratio of every SE block; must divide base_channels.
    pub se_reduction: usize,
    /// Background / foreground weights of the region-balanced MSE.
    pub omega_b: f64,
    pub omega_f: f64,
    /// Probability threshold for membrane pixels at inference.
    pub threshold: f64,
    /// Minimum connected-component area (px) for a lesion to count.
    pub min_area_px: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss, in epochs.
    pub patience: usize,
}

impl Default for RnvNetConfig {
    fn default() -> Self {
        RnvNetConfig {
            stages: 3,
            base_channels: 16,
            se_reduction: 4,
            omega_b: 0.4,
            omega_f: 0.6,
            threshold: 0.5,
            min_area_px: 32,
            lr: 1e-4,
            batch_size: 2,
            max_epochs: 1000,
            patience: 20,
        }
    }
}

impl RnvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(config_err!("rnv config: stages must be >= 2, got {}", self.stages));
        }
        if self.base_channels == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("rnv config: zero-valued size field"));
        }
        if self.se_reduction == 0 || self.base_channels % self.se_reduction != 0 {
            return Err(config_err!(
                "rnv config: base_channels {} not divisible by se_reduction {}",
                self.base_channels,
                self.se_reduction
            ));
        }
        if !(self.omega_b >= 0.0 && self.omega_f >= 0.0)
            || !self.omega_b.is_finite()
            || !self.omega_f.is_finite()
        {
            return Err(config_err!(
                "rnv config: region weights must be finite and >= 0, got ({}, {})",
                self.omega_b,
                self.omega_f
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(config_err!("rnv config: threshold must be in (0,1)"));
        }
        if self.min_area_px == 0 {
            return Err(config_err!("rnv config: min_area_px must be >= 1"));
        }
        Ok(())
    }
}

// ============================================================
// Region-balanced MSE loss
// ============================================================

/// `L_D = ω_b/(N_b+ε)·Σ_bg (y−ŷ)² + ω_f/(N_f+ε)·Σ_fg (y−ŷ)²` with
/// ε = 1e−6; the foreground is where the binary target is 1. An empty
/// region contributes ~0 through the ε guard, so the loss stays finite on
/// all-background (or all-foreground) targets. Returns the scalar loss and
/// its gradient w.r.t. ŷ — the loss is smooth in ŷ everywhere, since the
/// region split depends only on y.
pub fn loss_d<T: Scalar>(
    yhat: &Tensor<T>,
    y: &Tensor<T>,
    omega_b: f64,
    omega_f: f64,
) -> Result<(T, Tensor<T>)> {
    if yhat.shape() != y.shape() {
        return Err(shape_err!(
            "loss_d: prediction {:?} vs target {:?}",
            yhat.shape(),
            y.shape()
        ));
    }
    let n = yhat.len();
    if n == 0 {
        return Err(shape_err!("loss_d: empty tensors"));
    }
    let eps = T::from_f64_lossy(LOSS_EPS);
    let half = T::from_f64_lossy(0.5);
    let two = T::from_f64_lossy(2.0);
    let wb = T::from_f64_lossy(omega_b);
    let wf = T::from_f64_lossy(omega_f);

    let mut n_f = 0usize;
    let mut s_f = T::zero();
    let mut s_b = T::zero();
    for i in 0..n {
        let d = y.data()[i] - yhat.data()[i];
        if y.data()[i] > half {
            n_f += 1;
            s_f += d * d;
        } else {
            s_b += d * d;
        }
    }
    let cf = wf / (T::from_usize(n_f).unwrap() + eps);
    let cb = wb / (T::from_usize(n - n_f).unwrap() + eps);
    let loss = cb * s_b + cf * s_f;

    let mut grad = yhat.zeros_like();
    let g = grad.data_mut();
    for i in 0..n {
        let c = if y.data()[i] > half { cf } else { cb };
        g[i] = two * c * (yhat.data()[i] - y.data()[i]);
    }
    Ok((loss, grad))
}

// ============================================================
// Network
// ============================================================

#[derive(Debug, Clone)]
struct EncBlock<T: Scalar> {
    conv: Conv2d<T>,
    sep: DwSepConv2d<T>,
    se: SeBlock<T>,
}

impl<T: Scalar> EncBlock<T> {
    fn new<R: Rng>(c: usize, cin: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Ok(EncBlock {
            conv: Conv2d::new_he(c, cin, 3, rng),
            sep: DwSepConv2d::new_he(c, c, 3, rng),
            se: SeBlock::new_he(c, reduction, rng)?,
        })
    }

    fn zeros_like(&self) -> Self {
        EncBlock {
            conv: Conv2d {
                w: self.conv.w.zeros_like(),
                b: self.conv.b.zeros_like(),
                padding: self.conv.padding,
            },
            sep: DwSepConv2d {
                dw: self.sep.dw.zeros_like(),
                pw: self.sep.pw.zeros_like(),
                b: self.sep.b.zeros_like(),
                padding: self.sep.padding,
            },
            se: SeBlock {
                w1: self.se.w1.zeros_like(),
                w2: self.se.w2.zeros_like(),
            },
        }
    }
}

#[derive(Debug, Clone)]
struct DecBlock<T: Scalar> {
    conv: Conv2d<T>,
    se: SeBlock<T>,
}

impl<T: Scalar> DecBlock<T> {
    fn zeros_like(&self) -> Self {
        DecBlock {
            conv: Conv2d {
                w: self.conv.w.zeros_like(),
                b: self.conv.b.zeros_like(),
                padding: self.conv.padding,
            },
            se: SeBlock {
                w1: self.se.w1.zeros_like(),
                w2: self.se.w2.zeros_like(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnvNet<T: Scalar> {
    cfg: RnvNetConfig,
    oct: Vec<EncBlock<T>>,
    octa: Vec<EncBlock<T>>,
    bottleneck: Conv2d<T>,
    dec: Vec<DecBlock<T>>, // dec[i] outputs C_i at stage-i resolution
    fuse: MsBlock<T>,
    head: Conv2d<T>,
}

struct BranchCache<T: Scalar> {
    enc_in: Vec<Tensor<T>>,  // input to each stage
    conv_a: Vec<Tensor<T>>,  // post conv+relu (input to the separable conv)
    sep_mid: Vec<Tensor<T>>, // depthwise intermediate
    sep_a: Vec<Tensor<T>>,   // post separable+relu (input to SE)
    se: Vec<ops::SeCache<T>>,
    skip: Vec<Tensor<T>>, // post-SE, pre-pool
    arg: Vec<Vec<u32>>,   // pooling argmax
}

pub struct RnvCache<T: Scalar> {
    oct: BranchCache<T>,
    octa: BranchCache<T>,
    bn_in: Tensor<T>,
    bn_out: Tensor<T>,
    dec_up: Vec<Tensor<T>>, // aligned with execution order (deep->shallow)
    dec_cat: Vec<Tensor<T>>,
    dec_a: Vec<Tensor<T>>, // post conv+relu (input to the decoder SE)
    dec_se: Vec<ops::SeCache<T>>,
    fuse_in: Tensor<T>,
    fuse_ms: MsCache<T>,
    fuse_out: Tensor<T>,
    prob: Tensor<T>,
}

fn branch_forward<T: Scalar>(
    blocks: &[EncBlock<T>],
    x: &Tensor<T>,
) -> Result<(Tensor<T>, BranchCache<T>)> {
    let s = blocks.len();
    let mut bc = BranchCache {
        enc_in: Vec::with_capacity(s),
        conv_a: Vec::with_capacity(s),
        sep_mid: Vec::with_capacity(s),
        sep_a: Vec::with_capacity(s),
        se: Vec::with_capacity(s),
        skip: Vec::with_capacity(s),
        arg: Vec::with_capacity(s),
    };
    let mut cur = x.clone();
    for blk in blocks {
        bc.enc_in.push(cur.clone());
        let a = ops::relu(&blk.conv.forward(&cur)?);
        let (sy, mid) = blk.sep.forward(&a)?;
        let sa = ops::relu(&sy);
        let (so, sc) = blk.se.forward(&sa)?;
        let (p, arg) = ops::maxpool2_forward(&so)?;
        bc.conv_a.push(a);
        bc.sep_mid.push(mid);
        bc.sep_a.push(sa);
        bc.se.push(sc);
        bc.skip.push(so);
        bc.arg.push(arg);
        cur = p;
    }
    Ok((cur, bc))
}

/// Walk one branch backwards; `gcur` is the gradient at the branch bottom,
/// `gskip[i]` the extra gradient flowing into stage i's skip tensor.
fn branch_backward<T: Scalar>(
    blocks: &[EncBlock<T>],
    bc: &BranchCache<T>,
    mut gcur: Tensor<T>,
    gskip: &[Option<Tensor<T>>],
    g: &mut [EncBlock<T>],
) -> Result<()> {
    for i in (0..blocks.len()).rev() {
        let shape = bc.skip[i].shape().to_vec();
        let mut gm = ops::maxpool2_backward(&bc.arg[i], &gcur, &shape)?;
        if let Some(extra) = &gskip[i] {
            gm.add_assign(extra)?;
        }
        let (gsa, gw1, gw2) = blocks[i].se.backward(&bc.sep_a[i], &bc.se[i], &gm)?;
        g[i].se.w1.add_assign(&gw1)?;
        g[i].se.w2.add_assign(&gw2)?;
        let gsy = ops::relu_backward(&bc.sep_a[i], &gsa);
        let (ga, gdw, gpw, gb) = blocks[i].sep.backward(&bc.conv_a[i], &bc.sep_mid[i], &gsy)?;
        g[i].sep.dw.add_assign(&gdw)?;
        g[i].sep.pw.add_assign(&gpw)?;
        g[i].sep.b.add_assign(&gb)?;
        let gpre = ops::relu_backward(&bc.conv_a[i], &ga);
        let (gx, gw, gb2) = blocks[i].conv.backward(&bc.enc_in[i], &gpre)?;
        g[i].conv.w.add_assign(&gw)?;
        g[i].conv.b.add_assign(&gb2)?;
        gcur = gx;
    }
    Ok(())
}

impl<T: Scalar> RnvNet<T> {
    pub const OCT_CHANNELS: usize = 2;
    pub const OCTA_CHANNELS: usize = 3;

    pub fn new(cfg: &RnvNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stages;
        let b = cfg.base_channels;
        let r = cfg.se_reduction;
        let mut oct = Vec::with_capacity(s);
        let mut cin = Self::OCT_CHANNELS;
        for i in 0..s {
            let c = b << i;
            oct.push(EncBlock::new(c, cin, r, rng)?);
            cin = c;
        }
        let mut octa = Vec::with_capacity(s);
        let mut cin = Self::OCTA_CHANNELS;
        for i in 0..s {
            let c = b << i;
            octa.push(EncBlock::new(c, cin, r, rng)?);
            cin = c;
        }
        let ctop = b << (s - 1);
        let cbn = b << s;
        let bottleneck = Conv2d::new_he(cbn, 2 * ctop, 3, rng);
        let mut dec = Vec::with_capacity(s);
        // dec[i] consumes upsampled deeper features + one skip per branch.
        for i in 0..s {
            let c = b << i;
            let deeper = if i + 1 == s { cbn } else { b << (i + 1) };
            dec.push(DecBlock {
                conv: Conv2d::new_he(c, deeper + 2 * c, 3, rng),
                se: SeBlock::new_he(c, r, rng)?,
            });
        }
        let fuse = MsBlock::new(b, rng);
        let head = Conv2d::new_he(1, b, 1, rng);
        Ok(RnvNet {
            cfg: cfg.clone(),
            oct,
            octa,
            bottleneck,
            dec,
            fuse,
            head,
        })
    }

    pub fn cfg(&self) -> &RnvNetConfig {
        &self.cfg
    }

    fn zeros_like(&self) -> Self {
        RnvNet {
            cfg: self.cfg.clone(),
            oct: self.oct.iter().map(EncBlock::zeros_like).collect(),
            octa: self.octa.iter().map(EncBlock::zeros_like).collect(),
            bottleneck: Conv2d {
                w: self.bottleneck.w.zeros_like(),
                b: self.bottleneck.b.zeros_like(),
                padding: self.bottleneck.padding,
            },
            dec: self.dec.iter().map(DecBlock::zeros_like).collect(),
            fuse: self.fuse.zeros_like(),
            head: Conv2d {
                w: self.head.w.zeros_like(),
                b: self.head.b.zeros_like(),
                padding: self.head.padding,
            },
        }
    }

    /// Stable parameter enumeration; checkpoints, Adam state and gradient
    /// collection all follow this order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (tag, branch) in [("oct", &self.oct), ("octa", &self.octa)] {
            for (i, blk) in branch.iter().enumerate() {
                out.push((format!("{tag}{i}.conv.w"), &blk.conv.w));
                out.push((format!("{tag}{i}.conv.b"), &blk.conv.b));
                out.push((format!("{tag}{i}.sep.dw"), &blk.sep.dw));
                out.push((format!("{tag}{i}.sep.pw"), &blk.sep.pw));
                out.push((format!("{tag}{i}.sep.b"), &blk.sep.b));
                out.push((format!("{tag}{i}.se.w1"), &blk.se.w1));
                out.push((format!("{tag}{i}.se.w2"), &blk.se.w2));
            }
        }
        out.push(("bottleneck.conv.w".into(), &self.bottleneck.w));
        out.push(("bottleneck.conv.b".into(), &self.bottleneck.b));
        for (i, d) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.conv.w"), &d.conv.w));
            out.push((format!("dec{i}.conv.b"), &d.conv.b));
            out.push((format!("dec{i}.se.w1"), &d.se.w1));
            out.push((format!("dec{i}.se.w2"), &d.se.w2));
        }
        for (tag, c) in [
            ("k1", &self.fuse.k1),
            ("k3", &self.fuse.k3),
            ("k5", &self.fuse.k5),
            ("mix", &self.fuse.mix),
        ] {
            out.push((format!("fuse.{tag}.w"), &c.w));
            out.push((format!("fuse.{tag}.b"), &c.b));
        }
        out.push(("head.conv.w".into(), &self.head.w));
        out.push(("head.conv.b".into(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for branch in [&mut self.oct, &mut self.octa] {
            for blk in branch.iter_mut() {
                out.push(&mut blk.conv.w);
                out.push(&mut blk.conv.b);
                out.push(&mut blk.sep.dw);
                out.push(&mut blk.sep.pw);
                out.push(&mut blk.sep.b);
                out.push(&mut blk.se.w1);
                out.push(&mut blk.se.w2);
            }
        }
        out.push(&mut self.bottleneck.w);
        out.push(&mut self.bottleneck.b);
        for d in self.dec.iter_mut() {
            out.push(&mut d.conv.w);
            out.push(&mut d.conv.b);
            out.push(&mut d.se.w1);
            out.push(&mut d.se.w2);
        }
        for c in [
            &mut self.fuse.k1,
            &mut self.fuse.k3,
            &mut self.fuse.k5,
            &mut self.fuse.mix,
        ] {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let b = self.cfg.base_channels;
        let s = self.cfg.stages;
        let mut specs = Vec::new();
        for (tag, branch, cin0) in [
            ("oct", &self.oct, Self::OCT_CHANNELS),
            ("octa", &self.octa, Self::OCTA_CHANNELS),
        ] {
            let mut cin = cin0;
            for (i, blk) in branch.iter().enumerate() {
                let c = b << i;
                specs.push(LayerSpec {
                    kind: LayerKind::Conv,
                    name: format!("{tag}{i}.conv"),
                    in_channels: cin,
                    out_channels: c,
                    kernel: 3,
                    params: blk.conv.param_count(),
                });
                specs.push(LayerSpec {
                    kind: LayerKind::DepthwiseSepConv,
                    name: format!("{tag}{i}.sep"),
                    in_channels: c,
                    out_channels: c,
                    kernel: 3,
                    params: blk.sep.param_count(),
                });
                specs.push(LayerSpec {
                    kind: LayerKind::SeBlock,
                    name: format!("{tag}{i}.se"),
                    in_channels: c,
                    out_channels: c,
                    kernel: 0,
                    params: blk.se.param_count(),
                });
                specs.push(LayerSpec {
                    kind: LayerKind::Maxpool,
                    name: format!("{tag}{i}.pool"),
                    in_channels: c,
                    out_channels: c,
                    kernel: 2,
                    params: 0,
                });
                cin = c;
            }
        }
        let ctop = b << (s - 1);
        specs.push(LayerSpec {
            kind: LayerKind::Conv,
            name: "bottleneck.conv".into(),
            in_channels: 2 * ctop,
            out_channels: b << s,
            kernel: 3,
            params: self.bottleneck.param_count(),
        });
        for i in (0..s).rev() {
            let c = b << i;
            let deeper = if i + 1 == s { b << s } else { b << (i + 1) };
            specs.push(LayerSpec {
                kind: LayerKind::Upsample,
                name: format!("dec{i}.up"),
                in_channels: deeper,
                out_channels: deeper,
                kernel: 2,
                params: 0,
            });
            specs.push(LayerSpec {
                kind: LayerKind::ConcatSkip,
                name: format!("dec{i}.cat"),
                in_channels: deeper + 2 * c,
                out_channels: deeper + 2 * c,
                kernel: 0,
                params: 0,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Conv,
                name: format!("dec{i}.conv"),
                in_channels: deeper + 2 * c,
                out_channels: c,
                kernel: 3,
                params: self.dec[i].conv.param_count(),
            });
            specs.push(LayerSpec {
                kind: LayerKind::SeBlock,
                name: format!("dec{i}.se"),
                in_channels: c,
                out_channels: c,
                kernel: 0,
                params: self.dec[i].se.param_count(),
            });
        }
        specs.push(LayerSpec {
            kind: LayerKind::FuseMultiscale,
            name: "fuse".into(),
            in_channels: b,
            out_channels: b,
            kernel: 5,
            params: self.fuse.k1.param_count()
                + self.fuse.k3.param_count()
                + self.fuse.k5.param_count()
                + self.fuse.mix.param_count(),
        });
        specs.push(LayerSpec {
            kind: LayerKind::SigmoidHead,
            name: "head.conv".into(),
            in_channels: b,
            out_channels: 1,
            kernel: 1,
            params: self.head.param_count(),
        });
        specs
    }

    fn check_inputs(&self, x_oct: &Tensor<T>, x_octa: &Tensor<T>) -> Result<()> {
        let so = x_oct.shape();
        let sa = x_octa.shape();
        if so.len() != 4 || sa.len() != 4 {
            return Err(shape_err!("rnv forward: inputs must be 4-d, got {so:?}/{sa:?}"));
        }
        if so[1] != Self::OCT_CHANNELS || sa[1] != Self::OCTA_CHANNELS {
            return Err(shape_err!(
                "rnv forward: want {}/{} channels, got {}/{}",
                Self::OCT_CHANNELS,
                Self::OCTA_CHANNELS,
                so[1],
                sa[1]
            ));
        }
        if so[0] != sa[0] || so[2] != sa[2] || so[3] != sa[3] {
            return Err(shape_err!("rnv forward: branch shapes disagree: {so:?} vs {sa:?}"));
        }
        let div = 1usize << self.cfg.stages;
        if so[2] % div != 0 || so[3] % div != 0 {
            return Err(shape_err!(
                "rnv forward: spatial dims {}x{} not divisible by 2^{}",
                so[3],
                so[2],
                self.cfg.stages
            ));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate the backward pass needs.
    pub fn forward_cached(
        &self,
        x_oct: &Tensor<T>,
        x_octa: &Tensor<T>,
    ) -> Result<(Tensor<T>, RnvCache<T>)> {
        self.check_inputs(x_oct, x_octa)?;
        let s = self.cfg.stages;
        let (bot_oct, bc_oct) = branch_forward(&self.oct, x_oct)?;
        let (bot_octa, bc_octa) = branch_forward(&self.octa, x_octa)?;
        let bn_in = ops::concat_channels(&[&bot_oct, &bot_octa])?;
        let bn_out = ops::relu(&self.bottleneck.forward(&bn_in)?);
        let mut d = bn_out.clone();
        let mut dec_up = Vec::with_capacity(s);
        let mut dec_cat = Vec::with_capacity(s);
        let mut dec_a = Vec::with_capacity(s);
        let mut dec_se = Vec::with_capacity(s);
        for i in (0..s).rev() {
            let u = ops::upsample2_forward(&d)?;
            let cat = ops::concat_channels(&[&u, &bc_oct.skip[i], &bc_octa.skip[i]])?;
            let a = ops::relu(&self.dec[i].conv.forward(&cat)?);
            let (so, sc) = self.dec[i].se.forward(&a)?;
            d = so;
            dec_up.push(u);
            dec_cat.push(cat);
            dec_a.push(a);
            dec_se.push(sc);
        }
        let fuse_in = d;
        let (fuse_out, fuse_ms) = self.fuse.forward(&fuse_in)?;
        let prob = ops::sigmoid(&self.head.forward(&fuse_out)?);
        Ok((
            prob.clone(),
            RnvCache {
                oct: bc_oct,
                octa: bc_octa,
                bn_in,
                bn_out,
                dec_up,
                dec_cat,
                dec_a,
                dec_se,
                fuse_in,
                fuse_ms,
                fuse_out,
                prob,
            },
        ))
    }

    pub fn forward(&self, x_oct: &Tensor<T>, x_octa: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x_oct, x_octa)?.0)
    }

    /// Backpropagate `gy` (gradient w.r.t. the probability output) and
    /// return parameter gradients as a zero-initialized twin of the net.
    pub fn backward(&self, cache: &RnvCache<T>, gy: &Tensor<T>) -> Result<RnvNet<T>> {
        let s = self.cfg.stages;
        let b = self.cfg.base_channels;
        let mut g = self.zeros_like();

        let glogits = ops::sigmoid_backward(&cache.prob, gy);
        let (gfuse, gw, gb) = self.head.backward(&cache.fuse_out, &glogits)?;
        g.head.w.add_assign(&gw)?;
        g.head.b.add_assign(&gb)?;
        let mut gd = self
            .fuse
            .backward(&cache.fuse_in, &cache.fuse_ms, &gfuse, &mut g.fuse)?;

        // Decoder stages executed deep->shallow (stage i = s-1 at execution
        // position 0); walk them back shallow->deep, collecting per-branch
        // skip gradients.
        let mut gskip_oct: Vec<Option<Tensor<T>>> = vec![None; s];
        let mut gskip_octa: Vec<Option<Tensor<T>>> = vec![None; s];
        let exec: Vec<(usize, usize)> = (0..s).rev().enumerate().collect();
        for &(pos, i) in exec.iter().rev() {
            let (ga, gw1, gw2) = self.dec[i]
                .se
                .backward(&cache.dec_a[pos], &cache.dec_se[pos], &gd)?;
            g.dec[i].se.w1.add_assign(&gw1)?;
            g.dec[i].se.w2.add_assign(&gw2)?;
            let gpre = ops::relu_backward(&cache.dec_a[pos], &ga);
            let (gcat, gw, gb) = self.dec[i].conv.backward(&cache.dec_cat[pos], &gpre)?;
            g.dec[i].conv.w.add_assign(&gw)?;
            g.dec[i].conv.b.add_assign(&gb)?;
            let deeper_c = cache.dec_up[pos].shape()[1];
            let c = b << i;
            let parts = ops::split_channels(&gcat, &[deeper_c, c, c])?;
            gskip_oct[i] = Some(parts[1].clone());
            gskip_octa[i] = Some(parts[2].clone());
            gd = ops::upsample2_backward(&parts[0])?;
        }

        let gbn = ops::relu_backward(&cache.bn_out, &gd);
        let (gbn_in, gw, gb) = self.bottleneck.backward(&cache.bn_in, &gbn)?;
        g.bottleneck.w.add_assign(&gw)?;
        g.bottleneck.b.add_assign(&gb)?;

        let ctop = b << (s - 1);
        let parts = ops::split_channels(&gbn_in, &[ctop, ctop])?;
        branch_backward(&self.oct, &cache.oct, parts[0].clone(), &gskip_oct, &mut g.oct)?;
        branch_backward(&self.octa, &cache.octa, parts[1].clone(), &gskip_octa, &mut g.octa)?;
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: "rnv".into(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            layers: self.layer_specs(),
            entries: self
                .params()
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<f64>()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "rnv" {
            return Err(config_err!("checkpoint is for model '{}', not 'rnv'", ck.model));
        }
        let cfg: RnvNetConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| config_err!("rnv checkpoint config: {e}"))?;
        let mut net = RnvNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
        if names.len() != ck.entries.len() {
            return Err(config_err!(
                "rnv checkpoint has {} tensors, net wants {}",
                ck.entries.len(),
                names.len()
            ));
        }
        for (slot, (name, (ck_name, ck_tensor))) in
            net.params_mut().into_iter().zip(names.iter().zip(&ck.entries))
        {
            if name != ck_name {
                return Err(config_err!("rnv checkpoint tensor '{ck_name}' where '{name}' expected"));
            }
            let cast: Tensor<T> = ck_tensor.cast();
            if cast.shape() != slot.shape() {
                return Err(shape_err!(
                    "rnv checkpoint tensor '{ck_name}' shape {:?}, want {:?}",
                    ck_tensor.shape(),
                    slot.shape()
                ));
            }
            *slot = cast;
        }
        Ok(net)
    }
}

// ============================================================
// Stack plumbing
// ============================================================

/// Normalize the stack and split it by modality: the structural branch gets
/// {oct_vitreous, oct_gcc}, the flow branch {octa_vitreous, octa_gcc,
/// octa_subtracted}.
pub fn stack_to_branch_inputs<T: Scalar>(stack: &EnFaceStack) -> (Vec<Image<T>>, Vec<Image<T>>) {
    let ch = stack.channels();
    let norm = |img: &Image<f32>| preprocess::normalize_channel(&img.cast::<T>());
    (
        vec![norm(ch[0]), norm(ch[2])],
        vec![norm(ch[1]), norm(ch[3]), norm(ch[4])],
    )
}

/// All five normalized channels of one case, structural pair first — the
/// layout [`split_branch_tensor`] slices back apart after augmentation.
pub fn case_channels<T: Scalar>(stack: &EnFaceStack) -> Vec<Image<T>> {
    let (o, a) = stack_to_branch_inputs(stack);
    o.into_iter().chain(a).collect()
}

/// Split a combined `[n, 5, h, w]` batch into the per-branch inputs.
pub fn split_branch_tensor<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut parts = ops::split_channels(x, &[RnvNet::<T>::OCT_CHANNELS, RnvNet::<T>::OCTA_CHANNELS])?;
    let octa = parts.pop().unwrap();
    let oct = parts.pop().unwrap();
    Ok((oct, octa))
}

fn mask_targets<T: Scalar>(masks: &[&Mask2]) -> Tensor<T> {
    let (w, h) = (masks[0].width(), masks[0].height());
    let mut t = Tensor::zeros(&[masks.len(), 1, h, w]);
    for (ni, m) in masks.iter().enumerate() {
        for y in 0..h {
            let row = t.row4_mut(ni, 0, y);
            for x in 0..w {
                if m.get(x, y) {
                    row[x] = T::one();
                }
            }
        }
    }
    t
}

// ============================================================
// Training
// ============================================================

/// One training case fully in memory: the en-face stack (built from either
/// the predicted or the truth surface — the caller decides) and the truth
/// lesion mask.
#[derive(Debug, Clone)]
pub struct RnvCase {
    pub id: String,
    pub stack: EnFaceStack,
    pub truth: Mask2,
}

#[derive(Debug, Clone, Serialize)]
pub struct RnvLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Train the stage-2 net. Deterministic given (cases order, cfg, seed).
/// Returns the best-validation checkpoint and the per-epoch log.
pub fn train_rnv(
    cases: &[RnvCase],
    cfg: &RnvNetConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<RnvLogRow>)> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(config_err!("train_rnv: need >= 2 cases, got {}", cases.len()));
    }
    if !cases.iter().any(|c| c.truth.any()) {
        return Err(config_err!("train_rnv: need at least one positive case"));
    }
    let (w, h) = (cases[0].stack.width(), cases[0].stack.height());
    for c in cases {
        if c.stack.width() != w || c.stack.height() != h {
            return Err(shape_err!(
                "train_rnv: case '{}' stack {}x{}, want {}x{}",
                c.id,
                c.stack.width(),
                c.stack.height(),
                w,
                h
            ));
        }
        if c.truth.width() != w || c.truth.height() != h {
            return Err(shape_err!("train_rnv: case '{}' truth mask mismatches stack", c.id));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RnvNet::<f64>::new(cfg, &mut rng)?;
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);

    let (train_idx, val_idx) = train_val_split(cases.len(), &mut rng);
    // Normalized channel stacks are fixed per case; compute them once.
    let channels: Vec<Vec<Image<f64>>> = cases.iter().map(|c| case_channels(&c.stack)).collect();

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_ck = net.to_checkpoint();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut picks = train_idx.clone();
        picks.shuffle(&mut rng);

        let mut train_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in picks.chunks(cfg.batch_size) {
            let mut samples: Vec<Vec<Image<f64>>> =
                chunk.iter().map(|&ci| channels[ci].clone()).collect();
            preprocess::augment(&mut samples, &mut rng);
            let x = stack_to_tensor(&samples);
            let (x_oct, x_octa) = split_branch_tensor(&x)?;
            let truths: Vec<&Mask2> = chunk.iter().map(|&ci| &cases[ci].truth).collect();
            let t = mask_targets(&truths);
            let (prob, cache) = net.forward_cached(&x_oct, &x_octa)?;
            let (loss, grad) = loss_d(&prob, &t, cfg.omega_b, cfg.omega_f)?;
            train_loss_sum += loss;
            n_batches += 1;
            let grads = net.backward(&cache, &grad)?;
            let gvec: Vec<Tensor<f64>> =
                grads.params().iter().map(|(_, t)| (*t).clone()).collect();
            adam.update(&mut net.params_mut(), &gvec)?;
        }

        // ---- validation (no augmentation)
        let mut val_loss = 0.0;
        for &ci in &val_idx {
            let x = stack_to_tensor(std::slice::from_ref(&channels[ci]));
            let (x_oct, x_octa) = split_branch_tensor(&x)?;
            let t = mask_targets(&[&cases[ci].truth]);
            let prob = net.forward(&x_oct, &x_octa)?;
            let (loss, _) = loss_d(&prob, &t, cfg.omega_b, cfg.omega_f)?;
            val_loss += loss;
        }
        val_loss /= val_idx.len() as f64;
        log.push(RnvLogRow {
            epoch,
            train_loss: train_loss_sum / n_batches.max(1) as f64,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_ck = net.to_checkpoint();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best_ck, log))
}

// ============================================================
// Inference & diagnosis
// ============================================================

/// Case-level outcome: the thresholded, area-filtered lesion mask with its
/// component areas, plus a continuous score for ROC analysis.
#[derive(Debug, Clone)]
pub struct DiagnosisResult {
    pub is_rnv: bool,
    /// The maximum pixel probability over the map.
    pub score: f64,
    pub lesions: LesionMask,
}

/// Apply the diagnosis rule to a probability map: keep connected components
/// of `p >= threshold` with at least `min_area_px` pixels; the case is
/// positive iff any component survives. The score is the max pixel
/// probability regardless of the threshold.
pub fn diagnose_map(
    prob: &Image<f32>,
    threshold: f64,
    min_area_px: usize,
    spacing: Spacing,
) -> DiagnosisResult {
    let score = prob.data().iter().cloned().fold(0.0f32, f32::max) as f64;
    let kept = prob
        .threshold(threshold as f32)
        .drop_small_components(min_area_px);
    let lesions = LesionMask::from_mask(kept, spacing);
    DiagnosisResult {
        is_rnv: lesions.mask.any(),
        score,
        lesions,
    }
}

/// Run the stage-2 net on one stack and diagnose the result. `spacing` is
/// the lateral spacing of the source volume, for component areas in mm².
pub fn infer_rnv<T: Scalar>(
    stack: &EnFaceStack,
    net: &RnvNet<T>,
    spacing: Spacing,
) -> Result<(Image<f32>, DiagnosisResult)> {
    let (o, a) = stack_to_branch_inputs::<T>(stack);
    let x_oct = stack_to_tensor(std::slice::from_ref(&o));
    let x_octa = stack_to_tensor(std::slice::from_ref(&a));
    let p = net.forward(&x_oct, &x_octa)?;
    let (w, h) = (stack.width(), stack.height());
    let mut prob = Image::<f32>::zeros(w, h);
    for y in 0..h {
        let row = p.row4(0, 0, y);
        for x in 0..w {
            prob.set(x, y, row[x].to_f64_lossy() as f32);
        }
    }
    let diag = diagnose_map(&prob, net.cfg().threshold, net.cfg().min_area_px, spacing);
    Ok((prob, diag))
}

// ============================================================
// Vessel refinement
// ============================================================

/// Multi-scale adaptive-threshold vessel extraction inside the membrane.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselRefineConfig {
    /// Odd window sizes for the local statistics.
    pub windows: Vec<usize>,
    /// `τ_w = mean_w + std_coef·std_w`.
    pub std_coef: f64,
    /// Components smaller than this are dropped at the end.
    pub min_area_px: usize,
}

impl Default for VesselRefineConfig {
    fn default() -> Self {
        VesselRefineConfig {
            windows: vec![7, 15, 31],
            std_coef: 0.5,
            min_area_px: 8,
        }
    }
}

/// Extract the vessels feeding a detected membrane from the RAW vitreous
/// flow projection. A pixel is a candidate when it strictly exceeds the
/// local threshold `mean_w + std_coef·std_w` for ANY window size; candidate
/// components that do not touch `membrane.mask` are discarded; the rest are
/// cleaned with a thin-structure-preserving opening and re-filtered so
/// every surviving component still touches the membrane; components under
/// `min_area_px` are dropped. The result is always a subset of the
/// candidate set.
pub fn refine_vessels_with(
    octa_vitreous: &Image<f32>,
    membrane: &LesionMask,
    cfg: &VesselRefineConfig,
) -> Result<Mask2> {
    let (w, h) = (octa_vitreous.width(), octa_vitreous.height());
    if w != membrane.mask.width() || h != membrane.mask.height() {
        return Err(shape_err!(
            "refine_vessels: projection {}x{} vs membrane {}x{}",
            w,
            h,
            membrane.mask.width(),
            membrane.mask.height()
        ));
    }
    if cfg.windows.is_empty() {
        return Err(config_err!("refine_vessels: no window sizes"));
    }
    let coef = cfg.std_coef as f32;
    let mut cand = Mask2::new(w, h);
    for &win in &cfg.windows {
        let (mean, std) = image::local_mean_std(octa_vitreous, win)?;
        for y in 0..h {
            for x in 0..w {
                if octa_vitreous.get(x, y) > mean.get(x, y) + coef * std.get(x, y) {
                    cand.set(x, y, true);
                }
            }
        }
    }
    let touching = keep_touching(&cand, &membrane.mask);
    let opened = image::opening_lines1(&touching);
    let refiltered = keep_touching(&opened, &membrane.mask);
    Ok(refiltered.drop_small_components(cfg.min_area_px))
}

/// [`refine_vessels_with`] at the default windows {7, 15, 31}, c = 0.5 and
/// an 8 px minimum.
pub fn refine_vessels(octa_vitreous: &Image<f32>, membrane: &LesionMask) -> Result<Mask2> {
    refine_vessels_with(octa_vitreous, membrane, &VesselRefineConfig::default())
}

fn keep_touching(m: &Mask2, reference: &Mask2) -> Mask2 {
    let mut out = Mask2::new(m.width(), m.height());
    for comp in m.components() {
        if comp.iter().any(|&(x, y)| reference.get(x, y)) {
            for (x, y) in comp {
                out.set(x, y, true);
            }
        }
    }
    out
}

// ============================================================
// Tests
// ============================================================
