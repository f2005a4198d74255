//! Stage-1 network: vitreous-vs-retina segmentation per B-scan.
//!
//! A U-Net takes a 6-channel triplet (three consecutive OCT B-scans + the
//! matching OCTA B-scans) and emits a per-pixel probability of RETINA, so
//! its binarized output is directly a [`VriMask`] slice. Each encoder stage
//! is conv3×3 → multiscale fusion (parallel 1×1/3×3/5×5 convs concatenated
//! and 1×1-mixed) → maxpool; the decoder mirrors it with nearest upsampling
//! and skip concatenation. Training minimizes the composite loss
//! `L_S = α·BCE + (1−α)·Dice`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::image::Image;
use crate::nn::checkpoint::{Checkpoint, LayerKind, LayerSpec};
use crate::nn::gradcheck::sample_indices;
use crate::nn::layers::Conv2d;
use crate::nn::ops;
use crate::nn::{AdamState, Tensor};
use crate::preprocess;
use crate::scalar::Scalar;
use crate::volume::{extract_triplet, mask_to_surface, Modality, Volume, VriMask, VriSurface};

// ============================================================
// Configuration
// ============================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VriNetConfig {
    /// Encoder stages; the spatial dims must be divisible by 2^stages.
    pub stages: usize,
    pub base_channels: usize,
    /// Weight of the BCE term in the composite loss.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation Dice loss, in epochs.
    pub patience: usize,
    /// Training B-scans sampled per case per epoch (0 = all). Validation
    /// always uses a fixed evenly-spaced subset of the same size.
    pub bscans_per_case: usize,
    /// Probability threshold for the retina class at inference.
    pub threshold: f64,
}

impl Default for VriNetConfig {
    fn default() -> Self {
        VriNetConfig {
            stages: 3,
            base_channels: 16,
            alpha: 0.5,
            lr: 1e-4,
            batch_size: 2,
            max_epochs: 1000,
            patience: 20,
            bscans_per_case: 0,
            threshold: 0.5,
        }
    }
}

impl VriNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(config_err!("vri config: stages must be >= 2, got {}", self.stages));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("vri config: alpha must be in [0,1], got {}", self.alpha));
        }
        if self.base_channels == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(config_err!("vri config: zero-valued size field"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(config_err!("vri config: threshold must be in (0,1)"));
        }
        Ok(())
    }
}

// ============================================================
// Composite loss (BCE + Dice)
// ============================================================

pub const LOSS_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;

/// Composite segmentation loss `L_S = α·L_BCE + (1−α)·L_Dice`, where BCE
/// averages over all pixels and the Dice term is
/// `1 − (2·Σyŷ + ε)/(Σy + Σŷ + ε)`, ε = 1e−6. Predictions are clamped to
/// [1e−7, 1−1e−7] first. Returns the scalar loss, the gradient w.r.t. ŷ,
/// and the individual (BCE, Dice) terms for logging.
pub fn loss_s<T: Scalar>(
    yhat: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
) -> Result<(T, Tensor<T>, (T, T))> {
    if yhat.shape() != y.shape() {
        return Err(shape_err!(
            "loss_s: prediction {:?} vs target {:?}",
            yhat.shape(),
            y.shape()
        ));
    }
    let n = yhat.len();
    if n == 0 {
        return Err(shape_err!("loss_s: empty tensors"));
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::from_f64_lossy(1.0 - PROB_CLAMP);
    let eps = T::from_f64_lossy(LOSS_EPS);
    let nf = T::from_usize(n).unwrap();
    let a = T::from_f64_lossy(alpha);
    let one = T::one();

    let mut bce = T::zero();
    let mut inter = T::zero();
    let mut sum_y = T::zero();
    let mut sum_p = T::zero();
    let mut clamped = vec![false; n];
    let mut p_c = Vec::with_capacity(n);
    for i in 0..n {
        let raw = yhat.data()[i];
        let p = if raw < lo {
            clamped[i] = true;
            lo
        } else if raw > hi {
            clamped[i] = true;
            hi
        } else {
            raw
        };
        p_c.push(p);
        let yi = y.data()[i];
        bce -= yi * p.ln() + (one - yi) * (one - p).ln();
        inter += yi * p;
        sum_y += yi;
        sum_p += p;
    }
    bce = bce / nf;
    let num = T::from_f64_lossy(2.0) * inter + eps;
    let den = sum_y + sum_p + eps;
    let dice = one - num / den;
    let total = a * bce + (one - a) * dice;

    // Gradient w.r.t. the raw prediction: zero where the clamp was active.
    let mut grad = yhat.zeros_like();
    let g = grad.data_mut();
    for i in 0..n {
        if clamped[i] {
            continue;
        }
        let p = p_c[i];
        let yi = y.data()[i];
        let dbce = -(yi / p - (one - yi) / (one - p)) / nf;
        // d/dp of −num/den with num, den as above
        let ddice = -(T::from_f64_lossy(2.0) * yi * den - num) / (den * den);
        g[i] = a * dbce + (one - a) * ddice;
    }
    Ok((total, grad, (bce, dice)))
}

// ============================================================
// Network
// ============================================================

/// Parallel 1×1/3×3/5×5 convolutions over the same input, concatenated and
/// mixed back down by a 1×1 conv; every branch and the mix are ReLU-gated.
#[derive(Debug, Clone)]
pub struct MsBlock<T: Scalar> {
    pub k1: Conv2d<T>,
    pub k3: Conv2d<T>,
    pub k5: Conv2d<T>,
    pub mix: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct MsCache<T: Scalar> {
    b1: Tensor<T>,
    b3: Tensor<T>,
    b5: Tensor<T>,
    cat: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Scalar> MsBlock<T> {
    pub(crate) fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        MsBlock {
            k1: Conv2d::new_he(c, c, 1, rng),
            k3: Conv2d::new_he(c, c, 3, rng),
            k5: Conv2d::new_he(c, c, 5, rng),
            mix: Conv2d::new_he(c, 3 * c, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MsCache<T>)> {
        let b1 = ops::relu(&self.k1.forward(x)?);
        let b3 = ops::relu(&self.k3.forward(x)?);
        let b5 = ops::relu(&self.k5.forward(x)?);
        let cat = ops::concat_channels(&[&b1, &b3, &b5])?;
        let out = ops::relu(&self.mix.forward(&cat)?);
        Ok((
            out.clone(),
            MsCache {
                b1,
                b3,
                b5,
                cat,
                out,
            },
        ))
    }

    /// Returns the gradient w.r.t. the block input and accumulates parameter
    /// gradients into `g`.
    pub(crate) fn backward(
        &self,
        x: &Tensor<T>,
        cache: &MsCache<T>,
        gy: &Tensor<T>,
        g: &mut MsBlock<T>,
    ) -> Result<Tensor<T>> {
        let gmix = ops::relu_backward(&cache.out, gy);
        let (gcat, gw, gb) = self.mix.backward(&cache.cat, &gmix)?;
        g.mix.w.add_assign(&gw)?;
        g.mix.b.add_assign(&gb)?;
        let c = cache.b1.shape()[1];
        let parts = ops::split_channels(&gcat, &[c, c, c])?;

        let (mut gx, gw1, gb1) = self.k1.backward(x, &ops::relu_backward(&cache.b1, &parts[0]))?;
        g.k1.w.add_assign(&gw1)?;
        g.k1.b.add_assign(&gb1)?;
        let (gx3, gw3, gb3) = self.k3.backward(x, &ops::relu_backward(&cache.b3, &parts[1]))?;
        g.k3.w.add_assign(&gw3)?;
        g.k3.b.add_assign(&gb3)?;
        gx.add_assign(&gx3)?;
        let (gx5, gw5, gb5) = self.k5.backward(x, &ops::relu_backward(&cache.b5, &parts[2]))?;
        g.k5.w.add_assign(&gw5)?;
        g.k5.b.add_assign(&gb5)?;
        gx.add_assign(&gx5)?;
        Ok(gx)
    }

    pub(crate) fn zeros_like(&self) -> Self {
        MsBlock {
            k1: Conv2d {
                w: self.k1.w.zeros_like(),
                b: self.k1.b.zeros_like(),
                padding: self.k1.padding,
            },
            k3: Conv2d {
                w: self.k3.w.zeros_like(),
                b: self.k3.b.zeros_like(),
                padding: self.k3.padding,
            },
            k5: Conv2d {
                w: self.k5.w.zeros_like(),
                b: self.k5.b.zeros_like(),
                padding: self.k5.padding,
            },
            mix: Conv2d {
                w: self.mix.w.zeros_like(),
                b: self.mix.b.zeros_like(),
                padding: self.mix.padding,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct EncStage<T: Scalar> {
    conv: Conv2d<T>,
    ms: MsBlock<T>,
}

#[derive(Debug, Clone)]
pub struct VriNet<T: Scalar> {
    cfg: VriNetConfig,
    enc: Vec<EncStage<T>>,
    bottleneck: Conv2d<T>,
    dec: Vec<Conv2d<T>>, // indexed by stage (dec[i] outputs C_i at stage-i resolution)
    head: Conv2d<T>,
}

pub struct VriCache<T: Scalar> {
    x: Tensor<T>,
    enc_in: Vec<Tensor<T>>,   // input to each encoder stage
    enc_a: Vec<Tensor<T>>,    // post conv+relu
    enc_ms: Vec<MsCache<T>>,  // multiscale internals (out == skip)
    enc_arg: Vec<Vec<u32>>,   // pooling argmax
    bn_in: Tensor<T>,
    bn_out: Tensor<T>,
    dec_up: Vec<Tensor<T>>,   // aligned with execution order (deep->shallow)
    dec_cat: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    logits_in: Tensor<T>,
    prob: Tensor<T>,
}

impl<T: Scalar> VriNet<T> {
    pub const IN_CHANNELS: usize = 6;

    pub fn new(cfg: &VriNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stages;
        let b = cfg.base_channels;
        let mut enc = Vec::with_capacity(s);
        let mut cin = Self::IN_CHANNELS;
        for i in 0..s {
            let c = b << i;
            enc.push(EncStage {
                conv: Conv2d::new_he(c, cin, 3, rng),
                ms: MsBlock::new(c, rng),
            });
            cin = c;
        }
        let cbn = b << s;
        let bottleneck = Conv2d::new_he(cbn, cin, 3, rng);
        let mut dec = Vec::with_capacity(s);
        // dec[i] consumes upsampled deeper features + skip_i.
        for i in 0..s {
            let c = b << i;
            let deeper = if i + 1 == s { cbn } else { b << (i + 1) };
            dec.push(Conv2d::new_he(c, deeper + c, 3, rng));
        }
        let head = Conv2d::new_he(1, b, 1, rng);
        Ok(VriNet {
            cfg: cfg.clone(),
            enc,
            bottleneck,
            dec,
            head,
        })
    }

    pub fn cfg(&self) -> &VriNetConfig {
        &self.cfg
    }

    fn zeros_like(&self) -> Self {
        VriNet {
            cfg: self.cfg.clone(),
            enc: self
                .enc
                .iter()
                .map(|st| EncStage {
                    conv: Conv2d {
                        w: st.conv.w.zeros_like(),
                        b: st.conv.b.zeros_like(),
                        padding: st.conv.padding,
                    },
                    ms: st.ms.zeros_like(),
                })
                .collect(),
            bottleneck: Conv2d {
                w: self.bottleneck.w.zeros_like(),
                b: self.bottleneck.b.zeros_like(),
                padding: self.bottleneck.padding,
            },
            dec: self
                .dec
                .iter()
                .map(|d| Conv2d {
                    w: d.w.zeros_like(),
                    b: d.b.zeros_like(),
                    padding: d.padding,
                })
                .collect(),
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
        for (i, st) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.conv.w"), &st.conv.w));
            out.push((format!("enc{i}.conv.b"), &st.conv.b));
            for (tag, c) in [("k1", &st.ms.k1), ("k3", &st.ms.k3), ("k5", &st.ms.k5), ("mix", &st.ms.mix)] {
                out.push((format!("enc{i}.ms.{tag}.w"), &c.w));
                out.push((format!("enc{i}.ms.{tag}.b"), &c.b));
            }
        }
        out.push(("bottleneck.conv.w".into(), &self.bottleneck.w));
        out.push(("bottleneck.conv.b".into(), &self.bottleneck.b));
        for (i, d) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.conv.w"), &d.w));
            out.push((format!("dec{i}.conv.b"), &d.b));
        }
        out.push(("head.conv.w".into(), &self.head.w));
        out.push(("head.conv.b".into(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for st in self.enc.iter_mut() {
            out.push(&mut st.conv.w);
            out.push(&mut st.conv.b);
            for c in [&mut st.ms.k1, &mut st.ms.k3, &mut st.ms.k5, &mut st.ms.mix] {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
        }
        out.push(&mut self.bottleneck.w);
        out.push(&mut self.bottleneck.b);
        for d in self.dec.iter_mut() {
            out.push(&mut d.w);
            out.push(&mut d.b);
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
        let mut cin = Self::IN_CHANNELS;
        for i in 0..s {
            let c = b << i;
            specs.push(LayerSpec {
                kind: LayerKind::Conv,
                name: format!("enc{i}.conv"),
                in_channels: cin,
                out_channels: c,
                kernel: 3,
                params: self.enc[i].conv.param_count(),
            });
            specs.push(LayerSpec {
                kind: LayerKind::FuseMultiscale,
                name: format!("enc{i}.ms"),
                in_channels: c,
                out_channels: c,
                kernel: 5,
                params: self.enc[i].ms.k1.param_count()
                    + self.enc[i].ms.k3.param_count()
                    + self.enc[i].ms.k5.param_count()
                    + self.enc[i].ms.mix.param_count(),
            });
            specs.push(LayerSpec {
                kind: LayerKind::Maxpool,
                name: format!("enc{i}.pool"),
                in_channels: c,
                out_channels: c,
                kernel: 2,
                params: 0,
            });
            cin = c;
        }
        specs.push(LayerSpec {
            kind: LayerKind::Conv,
            name: "bottleneck.conv".into(),
            in_channels: cin,
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
                in_channels: deeper + c,
                out_channels: deeper + c,
                kernel: 0,
                params: 0,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Conv,
                name: format!("dec{i}.conv"),
                in_channels: deeper + c,
                out_channels: c,
                kernel: 3,
                params: self.dec[i].param_count(),
            });
        }
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

    /// Forward pass keeping every intermediate the backward pass needs.
    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, VriCache<T>)> {
        let s = self.cfg.stages;
        let mut enc_in = Vec::with_capacity(s);
        let mut enc_a = Vec::with_capacity(s);
        let mut enc_ms = Vec::with_capacity(s);
        let mut enc_arg = Vec::with_capacity(s);
        let mut cur = x.clone();
        for st in &self.enc {
            enc_in.push(cur.clone());
            let a = ops::relu(&st.conv.forward(&cur)?);
            let (m, mcache) = st.ms.forward(&a)?;
            let (p, arg) = ops::maxpool2_forward(&m)?;
            enc_a.push(a);
            enc_ms.push(mcache);
            enc_arg.push(arg);
            cur = p;
        }
        let bn_in = cur;
        let bn_out = ops::relu(&self.bottleneck.forward(&bn_in)?);
        let mut d = bn_out.clone();
        let mut dec_up = Vec::with_capacity(s);
        let mut dec_cat = Vec::with_capacity(s);
        let mut dec_out = Vec::with_capacity(s);
        for i in (0..s).rev() {
            let u = ops::upsample2_forward(&d)?;
            let cat = ops::concat_channels(&[&u, &enc_ms[i].out])?;
            d = ops::relu(&self.dec[i].forward(&cat)?);
            dec_up.push(u);
            dec_cat.push(cat);
            dec_out.push(d.clone());
        }
        let logits_in = d.clone();
        let prob = ops::sigmoid(&self.head.forward(&logits_in)?);
        Ok((
            prob.clone(),
            VriCache {
                x: x.clone(),
                enc_in,
                enc_a,
                enc_ms,
                enc_arg,
                bn_in,
                bn_out,
                dec_up,
                dec_cat,
                dec_out,
                logits_in,
                prob,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Backpropagate `gy` (gradient w.r.t. the probability output) and
    /// return parameter gradients as a zero-initialized twin of the net.
    pub fn backward(&self, cache: &VriCache<T>, gy: &Tensor<T>) -> Result<VriNet<T>> {
        let s = self.cfg.stages;
        let mut g = self.zeros_like();

        let glogits = ops::sigmoid_backward(&cache.prob, gy);
        let (mut gd, gw, gb) = self.head.backward(&cache.logits_in, &glogits)?;
        g.head.w.add_assign(&gw)?;
        g.head.b.add_assign(&gb)?;

        // Decoder stages were executed deep->shallow (stage i = s-1 at
        // execution position 0); walk them back shallow->deep. Skip
        // gradients accumulate per encoder stage.
        let mut gskip: Vec<Option<Tensor<T>>> = vec![None; s];
        let exec: Vec<(usize, usize)> = (0..s).rev().enumerate().collect();
        for &(pos, i) in exec.iter().rev() {
            let gpre = ops::relu_backward(&cache.dec_out[pos], &gd);
            let (gcat, gw, gb) = self.dec[i].backward(&cache.dec_cat[pos], &gpre)?;
            g.dec[i].w.add_assign(&gw)?;
            g.dec[i].b.add_assign(&gb)?;
            let deeper_c = cache.dec_up[pos].shape()[1];
            let skip_c = cache.enc_ms[i].out.shape()[1];
            let parts = ops::split_channels(&gcat, &[deeper_c, skip_c])?;
            gskip[i] = Some(parts[1].clone());
            gd = ops::upsample2_backward(&parts[0])?;
        }

        let gbn = ops::relu_backward(&cache.bn_out, &gd);
        let (mut gcur, gw, gb) = self.bottleneck.backward(&cache.bn_in, &gbn)?;
        g.bottleneck.w.add_assign(&gw)?;
        g.bottleneck.b.add_assign(&gb)?;

        for i in (0..s).rev() {
            let m_shape = cache.enc_ms[i].out.shape().to_vec();
            let mut gm = ops::maxpool2_backward(&cache.enc_arg[i], &gcur, &m_shape)?;
            if let Some(extra) = &gskip[i] {
                gm.add_assign(extra)?;
            }
            let ga = self.enc[i].ms.backward(&cache.enc_a[i], &cache.enc_ms[i], &gm, &mut g.enc[i].ms)?;
            let gpre = ops::relu_backward(&cache.enc_a[i], &ga);
            let (gx, gw, gb) = self.enc[i].conv.backward(&cache.enc_in[i], &gpre)?;
            g.enc[i].conv.w.add_assign(&gw)?;
            g.enc[i].conv.b.add_assign(&gb)?;
            gcur = gx;
        }
        let _ = gcur; // gradient w.r.t. the input is not used
        let _ = &cache.x;
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> Checkpoint
    where
        T: Scalar,
    {
        Checkpoint {
            model: "vri".into(),
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
        if ck.model != "vri" {
            return Err(config_err!("checkpoint is for model '{}', not 'vri'", ck.model));
        }
        let cfg: VriNetConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| config_err!("vri checkpoint config: {e}"))?;
        let mut net = VriNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
        if names.len() != ck.entries.len() {
            return Err(config_err!(
                "vri checkpoint has {} tensors, net wants {}",
                ck.entries.len(),
                names.len()
            ));
        }
        for (slot, (name, (ck_name, ck_tensor))) in
            net.params_mut().into_iter().zip(names.iter().zip(&ck.entries))
        {
            if name != ck_name {
                return Err(config_err!("vri checkpoint tensor '{ck_name}' where '{name}' expected"));
            }
            let cast: Tensor<T> = ck_tensor.cast();
            if cast.shape() != slot.shape() {
                return Err(shape_err!(
                    "vri checkpoint tensor '{ck_name}' shape {:?}, want {:?}",
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
// Training
// ============================================================

/// One training case fully in memory.
#[derive(Debug, Clone)]
pub struct VriCase {
    pub id: String,
    pub oct: Volume,
    pub octa: Volume,
    pub truth: VriMask,
}

#[derive(Debug, Clone, Serialize)]
pub struct VriLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bce: f64,
    pub val_dice: f64,
}

/// Assemble the normalized 6-channel input tensor for one B-scan.
pub fn make_input<T: Scalar>(oct: &Volume, octa: &Volume, y: usize) -> Result<Vec<Image<T>>> {
    let trip = extract_triplet(oct, octa, y)?;
    Ok(trip
        .iter()
        .map(|img| preprocess::normalize_channel(&img.cast::<T>()))
        .collect())
}

pub(crate) fn stack_to_tensor<T: Scalar>(samples: &[Vec<Image<T>>]) -> Tensor<T> {
    let n = samples.len();
    let c = samples[0].len();
    let (w, h) = (samples[0][0].width(), samples[0][0].height());
    let mut t = Tensor::zeros(&[n, c, h, w]);
    for (ni, st) in samples.iter().enumerate() {
        for (ci, img) in st.iter().enumerate() {
            for r in 0..h {
                t.row4_mut(ni, ci, r).copy_from_slice(img.row(r));
            }
        }
    }
    t
}

fn target_tensor<T: Scalar>(cases: &[&VriCase], picks: &[(usize, usize)]) -> Tensor<T> {
    // picks: (case index within `cases`, B-scan index)
    let (nz, nx, _) = cases[0].truth.dims();
    let mut t = Tensor::zeros(&[picks.len(), 1, nz, nx]);
    for (ni, &(ci, y)) in picks.iter().enumerate() {
        for z in 0..nz {
            let row = t.row4_mut(ni, 0, z);
            for x in 0..nx {
                if cases[ci].truth.get(z, x, y) {
                    row[x] = T::one();
                }
            }
        }
    }
    t
}

/// Split case indices 80/20 (at least one validation case), seeded.
pub fn train_val_split(n: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * 0.2).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Train the stage-1 net. Deterministic given (cases order, cfg, seed).
/// Returns the best-validation checkpoint and the per-epoch log.
pub fn train_vri(
    cases: &[VriCase],
    cfg: &VriNetConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<VriLogRow>)> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(config_err!("train_vri: need >= 2 cases, got {}", cases.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = VriNet::<f64>::new(cfg, &mut rng)?;
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);

    let (train_idx, val_idx) = train_val_split(cases.len(), &mut rng);
    let train_cases: Vec<&VriCase> = train_idx.iter().map(|&i| &cases[i]).collect();
    let val_cases: Vec<&VriCase> = val_idx.iter().map(|&i| &cases[i]).collect();

    let ny = cases[0].oct.ny();
    let per_case = if cfg.bscans_per_case == 0 || cfg.bscans_per_case > ny {
        ny
    } else {
        cfg.bscans_per_case
    };
    // Fixed validation B-scans: evenly spaced, same for every epoch.
    let val_bscans = sample_indices(ny, per_case);

    let mut best_dice = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_ck = net.to_checkpoint();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        // ---- sample and shuffle this epoch's training picks
        let mut picks: Vec<(usize, usize)> = Vec::new();
        for ci in 0..train_cases.len() {
            if per_case == ny {
                picks.extend((0..ny).map(|y| (ci, y)));
            } else {
                let mut ys: Vec<usize> = (0..ny).collect();
                ys.shuffle(&mut rng);
                picks.extend(ys[..per_case].iter().map(|&y| (ci, y)));
            }
        }
        picks.shuffle(&mut rng);

        // ---- minibatch loop
        let mut train_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in picks.chunks(cfg.batch_size) {
            let mut stacks: Vec<Vec<Image<f64>>> = chunk
                .iter()
                .map(|&(ci, y)| make_input(&train_cases[ci].oct, &train_cases[ci].octa, y))
                .collect::<Result<_>>()?;
            preprocess::augment(&mut stacks, &mut rng);
            let x = stack_to_tensor(&stacks);
            let t = target_tensor(&train_cases, chunk);
            let (prob, cache) = net.forward_cached(&x)?;
            let (loss, grad, _) = loss_s(&prob, &t, cfg.alpha)?;
            train_loss_sum += loss;
            n_batches += 1;
            let grads = net.backward(&cache, &grad)?;
            let gvec: Vec<Tensor<f64>> =
                grads.params().iter().map(|(_, t)| (*t).clone()).collect();
            adam.update(&mut net.params_mut(), &gvec)?;
        }

        // ---- validation (fixed set, no augmentation)
        let mut val_bce = 0.0;
        let mut val_dice = 0.0;
        let mut n_val = 0usize;
        for (ci, _) in val_cases.iter().enumerate() {
            for &y in &val_bscans {
                let stack = make_input::<f64>(&val_cases[ci].oct, &val_cases[ci].octa, y)?;
                let x = stack_to_tensor(std::slice::from_ref(&stack));
                let t = target_tensor(&val_cases, &[(ci, y)]);
                let prob = net.forward(&x)?;
                let (_, _, (bce, dice)) = loss_s(&prob, &t, cfg.alpha)?;
                val_bce += bce;
                val_dice += dice;
                n_val += 1;
            }
        }
        val_bce /= n_val as f64;
        val_dice /= n_val as f64;
        log.push(VriLogRow {
            epoch,
            train_loss: train_loss_sum / n_batches.max(1) as f64,
            val_bce,
            val_dice,
        });

        if val_dice < best_dice {
            best_dice = val_dice;
            best_epoch = epoch;
            best_ck = net.to_checkpoint();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best_ck, log))
}

// ============================================================
// Inference
// ============================================================

/// Run the net over every B-scan, returning the per-voxel retina
/// probability field and the surface extracted from its binarization.
pub fn infer_vri<T: Scalar>(
    v_oct: &Volume,
    v_octa: &Volume,
    net: &VriNet<T>,
) -> Result<(Volume, VriSurface)> {
    if !v_oct.same_dims(v_octa) {
        return Err(shape_err!(
            "infer_vri: OCT {:?} vs OCTA {:?}",
            v_oct.dims(),
            v_octa.dims()
        ));
    }
    let (nz, nx, ny) = v_oct.dims();
    let mut prob = Volume::zeros(nz, nx, ny, v_oct.spacing(), Modality::VriMask)?;
    let mut mask = VriMask::new(nz, nx, ny);
    let thr = net.cfg().threshold;
    for y in 0..ny {
        let stack = make_input::<T>(v_oct, v_octa, y)?;
        let x = stack_to_tensor(std::slice::from_ref(&stack));
        let p = net.forward(&x)?;
        for z in 0..nz {
            let row = p.row4(0, 0, z);
            for xx in 0..nx {
                let pv = row[xx].to_f64_lossy();
                prob.set(z, xx, y, pv as f32);
                if pv >= thr {
                    mask.set(z, xx, y, true);
                }
            }
        }
    }
    let surface = mask_to_surface(&mask);
    Ok((prob, surface))
}
