//! Network components: shared backbone `h`, concept encoder, relevance
//! parametrizer, discriminator, k-WTA, and the relevance-weighted readout.

use std::collections::HashMap;

use cbm_autograd::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneName, ModelConfig, ModelKind};
use crate::error::{CoreError, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub out_dim: usize,
    /// `(channels, height, width)` of the last convolutional feature map.
    pub spatial_shape: Option<(usize, usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Encoder,
    Parametrizer,
    Head,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Indices of the `k` largest entries (ties go to the lower index).
pub fn kwta_mask(v: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut mask = vec![false; v.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// k-winners-take-all: keeps the `k` largest entries and zeroes the rest.
pub fn kwta(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > v.len() {
        return Err(CoreError::Invalid(format!("k = {k} exceeds vector length {}", v.len())));
    }
    let mask = kwta_mask(v, k);
    Ok(v.iter().zip(mask).map(|(&x, m)| if m { x } else { 0.0 }).collect())
}

/// `theta · c` for a `targets × concepts` row-major relevance matrix.
pub fn aggregate(theta: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let d = c.len();
    if d == 0 || theta.len() % d != 0 {
        return Err(CoreError::Shape(format!(
            "relevance of length {} is not a multiple of {d} concepts",
            theta.len()
        )));
    }
    Ok(theta
        .chunks(d)
        .map(|row| row.iter().zip(c).map(|(t, x)| t * x).sum())
        .collect())
}

/// Model parameters bound to leaves of one tape.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
    index: &'t HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[self.index[name]]
    }
}

/// Everything one forward pass produces, as tape nodes.
pub struct Forward<'t> {
    pub h: Var<'t>,
    /// Last convolutional activations (conv backbone only).
    pub feature_map: Option<Var<'t>>,
    /// Concept-layer pre-activations.
    pub concept_pre: Var<'t>,
    /// Sigmoid outputs for the supervised slice, `[batch, d_ex]`.
    pub c_ex: Var<'t>,
    /// k-WTA outputs for the unsupervised slice, `[batch, d_im]`.
    pub c_im: Option<Var<'t>>,
    /// Concepts read by the prediction, `[batch, d_ex + d_im]` (cbm: `d_ex`).
    pub c: Var<'t>,
    /// Relevance scores `[batch, num_targets · concepts]`, target-major.
    pub theta: Option<Var<'t>>,
    pub logits: Var<'t>,
    /// Batch statistics of the relevance-network normalization layers.
    pub bn_batch: Vec<BnStats>,
}

/// Plain-tensor outputs of an evaluation pass.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub logits: Tensor,
    pub concepts: Tensor,
    pub c_ex: Tensor,
    pub theta: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    pub bn: Vec<BnStats>,
    index: HashMap<String, usize>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params && self.bn == other.bn
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

impl Model {
    /// Fresh model with PyTorch-style uniform `±1/√fan_in` initialization.
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        cfg.validate().map_err(CoreError::InvalidConfig)?;
        let mut params = Vec::new();
        let linear = |params: &mut Vec<Param>, name: &str, group, fan_in: usize, fan_out: usize, rng: &mut _| {
            let bound = if fan_in > 0 { 1.0 / (fan_in as f64).sqrt() } else { 0.0 };
            params.push(Param {
                name: format!("{name}.weight"),
                group,
                value: uniform(&[fan_in, fan_out], bound, rng),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                group,
                value: uniform(&[fan_out], bound, rng),
            });
        };

        let [c_in, h, w] = cfg.input_shape;
        match cfg.backbone {
            BackboneName::Conv => {
                let mut prev = c_in;
                for (i, &ch) in cfg.backbone_widths.iter().enumerate() {
                    let fan_in = prev * 9;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    params.push(Param {
                        name: format!("backbone.{i}.weight"),
                        group: ParamGroup::Backbone,
                        value: uniform(&[ch, prev, 3, 3], bound, rng),
                    });
                    params.push(Param {
                        name: format!("backbone.{i}.bias"),
                        group: ParamGroup::Backbone,
                        value: uniform(&[ch], bound, rng),
                    });
                    prev = ch;
                }
            }
            BackboneName::Mlp => {
                let mut prev = c_in * h * w;
                for (i, &width) in cfg.backbone_widths.iter().enumerate() {
                    linear(&mut params, &format!("backbone.{i}"), ParamGroup::Backbone, prev, width, rng);
                    prev = width;
                }
            }
        }

        let d_h = cfg.d_h();
        let n_c = cfg.num_concepts();
        let enc_out = match cfg.model {
            ModelKind::Cbm => cfg.d_ex,
            _ => cfg.d_ex + cfg.d_im,
        };
        linear(&mut params, "encoder", ParamGroup::Encoder, d_h, enc_out, rng);

        let mut bn = Vec::new();
        match cfg.model {
            ModelKind::Cbm => {
                linear(&mut params, "head", ParamGroup::Head, cfg.d_ex, cfg.num_targets, rng);
            }
            ModelKind::Msenn | ModelKind::Cbmauc => {
                let [w1, w2] = cfg.theta_widths();
                let widths = [d_h, w1, w2];
                for i in 0..2 {
                    linear(&mut params, &format!("theta.{i}"), ParamGroup::Parametrizer, widths[i], widths[i + 1], rng);
                    params.push(Param {
                        name: format!("theta.bn{i}.gamma"),
                        group: ParamGroup::Parametrizer,
                        value: Tensor::ones(&[widths[i + 1]]),
                    });
                    params.push(Param {
                        name: format!("theta.bn{i}.beta"),
                        group: ParamGroup::Parametrizer,
                        value: Tensor::zeros(&[widths[i + 1]]),
                    });
                    bn.push(BnStats {
                        mean: vec![0.0; widths[i + 1]],
                        var: vec![1.0; widths[i + 1]],
                    });
                }
                linear(&mut params, "theta.2", ParamGroup::Parametrizer, w2, cfg.num_targets * n_c, rng);

                let dw = cfg.dis_hidden;
                linear(&mut params, "dis.0", ParamGroup::Discriminator, n_c + d_h, dw, rng);
                linear(&mut params, "dis.1", ParamGroup::Discriminator, dw, dw, rng);
                linear(&mut params, "dis.2", ParamGroup::Discriminator, dw, 1, rng);
            }
        }

        Ok(Model::from_parts(cfg.clone(), params, bn))
    }

    pub fn from_parts(cfg: ModelConfig, params: Vec<Param>, bn: Vec<BnStats>) -> Model {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Model { cfg, params, bn, index }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn group_params(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let [_, h, w] = self.cfg.input_shape;
        let spatial_shape = match self.cfg.backbone {
            BackboneName::Conv => {
                let pools = self.cfg.backbone_widths.len() - 1;
                Some((self.cfg.d_h(), h >> pools, w >> pools))
            }
            BackboneName::Mlp => None,
        };
        BackboneSpec {
            name: self.cfg.backbone,
            out_dim: self.cfg.d_h(),
            spatial_shape,
        }
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
            index: &self.index,
        }
    }

    fn linear<'t>(&self, b: &Bound<'t>, name: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(b.get(&format!("{name}.weight")))
            .add_row(b.get(&format!("{name}.bias")))
    }

    /// Shared features and (for conv backbones) the last feature map.
    pub fn backbone<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let shape = x.shape();
        let [c, h, w] = self.cfg.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(CoreError::Shape(format!(
                "input {shape:?} does not match [batch, {c}, {h}, {w}]"
            )));
        }
        match self.cfg.backbone {
            BackboneName::Conv => {
                let mut a = x;
                let last = self.cfg.backbone_widths.len() - 1;
                for i in 0..=last {
                    a = a
                        .conv2d(b.get(&format!("backbone.{i}.weight")), 1)
                        .add_channel_bias(b.get(&format!("backbone.{i}.bias")))
                        .relu();
                    if i < last {
                        a = a.max_pool2();
                    }
                }
                Ok((a.global_avg_pool(), Some(a)))
            }
            BackboneName::Mlp => {
                let mut a = x.reshape(&[shape[0], c * h * w]);
                for i in 0..self.cfg.backbone_widths.len() {
                    a = self.linear(b, &format!("backbone.{i}"), a).tanh();
                }
                Ok((a, None))
            }
        }
    }

    /// Concept encoder: one affine layer, sigmoid on the supervised slice,
    /// k-WTA on the unsupervised slice.
    pub fn encode_concepts<'t>(&self, b: &Bound<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>, Option<Var<'t>>, Var<'t>)> {
        self.check_features(h)?;
        let tape = h.tape();
        let pre = self.linear(b, "encoder", h);
        let d_ex = self.cfg.d_ex;
        let c_ex = pre.slice_cols(0, d_ex).sigmoid();
        let c_im = match self.cfg.model {
            ModelKind::Cbm => None,
            _ if self.cfg.d_im == 0 => None,
            _ => {
                let raw = pre.slice_cols(d_ex, self.cfg.d_im);
                let vals = raw.value();
                let mut mask = Vec::with_capacity(vals.numel());
                for i in 0..vals.rows() {
                    mask.extend(kwta_mask(vals.row(i), self.cfg.k).into_iter().map(|m| if m { 1.0 } else { 0.0 }));
                }
                let mask = tape.leaf(Tensor::new(vals.shape().to_vec(), mask));
                Some(raw.mul(mask))
            }
        };
        let c = match c_im {
            Some(im) if d_ex > 0 => tape.concat_cols(&[c_ex, im]),
            Some(im) => im,
            None => c_ex,
        };
        Ok((pre, c_ex, c_im, c))
    }

    /// Relevance network: `(Linear → BN → Mish) × 2 → Linear`, reshaped
    /// target-major to `[batch, num_targets · concepts]`.
    pub fn parametrize<'t>(&self, b: &Bound<'t>, h: Var<'t>, train: bool) -> Result<(Var<'t>, Vec<BnStats>)> {
        self.check_features(h)?;
        if self.cfg.model == ModelKind::Cbm {
            return Err(CoreError::Invalid("cbm has no relevance network".into()));
        }
        let tape = h.tape();
        let mut a = h;
        let mut stats = Vec::new();
        for i in 0..2 {
            a = self.linear(b, &format!("theta.{i}"), a);
            let n = a.shape()[0];
            let normed = if train {
                let mean = a.sum_rows().scale(1.0 / n as f64);
                let centered = a.sub(mean.broadcast_rows(n));
                let var = centered.square().sum_rows().scale(1.0 / n as f64);
                stats.push(BnStats {
                    mean: mean.value().data().to_vec(),
                    var: var.value().data().to_vec(),
                });
                centered.mul_row(var.add_scalar(BN_EPS).powf(-0.5))
            } else {
                let rs = &self.bn[i];
                let neg_mean = Tensor::new(vec![rs.mean.len()], rs.mean.iter().map(|m| -m).collect());
                let inv = Tensor::new(vec![rs.var.len()], rs.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect());
                a.add_row(tape.leaf(neg_mean)).mul_row(tape.leaf(inv))
            };
            a = normed
                .mul_row(b.get(&format!("theta.bn{i}.gamma")))
                .add_row(b.get(&format!("theta.bn{i}.beta")))
                .mish();
        }
        Ok((self.linear(b, "theta.2", a), stats))
    }

    /// `logits[:, t] = Σ_j theta[:, t·D + j] · c[:, j]`.
    pub fn aggregate<'t>(&self, theta: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
        let d = c.shape()[1];
        let targets = self.cfg.num_targets;
        if theta.shape()[1] != targets * d {
            return Err(CoreError::Shape(format!(
                "relevance width {} != {targets} targets x {d} concepts",
                theta.shape()[1]
            )));
        }
        let cols: Vec<Var<'t>> = (0..targets)
            .map(|t| theta.slice_cols(t * d, d).mul(c).sum_cols())
            .collect();
        Ok(if cols.len() == 1 {
            cols[0]
        } else {
            c.tape().concat_cols(&cols)
        })
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>, train: bool) -> Result<Forward<'t>> {
        let (h, feature_map) = self.backbone(b, x)?;
        self.forward_from_features(b, h, feature_map, train)
    }

    /// Everything downstream of the shared features.
    pub fn forward_from_features<'t>(
        &self,
        b: &Bound<'t>,
        h: Var<'t>,
        feature_map: Option<Var<'t>>,
        train: bool,
    ) -> Result<Forward<'t>> {
        let (concept_pre, c_ex, c_im, c) = self.encode_concepts(b, h)?;
        let (theta, logits, bn_batch) = match self.cfg.model {
            ModelKind::Cbm => (None, self.linear(b, "head", c), Vec::new()),
            _ => {
                let (theta, stats) = self.parametrize(b, h, train)?;
                let logits = self.aggregate(theta, c)?;
                (Some(theta), logits, stats)
            }
        };
        Ok(Forward {
            h,
            feature_map,
            concept_pre,
            c_ex,
            c_im,
            c,
            theta,
            logits,
            bn_batch,
        })
    }

    /// Discriminator score `[batch, 1]` for `z = [c; h]`.
    pub fn discriminate<'t>(&self, b: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if !self.cfg.uses_discriminator() {
            return Err(CoreError::Invalid("cbm has no discriminator".into()));
        }
        let expected = self.cfg.num_concepts() + self.cfg.d_h();
        if z.shape()[1] != expected {
            return Err(CoreError::Shape(format!("discriminator input width {} != {expected}", z.shape()[1])));
        }
        let a = self.linear(b, "dis.0", z).mish();
        let a = self.linear(b, "dis.1", a).mish();
        Ok(self.linear(b, "dis.2", a))
    }

    fn check_features(&self, h: Var<'_>) -> Result<()> {
        let s = h.shape();
        if s.len() != 2 || s[1] != self.cfg.d_h() {
            return Err(CoreError::Shape(format!("features {s:?} do not have width {}", self.cfg.d_h())));
        }
        Ok(())
    }

    /// Folds one batch's normalization statistics into the running
    /// estimates (unbiased variance, momentum 0.1).
    pub fn update_bn(&mut self, batch: &[BnStats], n: usize) {
        let corr = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for (run, cur) in self.bn.iter_mut().zip(batch) {
            for (r, c) in run.mean.iter_mut().zip(&cur.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * c;
            }
            for (r, c) in run.var.iter_mut().zip(&cur.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * c * corr;
            }
        }
    }

    /// Evaluation-mode outputs for a stack of inputs `[n, c, h, w]`.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        const CHUNK: usize = 256;
        let n = x.shape()[0];
        let per = x.numel() / n.max(1);
        let mut logits = Vec::new();
        let mut concepts = Vec::new();
        let mut c_ex = Vec::new();
        let mut theta = Vec::new();
        let (mut n_c, mut n_t) = (self.cfg.num_concepts(), 0);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec());
            let tape = Tape::new();
            let b = self.bind(&tape);
            let f = self.forward(&b, tape.leaf(chunk), false)?;
            logits.extend_from_slice(f.logits.value().data());
            concepts.extend_from_slice(f.c.value().data());
            n_c = f.c.shape()[1];
            c_ex.extend_from_slice(f.c_ex.value().data());
            if let Some(t) = f.theta {
                n_t = t.shape()[1];
                theta.extend_from_slice(t.value().data());
            }
        }
        Ok(Predictions {
            logits: Tensor::new(vec![n, self.cfg.num_targets], logits),
            concepts: Tensor::new(vec![n, n_c], concepts),
            c_ex: Tensor::new(vec![n, self.cfg.d_ex], c_ex),
            theta: (n_t > 0).then(|| Tensor::new(vec![n, n_t], theta)),
        })
    }
}
