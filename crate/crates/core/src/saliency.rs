//! Grad-CAM maps for individual concept units (or task logits) and PNG
//! overlay export.

use std::fs;
use std::path::{Path, PathBuf};

use cbm_autograd::{Tape, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GridLayout};
use crate::error::{CoreError, Result};
use crate::nets::Model;

/// What the map attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamTarget {
    /// Post-activation concept unit.
    Concept(usize),
    /// Task logit.
    Logit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Sup,
    Unsup,
    Logit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub unit_index: usize,
    pub kind: UnitKind,
    /// Concept name, `unsup_<i>` or `logit_<t>`.
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, nonnegative, max-normalized to 1 when nonzero.
    pub map: Vec<f64>,
}

impl SaliencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.map[y * self.width + x]
    }

    /// Share of the total map mass inside grid cell `j`; zero for an
    /// all-zero map.
    pub fn cell_mass(&self, layout: &GridLayout, j: usize) -> f64 {
        let total: f64 = self.map.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                if layout.cell_contains(j, y, x) {
                    inside += self.at(y, x);
                }
            }
        }
        inside / total
    }
}

fn unit_meta(model: &Model, target: CamTarget) -> (usize, UnitKind, String) {
    match target {
        CamTarget::Concept(j) if j < model.cfg.d_ex => (j, UnitKind::Sup, format!("concept_{j}")),
        CamTarget::Concept(j) => (j, UnitKind::Unsup, format!("unsup_{}", j - model.cfg.d_ex)),
        CamTarget::Logit(t) => (t, UnitKind::Logit, format!("logit_{t}")),
    }
}

/// Bilinear resize of a row-major `h × w` grid with half-pixel centers
/// (`align_corners = false`).
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ly) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, lx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
            let bottom = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    out
}

/// Grad-CAM maps for several targets on one image `[c, h, w]` (or
/// `[1, c, h, w]`), sharing one evaluation-mode forward pass.
pub fn grad_cam_units(model: &Model, x: &Tensor, targets: &[CamTarget]) -> Result<Vec<SaliencyMap>> {
    let (_, in_h, in_w) = (model.cfg.input_shape[0], model.cfg.input_shape[1], model.cfg.input_shape[2]);
    if model.backbone_spec().spatial_shape.is_none() {
        return Err(CoreError::Invalid("backbone has no spatial feature map".into()));
    }
    let n_c = model.cfg.num_concepts();
    for t in targets {
        match *t {
            CamTarget::Concept(j) if j >= n_c => {
                return Err(CoreError::Invalid(format!("unit {j} out of range for {n_c} concepts")))
            }
            CamTarget::Logit(k) if k >= model.cfg.num_targets => {
                return Err(CoreError::Invalid(format!("logit {k} out of range")))
            }
            _ => {}
        }
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&model.cfg.input_shape);
    if x.numel() != shape.iter().product::<usize>() {
        return Err(CoreError::Shape(format!("image {:?} vs input {:?}", x.shape(), model.cfg.input_shape)));
    }
    let tape = Tape::new();
    let b = model.bind(&tape);
    let fwd = model.forward(&b, tape.leaf(x.reshape(&shape)), false)?;
    let fmap = fwd.feature_map.expect("conv backbone keeps its feature map");
    let fs = fmap.shape();
    let (k, fh, fw) = (fs[1], fs[2], fs[3]);
    let a = fmap.value();

    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        let scalar = match target {
            CamTarget::Concept(j) => fwd.c.slice_cols(j, 1).sum(),
            CamTarget::Logit(t) => fwd.logits.slice_cols(t, 1).sum(),
        };
        let g = tape.grad(scalar, &[fmap])?[0].value();
        let mut cam = vec![0.0; fh * fw];
        for ch in 0..k {
            let base = ch * fh * fw;
            let weight = g.data()[base..base + fh * fw].iter().sum::<f64>() / (fh * fw) as f64;
            for (c, v) in cam.iter_mut().zip(&a.data()[base..base + fh * fw]) {
                *c += weight * v;
            }
        }
        cam.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut map = upsample_bilinear(&cam, fh, fw, in_h, in_w);
        let max = map.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            map.iter_mut().for_each(|v| *v /= max);
        }
        let (unit_index, kind, name) = unit_meta(model, target);
        out.push(SaliencyMap {
            unit_index,
            kind,
            name,
            height: in_h,
            width: in_w,
            map,
        });
    }
    Ok(out)
}

pub fn grad_cam_unit(model: &Model, x: &Tensor, target: CamTarget) -> Result<SaliencyMap> {
    Ok(grad_cam_units(model, x, &[target])?.remove(0))
}

/// Jet-style colormap on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayOptions {
    /// Heatmap weight in the blend.
    pub alpha: f64,
    /// Nearest-neighbour magnification of the written PNG.
    pub scale: u32,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        OverlayOptions { alpha: 0.5, scale: 8 }
    }
}

/// Blends the image (`[3, h, w]` in `[0, 1]`) with the colored map.
pub fn overlay(image: &[f64], map: &SaliencyMap, opts: OverlayOptions) -> RgbImage {
    let (h, w) = (map.height, map.width);
    let s = opts.scale.max(1);
    RgbImage::from_fn(w as u32 * s, h as u32 * s, |px, py| {
        let (x, y) = ((px / s) as usize, (py / s) as usize);
        let color = jet(map.at(y, x));
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let base = image[(c * h + y) * w + x];
            let v = (1.0 - opts.alpha) * base + opts.alpha * color[c];
            rgb[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(rgb)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub image_id: usize,
    pub unit_index: usize,
    pub unit_kind: UnitKind,
    pub path: String,
}

/// Writes one overlay PNG per `(image, unit)` and `index.csv` into `dir`.
/// Paths in the index are relative to `dir`.
pub fn saliency_report(
    model: &Model,
    ds: &Dataset,
    images: &[usize],
    units: &[CamTarget],
    dir: &Path,
    opts: OverlayOptions,
) -> Result<Vec<IndexRow>> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut rows = Vec::new();
    if !units.is_empty() {
        for &i in images {
            let ex = ds
                .examples
                .get(i)
                .ok_or_else(|| CoreError::Invalid(format!("image {i} out of range for {} examples", ds.len())))?;
            let x = Tensor::new(model.cfg.input_shape.to_vec(), ex.x.clone());
            for m in grad_cam_units(model, &x, units)? {
                let tag = match m.kind {
                    UnitKind::Logit => "logit",
                    _ => "unit",
                };
                let name = format!("img{i:05}_{tag}{:03}.png", m.unit_index);
                let path: PathBuf = dir.join(&name);
                overlay(&ex.x, &m, opts)
                    .save(&path)
                    .map_err(|e| CoreError::format(&path, e.to_string()))?;
                rows.push(IndexRow {
                    image_id: i,
                    unit_index: m.unit_index,
                    unit_kind: m.kind,
                    path: name,
                });
            }
        }
    }
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index).map_err(|e| CoreError::format(&index, e.to_string()))?;
    if rows.is_empty() {
        w.write_record(["image_id", "unit_index", "unit_kind", "path"])
            .map_err(|e| CoreError::format(&index, e.to_string()))?;
    }
    for r in &rows {
        w.serialize(r).map_err(|e| CoreError::format(&index, e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::io(&index, e))?;
    Ok(rows)
}
