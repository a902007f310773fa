//! Datasets, the synthetic concept renderer, splitting, and the on-disk
//! format (PNG images + CSV manifest + `meta.json`).

use std::fs;
use std::path::Path;

use cbm_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TaskKind};
use crate::error::{CoreError, Result};

/// Maps generative concept bits to a task label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// `y = 1` iff `Σ weights_j · bit_j + bias > 0`.
    LinearThreshold { weights: Vec<f64>, bias: f64 },
    /// `y = 1` iff an odd number of bits are set.
    Parity,
    /// `y = table[Σ bit_j · 2^j]`.
    Lookup { table: Vec<usize> },
}

impl Rule {
    pub fn apply(&self, bits: &[bool]) -> usize {
        match self {
            Rule::LinearThreshold { weights, bias } => {
                let s: f64 = weights
                    .iter()
                    .zip(bits)
                    .map(|(w, &b)| if b { *w } else { 0.0 })
                    .sum();
                usize::from(s + bias > 0.0)
            }
            Rule::Parity => bits.iter().filter(|&&b| b).count() % 2,
            Rule::Lookup { table } => {
                let code = bits
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (j, &b)| acc | (usize::from(b) << j));
                table[code]
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Rule::LinearThreshold { .. } | Rule::Parity => 2,
            Rule::Lookup { table } => table.iter().max().map_or(1, |m| m + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_gen_concepts: usize,
    pub grid_side: usize,
    pub rule: Rule,
    pub num_samples: usize,
    /// Indices of the generative concepts exposed as supervised labels, in
    /// label-column order.
    pub label_fraction: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
    /// Pixels per grid cell side.
    #[serde(default = "default_cell_px")]
    pub cell_px: usize,
}

fn default_cell_px() -> usize {
    4
}

impl Default for SyntheticSpec {
    /// The benchmark: six parity concepts, three of them labeled.
    fn default() -> Self {
        SyntheticSpec {
            num_gen_concepts: 6,
            grid_side: 3,
            rule: Rule::Parity,
            num_samples: 2000,
            label_fraction: vec![0, 1, 2],
            noise_std: 0.05,
            seed: 0,
            cell_px: 4,
        }
    }
}

/// RGB colour of each generative concept; every concept gets a distinct
/// colour so detectors can tell them apart after global pooling.
const PALETTE: [[f64; 3]; 9] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.5, 1.0],
];

impl SyntheticSpec {
    pub fn image_side(&self) -> usize {
        self.grid_side * self.cell_px
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.image_side(), self.image_side()]
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            side: self.grid_side,
            cell_px: self.cell_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.num_gen_concepts;
        let fail = |m: String| Err(CoreError::InvalidSpec(m));
        if self.num_samples == 0 {
            return fail("num_samples must be positive".into());
        }
        if g == 0 {
            return fail("num_gen_concepts must be positive".into());
        }
        if g > self.grid_side * self.grid_side {
            return fail(format!(
                "{g} concepts exceed the {0}x{0} grid capacity",
                self.grid_side
            ));
        }
        if g > PALETTE.len() {
            return fail(format!("at most {} concepts are supported", PALETTE.len()));
        }
        if self.cell_px < 3 {
            return fail("cell_px must be at least 3".into());
        }
        let mut seen = vec![false; g];
        for &j in &self.label_fraction {
            if j >= g {
                return fail(format!("label index {j} out of range for {g} concepts"));
            }
            if std::mem::replace(&mut seen[j], true) {
                return fail(format!("label index {j} listed twice"));
            }
        }
        match &self.rule {
            Rule::LinearThreshold { weights, bias } => {
                if weights.len() != g {
                    return fail(format!("{} weights for {g} concepts", weights.len()));
                }
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return fail("linear_threshold coefficients must be finite".into());
                }
            }
            Rule::Parity => {}
            Rule::Lookup { table } => {
                if table.len() != 1 << g {
                    return fail(format!("lookup table needs {} entries, has {}", 1 << g, table.len()));
                }
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail("noise_std must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Checks that a model can be trained on data from this spec.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.d_ex > 0 && self.label_fraction.is_empty() {
            return Err(CoreError::InvalidSpec(
                "model expects supervised concepts but label_fraction is empty".into(),
            ));
        }
        if cfg.d_ex > self.label_fraction.len() {
            return Err(CoreError::InvalidSpec(format!(
                "model has d_ex = {} but only {} concepts are labeled",
                cfg.d_ex,
                self.label_fraction.len()
            )));
        }
        if cfg.input_shape != self.input_shape() {
            return Err(CoreError::InvalidSpec(format!(
                "model input {:?} differs from rendered images {:?}",
                cfg.input_shape,
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Draws one image for the given concept bits.
    pub fn render(&self, bits: &[bool], rng: &mut impl Rng) -> Vec<f64> {
        let side = self.image_side();
        let mut img = vec![0.0; 3 * side * side];
        let layout = self.layout();
        for (j, &on) in bits.iter().enumerate() {
            if !on {
                continue;
            }
            let (y0, x0) = layout.cell_origin(j);
            let colour = PALETTE[j];
            for y in y0 + 1..y0 + self.cell_px - 1 {
                for x in x0 + 1..x0 + self.cell_px - 1 {
                    for (ch, &c) in colour.iter().enumerate() {
                        img[(ch * side + y) * side + x] = c;
                    }
                }
            }
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("validated noise_std");
            for v in img.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
        img
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub side: usize,
    pub cell_px: usize,
}

impl GridLayout {
    /// Top-left pixel of concept `j`'s cell (row-major cell order).
    pub fn cell_origin(&self, j: usize) -> (usize, usize) {
        ((j / self.side) * self.cell_px, (j % self.side) * self.cell_px)
    }

    pub fn cell_contains(&self, j: usize, y: usize, x: usize) -> bool {
        let (y0, x0) = self.cell_origin(j);
        (y0..y0 + self.cell_px).contains(&y) && (x0..x0 + self.cell_px).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Multi(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `channels × height × width`, row-major, values in `[0, 1]`.
    pub x: Vec<f64>,
    /// Supervised concept labels in `[0, 1]`.
    pub c_sup: Vec<f64>,
    pub y: Label,
    /// All generative concept bits, when known.
    pub gen_concepts: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub input_shape: [usize; 3],
    pub num_targets: usize,
    pub task_kind: TaskKind,
    /// Generative concept index of each `c_sup` column, when known.
    pub labeled: Vec<usize>,
    /// Generative concepts used as ground truth for probe and correlation
    /// metrics. Unchanged when supervision is restricted.
    pub reference: Vec<usize>,
    pub layout: Option<GridLayout>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub meta: DatasetMeta,
    pub examples: Vec<Example>,
}

/// Targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `[batch, num_targets]` in `[0, 1]`.
    Multi(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Multi(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[batch, channels, height, width]`
    pub x: Tensor,
    pub targets: Targets,
    /// `[batch, d_ex]`
    pub c_sup: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn d_ex(&self) -> usize {
        self.examples.first().map_or(self.meta.labeled.len(), |e| e.c_sup.len())
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.meta.input_shape;
        let d_ex = self.d_ex();
        let mut x = Vec::with_capacity(indices.len() * c * h * w);
        let mut c_sup = Vec::with_capacity(indices.len() * d_ex);
        for &i in indices {
            x.extend_from_slice(&self.examples[i].x);
            c_sup.extend_from_slice(&self.examples[i].c_sup);
        }
        let targets = match self.meta.task_kind {
            TaskKind::Multiclass => Targets::Classes(
                indices
                    .iter()
                    .map(|&i| match &self.examples[i].y {
                        Label::Class(k) => *k,
                        Label::Multi(_) => panic!("multilabel example in multiclass dataset"),
                    })
                    .collect(),
            ),
            TaskKind::Multilabel => {
                let mut data = Vec::with_capacity(indices.len() * self.meta.num_targets);
                for &i in indices {
                    match &self.examples[i].y {
                        Label::Multi(v) => data.extend_from_slice(v),
                        Label::Class(_) => panic!("multiclass example in multilabel dataset"),
                    }
                }
                Targets::Multi(Tensor::new(vec![indices.len(), self.meta.num_targets], data))
            }
        };
        Batch {
            x: Tensor::new(vec![indices.len(), c, h, w], x),
            targets,
            c_sup: Tensor::new(vec![indices.len(), d_ex], c_sup),
        }
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.examples
            .iter()
            .map(|e| match e.y {
                Label::Class(k) => Some(k),
                Label::Multi(_) => None,
            })
            .collect()
    }

    /// Ground-truth concepts used for probe and correlation metrics:
    /// the reference generative concepts when available, else `c_sup`.
    pub fn reference_concepts(&self) -> Tensor {
        let use_gen = !self.meta.reference.is_empty()
            && self.examples.iter().all(|e| e.gen_concepts.is_some());
        let cols = if use_gen { self.meta.reference.len() } else { self.d_ex() };
        let mut data = Vec::with_capacity(self.len() * cols);
        for e in &self.examples {
            match (&e.gen_concepts, use_gen) {
                (Some(g), true) => data.extend(self.meta.reference.iter().map(|&j| g[j])),
                _ => data.extend_from_slice(&e.c_sup),
            }
        }
        Tensor::new(vec![self.len(), cols], data)
    }

    /// Keeps only the listed `c_sup` columns (in the given order).
    pub fn with_supervised(&self, cols: &[usize]) -> Result<Dataset> {
        let d_ex = self.d_ex();
        if let Some(&bad) = cols.iter().find(|&&c| c >= d_ex) {
            return Err(CoreError::Invalid(format!("concept column {bad} out of range for {d_ex}")));
        }
        let mut out = self.clone();
        for e in &mut out.examples {
            e.c_sup = cols.iter().map(|&c| e.c_sup[c]).collect();
        }
        if self.meta.labeled.len() == d_ex {
            out.meta.labeled = cols.iter().map(|&c| self.meta.labeled[c]).collect();
        } else {
            out.meta.labeled.clear();
        }
        Ok(out)
    }

    fn subset(&self, split: Split, indices: &[usize]) -> Dataset {
        Dataset {
            split,
            meta: self.meta.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

/// In-place Fisher–Yates: for `i` from `n-1` down to `1`, swap `i` with a
/// uniform `j ∈ [0, i]`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.num_gen_concepts;
    let examples = (0..spec.num_samples)
        .map(|_| {
            let bits: Vec<bool> = (0..g).map(|_| rng.gen::<bool>()).collect();
            let x = spec.render(&bits, &mut rng);
            let gen: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Example {
                x,
                c_sup: spec.label_fraction.iter().map(|&j| gen[j]).collect(),
                y: Label::Class(spec.rule.apply(&bits)),
                gen_concepts: Some(gen),
            }
        })
        .collect();
    Ok(Dataset {
        split: Split::All,
        meta: DatasetMeta {
            input_shape: spec.input_shape(),
            num_targets: spec.rule.num_classes(),
            task_kind: TaskKind::Multiclass,
            labeled: spec.label_fraction.clone(),
            reference: spec.label_fraction.clone(),
            layout: Some(spec.layout()),
        },
        examples,
    })
}

/// Deterministic three-way split. Sizes are `round(f·N)` for train and
/// validation, with the remainder going to test.
pub fn split_dataset(d: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CoreError::Invalid(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = d.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(CoreError::Invalid(format!(
            "{n} examples are too few for three nonempty splits"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    fisher_yates(&mut idx, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        d.subset(Split::Train, &idx[..n_train]),
        d.subset(Split::Val, &idx[n_train..n_train + n_val]),
        d.subset(Split::Test, &idx[n_train + n_val..]),
    ))
}

const MANIFEST: &str = "manifest.csv";
const META: &str = "meta.json";

/// Writes `images/*.png`, `manifest.csv` and `meta.json` under `dir`.
/// Pixels are quantized to 8 bits.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    let [c, h, w] = d.meta.input_shape;
    if c != 1 && c != 3 {
        return Err(CoreError::Invalid(format!("cannot store {c}-channel images as PNG")));
    }
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CoreError::io(&img_dir, e))?;

    let manifest_path = dir.join(MANIFEST);
    let mut wtr = csv::Writer::from_path(&manifest_path)
        .map_err(|e| CoreError::format(&manifest_path, e.to_string()))?;
    let mut header = vec!["path".to_string()];
    match d.meta.task_kind {
        TaskKind::Multiclass => header.push("y".into()),
        TaskKind::Multilabel => header.extend((0..d.meta.num_targets).map(|t| format!("y_{t}"))),
    }
    header.extend((0..d.d_ex()).map(|j| format!("c_{j}")));
    let g = d.examples.first().and_then(|e| e.gen_concepts.as_ref()).map_or(0, |v| v.len());
    header.extend((0..g).map(|j| format!("g_{j}")));
    wtr.write_record(&header)
        .map_err(|e| CoreError::format(&manifest_path, e.to_string()))?;

    for (i, e) in d.examples.iter().enumerate() {
        let rel = format!("images/img_{i:05}.png");
        let path = dir.join(&rel);
        let bytes: Vec<u8> = (0..h * w)
            .flat_map(|p| (0..c).map(move |ch| (ch, p)))
            .map(|(ch, p)| (e.x[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if c == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(&path, &bytes, w as u32, h as u32, color)
            .map_err(|err| CoreError::format(&path, err.to_string()))?;

        let mut rec = vec![rel];
        match &e.y {
            Label::Class(k) => rec.push(k.to_string()),
            Label::Multi(v) => rec.extend(v.iter().map(|x| x.to_string())),
        }
        rec.extend(e.c_sup.iter().map(|x| x.to_string()));
        if let Some(gv) = &e.gen_concepts {
            rec.extend(gv.iter().map(|x| x.to_string()));
        }
        wtr.write_record(&rec)
            .map_err(|err| CoreError::format(&manifest_path, err.to_string()))?;
    }
    wtr.flush().map_err(|e| CoreError::io(&manifest_path, e))?;

    let meta_path = dir.join(META);
    let json = serde_json::to_string_pretty(&d.meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
    let [c, h, w] = meta.input_shape;

    let manifest_path = dir.join(MANIFEST);
    let mut rdr = csv::Reader::from_path(&manifest_path)
        .map_err(|e| CoreError::format(&manifest_path, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::format(&manifest_path, e.to_string()))?
        .clone();
    let cols = |prefix: &str| -> Vec<usize> {
        headers
            .iter()
            .enumerate()
            .filter(|(_, name)| {
                name.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|ch| ch.is_ascii_digit()))
            })
            .map(|(i, _)| i)
            .collect()
    };
    let (c_cols, g_cols, y_cols) = (cols("c_"), cols("g_"), cols("y_"));
    let y_col = headers.iter().position(|name| name == "y");
    let path_col = headers
        .iter()
        .position(|name| name == "path")
        .ok_or_else(|| CoreError::format(&manifest_path, "missing `path` column"))?;

    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| CoreError::format(&manifest_path, format!("bad number `{s}`")))
    };

    let mut examples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CoreError::format(&manifest_path, e.to_string()))?;
        let img_path = dir.join(&rec[path_col]);
        let img = image::open(&img_path).map_err(|e| CoreError::format(&img_path, e.to_string()))?;
        if img.width() as usize != w || img.height() as usize != h {
            return Err(CoreError::format(&img_path, "image size differs from meta.json"));
        }
        let raw: Vec<u8> = if c == 3 {
            img.to_rgb8().into_raw()
        } else {
            img.to_luma8().into_raw()
        };
        let mut x = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                x[ch * h * w + p] = f64::from(raw[p * c + ch]) / 255.0;
            }
        }
        let y = match meta.task_kind {
            TaskKind::Multiclass => {
                let col = y_col.ok_or_else(|| CoreError::format(&manifest_path, "missing `y` column"))?;
                let k: usize = rec[col]
                    .parse()
                    .map_err(|_| CoreError::format(&manifest_path, format!("bad class `{}`", &rec[col])))?;
                Label::Class(k)
            }
            TaskKind::Multilabel => Label::Multi(y_cols.iter().map(|&i| num(&rec[i])).collect::<Result<_>>()?),
        };
        let c_sup = c_cols.iter().map(|&i| num(&rec[i])).collect::<Result<Vec<_>>>()?;
        let gen = if g_cols.is_empty() {
            None
        } else {
            Some(g_cols.iter().map(|&i| num(&rec[i])).collect::<Result<Vec<_>>>()?)
        };
        examples.push(Example {
            x,
            c_sup,
            y,
            gen_concepts: gen,
        });
    }
    if examples.is_empty() {
        return Err(CoreError::format(&manifest_path, "dataset is empty"));
    }
    Ok(Dataset {
        split: Split::All,
        meta,
        examples,
    })
}
