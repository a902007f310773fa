//! Joint training: negative pairs, optimizers, the epoch loop with
//! validation-based checkpoint selection, and the hyperparameter grid.

use cbm_autograd::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, OptimizerKind};
use crate::data::{fisher_yates, Batch, Dataset};
use crate::error::{CoreError, Result};
use crate::evaluation::{mean_two_sigma, validation_metric};
use crate::losses::{combined_loss, jacobian_count, LossBreakdown, Weights};
use crate::nets::{Model, ParamGroup};

/// Uniform random derangement of `0..n` by rejection: draw Fisher–Yates
/// permutations until one has no fixed point.
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(CoreError::Invalid(format!("negative pairs need a batch of at least 2, got {n}")));
    }
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        fisher_yates(&mut perm, rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Matched and mismatched discriminator inputs.
pub struct NegativePair<'t> {
    /// `[c(x_i); h(x_i)]`
    pub z: Var<'t>,
    /// `[c(x_i); h(x_σ(i))]`
    pub z_fake: Var<'t>,
}

pub fn make_negative_pairs<'t>(c: Var<'t>, h: Var<'t>, sigma: &[usize]) -> Result<NegativePair<'t>> {
    let n = c.shape()[0];
    if n < 2 || sigma.len() != n || h.shape()[0] != n {
        return Err(CoreError::Invalid(format!(
            "negative pairs need matching batches of at least 2 (got {n} concepts, {} features, {} indices)",
            h.shape()[0],
            sigma.len()
        )));
    }
    let tape = c.tape();
    Ok(NegativePair {
        z: tape.concat_cols(&[c, h]),
        z_fake: tape.concat_cols(&[c, h.gather_rows(sigma)]),
    })
}

/// SGD or Adam (β = (0.9, 0.999), ε = 1e-8, bias-corrected) over a fixed
/// list of parameter indices.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub params: Vec<usize>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model, params: Vec<usize>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|&i| vec![0.0; model.params[i].value.numel()])
            .collect();
        Optimizer {
            kind,
            lr,
            params,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `grads[j]` belongs to `self.params[j]`.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t as i32), 1.0 - B2.powi(self.t as i32));
        for (j, &pi) in self.params.iter().enumerate() {
            let p = model.params[pi].value.data_mut();
            let g = grads[j].data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[j], &mut self.v[j]);
                    for k in 0..p.len() {
                        m[k] = B1 * m[k] + (1.0 - B1) * g[k];
                        v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
                        p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Indices of the parameters the optimizer updates under `cfg`.
pub fn trainable_params(model: &Model) -> Vec<usize> {
    let cfg = &model.cfg;
    model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| match p.group {
            ParamGroup::Discriminator => cfg.alpha > 0.0,
            ParamGroup::Backbone => !cfg.freeze_backbone,
            _ => true,
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the step breakdowns.
    pub mean_loss: LossBreakdown,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub best_val_metric: f64,
    pub best_epoch: Option<usize>,
    pub steps: Vec<StepRecord>,
    pub history: Vec<EpochRecord>,
    /// Stability-penalty evaluations performed.
    pub jacobian_evals: usize,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            rng_seed: seed,
            rng_word_pos: 0,
            best_val_metric: f64::INFINITY,
            best_epoch: None,
            steps: Vec::new(),
            history: Vec::new(),
            jacobian_evals: 0,
        }
    }
}

/// One update on `batch`; returns the breakdown evaluated before it.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let cfg = model.cfg.clone();
    let w = Weights {
        alpha: cfg.alpha,
        beta: cfg.beta,
        lambda: cfg.lambda,
    };
    let sigma = if cfg.alpha > 0.0 && cfg.uses_discriminator() {
        Some(derangement(batch.len(), rng)?)
    } else {
        None
    };
    let (grads, breakdown, bn) = {
        let tape = Tape::new();
        let b = model.bind(&tape);
        let x = tape.leaf(batch.x.clone());
        let fwd = model.forward(&b, x, true)?;
        let terms = combined_loss(model, &b, &fwd, batch, sigma.as_deref(), w)?;
        let bd = terms.breakdown;
        for (term, v) in [
            ("task", bd.task),
            ("concept", bd.concept),
            ("dis", bd.dis),
            ("theta_reg", bd.theta_reg),
            ("total", bd.total),
        ] {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { term, epoch, step });
            }
        }
        let wrt: Vec<Var> = opt.params.iter().map(|&i| b.vars[i]).collect();
        let grads = tape.grad(terms.total, &wrt)?;
        let grads: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
        (grads, bd, fwd.bn_batch)
    };
    opt.step(model, &grads);
    model.update_bn(&bn, batch.len());
    Ok(breakdown)
}

fn mean_breakdown(steps: &[StepRecord]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for s in steps {
        m.task += s.loss.task / n;
        m.concept += s.loss.concept / n;
        m.dis += s.loss.dis / n;
        m.theta_reg += s.loss.theta_reg / n;
        m.total += s.loss.total / n;
    }
    m
}

/// Trains from a fresh initialization seeded by `cfg.seed`. Returns the
/// parameters with the lowest validation metric, latest epoch among ties.
pub fn train(train: &Dataset, val: &Dataset, cfg: &ModelConfig) -> Result<(Model, TrainState)> {
    train_with_log(train, val, cfg, &mut |_| {})
}

/// As [`train`], calling `on_step` after every update.
pub fn train_with_log(
    train: &Dataset,
    val: &Dataset,
    cfg: &ModelConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(Model, TrainState)> {
    cfg.validate().map_err(CoreError::InvalidConfig)?;
    if train.len() < 2 {
        return Err(CoreError::Invalid(format!("training split has {} examples", train.len())));
    }
    if train.d_ex() != cfg.d_ex && cfg.model != crate::config::ModelKind::Msenn {
        return Err(CoreError::Invalid(format!(
            "dataset has {} supervised concepts, config expects {}",
            train.d_ex(),
            cfg.d_ex
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model, trainable_params(&model));
    let mut state = TrainState::new(cfg.seed);
    let mut best: Option<Model> = None;
    let counter_start = jacobian_count();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        fisher_yates(&mut order, &mut rng);
        let first_step = state.steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            // Batch statistics and negative pairs need two examples.
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.batch(chunk);
            let loss = train_step(&mut model, &mut opt, &batch, &mut rng, epoch, state.step)?;
            let rec = StepRecord {
                epoch,
                step: state.step,
                loss,
            };
            on_step(&rec);
            state.steps.push(rec);
            state.step += 1;
        }
        let val_metric = validation_metric(&model, val)?;
        state.history.push(EpochRecord {
            epoch,
            mean_loss: mean_breakdown(&state.steps[first_step..]),
            val_metric,
        });
        if val_metric <= state.best_val_metric {
            state.best_val_metric = val_metric;
            state.best_epoch = Some(epoch);
            best = Some(model.clone());
        }
        state.epoch = epoch + 1;
        log::debug!("epoch {epoch}: val metric {val_metric:.4}");
    }
    state.rng_word_pos = rng.get_word_pos();
    state.jacobian_evals = jacobian_count() - counter_start;
    Ok((best.unwrap_or(model), state))
}

/// Hyperparameter grid; points are enumerated optimizer-major, then lr,
/// lambda, alpha, beta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            lrs: vec![0.001, 0.01],
            lambdas: vec![0.1, 0.5, 1.0, 2.0, 3.0],
            alphas: vec![0.1, 0.5, 1.0],
            betas: vec![0.001, 0.01],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            optimizer: self.optimizer,
            lr: self.lr,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            ..base.clone()
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &optimizer in &self.optimizers {
            for &lr in &self.lrs {
                for &lambda in &self.lambdas {
                    for &alpha in &self.alphas {
                        for &beta in &self.betas {
                            out.push(GridPoint {
                                optimizer,
                                lr,
                                lambda,
                                alpha,
                                beta,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub seeds: Vec<u64>,
    pub val_metrics: Vec<f64>,
    pub mean: f64,
    /// Two sample standard deviations.
    pub two_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub seeds: usize,
    /// Upper bound on `points × seeds`.
    pub max_runs: usize,
    pub jobs: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            seeds: 3,
            max_runs: 1000,
            jobs: 1,
        }
    }
}

/// Trains every grid point with seeds `base.seed + s`, `s < opts.seeds`,
/// and ranks points by mean validation metric (ascending, stable).
pub fn run_grid(
    train_set: &Dataset,
    val: &Dataset,
    grid: &GridSpec,
    base: &ModelConfig,
    opts: &GridOptions,
) -> Result<Vec<GridRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(CoreError::Invalid("empty grid".into()));
    }
    let requested = points.len() * opts.seeds;
    if requested > opts.max_runs {
        return Err(CoreError::ResourceCap {
            requested,
            limit: opts.max_runs,
        });
    }
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| (0..opts.seeds as u64).map(move |s| (p, s)))
        .collect();
    let run = |&(p, s): &(usize, u64)| -> Result<f64> {
        let cfg = ModelConfig {
            seed: base.seed + s,
            ..points[p].apply(base)
        };
        let (_, state) = train(train_set, val, &cfg)?;
        Ok(state.best_val_metric)
    };
    let results: Vec<Result<f64>> = if opts.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| CoreError::Invalid(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut rows: Vec<GridRow> = points
        .iter()
        .map(|&point| GridRow {
            point,
            seeds: Vec::new(),
            val_metrics: Vec::new(),
            mean: 0.0,
            two_sigma: 0.0,
        })
        .collect();
    for (&(p, s), r) in jobs.iter().zip(results) {
        rows[p].seeds.push(base.seed + s);
        rows[p].val_metrics.push(r?);
    }
    for row in &mut rows {
        let (m, two) = mean_two_sigma(&row.val_metrics);
        row.mean = m;
        row.two_sigma = two;
    }
    rows.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneName, ModelKind};
    use crate::data::{generate_synthetic_dataset, split_dataset, Rule, SyntheticSpec};
    use rand::Rng;

    /// Independent reimplementation: swap-based shuffle from the top index
    /// down, retried while any position maps to itself.
    fn reference_derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        loop {
            let mut p: Vec<usize> = (0..n).collect();
            let mut i = n - 1;
            while i > 0 {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
                i -= 1;
            }
            if !p.iter().enumerate().any(|(i, &v)| i == v) {
                return p;
            }
        }
    }

    #[test]
    fn derangement_of_two_is_the_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(derangement(2, &mut rng).unwrap(), vec![1, 0]);
        }
        assert!(derangement(1, &mut rng).is_err());
    }

    #[test]
    fn derangement_matches_reference_sampler() {
        for seed in 0..20 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..5 {
                let s = derangement(4, &mut a).unwrap();
                assert!(s.iter().enumerate().all(|(i, &v)| i != v));
                assert_eq!(s, reference_derangement(4, &mut b));
            }
        }
    }

    #[test]
    fn negative_pairs_share_concepts() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let h = tape.leaf(Tensor::from_rows(&[vec![10.0, 11.0], vec![20.0, 21.0], vec![30.0, 31.0]]));
        let p = make_negative_pairs(c, h, &[2, 0, 1]).unwrap();
        assert_eq!(p.z.value().row(0), &[1.0, 10.0, 11.0]);
        assert_eq!(p.z_fake.value().row(0), &[1.0, 30.0, 31.0]);
        assert_eq!(p.z_fake.value().row(1), &[2.0, 10.0, 11.0]);
        assert!(make_negative_pairs(c.slice_cols(0, 1).gather_rows(&[0]), h.gather_rows(&[0]), &[0]).is_err());
    }

    #[test]
    fn default_grid_has_120_points() {
        let pts = GridSpec::default().points();
        assert_eq!(pts.len(), 120);
        assert_eq!(pts[0].optimizer, OptimizerKind::Sgd);
        assert_eq!((pts[1].alpha, pts[1].beta), (0.1, 0.01));
    }

    fn tiny() -> (Dataset, Dataset, ModelConfig) {
        let spec = SyntheticSpec {
            num_gen_concepts: 2,
            grid_side: 2,
            rule: Rule::LinearThreshold {
                weights: vec![1.0, 1.0],
                bias: -0.5,
            },
            num_samples: 40,
            label_fraction: vec![0],
            noise_std: 0.05,
            seed: 1,
            cell_px: 3,
        };
        let d = generate_synthetic_dataset(&spec).unwrap();
        let (tr, va, _) = split_dataset(&d, (0.6, 0.2, 0.2), 0).unwrap();
        let cfg = ModelConfig {
            d_ex: 1,
            d_im: 2,
            k: 1,
            backbone: BackboneName::Conv,
            backbone_widths: vec![3, 4],
            input_shape: [3, 6, 6],
            dis_hidden: 4,
            batch_size: 8,
            epochs: 2,
            beta: 0.01,
            ..ModelConfig::default()
        };
        (tr, va, cfg)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (tr, _, cfg) = tiny();
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = ModelConfig {
                lr: 0.0,
                optimizer,
                ..cfg.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut m = Model::new(&cfg, &mut rng).unwrap();
            let before = m.params.clone();
            let mut opt = Optimizer::new(optimizer, 0.0, &m, trainable_params(&m));
            let idx: Vec<usize> = (0..8).collect();
            let loss = train_step(&mut m, &mut opt, &tr.batch(&idx), &mut rng, 0, 0).unwrap();
            assert!(loss.total > 0.0);
            assert_eq!(m.params, before);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, cfg) = tiny();
        let (m1, s1) = train(&tr, &va, &cfg).unwrap();
        let (m2, s2) = train(&tr, &va, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (tr, va, cfg) = tiny();
        let cfg = ModelConfig { epochs: 0, ..cfg };
        let (m, s) = train(&tr, &va, &cfg).unwrap();
        let fresh = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(m, fresh);
        assert!(s.history.is_empty() && s.steps.is_empty());
    }

    #[test]
    fn zero_alpha_freezes_discriminator() {
        let (tr, va, cfg) = tiny();
        let cfg = ModelConfig { alpha: 0.0, ..cfg };
        let fresh = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let (m, s) = train(&tr, &va, &cfg).unwrap();
        assert!(!s.steps.is_empty());
        for (a, b) in fresh.params.iter().zip(&m.params) {
            if a.group == ParamGroup::Discriminator {
                assert_eq!(a, b);
            }
        }
        assert!(s.steps.iter().all(|r| r.loss.dis == 0.0));
    }

    #[test]
    fn zero_beta_skips_jacobian() {
        let (tr, va, cfg) = tiny();
        let (_, s) = train(&tr, &va, &ModelConfig { beta: 0.0, ..cfg.clone() }).unwrap();
        assert_eq!(s.jacobian_evals, 0);
        let (_, s) = train(&tr, &va, &cfg).unwrap();
        assert_eq!(s.jacobian_evals, s.steps.len());
    }

    #[test]
    fn frozen_backbone_is_untouched() {
        let (tr, va, cfg) = tiny();
        let cfg = ModelConfig {
            freeze_backbone: true,
            ..cfg
        };
        let fresh = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let (m, _) = train(&tr, &va, &cfg).unwrap();
        let mut changed = false;
        for (a, b) in fresh.params.iter().zip(&m.params) {
            if a.group == ParamGroup::Backbone {
                assert_eq!(a, b);
            } else {
                changed |= a != b;
            }
        }
        assert!(changed);
    }

    #[test]
    fn cbm_trains_without_discriminator() {
        let (tr, va, cfg) = tiny();
        let cfg = ModelConfig {
            model: ModelKind::Cbm,
            d_im: 0,
            k: 0,
            ..cfg
        };
        let (_, s) = train(&tr, &va, &cfg).unwrap();
        assert!(s.steps.iter().all(|r| r.loss.dis == 0.0 && r.loss.theta_reg == 0.0));
    }

    #[test]
    fn singleton_grid_runs_every_seed() {
        let (tr, va, cfg) = tiny();
        let grid = GridSpec {
            optimizers: vec![OptimizerKind::Adam],
            lrs: vec![0.01],
            lambdas: vec![1.0],
            alphas: vec![0.1],
            betas: vec![0.001],
        };
        let cfg = ModelConfig { epochs: 1, ..cfg };
        let rows = run_grid(&tr, &va, &grid, &cfg, &GridOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].seeds, vec![0, 1, 2]);
        let capped = GridOptions {
            max_runs: 2,
            ..GridOptions::default()
        };
        assert!(matches!(
            run_grid(&tr, &va, &grid, &cfg, &capped),
            Err(CoreError::ResourceCap { requested: 3, limit: 2 })
        ));
    }
}
