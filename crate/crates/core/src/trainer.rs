//! Training loops for the codecs, the generator and the evaluation extractor,
//! plus the finite-difference gradient harness.

use partcoord_tape::{clip_global_norm, AdamW, AdamWConfig, Gradients, Graph, Matrix, ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, PartCodec};
use crate::coordinator::{PartCoordStack, PartTokenGrid, StackConfig, Termination, TextCondition};
use crate::error::{Error, Result};
use crate::metrics::{ContrastiveExtractor, ExtractorConfig};
use crate::partition::{split, Motion, PartId, PartMotion, PartitionScheme};
use crate::rng::rng_for;

/// Piecewise-constant learning rate: `initial` before `drop_step`, `final_lr` from it on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub drop_step: u64,
    pub final_lr: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.drop_step {
            self.initial
        } else {
            self.final_lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    /// Stage-1 schedule at full length: 2e-4 then 1e-5 from step 200K, batch 256.
    pub fn codec_full() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            schedule: LrSchedule { initial: 2e-4, drop_step: 200_000, final_lr: 1e-5 },
            batch_size: 256,
            total_steps: 300_000,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }

    /// Stage-2 schedule at full length: 1e-4 then 5e-6 from step 150K, batch 128.
    pub fn generator_full() -> Self {
        OptimizerConfig {
            beta1: 0.5,
            beta2: 0.99,
            schedule: LrSchedule { initial: 1e-4, drop_step: 150_000, final_lr: 5e-6 },
            batch_size: 128,
            total_steps: 300_000,
            ..Self::codec_full()
        }
    }

    /// Desk-length variant: `steps` steps with the drop at 60% of them.
    pub fn desk(mut self, steps: u64) -> Self {
        self.total_steps = steps;
        self.schedule.drop_step = steps * 3 / 5;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(s.initial > 0.0 && s.final_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.total_steps > 0 && s.drop_step >= self.total_steps {
            return bad("lr drop step must be below total_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub token_corrupt_prob: f64,
    pub part_mask_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { token_corrupt_prob: 0.1, part_mask_prob: 0.15 }
    }
}

impl AugmentationConfig {
    pub const OFF: AugmentationConfig = AugmentationConfig { token_corrupt_prob: 0.0, part_mask_prob: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for p in [self.token_corrupt_prob, self.part_mask_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Teacher-forcing input for `grid`: each (part, position) token becomes MASK
/// with probability `part_mask_prob`, otherwise a uniform code with probability
/// `token_corrupt_prob`. Two uniforms are drawn per token regardless, so the
/// random stream does not depend on the outcomes.
pub fn augment(grid: &PartTokenGrid, aug: &AugmentationConfig, vocab: usize, rng: &mut impl Rng) -> PartTokenGrid {
    let parts = grid
        .parts
        .iter()
        .map(|p| {
            p.iter()
                .map(|&t| {
                    let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                    let replacement = rng.gen_range(0..vocab);
                    if u < aug.part_mask_prob {
                        vocab + 1
                    } else if v < aug.token_corrupt_prob {
                        replacement
                    } else {
                        t
                    }
                })
                .collect()
        })
        .collect();
    PartTokenGrid { parts }
}

/// A `(step, value)` series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub name: String,
    pub points: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn new(name: impl Into<String>) -> Self {
        LossCurve { name: name.into(), points: Vec::new() }
    }

    pub fn push(&mut self, step: u64, value: f64) {
        self.points.push((step, value));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,value\n");
        for (step, v) in &self.points {
            s.push_str(&format!("{step},{v}\n"));
        }
        s
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

fn check_finite(v: f64, what: impl FnOnce() -> String, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what(), step: step as usize })
    }
}

fn finish_step(store: &mut ParamStore, opt: &mut AdamW, mut grads: Gradients, cfg: &OptimizerConfig, step: u64) {
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    opt.step(store, &grads, cfg.schedule.lr_at(step));
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqvaeOptions {
    /// Frames per training window; a multiple of the downsampling rate.
    pub window: usize,
    /// Optimizer steps between dead-code resets; 0 disables resets.
    pub reset_every: u64,
    pub reset_threshold: u64,
    /// Curve sampling interval in steps.
    pub log_every: u64,
}

impl Default for VqvaeOptions {
    fn default() -> Self {
        VqvaeOptions { window: 64, reset_every: 256, reset_threshold: 1, log_every: 10 }
    }
}

pub struct CodecRun {
    pub codec: PartCodec,
    /// Final optimizer state, saved alongside the codec checkpoint.
    pub optimizer: AdamW,
    /// The codec at step 0: codebook seeded, no update applied yet.
    pub initial: PartCodec,
    /// Total loss and reconstruction term per logged step.
    pub loss: LossCurve,
    pub reconstruction: LossCurve,
}

/// Mean squared reconstruction error of `codec` over whole part sequences.
pub fn reconstruction_mse(codec: &PartCodec, parts: &[PartMotion]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in parts {
        let r = codec.reconstruct(p)?;
        sum += r.features.zip_map(&p.features, |a, b| (a - b) * (a - b)).sum();
        n += p.features.len();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    Ok(sum / n as f64)
}

fn sample_windows(parts: &[PartMotion], batch: usize, window: usize, rng: &mut impl Rng) -> Matrix {
    let cols = parts[0].features.cols();
    let mut out = Matrix::zeros(batch * window, cols);
    for b in 0..batch {
        let p = &parts[rng.gen_range(0..parts.len())];
        let start = rng.gen_range(0..=p.frames() - window);
        for r in 0..window {
            out.row_mut(b * window + r).copy_from_slice(p.features.row(start + r));
        }
    }
    out
}

/// Trains one part's codec on its part sequences.
pub fn train_codec(
    part: PartId,
    parts: &[PartMotion],
    config: CodecConfig,
    opt_cfg: &OptimizerConfig,
    opts: &VqvaeOptions,
) -> Result<CodecRun> {
    opt_cfg.validate()?;
    config.validate()?;
    if parts.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if opts.window == 0 || opts.window % config.downsample != 0 {
        return Err(Error::Config(format!(
            "window {} is not a positive multiple of {}",
            opts.window, config.downsample
        )));
    }
    if let Some(p) = parts.iter().find(|p| p.frames() < opts.window) {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} frames is shorter than the window {}",
            p.frames(),
            opts.window
        )));
    }
    let tag = format!("codec/{}", part.name());
    let mut codec = PartCodec::new(part, config, &mut rng_for(opt_cfg.seed, &format!("{tag}/init"), 0))?;
    let mut rng = rng_for(opt_cfg.seed, &format!("{tag}/data"), 0);
    let mut opt = AdamW::new(&codec.params, opt_cfg.adamw());
    let mut loss_curve = LossCurve::new(format!("{}.loss", part.name()));
    let mut recon_curve = LossCurve::new(format!("{}.reconstruction", part.name()));
    let (b, w) = (opt_cfg.batch_size, opts.window);
    let mut initial = None;
    for step in 0..opt_cfg.total_steps {
        let batch = sample_windows(parts, b, w, &mut rng);
        if step == 0 {
            // Seed the codebook from the first batch's encoder outputs.
            let mut g = Graph::new(&codec.params);
            let x = g.constant(batch.clone());
            let e = codec.encode_graph(&mut g, x, b, w)?;
            let lat = g.value(e).clone();
            let mut book = codec.codebook();
            for j in 0..book.size() {
                let r = rng.gen_range(0..lat.rows());
                book.codes.row_mut(j).copy_from_slice(lat.row(r));
            }
            codec.set_codebook(book)?;
            initial = Some(codec.clone());
        }
        let (grads, l, indices, latents) = {
            let mut g = Graph::new(&codec.params);
            let fwd = codec.forward_loss(&mut g, &batch, b, w, None)?;
            let l = fwd.loss.values(&g);
            let grads = g.backward(fwd.loss.total).into_params();
            (grads, l, fwd.indices, g.value(fwd.latents).clone())
        };
        check_finite(l.total, || format!("{} codec loss", part.name()), step)?;
        finish_step(&mut codec.params, &mut opt, grads, opt_cfg, step);
        codec.record_usage(&indices);
        if opts.reset_every > 0 && (step + 1) % opts.reset_every == 0 {
            codec.reset_dead_codes(&latents, opts.reset_threshold, &mut rng)?;
        }
        if step % opts.log_every.max(1) == 0 || step + 1 == opt_cfg.total_steps {
            loss_curve.push(step, l.total);
            recon_curve.push(step, l.reconstruction);
        }
    }
    let initial = initial.unwrap_or_else(|| codec.clone());
    Ok(CodecRun { codec, optimizer: opt, initial, loss: loss_curve, reconstruction: recon_curve })
}

/// Trains all parts' codecs independently. `configs` is indexed by canonical part order.
pub fn train_vqvae(
    motions: &[Motion],
    scheme: &PartitionScheme,
    configs: &[CodecConfig],
    opt_cfg: &OptimizerConfig,
    opts: &VqvaeOptions,
) -> Result<Vec<CodecRun>> {
    if motions.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let per_part = split_all(motions, scheme)?;
    if configs.len() != scheme.parts.len() {
        return Err(Error::Config(format!("{} codec configs for {} parts", configs.len(), scheme.parts.len())));
    }
    scheme
        .parts
        .iter()
        .zip(per_part)
        .zip(configs)
        .map(|((spec, parts), cfg)| {
            log::info!("training {} codec", spec.part);
            train_codec(spec.part, &parts, cfg.clone(), opt_cfg, opts)
        })
        .collect()
}

/// Part motions of every sequence, grouped by part (canonical order).
pub fn split_all(motions: &[Motion], scheme: &PartitionScheme) -> Result<Vec<Vec<PartMotion>>> {
    let mut per_part: Vec<Vec<PartMotion>> = vec![Vec::with_capacity(motions.len()); scheme.parts.len()];
    for m in motions {
        for (k, p) in split(m, scheme)?.into_iter().enumerate() {
            per_part[k].push(p);
        }
    }
    Ok(per_part)
}

/// Token grid of one motion under frozen codecs (canonical part order).
pub fn tokenize_motion(codecs: &[PartCodec], motion: &Motion, scheme: &PartitionScheme) -> Result<PartTokenGrid> {
    let parts = split(motion, scheme)?;
    if parts.len() != codecs.len() {
        return Err(Error::InvalidArgument(format!("{} codecs for {} parts", codecs.len(), parts.len())));
    }
    let ids = parts.iter().zip(codecs).map(|(p, c)| c.tokenize(p)).collect::<Result<Vec<_>>>()?;
    PartTokenGrid::new(ids)
}

/// Decodes a token grid into part motions (canonical part order).
pub fn decode_grid(codecs: &[PartCodec], grid: &PartTokenGrid) -> Result<Vec<PartMotion>> {
    if grid.num_parts() != codecs.len() {
        return Err(Error::InvalidArgument("grid and codec counts differ".into()));
    }
    grid.parts.iter().zip(codecs).map(|(ids, c)| c.decode_indices(ids)).collect()
}

/// One text-conditioned token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSample {
    pub grid: PartTokenGrid,
    pub cond: TextCondition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOptions {
    /// Steps between eval-hook calls; 0 never calls the hook.
    pub eval_every: u64,
    pub log_every: u64,
    /// Held-out samples whose NLL is logged alongside each evaluation.
    pub val_every: u64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions { eval_every: 0, log_every: 10, val_every: 0 }
    }
}

pub struct EvalRecord {
    pub step: u64,
    pub fid: f64,
}

pub struct GeneratorRun {
    pub final_model: PartCoordStack,
    /// The model that scored the lowest eval-hook FID (first minimum on ties);
    /// the final model when no evaluation ran.
    pub best_model: PartCoordStack,
    pub best_eval: Option<usize>,
    pub evals: Vec<EvalRecord>,
    pub loss: LossCurve,
    pub val_nll: LossCurve,
}

pub type EvalHook<'a> = dyn FnMut(&PartCoordStack, u64) -> Result<f64> + 'a;

/// The teacher-forcing batch for one step: augmented inputs and clean targets.
pub fn generator_batch(
    samples: &[TokenSample],
    batch_size: usize,
    aug: &AugmentationConfig,
    vocab: usize,
    rng: &mut impl Rng,
) -> (Vec<PartTokenGrid>, Vec<PartTokenGrid>, Vec<TextCondition>) {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut conds = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &samples[rng.gen_range(0..samples.len())];
        inputs.push(augment(&s.grid, aug, vocab, rng));
        targets.push(s.grid.clone());
        conds.push(s.cond.clone());
    }
    (inputs, targets, conds)
}

/// Mean held-out NLL, evaluated in chunks.
pub fn heldout_nll(model: &PartCoordStack, samples: &[TokenSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no held-out samples".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let grids: Vec<PartTokenGrid> = chunk.iter().map(|s| s.grid.clone()).collect();
        let conds: Vec<TextCondition> = chunk.iter().map(|s| s.cond.clone()).collect();
        total += model.evaluate_nll(&grids, &conds, Termination::End)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

pub fn train_generator(
    train: &[TokenSample],
    val: &[TokenSample],
    config: StackConfig,
    opt_cfg: &OptimizerConfig,
    aug: &AugmentationConfig,
    opts: &GeneratorOptions,
    mut eval_hook: Option<&mut EvalHook<'_>>,
) -> Result<GeneratorRun> {
    opt_cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("token dataset is empty".into()));
    }
    let mut model = PartCoordStack::new(config, &mut rng_for(opt_cfg.seed, "generator/init", 0))?;
    let mut data_rng = rng_for(opt_cfg.seed, "generator/data", 0);
    let mut drop_rng = rng_for(opt_cfg.seed, "generator/dropout", 0);
    let mut opt = AdamW::new(&model.params, opt_cfg.adamw());
    let vocab = model.config.vocab;
    let mut loss = LossCurve::new("generator.loss");
    let mut val_nll = LossCurve::new("generator.val_nll");
    let mut evals = Vec::new();
    let mut best: Option<(usize, PartCoordStack)> = None;
    for step in 0..opt_cfg.total_steps {
        let (inputs, targets, conds) = generator_batch(train, opt_cfg.batch_size, aug, vocab, &mut data_rng);
        let (grads, l) = {
            let mut g = Graph::new(&model.params);
            let out = model.forward_graph(&mut g, &inputs, &conds, Some(&mut drop_rng))?;
            let nll = model.nll_graph(&mut g, &out, &targets, Termination::End)?;
            (g.backward(nll).into_params(), g.value(nll).item())
        };
        check_finite(l, || "generator loss".to_string(), step)?;
        finish_step(&mut model.params, &mut opt, grads, opt_cfg, step);
        let done = step + 1;
        if step % opts.log_every.max(1) == 0 || done == opt_cfg.total_steps {
            loss.push(step, l);
        }
        if opts.val_every > 0 && !val.is_empty() && (done % opts.val_every == 0 || done == opt_cfg.total_steps) {
            val_nll.push(done, heldout_nll(&model, val)?);
        }
        if let Some(hook) = eval_hook.as_deref_mut() {
            if opts.eval_every > 0 && (done % opts.eval_every == 0 || done == opt_cfg.total_steps) {
                let fid = hook(&model, done)?;
                check_finite(fid, || "eval FID".to_string(), done)?;
                let k = evals.len();
                evals.push(EvalRecord { step: done, fid });
                if best.as_ref().map_or(true, |(b, _)| fid < evals[*b].fid) {
                    best = Some((k, model.clone()));
                }
            }
        }
    }
    let (best_eval, best_model) = match best {
        Some((k, m)) => (Some(k), m),
        None => (None, model.clone()),
    };
    Ok(GeneratorRun { final_model: model, best_model, best_eval, evals, loss, val_nll })
}

/// Index of the first minimum.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains the contrastive text/motion extractor on `(motion, prompt)` pairs.
pub fn train_extractor(
    pairs: &[(Motion, String)],
    config: ExtractorConfig,
    opt_cfg: &OptimizerConfig,
) -> Result<(ContrastiveExtractor, LossCurve)> {
    opt_cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("extractor training needs at least two pairs".into()));
    }
    let mut model = ContrastiveExtractor::new(config, &mut rng_for(opt_cfg.seed, "extractor/init", 0))?;
    let mut rng = rng_for(opt_cfg.seed, "extractor/data", 0);
    let mut opt = AdamW::new(&model.params, opt_cfg.adamw());
    let mut curve = LossCurve::new("extractor.loss");
    let order: Vec<usize> = (0..pairs.len()).collect();
    for step in 0..opt_cfg.total_steps {
        let picks: Vec<usize> = order.choose_multiple(&mut rng, opt_cfg.batch_size.min(pairs.len())).copied().collect();
        let motions: Vec<&Motion> = picks.iter().map(|&i| &pairs[i].0).collect();
        let prompts: Vec<&str> = picks.iter().map(|&i| pairs[i].1.as_str()).collect();
        let (grads, l) = {
            let mut g = Graph::new(&model.params);
            let loss = model.loss_graph(&mut g, &motions, &prompts)?;
            (g.backward(loss).into_params(), g.value(loss).item())
        };
        check_finite(l, || "extractor loss".to_string(), step)?;
        finish_step(&mut model.params, &mut opt, grads, opt_cfg, step);
        if step % 10 == 0 || step + 1 == opt_cfg.total_steps {
            curve.push(step, l);
        }
    }
    Ok((model, curve))
}

// ---------------------------------------------------------------------------
// Gradient harness

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckTarget {
    /// Least squares on a linear model.
    LinearRegression,
    /// A toy codec's full quantizer loss.
    Codec,
    /// A two-part, two-layer, width-8 generator's NLL.
    Generator,
}

impl std::str::FromStr for GradcheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-regression" => Ok(GradcheckTarget::LinearRegression),
            "codec" => Ok(GradcheckTarget::Codec),
            "generator" => Ok(GradcheckTarget::Generator),
            _ => Err(Error::InvalidArgument(format!("unknown gradcheck target {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true gradient
    /// is at round-off scale are judged by absolute error.
    pub floor: f64,
    /// Entries probed per tensor (evenly strided); `None` probes all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient of every group whose name contains this
    /// string by 2, to confirm the harness notices.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: Some(24),
            seed: 0,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because the loss has a kink within one step.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub target: GradcheckTarget,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<28} max_rel_err={:.3e} checked={} skipped={} {}\n",
                g.name,
                g.max_rel_error,
                g.checked,
                g.skipped,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// A differentiable leaf being checked: either a parameter tensor or a free input.
struct Probe {
    group: String,
    analytic: Matrix,
    kind: ProbeKind,
}

enum ProbeKind {
    Param(ParamId),
    Input,
}

fn group_of(name: &str) -> String {
    // "p0.layer1.attn.q.w" -> "p0.layer1.attn.q", "enc.down0.res0.a.w" -> "enc.down0.res0.a"
    match name.rsplit_once('.') {
        Some((head, "w" | "b" | "g")) => head.to_string(),
        _ => name.to_string(),
    }
}

fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if len > m => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Central differences for one probe. `eval` receives the parameter store and
/// the (possibly perturbed) free input.
fn check_probe(
    store: &ParamStore,
    input: &Matrix,
    probe: &Probe,
    opts: &GradcheckOptions,
    eval: &dyn Fn(&ParamStore, &Matrix) -> f64,
) -> (f64, usize, usize) {
    let h = opts.step;
    let base = eval(store, input);
    let len = probe.analytic.len();
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut s = store.clone();
    let mut x = input.clone();
    for idx in probe_indices(len, opts.max_entries) {
        let at = |s: &mut ParamStore, x: &mut Matrix, delta: f64| -> f64 {
            match probe.kind {
                ProbeKind::Param(id) => {
                    let orig = store.get(id).data()[idx];
                    s.get_mut(id).data_mut()[idx] = orig + delta;
                    let v = eval(s, x);
                    s.get_mut(id).data_mut()[idx] = orig;
                    v
                }
                ProbeKind::Input => {
                    let orig = input.data()[idx];
                    x.data_mut()[idx] = orig + delta;
                    let v = eval(s, x);
                    x.data_mut()[idx] = orig;
                    v
                }
            }
        };
        let fp = at(&mut s, &mut x, h);
        let fm = at(&mut s, &mut x, -h);
        let fwd = (fp - base) / h;
        let bwd = (base - fm) / h;
        // A piecewise-linear kink between the two evaluation points shows up as
        // one-sided slopes that disagree far beyond curvature effects.
        if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-4 {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = probe.analytic.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        worst = worst.max(rel);
        checked += 1;
    }
    (worst, checked, skipped)
}

fn run_probes(
    target: GradcheckTarget,
    store: &ParamStore,
    input: &Matrix,
    probes: Vec<Probe>,
    opts: &GradcheckOptions,
    eval: &dyn Fn(&ParamStore, &Matrix) -> f64,
) -> GradcheckReport {
    let mut groups: Vec<GroupReport> = Vec::new();
    for mut probe in probes {
        if let Some(f) = &opts.inject_fault {
            if probe.group.contains(f.as_str()) {
                probe.analytic.scale_assign(2.0);
            }
        }
        let (worst, checked, skipped) = check_probe(store, input, &probe, opts, eval);
        match groups.iter_mut().find(|g| g.name == probe.group) {
            Some(g) => {
                g.max_rel_error = g.max_rel_error.max(worst);
                g.checked += checked;
                g.skipped += skipped;
            }
            None => {
                groups.push(GroupReport { name: probe.group, max_rel_error: worst, checked, skipped, passed: false })
            }
        }
    }
    for g in &mut groups {
        g.passed = g.checked > 0 && g.max_rel_error < opts.tolerance;
    }
    GradcheckReport { target, groups }
}

fn param_probes(store: &ParamStore, grads: &Gradients) -> Vec<Probe> {
    store
        .iter()
        .map(|(id, name, p)| Probe {
            group: group_of(name),
            analytic: grads.get(id).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())),
            kind: ProbeKind::Param(id),
        })
        .collect()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn gradcheck(target: GradcheckTarget, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = rng_for(opts.seed, "gradcheck", 0);
    match target {
        GradcheckTarget::LinearRegression => {
            let mut store = ParamStore::new();
            let w = store.add("linear.w", random_matrix(3, 2, &mut rng));
            let b = store.add("linear.b", random_matrix(1, 2, &mut rng));
            let x = random_matrix(10, 3, &mut rng);
            let y = random_matrix(10, 2, &mut rng);
            let eval_graph = |g: &mut Graph, xv: &Matrix| {
                let xi = g.input(xv.clone());
                let wv = g.param(w);
                let bv = g.param(b);
                let p = g.linear(xi, wv, bv);
                let t = g.constant(y.clone());
                (xi, g.mse(p, t))
            };
            let mut g = Graph::new(&store);
            let (xi, loss) = eval_graph(&mut g, &x);
            let back = g.backward(loss);
            let mut probes = param_probes(&store, back.params());
            probes.push(Probe {
                group: "input".into(),
                analytic: back.wrt(xi).unwrap().clone(),
                kind: ProbeKind::Input,
            });
            let eval = |s: &ParamStore, xv: &Matrix| {
                let mut g = Graph::new(s);
                let (_, l) = eval_graph(&mut g, xv);
                g.value(l).item()
            };
            Ok(run_probes(target, &store, &x, probes, opts, &eval))
        }
        GradcheckTarget::Codec => {
            let cfg = CodecConfig {
                input_dim: 3,
                codebook_size: 6,
                code_dim: 4,
                downsample: 4,
                commitment_weight: 0.8,
                velocity_weight: 0.5,
                width: 5,
                res_blocks: 1,
            };
            let codec = PartCodec::new(PartId::LeftArm, cfg, &mut rng)?;
            let (seqs, t) = (2, 8);
            let batch = random_matrix(seqs * t, 3, &mut rng);
            // Base pass fixes code indices and stop-gradient values.
            let mut g = Graph::new(&codec.params);
            let fwd = codec.forward_loss(&mut g, &batch, seqs, t, None)?;
            let back = g.backward(fwd.loss.total);
            let indices = fwd.indices.clone();
            let frozen = g.stop_values().to_vec();
            let latents = g.value(fwd.latents).clone();
            let probes = param_probes(&codec.params, back.params());
            let eval = |s: &ParamStore, _: &Matrix| {
                let mut c = codec.clone();
                c.params = s.clone();
                let mut g = Graph::with_frozen_stops(&c.params, frozen.clone());
                let f = c.forward_loss(&mut g, &batch, seqs, t, Some(&indices)).expect("shapes fixed");
                g.value(f.loss.total).item()
            };
            let mut report = run_probes(target, &codec.params, &Matrix::zeros(0, 0), probes, opts, &eval);

            // Gradient with respect to the encoder output itself.
            let latent_loss = |s: &ParamStore, e: &Matrix, frozen: Option<Vec<Matrix>>| {
                let mut c = codec.clone();
                c.params = s.clone();
                let mut g = match frozen {
                    Some(f) => Graph::with_frozen_stops(&c.params, f),
                    None => Graph::new(&c.params),
                };
                let x = g.constant(batch.clone());
                let ev = g.input(e.clone());
                let book = g.param(c.codebook_id());
                let q = g.gather(book, &indices);
                let st = g.straight_through(ev, q);
                let recon = c.decode_graph(&mut g, st, seqs, t / c.config.downsample);
                let loss = crate::codec::loss_terms(&mut g, x, recon, ev, q, &c.config, seqs).expect("shapes fixed");
                let grad = g.backward(loss.total).wrt(ev).cloned();
                (g.value(loss.total).item(), grad, g.stop_values().to_vec())
            };
            let (_, grad, stops) = latent_loss(&codec.params, &latents, None);
            let probe = Probe {
                group: "encoder_output".into(),
                analytic: grad.expect("input is differentiable"),
                kind: ProbeKind::Input,
            };
            let eval_e = |s: &ParamStore, e: &Matrix| latent_loss(s, e, Some(stops.clone())).0;
            let extra = run_probes(target, &codec.params, &latents, vec![probe], opts, &eval_e);
            report.groups.extend(extra.groups);
            Ok(report)
        }
        GradcheckTarget::Generator => {
            let cfg = StackConfig {
                streams: 2,
                vocab: 4,
                model_dim: 8,
                layers: 2,
                heads: 2,
                ffn_mult: 2,
                dropout: 0.0,
                max_tokens: 4,
                text_dim: 4,
                text_buckets: 8,
                coordination: true,
                ln_eps: 1e-5,
            };
            let model = PartCoordStack::new(cfg, &mut rng)?;
            let grids = vec![
                PartTokenGrid::new(vec![vec![0, 3, 1], vec![2, 2, 5]])?,
                PartTokenGrid::new(vec![vec![1], vec![4]])?,
            ];
            let targets = vec![
                PartTokenGrid::new(vec![vec![0, 3, 1], vec![2, 2, 0]])?,
                PartTokenGrid::new(vec![vec![1], vec![3]])?,
            ];
            let conds = vec![
                TextCondition::new("walk in a circle"),
                TextCondition::with_embedding("x", vec![0.3, -0.2, 0.5, 0.1]),
            ];
            let loss_of = |s: &ParamStore| -> (f64, Option<Gradients>) {
                let mut m = model.clone();
                m.params = s.clone();
                let mut g = Graph::new(&m.params);
                let out = m.forward_graph(&mut g, &grids, &conds, None).expect("valid batch");
                let l = m.nll_graph(&mut g, &out, &targets, Termination::End).expect("valid targets");
                (g.value(l).item(), Some(g.backward(l).into_params()))
            };
            let (_, grads) = loss_of(&model.params);
            let probes = param_probes(&model.params, &grads.expect("gradients"));
            let eval = |s: &ParamStore, _: &Matrix| {
                let mut m = model.clone();
                m.params = s.clone();
                let mut g = Graph::new(&m.params);
                let out = m.forward_graph(&mut g, &grids, &conds, None).expect("valid batch");
                let l = m.nll_graph(&mut g, &out, &targets, Termination::End).expect("valid targets");
                g.value(l).item()
            };
            Ok(run_probes(target, &model.params, &Matrix::zeros(0, 0), probes, opts, &eval))
        }
    }
}
