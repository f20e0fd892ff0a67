//! End-to-end glue: stage-1 artifact bundles, text-to-motion generation and
//! the evaluation protocol over a dataset split.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use partcoord_tape::Matrix;
use rand::seq::index::sample;
use rand::RngCore;

use crate::checkpoint::Container;
use crate::codec::PartCodec;
use crate::coordinator::{PartCoordStack, PartTokenGrid, SamplingStrategy, TextCondition};
use crate::datahub::{Normalization, Sample};
use crate::error::{Error, Result};
use crate::metrics::{
    default_subset_size, diversity, fid, mm_dist_features, mmodality, protocol_run, r_precision_features, EvalReport,
    FeatureExtractor, MetricRun, MotionGenerator,
};
use crate::partition::{merge, Layout, Motion, PartitionScheme};
use crate::rng::{derive_seed, rng_for};
use crate::trainer::{decode_grid, tokenize_motion, TokenSample};

/// The frozen stage-1 artifacts: partition scheme, normalization and one codec per part.
#[derive(Clone, Debug)]
pub struct CodecBundle {
    pub layout: Layout,
    pub scheme: PartitionScheme,
    pub norm: Normalization,
    pub codecs: Vec<PartCodec>,
}

impl CodecBundle {
    pub fn codec_file(part: &str) -> String {
        format!("codec_{part}.ckpt")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("scheme.txt");
        let text = format!("layout = {} {}\n{}", self.layout.id, self.layout.width, self.scheme.to_text());
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.norm.save(&dir.join("norm"))?;
        for c in &self.codecs {
            c.to_container().save(dir.join(Self::codec_file(c.part.name())))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("scheme.txt");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let spec = first
            .strip_prefix("layout = ")
            .ok_or_else(|| Error::parse(p.display().to_string(), "first line must be `layout = <id> <width>`"))?;
        let (id, width) = spec
            .split_once(' ')
            .and_then(|(id, w)| Some((id, w.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| Error::parse(p.display().to_string(), "bad layout line"))?;
        let layout = Layout::resolve(id, width)?;
        let scheme = PartitionScheme::parse(rest, layout.clone())?;
        let norm = Normalization::load(&dir.join("norm"))?;
        let codecs = scheme
            .parts
            .iter()
            .map(|s| PartCodec::from_container(&Container::load(dir.join(Self::codec_file(s.part.name())))?))
            .collect::<Result<Vec<_>>>()?;
        let bundle = CodecBundle { layout, scheme, norm, codecs };
        bundle.vocab()?;
        Ok(bundle)
    }

    /// Shared codebook size; every codec must agree.
    pub fn vocab(&self) -> Result<usize> {
        let first = self.codecs.first().ok_or_else(|| Error::InvalidArgument("bundle has no codecs".into()))?;
        let j = first.config.codebook_size;
        if self.codecs.iter().any(|c| c.config.codebook_size != j) {
            return Err(Error::Config("codecs disagree on codebook size".into()));
        }
        Ok(j)
    }

    pub fn downsample(&self) -> usize {
        self.codecs.first().map_or(1, |c| c.config.downsample)
    }

    /// Identifiers of every codec checkpoint, in part order.
    pub fn fingerprints(&self) -> Vec<String> {
        self.codecs.iter().map(|c| c.to_container().fingerprint()).collect()
    }

    /// Tokens of a normalized motion.
    pub fn tokenize(&self, motion: &Motion) -> Result<PartTokenGrid> {
        tokenize_motion(&self.codecs, motion, &self.scheme)
    }

    /// Decodes and merges a grid into a normalized whole-body motion. An empty
    /// grid yields an empty motion.
    pub fn decode(&self, grid: &PartTokenGrid) -> Result<Motion> {
        if grid.is_empty() {
            return Ok(Motion::empty(self.layout.clone()));
        }
        merge(&decode_grid(&self.codecs, grid)?, &self.scheme)
    }

    /// One token sample per (motion, prompt) pair.
    pub fn token_samples(&self, samples: &[Sample]) -> Result<Vec<TokenSample>> {
        let mut out = Vec::new();
        for s in samples {
            let grid = self.tokenize(&s.motion)?;
            out.extend(
                s.prompts.iter().map(|p| TokenSample { grid: grid.clone(), cond: TextCondition::new(p.clone()) }),
            );
        }
        Ok(out)
    }
}

/// A generator plus frozen codecs, producing normalized motions from prompts.
pub struct TextToMotion<'a> {
    pub bundle: &'a CodecBundle,
    pub model: &'a PartCoordStack,
    pub strategy: SamplingStrategy,
    pub max_len: usize,
}

impl<'a> TextToMotion<'a> {
    pub fn new(bundle: &'a CodecBundle, model: &'a PartCoordStack, strategy: SamplingStrategy) -> Self {
        TextToMotion { bundle, model, strategy, max_len: model.config.max_tokens }
    }

    pub fn generate_grid(&self, prompt: &str, rng: &mut dyn RngCore) -> Result<PartTokenGrid> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("prompt is empty".into()));
        }
        let mut rng = rng;
        self.model.sample(&TextCondition::new(prompt), self.max_len, self.strategy, &mut rng)
    }

    /// Grid and normalized motion for each prompt.
    pub fn generate_batch(&self, prompts: &[&str], rng: &mut dyn RngCore) -> Result<Vec<(PartTokenGrid, Motion)>> {
        let conds: Vec<TextCondition> = prompts.iter().map(|p| TextCondition::new(*p)).collect();
        let mut rng = rng;
        let grids = self.model.sample_batch(&conds, self.max_len, self.strategy, &mut rng)?;
        grids
            .into_iter()
            .map(|g| {
                let m = self.bundle.decode(&g)?;
                Ok((g, m))
            })
            .collect()
    }
}

impl MotionGenerator for TextToMotion<'_> {
    fn is_stochastic(&self) -> bool {
        self.strategy.is_stochastic()
    }

    fn generate(&mut self, prompt: &str, rng: &mut dyn RngCore) -> Result<Motion> {
        let grid = self.generate_grid(prompt, rng)?;
        self.bundle.decode(&grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateOptions {
    pub repeats: usize,
    pub mmodality_repeats: usize,
    /// Prompts and generated pairs per prompt for MModality.
    pub mmodality_prompts: usize,
    pub mmodality_pairs: usize,
    pub seed: u64,
    pub strategy: SamplingStrategy,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            repeats: crate::metrics::DEFAULT_REPEATS,
            mmodality_repeats: crate::metrics::DEFAULT_MMODALITY_REPEATS,
            mmodality_prompts: 32,
            mmodality_pairs: 10,
            seed: 0,
            strategy: SamplingStrategy::TopK { k: 10, temperature: 1.0 },
        }
    }
}

type MetricFn<'f> = Box<dyn Fn(&Matrix, &mut rand_chacha::ChaCha8Rng) -> Result<f64> + 'f>;

/// A metric over repeat `r`'s generated features, `r` counting calls.
fn metric_run<'f>(
    name: String,
    repeats: usize,
    generated: &'f dyn Fn(usize) -> Result<Matrix>,
    f: MetricFn<'f>,
) -> MetricRun<'f> {
    let mut r = 0usize;
    MetricRun {
        name,
        repeats,
        run: Box::new(move |seed| {
            let g = generated(r)?;
            r += 1;
            f(&g, &mut rng_for(seed, "eval/metric", 0))
        }),
    }
}

/// Runs the repeated metric protocol on `samples` (first prompt of each).
/// Generation for repeat `r` is seeded by `derive_seed(seed, "eval/generate", r)`
/// and shared by every metric of that repeat.
pub fn evaluate(
    gen: &TextToMotion<'_>,
    extractor: &dyn FeatureExtractor,
    samples: &[Sample],
    opts: &EvaluateOptions,
) -> Result<EvalReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two samples".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let prompts: Vec<&str> = ordered.iter().map(|s| s.prompts.first().map_or("", String::as_str)).collect();
    if prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(Error::InvalidArgument("every evaluated sample needs a prompt".into()));
    }
    let real_motions: Vec<&Motion> = ordered.iter().map(|s| &s.motion).collect();
    let text = extractor.text_features(&prompts)?;
    let real = extractor.motion_features(&real_motions)?;
    // Generated features per repeat, with the number of empty motions.
    let cache: RefCell<Vec<Option<(Matrix, usize)>>> = RefCell::new((0..opts.repeats).map(|_| None).collect());
    let generated = |r: usize| -> Result<Matrix> {
        if let Some((m, _)) = &cache.borrow()[r] {
            return Ok(m.clone());
        }
        let mut rng = rng_for(derive_seed(opts.seed, "eval/generate", r as u64), "eval/generate", 0);
        let out = gen.generate_batch(&prompts, &mut rng)?;
        let empty = out.iter().filter(|(_, m)| m.frames() == 0).count();
        let motions: Vec<&Motion> = out.iter().map(|(_, m)| m).collect();
        let feats = extractor.motion_features(&motions)?;
        cache.borrow_mut()[r] = Some((feats.clone(), empty));
        Ok(feats)
    };
    let (text, real, generated) = (&text, &real, &generated);
    let n = opts.repeats;
    let mut runs = Vec::new();
    for k in 1..=3usize {
        runs.push(metric_run(
            format!("r_precision_top{k}"),
            n,
            generated,
            Box::new(move |g, rng| Ok(r_precision_features(text, g, &[k], rng)?[0])),
        ));
    }
    runs.push(metric_run("fid".into(), n, generated, Box::new(|g, _| fid(real, g))));
    runs.push(metric_run("mm_dist".into(), n, generated, Box::new(|g, _| mm_dist_features(text, g))));
    runs.push(metric_run(
        "diversity".into(),
        n,
        generated,
        Box::new(|g, rng| diversity(g, default_subset_size(g.rows()), rng)),
    ));
    let mut rows = protocol_run(runs, opts.seed)?;
    let mut meta = Vec::new();
    if gen.strategy.is_stochastic() && opts.mmodality_repeats > 0 {
        let mm_prompts: Vec<&str> = {
            let n = opts.mmodality_prompts.min(prompts.len());
            let mut rng = rng_for(opts.seed, "eval/mmodality_prompts", 0);
            let mut idx = sample(&mut rng, prompts.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| prompts[i]).collect()
        };
        let generator = RefCell::new(TextToMotion {
            bundle: gen.bundle,
            model: gen.model,
            strategy: gen.strategy,
            max_len: gen.max_len,
        });
        let runs = vec![MetricRun {
            name: "mmodality".into(),
            repeats: opts.mmodality_repeats,
            run: Box::new(|seed| {
                let mut rng = rng_for(seed, "eval/metric", 0);
                mmodality(&mm_prompts, &mut *generator.borrow_mut(), extractor, opts.mmodality_pairs, &mut rng)
            }),
        }];
        rows.extend(protocol_run(runs, opts.seed)?);
    } else {
        log::warn!("MModality skipped: the sampling strategy is deterministic");
        meta.push(("mmodality".to_string(), "skipped (deterministic strategy)".to_string()));
    }
    let empty: usize = cache.borrow().iter().flatten().map(|c| c.1).sum();
    if empty > 0 {
        log::warn!("{empty} generated motions were empty (END sampled first)");
    }
    meta.push(("samples".into(), samples.len().to_string()));
    meta.push(("repeats".into(), opts.repeats.to_string()));
    meta.push(("mmodality_repeats".into(), opts.mmodality_repeats.to_string()));
    meta.push(("strategy".into(), gen.strategy.to_string()));
    meta.push(("seed".into(), opts.seed.to_string()));
    meta.push(("empty_generations".into(), empty.to_string()));
    let mut ids = String::new();
    for (spec, fp) in gen.bundle.scheme.parts.iter().zip(gen.bundle.fingerprints()) {
        write!(ids, "{}:{} ", spec.part.name(), fp).expect("String write");
    }
    meta.push(("codec_checkpoints".into(), ids.trim_end().to_string()));
    meta.push(("generator_checkpoint".into(), gen.model.to_container().fingerprint()));
    Ok(EvalReport { meta, rows })
}
