//! Evaluation metrics over a pluggable text/motion feature extractor, the
//! repeated-run confidence protocol, and a small contrastive extractor.

use nalgebra::{DMatrix, SymmetricEigen};
use partcoord_tape::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::checkpoint::Container;
use crate::coordinator::prompt_tokens;
use crate::error::{Error, Result};
use crate::partition::Motion;
use crate::rng::derive_seed;

/// Maps motions and prompts into one shared feature space.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn motion_embed(&self, motion: &Motion) -> Result<Vec<f64>>;
    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>>;

    fn motion_features(&self, motions: &[&Motion]) -> Result<Matrix> {
        stack_rows(motions.iter().map(|m| self.motion_embed(m)), self.feature_dim())
    }

    fn text_features(&self, prompts: &[&str]) -> Result<Matrix> {
        stack_rows(prompts.iter().map(|p| self.text_embed(p)), self.feature_dim())
    }
}

fn stack_rows(rows: impl Iterator<Item = Result<Vec<f64>>>, width: usize) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        let r = r?;
        if r.len() != width {
            return Err(Error::Shape(format!("feature of width {}, expected {width}", r.len())));
        }
        data.extend(r);
        n += 1;
    }
    let m = Matrix::from_vec(n, width, data);
    check_features(&m)?;
    Ok(m)
}

fn check_features(m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument("features contain non-finite values".into()))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTriple {
    /// Stable identifier; metrics visit triples in id order so that results do
    /// not depend on how the batch was assembled.
    pub id: String,
    pub prompt: String,
    pub real: Motion,
    pub generated: Motion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    items: Vec<EvalTriple>,
}

impl EvalBatch {
    pub fn new(mut items: Vec<EvalTriple>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("evaluation batch is empty".into()));
        }
        items.sort_by(|a, b| a.id.cmp(&b.id));
        if items.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument("duplicate triple ids in evaluation batch".into()));
        }
        Ok(EvalBatch { items })
    }

    pub fn items(&self) -> &[EvalTriple] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn prompts(&self) -> Vec<&str> {
        self.items.iter().map(|t| t.prompt.as_str()).collect()
    }

    pub fn real(&self) -> Vec<&Motion> {
        self.items.iter().map(|t| &t.real).collect()
    }

    pub fn generated(&self) -> Vec<&Motion> {
        self.items.iter().map(|t| &t.generated).collect()
    }
}

/// Candidates per R-Precision query: the true prompt and 31 distractors.
pub const R_PRECISION_POOL: usize = 32;

/// Top-K retrieval accuracy for each `k` in `ks`. Row `i` of `motion` is scored
/// against row `i` of `text` and 31 other rows drawn without replacement; it
/// counts for `k` when fewer than `k` distractors are strictly closer than the
/// true prompt.
pub fn r_precision_features(text: &Matrix, motion: &Matrix, ks: &[usize], rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = text.rows();
    if motion.shape() != text.shape() {
        return Err(Error::Shape("text and motion features must have equal shapes".into()));
    }
    if n < R_PRECISION_POOL {
        return Err(Error::InvalidArgument(format!("R-Precision needs at least {R_PRECISION_POOL} pairs, got {n}")));
    }
    check_features(text)?;
    check_features(motion)?;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let m = motion.row(i);
        let truth = dist(m, text.row(i));
        let closer = sample(rng, n - 1, R_PRECISION_POOL - 1)
            .iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| dist(m, text.row(j)) < truth)
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if closer < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

pub fn r_precision(
    batch: &EvalBatch,
    extractor: &dyn FeatureExtractor,
    ks: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let text = extractor.text_features(&batch.prompts())?;
    let motion = extractor.motion_features(&batch.generated())?;
    r_precision_features(&text, &motion, ks, rng)
}

fn moments(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, f) = x.shape();
    let mut mean = vec![0.0; f];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(f, f);
    for r in x.iter_rows() {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..f {
            for b in a..f {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..f {
        for b in a..f {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Eigenvalues below `1e-10 × max` (including negative round-off) are treated as 0.
const EIGEN_CLAMP: f64 = 1e-10;

fn clamped_eigen(m: DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(m);
    let max = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    for v in e.eigenvalues.iter_mut() {
        if *v < EIGEN_CLAMP * max || *v < 0.0 {
            *v = 0.0;
        }
    }
    e
}

/// Fréchet distance between Gaussian fits (sample mean, `N − 1` covariance).
/// The cross term uses the symmetric form `tr((A Σ_g A)^{1/2})` with
/// `A = Σ_r^{1/2}`, computed by eigendecomposition.
pub fn fid(real: &Matrix, gen: &Matrix) -> Result<f64> {
    if real.rows() < 2 || gen.rows() < 2 {
        return Err(Error::InvalidArgument("FID needs at least two samples per set".into()));
    }
    if real.cols() != gen.cols() {
        return Err(Error::Shape("feature widths differ".into()));
    }
    check_features(real)?;
    check_features(gen)?;
    let (mr, sr) = moments(real);
    let (mg, sg) = moments(gen);
    let mean_term: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    let er = clamped_eigen(sr.clone());
    let sqrt_diag = DMatrix::from_diagonal(&er.eigenvalues.map(f64::sqrt));
    let a = &er.eigenvectors * sqrt_diag * er.eigenvectors.transpose();
    let mut inner = &a * &sg * &a;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clamped_eigen(inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = mean_term + sr.trace() + sg.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean distance between each prompt's text feature and its generated motion's feature.
pub fn mm_dist_features(text: &Matrix, motion: &Matrix) -> Result<f64> {
    if text.shape() != motion.shape() || text.rows() == 0 {
        return Err(Error::Shape("mm_dist needs equally shaped, non-empty feature sets".into()));
    }
    check_features(text)?;
    check_features(motion)?;
    Ok(text.iter_rows().zip(motion.iter_rows()).map(|(a, b)| dist(a, b)).sum::<f64>() / text.rows() as f64)
}

pub fn mm_dist(batch: &EvalBatch, extractor: &dyn FeatureExtractor) -> Result<f64> {
    mm_dist_features(&extractor.text_features(&batch.prompts())?, &extractor.motion_features(&batch.generated())?)
}

/// Default diversity subset size, capped at half the sample count.
pub fn default_subset_size(n: usize) -> usize {
    300.min(n / 2)
}

/// Draws `2d` distinct rows, pairs the first `d` with the second `d` in draw
/// order and averages their distances.
pub fn diversity(feats: &Matrix, subset: usize, rng: &mut impl Rng) -> Result<f64> {
    let n = feats.rows();
    if subset == 0 || n < 2 * subset {
        return Err(Error::InvalidArgument(format!("diversity needs at least {} samples, got {n}", 2 * subset.max(1))));
    }
    check_features(feats)?;
    let idx = sample(rng, n, 2 * subset).into_vec();
    let (a, b) = idx.split_at(subset);
    Ok(a.iter().zip(b).map(|(&i, &j)| dist(feats.row(i), feats.row(j))).sum::<f64>() / subset as f64)
}

/// Something that turns prompts into motions, possibly at random.
pub trait MotionGenerator {
    fn is_stochastic(&self) -> bool;
    fn generate(&mut self, prompt: &str, rng: &mut dyn rand::RngCore) -> Result<Motion>;
}

/// Within-prompt variation: per prompt, the mean feature distance over
/// `pairs_per_text` freshly generated pairs, averaged over prompts.
pub fn mmodality(
    prompts: &[&str],
    generator: &mut dyn MotionGenerator,
    extractor: &dyn FeatureExtractor,
    pairs_per_text: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    if !generator.is_stochastic() {
        return Err(Error::InvalidArgument(
            "MModality needs a stochastic sampling strategy; greedy decoding produces identical pairs".into(),
        ));
    }
    if prompts.is_empty() || pairs_per_text == 0 {
        return Err(Error::InvalidArgument("MModality needs prompts and at least one pair".into()));
    }
    let mut total = 0.0;
    for p in prompts {
        let mut sum = 0.0;
        for _ in 0..pairs_per_text {
            let a = extractor.motion_embed(&generator.generate(p, rng)?)?;
            let b = extractor.motion_embed(&generator.generate(p, rng)?)?;
            if a.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("features contain non-finite values".into()));
            }
            sum += dist(&a, &b);
        }
        total += sum / pairs_per_text as f64;
    }
    Ok(total / prompts.len() as f64)
}

pub const DEFAULT_REPEATS: usize = 20;
pub const DEFAULT_MMODALITY_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// `1.96 · s / √n` with `s` the sample standard deviation; 0 when `n = 1`.
    pub half_width: f64,
    pub repeats: usize,
}

impl MetricSummary {
    /// A single run has no spread estimate; its half-width is reported as 0.
    pub fn is_degenerate(&self) -> bool {
        self.repeats < 2
    }
}

pub fn summarize(metric: impl Into<String>, values: &[f64]) -> Result<MetricSummary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no repeats to summarize".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    };
    Ok(MetricSummary { metric: metric.into(), mean, half_width, repeats: n })
}

/// One metric of a protocol run: called once per repeat with that repeat's seed.
pub struct MetricRun<'a> {
    pub name: String,
    pub repeats: usize,
    pub run: Box<dyn FnMut(u64) -> Result<f64> + 'a>,
}

/// Runs every metric for its repeat count with seeds
/// `derive_seed(root, "eval/<name>", repeat)` and summarizes each.
pub fn protocol_run(metrics: Vec<MetricRun<'_>>, root_seed: u64) -> Result<Vec<MetricSummary>> {
    let mut out = Vec::with_capacity(metrics.len());
    for mut m in metrics {
        if m.repeats == 0 {
            return Err(Error::InvalidArgument(format!("metric {} has zero repeats", m.name)));
        }
        let mut values = Vec::with_capacity(m.repeats);
        for r in 0..m.repeats {
            values.push((m.run)(derive_seed(root_seed, &format!("eval/{}", m.name), r as u64))?);
        }
        let s = summarize(m.name.clone(), &values)?;
        if s.is_degenerate() {
            log::warn!("metric {} ran once; its confidence half-width is reported as 0", s.metric);
        }
        out.push(s);
    }
    Ok(out)
}

/// Metric table with a `# key = value` metadata header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<MetricSummary>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s.push_str("metric,mean,ci_half_width,repeats\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.metric, r.mean, r.half_width, r.repeats));
        }
        s
    }

    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

// ---------------------------------------------------------------------------
// Contrastive extractor

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    /// Whole-body feature width of the motions.
    pub motion_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub text_buckets: usize,
    pub margin: f64,
}

impl ExtractorConfig {
    pub fn new(motion_dim: usize) -> Self {
        ExtractorConfig { motion_dim, hidden: 64, feature_dim: 64, text_buckets: 1024, margin: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveExtractor {
    pub config: ExtractorConfig,
    pub params: ParamStore,
    m1: (ParamId, ParamId),
    m2: (ParamId, ParamId),
    m_out: (ParamId, ParamId),
    t_table: ParamId,
    t_out: (ParamId, ParamId),
}

fn bucket(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0x84222325cbf29ce4;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % buckets as u64) as usize
}

impl ContrastiveExtractor {
    pub fn new(config: ExtractorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.motion_dim == 0 || config.hidden == 0 || config.feature_dim == 0 || config.text_buckets == 0 {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        if !(config.margin > 0.0) {
            return Err(Error::Config("extractor margin must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            let bound = 1.0 / (i as f64).sqrt();
            let mut u = |r, c| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect());
            let w = u(i, o);
            let b = u(1, o);
            (store.add(format!("{name}.w"), w), store.add(format!("{name}.b"), b))
        };
        let (d, h, f) = (config.motion_dim, config.hidden, config.feature_dim);
        let m1 = lin(&mut store, "motion.l1", 2 * d, h);
        let m2 = lin(&mut store, "motion.l2", h, h);
        let m_out = lin(&mut store, "motion.out", h, f);
        let t_out = lin(&mut store, "text.out", h, f);
        let t_table = store.add(
            "text.table",
            Matrix::from_vec(
                config.text_buckets,
                h,
                (0..config.text_buckets * h).map(|_| rng.gen_range(-0.5..=0.5)).collect(),
            ),
        );
        Ok(ContrastiveExtractor { config, params: store, m1, m2, m_out, t_table, t_out })
    }

    fn lin(g: &mut Graph, x: Var, p: (ParamId, ParamId)) -> Var {
        let w = g.param(p.0);
        let b = g.param(p.1);
        g.linear(x, w, b)
    }

    /// Per-frame input: features alongside their frame-to-frame change.
    fn frame_inputs(&self, motions: &[&Motion]) -> Result<(Matrix, Matrix)> {
        let d = self.config.motion_dim;
        let total: usize = motions.iter().map(|m| m.frames()).sum();
        let mut x = Matrix::zeros(total, 2 * d);
        let mut pool = Matrix::zeros(motions.len(), total);
        let mut r = 0;
        for (b, m) in motions.iter().enumerate() {
            if m.width() != d {
                return Err(Error::Shape(format!("motion width {} vs extractor width {d}", m.width())));
            }
            let f = m.features();
            for t in 0..m.frames() {
                let row = x.row_mut(r);
                row[..d].copy_from_slice(f.row(t));
                if t > 0 {
                    for c in 0..d {
                        row[d + c] = f.get(t, c) - f.get(t - 1, c);
                    }
                }
                pool.set(b, r, 1.0 / m.frames() as f64);
                r += 1;
            }
        }
        Ok((x, pool))
    }

    pub fn motion_graph(&self, g: &mut Graph, motions: &[&Motion]) -> Result<Var> {
        let (x, pool) = self.frame_inputs(motions)?;
        let x = g.constant(x);
        let h = Self::lin(g, x, self.m1);
        let h = g.relu(h);
        let h = Self::lin(g, h, self.m2);
        let h = g.relu(h);
        let p = g.constant(pool);
        let pooled = g.matmul(p, h);
        Ok(Self::lin(g, pooled, self.m_out))
    }

    pub fn text_graph(&self, g: &mut Graph, prompts: &[&str]) -> Var {
        let mut pool = Matrix::zeros(prompts.len(), self.config.text_buckets);
        for (b, p) in prompts.iter().enumerate() {
            let toks = prompt_tokens(p);
            let w = 1.0 / toks.len().max(1) as f64;
            for t in toks {
                let j = bucket(&t, self.config.text_buckets);
                pool.set(b, j, pool.get(b, j) + w);
            }
        }
        let p = g.constant(pool);
        let table = g.param(self.t_table);
        let h = g.matmul(p, table);
        let h = g.relu(h);
        Self::lin(g, h, self.t_out)
    }

    fn row_dist(g: &mut Graph, a: Var, b: Var) -> Var {
        let d = g.sub(a, b);
        let sq = g.square(d);
        let s = g.row_sum(sq);
        let s = g.add_scalar(s, 1e-12);
        g.sqrt(s)
    }

    /// Margin objective: squared distance of matching pairs plus squared hinge
    /// `max(0, margin − d)` on each motion paired with the next item's prompt,
    /// skipping pairs whose prompts coincide.
    pub fn loss_graph(&self, g: &mut Graph, motions: &[&Motion], prompts: &[&str]) -> Result<Var> {
        let n = motions.len();
        if n < 2 || prompts.len() != n {
            return Err(Error::InvalidArgument("contrastive loss needs at least two matched pairs".into()));
        }
        let m = self.motion_graph(g, motions)?;
        let t = self.text_graph(g, prompts);
        let dp = Self::row_dist(g, m, t);
        let dp2 = g.square(dp);
        let pos = g.mean(dp2);
        let (mi, ti): (Vec<usize>, Vec<usize>) =
            (0..n).map(|i| (i, (i + 1) % n)).filter(|&(i, j)| prompts[i] != prompts[j]).unzip();
        if mi.is_empty() {
            return Ok(pos);
        }
        let mn = g.gather(m, &mi);
        let tn = g.gather(t, &ti);
        let dn = Self::row_dist(g, mn, tn);
        let neg = g.scale(dn, -1.0);
        let neg = g.add_scalar(neg, self.config.margin);
        let neg = g.relu(neg);
        let neg = g.square(neg);
        let neg = g.mean(neg);
        Ok(g.add(pos, neg))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("extractor");
        c.push_meta("motion_dim", self.config.motion_dim);
        c.push_meta("hidden", self.config.hidden);
        c.push_meta("feature_dim", self.config.feature_dim);
        c.push_meta("text_buckets", self.config.text_buckets);
        c.push_meta("margin", self.config.margin);
        c.push_params(&self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("extractor")?;
        let config = ExtractorConfig {
            motion_dim: c.meta_parse("motion_dim")?,
            hidden: c.meta_parse("hidden")?,
            feature_dim: c.meta_parse("feature_dim")?,
            text_buckets: c.meta_parse("text_buckets")?,
            margin: c.meta_parse("margin")?,
        };
        let mut e = ContrastiveExtractor::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        c.load_params_into(&mut e.params)?;
        Ok(e)
    }
}

impl FeatureExtractor for ContrastiveExtractor {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn motion_embed(&self, motion: &Motion) -> Result<Vec<f64>> {
        Ok(self.motion_features(&[motion])?.into_data())
    }

    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.text_features(&[prompt])?.into_data())
    }

    fn motion_features(&self, motions: &[&Motion]) -> Result<Matrix> {
        let mut out = Matrix::zeros(0, self.config.feature_dim);
        let mut rows = Vec::new();
        for chunk in motions.chunks(64) {
            let mut g = Graph::new(&self.params);
            let v = self.motion_graph(&mut g, chunk)?;
            rows.extend_from_slice(g.value(v).data());
        }
        if !rows.is_empty() {
            out = Matrix::from_vec(motions.len(), self.config.feature_dim, rows);
        }
        check_features(&out)?;
        Ok(out)
    }

    fn text_features(&self, prompts: &[&str]) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let v = self.text_graph(&mut g, prompts);
        Ok(g.value(v).clone())
    }
}
