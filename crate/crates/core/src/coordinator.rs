//! Six-stream causal generator with cross-stream coordination blocks.
//!
//! Each part owns a pre-norm transformer stack. Before every layer except the
//! first, a coordination block replaces each stream's hidden state `x^i` with
//! `LN(x^i + MLP^i(y))`, where `y` concatenates the other streams' states at the
//! same position in canonical part order. That exchange is the only path
//! between streams. Position 0 of every stream carries the text condition, so
//! output row `r` predicts the token at position `r + 1` from the condition and
//! every stream's tokens before it.

use partcoord_tape::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};

use crate::checkpoint::Container;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    /// Number of part streams (S).
    pub streams: usize,
    /// Codebook size J; the END token is `J` and MASK is `J + 1`.
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Longest motion-token sequence; the context adds one condition slot.
    pub max_tokens: usize,
    pub text_dim: usize,
    /// Hash buckets of the built-in bag-of-words text encoder.
    pub text_buckets: usize,
    /// Insert coordination layers; `false` gives independent streams.
    pub coordination: bool,
    pub ln_eps: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            streams: crate::partition::NUM_PARTS,
            vocab: 512,
            model_dim: 256,
            layers: 14,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            max_tokens: 49,
            text_dim: 128,
            text_buckets: 2048,
            coordination: true,
            ln_eps: 1e-5,
        }
    }
}

impl StackConfig {
    pub fn end_id(&self) -> usize {
        self.vocab
    }

    pub fn mask_id(&self) -> usize {
        self.vocab + 1
    }

    /// Output classes per position: motion codes plus END.
    pub fn num_classes(&self) -> usize {
        self.vocab + 1
    }

    /// A single-stream stack of the given width, for size comparisons.
    pub fn monolithic(&self, model_dim: usize) -> Self {
        StackConfig { streams: 1, model_dim, coordination: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.streams == 0 || self.vocab == 0 || self.model_dim == 0 || self.text_dim == 0 || self.text_buckets == 0 {
            return bad("generator dimensions must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be divisible by heads");
        }
        if self.ffn_mult == 0 || self.max_tokens == 0 {
            return bad("ffn_mult and max_tokens must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }

    fn has_coordination(&self) -> bool {
        self.coordination && self.streams > 1
    }

    pub fn to_meta(&self, c: &mut Container) {
        c.push_meta("streams", self.streams);
        c.push_meta("vocab", self.vocab);
        c.push_meta("model_dim", self.model_dim);
        c.push_meta("layers", self.layers);
        c.push_meta("heads", self.heads);
        c.push_meta("ffn_mult", self.ffn_mult);
        c.push_meta("dropout", self.dropout);
        c.push_meta("max_tokens", self.max_tokens);
        c.push_meta("text_dim", self.text_dim);
        c.push_meta("text_buckets", self.text_buckets);
        c.push_meta("coordination", self.coordination);
        c.push_meta("ln_eps", self.ln_eps);
    }

    pub fn from_meta(c: &Container) -> Result<Self> {
        Ok(StackConfig {
            streams: c.meta_parse("streams")?,
            vocab: c.meta_parse("vocab")?,
            model_dim: c.meta_parse("model_dim")?,
            layers: c.meta_parse("layers")?,
            heads: c.meta_parse("heads")?,
            ffn_mult: c.meta_parse("ffn_mult")?,
            dropout: c.meta_parse("dropout")?,
            max_tokens: c.meta_parse("max_tokens")?,
            text_dim: c.meta_parse("text_dim")?,
            text_buckets: c.meta_parse("text_buckets")?,
            coordination: c.meta_parse("coordination")?,
            ln_eps: c.meta_parse("ln_eps")?,
        })
    }
}

/// Closed-form count of learnable scalars for a configuration.
pub fn count_parameters(cfg: &StackConfig) -> u64 {
    let d = cfg.model_dim as u64;
    let s = cfg.streams as u64;
    let f = (cfg.ffn_mult * cfg.model_dim) as u64;
    let j = cfg.vocab as u64;
    let linear = |i: u64, o: u64| i * o + o;
    let embeddings = (j + 2) * d + (cfg.max_tokens as u64 + 1) * d + linear(cfg.text_dim as u64, d);
    let layer = 2 * 2 * d + 4 * linear(d, d) + linear(d, f) + linear(f, d);
    let coord = if cfg.has_coordination() { linear((s - 1) * d, d) + 2 * linear(d, d) + 2 * d } else { 0 };
    let n = cfg.layers as u64;
    let per_stream = embeddings + n * layer + n.saturating_sub(1) * coord + 2 * d + linear(d, j + 1);
    s * per_stream + (cfg.text_buckets * cfg.text_dim) as u64
}

/// Whitespace tokens with everything but alphanumerics stripped, lowercased.
pub fn prompt_tokens(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

fn bucket(token: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % buckets as u64) as usize
}

/// A prompt and, optionally, an embedding from an external text encoder. When
/// `embedding` is `None` the stack's hashed bag-of-words encoder is used.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    pub prompt: String,
    pub embedding: Option<Vec<f64>>,
}

impl TextCondition {
    pub fn new(prompt: impl Into<String>) -> Self {
        TextCondition { prompt: prompt.into(), embedding: None }
    }

    pub fn with_embedding(prompt: impl Into<String>, embedding: Vec<f64>) -> Self {
        TextCondition { prompt: prompt.into(), embedding: Some(embedding) }
    }
}

/// Per-part token sequences of equal length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartTokenGrid {
    pub parts: Vec<Vec<usize>>,
}

impl PartTokenGrid {
    pub fn new(parts: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(first) = parts.first() {
            if parts.iter().any(|p| p.len() != first.len()) {
                return Err(Error::Shape("all part sequences must share one length".into()));
            }
        }
        Ok(PartTokenGrid { parts })
    }

    pub fn empty(streams: usize) -> Self {
        PartTokenGrid { parts: vec![Vec::new(); streams] }
    }

    pub fn len(&self) -> usize {
        self.parts.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    fn check(&self, streams: usize, max_id: usize, max_len: usize) -> Result<()> {
        if self.parts.len() != streams {
            return Err(Error::Shape(format!("grid has {} parts, model has {streams}", self.parts.len())));
        }
        if self.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "grid length {} exceeds maximum context {max_len}",
                self.len()
            )));
        }
        if let Some(&id) = self.parts.iter().flatten().find(|&&id| id > max_id) {
            return Err(Error::InvalidArgument(format!("token id {id} out of range (max {max_id})")));
        }
        Ok(())
    }

    /// One line per part, space-separated ids.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.parts {
            let line: Vec<String> = p.iter().map(|t| t.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parts = text
            .lines()
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::parse("token grid", format!("bad token id {t:?}"))))
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PartTokenGrid::new(parts)
    }
}

/// How targets end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// END is appended as the final target and positions after a part's first
    /// END are excluded.
    End,
    /// The grid is a fixed window: every id, END included, is an ordinary
    /// target and nothing is appended.
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingStrategy {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

impl SamplingStrategy {
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, SamplingStrategy::Greedy)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let temp_ok = |t: f64| t > 0.0 && t.is_finite();
        match *self {
            SamplingStrategy::Greedy => Ok(()),
            SamplingStrategy::Temperature(t) if temp_ok(t) => Ok(()),
            SamplingStrategy::TopK { k, temperature } if temp_ok(temperature) && k >= 1 && k <= classes => Ok(()),
            s => Err(Error::InvalidArgument(format!("invalid sampling strategy {s:?}"))),
        }
    }

    /// Draws a class from one row of logits.
    pub fn pick(&self, logits: &[f64], rng: &mut impl Rng) -> usize {
        match *self {
            SamplingStrategy::Greedy => argmax(logits),
            SamplingStrategy::Temperature(t) => sample_scaled(logits, t, None, rng),
            SamplingStrategy::TopK { k, temperature } => sample_scaled(logits, temperature, Some(k), rng),
        }
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    /// `greedy`, `temperature:<t>` or `topk:<k>[:<t>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown sampling strategy {s:?}"));
        let mut it = s.split(':');
        let num = |v: Option<&str>| v.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        match it.next() {
            Some("greedy") => Ok(SamplingStrategy::Greedy),
            Some("temperature") => Ok(SamplingStrategy::Temperature(num(it.next())?)),
            Some("topk") => {
                let k = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let temperature = match it.next() {
                    Some(t) => t.parse().map_err(|_| bad())?,
                    None => 1.0,
                };
                Ok(SamplingStrategy::TopK { k, temperature })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingStrategy::Greedy => f.write_str("greedy"),
            SamplingStrategy::Temperature(t) => write!(f, "temperature:{t}"),
            SamplingStrategy::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_scaled(logits: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = top_k {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    let max = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    match WeightedIndex::new(&weights) {
        Ok(w) => order[w.sample(rng)],
        // Every weight underflowed except possibly the maximum.
        Err(_) => order[argmax(&order.iter().map(|&i| logits[i]).collect::<Vec<_>>())],
    }
}

/// Softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(logits: &[f64], t: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    logits[t] - max - z.ln()
}

/// Per-row targets of one part for a padded batch with `t` rows per sequence.
fn part_targets(tokens: &[usize], end: usize, termination: Termination, t: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; t];
    for (r, &tok) in tokens.iter().enumerate() {
        out[r] = Some(tok);
        if termination == Termination::End && tok == end {
            return out;
        }
    }
    if termination == Termination::End {
        out[tokens.len()] = Some(end);
    }
    out
}

/// Mean over parts of the per-part mean cross-entropy, from plain logits
/// (`(L+1) × (J+1)` per part, as returned by [`PartCoordStack::forward`]).
pub fn nll_loss(logits: &[Matrix], grid: &PartTokenGrid, termination: Termination) -> Result<f64> {
    if grid.parts.is_empty() || logits.len() != grid.parts.len() {
        return Err(Error::InvalidArgument("nll_loss needs a non-empty grid matching the logits".into()));
    }
    let mut total = 0.0;
    for (lg, tokens) in logits.iter().zip(&grid.parts) {
        if lg.rows() != tokens.len() + 1 {
            return Err(Error::Shape(format!("{} logit rows for {} tokens", lg.rows(), tokens.len())));
        }
        let end = lg.cols() - 1;
        let targets = part_targets(tokens, end, termination, lg.rows());
        let mut sum = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                sum -= log_softmax_at(lg.row(r), t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("grid has no target positions".into()));
        }
        total += sum / count as f64;
    }
    Ok(total / grid.parts.len() as f64)
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    ln1: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
}

/// Parameter handles of one coordination block.
#[derive(Clone, Copy, Debug)]
pub struct CoordBlock {
    mlp: [Lin; 3],
    ln: Norm,
}

impl CoordBlock {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.mlp.iter().flat_map(|l| [l.w, l.b]).collect();
        v.extend([self.ln.g, self.ln.b]);
        v
    }

    pub fn mlp_param_ids(&self) -> Vec<ParamId> {
        self.mlp.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[derive(Clone, Debug)]
struct Stream {
    tok: ParamId,
    pos: ParamId,
    cond: Lin,
    layers: Vec<Layer>,
    /// `coord[l - 1]` precedes layer `l`.
    coord: Vec<CoordBlock>,
    lnf: Norm,
    head: Lin,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data))
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        let bound = 1.0 / (i as f64).sqrt();
        Lin { w: self.uniform(format!("{name}.w"), i, o, bound), b: self.uniform(format!("{name}.b"), 1, o, bound) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Matrix::filled(1, d, 1.0)),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, d)),
        }
    }

    fn embedding(&mut self, name: String, rows: usize, d: usize) -> ParamId {
        self.uniform(name, rows, d, 0.05)
    }
}

/// Graph outputs of a batched forward pass.
pub struct StackOutput {
    /// Per part, `(seqs · t) × (J+1)` logits.
    pub logits: Vec<Var>,
    pub seqs: usize,
    /// Rows per sequence: padded token length plus one.
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct PartCoordStack {
    pub config: StackConfig,
    pub params: ParamStore,
    text_table: ParamId,
    streams: Vec<Stream>,
}

impl PartCoordStack {
    pub fn new(config: StackConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let f = config.ffn_mult * d;
        let (text_table, streams) = {
            let mut init = Init { store: &mut store, rng };
            let text_table = init.embedding("text.table".into(), config.text_buckets, config.text_dim);
            let mut streams = Vec::with_capacity(config.streams);
            for i in 0..config.streams {
                let p = format!("p{i}");
                let tok = init.embedding(format!("{p}.tok"), config.vocab + 2, d);
                let pos = init.embedding(format!("{p}.pos"), config.max_tokens + 1, d);
                let cond = init.lin(&format!("{p}.cond"), config.text_dim, d);
                let mut layers = Vec::new();
                let mut coord = Vec::new();
                for l in 0..config.layers {
                    if l > 0 && config.has_coordination() {
                        let c = format!("{p}.coord{l}");
                        coord.push(CoordBlock {
                            mlp: [
                                init.lin(&format!("{c}.mlp0"), (config.streams - 1) * d, d),
                                init.lin(&format!("{c}.mlp1"), d, d),
                                init.lin(&format!("{c}.mlp2"), d, d),
                            ],
                            ln: init.norm(&format!("{c}.ln"), d),
                        });
                    }
                    let q = format!("{p}.layer{l}");
                    layers.push(Layer {
                        ln1: init.norm(&format!("{q}.ln1"), d),
                        q: init.lin(&format!("{q}.attn.q"), d, d),
                        k: init.lin(&format!("{q}.attn.k"), d, d),
                        v: init.lin(&format!("{q}.attn.v"), d, d),
                        o: init.lin(&format!("{q}.attn.o"), d, d),
                        ln2: init.norm(&format!("{q}.ln2"), d),
                        ff1: init.lin(&format!("{q}.ff1"), d, f),
                        ff2: init.lin(&format!("{q}.ff2"), f, d),
                    });
                }
                let lnf = init.norm(&format!("{p}.lnf"), d);
                let head = init.lin(&format!("{p}.head"), d, config.vocab + 1);
                streams.push(Stream { tok, pos, cond, layers, coord, lnf, head });
            }
            (text_table, streams)
        };
        Ok(PartCoordStack { config, params: store, text_table, streams })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// The coordination block of `part` placed before `layer` (`1 ≤ layer < layers`).
    pub fn coord_block(&self, part: usize, layer: usize) -> Option<CoordBlock> {
        let s = self.streams.get(part)?;
        layer.checked_sub(1).and_then(|l| s.coord.get(l)).copied()
    }

    /// Sets every coordination MLP weight and bias to zero, severing the streams.
    pub fn zero_coordination_mlps(&mut self) {
        let ids: Vec<ParamId> =
            self.streams.iter().flat_map(|s| s.coord.iter().flat_map(|c| c.mlp_param_ids())).collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn head_bias_id(&self, part: usize) -> ParamId {
        self.streams[part].head.b
    }

    pub fn head_weight_id(&self, part: usize) -> ParamId {
        self.streams[part].head.w
    }

    fn text_features(&self, g: &mut Graph, conds: &[TextCondition]) -> Result<Var> {
        let cfg = &self.config;
        let mut pool = Matrix::zeros(conds.len(), cfg.text_buckets);
        let mut external = Matrix::zeros(conds.len(), cfg.text_dim);
        for (b, c) in conds.iter().enumerate() {
            match &c.embedding {
                Some(e) => {
                    if e.len() != cfg.text_dim || e.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidArgument(format!(
                            "text embedding must be {} finite values",
                            cfg.text_dim
                        )));
                    }
                    external.row_mut(b).copy_from_slice(e);
                }
                None => {
                    let toks = prompt_tokens(&c.prompt);
                    let w = 1.0 / toks.len().max(1) as f64;
                    for t in toks {
                        let j = bucket(&t, cfg.text_buckets);
                        pool.set(b, j, pool.get(b, j) + w);
                    }
                }
            }
        }
        let pool = g.constant(pool);
        let table = g.param(self.text_table);
        let bag = g.matmul(pool, table);
        let ext = g.constant(external);
        Ok(g.add(bag, ext))
    }

    fn lin(g: &mut Graph, x: Var, l: &Lin) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Var {
        let gain = g.param(n.g);
        let bias = g.param(n.b);
        g.layer_norm_affine(x, gain, bias, self.config.ln_eps)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng.as_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = g.constant(Matrix::from_vec(r, c, mask));
        g.mul(x, m)
    }

    /// One coordination layer applied to all streams at once.
    pub fn coordinate_graph(&self, g: &mut Graph, layer: usize, xs: &[Var]) -> Result<Vec<Var>> {
        let s = self.config.streams;
        if xs.len() != s {
            return Err(Error::Shape(format!("coordination needs {s} inputs, got {}", xs.len())));
        }
        let shape = g.shape(xs[0]);
        if shape.1 != self.config.model_dim || xs.iter().any(|&x| g.shape(x) != shape) {
            return Err(Error::Shape("coordination inputs must share shape (n, model_dim)".into()));
        }
        let mut out = Vec::with_capacity(s);
        for i in 0..s {
            let block = self
                .coord_block(i, layer)
                .ok_or_else(|| Error::InvalidArgument(format!("no coordination block before layer {layer}")))?;
            let others: Vec<Var> = (0..s).filter(|&j| j != i).map(|j| xs[j]).collect();
            let y = g.concat_cols(&others);
            let h = Self::lin(g, y, &block.mlp[0]);
            let h = g.gelu(h);
            let h = Self::lin(g, h, &block.mlp[1]);
            let h = g.gelu(h);
            let m = Self::lin(g, h, &block.mlp[2]);
            let r = g.add(xs[i], m);
            out.push(self.norm(g, r, &block.ln));
        }
        Ok(out)
    }

    /// Value form of [`coordinate_graph`](Self::coordinate_graph): one row per position.
    pub fn coordinate(&self, layer: usize, xs: &[Matrix]) -> Result<Vec<Matrix>> {
        let mut g = Graph::new(&self.params);
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = self.coordinate_graph(&mut g, layer, &vars)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Batched teacher-forcing forward. Sequences shorter than the longest are
    /// right-padded with END; causality keeps the padding from influencing any
    /// real position. Passing an rng enables dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        inputs: &[PartTokenGrid],
        conds: &[TextCondition],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<StackOutput> {
        let cfg = &self.config;
        if inputs.is_empty() || inputs.len() != conds.len() {
            return Err(Error::InvalidArgument("forward needs one condition per grid and at least one grid".into()));
        }
        for grid in inputs {
            grid.check(cfg.streams, cfg.mask_id(), cfg.max_tokens)?;
        }
        let seqs = inputs.len();
        let t = inputs.iter().map(PartTokenGrid::len).max().unwrap_or(0) + 1;
        let text = self.text_features(g, conds)?;
        let pos_ids: Vec<usize> = (0..seqs).flat_map(|_| 0..t).collect();

        let mut xs = Vec::with_capacity(cfg.streams);
        for (i, st) in self.streams.iter().enumerate() {
            let cond = Self::lin(g, text, &st.cond);
            let tok = g.param(st.tok);
            let table = g.concat_rows(&[cond, tok]);
            let mut ids = Vec::with_capacity(seqs * t);
            for (b, grid) in inputs.iter().enumerate() {
                ids.push(b);
                let toks = &grid.parts[i];
                ids.extend((0..t - 1).map(|r| seqs + toks.get(r).copied().unwrap_or(cfg.end_id())));
            }
            let x = g.gather(table, &ids);
            let pos = g.param(st.pos);
            let pe = g.gather(pos, &pos_ids);
            let x = g.add(x, pe);
            xs.push(self.dropout(g, x, &mut dropout));
        }

        for l in 0..cfg.layers {
            if l > 0 && cfg.has_coordination() {
                xs = self.coordinate_graph(g, l, &xs)?;
            }
            for (x, st) in xs.iter_mut().zip(&self.streams) {
                let ly = &st.layers[l];
                let h = self.norm(g, *x, &ly.ln1);
                let q = Self::lin(g, h, &ly.q);
                let k = Self::lin(g, h, &ly.k);
                let v = Self::lin(g, h, &ly.v);
                let a = g.causal_attention(q, k, v, seqs, t, cfg.heads);
                let o = Self::lin(g, a, &ly.o);
                let o = self.dropout(g, o, &mut dropout);
                let x1 = g.add(*x, o);
                let h = self.norm(g, x1, &ly.ln2);
                let f = Self::lin(g, h, &ly.ff1);
                let f = g.gelu(f);
                let f = Self::lin(g, f, &ly.ff2);
                let f = self.dropout(g, f, &mut dropout);
                *x = g.add(x1, f);
            }
        }

        let logits = xs
            .iter()
            .zip(&self.streams)
            .map(|(&x, st)| {
                let h = self.norm(g, x, &st.lnf);
                Self::lin(g, h, &st.head)
            })
            .collect();
        Ok(StackOutput { logits, seqs, t })
    }

    /// Loss node: mean over parts of each part's mean cross-entropy over its
    /// valid target positions across the batch.
    pub fn nll_graph(
        &self,
        g: &mut Graph,
        out: &StackOutput,
        targets: &[PartTokenGrid],
        termination: Termination,
    ) -> Result<Var> {
        if targets.len() != out.seqs {
            return Err(Error::Shape("one target grid per batch sequence required".into()));
        }
        let end = self.config.end_id();
        let mut per_part = Vec::with_capacity(self.config.streams);
        for (i, &lg) in out.logits.iter().enumerate() {
            let mut rows = Vec::with_capacity(out.seqs * out.t);
            for grid in targets {
                grid.check(self.config.streams, end, self.config.max_tokens)?;
                if grid.len() + 1 > out.t {
                    return Err(Error::Shape("target grid longer than the forward pass".into()));
                }
                rows.extend(part_targets(&grid.parts[i], end, termination, out.t));
            }
            let count = rows.iter().filter(|r| r.is_some()).count();
            if count == 0 {
                return Err(Error::InvalidArgument("grid has no target positions".into()));
            }
            let ce = g.cross_entropy_sum(lg, &rows);
            per_part.push(g.scale(ce, 1.0 / count as f64));
        }
        let mut total = per_part[0];
        for &p in &per_part[1..] {
            total = g.add(total, p);
        }
        Ok(g.scale(total, 1.0 / per_part.len() as f64))
    }

    /// Logits for a single grid: per part an `(L+1) × (J+1)` matrix whose row
    /// `r` predicts the token at 0-based position `r` (row `L` predicts what
    /// follows the grid).
    pub fn forward(&self, grid: &PartTokenGrid, cond: &TextCondition) -> Result<Vec<Matrix>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, std::slice::from_ref(grid), std::slice::from_ref(cond), None)?;
        Ok(out.logits.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Mean NLL of a batch without dropout.
    pub fn evaluate_nll(
        &self,
        grids: &[PartTokenGrid],
        conds: &[TextCondition],
        termination: Termination,
    ) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, grids, conds, None)?;
        let loss = self.nll_graph(&mut g, &out, grids, termination)?;
        Ok(g.value(loss).item())
    }

    /// Lockstep sampling for one prompt.
    pub fn sample(
        &self,
        cond: &TextCondition,
        max_len: usize,
        strategy: SamplingStrategy,
        rng: &mut impl Rng,
    ) -> Result<PartTokenGrid> {
        Ok(self.sample_batch(std::slice::from_ref(cond), max_len, strategy, rng)?.remove(0))
    }

    /// Lockstep sampling for several prompts at once. At each step every part
    /// draws one token from its distribution at the newest position; a sequence
    /// stops at the first step where any part draws END (that step is dropped,
    /// leaving all parts the same length) or at `max_len`. Draws happen in
    /// sequence-major, part-minor order.
    pub fn sample_batch(
        &self,
        conds: &[TextCondition],
        max_len: usize,
        strategy: SamplingStrategy,
        rng: &mut impl Rng,
    ) -> Result<Vec<PartTokenGrid>> {
        let cfg = &self.config;
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if max_len > cfg.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "max_len {max_len} exceeds maximum context {}",
                cfg.max_tokens
            )));
        }
        strategy.validate(cfg.num_classes())?;
        let mut grids = vec![PartTokenGrid::empty(cfg.streams); conds.len()];
        let mut active: Vec<usize> = (0..conds.len()).collect();
        for step in 0..max_len {
            if active.is_empty() {
                break;
            }
            let batch: Vec<PartTokenGrid> = active.iter().map(|&b| grids[b].clone()).collect();
            let bconds: Vec<TextCondition> = active.iter().map(|&b| conds[b].clone()).collect();
            let mut g = Graph::new(&self.params);
            let out = self.forward_graph(&mut g, &batch, &bconds, None)?;
            let mut still = Vec::with_capacity(active.len());
            for (k, &b) in active.iter().enumerate() {
                let row = k * out.t + step;
                let picks: Vec<usize> = out.logits.iter().map(|&lg| strategy.pick(g.value(lg).row(row), rng)).collect();
                if picks.iter().any(|&p| p == cfg.end_id()) {
                    continue;
                }
                for (part, p) in grids[b].parts.iter_mut().zip(picks) {
                    part.push(p);
                }
                still.push(b);
            }
            active = still;
        }
        Ok(grids)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("generator");
        self.config.to_meta(&mut c);
        let order: Vec<&str> = if self.config.streams == crate::partition::NUM_PARTS {
            crate::partition::PartId::ALL.iter().map(|p| p.name()).collect()
        } else {
            Vec::new()
        };
        c.push_meta("part_order", order.join(","));
        c.push_params(&self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("generator")?;
        let config = StackConfig::from_meta(c)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut stack = PartCoordStack::new(config, &mut rng)?;
        c.load_params_into(&mut stack.params)?;
        Ok(stack)
    }
}
