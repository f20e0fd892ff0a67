//! Per-part vector-quantizing autoencoder.
//!
//! The encoder is a temporal convolution stack that halves the frame rate
//! `log2(r)` times; each latent vector is snapped to its nearest codebook entry
//! and the decoder mirrors the encoder with nearest-neighbour upsampling. The
//! decoder consumes the straight-through composition of latents and codes, so
//! reconstruction gradients reach the encoder while the codebook learns only
//! from its own loss term.

use partcoord_tape::{Conv1dGeom, Graph, Matrix, ParamId, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::partition::{PartId, PartMotion};

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Feature columns of the part this codec models.
    pub input_dim: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Temporal downsampling rate; must be a power of two.
    pub downsample: usize,
    pub commitment_weight: f64,
    pub velocity_weight: f64,
    /// Channel width of the convolution stacks.
    pub width: usize,
    /// Residual blocks per resolution level.
    pub res_blocks: usize,
}

impl CodecConfig {
    /// Full-size settings: 512 codes, code dimension 128 (64 for the root),
    /// rate 4, commitment weight 1.
    pub fn full(part: PartId, input_dim: usize) -> Self {
        let small = part == PartId::Root;
        CodecConfig {
            input_dim,
            codebook_size: 512,
            code_dim: if small { 64 } else { 128 },
            downsample: 4,
            commitment_weight: 1.0,
            velocity_weight: 0.5,
            width: if small { 64 } else { 128 },
            res_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 || self.codebook_size == 0 || self.code_dim == 0 || self.width == 0 {
            return bad("codec dimensions must be positive");
        }
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return bad("downsample must be a positive power of two");
        }
        if !(self.commitment_weight >= 0.0) || !(self.velocity_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn to_meta(&self, c: &mut Container) {
        c.push_meta("input_dim", self.input_dim);
        c.push_meta("codebook_size", self.codebook_size);
        c.push_meta("code_dim", self.code_dim);
        c.push_meta("downsample", self.downsample);
        c.push_meta("commitment_weight", self.commitment_weight);
        c.push_meta("velocity_weight", self.velocity_weight);
        c.push_meta("width", self.width);
        c.push_meta("res_blocks", self.res_blocks);
    }

    pub fn from_meta(c: &Container) -> Result<Self> {
        Ok(CodecConfig {
            input_dim: c.meta_parse("input_dim")?,
            codebook_size: c.meta_parse("codebook_size")?,
            code_dim: c.meta_parse("code_dim")?,
            downsample: c.meta_parse("downsample")?,
            commitment_weight: c.meta_parse("commitment_weight")?,
            velocity_weight: c.meta_parse("velocity_weight")?,
            width: c.meta_parse("width")?,
            res_blocks: c.meta_parse("res_blocks")?,
        })
    }
}

/// Encoder output for one sequence: `L × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub vectors: Matrix,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

/// Code indices and the selected code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSequence {
    pub indices: Vec<usize>,
    pub vectors: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `J × d`.
    pub codes: Matrix,
    pub usage: Vec<u64>,
}

/// Index of the nearest code by squared Euclidean distance; ties go to the
/// lowest index. Partial sums are abandoned once they exceed the best distance
/// so far, which never changes the result because every term is non-negative.
pub fn nearest_code(e: &[f64], codes: &Matrix) -> usize {
    debug_assert_eq!(e.len(), codes.cols());
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    'codes: for j in 0..codes.rows() {
        let mut d = 0.0;
        for (a, b) in e.iter().zip(codes.row(j)) {
            let diff = a - b;
            d += diff * diff;
            if d > best_d {
                continue 'codes;
            }
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Row-wise nearest-code search.
pub fn quantize_rows(latents: &Matrix, codes: &Matrix) -> Result<Vec<usize>> {
    if latents.cols() != codes.cols() {
        return Err(Error::Shape(format!("latent width {} vs code width {}", latents.cols(), codes.cols())));
    }
    if codes.rows() == 0 {
        return Err(Error::Shape("empty codebook".into()));
    }
    Ok(latents.iter_rows().map(|r| nearest_code(r, codes)).collect())
}

fn reset_dead(
    codes: &mut Matrix,
    usage: &mut [u64],
    latents: &Matrix,
    threshold: u64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if latents.rows() == 0 {
        return Err(Error::InvalidArgument("dead-code reset needs a non-empty latent batch".into()));
    }
    if latents.cols() != codes.cols() {
        return Err(Error::Shape("latent width does not match codebook".into()));
    }
    let dead: Vec<usize> = (0..codes.rows()).filter(|&j| usage[j] < threshold).collect();
    let rows: Vec<usize> = (0..latents.rows()).collect();
    for &j in &dead {
        let &r = rows.choose(rng).expect("non-empty");
        codes.row_mut(j).copy_from_slice(latents.row(r));
    }
    usage.iter_mut().for_each(|u| *u = 0);
    Ok(dead)
}

impl Codebook {
    pub fn new(codes: Matrix) -> Result<Self> {
        if codes.rows() == 0 || codes.cols() == 0 {
            return Err(Error::Shape("codebook needs at least one code of positive dimension".into()));
        }
        if !codes.is_finite() {
            return Err(Error::Shape("codebook contains non-finite values".into()));
        }
        let usage = vec![0; codes.rows()];
        Ok(Codebook { codes, usage })
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn quantize(&self, e: &LatentSequence) -> Result<QuantizedSequence> {
        let indices = quantize_rows(&e.vectors, &self.codes)?;
        let mut vectors = Matrix::zeros(indices.len(), self.dim());
        for (r, &j) in indices.iter().enumerate() {
            vectors.row_mut(r).copy_from_slice(self.codes.row(j));
        }
        Ok(QuantizedSequence { indices, vectors })
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &j in indices {
            self.usage[j] += 1;
        }
    }

    /// Re-seeds every code used fewer than `threshold` times since the last
    /// reset with a randomly chosen row of `latents`, then clears all counters.
    /// Returns the re-seeded indices. A threshold of 0 never re-seeds.
    pub fn reset_dead_codes(&mut self, latents: &Matrix, threshold: u64, rng: &mut impl Rng) -> Result<Vec<usize>> {
        reset_dead(&mut self.codes, &mut self.usage, latents, threshold, rng)
    }
}

/// Free-function form of [`Codebook::quantize`].
pub fn quantize(e: &LatentSequence, book: &Codebook) -> Result<QuantizedSequence> {
    book.quantize(e)
}

/// `from + sg(to − from)` with an exact forward value of `to`.
pub fn straight_through_compose(g: &mut Graph, latents: Var, codes: Var) -> Var {
    g.straight_through(latents, codes)
}

/// Loss value and its parts. `total` is evaluated as
/// `((reconstruction + codebook) + commitment) + velocity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub codebook: f64,
    /// Already multiplied by the commitment weight.
    pub commitment: f64,
    /// Already multiplied by the velocity weight.
    pub velocity: f64,
    pub total: f64,
}

/// Graph nodes of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub velocity: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            reconstruction: g.value(self.reconstruction).item(),
            codebook: g.value(self.codebook).item(),
            commitment: g.value(self.commitment).item(),
            velocity: g.value(self.velocity).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Quantizer objective on graph nodes. `target`/`recon` hold `seqs` sequences of
/// equal length stacked row-wise; squared norms are mean-reduced.
pub fn loss_terms(
    g: &mut Graph,
    target: Var,
    recon: Var,
    latents: Var,
    codes: Var,
    cfg: &CodecConfig,
    seqs: usize,
) -> Result<LossVars> {
    if g.shape(target) != g.shape(recon) {
        return Err(Error::Shape(format!("reconstruction {:?} vs target {:?}", g.shape(recon), g.shape(target))));
    }
    if g.shape(latents) != g.shape(codes) {
        return Err(Error::Shape(format!("latents {:?} vs codes {:?}", g.shape(latents), g.shape(codes))));
    }
    let reconstruction = g.mse(recon, target);
    let sg_latents = g.stop_grad(latents);
    let codebook = g.mse(sg_latents, codes);
    let sg_codes = g.stop_grad(codes);
    let commit = g.mse(latents, sg_codes);
    let commitment = g.scale(commit, cfg.commitment_weight);
    let frames = g.shape(target).0 / seqs.max(1);
    let velocity = if frames >= 2 {
        let dr = g.time_diff(recon, seqs);
        let dt = g.time_diff(target, seqs);
        let v = g.mse(dr, dt);
        g.scale(v, cfg.velocity_weight)
    } else {
        g.constant(Matrix::scalar(0.0))
    };
    let a = g.add(reconstruction, codebook);
    let b = g.add(a, commitment);
    let total = g.add(b, velocity);
    Ok(LossVars { reconstruction, codebook, commitment, velocity, total })
}

/// Evaluates the objective for one sequence on plain values.
pub fn vqvae_loss(
    target: &PartMotion,
    recon: &PartMotion,
    latents: &LatentSequence,
    quantized: &QuantizedSequence,
    cfg: &CodecConfig,
) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = g.constant(target.features.clone());
    let r = g.constant(recon.features.clone());
    let e = g.constant(latents.vectors.clone());
    let q = g.constant(quantized.vectors.clone());
    Ok(loss_terms(&mut g, t, r, e, q, cfg, 1)?.values(&g))
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

#[derive(Clone, Debug)]
struct Arch {
    enc_in: Conv,
    enc_levels: Vec<(Conv, Vec<ResBlock>)>,
    enc_out: Conv,
    dec_in: Conv,
    dec_levels: Vec<(Vec<ResBlock>, Conv)>,
    dec_out: Conv,
    codebook: ParamId,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect())
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Conv {
        let fan_in = (kernel * c_in) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = self.store.add(format!("{name}.w"), uniform(kernel * c_in, c_out, bound, self.rng));
        let b = self.store.add(format!("{name}.b"), uniform(1, c_out, bound, self.rng));
        Conv { w, b, kernel, stride, pad }
    }

    fn res(&mut self, name: &str, width: usize) -> ResBlock {
        ResBlock {
            a: self.conv(&format!("{name}.a"), width, width, 3, 1, 1),
            b: self.conv(&format!("{name}.b"), width, width, 1, 1, 0),
        }
    }
}

fn apply_conv(g: &mut Graph, x: Var, c: &Conv, seqs: usize, t_in: usize) -> (Var, usize) {
    let geom = Conv1dGeom { seqs, t_in, kernel: c.kernel, stride: c.stride, pad: c.pad };
    let t_out = geom.t_out();
    let cols = if c.kernel == 1 && c.stride == 1 && c.pad == 0 { x } else { g.im2col(x, geom) };
    let w = g.param(c.w);
    let b = g.param(c.b);
    (g.linear(cols, w, b), t_out)
}

fn apply_res(g: &mut Graph, x: Var, r: &ResBlock, seqs: usize, t: usize) -> Var {
    let h = g.relu(x);
    let (h, _) = apply_conv(g, h, &r.a, seqs, t);
    let h = g.relu(h);
    let (h, _) = apply_conv(g, h, &r.b, seqs, t);
    g.add(x, h)
}

/// Result of a batched training forward pass.
pub struct CodecForward {
    pub loss: LossVars,
    pub latents: Var,
    pub recon: Var,
    pub indices: Vec<usize>,
}

/// One part's encoder, codebook and decoder.
#[derive(Clone, Debug)]
pub struct PartCodec {
    pub part: PartId,
    pub config: CodecConfig,
    pub params: ParamStore,
    usage: Vec<u64>,
    arch: Arch,
}

impl PartCodec {
    pub fn new(part: PartId, config: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let w = config.width;
        let arch = {
            let mut b = Builder { store: &mut store, rng };
            let enc_in = b.conv("enc.in", config.input_dim, w, 3, 1, 1);
            let enc_levels = (0..config.levels())
                .map(|l| {
                    let down = b.conv(&format!("enc.down{l}"), w, w, 4, 2, 1);
                    let res = (0..config.res_blocks).map(|k| b.res(&format!("enc.down{l}.res{k}"), w)).collect();
                    (down, res)
                })
                .collect();
            let enc_out = b.conv("enc.out", w, config.code_dim, 3, 1, 1);
            let dec_in = b.conv("dec.in", config.code_dim, w, 3, 1, 1);
            let dec_levels = (0..config.levels())
                .map(|l| {
                    let res = (0..config.res_blocks).map(|k| b.res(&format!("dec.up{l}.res{k}"), w)).collect();
                    (res, b.conv(&format!("dec.up{l}"), w, w, 3, 1, 1))
                })
                .collect();
            let dec_out = b.conv("dec.out", w, config.input_dim, 3, 1, 1);
            let bound = 1.0 / config.codebook_size as f64;
            let codebook = b.store.add("codebook", uniform(config.codebook_size, config.code_dim, bound, b.rng));
            Arch { enc_in, enc_levels, enc_out, dec_in, dec_levels, dec_out, codebook }
        };
        Ok(PartCodec { part, usage: vec![0; config.codebook_size], config, params: store, arch })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.arch.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook { codes: self.params.get(self.arch.codebook).clone(), usage: self.usage.clone() }
    }

    pub fn set_codebook(&mut self, book: Codebook) -> Result<()> {
        let cur = self.params.get(self.arch.codebook);
        if book.codes.shape() != cur.shape() || book.usage.len() != book.codes.rows() {
            return Err(Error::Shape("codebook shape does not match codec".into()));
        }
        *self.params.get_mut(self.arch.codebook) = book.codes;
        self.usage = book.usage;
        Ok(())
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &j in indices {
            self.usage[j] += 1;
        }
    }

    pub fn reset_dead_codes(&mut self, latents: &Matrix, threshold: u64, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let id = self.arch.codebook;
        reset_dead(self.params.get_mut(id), &mut self.usage, latents, threshold, rng)
    }

    /// Overwrites the final encoder layer with zeros (a null map).
    pub fn zero_encoder_output(&mut self) {
        for id in [self.arch.enc_out.w, self.arch.enc_out.b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn zero_decoder_output(&mut self) {
        for id in [self.arch.dec_out.w, self.arch.dec_out.b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Batched encoder: `seqs` stacked sequences of `t` frames each.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, seqs: usize, t: usize) -> Result<Var> {
        if t % self.config.downsample != 0 {
            return Err(Error::NotDivisible { frames: t, rate: self.config.downsample });
        }
        let a = &self.arch;
        let (mut h, mut t) = apply_conv(g, x, &a.enc_in, seqs, t);
        h = g.relu(h);
        for (down, res) in &a.enc_levels {
            let (hh, tt) = apply_conv(g, h, down, seqs, t);
            h = hh;
            t = tt;
            for r in res {
                h = apply_res(g, h, r, seqs, t);
            }
        }
        h = g.relu(h);
        Ok(apply_conv(g, h, &a.enc_out, seqs, t).0)
    }

    /// Batched decoder on `seqs` stacked latent sequences of length `l`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, seqs: usize, l: usize) -> Var {
        let a = &self.arch;
        let (mut h, mut t) = apply_conv(g, z, &a.dec_in, seqs, l);
        h = g.relu(h);
        for (res, conv) in &a.dec_levels {
            for r in res {
                h = apply_res(g, h, r, seqs, t);
            }
            h = g.repeat_rows(h, 2);
            t *= 2;
            h = apply_conv(g, h, conv, seqs, t).0;
        }
        h = g.relu(h);
        apply_conv(g, h, &a.dec_out, seqs, t).0
    }

    fn check_part(&self, part: &PartMotion) -> Result<()> {
        if part.features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "part {} has {} columns, codec expects {}",
                part.part,
                part.features.cols(),
                self.config.input_dim
            )));
        }
        if part.frames() % self.config.downsample != 0 {
            return Err(Error::NotDivisible { frames: part.frames(), rate: self.config.downsample });
        }
        Ok(())
    }

    pub fn encode(&self, part: &PartMotion) -> Result<LatentSequence> {
        self.check_part(part)?;
        if part.frames() == 0 {
            return Ok(LatentSequence { vectors: Matrix::zeros(0, self.config.code_dim) });
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(part.features.clone());
        let e = self.encode_graph(&mut g, x, 1, part.frames())?;
        Ok(LatentSequence { vectors: g.value(e).clone() })
    }

    pub fn quantize(&self, e: &LatentSequence) -> Result<QuantizedSequence> {
        self.codebook().quantize(e)
    }

    pub fn decode(&self, q: &QuantizedSequence) -> Result<PartMotion> {
        if q.vectors.cols() != self.config.code_dim {
            return Err(Error::Shape("quantized width does not match code dimension".into()));
        }
        let frames = q.indices.len() * self.config.downsample;
        if q.indices.is_empty() {
            return Ok(PartMotion { part: self.part, features: Matrix::zeros(0, self.config.input_dim) });
        }
        let mut g = Graph::new(&self.params);
        let z = g.constant(q.vectors.clone());
        let out = self.decode_graph(&mut g, z, 1, q.indices.len());
        debug_assert_eq!(g.shape(out).0, frames);
        Ok(PartMotion { part: self.part, features: g.value(out).clone() })
    }

    /// Looks up code vectors for `indices` (e.g. generated tokens) and decodes them.
    pub fn decode_indices(&self, indices: &[usize]) -> Result<PartMotion> {
        let codes = self.params.get(self.arch.codebook);
        if let Some(&bad) = indices.iter().find(|&&j| j >= codes.rows()) {
            return Err(Error::InvalidArgument(format!("code index {bad} out of range {}", codes.rows())));
        }
        let mut vectors = Matrix::zeros(indices.len(), codes.cols());
        for (r, &j) in indices.iter().enumerate() {
            vectors.row_mut(r).copy_from_slice(codes.row(j));
        }
        self.decode(&QuantizedSequence { indices: indices.to_vec(), vectors })
    }

    /// Token indices for a part motion (encode + quantize).
    pub fn tokenize(&self, part: &PartMotion) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(part)?)?.indices)
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, part: &PartMotion) -> Result<PartMotion> {
        let q = self.quantize(&self.encode(part)?)?;
        self.decode(&q)
    }

    /// Training forward on a batch (`seqs × t` frames stacked). With
    /// `frozen_indices`, quantization is skipped and those indices are used.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        batch: &Matrix,
        seqs: usize,
        t: usize,
        frozen_indices: Option<&[usize]>,
    ) -> Result<CodecForward> {
        if batch.rows() != seqs * t || batch.cols() != self.config.input_dim {
            return Err(Error::Shape(format!("batch {:?} vs {seqs}x{t}x{}", batch.shape(), self.config.input_dim)));
        }
        let x = g.constant(batch.clone());
        self.forward_loss_var(g, x, seqs, t, frozen_indices)
    }

    /// Like [`forward_loss`](Self::forward_loss) with the input already on the graph.
    pub fn forward_loss_var(
        &self,
        g: &mut Graph,
        x: Var,
        seqs: usize,
        t: usize,
        frozen_indices: Option<&[usize]>,
    ) -> Result<CodecForward> {
        let e = self.encode_graph(g, x, seqs, t)?;
        let indices = match frozen_indices {
            Some(ix) => ix.to_vec(),
            None => quantize_rows(g.value(e), self.params.get(self.arch.codebook))?,
        };
        let book = g.param(self.arch.codebook);
        let q = g.gather(book, &indices);
        let st = straight_through_compose(g, e, q);
        let recon = self.decode_graph(g, st, seqs, t / self.config.downsample);
        let loss = loss_terms(g, x, recon, e, q, &self.config, seqs)?;
        Ok(CodecForward { loss, latents: e, recon, indices })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("codec");
        c.push_meta("part", self.part.name());
        self.config.to_meta(&mut c);
        c.push_params(&self.params);
        c.push_tensor("usage", Matrix::from_vec(1, self.usage.len(), self.usage.iter().map(|&u| u as f64).collect()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("codec")?;
        let part: PartId = c.require_meta("part")?.parse()?;
        let config = CodecConfig::from_meta(c)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut codec = PartCodec::new(part, config, &mut rng)?;
        c.load_params_into(&mut codec.params)?;
        let usage = c.require_tensor("usage")?;
        if usage.len() != codec.usage.len() {
            return Err(Error::Checkpoint("usage counter length mismatch".into()));
        }
        codec.usage = usage.data().iter().map(|&u| u as u64).collect();
        Ok(codec)
    }
}
