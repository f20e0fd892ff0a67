//! Self-check suites run by `partcoord verify`.

use std::fmt::Write as _;
use std::str::FromStr;

use partcoord_tape::Matrix;
use rand::Rng;

use crate::codec::quantize_rows;
use crate::coordinator::{PartCoordStack, PartTokenGrid, StackConfig, TextCondition};
use crate::error::{Error, Result};
use crate::metrics::fid;
use crate::rng::rng_for;
use crate::trainer::{gradcheck, GradcheckOptions, GradcheckTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Causality,
    Quantizer,
    Fid,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "causality" => Ok(Suite::Causality),
            "quantizer" => Ok(Suite::Quantizer),
            "fid" => Ok(Suite::Fid),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown suite {s:?} (expected gradcheck, causality, quantizer, fid or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub quantizer_instances: usize,
    pub causality_instances: usize,
    /// Deliberately breaks one check per suite so that callers can confirm
    /// failures are detected and reported.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, quantizer_instances: 1000, causality_instances: 100, inject_fault: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            writeln!(s, "{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name).expect("String write");
            for d in &r.details {
                writeln!(s, "    {d}").expect("String write");
            }
        }
        s
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let suites = match suite {
        Suite::All => vec![Suite::Quantizer, Suite::Causality, Suite::Fid, Suite::Gradcheck],
        s => vec![s],
    };
    let suites = suites
        .into_iter()
        .map(|s| match s {
            Suite::Gradcheck => gradcheck_suite(opts),
            Suite::Causality => causality_suite(opts),
            Suite::Quantizer => Ok(quantizer_suite(opts)),
            Suite::Fid => fid_suite(opts),
            Suite::All => unreachable!("expanded above"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { suites })
}

/// Exhaustive nearest-code search: full squared distances, first minimum wins.
pub fn brute_force_nearest(e: &[f64], codes: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..codes.rows() {
        let d: f64 = e.iter().zip(codes.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// A random (latents, codebook) instance. Half the instances use small
/// integer coordinates so exact distance ties are common, and some codebooks
/// repeat rows.
pub fn random_quantizer_instance(rng: &mut impl Rng, max_codes: usize, max_dim: usize) -> (Matrix, Matrix) {
    let j = rng.gen_range(1..=max_codes);
    let d = rng.gen_range(1..=max_dim);
    let rows = rng.gen_range(1..=16);
    let integer = rng.gen_bool(0.5);
    let draw = |rng: &mut dyn rand::RngCore| {
        if integer {
            rng.gen_range(-2i32..=2) as f64
        } else {
            rng.gen_range(-1.0..1.0)
        }
    };
    let mut codes = Matrix::from_vec(j, d, (0..j * d).map(|_| draw(rng)).collect());
    if j > 1 && rng.gen_bool(0.5) {
        for _ in 0..rng.gen_range(1..=j.min(8)) {
            let (a, b) = (rng.gen_range(0..j), rng.gen_range(0..j));
            let src = codes.row(a).to_vec();
            codes.row_mut(b).copy_from_slice(&src);
        }
    }
    let mut latents = Matrix::from_vec(rows, d, (0..rows * d).map(|_| draw(rng)).collect());
    for r in 0..rows {
        if rng.gen_bool(0.25) {
            let src = codes.row(rng.gen_range(0..j)).to_vec();
            latents.row_mut(r).copy_from_slice(&src);
        }
    }
    (latents, codes)
}

fn quantizer_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = rng_for(opts.seed, "verify/quantizer", 0);
    let mut mismatches = 0;
    let mut rows = 0;
    for _ in 0..opts.quantizer_instances {
        let (latents, codes) = random_quantizer_instance(&mut rng, 512, 128);
        let got = quantize_rows(&latents, &codes).expect("instance dimensions agree");
        for (r, &g) in got.iter().enumerate() {
            let mut want = brute_force_nearest(latents.row(r), &codes);
            if opts.inject_fault && r == 0 {
                want = (want + 1) % (codes.rows() + 1);
            }
            rows += 1;
            mismatches += usize::from(g != want);
        }
    }
    SuiteReport {
        name: "quantizer",
        passed: mismatches == 0,
        details: vec![format!("{} instances, {rows} rows, {mismatches} index mismatches", opts.quantizer_instances)],
    }
}

/// Whether rows `0..rows` of two logit tables agree bit for bit.
fn prefix_bits_equal(a: &[Matrix], b: &[Matrix], rows: usize) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (0..rows).all(|r| x.row(r).iter().zip(y.row(r)).all(|(p, q)| p.to_bits() == q.to_bits())))
}

fn causality_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = rng_for(opts.seed, "verify/causality", 0);
    let cfg = StackConfig {
        vocab: 7,
        model_dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_tokens: 10,
        text_dim: 6,
        text_buckets: 16,
        ..StackConfig::default()
    };
    let model = PartCoordStack::new(cfg.clone(), &mut rng)?;
    let mut failures = 0;
    for _ in 0..opts.causality_instances {
        let len = rng.gen_range(1..=cfg.max_tokens);
        let parts: Vec<Vec<usize>> =
            (0..cfg.streams).map(|_| (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect()).collect();
        let grid = PartTokenGrid::new(parts)?;
        let cond = TextCondition::new("a person walks");
        let (part, pos) = (rng.gen_range(0..cfg.streams), rng.gen_range(0..len));
        let mut edited = grid.clone();
        edited.parts[part][pos] = (edited.parts[part][pos] + 1 + rng.gen_range(0..cfg.vocab - 1)) % cfg.vocab;
        let before = model.forward(&grid, &cond)?;
        let after = model.forward(&edited, &cond)?;
        // Row r predicts token r from tokens 0..r, so rows 0..=pos must not move.
        let rows = if opts.inject_fault { pos + 2 } else { pos + 1 };
        if !prefix_bits_equal(&before, &after, rows.min(len + 1)) {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "causality",
        passed: failures == 0,
        details: vec![format!("{} edited grids, {failures} with changed prefix logits", opts.causality_instances)],
    })
}

fn fid_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    // Two-point sets whose sample mean and variance are exactly (0, 1) and (1, 1).
    let a = Matrix::from_vec(2, 1, vec![-h, h]);
    let b = Matrix::from_vec(2, 1, vec![1.0 - h, 1.0 + h]);
    let shifted = fid(&a, &b)?;
    let mut rng = rng_for(opts.seed, "verify/fid", 0);
    let x = Matrix::from_vec(50, 4, (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let same = fid(&x, &x)?;
    let target = if opts.inject_fault { 2.0 } else { 1.0 };
    let ok_shift = (shifted - target).abs() <= 1e-6;
    let ok_same = same.abs() <= 1e-9;
    Ok(SuiteReport {
        name: "fid",
        passed: ok_shift && ok_same,
        details: vec![
            format!("N(0,1) vs N(1,1): {shifted:.12} (expected 1)"),
            format!("identical sets: {same:.3e} (expected 0)"),
        ],
    })
}

fn gradcheck_suite(opts: &VerifyOptions) -> Result<SuiteReport> {
    let gc = GradcheckOptions {
        seed: opts.seed,
        inject_fault: opts.inject_fault.then(|| "codebook".to_string()),
        ..GradcheckOptions::default()
    };
    let mut passed = true;
    let mut details = Vec::new();
    for target in [GradcheckTarget::LinearRegression, GradcheckTarget::Codec, GradcheckTarget::Generator] {
        let r = gradcheck(target, &gc)?;
        passed &= r.passed();
        details.push(format!("{target:?}: max relative error {:.3e}", r.max_rel_error()));
        details.extend(
            r.groups
                .iter()
                .filter(|g| !g.passed)
                .map(|g| format!("  group {} failed ({:.3e})", g.name, g.max_rel_error)),
        );
    }
    Ok(SuiteReport { name: "gradcheck", passed, details })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faults_are_reported() {
        let opts = VerifyOptions { quantizer_instances: 20, causality_instances: 5, ..VerifyOptions::default() };
        assert!(run(Suite::Fid, &opts).unwrap().passed());
        assert!(run(Suite::Quantizer, &opts).unwrap().passed());
        let bad = VerifyOptions { inject_fault: true, ..opts };
        assert!(!run(Suite::Fid, &bad).unwrap().passed());
        assert!(!run(Suite::Quantizer, &bad).unwrap().passed());
        assert!(!run(Suite::Causality, &bad).unwrap().passed());
    }
}
