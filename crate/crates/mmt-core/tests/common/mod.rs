//! Shared test support: independent f64 reference implementations of every
//! differentiable operation, a central finite-difference harness, and toy
//! corpus builders.
//!
//! The references never touch the tape; they are the oracle side of every
//! gradient check.

#![allow(dead_code)]

use mmt_core::data::vocab::{BOS, EOS};
use mmt_core::data::{FeatureTable, ParallelExample, Vocabulary};
use mmt_core::rng::RngStream;
use mmt_core::tensor::{Tape, Var};

pub const FD_H: f64 = 1e-3;
pub const PER_OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

// ── f64 reference ops ───────────────────────────────────────────────

pub fn ref_matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn ref_matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn ref_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * rstd * gamma[i] + beta[i];
        }
    }
    out
}

pub fn ref_masked_softmax(x: &[f64], mask: &[bool], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mrow = &mask[r * d..(r + 1) * d];
        let max = row
            .iter()
            .zip(mrow)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 =
            row.iter().zip(mrow).filter(|(_, &m)| m).map(|(&v, _)| (v - max).exp()).sum();
        for i in 0..d {
            if mrow[i] {
                out[r * d + i] = (row[i] - max).exp() / denom;
            }
        }
    }
    out
}

pub fn ref_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - logz).collect()
}

/// Label-smoothed cross entropy summed over non-pad positions.
pub fn ref_ce_ls_sum(logits: &[f64], targets: &[u32], pad: u32, eps: f64, v: usize) -> f64 {
    let non_pad = if (pad as usize) < v { v - 1 } else { v };
    let uniform = if non_pad > 0 { eps / non_pad as f64 } else { 0.0 };
    let mut loss = 0.0;
    for (r, &gold) in targets.iter().enumerate() {
        if gold == pad {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let logp = ref_log_softmax(row);
        for (k, &lp) in logp.iter().enumerate() {
            let q = if k as u32 == pad {
                0.0
            } else if k as u32 == gold {
                (1.0 - eps) + uniform
            } else {
                uniform
            };
            loss -= q * lp;
        }
    }
    loss
}

/// KL(softmax(zs) || softmax(za)) summed over unmasked rows.
pub fn ref_kl_sum(zs: &[f64], za: &[f64], mask: &[bool], v: usize) -> f64 {
    let mut total = 0.0;
    for (r, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let ls = ref_log_softmax(&zs[r * v..(r + 1) * v]);
        let la = ref_log_softmax(&za[r * v..(r + 1) * v]);
        for k in 0..v {
            total += ls[k].exp() * (ls[k] - la[k]);
        }
    }
    total
}

/// Relaxed transport distance, re-solving the assignment from scratch.
pub fn ref_relaxed_ot(s: &[f64], t: &[f64]) -> f64 {
    let norm: f64 = s.iter().map(|v| v.abs()).sum();
    let mut dist = 0.0;
    for &sv in s {
        let mut best = f64::INFINITY;
        for &tv in t {
            best = best.min((sv - tv).abs());
        }
        dist += (sv.abs() / norm) * best;
    }
    dist
}

// ── Finite-difference harness ───────────────────────────────────────

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| f64::from(v)).collect()
}

/// Check analytic gradients of `engine` against central finite differences
/// of `reference` (an independent f64 path). The op output is contracted to
/// a scalar with fixed pseudo-random weights so non-scalar ops are covered.
///
/// Tolerance semantics: |analytic - fd| <= tol * max(1, |fd|).
pub fn gradcheck(
    label: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    engine: impl Fn(&mut Tape, &[Var]) -> mmt_core::Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    tol: f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(data.clone(), shape.clone(), true).unwrap())
        .collect();
    let out = engine(&mut tape, &vars).unwrap_or_else(|e| panic!("{label}: engine failed: {e}"));
    let out_shape = tape.shape(out).to_vec();
    let out_numel: usize = out_shape.iter().product();

    let mut wrng = RngStream::named(0xAB, "gradcheck-weights");
    let weights: Vec<f32> = (0..out_numel).map(|_| wrng.uniform(0.5, 1.5) as f32).collect();
    let wvar = tape.constant(weights.clone(), out_shape).unwrap();
    let prod = tape.mul(out, wvar).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let f64_inputs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| to_f64(d)).collect();

    // the reference must agree with the engine forward before FD means anything
    let ref_out = reference(&f64_inputs);
    assert_eq!(ref_out.len(), out_numel, "{label}: reference output length");
    for (i, (&a, &r)) in tape.data(out).iter().zip(&ref_out).enumerate() {
        let diff = (f64::from(a) - r).abs();
        assert!(
            diff <= 1e-4 * r.abs().max(1.0),
            "{label}: forward mismatch at {i}: engine {a} vs reference {r}"
        );
    }

    let scalar = |ins: &[Vec<f64>]| -> f64 {
        reference(ins)
            .iter()
            .zip(&weights)
            .map(|(o, &w)| o * f64::from(w))
            .sum()
    };

    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f32]>::to_vec);
        for j in 0..f64_inputs[i].len() {
            let mut plus = f64_inputs.to_vec();
            plus[i][j] += FD_H;
            let mut minus = f64_inputs.to_vec();
            minus[i][j] -= FD_H;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * FD_H);
            let a = analytic.as_ref().map_or(0.0, |g| f64::from(g[j]));
            let err = (a - fd).abs();
            assert!(
                err <= tol * fd.abs().max(1.0),
                "{label}: grad mismatch input {i} elem {j}: analytic {a} vs fd {fd} (err {err:.3e})"
            );
        }
    }
}

// ── Toy corpus builders ─────────────────────────────────────────────

pub const TOY_WORDS: [&str; 12] = [
    "anna", "bo", "cat", "dog", "elm", "fox", "gull", "hen", "ibis", "jay", "kit", "lark",
];

/// Deterministic word-level parallel corpus: the target is a word-wise
/// mapping of the source (text determines the translation). Sentences are
/// distinct across the corpus.
pub fn text_determined_corpus(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = RngStream::named(seed, "toy-corpus");
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = 3 + rng.below(3);
        let words: Vec<&str> = (0..len).map(|_| TOY_WORDS[rng.below(TOY_WORDS.len())]).collect();
        let src = words.join(" ");
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt: Vec<String> = words.iter().map(|w| format!("{w}x")).collect();
        out.push((src, tgt.join(" ")));
    }
    out
}

/// Build vocabulary + examples + paired feature tables from raw sentence
/// pairs. `make_features` maps the example index to (syn, aut) vectors.
pub fn build_dataset(
    pairs: &[(String, String)],
    d_feat: usize,
    mut make_features: impl FnMut(usize) -> (Vec<f32>, Vec<f32>),
) -> (Vocabulary, Vec<ParallelExample>, FeatureTable, FeatureTable) {
    let mut lines: Vec<&str> = Vec::new();
    for (s, t) in pairs {
        lines.push(s);
        lines.push(t);
    }
    let vocab = Vocabulary::build(lines.iter().copied()).unwrap();
    let mut syn = FeatureTable::new(d_feat);
    let mut aut = FeatureTable::new(d_feat);
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, (s, t)) in pairs.iter().enumerate() {
        let id = format!("img{i:04}");
        let (fs, fa) = make_features(i);
        syn.insert(id.clone(), fs).unwrap();
        aut.insert(id.clone(), fa).unwrap();
        let mut tgt = vec![BOS];
        tgt.extend(vocab.encode_line(t));
        tgt.push(EOS);
        examples.push(ParallelExample { src: vocab.encode_line(s), tgt, image_id: id });
    }
    (vocab, examples, syn, aut)
}

/// Exact-match rate of greedy decoding against the gold targets.
pub fn greedy_exact_match(
    model: &mut mmt_core::model::MultimodalTransformer,
    examples: &[ParallelExample],
    table: &FeatureTable,
    max_len: usize,
) -> f64 {
    let mut hits = 0usize;
    for ex in examples {
        let mask = vec![true; ex.src.len()];
        let feat = table.get(&ex.image_id).unwrap();
        let hyp =
            mmt_core::infer::greedy_decode(model, &ex.src, &mask, feat, max_len).unwrap();
        model.reset();
        let gold: Vec<u32> = ex.tgt[1..].to_vec(); // y..eos
        if hyp.tokens == gold {
            hits += 1;
        }
    }
    hits as f64 / examples.len() as f64
}
