//! A second, straight-line implementation of the forward pass, written
//! with plain loops over `Vec<f64>`, checked against the model's scoring
//! path on a fixed example.

use lilt_core::model::{ModelConfig, ModelState};
use lilt_core::tensor::Matrix;
use lilt_core::vocab::{BOS, EOS};

const D: usize = 4;
const FF: usize = 8;

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn param(model: &ModelState<f64>, name: &str) -> Vec<Vec<f64>> {
    rows(model.param_by_name(name).unwrap_or_else(|| panic!("param {name}")))
}

fn matvec(mat: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    // x * mat with mat laid out [in x out]
    let mut out = vec![0.0; mat[0].len()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * mat[i][j];
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * rstd * g[j] + b[j])
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn pe(t: usize) -> Vec<f64> {
    let mut row = vec![0.0; D];
    for i in 0..D / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / D as f64);
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    row
}

/// Single-head attention of one query row over all key/value rows,
/// optionally restricted to the first `limit` rows.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], limit: usize) -> Vec<f64> {
    let scale = 1.0 / (D as f64).sqrt(); // one head: d_head == d_model
    let scores: Vec<f64> = keys[..limit]
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let probs = softmax(&scores);
    let mut out = vec![0.0; D];
    for (p, v) in probs.iter().zip(&values[..limit]) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += p * vi;
        }
    }
    out
}

struct Attn {
    wq: Vec<Vec<f64>>,
    bq: Vec<f64>,
    wk: Vec<Vec<f64>>,
    bk: Vec<f64>,
    wv: Vec<Vec<f64>>,
    bv: Vec<f64>,
    wo: Vec<Vec<f64>>,
    bo: Vec<f64>,
}

fn attn_params(model: &ModelState<f64>, prefix: &str) -> Attn {
    Attn {
        wq: param(model, &format!("{prefix}.wq")),
        bq: param(model, &format!("{prefix}.bq"))[0].clone(),
        wk: param(model, &format!("{prefix}.wk")),
        bk: param(model, &format!("{prefix}.bk"))[0].clone(),
        wv: param(model, &format!("{prefix}.wv")),
        bv: param(model, &format!("{prefix}.bv"))[0].clone(),
        wo: param(model, &format!("{prefix}.wo")),
        bo: param(model, &format!("{prefix}.bo"))[0].clone(),
    }
}

type Rows = Vec<Vec<f64>>;

fn project(attn: &Attn, xs: &[Vec<f64>]) -> (Rows, Rows, Rows) {
    let q = xs.iter().map(|x| add(&matvec(&attn.wq, x), &attn.bq)).collect();
    let k = xs.iter().map(|x| add(&matvec(&attn.wk, x), &attn.bk)).collect();
    let v = xs.iter().map(|x| add(&matvec(&attn.wv, x), &attn.bv)).collect();
    (q, k, v)
}

fn ff(model: &ModelState<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w1 = param(model, &format!("{prefix}.w1"));
    let b1 = param(model, &format!("{prefix}.b1"))[0].clone();
    let w2 = param(model, &format!("{prefix}.w2"));
    let b2 = param(model, &format!("{prefix}.b2"))[0].clone();
    let mut h = add(&matvec(&w1, x), &b1);
    assert_eq!(h.len(), FF);
    for v in &mut h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    add(&matvec(&w2, &h), &b2)
}

fn ln(model: &ModelState<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = param(model, &format!("{prefix}.g"))[0].clone();
    let b = param(model, &format!("{prefix}.b"))[0].clone();
    layer_norm(x, &g, &b)
}

/// Straight-line re-implementation of teacher-forced scoring.
fn straight_line_logprobs(model: &ModelState<f64>, src: &[usize], tgt: &[usize]) -> Vec<f64> {
    let scale = (D as f64).sqrt();
    let src_embed = param(model, "src_embed");
    let tgt_embed = param(model, "tgt_embed");
    let out_proj = param(model, "out_proj");

    // encoder over src + EOS
    let mut framed_src: Vec<usize> = src.to_vec();
    framed_src.push(EOS);
    let mut enc: Vec<Vec<f64>> = framed_src
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let mut x: Vec<f64> = src_embed[id].iter().map(|e| e * scale).collect();
            x = add(&x, &pe(t));
            x
        })
        .collect();
    {
        let attn = attn_params(model, "enc0.attn");
        let normed: Vec<Vec<f64>> = enc.iter().map(|x| ln(model, "enc0.ln1", x)).collect();
        let (q, k, v) = project(&attn, &normed);
        for i in 0..enc.len() {
            let a = attend(&q[i], &k, &v, k.len());
            let o = add(&matvec(&attn.wo, &a), &attn.bo);
            enc[i] = add(&enc[i], &o);
        }
        let after: Vec<Vec<f64>> = enc
            .iter()
            .map(|x| add(x, &ff(model, "enc0.ff", &ln(model, "enc0.ln2", x))))
            .collect();
        enc = after;
    }
    let enc_out: Vec<Vec<f64>> = enc.iter().map(|x| ln(model, "enc.final_ln", x)).collect();

    // decoder over BOS + tgt, scoring tgt + EOS
    let mut dec_in: Vec<usize> = vec![BOS];
    dec_in.extend_from_slice(tgt);
    let mut dec: Vec<Vec<f64>> = dec_in
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let mut x: Vec<f64> = tgt_embed[id].iter().map(|e| e * scale).collect();
            x = add(&x, &pe(t));
            x
        })
        .collect();
    {
        let self_attn = attn_params(model, "dec0.self_attn");
        let normed: Vec<Vec<f64>> = dec.iter().map(|x| ln(model, "dec0.ln1", x)).collect();
        let (q, k, v) = project(&self_attn, &normed);
        for i in 0..dec.len() {
            let a = attend(&q[i], &k, &v, i + 1); // causal
            let o = add(&matvec(&self_attn.wo, &a), &self_attn.bo);
            dec[i] = add(&dec[i], &o);
        }

        let cross = attn_params(model, "dec0.cross_attn");
        let normed2: Vec<Vec<f64>> = dec.iter().map(|x| ln(model, "dec0.ln2", x)).collect();
        let ck: Vec<Vec<f64>> =
            enc_out.iter().map(|x| add(&matvec(&cross.wk, x), &cross.bk)).collect();
        let cv: Vec<Vec<f64>> =
            enc_out.iter().map(|x| add(&matvec(&cross.wv, x), &cross.bv)).collect();
        for i in 0..dec.len() {
            let q2 = add(&matvec(&cross.wq, &normed2[i]), &cross.bq);
            let a = attend(&q2, &ck, &cv, ck.len());
            let o = add(&matvec(&cross.wo, &a), &cross.bo);
            dec[i] = add(&dec[i], &o);
        }

        let after: Vec<Vec<f64>> = dec
            .iter()
            .map(|x| add(x, &ff(model, "dec0.ff", &ln(model, "dec0.ln3", x))))
            .collect();
        dec = after;
    }

    let mut out = Vec::with_capacity(tgt.len() + 1);
    for (pos, x) in dec.iter().enumerate() {
        let normed = ln(model, "dec.final_ln", x);
        let logits: Vec<f64> = out_proj
            .iter()
            .map(|row| normed.iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let probs = softmax(&logits);
        let target = if pos < tgt.len() { tgt[pos] } else { EOS };
        out.push(probs[target].ln());
    }
    out
}

#[test]
fn scoring_matches_straight_line_reimplementation() {
    let config = ModelConfig {
        d_model: D,
        n_heads: 1,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: FF,
        dropout: 0.0,
        max_len: 12,
        src_vocab_size: 9,
        tgt_vocab_size: 8,
        seed: 77,
        shared_src_tgt_embeddings: false,
        label_smoothing: 0.1,
    };
    let model: ModelState<f64> = ModelState::init(config).unwrap();

    // the fixed three-token example
    let src = [4usize, 5, 6];
    let tgt = [5usize, 7, 4];
    let (total, per_token) = model.sentence_logprob(&src, &tgt).unwrap();
    let oracle = straight_line_logprobs(&model, &src, &tgt);
    assert_eq!(per_token.len(), oracle.len());
    for (i, (got, want)) in per_token.iter().zip(&oracle).enumerate() {
        assert!(
            (got - want).abs() < 1e-6,
            "position {i}: model {got} vs straight line {want}"
        );
    }
    let oracle_total: f64 = oracle.iter().sum();
    assert!((total - oracle_total).abs() < 1e-6);
}

#[test]
fn training_loss_agrees_with_straight_line_nll() {
    // with label smoothing off, the batch loss over one pair equals the
    // mean of the straight-line per-token negative log-probs
    let config = ModelConfig {
        d_model: D,
        n_heads: 1,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: FF,
        dropout: 0.0,
        max_len: 12,
        src_vocab_size: 9,
        tgt_vocab_size: 8,
        seed: 78,
        shared_src_tgt_embeddings: false,
        label_smoothing: 0.0,
    };
    let model: ModelState<f64> = ModelState::init(config).unwrap();
    let src = vec![4usize, 6];
    let tgt = vec![7usize, 5];
    let batch = lilt_core::model::Batch {
        src: vec![src.clone()],
        tgt: vec![tgt.clone()],
        weights: vec![1.0],
    };
    let (info, _) = model.loss_and_grads(&batch, None).unwrap();
    let oracle = straight_line_logprobs(&model, &src, &tgt);
    let mean_nll = -oracle.iter().sum::<f64>() / oracle.len() as f64;
    assert!((info.loss - mean_nll).abs() < 1e-6, "{} vs {mean_nll}", info.loss);
}
