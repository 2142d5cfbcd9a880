//! A small pre-norm encoder-decoder translation model.
//!
//! Two forward implementations share the same parameters: a tape-backed
//! training path ([`ModelState::loss_and_grads`]) and a lighter inference
//! path with per-step key/value caching used by scoring and decoding
//! ([`ModelState::encode_source`], [`ModelState::decode_step`],
//! [`ModelState::sentence_logprob`]).
//!
//! Framing convention: `encode` leaves sentences bare; the model appends
//! `EOS` to the source, feeds the decoder `BOS` + target and predicts
//! target + `EOS`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AttnMask, AttnShape, NodeId, Tape};
use crate::tensor::{log_softmax, matmul, matmul_nt, Matrix, Real};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub seed: u64,
    pub shared_src_tgt_embeddings: bool,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            dropout: 0.1,
            max_len: 64,
            src_vocab_size: 4,
            tgt_vocab_size: 4,
            seed: 0,
            shared_src_tgt_embeddings: false,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::InvalidConfig("zero-sized dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.src_vocab_size < 4 || self.tgt_vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab sizes must cover the reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label smoothing must lie in [0,1)".into()));
        }
        if self.shared_src_tgt_embeddings && self.src_vocab_size != self.tgt_vocab_size {
            return Err(Error::InvalidConfig(
                "shared embeddings require equal source/target vocab sizes".into(),
            ));
        }
        Ok(())
    }
}

/// Indices of one attention block's parameters in the registry.
#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct EncLayerIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    ln2: LnIdx,
    ff: FfIdx,
}

#[derive(Clone, Debug)]
struct DecLayerIdx {
    ln1: LnIdx,
    self_attn: AttnIdx,
    ln2: LnIdx,
    cross_attn: AttnIdx,
    ln3: LnIdx,
    ff: FfIdx,
}

#[derive(Clone, Debug)]
struct ParamIdx {
    src_embed: usize,
    tgt_embed: usize,
    out_proj: usize,
    enc: Vec<EncLayerIdx>,
    enc_final_ln: LnIdx,
    dec: Vec<DecLayerIdx>,
    dec_final_ln: LnIdx,
}

/// Model parameters plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct ModelState<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    idx: ParamIdx,
}

/// Gradients aligned with the parameter registry of the model they came
/// from.
pub type Gradients<T> = Vec<Matrix<T>>;

#[derive(Clone, Debug)]
pub struct LossInfo {
    /// Mean label-smoothed cross entropy over weighted target tokens.
    pub loss: f64,
    /// Mean unsmoothed negative log-likelihood per weighted target token.
    pub nll: f64,
    pub tokens: usize,
}

/// A training batch of already-encoded index sequences. Sources include
/// their indicator token where applicable; framing tokens are added by the
/// model.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    /// Per-pair loss weight, typically the owning corpus weight.
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Registry {
    fn push(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn attn_block(&mut self, d: usize, prefix: &str) -> AttnIdx {
        AttnIdx {
            wq: self.push(format!("{prefix}.wq"), (d, d)),
            bq: self.push(format!("{prefix}.bq"), (1, d)),
            wk: self.push(format!("{prefix}.wk"), (d, d)),
            bk: self.push(format!("{prefix}.bk"), (1, d)),
            wv: self.push(format!("{prefix}.wv"), (d, d)),
            bv: self.push(format!("{prefix}.bv"), (1, d)),
            wo: self.push(format!("{prefix}.wo"), (d, d)),
            bo: self.push(format!("{prefix}.bo"), (1, d)),
        }
    }

    fn ln_block(&mut self, d: usize, prefix: &str) -> LnIdx {
        LnIdx {
            g: self.push(format!("{prefix}.g"), (1, d)),
            b: self.push(format!("{prefix}.b"), (1, d)),
        }
    }

    fn ff_block(&mut self, d: usize, ff: usize, prefix: &str) -> FfIdx {
        FfIdx {
            w1: self.push(format!("{prefix}.w1"), (d, ff)),
            b1: self.push(format!("{prefix}.b1"), (1, ff)),
            w2: self.push(format!("{prefix}.w2"), (ff, d)),
            b2: self.push(format!("{prefix}.b2"), (1, d)),
        }
    }
}

fn registry_layout(config: &ModelConfig) -> (Vec<String>, Vec<(usize, usize)>, ParamIdx) {
    let d = config.d_model;
    let ff = config.d_ff;
    let mut reg = Registry { names: Vec::new(), shapes: Vec::new() };

    let src_embed = reg.push("src_embed".into(), (config.src_vocab_size, d));
    let tgt_embed = if config.shared_src_tgt_embeddings {
        src_embed
    } else {
        reg.push("tgt_embed".into(), (config.tgt_vocab_size, d))
    };
    let out_proj = reg.push("out_proj".into(), (config.tgt_vocab_size, d));

    let mut enc = Vec::new();
    for i in 0..config.n_enc_layers {
        enc.push(EncLayerIdx {
            ln1: reg.ln_block(d, &format!("enc{i}.ln1")),
            attn: reg.attn_block(d, &format!("enc{i}.attn")),
            ln2: reg.ln_block(d, &format!("enc{i}.ln2")),
            ff: reg.ff_block(d, ff, &format!("enc{i}.ff")),
        });
    }
    let enc_final_ln = reg.ln_block(d, "enc.final_ln");

    let mut dec = Vec::new();
    for i in 0..config.n_dec_layers {
        dec.push(DecLayerIdx {
            ln1: reg.ln_block(d, &format!("dec{i}.ln1")),
            self_attn: reg.attn_block(d, &format!("dec{i}.self_attn")),
            ln2: reg.ln_block(d, &format!("dec{i}.ln2")),
            cross_attn: reg.attn_block(d, &format!("dec{i}.cross_attn")),
            ln3: reg.ln_block(d, &format!("dec{i}.ln3")),
            ff: reg.ff_block(d, ff, &format!("dec{i}.ff")),
        });
    }
    let dec_final_ln = reg.ln_block(d, "dec.final_ln");

    let idx = ParamIdx { src_embed, tgt_embed, out_proj, enc, enc_final_ln, dec, dec_final_ln };
    (reg.names, reg.shapes, idx)
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_matrix<T: Real>(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, cols);
    if name.ends_with(".g") {
        m.fill(T::one());
    } else if name.contains(".b") {
        // biases and layer-norm shifts start at zero
    } else if name.contains("embed") || name == "out_proj" {
        let std = 1.0 / (cols as f64).sqrt();
        for x in m.as_mut_slice() {
            *x = T::from_f64(standard_normal(rng) * std);
        }
        // PAD row stays zero so padding contributes nothing
        m.row_mut(PAD).iter_mut().for_each(|x| *x = T::zero());
    } else {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for x in m.as_mut_slice() {
            *x = T::from_f64(rng.gen_range(-limit..limit));
        }
    }
    m
}

fn sinusoidal_pe<T: Real>(len: usize, d: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(len, d);
    for t in 0..len {
        let row = pe.row_mut(t);
        for i in 0..d.div_ceil(2) {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = T::from_f64(angle.sin());
            if 2 * i + 1 < d {
                row[2 * i + 1] = T::from_f64(angle.cos());
            }
        }
    }
    pe
}

impl<T: Real> ModelState<T> {
    /// Seeded initialization; identical `(config, seed)` produce identical
    /// parameters.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, shapes, idx) = registry_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = names
            .iter()
            .zip(shapes.iter())
            .map(|(name, &(r, c))| init_matrix(name, r, c, &mut rng))
            .collect();
        Ok(ModelState { config, names, params, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Matrix::all_finite)
    }

    /// Same parameters, different label-smoothing epsilon (Fisher
    /// estimation wants the unsmoothed likelihood).
    pub fn with_label_smoothing(&self, eps: f64) -> ModelState<T> {
        let mut out = self.clone();
        out.config.label_smoothing = eps;
        out
    }

    /// Casts every parameter; used to move between training (f32) and
    /// gradient-check (f64) precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|m| {
                    Matrix::from_vec(
                        m.rows(),
                        m.cols(),
                        m.as_slice().iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                    )
                })
                .collect(),
            idx: self.idx.clone(),
        }
    }

    fn check_src(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.config.src_vocab_size {
                return Err(Error::IndexOutOfRange { index: id, size: self.config.src_vocab_size });
            }
        }
        if ids.len() + 1 > self.config.max_len {
            return Err(Error::Overlength { len: ids.len() + 1, max_len: self.config.max_len });
        }
        Ok(())
    }

    fn check_tgt(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.config.tgt_vocab_size {
                return Err(Error::IndexOutOfRange { index: id, size: self.config.tgt_vocab_size });
            }
        }
        if ids.len() + 1 > self.config.max_len {
            return Err(Error::Overlength { len: ids.len() + 1, max_len: self.config.max_len });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Training path
    // ------------------------------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn attn_graph(
        &self,
        tape: &mut Tape<T>,
        leaves: &[NodeId],
        x: NodeId,
        kv_src: NodeId,
        attn: &AttnIdx,
        shape: AttnShape,
        mask: &AttnMask,
        rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let q = tape.matmul(x, leaves[attn.wq]);
        let q = tape.add_bias(q, leaves[attn.bq]);
        let k = tape.matmul(kv_src, leaves[attn.wk]);
        let k = tape.add_bias(k, leaves[attn.bk]);
        let v = tape.matmul(kv_src, leaves[attn.wv]);
        let v = tape.add_bias(v, leaves[attn.bv]);
        let a = tape.attention(q, k, v, shape, mask);
        let o = tape.matmul(a, leaves[attn.wo]);
        let o = tape.add_bias(o, leaves[attn.bo]);
        match rng {
            Some(r) => tape.dropout(o, self.config.dropout, r),
            None => o,
        }
    }

    fn ff_graph(
        &self,
        tape: &mut Tape<T>,
        leaves: &[NodeId],
        x: NodeId,
        ff: &FfIdx,
        rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let h = tape.matmul(x, leaves[ff.w1]);
        let h = tape.add_bias(h, leaves[ff.b1]);
        let h = tape.relu(h);
        let o = tape.matmul(h, leaves[ff.w2]);
        let o = tape.add_bias(o, leaves[ff.b2]);
        match rng {
            Some(r) => tape.dropout(o, self.config.dropout, r),
            None => o,
        }
    }

    /// Mean token-level loss and gradients for a batch.
    ///
    /// `dropout_rng` enables train-mode dropout; pass `None` for the
    /// deterministic variant (used by gradient checks and Fisher
    /// estimation). Label smoothing from the config is always applied.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossInfo, Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.tgt.len() != batch.src.len() || batch.weights.len() != batch.src.len() {
            return Err(Error::ShapeMismatch("batch field lengths differ".into()));
        }
        for ids in &batch.src {
            self.check_src(ids)?;
        }
        for ids in &batch.tgt {
            if ids.is_empty() {
                return Err(Error::EmptyTarget);
            }
            self.check_tgt(ids)?;
        }

        let b = batch.len();
        let s_len = batch.src.iter().map(|s| s.len() + 1).max().unwrap();
        let t_len = batch.tgt.iter().map(|t| t.len() + 1).max().unwrap();
        let d = self.config.d_model;

        // pack framed, padded index sequences
        let mut src_ids = Vec::with_capacity(b * s_len);
        let mut src_lens = Vec::with_capacity(b);
        for ids in &batch.src {
            src_ids.extend_from_slice(ids);
            src_ids.push(EOS);
            src_ids.resize(src_ids.len() + s_len - ids.len() - 1, PAD);
            src_lens.push(ids.len() + 1);
        }
        let mut tgt_in = Vec::with_capacity(b * t_len);
        let mut tgt_out = Vec::with_capacity(b * t_len);
        let mut weights = Vec::with_capacity(b * t_len);
        for (ids, &w) in batch.tgt.iter().zip(batch.weights.iter()) {
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(ids);
            tgt_in.resize(tgt_in.len() + t_len - ids.len() - 1, PAD);
            tgt_out.extend_from_slice(ids);
            tgt_out.push(EOS);
            tgt_out.resize(tgt_out.len() + t_len - ids.len() - 1, PAD);
            let w = T::from_f64(w);
            for pos in 0..t_len {
                weights.push(if pos < ids.len() + 1 { w } else { T::zero() });
            }
        }

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let scale = T::from_f64((d as f64).sqrt());

        // encoder
        let pe_s = {
            let pe = sinusoidal_pe::<T>(s_len, d);
            let mut tiled = Matrix::zeros(b * s_len, d);
            for i in 0..b * s_len {
                tiled.row_mut(i).copy_from_slice(pe.row(i % s_len));
            }
            tape.leaf(tiled)
        };
        let mut x = tape.embed(leaves[self.idx.src_embed], src_ids);
        x = tape.scale(x, scale);
        x = tape.add(x, pe_s);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            x = tape.dropout(x, self.config.dropout, rng);
        }
        let enc_shape = AttnShape { batch: b, q_len: s_len, k_len: s_len, heads: self.config.n_heads };
        let enc_mask = AttnMask::KeyPad(Arc::new(src_lens.clone()));
        for layer in &self.idx.enc {
            let h = tape.layer_norm(x, leaves[layer.ln1.g], leaves[layer.ln1.b]);
            let a = self.attn_graph(
                &mut tape,
                &leaves,
                h,
                h,
                &layer.attn,
                enc_shape,
                &enc_mask,
                dropout_rng.as_deref_mut(),
            );
            x = tape.add(x, a);
            let h2 = tape.layer_norm(x, leaves[layer.ln2.g], leaves[layer.ln2.b]);
            let f = self.ff_graph(&mut tape, &leaves, h2, &layer.ff, dropout_rng.as_deref_mut());
            x = tape.add(x, f);
        }
        let enc_out =
            tape.layer_norm(x, leaves[self.idx.enc_final_ln.g], leaves[self.idx.enc_final_ln.b]);

        // decoder
        let pe_t = {
            let pe = sinusoidal_pe::<T>(t_len, d);
            let mut tiled = Matrix::zeros(b * t_len, d);
            for i in 0..b * t_len {
                tiled.row_mut(i).copy_from_slice(pe.row(i % t_len));
            }
            tape.leaf(tiled)
        };
        let mut y = tape.embed(leaves[self.idx.tgt_embed], tgt_in);
        y = tape.scale(y, scale);
        y = tape.add(y, pe_t);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            y = tape.dropout(y, self.config.dropout, rng);
        }
        let self_shape = AttnShape { batch: b, q_len: t_len, k_len: t_len, heads: self.config.n_heads };
        let cross_shape = AttnShape { batch: b, q_len: t_len, k_len: s_len, heads: self.config.n_heads };
        let cross_mask = AttnMask::KeyPad(Arc::new(src_lens));
        for layer in &self.idx.dec {
            let h = tape.layer_norm(y, leaves[layer.ln1.g], leaves[layer.ln1.b]);
            let a = self.attn_graph(
                &mut tape,
                &leaves,
                h,
                h,
                &layer.self_attn,
                self_shape,
                &AttnMask::Causal,
                dropout_rng.as_deref_mut(),
            );
            y = tape.add(y, a);
            let h2 = tape.layer_norm(y, leaves[layer.ln2.g], leaves[layer.ln2.b]);
            let c = self.attn_graph(
                &mut tape,
                &leaves,
                h2,
                enc_out,
                &layer.cross_attn,
                cross_shape,
                &cross_mask,
                dropout_rng.as_deref_mut(),
            );
            y = tape.add(y, c);
            let h3 = tape.layer_norm(y, leaves[layer.ln3.g], leaves[layer.ln3.b]);
            let f = self.ff_graph(&mut tape, &leaves, h3, &layer.ff, dropout_rng.as_deref_mut());
            y = tape.add(y, f);
        }
        let dec_out =
            tape.layer_norm(y, leaves[self.idx.dec_final_ln.g], leaves[self.idx.dec_final_ln.b]);
        let logits = tape.matmul_nt(dec_out, leaves[self.idx.out_proj]);
        let loss = tape.ce_loss(logits, tgt_out, weights, self.config.label_smoothing);

        tape.backward(loss);
        let stats = tape.loss_stats(loss).clone();
        let info = LossInfo {
            loss: tape.value(loss).get(0, 0).to_f64(),
            nll: (stats.nll_sum / stats.weight_sum).to_f64(),
            tokens: stats.token_count,
        };
        let grads: Gradients<T> = leaves.iter().map(|&l| tape.take_grad(l)).collect();
        Ok((info, grads))
    }

    // ------------------------------------------------------------------
    // Inference path
    // ------------------------------------------------------------------

    fn linear(&self, x: &Matrix<T>, w: usize, b: usize) -> Matrix<T> {
        let mut out = matmul(x, &self.params[w]);
        let bias = self.params[b].row(0);
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bias) {
                *o = *o + bb;
            }
        }
        out
    }

    fn layer_norm_rows(&self, x: &Matrix<T>, ln: &LnIdx) -> Matrix<T> {
        let (rows, cols) = x.shape();
        let g = self.params[ln.g].row(0);
        let b = self.params[ln.b].row(0);
        let eps = T::from_f64(1e-5);
        let inv_n = T::one() / T::from_f64(cols as f64);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = x.row(i);
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                let dl = v - mean;
                var = var + dl * dl;
            }
            var = var * inv_n;
            let r = T::one() / (var + eps).sqrt();
            let o = out.row_mut(i);
            for j in 0..cols {
                o[j] = (row[j] - mean) * r * g[j] + b[j];
            }
        }
        out
    }

    /// Plain multi-head attention over full matrices (no masking; callers
    /// arrange causality by what they put in `k`/`v`).
    fn mha(&self, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Matrix<T> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Matrix::zeros(q.rows(), d);
        for h in 0..heads {
            let col0 = h * dh;
            for i in 0..q.rows() {
                let q_row = &q.row(i)[col0..col0 + dh];
                let mut scores = Vec::with_capacity(k.rows());
                for j in 0..k.rows() {
                    let k_row = &k.row(j)[col0..col0 + dh];
                    let mut dot = T::zero();
                    for l in 0..dh {
                        dot = dot + q_row[l] * k_row[l];
                    }
                    scores.push(dot * scale);
                }
                crate::tensor::softmax_slice(&mut scores);
                let o = &mut out.row_mut(i)[col0..col0 + dh];
                for (j, &p) in scores.iter().enumerate() {
                    let v_row = &v.row(j)[col0..col0 + dh];
                    for l in 0..dh {
                        o[l] = o[l] + p * v_row[l];
                    }
                }
            }
        }
        out
    }

    /// Runs the encoder over one framed source and precomputes per-layer
    /// cross-attention keys/values for the decoder.
    pub fn encode_source(&self, src: &[usize]) -> Result<EncodedSource<T>> {
        self.check_src(src)?;
        let d = self.config.d_model;
        let mut ids: Vec<usize> = src.to_vec();
        ids.push(EOS);
        let s_len = ids.len();
        let pe = sinusoidal_pe::<T>(s_len, d);
        let scale = T::from_f64((d as f64).sqrt());
        let embed = &self.params[self.idx.src_embed];
        let mut x = Matrix::zeros(s_len, d);
        for (i, &id) in ids.iter().enumerate() {
            let row = x.row_mut(i);
            let e = embed.row(id);
            let p = pe.row(i);
            for j in 0..d {
                row[j] = e[j] * scale + p[j];
            }
        }
        for layer in &self.idx.enc {
            let h = self.layer_norm_rows(&x, &layer.ln1);
            let q = self.linear(&h, layer.attn.wq, layer.attn.bq);
            let k = self.linear(&h, layer.attn.wk, layer.attn.bk);
            let v = self.linear(&h, layer.attn.wv, layer.attn.bv);
            let a = self.mha(&q, &k, &v);
            let o = self.linear(&a, layer.attn.wo, layer.attn.bo);
            crate::tensor::add_assign(&mut x, &o);
            let h2 = self.layer_norm_rows(&x, &layer.ln2);
            let mut f1 = self.linear(&h2, layer.ff.w1, layer.ff.b1);
            for e in f1.as_mut_slice() {
                if *e < T::zero() {
                    *e = T::zero();
                }
            }
            let f2 = self.linear(&f1, layer.ff.w2, layer.ff.b2);
            crate::tensor::add_assign(&mut x, &f2);
        }
        let enc_out = self.layer_norm_rows(&x, &self.idx.enc_final_ln);
        let cross_kv = self
            .idx
            .dec
            .iter()
            .map(|layer| {
                let k = self.linear(&enc_out, layer.cross_attn.wk, layer.cross_attn.bk);
                let v = self.linear(&enc_out, layer.cross_attn.wv, layer.cross_attn.bv);
                (k, v)
            })
            .collect();
        Ok(EncodedSource { enc_out, cross_kv })
    }

    /// Fresh decoding state positioned before the first target token.
    pub fn start_decoder(&self) -> DecoderState<T> {
        DecoderState {
            self_kv: (0..self.config.n_dec_layers)
                .map(|_| KvCache::new(self.config.d_model))
                .collect(),
            pos: 0,
        }
    }

    /// Feeds one decoder input token and returns the next-token logits.
    pub fn decode_step(
        &self,
        enc: &EncodedSource<T>,
        state: &mut DecoderState<T>,
        token: usize,
    ) -> Result<Vec<T>> {
        if token >= self.config.tgt_vocab_size {
            return Err(Error::IndexOutOfRange { index: token, size: self.config.tgt_vocab_size });
        }
        if state.pos + 1 > self.config.max_len {
            return Err(Error::Overlength { len: state.pos + 1, max_len: self.config.max_len });
        }
        let d = self.config.d_model;
        let scale = T::from_f64((d as f64).sqrt());
        let pe = sinusoidal_pe::<T>(state.pos + 1, d);
        let embed = &self.params[self.idx.tgt_embed];
        let mut x = Matrix::zeros(1, d);
        {
            let row = x.row_mut(0);
            let e = embed.row(token);
            let p = pe.row(state.pos);
            for j in 0..d {
                row[j] = e[j] * scale + p[j];
            }
        }
        for (li, layer) in self.idx.dec.iter().enumerate() {
            let h = self.layer_norm_rows(&x, &layer.ln1);
            let q = self.linear(&h, layer.self_attn.wq, layer.self_attn.bq);
            let k_new = self.linear(&h, layer.self_attn.wk, layer.self_attn.bk);
            let v_new = self.linear(&h, layer.self_attn.wv, layer.self_attn.bv);
            let cache = &mut state.self_kv[li];
            cache.push(k_new.row(0), v_new.row(0));
            // cache holds positions ≤ pos: causal by construction
            let (k_cache, v_cache) = cache.matrices();
            let a = self.mha(&q, &k_cache, &v_cache);
            let o = self.linear(&a, layer.self_attn.wo, layer.self_attn.bo);
            crate::tensor::add_assign(&mut x, &o);

            let h2 = self.layer_norm_rows(&x, &layer.ln2);
            let q2 = self.linear(&h2, layer.cross_attn.wq, layer.cross_attn.bq);
            let (ck, cv) = &enc.cross_kv[li];
            let c = self.mha(&q2, ck, cv);
            let o2 = self.linear(&c, layer.cross_attn.wo, layer.cross_attn.bo);
            crate::tensor::add_assign(&mut x, &o2);

            let h3 = self.layer_norm_rows(&x, &layer.ln3);
            let mut f1 = self.linear(&h3, layer.ff.w1, layer.ff.b1);
            for e in f1.as_mut_slice() {
                if *e < T::zero() {
                    *e = T::zero();
                }
            }
            let f2 = self.linear(&f1, layer.ff.w2, layer.ff.b2);
            crate::tensor::add_assign(&mut x, &f2);
        }
        let out = self.layer_norm_rows(&x, &self.idx.dec_final_ln);
        let logits = matmul_nt(&out, &self.params[self.idx.out_proj]);
        state.pos += 1;
        Ok(logits.as_slice().to_vec())
    }

    /// Teacher-forced log-likelihood of `tgt` given `src`, summed over
    /// target positions including the closing `EOS`. Deterministic (no
    /// dropout). Returns the total and the per-position log-probs.
    pub fn sentence_logprob(&self, src: &[usize], tgt: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_tgt(tgt)?;
        let enc = self.encode_source(src)?;
        let mut state = self.start_decoder();
        let mut per_token = Vec::with_capacity(tgt.len() + 1);
        let mut input = BOS;
        for step in 0..=tgt.len() {
            let logits = self.decode_step(&enc, &mut state, input)?;
            let logp = log_softmax(&logits);
            let target = if step < tgt.len() { tgt[step] } else { EOS };
            per_token.push(logp[target].to_f64());
            if step < tgt.len() {
                input = tgt[step];
            }
        }
        Ok((per_token.iter().sum(), per_token))
    }

    // ------------------------------------------------------------------
    // Vocabulary growth
    // ------------------------------------------------------------------

    /// Grows embedding and output rows for an append-only vocabulary
    /// extension. Old rows are preserved bit-exactly; new rows come from a
    /// seeded initializer, so growth is deterministic. Logits over old
    /// target tokens are unchanged for any input.
    pub fn expand_vocab(
        &self,
        old_vocabs: (&Vocabulary, &Vocabulary),
        new_vocabs: (&Vocabulary, &Vocabulary),
    ) -> Result<ModelState<T>> {
        for (side, old_v, new_v, model_size) in [
            ("source", old_vocabs.0, new_vocabs.0, self.config.src_vocab_size),
            ("target", old_vocabs.1, new_vocabs.1, self.config.tgt_vocab_size),
        ] {
            if old_v.len() != model_size {
                return Err(Error::VocabMismatch(format!(
                    "{side} vocabulary has {} entries, model expects {}",
                    old_v.len(),
                    model_size
                )));
            }
            if !new_v.extends(old_v) {
                return Err(Error::VocabMismatch(format!(
                    "new {side} vocabulary is not an append-only extension"
                )));
            }
        }
        let new_src = new_vocabs.0.len();
        let new_tgt = new_vocabs.1.len();
        if self.config.shared_src_tgt_embeddings && new_src != new_tgt {
            return Err(Error::VocabMismatch(
                "shared embeddings require equal source/target growth".into(),
            ));
        }
        let mut config = self.config.clone();
        config.src_vocab_size = new_src;
        config.tgt_vocab_size = new_tgt;
        let (names, shapes, idx) = registry_layout(&config);
        let mut params = Vec::with_capacity(names.len());
        for (name, &(rows, cols)) in names.iter().zip(shapes.iter()) {
            let old = self
                .param_by_name(name)
                .expect("registry layout is stable across vocab growth");
            if old.shape() == (rows, cols) {
                params.push(old.clone());
                continue;
            }
            // embedding-like growth: keep old rows, draw the rest
            let mut grown = Matrix::zeros(rows, cols);
            for r in 0..old.rows() {
                grown.row_mut(r).copy_from_slice(old.row(r));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.config
                    .seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(crate::checkpoint::fnv1a64(name.as_bytes()))
                    .wrapping_add(rows as u64),
            );
            let std = 1.0 / (cols as f64).sqrt();
            for r in old.rows()..rows {
                for x in grown.row_mut(r) {
                    *x = T::from_f64(standard_normal(&mut rng) * std);
                }
            }
            params.push(grown);
        }
        Ok(ModelState { config, names, params, idx })
    }
}

/// Diagonal Fisher estimate with the parameter snapshot it anchors to.
#[derive(Clone, Debug)]
pub struct FisherDiag<T: Real> {
    /// Non-negative per-parameter arrays, registry order.
    pub diag: Vec<Matrix<T>>,
    /// Parameter snapshot θ* taken at consolidation time.
    pub anchor: Vec<Matrix<T>>,
    pub sample_count: u64,
}

impl<T: Real> FisherDiag<T> {
    pub fn zeros_like(model: &ModelState<T>) -> Self {
        FisherDiag {
            diag: model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            anchor: model.params().to_vec(),
            sample_count: 0,
        }
    }

    pub fn shapes_match(&self, model: &ModelState<T>) -> bool {
        self.diag.len() == model.params().len()
            && self
                .diag
                .iter()
                .zip(model.params())
                .all(|(f, p)| f.shape() == p.shape())
            && self
                .anchor
                .iter()
                .zip(model.params())
                .all(|(a, p)| a.shape() == p.shape())
    }

    /// Grows alongside an embedding-grown model; new rows get zero Fisher
    /// and anchor equal to the grown model's rows (no penalty on them).
    pub fn expand_to(&mut self, model: &ModelState<T>) -> Result<()> {
        if self.diag.len() != model.params().len() {
            return Err(Error::ShapeMismatch("fisher parameter count".into()));
        }
        for ((f, a), p) in self.diag.iter_mut().zip(self.anchor.iter_mut()).zip(model.params()) {
            if f.shape() == p.shape() {
                continue;
            }
            if f.cols() != p.cols() || f.rows() > p.rows() {
                return Err(Error::ShapeMismatch("fisher growth".into()));
            }
            let mut fg = Matrix::zeros(p.rows(), p.cols());
            let mut ag = p.clone();
            for r in 0..f.rows() {
                fg.row_mut(r).copy_from_slice(f.row(r));
                ag.row_mut(r).copy_from_slice(a.row(r));
            }
            *f = fg;
            *a = ag;
        }
        Ok(())
    }
}

/// Encoder output plus precomputed cross-attention keys/values.
pub struct EncodedSource<T: Real> {
    pub enc_out: Matrix<T>,
    cross_kv: Vec<(Matrix<T>, Matrix<T>)>,
}

#[derive(Clone)]
struct KvCache<T: Real> {
    k: Vec<T>,
    v: Vec<T>,
    cols: usize,
}

impl<T: Real> KvCache<T> {
    fn new(cols: usize) -> Self {
        KvCache { k: Vec::new(), v: Vec::new(), cols }
    }

    fn push(&mut self, k_row: &[T], v_row: &[T]) {
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
    }

    fn matrices(&self) -> (Matrix<T>, Matrix<T>) {
        let rows = self.k.len() / self.cols;
        (
            Matrix::from_vec(rows, self.cols, self.k.clone()),
            Matrix::from_vec(rows, self.cols, self.v.clone()),
        )
    }
}

/// Incremental decoder state (per-layer self-attention caches).
#[derive(Clone)]
pub struct DecoderState<T: Real> {
    self_kv: Vec<KvCache<T>>,
    pos: usize,
}

impl<T: Real> DecoderState<T> {
    pub fn pos(&self) -> usize {
        self.pos
    }
}
