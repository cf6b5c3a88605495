//! A small self-attention sequence encoder trained in-process.
//!
//! Tokens hash into embedding buckets, pass through one residual
//! self-attention block, mean-pool, and feed a linear head. All math is
//! f64 with hand-derived gradients, optimized by AdamW. Attention
//! projections optionally carry low-rank adapters; with adapters active
//! the base projections stay frozen.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DecisionMode;
use crate::text::{fnv1a64, tokenize};

use super::{LossKind, TrainingSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },
    #[error("invalid training spec: {0}")]
    InvalidSpec(String),
}

/// Dense row-major f64 matrix. Small enough here that nothing smarter
/// is warranted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (n x m) times other (m x p).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * out.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// self^T (m x n) times other (n x p); self is n x m.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * out.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// self (n x m) times other^T (m x p); other is p x m.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(j, k);
                }
                out.data[i * out.cols + j] = acc;
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }
}

pub const PROJECTION_NAMES: [&str; 4] = ["W_q", "W_k", "W_v", "W_o"];

/// All parameter tensors. Doubles as the gradient and optimizer-moment
/// container since those share the shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub embed: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    /// Adapter factors keyed by projection name; `a` is dim x rank,
    /// `b` is rank x dim.
    pub lora_a: BTreeMap<String, Mat>,
    pub lora_b: BTreeMap<String, Mat>,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

impl ParamSet {
    fn zeros_like(&self) -> ParamSet {
        ParamSet {
            embed: Mat::zeros(self.embed.rows, self.embed.cols),
            wq: Mat::zeros(self.wq.rows, self.wq.cols),
            wk: Mat::zeros(self.wk.rows, self.wk.cols),
            wv: Mat::zeros(self.wv.rows, self.wv.cols),
            wo: Mat::zeros(self.wo.rows, self.wo.cols),
            lora_a: self
                .lora_a
                .iter()
                .map(|(k, m)| (k.clone(), Mat::zeros(m.rows, m.cols)))
                .collect(),
            lora_b: self
                .lora_b
                .iter()
                .map(|(k, m)| (k.clone(), Mat::zeros(m.rows, m.cols)))
                .collect(),
            head_w: Mat::zeros(self.head_w.rows, self.head_w.cols),
            head_b: vec![0.0; self.head_b.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub vocab: usize,
    pub dim: usize,
    pub labels: usize,
    pub rank: usize,
    pub alpha: f64,
    pub params: ParamSet,
}

/// Gold target for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum GoldTarget {
    Class(usize),
    MultiHot(Vec<bool>),
}

/// Hash-buckets the shared tokenizer's output. Empty text maps to the
/// empty-token bucket so every input has at least one position.
pub fn encode_text(text: &str, vocab: usize, max_seq_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(text)
        .iter()
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        ids.push((fnv1a64(b"") % vocab as u64) as usize);
    }
    ids.truncate(max_seq_len.max(1));
    ids
}

struct EffectiveWeights {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

struct Forward {
    token_ids: Vec<usize>,
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
    c: Mat,
    mask: Vec<f64>,
    hd: Vec<f64>,
    logits: Vec<f64>,
}

impl EncoderModel {
    pub fn new(
        vocab: usize,
        dim: usize,
        labels: usize,
        spec: &TrainingSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        for target in &spec.adapter_targets {
            if !PROJECTION_NAMES.contains(&target.as_str()) {
                return Err(TrainError::InvalidSpec(format!(
                    "unknown adapter target {target}"
                )));
            }
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let rank = spec.adapter_rank;
        let mut lora_a = BTreeMap::new();
        let mut lora_b = BTreeMap::new();
        if rank > 0 {
            for name in &spec.adapter_targets {
                lora_a.insert(name.clone(), Mat::uniform(dim, rank, scale, rng));
                // Zero so adapters start as identity deltas.
                lora_b.insert(name.clone(), Mat::zeros(rank, dim));
            }
        }
        Ok(EncoderModel {
            vocab,
            dim,
            labels,
            rank,
            alpha: spec.adapter_alpha,
            params: ParamSet {
                embed: Mat::uniform(vocab, dim, scale, rng),
                wq: Mat::uniform(dim, dim, scale, rng),
                wk: Mat::uniform(dim, dim, scale, rng),
                wv: Mat::uniform(dim, dim, scale, rng),
                wo: Mat::uniform(dim, dim, scale, rng),
                lora_a,
                lora_b,
                head_w: Mat::zeros(labels, dim),
                head_b: vec![0.0; labels],
            },
        })
    }

    fn adapter_scale(&self) -> f64 {
        if self.rank > 0 {
            self.alpha / self.rank as f64
        } else {
            0.0
        }
    }

    fn effective(&self, name: &str, base: &Mat) -> Mat {
        match (self.params.lora_a.get(name), self.params.lora_b.get(name)) {
            (Some(a), Some(b)) => {
                let mut w = base.clone();
                w.add_scaled(&a.matmul(b), self.adapter_scale());
                w
            }
            _ => base.clone(),
        }
    }

    fn effective_weights(&self) -> EffectiveWeights {
        EffectiveWeights {
            wq: self.effective("W_q", &self.params.wq),
            wk: self.effective("W_k", &self.params.wk),
            wv: self.effective("W_v", &self.params.wv),
            wo: self.effective("W_o", &self.params.wo),
        }
    }

    fn forward(
        &self,
        token_ids: &[usize],
        eff: &EffectiveWeights,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Forward {
        let n = token_ids.len();
        let d = self.dim;
        let mut x = Mat::zeros(n, d);
        for (i, &id) in token_ids.iter().enumerate() {
            let row = self.params.embed.row(id);
            x.data[i * d..(i + 1) * d].copy_from_slice(row);
        }
        let q = x.matmul(&eff.wq);
        let k = x.matmul(&eff.wk);
        let v = x.matmul(&eff.wv);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut s = q.matmul_nt(&k);
        for val in s.data.iter_mut() {
            *val *= inv_sqrt_d;
        }
        // Row-wise softmax with max subtraction for stability.
        let mut p = s;
        for i in 0..n {
            let row = &mut p.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for val in row.iter_mut() {
                *val = (*val - max).exp();
                sum += *val;
            }
            for val in row.iter_mut() {
                *val /= sum;
            }
        }
        let c = p.matmul(&v);
        let o = c.matmul(&eff.wo);
        let mut h = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                h[j] += (x.get(i, j) + o.get(i, j)) / n as f64;
            }
        }
        let mask: Vec<f64> = match rng {
            Some(rng) if dropout > 0.0 => (0..d)
                .map(|_| {
                    if rng.random::<f64>() < dropout {
                        0.0
                    } else {
                        1.0 / (1.0 - dropout)
                    }
                })
                .collect(),
            _ => vec![1.0; d],
        };
        let hd: Vec<f64> = h.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mut logits = self.params.head_b.clone();
        for l in 0..self.labels {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.params.head_w.get(l, j) * hd[j];
            }
            logits[l] += acc;
        }
        Forward {
            token_ids: token_ids.to_vec(),
            x,
            q,
            k,
            v,
            p,
            c,
            mask,
            hd,
            logits,
        }
    }

    /// Accumulates gradients for one sequence given dL/dlogits.
    fn backward(
        &self,
        fwd: &Forward,
        dlogits: &[f64],
        eff: &EffectiveWeights,
        grads: &mut ParamSet,
    ) {
        let n = fwd.token_ids.len();
        let d = self.dim;
        // Head.
        let mut dhd = vec![0.0; d];
        for l in 0..self.labels {
            grads.head_b[l] += dlogits[l];
            for j in 0..d {
                grads
                    .head_w
                    .set(l, j, grads.head_w.get(l, j) + dlogits[l] * fwd.hd[j]);
                dhd[j] += self.params.head_w.get(l, j) * dlogits[l];
            }
        }
        // Dropout, then mean pool back to rows.
        let dh: Vec<f64> = dhd.iter().zip(&fwd.mask).map(|(g, m)| g * m).collect();
        let mut dx = Mat::zeros(n, d);
        let mut do_ = Mat::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let g = dh[j] / n as f64;
                dx.set(i, j, g);
                do_.set(i, j, g);
            }
        }
        // O = C Wo.
        let dc = do_.matmul_nt(&eff.wo);
        let dwo = fwd.c.matmul_tn(&do_);
        // C = P V.
        let dp = dc.matmul_nt(&fwd.v);
        let dv = fwd.p.matmul_tn(&dc);
        // P = softmax(S) rows.
        let mut ds = Mat::zeros(n, n);
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                dot += dp.get(i, j) * fwd.p.get(i, j);
            }
            for j in 0..n {
                ds.set(i, j, fwd.p.get(i, j) * (dp.get(i, j) - dot));
            }
        }
        // S = Q K^T / sqrt(d).
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut dq = ds.matmul(&fwd.k);
        for v in dq.data.iter_mut() {
            *v *= inv_sqrt_d;
        }
        let mut dk = ds.matmul_tn(&fwd.q);
        for v in dk.data.iter_mut() {
            *v *= inv_sqrt_d;
        }
        // Projections: route to base weights or adapter factors.
        let dwq = fwd.x.matmul_tn(&dq);
        let dwk = fwd.x.matmul_tn(&dk);
        let dwv = fwd.x.matmul_tn(&dv);
        dx.add_scaled(&dq.matmul_nt(&eff.wq), 1.0);
        dx.add_scaled(&dk.matmul_nt(&eff.wk), 1.0);
        dx.add_scaled(&dv.matmul_nt(&eff.wv), 1.0);
        self.route_projection_grad("W_q", &dwq, grads, |g| &mut g.wq);
        self.route_projection_grad("W_k", &dwk, grads, |g| &mut g.wk);
        self.route_projection_grad("W_v", &dwv, grads, |g| &mut g.wv);
        self.route_projection_grad("W_o", &dwo, grads, |g| &mut g.wo);
        // Embedding rows.
        for (i, &id) in fwd.token_ids.iter().enumerate() {
            for j in 0..d {
                let cur = grads.embed.get(id, j);
                grads.embed.set(id, j, cur + dx.get(i, j));
            }
        }
    }

    /// With adapters on a projection, dW flows into the factors and the
    /// base stays frozen; otherwise the base takes the gradient.
    fn route_projection_grad(
        &self,
        name: &str,
        dw: &Mat,
        grads: &mut ParamSet,
        base: impl Fn(&mut ParamSet) -> &mut Mat,
    ) {
        match (self.params.lora_a.get(name), self.params.lora_b.get(name)) {
            (Some(a), Some(b)) => {
                let s = self.adapter_scale();
                let mut da = dw.matmul_nt(b);
                for v in da.data.iter_mut() {
                    *v *= s;
                }
                let mut db = a.matmul_tn(dw);
                for v in db.data.iter_mut() {
                    *v *= s;
                }
                grads.lora_a.get_mut(name).unwrap().add_scaled(&da, 1.0);
                grads.lora_b.get_mut(name).unwrap().add_scaled(&db, 1.0);
            }
            _ => base(grads).add_scaled(dw, 1.0),
        }
    }

    /// Per-class scores: softmax probabilities (multiclass) or sigmoids
    /// (multilabel), from a dropout-free forward pass.
    pub fn score(&self, token_ids: &[usize], mode: DecisionMode) -> Vec<f64> {
        let eff = self.effective_weights();
        let fwd = self.forward(token_ids, &eff, 0.0, None);
        match mode {
            DecisionMode::Multiclass => softmax(&fwd.logits),
            DecisionMode::Multilabel => fwd.logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Cross-entropy loss and dL/dlogits for a single gold class.
fn ce_loss(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[gold].max(1e-300).ln();
    let mut dlogits = probs;
    dlogits[gold] -= 1.0;
    (loss, dlogits)
}

/// Mean binary cross-entropy over classes and dL/dlogits.
fn bce_loss(logits: &[f64], gold: &[bool]) -> (f64, Vec<f64>) {
    let l = logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for (j, (&z, &y)) in logits.iter().zip(gold).enumerate() {
        let p = sigmoid(z);
        let y = if y { 1.0 } else { 0.0 };
        loss += -(y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln());
        dlogits[j] = (p - y) / l;
    }
    (loss / l, dlogits)
}

fn loss_and_grad(logits: &[f64], target: &GoldTarget, loss: LossKind) -> (f64, Vec<f64>) {
    match (loss, target) {
        (LossKind::Ce, GoldTarget::Class(idx)) => ce_loss(logits, *idx),
        (LossKind::Bce, GoldTarget::MultiHot(hot)) => bce_loss(logits, hot),
        _ => panic!("loss kind inconsistent with gold target shape"),
    }
}

struct AdamW {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamW {
    fn new(shape: &ParamSet) -> Self {
        AdamW {
            m: shape.zeros_like(),
            v: shape.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, spec: &TrainingSpec, frozen_base: bool) {
        self.t += 1;
        let t = self.t;
        let (b1, b2, eps) = (spec.adam_beta1, spec.adam_beta2, spec.adam_epsilon);
        let lr = spec.learning_rate;
        let wd = spec.weight_decay;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], decay: bool| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / (1.0 - b1.powi(t as i32));
                let vhat = v[i] / (1.0 - b2.powi(t as i32));
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
                if decay {
                    // Decoupled decay, never applied to biases.
                    p[i] -= lr * wd * p[i];
                }
            }
        };
        update(
            &mut params.embed.data,
            &grads.embed.data,
            &mut self.m.embed.data,
            &mut self.v.embed.data,
            true,
        );
        if !frozen_base {
            update(&mut params.wq.data, &grads.wq.data, &mut self.m.wq.data, &mut self.v.wq.data, true);
            update(&mut params.wk.data, &grads.wk.data, &mut self.m.wk.data, &mut self.v.wk.data, true);
            update(&mut params.wv.data, &grads.wv.data, &mut self.m.wv.data, &mut self.v.wv.data, true);
            update(&mut params.wo.data, &grads.wo.data, &mut self.m.wo.data, &mut self.v.wo.data, true);
        }
        let names: Vec<String> = params.lora_a.keys().cloned().collect();
        for name in names {
            update(
                &mut params.lora_a.get_mut(&name).unwrap().data,
                &grads.lora_a[&name].data,
                &mut self.m.lora_a.get_mut(&name).unwrap().data,
                &mut self.v.lora_a.get_mut(&name).unwrap().data,
                true,
            );
            update(
                &mut params.lora_b.get_mut(&name).unwrap().data,
                &grads.lora_b[&name].data,
                &mut self.m.lora_b.get_mut(&name).unwrap().data,
                &mut self.v.lora_b.get_mut(&name).unwrap().data,
                true,
            );
        }
        update(
            &mut params.head_w.data,
            &grads.head_w.data,
            &mut self.m.head_w.data,
            &mut self.v.head_w.data,
            true,
        );
        update(
            &mut params.head_b,
            &grads.head_b,
            &mut self.m.head_b,
            &mut self.v.head_b,
            false,
        );
    }
}

fn grad_global_norm(grads: &ParamSet, frozen_base: bool) -> f64 {
    let mut acc = 0.0;
    let mut add = |data: &[f64]| {
        for &g in data {
            acc += g * g;
        }
    };
    add(&grads.embed.data);
    if !frozen_base {
        add(&grads.wq.data);
        add(&grads.wk.data);
        add(&grads.wv.data);
        add(&grads.wo.data);
    }
    for m in grads.lora_a.values() {
        add(&m.data);
    }
    for m in grads.lora_b.values() {
        add(&m.data);
    }
    add(&grads.head_w.data);
    add(&grads.head_b);
    acc.sqrt()
}

fn scale_grads(grads: &mut ParamSet, scale: f64) {
    let apply = |data: &mut [f64]| {
        for g in data.iter_mut() {
            *g *= scale;
        }
    };
    apply(&mut grads.embed.data);
    apply(&mut grads.wq.data);
    apply(&mut grads.wk.data);
    apply(&mut grads.wv.data);
    apply(&mut grads.wo.data);
    for m in grads.lora_a.values_mut() {
        apply(&mut m.data);
    }
    for m in grads.lora_b.values_mut() {
        apply(&mut m.data);
    }
    apply(&mut grads.head_w.data);
    apply(&mut grads.head_b);
}

/// One epoch's record in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub log: Vec<EpochLog>,
}

/// Trains the encoder on pre-encoded sequences. Deterministic for a fixed
/// spec seed: initialization, shuffling, and dropout all draw from
/// seed-derived ChaCha streams in a fixed order.
pub fn train_encoder(
    train_items: &[(Vec<usize>, GoldTarget)],
    val_items: &[(Vec<usize>, GoldTarget)],
    vocab: usize,
    dim: usize,
    labels: usize,
    mode: DecisionMode,
    spec: &TrainingSpec,
) -> Result<TrainOutcome, TrainError> {
    if train_items.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if val_items.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }
    match (spec.loss, mode) {
        (LossKind::Ce, DecisionMode::Multiclass) | (LossKind::Bce, DecisionMode::Multilabel) => {}
        (loss, mode) => {
            return Err(TrainError::InvalidSpec(format!(
                "loss {loss:?} does not fit decision mode {mode:?}"
            )))
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "init"));
    let mut model = EncoderModel::new(vocab, dim, labels, spec, &mut init_rng)?;
    let frozen_base = spec.adapter_rank > 0;
    let mut optimizer = AdamW::new(&model.params);
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "train"));
    let mut log = Vec::with_capacity(spec.epochs);

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..spec.epochs {
        shuffle(&mut order, &mut train_rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(spec.batch_size.max(1)).enumerate() {
            let eff = model.effective_weights();
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (ids, target) = &train_items[idx];
                let fwd = model.forward(ids, &eff, spec.dropout, Some(&mut train_rng));
                let (loss, dlogits) = loss_and_grad(&fwd.logits, target, spec.loss);
                batch_loss += loss;
                model.backward(&fwd, &dlogits, &eff, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            let norm = grad_global_norm(&grads, frozen_base);
            if spec.grad_clip > 0.0 && norm > spec.grad_clip {
                scale_grads(&mut grads, spec.grad_clip / norm);
            }
            optimizer.step(&mut model.params, &grads, spec, frozen_base);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_items.len() as f64;

        let mut val_loss = 0.0;
        let mut decided = Vec::with_capacity(val_items.len());
        let mut gold = Vec::with_capacity(val_items.len());
        for (ids, target) in val_items {
            let eff = model.effective_weights();
            let fwd = model.forward(ids, &eff, 0.0, None);
            let (loss, _) = loss_and_grad(&fwd.logits, target, spec.loss);
            val_loss += loss;
            decided.push(decide_multihot(&fwd.logits, mode, labels));
            gold.push(target_multihot(target, labels));
        }
        val_loss /= val_items.len() as f64;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1: crate::evalsuite::macro_f1_multihot(&decided, &gold),
        });
    }
    Ok(TrainOutcome { model, log })
}

fn decide_multihot(logits: &[f64], mode: DecisionMode, labels: usize) -> Vec<bool> {
    match mode {
        DecisionMode::Multiclass => {
            let probs = softmax(logits);
            let best = super::argmax_lowest(&probs);
            (0..labels).map(|j| j == best).collect()
        }
        DecisionMode::Multilabel => logits.iter().map(|&z| sigmoid(z) > 0.5).collect(),
    }
}

fn target_multihot(target: &GoldTarget, labels: usize) -> Vec<bool> {
    match target {
        GoldTarget::Class(idx) => (0..labels).map(|j| j == *idx).collect(),
        GoldTarget::MultiHot(hot) => hot.clone(),
    }
}

/// Stage seeds derive from the master seed plus a purpose tag.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    fnv1a64(format!("{master}|{purpose}").as_bytes())
}

/// Fisher-Yates with our own RNG so the permutation is pinned to the seed
/// stream, independent of rand crate internals.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = (rng.random::<f64>() * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(rank: usize) -> TrainingSpec {
        TrainingSpec {
            learning_rate: 0.05,
            dropout: 0.0,
            batch_size: 4,
            epochs: 5,
            adapter_rank: rank,
            seed: 7,
            ..TrainingSpec::default()
        }
    }

    /// Central finite differences against the analytic gradient.
    fn check_gradients(rank: usize, loss: LossKind, mode: DecisionMode) {
        let mut spec = tiny_spec(rank);
        spec.loss = loss;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = EncoderModel::new(16, 4, 3, &spec, &mut rng).unwrap();
        // Nonzero head so its gradient pathway is exercised.
        model.params.head_w = Mat::uniform(3, 4, 0.3, &mut rng);
        // Nonzero adapter B so base-vs-adapter routing matters.
        for b in model.params.lora_b.values_mut() {
            *b = Mat::uniform(b.rows, b.cols, 0.1, &mut rng);
        }
        let ids = vec![1usize, 5, 9];
        let target = match mode {
            DecisionMode::Multiclass => GoldTarget::Class(2),
            DecisionMode::Multilabel => GoldTarget::MultiHot(vec![true, false, true]),
        };
        let loss_of = |m: &EncoderModel| {
            let eff = m.effective_weights();
            let fwd = m.forward(&ids, &eff, 0.0, None);
            loss_and_grad(&fwd.logits, &target, loss).0
        };
        let eff = model.effective_weights();
        let fwd = model.forward(&ids, &eff, 0.0, None);
        let (_, dlogits) = loss_and_grad(&fwd.logits, &target, loss);
        let mut grads = model.params.zeros_like();
        model.backward(&fwd, &dlogits, &eff, &mut grads);

        let eps = 1e-6;
        let check = |analytic: f64, perturb: &mut dyn FnMut(&mut EncoderModel, f64), what: &str| {
            let mut plus = model.clone();
            perturb(&mut plus, eps);
            let mut minus = model.clone();
            perturb(&mut minus, -eps);
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };

        check(grads.embed.get(5, 2), &mut |m, e| {
            let v = m.params.embed.get(5, 2);
            m.params.embed.set(5, 2, v + e);
        }, "embed[5,2]");
        check(grads.head_w.get(1, 3), &mut |m, e| {
            let v = m.params.head_w.get(1, 3);
            m.params.head_w.set(1, 3, v + e);
        }, "head_w[1,3]");
        check(grads.head_b[0], &mut |m, e| m.params.head_b[0] += e, "head_b[0]");
        if rank > 0 {
            check(grads.lora_a["W_q"].get(2, 1), &mut |m, e| {
                let v = m.params.lora_a.get_mut("W_q").unwrap().get(2, 1);
                m.params.lora_a.get_mut("W_q").unwrap().set(2, 1, v + e);
            }, "lora_a[W_q][2,1]");
            check(grads.lora_b["W_o"].get(0, 3), &mut |m, e| {
                let v = m.params.lora_b.get_mut("W_o").unwrap().get(0, 3);
                m.params.lora_b.get_mut("W_o").unwrap().set(0, 3, v + e);
            }, "lora_b[W_o][0,3]");
        } else {
            check(grads.wq.get(1, 2), &mut |m, e| {
                let v = m.params.wq.get(1, 2);
                m.params.wq.set(1, 2, v + e);
            }, "wq[1,2]");
            check(grads.wo.get(3, 0), &mut |m, e| {
                let v = m.params.wo.get(3, 0);
                m.params.wo.set(3, 0, v + e);
            }, "wo[3,0]");
            check(grads.wk.get(0, 1), &mut |m, e| {
                let v = m.params.wk.get(0, 1);
                m.params.wk.set(0, 1, v + e);
            }, "wk[0,1]");
            check(grads.wv.get(2, 3), &mut |m, e| {
                let v = m.params.wv.get(2, 3);
                m.params.wv.set(2, 3, v + e);
            }, "wv[2,3]");
        }
    }

    #[test]
    fn gradients_match_finite_differences_full_model() {
        check_gradients(0, LossKind::Ce, DecisionMode::Multiclass);
        check_gradients(0, LossKind::Bce, DecisionMode::Multilabel);
    }

    #[test]
    fn gradients_match_finite_differences_with_adapters() {
        check_gradients(2, LossKind::Ce, DecisionMode::Multiclass);
        check_gradients(2, LossKind::Bce, DecisionMode::Multilabel);
    }

    #[test]
    fn frozen_base_weights_do_not_move_under_adapters() {
        let spec = tiny_spec(2);
        let items: Vec<(Vec<usize>, GoldTarget)> = (0..8)
            .map(|i| (vec![i % 16, (i * 3) % 16], GoldTarget::Class(i % 3)))
            .collect();
        let outcome = train_encoder(&items, &items, 16, 4, 3, DecisionMode::Multiclass, &spec)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "init"));
        let fresh = EncoderModel::new(16, 4, 3, &spec, &mut rng).unwrap();
        assert_eq!(outcome.model.params.wq, fresh.params.wq);
        assert_eq!(outcome.model.params.wo, fresh.params.wo);
        // While embeddings, head, and adapters did move.
        assert_ne!(outcome.model.params.embed, fresh.params.embed);
        assert_ne!(outcome.model.params.head_w, fresh.params.head_w);
        assert_ne!(outcome.model.params.lora_b, fresh.params.lora_b);
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let spec = tiny_spec(0);
        let items: Vec<(Vec<usize>, GoldTarget)> = (0..12)
            .map(|i| (vec![i % 16, (i * 5) % 16, (i * 7) % 16], GoldTarget::Class(i % 3)))
            .collect();
        let a = train_encoder(&items, &items, 16, 4, 3, DecisionMode::Multiclass, &spec).unwrap();
        let b = train_encoder(&items, &items, 16, 4, 3, DecisionMode::Multiclass, &spec).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn separable_classes_reach_high_val_f1() {
        // Three classes, each marked by a dedicated token id.
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..3usize {
            let marker = class + 1;
            for i in 0..10 {
                let noise = 10 + ((i * 7 + class) % 6);
                let item = (vec![marker, noise, marker], GoldTarget::Class(class));
                if i < 8 {
                    train.push(item);
                } else {
                    val.push(item);
                }
            }
        }
        let mut spec = tiny_spec(0);
        spec.epochs = 30;
        let outcome = train_encoder(&train, &val, 16, 8, 3, DecisionMode::Multiclass, &spec)
            .unwrap();
        let last = outcome.log.last().unwrap();
        assert!(last.val_macro_f1 >= 0.9, "val macro f1 {}", last.val_macro_f1);
    }

    #[test]
    fn loss_mode_mismatch_is_invalid_spec() {
        let mut spec = tiny_spec(0);
        spec.loss = LossKind::Bce;
        let items = vec![(vec![1usize], GoldTarget::Class(0))];
        let err = train_encoder(&items, &items, 16, 4, 2, DecisionMode::Multiclass, &spec)
            .unwrap_err();
        assert!(matches!(err, TrainError::InvalidSpec(_)));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let spec = tiny_spec(0);
        let items = vec![(vec![1usize], GoldTarget::Class(0))];
        assert!(matches!(
            train_encoder(&[], &items, 16, 4, 2, DecisionMode::Multiclass, &spec),
            Err(TrainError::EmptySplit { split: "train" })
        ));
        assert!(matches!(
            train_encoder(&items, &[], 16, 4, 2, DecisionMode::Multiclass, &spec),
            Err(TrainError::EmptySplit { split: "val" })
        ));
    }

    #[test]
    fn encode_text_buckets_and_truncates() {
        let ids = encode_text("one two three four", 32, 3);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&id| id < 32));
        assert_eq!(encode_text("one two", 32, 10), encode_text("ONE two!", 32, 10));
        // Empty text still yields one position.
        assert_eq!(encode_text("", 32, 10).len(), 1);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let logits = vec![0.3, -1.2, 2.5, 0.0];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|z| z + 100.0).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
