//! Toy-scale image-text contrastive captioner: a deterministic one-hot
//! featurizer stands in for the vision encoder, a shared embedding table
//! feeds both the contrastive text encoder and a single-layer recurrent
//! decoder, and the whole thing trains by plain SGD with hand-derived
//! gradients so every step is reproducible and checkable.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SatTile;
use crate::error::{Error, Result};
use crate::grammar;
use crate::linalg::{norm2, Mat};
use crate::prompting::{CaptionRecord, CaptionSource};
use crate::seeds;
use crate::text::{fnv1a, tokenize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Dense token -> id map over the grammar lexicon plus the four specials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        let mut rest: Vec<String> = tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .filter(|t| seen.insert(t.clone(), ()).is_none())
            .collect();
        rest.sort();
        list.extend(rest);
        let index = list
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens: list,
            index,
        }
    }

    /// Vocabulary over everything the caption grammar can emit.
    pub fn from_grammar() -> Vocab {
        Vocab::from_tokens(grammar::render_lexicon())
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Content token ids (no BOS/EOS framing).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS && i != EOS && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ---------------------------------------------------------------------------
// Image features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Scale of the seeded per-tile jitter added to synthetic features;
    /// 0 disables it.
    pub jitter: f64,
    /// Patch grid (g x g) for the raster path.
    pub grid: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            jitter: 0.01,
            grid: 8,
        }
    }
}

/// Deterministic per-tile features: one-hot attribute encoding plus seeded
/// jitter in synthetic mode, patch-mean intensities for PGM rasters.
pub fn image_features(tile: &SatTile, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    if let Some(attrs) = &tile.latent_attributes {
        let mut x = grammar::one_hot(attrs);
        if cfg.jitter > 0.0 {
            let mut rng = seeds::stream(fnv1a(tile.tile_id.as_bytes()), "jitter", 0);
            for v in &mut x {
                *v += cfg.jitter * rng.random_range(-1.0..1.0);
            }
        }
        return Ok(x);
    }
    if let Some(uri) = &tile.image_uri {
        let raw = std::fs::read(uri).map_err(|e| Error::io(uri, e))?;
        let img = parse_pgm(&raw)?;
        return Ok(patch_means(&img, cfg.grid));
    }
    Err(Error::InvalidArgument(format!(
        "tile {} has neither latent attributes nor a raster",
        tile.tile_id
    )))
}

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Minimal PGM reader (binary P5 and ascii P2, maxval <= 255).
pub fn parse_pgm(raw: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::Validation(format!("pgm: {m}"));
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    let magic = raw.get(..2).ok_or_else(|| bad("truncated header"))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(bad("not a P2/P5 file")),
    };
    pos += 2;
    while fields.len() < 3 && pos < raw.len() {
        match raw[pos] {
            b'#' => {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
            }
        }
    }
    if fields.len() < 3 {
        return Err(bad("truncated header"));
    }
    let width: usize = fields[0].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[1].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = fields[2].parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    let pixels: Vec<u8> = if binary {
        pos += 1; // single whitespace after maxval
        raw.get(pos..pos + width * height)
            .ok_or_else(|| bad("truncated pixel data"))?
            .to_vec()
    } else {
        let text = String::from_utf8_lossy(&raw[pos..]);
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .map(|t| t.parse::<u8>().map_err(|_| bad("bad pixel")))
            .collect::<Result<_>>()?;
        if vals.len() < width * height {
            return Err(bad("truncated pixel data"));
        }
        vals[..width * height].to_vec()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Mean intensity (0..1) over a grid x grid partition.
pub fn patch_means(img: &GrayImage, grid: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let x0 = gx * img.width / grid;
            let x1 = ((gx + 1) * img.width / grid).max(x0 + 1).min(img.width);
            let y0 = gy * img.height / grid;
            let y1 = ((gy + 1) * img.height / grid).max(y0 + 1).min(img.height);
            let mut sum = 0.0;
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += img.pixels[y * img.width + x] as f64;
                    count += 1.0;
                }
            }
            out.push(if count > 0.0 { sum / count / 255.0 } else { 0.0 });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// ITC loss
// ---------------------------------------------------------------------------

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Symmetric InfoNCE over L2-normalized rows with matched pairs on the
/// diagonal. Returns the loss and analytic gradients for both inputs.
pub fn itc_loss(image_embs: &Mat, text_embs: &Mat, tau: f64) -> Result<(f64, Mat, Mat)> {
    let n = image_embs.rows;
    if n < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs a batch of >= 2".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    if text_embs.rows != n || text_embs.cols != image_embs.cols {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {}x{} vs {}x{}",
            image_embs.rows, image_embs.cols, text_embs.rows, text_embs.cols
        )));
    }
    let d = image_embs.cols;

    // sims[i][j] = <img_i, txt_j> / tau
    let mut sims = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                acc += image_embs.get(i, k) * text_embs.get(j, k);
            }
            sims.set(i, j, acc / tau);
        }
    }

    let mut loss = 0.0;
    let mut d_sims = Mat::zeros(n, n);
    // image -> text direction (rows).
    for i in 0..n {
        let p = softmax_row(sims.row(i));
        loss -= p[i].ln() / (2.0 * n as f64);
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_sims.set(i, j, d_sims.get(i, j) + (p[j] - delta) / (2.0 * n as f64));
        }
    }
    // text -> image direction (columns).
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sims.get(i, j)).collect();
        let p = softmax_row(&col);
        loss -= p[j].ln() / (2.0 * n as f64);
        for i in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_sims.set(i, j, d_sims.get(i, j) + (p[i] - delta) / (2.0 * n as f64));
        }
    }

    let mut g_img = Mat::zeros(n, d);
    let mut g_txt = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let gs = d_sims.get(i, j) / tau;
            if gs == 0.0 {
                continue;
            }
            for k in 0..d {
                g_img.set(i, k, g_img.get(i, k) + gs * text_embs.get(j, k));
                g_txt.set(j, k, g_txt.get(j, k) + gs * image_embs.get(i, k));
            }
        }
    }
    Ok((loss, g_img, g_txt))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// All trainable tensors. The embedding table is shared between the
/// contrastive text encoder and the decoder input; the projected image
/// vector conditions the decoder at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerModel {
    pub vocab: Vocab,
    pub embed: Mat,      // |V| x d_emb
    pub image_proj: Mat, // d_emb x d_img
    pub text_proj: Mat,  // d_emb x d_emb
    pub w_hh: Mat,       // d_emb x d_emb
    pub w_xh: Mat,       // d_emb x d_emb
    pub w_ih: Mat,       // d_emb x d_emb
    pub b_h: Vec<f64>,
    pub w_out: Mat, // |V| x d_emb
    pub b_out: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub tau: f64,
    pub d_emb: usize,
    pub features: FeatureConfig,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            epochs: 100,
            lr: 0.5,
            batch: 16,
            seed: 11,
            tau: 0.07,
            d_emb: 48,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub itc: f64,
    pub ce: f64,
}

impl CaptionerModel {
    pub fn init(vocab: Vocab, d_img: usize, d_emb: usize, tau: f64, seed: u64) -> CaptionerModel {
        let mut rng = seeds::stream(seed, "captioner-init", 0);
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let mut m = Mat::zeros(rows, cols);
            for v in &mut m.data {
                *v = rng.random_range(-scale..scale);
            }
            m
        };
        let v = vocab.len();
        let es = (1.0 / d_emb as f64).sqrt();
        CaptionerModel {
            embed: mat(v, d_emb, es),
            image_proj: mat(d_emb, d_img, (1.0 / d_img as f64).sqrt()),
            text_proj: mat(d_emb, d_emb, es),
            w_hh: mat(d_emb, d_emb, es),
            w_xh: mat(d_emb, d_emb, es),
            w_ih: mat(d_emb, d_emb, es),
            b_h: vec![0.0; d_emb],
            w_out: mat(v, d_emb, es),
            b_out: vec![0.0; v],
            tau,
            vocab,
        }
    }

    pub fn d_emb(&self) -> usize {
        self.text_proj.rows
    }

    pub fn d_img(&self) -> usize {
        self.image_proj.cols
    }

    fn image_embedding_unnorm(&self, feat: &[f64]) -> Vec<f64> {
        self.image_proj.matvec(feat)
    }

    fn text_pooled(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.d_emb();
        let mut pooled = vec![0.0; d];
        if tokens.is_empty() {
            return pooled;
        }
        for &t in tokens {
            for (p, e) in pooled.iter_mut().zip(self.embed.row(t)) {
                *p += e / tokens.len() as f64;
            }
        }
        pooled
    }

    /// Contrastive-space embeddings (L2 normalized).
    pub fn encode_image(&self, feat: &[f64]) -> Vec<f64> {
        normalize(&self.image_embedding_unnorm(feat))
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Vec<f64> {
        normalize(&self.text_proj.matvec(&self.text_pooled(tokens)))
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = norm2(v);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// d(normalize)/du applied to an upstream gradient: (g - (g.u_hat)u_hat)/|u|.
fn normalize_backward(u: &[f64], g_normed: &[f64]) -> Vec<f64> {
    let n = norm2(u);
    if n == 0.0 {
        return g_normed.to_vec();
    }
    let u_hat: Vec<f64> = u.iter().map(|x| x / n).collect();
    let proj: f64 = g_normed.iter().zip(&u_hat).map(|(g, h)| g * h).sum();
    g_normed
        .iter()
        .zip(&u_hat)
        .map(|(g, h)| (g - proj * h) / n)
        .collect()
}

/// Gradients for every tensor in the model.
pub struct CaptionerGrads {
    pub embed: Mat,
    pub image_proj: Mat,
    pub text_proj: Mat,
    pub w_hh: Mat,
    pub w_xh: Mat,
    pub w_ih: Mat,
    pub b_h: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl CaptionerGrads {
    fn zeros(m: &CaptionerModel) -> CaptionerGrads {
        CaptionerGrads {
            embed: Mat::zeros(m.embed.rows, m.embed.cols),
            image_proj: Mat::zeros(m.image_proj.rows, m.image_proj.cols),
            text_proj: Mat::zeros(m.text_proj.rows, m.text_proj.cols),
            w_hh: Mat::zeros(m.w_hh.rows, m.w_hh.cols),
            w_xh: Mat::zeros(m.w_xh.rows, m.w_xh.cols),
            w_ih: Mat::zeros(m.w_ih.rows, m.w_ih.cols),
            b_h: vec![0.0; m.b_h.len()],
            w_out: Mat::zeros(m.w_out.rows, m.w_out.cols),
            b_out: vec![0.0; m.b_out.len()],
        }
    }
}

/// Loss (ITC + teacher-forced decoder cross-entropy) and gradients for one
/// batch. `feats[i]` pairs with token sequence `tokens[i]` (content tokens,
/// no framing). Batches of one skip the contrastive term.
pub fn batch_loss_and_grads(
    model: &CaptionerModel,
    feats: &[Vec<f64>],
    tokens: &[Vec<usize>],
) -> Result<(f64, f64, f64, CaptionerGrads)> {
    let n = feats.len();
    let d = model.d_emb();
    let mut grads = CaptionerGrads::zeros(model);

    // --- contrastive term ---
    let mut itc = 0.0;
    if n >= 2 {
        let img_unnorm: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| model.image_embedding_unnorm(f))
            .collect();
        let pooled: Vec<Vec<f64>> = tokens.iter().map(|t| model.text_pooled(t)).collect();
        let txt_unnorm: Vec<Vec<f64>> = pooled.iter().map(|p| model.text_proj.matvec(p)).collect();
        let img_e = Mat::from_rows(&img_unnorm.iter().map(|u| normalize(u)).collect::<Vec<_>>());
        let txt_e = Mat::from_rows(&txt_unnorm.iter().map(|u| normalize(u)).collect::<Vec<_>>());
        let (loss, g_img, g_txt) = itc_loss(&img_e, &txt_e, model.tau)?;
        itc = loss;
        for i in 0..n {
            let gu = normalize_backward(&img_unnorm[i], g_img.row(i));
            for (j, g) in gu.iter().enumerate() {
                let row = grads.image_proj.row_mut(j);
                for (w, f) in row.iter_mut().zip(&feats[i]) {
                    *w += g * f;
                }
            }
            let gt = normalize_backward(&txt_unnorm[i], g_txt.row(i));
            // text_proj and the pooled embedding.
            for (j, g) in gt.iter().enumerate() {
                let row = grads.text_proj.row_mut(j);
                for (w, p) in row.iter_mut().zip(&pooled[i]) {
                    *w += g * p;
                }
            }
            if !tokens[i].is_empty() {
                let d_pooled = model.text_proj.matvec_t(&gt);
                let scale = 1.0 / tokens[i].len() as f64;
                for &t in &tokens[i] {
                    let row = grads.embed.row_mut(t);
                    for (w, g) in row.iter_mut().zip(&d_pooled) {
                        *w += g * scale;
                    }
                }
            }
        }
    }

    // --- decoder term (teacher forcing over [BOS, tokens, EOS]) ---
    let total_steps: usize = tokens.iter().map(|t| t.len() + 1).sum();
    let mut ce = 0.0;
    for (feat, toks) in feats.iter().zip(tokens) {
        let seq: Vec<usize> = std::iter::once(BOS)
            .chain(toks.iter().copied())
            .chain(std::iter::once(EOS))
            .collect();
        let steps = seq.len() - 1;

        // Forward, caching hidden states. The projected image vector `c`
        // seeds h0 and conditions every step through w_ih.
        let c = model.image_embedding_unnorm(feat);
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
        hs.push(c.iter().map(|v| v.tanh()).collect());
        let ih = model.w_ih.matvec(&c);
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let h_prev = &hs[t];
            let e = model.embed.row(seq[t]);
            let mut pre = model.w_hh.matvec(h_prev);
            let xh = model.w_xh.matvec(e);
            for (((p, x), i), b) in pre.iter_mut().zip(&xh).zip(&ih).zip(&model.b_h) {
                *p += x + i + b;
            }
            let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
            let mut logits = model.w_out.matvec(&h);
            for (l, b) in logits.iter_mut().zip(&model.b_out) {
                *l += b;
            }
            let p = softmax_row(&logits);
            ce -= p[seq[t + 1]].ln() / total_steps as f64;
            probs.push(p);
            hs.push(h);
        }

        // Backward through time; d_c accumulates over all steps.
        let mut d_c = vec![0.0; d];
        let mut d_h_next = vec![0.0; d];
        for t in (0..steps).rev() {
            let h = &hs[t + 1];
            let mut d_logits = probs[t].clone();
            d_logits[seq[t + 1]] -= 1.0;
            for dl in &mut d_logits {
                *dl /= total_steps as f64;
            }
            let mut d_h = d_h_next.clone();
            for (v, dl) in d_logits.iter().enumerate() {
                if *dl == 0.0 {
                    continue;
                }
                grads.b_out[v] += dl;
                let row = grads.w_out.row_mut(v);
                let w_row = model.w_out.row(v);
                for k in 0..d {
                    row[k] += dl * h[k];
                    d_h[k] += dl * w_row[k];
                }
            }
            let d_pre: Vec<f64> = d_h
                .iter()
                .zip(h)
                .map(|(g, hv)| g * (1.0 - hv * hv))
                .collect();
            let h_prev = &hs[t];
            let e = model.embed.row(seq[t]);
            for j in 0..d {
                grads.b_h[j] += d_pre[j];
                let row_hh = grads.w_hh.row_mut(j);
                for k in 0..d {
                    row_hh[k] += d_pre[j] * h_prev[k];
                }
                let row_xh = grads.w_xh.row_mut(j);
                for k in 0..d {
                    row_xh[k] += d_pre[j] * e[k];
                }
                let row_ih = grads.w_ih.row_mut(j);
                for k in 0..d {
                    row_ih[k] += d_pre[j] * c[k];
                }
            }
            {
                let d_e = model.w_xh.matvec_t(&d_pre);
                let row = grads.embed.row_mut(seq[t]);
                for (w, g) in row.iter_mut().zip(&d_e) {
                    *w += g;
                }
            }
            for (dc, g) in d_c.iter_mut().zip(model.w_ih.matvec_t(&d_pre)) {
                *dc += g;
            }
            d_h_next = model.w_hh.matvec_t(&d_pre);
        }
        // Into h0 = tanh(c), then c = image_proj . feat.
        for ((dc, g), hv) in d_c.iter_mut().zip(&d_h_next).zip(&hs[0]) {
            *dc += g * (1.0 - hv * hv);
        }
        for (j, g) in d_c.iter().enumerate() {
            let row = grads.image_proj.row_mut(j);
            for (w, f) in row.iter_mut().zip(feat) {
                *w += g * f;
            }
        }
    }

    Ok((itc + ce, itc, ce, grads))
}

fn apply_sgd(model: &mut CaptionerModel, grads: &CaptionerGrads, lr: f64) {
    let step = |w: &mut Mat, g: &Mat| {
        for (a, b) in w.data.iter_mut().zip(&g.data) {
            *a -= lr * b;
        }
    };
    step(&mut model.embed, &grads.embed);
    step(&mut model.image_proj, &grads.image_proj);
    step(&mut model.text_proj, &grads.text_proj);
    step(&mut model.w_hh, &grads.w_hh);
    step(&mut model.w_xh, &grads.w_xh);
    step(&mut model.w_ih, &grads.w_ih);
    step(&mut model.w_out, &grads.w_out);
    for (a, b) in model.b_h.iter_mut().zip(&grads.b_h) {
        *a -= lr * b;
    }
    for (a, b) in model.b_out.iter_mut().zip(&grads.b_out) {
        *a -= lr * b;
    }
}

/// Train on (tile, caption) pairs. Deterministic per seed; returns the model
/// and per-epoch losses.
pub fn train_captioner(
    pairs: &[(SatTile, CaptionRecord)],
    cfg: &CaptionerConfig,
) -> Result<(CaptionerModel, Vec<CaptionerEpoch>)> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(
            "captioner training needs >= 2 pairs".into(),
        ));
    }
    let vocab = Vocab::from_grammar();
    let feats: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(tile, _)| image_features(tile, &cfg.features))
        .collect::<Result<_>>()?;
    let tokens: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(_, cap)| vocab.encode(&cap.text))
        .collect();
    let d_img = feats[0].len();
    let mut model = CaptionerModel::init(vocab, d_img, cfg.d_emb, cfg.tau, cfg.seed);
    let mut metrics = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = seeds::stream(cfg.seed, "captioner-shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut weight = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch_feats: Vec<Vec<f64>> = chunk.iter().map(|&i| feats[i].clone()).collect();
            let batch_tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let (loss, itc, ce, grads) = batch_loss_and_grads(&model, &batch_feats, &batch_tokens)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    details: format!("captioner batch of {} produced {loss}", chunk.len()),
                });
            }
            apply_sgd(&mut model, &grads, cfg.lr);
            sums.0 += loss * chunk.len() as f64;
            sums.1 += itc * chunk.len() as f64;
            sums.2 += ce * chunk.len() as f64;
            weight += chunk.len() as f64;
        }
        metrics.push(CaptionerEpoch {
            epoch,
            loss: sums.0 / weight,
            itc: sums.1 / weight,
            ce: sums.2 / weight,
        });
    }
    Ok((model, metrics))
}

/// Greedy decode from BOS until EOS or `max_len` tokens.
pub fn generate_caption(
    model: &CaptionerModel,
    tile: &SatTile,
    max_len: usize,
    features: &FeatureConfig,
) -> Result<CaptionRecord> {
    let feat = image_features(tile, features)?;
    if feat.len() != model.d_img() {
        return Err(Error::InvalidArgument(format!(
            "feature dim {} != model d_img {}",
            feat.len(),
            model.d_img()
        )));
    }
    let c = model.image_embedding_unnorm(&feat);
    let ih = model.w_ih.matvec(&c);
    let mut h: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let mut ids = Vec::new();
    let mut prev = BOS;
    let mut truncated = true;
    for _ in 0..max_len {
        let e = model.embed.row(prev);
        let mut pre = model.w_hh.matvec(&h);
        let xh = model.w_xh.matvec(e);
        for (((p, x), i), b) in pre.iter_mut().zip(&xh).zip(&ih).zip(&model.b_h) {
            *p += x + i + b;
        }
        h = pre.iter().map(|v| v.tanh()).collect();
        let mut logits = model.w_out.matvec(&h);
        for (l, b) in logits.iter_mut().zip(&model.b_out) {
            *l += b;
        }
        // Greedy argmax, smallest id on exact ties.
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        if best == EOS {
            truncated = false;
            break;
        }
        ids.push(best);
        prev = best;
    }
    let text = model.vocab.decode(&ids);
    Ok(CaptionRecord {
        tile_id: tile.tile_id.clone(),
        tier: 2,
        source: CaptionSource::ToyCaptioner,
        text,
        attributes: Default::default(),
        truncated,
    })
}

/// In-batch image->text top-1 retrieval accuracy. A retrieval counts as
/// correct when the retrieved caption text equals the true caption (counties
/// can share identical captions).
pub fn itc_retrieval_accuracy(
    model: &CaptionerModel,
    pairs: &[(SatTile, CaptionRecord)],
    batch: usize,
    seed: u64,
    features: &FeatureConfig,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = seeds::stream(seed, "retrieval", 0);
    order.shuffle(&mut rng);
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in order.chunks(batch.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let img: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| Ok(model.encode_image(&image_features(&pairs[i].0, features)?)))
            .collect::<Result<_>>()?;
        let txt: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&i| model.encode_text(&model.vocab.encode(&pairs[i].1.text)))
            .collect();
        for (a, &i) in chunk.iter().enumerate() {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (b, t) in txt.iter().enumerate() {
                let sim: f64 = img[a].iter().zip(t).map(|(x, y)| x * y).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = b;
                }
            }
            if pairs[chunk[best]].1.text == pairs[i].1.text {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CaptionerCheckpoint {
    format_version: u32,
    model: CaptionerModel,
}

pub fn save_captioner(path: &Path, model: &CaptionerModel) -> Result<()> {
    let ckpt = CaptionerCheckpoint {
        format_version: 1,
        model: model.clone(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_captioner(path: &Path) -> Result<CaptionerModel> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: CaptionerCheckpoint =
        serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
    if ckpt.format_version != 1 {
        return Err(Error::Validation(format!(
            "captioner checkpoint format {} unsupported",
            ckpt.format_version
        )));
    }
    let mut model = ckpt.model;
    model.vocab.rebuild_index();
    Ok(model)
}
