//! Attention-weighted fusion of the two caption embeddings feeding the
//! batch-norm MLP head: per-modality logits `ups . tanh(phi . e)`, a 2-way
//! softmax over them, a convex combination of the embeddings, then the scalar
//! SVI head. Training minimizes MSE against county SVI at tile or county
//! level; county estimates average tile predictions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SviRecord;
use crate::encode::{Embedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::mlp::{
    backward_train_batch, forward_eval, forward_train_batch, update_running_stats, BnBatchStats,
    BnMode, MlpGrads, MlpParams,
};
use crate::seeds;

/// Attention parameters: `phi` projects an embedding to d_o, `ups` maps the
/// tanh of that to a scalar logit. Shared across both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub phi: Mat,
    pub ups: Vec<f64>,
}

impl FusionParams {
    pub fn init(d_o: usize, input_dim: usize, seed: u64) -> FusionParams {
        let mut rng = seeds::stream(seed, "fusion-init", 0);
        let scale = (1.0 / input_dim as f64).sqrt();
        let mut phi = Mat::zeros(d_o, input_dim);
        for v in &mut phi.data {
            *v = rng.random_range(-scale..scale);
        }
        let ups = (0..d_o).map(|_| rng.random_range(-0.5..0.5)).collect();
        FusionParams { phi, ups }
    }

    pub fn d_o(&self) -> usize {
        self.phi.rows
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.ups.iter().all(|v| v.is_finite())
    }
}

/// Softmax attention coefficients over the two modalities; always on the
/// simplex, each strictly positive when produced by [`attention_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub rho_sc: f64,
    pub rho_llm: f64,
}

impl FusionWeights {
    /// Validate the closed-simplex invariant (endpoints allowed, so unit
    /// tests can construct the (1, 0) limit directly).
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.rho_sc)
            && (0.0..=1.0).contains(&self.rho_llm)
            && (self.rho_sc + self.rho_llm - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "fusion weights ({}, {}) violate the simplex invariant",
                self.rho_sc, self.rho_llm
            )))
        }
    }
}

/// Convex combination of the two embeddings under validated weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEmbedding {
    pub vector: Vec<f64>,
    pub weights: FusionWeights,
}

fn logit(p: &FusionParams, e: &[f64]) -> f64 {
    let projected = p.phi.matvec(e);
    p.ups
        .iter()
        .zip(&projected)
        .map(|(u, z)| u * z.tanh())
        .sum()
}

/// 2-way softmax with max subtraction.
fn softmax2(l_sc: f64, l_llm: f64) -> (f64, f64) {
    let m = l_sc.max(l_llm);
    let a = (l_sc - m).exp();
    let b = (l_llm - m).exp();
    (a / (a + b), b / (a + b))
}

/// Attention weights over arbitrary-dimension slices (the embedding-typed
/// wrapper enforces 512).
pub fn attention_weights_raw(
    e_sc: &[f64],
    e_llm: &[f64],
    p: &FusionParams,
) -> Result<FusionWeights> {
    if !e_sc.iter().all(|v| v.is_finite()) || !e_llm.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(
            "attention inputs must be finite".into(),
        ));
    }
    if !p.is_finite() {
        return Err(Error::InvalidArgument(
            "attention parameters must be finite".into(),
        ));
    }
    let (rho_sc, rho_llm) = softmax2(logit(p, e_sc), logit(p, e_llm));
    Ok(FusionWeights { rho_sc, rho_llm })
}

pub fn attention_weights(
    e_sc: &Embedding,
    e_llm: &Embedding,
    p: &FusionParams,
) -> Result<FusionWeights> {
    attention_weights_raw(&e_sc.vector, &e_llm.vector, p)
}

/// Componentwise convex combination, computed as `a + rho_llm*(b - a)` and
/// pinned to [min(a_i, b_i), max(a_i, b_i)]. The pin only ever moves a value
/// by one rounding of (b - a): without it the combination can overshoot the
/// box by an ulp when |b - a| is large relative to the endpoints.
pub fn fuse_raw(e_sc: &[f64], e_llm: &[f64], w: FusionWeights) -> Result<Vec<f64>> {
    w.validate()?;
    if e_sc.len() != e_llm.len() {
        return Err(Error::InvalidArgument("embedding dims differ".into()));
    }
    Ok(e_sc
        .iter()
        .zip(e_llm)
        .map(|(a, b)| (a + w.rho_llm * (b - a)).clamp(a.min(*b), a.max(*b)))
        .collect())
}

pub fn fuse(e_sc: &Embedding, e_llm: &Embedding, w: FusionWeights) -> Result<FusedEmbedding> {
    Ok(FusedEmbedding {
        vector: fuse_raw(&e_sc.vector, &e_llm.vector, w)?,
        weights: w,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Tile,
    County,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub d_o: usize,
    pub level: Level,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 0.05,
            batch: 16,
            seed: 13,
            hidden: 64,
            d_o: 64,
            level: Level::Tile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub loss: f64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub fusion: FusionParams,
    pub mlp: MlpParams,
    pub metrics: Vec<EpochMetric>,
}

/// One training sample: the two modality embeddings and the county key.
pub type Sample = (Embedding, Embedding, String);

/// Gradients of the composed loss (attention -> fuse -> MLP-BN -> MSE).
pub struct ComposedGrads {
    pub d_phi: Mat,
    pub d_ups: Vec<f64>,
    pub mlp: MlpGrads,
    pub bn_stats: BnBatchStats,
}

struct AttentionForward {
    t_sc: Vec<f64>,
    t_llm: Vec<f64>,
    rho_llm: f64,
    rho_sc: f64,
}

fn attention_forward(p: &FusionParams, e_sc: &[f64], e_llm: &[f64]) -> AttentionForward {
    let t_sc: Vec<f64> = p.phi.matvec(e_sc).iter().map(|z| z.tanh()).collect();
    let t_llm: Vec<f64> = p.phi.matvec(e_llm).iter().map(|z| z.tanh()).collect();
    let l_sc = dot(&p.ups, &t_sc);
    let l_llm = dot(&p.ups, &t_llm);
    let (rho_sc, rho_llm) = softmax2(l_sc, l_llm);
    AttentionForward {
        t_sc,
        t_llm,
        rho_llm,
        rho_sc,
    }
}

/// Accumulate attention-parameter gradients for one sample given dL/drho_llm.
fn attention_backward(
    p: &FusionParams,
    fw: &AttentionForward,
    e_sc: &[f64],
    e_llm: &[f64],
    d_rho_llm: f64,
    d_phi: &mut Mat,
    d_ups: &mut [f64],
) {
    // rho_llm = softmax2(l_sc, l_llm).1:
    // d rho_llm / d l_llm = rho_llm * rho_sc, d rho_llm / d l_sc = -rho_llm * rho_sc
    let d_l_llm = d_rho_llm * fw.rho_llm * fw.rho_sc;
    let d_l_sc = -d_l_llm;
    for (modality, (t, e)) in [(d_l_sc, (&fw.t_sc, e_sc)), (d_l_llm, (&fw.t_llm, e_llm))] {
        if modality == 0.0 {
            continue;
        }
        for j in 0..p.d_o() {
            d_ups[j] += modality * t[j];
            let d_pre = modality * p.ups[j] * (1.0 - t[j] * t[j]);
            let row = d_phi.row_mut(j);
            for (w, ev) in row.iter_mut().zip(e) {
                *w += d_pre * ev;
            }
        }
    }
}

/// Composed loss and gradients on a batch of (e_sc, e_llm, target) samples,
/// with the MLP in training mode on the fused rows. `groups`, when given,
/// averages fused embeddings per group before the head (county level); each
/// group contributes one MLP row.
pub fn composed_loss_and_grads(
    fp: &FusionParams,
    mp: &MlpParams,
    samples: &[(&[f64], &[f64], f64)],
    groups: Option<&[Vec<usize>]>,
) -> Result<(f64, ComposedGrads)> {
    let forwards: Vec<AttentionForward> = samples
        .iter()
        .map(|(e_sc, e_llm, _)| attention_forward(fp, e_sc, e_llm))
        .collect();
    let fused: Vec<Vec<f64>> = samples
        .iter()
        .zip(&forwards)
        .map(|((e_sc, e_llm, _), fw)| {
            fuse_raw(
                e_sc,
                e_llm,
                FusionWeights {
                    rho_sc: fw.rho_sc,
                    rho_llm: fw.rho_llm,
                },
            )
        })
        .collect::<Result<_>>()?;

    let owned_groups: Vec<Vec<usize>> = match groups {
        Some(g) => g.to_vec(),
        None => (0..samples.len()).map(|i| vec![i]).collect(),
    };
    let rows: Vec<Vec<f64>> = owned_groups
        .iter()
        .map(|idxs| {
            let dim = fused[idxs[0]].len();
            let mut mean = vec![0.0; dim];
            for &i in idxs {
                for (m, v) in mean.iter_mut().zip(&fused[i]) {
                    *m += v / idxs.len() as f64;
                }
            }
            mean
        })
        .collect();
    let targets: Vec<f64> = owned_groups
        .iter()
        .map(|idxs| samples[idxs[0]].2)
        .collect();

    let fw = forward_train_batch(mp, &rows)?;
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; rows.len()];
    for (i, (o, y)) in fw.outputs.iter().zip(&targets).enumerate() {
        let err = o - y;
        loss += err * err / n;
        d_out[i] = 2.0 * err / n;
    }
    let (mlp_grads, d_rows) = backward_train_batch(mp, &rows, &fw, &d_out);

    let mut d_phi = Mat::zeros(fp.phi.rows, fp.phi.cols);
    let mut d_ups = vec![0.0; fp.d_o()];
    for (g, idxs) in owned_groups.iter().enumerate() {
        for &i in idxs {
            let (e_sc, e_llm, _) = samples[i];
            // d fused_i = d row_g / |group|; fused = e_sc + rho_llm (e_llm - e_sc)
            let scale = 1.0 / idxs.len() as f64;
            let d_rho_llm: f64 = d_rows[g]
                .iter()
                .zip(e_llm.iter().zip(e_sc))
                .map(|(dr, (b, a))| dr * scale * (b - a))
                .sum();
            attention_backward(fp, &forwards[i], e_sc, e_llm, d_rho_llm, &mut d_phi, &mut d_ups);
        }
    }

    Ok((
        loss,
        ComposedGrads {
            d_phi,
            d_ups,
            mlp: mlp_grads,
            bn_stats: fw.stats,
        },
    ))
}

fn apply_sgd(fp: &mut FusionParams, mp: &mut MlpParams, g: &ComposedGrads, lr: f64) {
    for (w, d) in fp.phi.data.iter_mut().zip(&g.d_phi.data) {
        *w -= lr * d;
    }
    for (w, d) in fp.ups.iter_mut().zip(&g.d_ups) {
        *w -= lr * d;
    }
    for (w, d) in mp.w1.data.iter_mut().zip(&g.mlp.w1.data) {
        *w -= lr * d;
    }
    for (w, d) in mp.b1.iter_mut().zip(&g.mlp.b1) {
        *w -= lr * d;
    }
    for (w, d) in mp.gamma.iter_mut().zip(&g.mlp.gamma) {
        *w -= lr * d;
    }
    for (w, d) in mp.beta.iter_mut().zip(&g.mlp.beta) {
        *w -= lr * d;
    }
    for (w, d) in mp.w2.iter_mut().zip(&g.mlp.w2) {
        *w -= lr * d;
    }
    mp.b2 -= lr * g.mlp.b2;
}

/// Train the fusion + MLP head against county SVI. Deterministic per seed;
/// the returned model is frozen to inference mode.
pub fn train(
    dataset: &[Sample],
    svi: &BTreeMap<String, SviRecord>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut missing: Vec<String> = dataset
        .iter()
        .filter(|(_, _, fips)| !svi.contains_key(fips))
        .map(|(_, _, fips)| fips.clone())
        .collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::MissingSvi(missing));
    }
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 samples".into(),
        ));
    }

    let mut fusion = FusionParams::init(cfg.d_o, EMBED_DIM, cfg.seed);
    let mut mlp = MlpParams::init(EMBED_DIM, cfg.hidden, cfg.seed.wrapping_add(1));
    let mut metrics = Vec::new();

    if cfg.epochs == 0 {
        mlp.mode = BnMode::Eval;
        return Ok(TrainedModel {
            fusion,
            mlp,
            metrics,
        });
    }

    // Pre-resolve targets.
    let targets: Vec<f64> = dataset
        .iter()
        .map(|(_, _, fips)| svi[fips].svi_overall)
        .collect();

    // County level groups samples by FIPS; tile level is one group per tile.
    let county_of: Vec<&str> = dataset.iter().map(|(_, _, f)| f.as_str()).collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = seeds::stream(cfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut weight = 0.0;
        let mut start = 0;
        while start < order.len() {
            let mut end = (start + cfg.batch.max(2)).min(order.len());
            // A trailing single sample cannot provide batch statistics.
            if order.len() - end == 1 {
                end += 1;
            }
            let chunk = &order[start..end];
            start = end;
            if chunk.len() < 2 {
                continue;
            }

            let samples: Vec<(&[f64], &[f64], f64)> = chunk
                .iter()
                .map(|&i| {
                    (
                        dataset[i].0.vector.as_slice(),
                        dataset[i].1.vector.as_slice(),
                        targets[i],
                    )
                })
                .collect();
            let groups: Option<Vec<Vec<usize>>> = match cfg.level {
                Level::Tile => None,
                Level::County => {
                    let mut by_fips: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                    for (local, &i) in chunk.iter().enumerate() {
                        by_fips.entry(county_of[i]).or_default().push(local);
                    }
                    Some(by_fips.into_values().collect())
                }
            };
            if let Some(g) = &groups {
                if g.len() < 2 {
                    // County level needs >= 2 groups for batch statistics.
                    continue;
                }
            }
            let (loss, grads) =
                composed_loss_and_grads(&fusion, &mlp, &samples, groups.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    details: format!("batch of {} produced loss {loss}", samples.len()),
                });
            }
            update_running_stats(&mut mlp, &grads.bn_stats);
            apply_sgd(&mut fusion, &mut mlp, &grads, cfg.lr);
            epoch_loss += loss * samples.len() as f64;
            weight += samples.len() as f64;
        }
        metrics.push(EpochMetric {
            epoch,
            loss: epoch_loss / weight.max(1.0),
            split: "train".to_string(),
        });
    }

    mlp.mode = BnMode::Eval;
    Ok(TrainedModel {
        fusion,
        mlp,
        metrics,
    })
}

/// Tile-level prediction with a frozen model. Unclamped; reports clamp.
pub fn predict(model: &TrainedModel, e_sc: &Embedding, e_llm: &Embedding) -> Result<f64> {
    if model.mlp.mode != BnMode::Eval {
        return Err(Error::InvalidArgument(
            "predict requires a model frozen to inference mode".into(),
        ));
    }
    let w = attention_weights(e_sc, e_llm, &model.fusion)?;
    let fused = fuse_raw(&e_sc.vector, &e_llm.vector, w)?;
    forward_eval(&model.mlp, &fused)
}

/// County estimate: arithmetic mean of its tiles' predictions. Each county's
/// values are summed in a canonical order, so the result is bitwise
/// independent of tile order.
pub fn aggregate_county(tile_predictions: &[(String, f64)]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (fips, y) in tile_predictions {
        groups.entry(fips.clone()).or_default().push(*y);
    }
    groups
        .into_iter()
        .map(|(fips, mut ys)| {
            ys.sort_by(f64::total_cmp);
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            (fips, mean)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ridge baseline
// ---------------------------------------------------------------------------

/// Ridge regression on raw embeddings, the built-in comparison baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

pub fn ridge_fit(xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Result<RidgeModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument("ridge needs matching samples".into()));
    }
    let d = xs[0].len();
    // Augmented system with an unpenalized intercept column.
    let mut ata = Mat::zeros(d + 1, d + 1);
    let mut atb = vec![0.0; d + 1];
    for (x, y) in xs.iter().zip(ys) {
        for i in 0..d {
            for j in 0..d {
                ata.data[i * (d + 1) + j] += x[i] * x[j];
            }
            ata.data[i * (d + 1) + d] += x[i];
            ata.data[d * (d + 1) + i] += x[i];
            atb[i] += x[i] * y;
        }
        ata.data[d * (d + 1) + d] += 1.0;
        atb[d] += y;
    }
    for i in 0..d {
        ata.data[i * (d + 1) + i] += lambda;
    }
    let sol = crate::linalg::solve(&ata, &atb)?;
    Ok(RidgeModel {
        weights: sol[..d].to_vec(),
        intercept: sol[d],
    })
}

pub fn ridge_predict(m: &RidgeModel, x: &[f64]) -> f64 {
    dot(&m.weights, x) + m.intercept
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    tensors: BTreeMap<String, NamedTensor>,
    metrics: Vec<EpochMetric>,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mat = |m: &Mat| NamedTensor {
        shape: vec![m.rows, m.cols],
        data: m.data.clone(),
    };
    let vec1 = |v: &[f64]| NamedTensor {
        shape: vec![v.len()],
        data: v.to_vec(),
    };
    tensors.insert("fusion.phi".to_string(), mat(&model.fusion.phi));
    tensors.insert("fusion.ups".to_string(), vec1(&model.fusion.ups));
    tensors.insert("mlp.w1".to_string(), mat(&model.mlp.w1));
    tensors.insert("mlp.b1".to_string(), vec1(&model.mlp.b1));
    tensors.insert("mlp.gamma".to_string(), vec1(&model.mlp.gamma));
    tensors.insert("mlp.beta".to_string(), vec1(&model.mlp.beta));
    tensors.insert("mlp.run_mean".to_string(), vec1(&model.mlp.run_mean));
    tensors.insert("mlp.run_var".to_string(), vec1(&model.mlp.run_var));
    tensors.insert("mlp.w2".to_string(), vec1(&model.mlp.w2));
    tensors.insert("mlp.b2".to_string(), vec1(&[model.mlp.b2]));
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        tensors,
        metrics: model.metrics.clone(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint format {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.format_version
        )));
    }
    let tensor = |name: &str| -> Result<&NamedTensor> {
        ckpt.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint missing tensor {name:?}")))
    };
    let as_mat = |t: &NamedTensor| -> Result<Mat> {
        if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
            return Err(Error::Validation("bad tensor shape".into()));
        }
        Ok(Mat {
            rows: t.shape[0],
            cols: t.shape[1],
            data: t.data.clone(),
        })
    };
    let fusion = FusionParams {
        phi: as_mat(tensor("fusion.phi")?)?,
        ups: tensor("fusion.ups")?.data.clone(),
    };
    let mlp = MlpParams {
        w1: as_mat(tensor("mlp.w1")?)?,
        b1: tensor("mlp.b1")?.data.clone(),
        gamma: tensor("mlp.gamma")?.data.clone(),
        beta: tensor("mlp.beta")?.data.clone(),
        run_mean: tensor("mlp.run_mean")?.data.clone(),
        run_var: tensor("mlp.run_var")?.data.clone(),
        w2: tensor("mlp.w2")?.data.clone(),
        b2: tensor("mlp.b2")?.data[0],
        mode: BnMode::Eval,
    };
    Ok(TrainedModel {
        fusion,
        mlp,
        metrics: ckpt.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::{encode_reference, EmbeddingSource};
    use crate::gradcheck::{central_diff, max_rel_error};

    fn emb(seed: u64) -> Embedding {
        let mut rng = seeds::stream(seed, "emb", 0);
        let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        Embedding::new(v, EmbeddingSource::Reference)
            .unwrap()
            .into_normalized()
    }

    #[test]
    fn zero_phi_gives_uniform_weights() {
        let p = FusionParams {
            phi: Mat::zeros(8, EMBED_DIM),
            ups: vec![0.3; 8],
        };
        let w = attention_weights(&emb(1), &emb(2), &p).unwrap();
        assert_eq!(w.rho_sc, 0.5);
        assert_eq!(w.rho_llm, 0.5);
    }

    #[test]
    fn identical_embeddings_give_uniform_weights() {
        let p = FusionParams::init(8, EMBED_DIM, 3);
        let e = emb(4);
        let w = attention_weights(&e, &e, &p).unwrap();
        assert!((w.rho_sc - 0.5).abs() < 1e-15);
        assert!((w.rho_llm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constructed_logits_two_zero_give_frozen_softmax() {
        // d_o = 1, phi = e_0^T, ups = [4]: logit = 4*tanh(e[0]).
        // e_sc[0] = atanh(0.5) gives logit 2; e_llm = 0 gives logit 0.
        let mut phi = Mat::zeros(1, EMBED_DIM);
        phi.set(0, 0, 1.0);
        let p = FusionParams {
            phi,
            ups: vec![4.0],
        };
        let mut sc = vec![0.0; EMBED_DIM];
        sc[0] = 0.5f64.atanh();
        let llm = vec![0.0; EMBED_DIM];
        let w = attention_weights_raw(&sc, &llm, &p).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!(
            (w.rho_sc - expected).abs() < 1e-12,
            "rho_sc {} vs closed form {expected}",
            w.rho_sc
        );
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let (a1, b1) = softmax2(3.7, -1.2);
        let (a2, b2) = softmax2(3.7 + 1e6, -1.2 + 1e6);
        assert!((a1 - a2).abs() < 1e-12);
        assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_non_finite() {
        let p = FusionParams::init(4, EMBED_DIM, 5);
        let mut bad = vec![0.0; EMBED_DIM];
        bad[7] = f64::NAN;
        assert!(attention_weights_raw(&bad, &vec![0.0; EMBED_DIM], &p).is_err());
    }

    #[test]
    fn fuse_endpoints_and_arithmetic() {
        let e_sc = emb(6);
        let e_llm = emb(7);
        let all_sc = fuse(
            &e_sc,
            &e_llm,
            FusionWeights {
                rho_sc: 1.0,
                rho_llm: 0.0,
            },
        )
        .unwrap();
        assert_eq!(all_sc.vector, e_sc.vector);

        let same = fuse(
            &e_sc,
            &e_sc,
            FusionWeights {
                rho_sc: 0.3,
                rho_llm: 0.7,
            },
        )
        .unwrap();
        assert_eq!(same.vector, e_sc.vector);

        let zeros = Embedding::new(vec![0.0; EMBED_DIM], EmbeddingSource::Reference).unwrap();
        let ones = Embedding::new(vec![1.0; EMBED_DIM], EmbeddingSource::Reference).unwrap();
        let mixed = fuse(
            &zeros,
            &ones,
            FusionWeights {
                rho_sc: 0.25,
                rho_llm: 0.75,
            },
        )
        .unwrap();
        assert!(mixed.vector.iter().all(|v| *v == 0.75));
    }

    #[test]
    fn fuse_rejects_invalid_weights() {
        let e = emb(8);
        assert!(fuse(
            &e,
            &e,
            FusionWeights {
                rho_sc: 0.7,
                rho_llm: 0.7
            }
        )
        .is_err());
        assert!(fuse(
            &e,
            &e,
            FusionWeights {
                rho_sc: 1.2,
                rho_llm: -0.2
            }
        )
        .is_err());
    }

    #[test]
    fn fused_components_stay_in_box() {
        let mut rng = seeds::stream(17, "box", 0);
        for _ in 0..200 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r: f64 = rng.random();
            let fused = fuse_raw(
                &a,
                &b,
                FusionWeights {
                    rho_sc: 1.0 - r,
                    rho_llm: r,
                },
            )
            .unwrap();
            for i in 0..16 {
                let lo = a[i].min(b[i]);
                let hi = a[i].max(b[i]);
                assert!(fused[i] >= lo && fused[i] <= hi);
            }
        }
    }

    #[test]
    fn composed_gradients_match_central_differences() {
        let d_o = 8;
        let fp = FusionParams::init(d_o, EMBED_DIM, 21);
        let mp = {
            let mut p = MlpParams::init(EMBED_DIM, 8, 22);
            let mut rng = seeds::stream(23, "beta", 0);
            for v in &mut p.beta {
                *v = rng.random_range(-0.2..0.2);
            }
            p
        };
        let raw: Vec<(Embedding, Embedding, f64)> = (0..4)
            .map(|i| (emb(100 + i), emb(200 + i), 0.1 + 0.2 * i as f64))
            .collect();
        let samples: Vec<(&[f64], &[f64], f64)> = raw
            .iter()
            .map(|(a, b, y)| (a.vector.as_slice(), b.vector.as_slice(), *y))
            .collect();

        let (_, grads) = composed_loss_and_grads(&fp, &mp, &samples, None).unwrap();

        // Check attention parameters (the MLP path is covered separately).
        let mut theta: Vec<f64> = fp.phi.data.clone();
        theta.extend(&fp.ups);
        let analytic: Vec<f64> = grads
            .d_phi
            .data
            .iter()
            .chain(&grads.d_ups)
            .copied()
            .collect();
        let numeric = central_diff(
            |t| {
                let mut fp2 = fp.clone();
                let n = fp2.phi.data.len();
                fp2.phi.data.copy_from_slice(&t[..n]);
                fp2.ups.copy_from_slice(&t[n..]);
                composed_loss_and_grads(&fp2, &mp, &samples, None).unwrap().0
            },
            &mut theta,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "attention gradient relative error {err:e}");
    }

    #[test]
    fn county_grouping_gradients_match_central_differences() {
        let fp = FusionParams::init(4, EMBED_DIM, 31);
        let mp = MlpParams::init(EMBED_DIM, 6, 32);
        let raw: Vec<(Embedding, Embedding, f64)> = (0..6)
            .map(|i| (emb(300 + i), emb(400 + i), 0.1 * i as f64))
            .collect();
        let samples: Vec<(&[f64], &[f64], f64)> = raw
            .iter()
            .map(|(a, b, y)| (a.vector.as_slice(), b.vector.as_slice(), *y))
            .collect();
        let groups = vec![vec![0, 1, 2], vec![3], vec![4, 5]];

        let (_, grads) = composed_loss_and_grads(&fp, &mp, &samples, Some(&groups)).unwrap();
        let mut theta: Vec<f64> = fp.phi.data.clone();
        theta.extend(&fp.ups);
        let analytic: Vec<f64> = grads
            .d_phi
            .data
            .iter()
            .chain(&grads.d_ups)
            .copied()
            .collect();
        let numeric = central_diff(
            |t| {
                let mut fp2 = fp.clone();
                let n = fp2.phi.data.len();
                fp2.phi.data.copy_from_slice(&t[..n]);
                fp2.ups.copy_from_slice(&t[n..]);
                composed_loss_and_grads(&fp2, &mp, &samples, Some(&groups))
                    .unwrap()
                    .0
            },
            &mut theta,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "county-level gradient relative error {err:e}");
    }

    fn constant_svi(fips_list: &[&str], value: f64) -> BTreeMap<String, SviRecord> {
        fips_list
            .iter()
            .map(|f| {
                (
                    f.to_string(),
                    SviRecord {
                        county_fips: f.to_string(),
                        svi_overall: value,
                        theme_scores: None,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn constant_target_is_learned() {
        let fips = ["01001", "01003", "01005", "01007"];
        let svi = constant_svi(&fips, 0.5);
        let dataset: Vec<Sample> = (0..24)
            .map(|i| {
                (
                    emb(1000 + i),
                    emb(2000 + i),
                    fips[i as usize % 4].to_string(),
                )
            })
            .collect();
        // Full-batch so the running BN statistics converge to the (constant)
        // batch statistics and inference matches the training fit.
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.05,
            batch: 24,
            seed: 41,
            hidden: 16,
            d_o: 8,
            level: Level::Tile,
        };
        let model = train(&dataset, &svi, &cfg).unwrap();
        for (e_sc, e_llm, _) in &dataset {
            let y = predict(&model, e_sc, e_llm).unwrap();
            assert!((y - 0.5).abs() < 0.02, "prediction {y} not near 0.5");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let fips = ["01001", "01003"];
        let svi = constant_svi(&fips, 0.4);
        let dataset: Vec<Sample> = (0..8)
            .map(|i| (emb(10 + i), emb(20 + i), fips[i as usize % 2].to_string()))
            .collect();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch: 4,
            seed: 9,
            hidden: 8,
            d_o: 4,
            level: Level::Tile,
        };
        let a = train(&dataset, &svi, &cfg).unwrap();
        let b = train(&dataset, &svi, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn county_level_training_runs_and_is_deterministic() {
        let fips = ["01001", "01003", "01005"];
        let svi = constant_svi(&fips, 0.6);
        let dataset: Vec<Sample> = (0..12)
            .map(|i| {
                (
                    emb(3000 + i),
                    emb(4000 + i),
                    fips[i as usize % 3].to_string(),
                )
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 20,
            lr: 0.05,
            batch: 8,
            seed: 21,
            hidden: 8,
            d_o: 4,
            level: Level::County,
        };
        let a = train(&dataset, &svi, &cfg).unwrap();
        let b = train(&dataset, &svi, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), 20);
        assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let fips = ["01001"];
        let svi = constant_svi(&fips, 0.4);
        let dataset: Vec<Sample> = (0..4)
            .map(|i| (emb(i), emb(50 + i), "01001".to_string()))
            .collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let model = train(&dataset, &svi, &cfg).unwrap();
        assert!(model.metrics.is_empty());
        assert_eq!(model.mlp.mode, BnMode::Eval);
    }

    #[test]
    fn divergent_training_aborts_with_diagnostics() {
        let fips = ["01001", "01003"];
        let svi = constant_svi(&fips, 0.5);
        let dataset: Vec<Sample> = (0..8)
            .map(|i| (emb(80 + i), emb(90 + i), fips[i as usize % 2].to_string()))
            .collect();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e12,
            batch: 4,
            seed: 3,
            hidden: 8,
            d_o: 4,
            level: Level::Tile,
        };
        match train(&dataset, &svi, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected non-finite-loss abort, got {other:?}"),
        }
    }

    #[test]
    fn missing_svi_lists_fips() {
        let svi = constant_svi(&["01001"], 0.4);
        let dataset: Vec<Sample> = vec![
            (emb(1), emb(2), "01001".to_string()),
            (emb(3), emb(4), "99999".to_string()),
            (emb(5), emb(6), "88888".to_string()),
        ];
        match train(&dataset, &svi, &TrainConfig::default()) {
            Err(Error::MissingSvi(fips)) => {
                assert_eq!(fips, vec!["88888".to_string(), "99999".to_string()]);
            }
            other => panic!("expected missing-SVI error, got {other:?}"),
        }
    }

    #[test]
    fn aggregation_is_mean_and_permutation_invariant() {
        let preds = vec![
            ("01001".to_string(), 0.2),
            ("01001".to_string(), 0.4),
            ("01001".to_string(), 0.6),
            ("01003".to_string(), 0.9),
        ];
        let agg = aggregate_county(&preds);
        assert!((agg["01001"] - 0.4).abs() < 1e-15);
        assert_eq!(agg["01003"], 0.9);
        let mut shuffled = preds.clone();
        shuffled.reverse();
        assert_eq!(aggregate_county(&shuffled), agg);
    }

    #[test]
    fn ridge_recovers_linear_relationship() {
        let mut rng = seeds::stream(77, "ridge", 0);
        let true_w = [0.5, -0.3, 0.2];
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| dot(x, &true_w) + 0.1)
            .collect();
        let model = ridge_fit(&xs, &ys, 1e-8).unwrap();
        for (w, t) in model.weights.iter().zip(&true_w) {
            assert!((w - t).abs() < 1e-6);
        }
        assert!((model.intercept - 0.1).abs() < 1e-6);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn simplex_and_box_hold_for_arbitrary_finite_inputs(
                seed in any::<u64>(),
                d_o in 1usize..12,
                scale in 0.01f64..100.0,
            ) {
                let mut rng = seeds::stream(seed, "prop-fusion", 0);
                let mut phi = Mat::zeros(d_o, EMBED_DIM);
                for v in &mut phi.data {
                    *v = rng.random_range(-scale..scale);
                }
                let ups: Vec<f64> = (0..d_o).map(|_| rng.random_range(-scale..scale)).collect();
                let p = FusionParams { phi, ups };
                let a: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random_range(-scale..scale)).collect();
                let b: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random_range(-scale..scale)).collect();
                let w = attention_weights_raw(&a, &b, &p).unwrap();
                prop_assert!((w.rho_sc + w.rho_llm - 1.0).abs() <= 1e-9);
                prop_assert!(w.rho_sc > 0.0 && w.rho_llm > 0.0);
                let fused = fuse_raw(&a, &b, w).unwrap();
                for i in 0..EMBED_DIM {
                    prop_assert!(fused[i] >= a[i].min(b[i]) && fused[i] <= a[i].max(b[i]));
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let svi = constant_svi(&["01001", "01003"], 0.6);
        let dataset: Vec<Sample> = (0..6)
            .map(|i| {
                (
                    emb(600 + i),
                    emb(700 + i),
                    ["01001", "01003"][i as usize % 2].to_string(),
                )
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            hidden: 8,
            d_o: 4,
            batch: 4,
            ..Default::default()
        };
        let model = train(&dataset, &svi, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        let e = encode_reference("a gable roof");
        assert_eq!(
            predict(&model, &e, &e).unwrap(),
            predict(&loaded, &e, &e).unwrap()
        );
    }
}
