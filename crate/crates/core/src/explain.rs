//! Shapley attribution over embedding dimensions: an exact enumerator for
//! small d (the oracle), a kernel-weighted least-squares estimator for the
//! 512-dim pipeline, and the report that names the top dimensions, their
//! exemplar captions, and the attribute phrases those captions contain.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar;
use crate::linalg::{solve, Mat};
use crate::seeds;

/// Per-instance attribution; efficiency holds by construction:
/// sum(phi) + base_value == fx.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub instance_id: String,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub fx: f64,
}

const EXACT_MAX_DIM: usize = 15;

/// Exact Shapley values by full coalition enumeration; absent features take
/// the background value. Refuses d > 15.
pub fn exact_shapley(
    f: &dyn Fn(&[f64]) -> f64,
    background: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    let d = x.len();
    if d == 0 || d > EXACT_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration supports 1..={EXACT_MAX_DIM} features, got {d} (use sampled_shap)"
        )));
    }
    if background.len() != d {
        return Err(Error::InvalidArgument(
            "background and instance dims differ".into(),
        ));
    }

    // f over every mask; bit i set means feature i comes from x.
    let n_masks = 1usize << d;
    let mut value = vec![0.0; n_masks];
    let mut z = background.to_vec();
    for (mask, slot) in value.iter_mut().enumerate() {
        for i in 0..d {
            z[i] = if mask >> i & 1 == 1 { x[i] } else { background[i] };
        }
        *slot = f(&z);
    }

    // weight[s] = s! (d-s-1)! / d! for a coalition of size s.
    let mut factorial = vec![1.0f64; d + 1];
    for i in 1..=d {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..d)
        .map(|s| factorial[s] * factorial[d - s - 1] / factorial[d])
        .collect();

    let mut phi = vec![0.0; d];
    for mask in 0..n_masks {
        let s = (mask as u64).count_ones() as usize;
        if s >= d {
            continue;
        }
        let w = weight[s];
        for (i, slot) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *slot += w * (value[mask | 1 << i] - value[mask]);
            }
        }
    }
    Ok(phi)
}

/// Shapley kernel weight for a coalition of size s out of d features.
fn kernel_weight(s: usize, d: usize) -> f64 {
    (d - 1) as f64 / (n_choose_k(d, s) * s as f64 * (d - s) as f64)
}

fn n_choose_k(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64;
        r /= (i + 1) as f64;
    }
    r
}

/// KernelSHAP: coalition sampling by Shapley-kernel weight (full enumeration
/// when n_samples covers every proper coalition), background-averaged
/// evaluations, and a weighted least squares with the efficiency constraint
/// eliminated exactly. Deterministic per seed.
pub fn sampled_shap(
    f: &dyn Fn(&[f64]) -> f64,
    background: &[Vec<f64>],
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Attribution> {
    let d = x.len();
    if d < 2 {
        return Err(Error::InvalidArgument("need at least 2 features".into()));
    }
    if background.is_empty() {
        return Err(Error::InvalidArgument("background set is empty".into()));
    }
    if n_samples < 2 * d + 4 {
        return Err(Error::InvalidArgument(format!(
            "n_samples must be >= 2*{d}+4 = {}",
            2 * d + 4
        )));
    }

    let base_value = background.iter().map(|b| f(b)).sum::<f64>() / background.len() as f64;
    let fx = f(x);

    // v(coalition) = E_b[ f(x on coalition, b elsewhere) ]
    let mut buf = vec![0.0; d];
    let mut eval_coalition = |members: &[usize]| -> f64 {
        let mut acc = 0.0;
        for b in background {
            buf.copy_from_slice(b);
            for &i in members {
                buf[i] = x[i];
            }
            acc += f(&buf);
        }
        acc / background.len() as f64
    };

    // (coalition mask as member list, LS weight, v value)
    let mut rows: Vec<(Vec<usize>, f64, f64)> = Vec::new();
    let full_count = if d <= 20 { (1usize << d) - 2 } else { usize::MAX };
    if n_samples >= full_count {
        for mask in 1usize..(1 << d) - 1 {
            let members: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
            let w = kernel_weight(members.len(), d);
            let v = eval_coalition(&members);
            rows.push((members, w, v));
        }
    } else {
        // P(size = s) proportional to (d-1)/(s(d-s)); subset uniform given
        // size. Sampling by kernel measure makes LS weights uniform.
        let mut rng = seeds::stream(seed, "shap-coalitions", 0);
        let size_mass: Vec<f64> = (1..d).map(|s| (d - 1) as f64 / ((s * (d - s)) as f64)).collect();
        let total_mass: f64 = size_mass.iter().sum();
        let mut indices: Vec<usize> = (0..d).collect();
        for _ in 0..n_samples {
            let mut u: f64 = rng.random_range(0.0..total_mass);
            let mut s = 1;
            for (k, m) in size_mass.iter().enumerate() {
                if u < *m {
                    s = k + 1;
                    break;
                }
                u -= m;
            }
            // Partial Fisher-Yates for an s-subset.
            for i in 0..s {
                let j = rng.random_range(i..d);
                indices.swap(i, j);
            }
            let mut members = indices[..s].to_vec();
            members.sort_unstable();
            let v = eval_coalition(&members);
            rows.push((members, 1.0, v));
        }
    }

    // Eliminate the constraint sum(phi) = fx - base by substituting phi_d.
    // Unknowns: phi_0..phi_{d-2}; row design r_i = z_i - z_{d-1},
    // target y = v - base - z_{d-1} (fx - base).
    let m = d - 1;
    let mut ata = Mat::zeros(m, m);
    let mut atb = vec![0.0; m];
    let excess = fx - base_value;
    let mut r = vec![0.0; m];
    for (members, w, v) in &rows {
        let has_last = members.contains(&(d - 1));
        let z_last = if has_last { 1.0 } else { 0.0 };
        r.iter_mut().for_each(|ri| *ri = -z_last);
        for &i in members {
            if i < m {
                r[i] += 1.0;
            }
        }
        let y = v - base_value - z_last * excess;
        for i in 0..m {
            if r[i] == 0.0 {
                continue;
            }
            let wi = w * r[i];
            for j in 0..m {
                ata.data[i * m + j] += wi * r[j];
            }
            atb[i] += wi * y;
        }
    }
    let head = solve(&ata, &atb)?;
    let mut phi = head;
    let sum_head: f64 = phi.iter().sum();
    phi.push(excess - sum_head);

    Ok(Attribution {
        instance_id: String::new(),
        phi,
        base_value,
        fx,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimImportance {
    pub dim: usize,
    pub mean_abs_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub instance_id: String,
    pub caption: String,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseCount {
    pub phrase: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub dim: usize,
    pub exemplars: Vec<Exemplar>,
    pub phrase_freq: Vec<PhraseCount>,
}

/// Top dimensions by mean |phi|, their exemplar captions, and the attribute
/// phrases those captions contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub top_dims: Vec<DimImportance>,
    pub dims: Vec<DimReport>,
}

/// Build the report: `k` top dimensions ranked by mean |phi| (ties by dim
/// index), `m` exemplars per dimension ranked by |phi_dim| (ties by
/// instance id), phrase frequencies counted over each dimension's exemplars.
/// Returns warnings instead of failing when fewer than `m` instances exist.
pub fn build_report(
    attributions: &[Attribution],
    captions: &BTreeMap<String, String>,
    k: usize,
    m: usize,
) -> Result<(ShapReport, Vec<String>)> {
    if attributions.is_empty() {
        return Err(Error::InvalidArgument("no attributions".into()));
    }
    let d = attributions[0].phi.len();
    if attributions.iter().any(|a| a.phi.len() != d) {
        return Err(Error::InvalidArgument("attribution dims differ".into()));
    }
    let mut warnings = Vec::new();
    let m_eff = if attributions.len() < m {
        warnings.push(format!(
            "only {} instances available; shrinking exemplars per dimension from {m} to {}",
            attributions.len(),
            attributions.len()
        ));
        attributions.len()
    } else {
        m
    };

    let mut importance: Vec<DimImportance> = (0..d)
        .map(|dim| {
            let mean_abs =
                attributions.iter().map(|a| a.phi[dim].abs()).sum::<f64>()
                    / attributions.len() as f64;
            DimImportance {
                dim,
                mean_abs_phi: mean_abs,
            }
        })
        .collect();
    importance.sort_by(|a, b| {
        b.mean_abs_phi
            .total_cmp(&a.mean_abs_phi)
            .then(a.dim.cmp(&b.dim))
    });
    let top_dims: Vec<DimImportance> = importance.into_iter().take(k).collect();

    let mut dims = Vec::with_capacity(top_dims.len());
    for imp in &top_dims {
        let mut ranked: Vec<&Attribution> = attributions.iter().collect();
        ranked.sort_by(|a, b| {
            b.phi[imp.dim]
                .abs()
                .total_cmp(&a.phi[imp.dim].abs())
                .then(a.instance_id.cmp(&b.instance_id))
        });
        let exemplars: Vec<Exemplar> = ranked
            .into_iter()
            .take(m_eff)
            .map(|a| Exemplar {
                instance_id: a.instance_id.clone(),
                caption: captions.get(&a.instance_id).cloned().unwrap_or_default(),
                phi: a.phi[imp.dim],
            })
            .collect();

        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for ex in &exemplars {
            for (_, phrase, _) in grammar::phrase_hits(&ex.caption) {
                *counts.entry(phrase).or_insert(0) += 1;
            }
        }
        let mut phrase_freq: Vec<PhraseCount> = counts
            .into_iter()
            .map(|(phrase, count)| PhraseCount { phrase, count })
            .collect();
        phrase_freq.sort_by(|a, b| b.count.cmp(&a.count).then(a.phrase.cmp(&b.phrase)));

        dims.push(DimReport {
            dim: imp.dim,
            exemplars,
            phrase_freq,
        });
    }

    Ok((ShapReport { top_dims, dims }, warnings))
}

/// Markdown rendering of a report.
pub fn render_markdown(report: &ShapReport) -> String {
    let mut out = String::new();
    out.push_str("# Salient embedding dimensions\n\n");
    out.push_str("| rank | dimension | mean |phi| |\n|---:|---:|---:|\n");
    for (rank, imp) in report.top_dims.iter().enumerate() {
        out.push_str(&format!(
            "| {} | {} | {:.6} |\n",
            rank + 1,
            imp.dim,
            imp.mean_abs_phi
        ));
    }
    for dim in &report.dims {
        out.push_str(&format!("\n## Dimension {}\n\n", dim.dim));
        out.push_str("Top captions by |phi|:\n\n");
        for ex in &dim.exemplars {
            out.push_str(&format!(
                "- `{}` (phi {:+.6}): {}\n",
                ex.instance_id, ex.phi, ex.caption
            ));
        }
        if !dim.phrase_freq.is_empty() {
            out.push_str("\nAttribute phrases in these captions:\n\n");
            for pc in &dim.phrase_freq {
                out.push_str(&format!("- {} x{}\n", pc.phrase, pc.count));
            }
        }
    }
    out
}

/// Horizontal bar chart of the top dimensions as a standalone SVG.
pub fn render_svg(report: &ShapReport) -> String {
    let bar_h = 22;
    let gap = 6;
    let label_w = 110;
    let chart_w = 420;
    let height = report.top_dims.len() * (bar_h + gap) + gap + 30;
    let max_imp = report
        .top_dims
        .iter()
        .map(|i| i.mean_abs_phi)
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"monospace\" font-size=\"12\">\n",
        label_w + chart_w + 60
    ));
    out.push_str("<text x=\"8\" y=\"18\">mean |phi| of top embedding dimensions</text>\n");
    for (i, imp) in report.top_dims.iter().enumerate() {
        let y = 30 + gap + i * (bar_h + gap);
        let w = (imp.mean_abs_phi / max_imp * chart_w as f64).round() as usize;
        out.push_str(&format!(
            "<text x=\"8\" y=\"{}\">dim {}</text>\n",
            y + bar_h - 6,
            imp.dim
        ));
        out.push_str(&format!(
            "<rect x=\"{label_w}\" y=\"{y}\" width=\"{w}\" height=\"{bar_h}\" fill=\"#4878a8\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{:.5}</text>\n",
            label_w + w + 6,
            y + bar_h - 6,
            imp.mean_abs_phi
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn linear(w: Vec<f64>, c: f64) -> impl Fn(&[f64]) -> f64 {
        move |x: &[f64]| dot(&w, x) + c
    }

    fn rand_vec(seed: u64, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = seeds::stream(seed, "explain-test", 0);
        (0..d).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Random multilinear game over subsets up to size 3.
    fn random_game(seed: u64, d: usize) -> impl Fn(&[f64]) -> f64 {
        let mut rng = seeds::stream(seed, "game", 0);
        let mut terms: Vec<(Vec<usize>, f64)> = Vec::new();
        for i in 0..d {
            terms.push((vec![i], rng.random_range(-1.0..1.0)));
        }
        for _ in 0..d {
            let a = rng.random_range(0..d);
            let b = rng.random_range(0..d);
            let c = rng.random_range(0..d);
            terms.push((vec![a, b], rng.random_range(-0.5..0.5)));
            terms.push((vec![a, b, c], rng.random_range(-0.25..0.25)));
        }
        move |x: &[f64]| {
            terms
                .iter()
                .map(|(idx, coef)| coef * idx.iter().map(|&i| x[i]).product::<f64>())
                .sum()
        }
    }

    #[test]
    fn linear_model_matches_closed_form() {
        let d = 6;
        let w = rand_vec(1, d, -2.0, 2.0);
        let x = rand_vec(2, d, -1.0, 1.0);
        let b = rand_vec(3, d, -1.0, 1.0);
        let f = linear(w.clone(), 0.7);
        let phi = exact_shapley(&f, &b, &x).unwrap();
        for i in 0..d {
            let expect = w[i] * (x[i] - b[i]);
            assert!(
                (phi[i] - expect).abs() < 1e-10,
                "phi[{i}] = {} vs closed form {expect}",
                phi[i]
            );
        }
    }

    #[test]
    fn dummy_feature_gets_exactly_zero() {
        // f ignores coordinate 2 entirely.
        let f = |x: &[f64]| x[0] * 2.0 + x[1] * x[3] - x[4];
        let x = rand_vec(4, 5, -1.0, 1.0);
        let b = rand_vec(5, 5, -1.0, 1.0);
        let phi = exact_shapley(&f, &b, &x).unwrap();
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn null_game_gives_zero_vector() {
        let f = random_game(6, 5);
        let b = rand_vec(7, 5, -1.0, 1.0);
        let phi = exact_shapley(&f, &b, &b).unwrap();
        assert!(phi.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn efficiency_dummy_symmetry_linearity_hold() {
        for seed in 0..5u64 {
            let d = 6 + (seed as usize % 3);
            let f = random_game(seed * 11 + 1, d);
            let g = random_game(seed * 13 + 2, d);
            let x = rand_vec(seed * 3 + 1, d, -1.0, 1.0);
            let b = rand_vec(seed * 5 + 2, d, -1.0, 1.0);

            // Efficiency.
            let phi_f = exact_shapley(&f, &b, &x).unwrap();
            let total: f64 = phi_f.iter().sum();
            assert!(
                (total - (f(&x) - f(&b))).abs() < 1e-10,
                "efficiency violated: {total} vs {}",
                f(&x) - f(&b)
            );

            // Linearity: shapley(2f + 3g) = 2 shapley(f) + 3 shapley(g).
            let phi_g = exact_shapley(&g, &b, &x).unwrap();
            let combo = |z: &[f64]| 2.0 * f(z) + 3.0 * g(z);
            let phi_c = exact_shapley(&combo, &b, &x).unwrap();
            for i in 0..d {
                assert!(
                    (phi_c[i] - (2.0 * phi_f[i] + 3.0 * phi_g[i])).abs() < 1e-9,
                    "linearity violated at {i}"
                );
            }
        }

        // Symmetry: f symmetric in (0, 1), matching inputs and background.
        let f = |x: &[f64]| (x[0] + x[1]) * x[2] + (x[0] * x[1]).sin();
        let mut x = rand_vec(21, 5, -1.0, 1.0);
        let mut b = rand_vec(22, 5, -1.0, 1.0);
        x[1] = x[0];
        b[1] = b[0];
        let phi = exact_shapley(&f, &b, &x).unwrap();
        assert!(
            (phi[0] - phi[1]).abs() < 1e-10,
            "symmetry violated: {} vs {}",
            phi[0],
            phi[1]
        );
    }

    #[test]
    fn exact_refuses_large_d() {
        let f = |x: &[f64]| x.iter().sum();
        let x = vec![0.0; 16];
        assert!(exact_shapley(&f, &x.clone(), &x).is_err());
    }

    #[test]
    fn sampled_full_enumeration_matches_exact() {
        let d = 10;
        let f = random_game(31, d);
        let x = rand_vec(32, d, -1.0, 1.0);
        let b = rand_vec(33, d, -1.0, 1.0);
        let exact = exact_shapley(&f, &b, &x).unwrap();
        let att = sampled_shap(&f, std::slice::from_ref(&b), &x, 1 << d, 0).unwrap();
        let mad: f64 =
            exact.iter().zip(&att.phi).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64;
        assert!(mad < 1e-3, "mean abs deviation {mad}");
        // Efficiency is exact by construction.
        let total: f64 = att.phi.iter().sum();
        assert!((total + att.base_value - att.fx).abs() < 1e-8);
    }

    #[test]
    fn sampled_error_shrinks_with_more_samples() {
        let d = 10;
        let f = random_game(41, d);
        let x = rand_vec(42, d, -1.0, 1.0);
        let b = rand_vec(43, d, -1.0, 1.0);
        let exact = exact_shapley(&f, &b, &x).unwrap();
        let err_at = |n: usize| -> f64 {
            let att = sampled_shap(&f, std::slice::from_ref(&b), &x, n, 7).unwrap();
            exact
                .iter()
                .zip(&att.phi)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / d as f64
        };
        let errs = [err_at(128), err_at(400), err_at(1 << d)];
        assert!(
            errs[0] >= errs[1] && errs[1] >= errs[2],
            "errors not non-increasing: {errs:?}"
        );
        assert!(errs[2] < 1e-3);
    }

    #[test]
    fn sampled_with_multi_row_background_uses_mean_reference() {
        // For a linear model with background set B, phi_i = w_i (x_i - mean_i(B)).
        let d = 6;
        let w = rand_vec(51, d, -1.0, 1.0);
        let f = linear(w.clone(), -0.2);
        let x = rand_vec(52, d, -1.0, 1.0);
        let bg: Vec<Vec<f64>> = (0..7).map(|i| rand_vec(60 + i, d, -1.0, 1.0)).collect();
        let att = sampled_shap(&f, &bg, &x, 1 << d, 1).unwrap();
        for i in 0..d {
            let mean_b: f64 = bg.iter().map(|b| b[i]).sum::<f64>() / bg.len() as f64;
            let expect = w[i] * (x[i] - mean_b);
            assert!(
                (att.phi[i] - expect).abs() < 1e-8,
                "phi[{i}] {} vs {expect}",
                att.phi[i]
            );
        }
    }

    #[test]
    fn sampled_symmetric_features_get_equal_attribution() {
        // f symmetric in (0, 1) with matching instance and background values.
        let d = 10;
        let f = |z: &[f64]| (z[0] + z[1]) * z[4] + z[0] * z[1] + z[7];
        let mut x = rand_vec(71, d, -1.0, 1.0);
        let mut b = rand_vec(72, d, -1.0, 1.0);
        x[1] = x[0];
        b[1] = b[0];
        let att = sampled_shap(&f, std::slice::from_ref(&b), &x, 1 << d, 3).unwrap();
        assert!(
            (att.phi[0] - att.phi[1]).abs() < 1e-3,
            "symmetric features got {} vs {}",
            att.phi[0],
            att.phi[1]
        );
        // Agrees with the exact oracle as well.
        let exact = exact_shapley(&f, &b, &x).unwrap();
        assert!((exact[0] - exact[1]).abs() < 1e-10);
    }

    #[test]
    fn sampled_rejects_insufficient_samples() {
        let f = |x: &[f64]| x.iter().sum();
        let x = vec![0.5; 8];
        let b = vec![vec![0.0; 8]];
        assert!(sampled_shap(&f, &b, &x, 10, 0).is_err());
    }

    fn toy_attributions() -> (Vec<Attribution>, BTreeMap<String, String>) {
        let mut captions = BTreeMap::new();
        let mut atts = Vec::new();
        for i in 0..8 {
            let id = format!("t{i}");
            captions.insert(
                id.clone(),
                "A house with a gable roof in good condition.".to_string(),
            );
            let mut phi = vec![0.0; 16];
            phi[3] = 1.0 + i as f64;
            phi[7] = -0.5;
            atts.push(Attribution {
                instance_id: id,
                phi,
                base_value: 0.4,
                fx: 0.9,
            });
        }
        (atts, captions)
    }

    #[test]
    fn report_ranks_and_counts_phrases() {
        let (atts, captions) = toy_attributions();
        let (report, warnings) = build_report(&atts, &captions, 5, 3).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(report.top_dims.len(), 5);
        assert_eq!(report.top_dims[0].dim, 3);
        assert_eq!(report.top_dims[1].dim, 7);
        // Remaining dims are all-zero; ties fall back to index order.
        assert_eq!(report.top_dims[2].dim, 0);
        assert_eq!(report.top_dims[3].dim, 1);

        let dim3 = &report.dims[0];
        assert_eq!(dim3.exemplars.len(), 3);
        // Largest |phi[3]| first: t7, t6, t5.
        assert_eq!(dim3.exemplars[0].instance_id, "t7");
        assert_eq!(dim3.exemplars[1].instance_id, "t6");
        let gable = dim3
            .phrase_freq
            .iter()
            .find(|pc| pc.phrase == "gable roof")
            .unwrap();
        assert_eq!(gable.count, 3);
    }

    #[test]
    fn report_shrinks_m_with_warning() {
        let (atts, captions) = toy_attributions();
        let (report, warnings) = build_report(&atts[..2], &captions, 4, 5).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(report.dims[0].exemplars.len(), 2);
    }

    #[test]
    fn all_zero_attributions_rank_by_index() {
        let captions = BTreeMap::from([("a".to_string(), String::new())]);
        let atts = vec![Attribution {
            instance_id: "a".to_string(),
            phi: vec![0.0; 6],
            base_value: 0.0,
            fx: 0.0,
        }];
        let (report, _) = build_report(&atts, &captions, 3, 1).unwrap();
        let dims: Vec<usize> = report.top_dims.iter().map(|i| i.dim).collect();
        assert_eq!(dims, vec![0, 1, 2]);
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let (atts, captions) = toy_attributions();
        let (r1, _) = build_report(&atts, &captions, 5, 3).unwrap();
        let (r2, _) = build_report(&atts, &captions, 5, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        let md = render_markdown(&r1);
        assert!(md.contains("Dimension 3"));
        let svg = render_svg(&r1);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("dim 3"));
    }
}
