//! Per-layer language-identity probes, probe trajectories, the natural
//! language direction and its self-consistency, and projections.
//!
//! Probes are trained on natural E/F stimulus pairs only, never on triggered
//! ones. The extraction point — for probes and for the natural direction —
//! is the residual entering each layer's MLP at the last position.

use crate::error::{Error, Result};
use crate::model::{forward, InterventionSpec, ModelWeights};
use crate::numeric::{dot, gaussian_draw, norm2, SeedKey};
use crate::stimuli::Stimulus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default L2 regularization strength.
pub const DEFAULT_REG: f64 = 1e-2;
/// Newton iteration cap; hitting it flags the layer as unconverged.
pub const MAX_ITERS: usize = 500;
/// Gradient-norm convergence tolerance.
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeLayer {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ProbeLayer {
    /// P(French) for one residual vector.
    pub fn p_french(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weight, x) + self.bias)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeModel {
    pub layers: Vec<ProbeLayer>,
    pub n_pairs: usize,
    pub regularization: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Residuals entering each layer's MLP at the last position, one row per
/// layer (n_layers × d).
pub fn probe_residuals(weights: &ModelWeights, stimulus: &Stimulus) -> Result<Vec<Vec<f64>>> {
    let cache = forward(weights, &stimulus.tokens, &InterventionSpec::new())?;
    let p = stimulus.last_pos();
    Ok((0..weights.config.n_layers).map(|l| cache.mlp_input_residual(l, p)).collect())
}

// ─── L2-regularized logistic regression via damped Newton ───────────────────

/// Cholesky solve of the symmetric positive-definite system a·x = b
/// (a is n×n row-major, consumed).
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    // Decompose a = L·Lᵀ in place (lower triangle).
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    // Forward substitution L·y = b.
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    // Back substitution Lᵀ·x = y.
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Some(b)
}

/// Fit logistic regression (weights and bias both L2-regularized by `reg`)
/// with damped Newton iterations; deterministic from the zero start.
fn fit_logistic(xs: &[Vec<f64>], ys: &[f64], reg: f64) -> ProbeLayer {
    let n = xs.len();
    let d = xs[0].len();
    let dim = d + 1; // weights + bias
    let mut w = vec![0.0; dim];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        // Gradient and Hessian of mean log-loss + (reg/2)·||w||².
        let mut grad = vec![0.0; dim];
        let mut hess = vec![0.0; dim * dim];
        for (x, &y) in xs.iter().zip(ys) {
            let z = dot(&w[..d], x) + w[d];
            let p = sigmoid(z);
            let gscale = (p - y) / n as f64;
            let hscale = (p * (1.0 - p)).max(1e-12) / n as f64;
            for i in 0..d {
                grad[i] += gscale * x[i];
            }
            grad[d] += gscale;
            for i in 0..d {
                let hx = hscale * x[i];
                for j in 0..=i {
                    hess[i * dim + j] += hx * x[j];
                }
                hess[d * dim + i] += hx;
            }
            hess[d * dim + d] += hscale;
        }
        for i in 0..dim {
            grad[i] += reg * w[i];
            hess[i * dim + i] += reg;
        }
        // Mirror the lower triangle.
        for i in 0..dim {
            for j in i + 1..dim {
                hess[i * dim + j] = hess[j * dim + i];
            }
        }
        let gnorm = norm2(&grad);
        if gnorm <= GRAD_TOL {
            converged = true;
            break;
        }
        let mut step = None;
        let mut jitter = 0.0;
        for _ in 0..4 {
            let mut h = hess.clone();
            if jitter > 0.0 {
                for i in 0..dim {
                    h[i * dim + i] += jitter;
                }
            }
            if let Some(s) = cholesky_solve(h, grad.clone(), dim) {
                step = Some(s);
                break;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
        }
        let Some(step) = step else { break };
        for i in 0..dim {
            w[i] -= step[i];
        }
    }
    ProbeLayer { weight: w[..d].to_vec(), bias: w[d], converged, iterations }
}

/// Train one probe per layer on residuals from natural (E, F) stimulus pairs.
/// Labels: E = 0, F = 1.
pub fn train_probes(
    weights: &ModelWeights,
    pairs: &[(Stimulus, Stimulus)],
    reg: f64,
) -> Result<ProbeModel> {
    if pairs.len() < 2 {
        return Err(Error::InvalidStimulus("need at least 2 pairs".into()));
    }
    let n_layers = weights.config.n_layers;
    let extracted: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = pairs
        .par_iter()
        .map(|(e, f)| Ok((probe_residuals(weights, e)?, probe_residuals(weights, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<ProbeLayer> = (0..n_layers)
        .into_par_iter()
        .map(|l| {
            let mut xs = Vec::with_capacity(2 * pairs.len());
            let mut ys = Vec::with_capacity(2 * pairs.len());
            for (e_res, f_res) in &extracted {
                xs.push(e_res[l].clone());
                ys.push(0.0);
                xs.push(f_res[l].clone());
                ys.push(1.0);
            }
            fit_logistic(&xs, &ys, reg)
        })
        .collect();
    Ok(ProbeModel { layers, n_pairs: pairs.len(), regularization: reg })
}

/// Per-layer P(French) for a set of stimuli.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: String,
    /// p_french[layer][stimulus]
    pub p_french: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn trajectory(
    weights: &ModelWeights,
    probes: &ProbeModel,
    stimuli: &[Stimulus],
    condition: &str,
) -> Result<Trajectory> {
    let n_layers = weights.config.n_layers;
    if probes.layers.len() != n_layers {
        return Err(Error::InvalidStimulus("probe/model layer count mismatch".into()));
    }
    let per_stim: Vec<Vec<f64>> = stimuli
        .par_iter()
        .map(|s| {
            let res = probe_residuals(weights, s)?;
            Ok((0..n_layers).map(|l| probes.layers[l].p_french(&res[l])).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p_french = vec![Vec::with_capacity(stimuli.len()); n_layers];
    for row in &per_stim {
        for (l, &v) in row.iter().enumerate() {
            p_french[l].push(v);
        }
    }
    let mut mean = Vec::with_capacity(n_layers);
    let mut std = Vec::with_capacity(n_layers);
    for layer_vals in &p_french {
        let n = layer_vals.len() as f64;
        let m = layer_vals.iter().sum::<f64>() / n;
        let v = layer_vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok(Trajectory { condition: condition.to_string(), p_french, mean, std })
}

// ─── Natural language direction ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerDirection {
    /// Normalized mean of per-pair F−E differences; None when the mean is
    /// numerically zero (direction undefined).
    pub direction: Option<Vec<f64>>,
    /// Mean pairwise cosine of the per-pair differences.
    pub self_consistency: f64,
    /// Raw per-pair difference vectors.
    pub per_pair: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionSet {
    pub layers: Vec<LayerDirection>,
    pub n_pairs: usize,
}

/// Mean pairwise cosine similarity; permutation-invariant by construction.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let ni = norm2(&vectors[i]);
            let nj = norm2(&vectors[j]);
            if ni > 0.0 && nj > 0.0 {
                sum += dot(&vectors[i], &vectors[j]) / (ni * nj);
            }
            count += 1;
        }
    }
    sum / count as f64
}

pub fn natural_direction(
    weights: &ModelWeights,
    pairs: &[(Stimulus, Stimulus)],
) -> Result<DirectionSet> {
    if pairs.len() < 2 {
        return Err(Error::InvalidStimulus("need at least 2 pairs".into()));
    }
    let n_layers = weights.config.n_layers;
    let d = weights.config.d_model;
    let extracted: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = pairs
        .par_iter()
        .map(|(e, f)| Ok((probe_residuals(weights, e)?, probe_residuals(weights, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..n_layers)
        .map(|l| {
            let per_pair: Vec<Vec<f64>> = extracted
                .iter()
                .map(|(e_res, f_res)| {
                    f_res[l].iter().zip(&e_res[l]).map(|(f, e)| f - e).collect()
                })
                .collect();
            let mut mean = vec![0.0; d];
            for p in &per_pair {
                for i in 0..d {
                    mean[i] += p[i];
                }
            }
            for v in mean.iter_mut() {
                *v /= per_pair.len() as f64;
            }
            let norm = norm2(&mean);
            let direction = if norm > 1e-12 {
                Some(mean.iter().map(|v| v / norm).collect())
            } else {
                None
            };
            LayerDirection { direction, self_consistency: mean_pairwise_cosine(&per_pair), per_pair }
        })
        .collect();
    Ok(DirectionSet { layers, n_pairs: pairs.len() })
}

/// Orthogonal projection of `residual` onto a unit `direction`; panics on a
/// non-unit direction (caller contract violation).
pub fn project(residual: &[f64], direction: &[f64]) -> (Vec<f64>, f64) {
    let norm = norm2(direction);
    assert!(
        (norm - 1.0).abs() <= 1e-9,
        "project contract violation: direction norm {norm}"
    );
    let coeff = dot(residual, direction);
    (direction.iter().map(|v| v * coeff).collect(), coeff)
}

// ─── Shallow nonlinear probe (optional family) ───────────────────────────────

/// One-hidden-layer probe (width 16, tanh), trained by deterministic
/// full-batch gradient descent from a seeded init.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpProbeLayer {
    pub w1: Vec<Vec<f64>>, // hidden × d
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

pub const MLP_PROBE_HIDDEN: usize = 16;

impl MlpProbeLayer {
    pub fn p_french(&self, x: &[f64]) -> f64 {
        let mut z = self.b2;
        for h in 0..self.w1.len() {
            z += self.w2[h] * (dot(&self.w1[h], x) + self.b1[h]).tanh();
        }
        sigmoid(z)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpProbeModel {
    pub layers: Vec<MlpProbeLayer>,
}

pub fn train_mlp_probes(
    weights: &ModelWeights,
    pairs: &[(Stimulus, Stimulus)],
    key: &SeedKey,
) -> Result<MlpProbeModel> {
    if pairs.len() < 2 {
        return Err(Error::InvalidStimulus("need at least 2 pairs".into()));
    }
    let n_layers = weights.config.n_layers;
    let d = weights.config.d_model;
    let extracted: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = pairs
        .par_iter()
        .map(|(e, f)| Ok((probe_residuals(weights, e)?, probe_residuals(weights, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..n_layers)
        .map(|l| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (e_res, f_res) in &extracted {
                xs.push(e_res[l].clone());
                ys.push(0.0);
                xs.push(f_res[l].clone());
                ys.push(1.0);
            }
            // Feature scaling keeps the fixed step size sane across layers.
            let scale = (xs.iter().map(|x| dot(x, x)).sum::<f64>()
                / (xs.len() * d) as f64)
                .sqrt()
                .max(1e-12);
            let h = MLP_PROBE_HIDDEN;
            let init = gaussian_draw(&key.derived(&format!("layer{l}")), h * d + h);
            let mut w1: Vec<Vec<f64>> = (0..h)
                .map(|i| init[i * d..(i + 1) * d].iter().map(|v| v * 0.5 / scale).collect())
                .collect();
            let mut b1 = vec![0.0; h];
            let mut w2: Vec<f64> = init[h * d..].iter().map(|v| v * 0.5).collect();
            let mut b2 = 0.0;
            let lr = 0.5;
            for _ in 0..300 {
                let mut gw1 = vec![vec![0.0; d]; h];
                let mut gb1 = vec![0.0; h];
                let mut gw2 = vec![0.0; h];
                let mut gb2 = 0.0;
                for (x, &y) in xs.iter().zip(&ys) {
                    let hidden: Vec<f64> =
                        (0..h).map(|i| (dot(&w1[i], x) + b1[i]).tanh()).collect();
                    let z = dot(&w2, &hidden) + b2;
                    let err = (sigmoid(z) - y) / xs.len() as f64;
                    gb2 += err;
                    for i in 0..h {
                        gw2[i] += err * hidden[i];
                        let dh = err * w2[i] * (1.0 - hidden[i] * hidden[i]);
                        gb1[i] += dh;
                        for j in 0..d {
                            gw1[i][j] += dh * x[j];
                        }
                    }
                }
                for i in 0..h {
                    for j in 0..d {
                        w1[i][j] -= lr * gw1[i][j];
                    }
                    b1[i] -= lr * gb1[i];
                    w2[i] -= lr * gw2[i];
                }
                b2 -= lr * gb2;
            }
            MlpProbeLayer { w1, b1, w2, b2 }
        })
        .collect();
    Ok(MlpProbeModel { layers })
}

/// Probe and direction sidecar written next to a model file; either half may
/// be absent depending on which analysis produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSidecar {
    pub format_version: u32,
    pub probes: Option<ProbeModel>,
    pub directions: Option<DirectionSet>,
}

pub fn write_probe_sidecar(sidecar: &ProbeSidecar, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(sidecar)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_probe_sidecar(path: &std::path::Path) -> Result<ProbeSidecar> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{handcraft_model, CircuitBlueprint, LanguageSpec};
    use crate::model::{ModelConfig, NormMode};
    use crate::stimuli::{build_stimuli, Condition};

    fn synthetic_clusters(
        key: &SeedKey,
        n: usize,
        d: usize,
        sep: f64,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let noise = gaussian_draw(&key.at(i as u64), d);
            let y = i % 2;
            let mut x = noise;
            x[0] += if y == 1 { sep } else { -sep };
            xs.push(x);
            ys.push(y as f64);
        }
        (xs, ys)
    }

    #[test]
    fn separable_clusters_classify_perfectly() {
        let key = SeedKey::new(41, "probe-sep");
        let (xs, ys) = synthetic_clusters(&key.derived("train"), 60, 8, 6.0);
        let probe = fit_logistic(&xs, &ys, DEFAULT_REG);
        assert!(probe.converged);
        let (hxs, hys) = synthetic_clusters(&key.derived("held"), 60, 8, 6.0);
        let correct = hxs
            .iter()
            .zip(&hys)
            .filter(|(x, &y)| (probe.p_french(x) > 0.5) == (y == 1.0))
            .count();
        assert_eq!(correct, 60);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let key = SeedKey::new(42, "probe-null");
        let (xs, _) = synthetic_clusters(&key.derived("train"), 60, 8, 6.0);
        // Random labels decouple features from targets.
        let mut rng = key.derived("labels").rng();
        let ys: Vec<f64> = (0..60).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
        let probe = fit_logistic(&xs, &ys, DEFAULT_REG);
        let (hxs, hys) = synthetic_clusters(&key.derived("held"), 200, 8, 6.0);
        let acc = hxs
            .iter()
            .zip(&hys)
            .filter(|(x, &y)| (probe.p_french(x) > 0.5) == (y == 1.0))
            .count() as f64
            / 200.0;
        assert!((acc - 0.5).abs() <= 0.15, "held-out accuracy {acc}");
    }

    #[test]
    fn duplicate_pair_barely_moves_the_fit() {
        let key = SeedKey::new(43, "probe-dup");
        let (xs, ys) = synthetic_clusters(&key.derived("train"), 60, 8, 6.0);
        let a = fit_logistic(&xs, &ys, DEFAULT_REG);
        let mut xs2 = xs.clone();
        let mut ys2 = ys.clone();
        xs2.push(xs[0].clone());
        ys2.push(ys[0]);
        xs2.push(xs[1].clone());
        ys2.push(ys[1]);
        let b = fit_logistic(&xs2, &ys2, DEFAULT_REG);
        let na = norm2(&a.weight);
        let diff: f64 = a
            .weight
            .iter()
            .zip(&b.weight)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        // Reweighting one pair of 30 moves the regularized optimum at the
        // ~1/n scale; the fit itself is exactly reproducible.
        assert!(diff / na < 0.05, "relative shift {}", diff / na);
        let b2 = fit_logistic(&xs2, &ys2, DEFAULT_REG);
        assert_eq!(b.weight, b2.weight);
        assert_eq!(b.bias, b2.bias);
    }

    fn handcrafted() -> (ModelWeights, CircuitBlueprint, LanguageSpec) {
        let spec = LanguageSpec::synthetic(11);
        let config = ModelConfig::desk_scale(NormMode::Identity);
        let bp = CircuitBlueprint::default_for(&config).unwrap();
        let (w, bp) = handcraft_model(&config, &spec, &bp).unwrap();
        (w, bp, spec)
    }

    fn natural_pairs(spec: &LanguageSpec, n: usize, seed: u64) -> Vec<(Stimulus, Stimulus)> {
        let key = SeedKey::new(seed, "probe-pairs");
        let e = build_stimuli(spec, n, Condition::Clean, &key.derived("e")).unwrap();
        let f = build_stimuli(spec, n, Condition::NaturalTarget, &key.derived("f")).unwrap();
        e.into_iter().zip(f).collect()
    }

    #[test]
    fn trajectories_separate_conditions_on_handcrafted_model() {
        let (w, bp, spec) = handcrafted();
        let pairs = natural_pairs(&spec, 30, 44);
        let probes = train_probes(&w, &pairs, DEFAULT_REG).unwrap();
        let key = SeedKey::new(45, "probe-traj");
        let natural =
            build_stimuli(&spec, 20, Condition::NaturalTarget, &key.derived("n")).unwrap();
        let traj_n = trajectory(&w, &probes, &natural, "natural").unwrap();
        for (l, m) in traj_n.mean.iter().enumerate() {
            assert!(*m >= 0.9, "natural layer {l}: P(French) {m}");
        }
        let triggered =
            build_stimuli(&spec, 20, Condition::Triggered, &key.derived("t")).unwrap();
        let traj_t = trajectory(&w, &probes, &triggered, "triggered").unwrap();
        for l in bp.aggregation_layer + 1..bp.readout_layer {
            assert!(
                traj_t.mean[l] <= 0.2,
                "triggered layer {l}: P(French) {}",
                traj_t.mean[l]
            );
        }
        let scrambled =
            build_stimuli(&spec, 20, Condition::Scrambled, &key.derived("s")).unwrap();
        let traj_s = trajectory(&w, &probes, &scrambled, "scrambled").unwrap();
        for l in 2..w.config.n_layers {
            assert!(
                traj_s.mean[l] <= 0.1,
                "scrambled layer {l}: P(French) {}",
                traj_s.mean[l]
            );
        }
    }

    #[test]
    fn identical_pair_differences_have_unit_consistency() {
        let diffs: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 2.0, 3.0]).collect();
        assert!((mean_pairwise_cosine(&diffs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antipodal_pairs_have_minus_one_consistency() {
        let diffs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!((mean_pairwise_cosine(&diffs) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_is_permutation_invariant() {
        let key = SeedKey::new(52, "perm-inv");
        let vecs: Vec<Vec<f64>> = (0..8).map(|i| gaussian_draw(&key.at(i), 16)).collect();
        let base = mean_pairwise_cosine(&vecs);
        let mut rev = vecs.clone();
        rev.reverse();
        assert!((mean_pairwise_cosine(&rev) - base).abs() < 1e-12);
    }

    #[test]
    fn isotropic_null_consistency_is_near_zero() {
        // Independent oracle: simulate the null distribution of the mean
        // pairwise cosine for 30 isotropic pairs at d = 64, then check one
        // more draw lies within 3 std of 0.
        let key = SeedKey::new(46, "iso");
        let d = 64;
        let n_pairs = 30;
        let consistency_of = |k: &SeedKey| {
            let vecs: Vec<Vec<f64>> =
                (0..n_pairs).map(|i| gaussian_draw(&k.at(i as u64), d)).collect();
            mean_pairwise_cosine(&vecs)
        };
        let null: Vec<f64> =
            (0..200).map(|r| consistency_of(&key.derived(&format!("null{r}")))).collect();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let std = (null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / null.len() as f64)
            .sqrt();
        let observed = consistency_of(&key.derived("observed"));
        assert!(
            (observed - mean).abs() <= 3.0 * std,
            "observed {observed}, null mean {mean} std {std}"
        );
    }

    #[test]
    fn natural_direction_on_handcrafted_model() {
        let (w, _, spec) = handcrafted();
        let pairs = natural_pairs(&spec, 12, 47);
        let dirs = natural_direction(&w, &pairs).unwrap();
        assert_eq!(dirs.layers.len(), w.config.n_layers);
        for l in &dirs.layers {
            let dir = l.direction.as_ref().unwrap();
            assert!((norm2(dir) - 1.0).abs() < 1e-12);
            assert!(l.self_consistency > 0.0);
            assert_eq!(l.per_pair.len(), 12);
        }
    }

    #[test]
    fn projection_cases() {
        let dir = vec![1.0, 0.0, 0.0];
        let (par, c) = project(&[0.0, 2.0, 5.0], &dir);
        assert_eq!(c, 0.0);
        assert!(par.iter().all(|&v| v == 0.0));
        let (par, c) = project(&[3.0, 0.0, 0.0], &dir);
        assert_eq!(c, 3.0);
        assert_eq!(par, vec![3.0, 0.0, 0.0]);
        // Random residual: coefficient matches the dot-product oracle and the
        // rejection is orthogonal; projection is idempotent.
        let key = SeedKey::new(48, "proj");
        let r = gaussian_draw(&key.at(0), 16);
        let mut d = gaussian_draw(&key.at(1), 16);
        let n = norm2(&d);
        for v in d.iter_mut() {
            *v /= n;
        }
        let (par, c) = project(&r, &d);
        assert!((c - dot(&r, &d)).abs() < 1e-12);
        let rej: Vec<f64> = r.iter().zip(&par).map(|(a, b)| a - b).collect();
        assert!(dot(&rej, &d).abs() < 1e-10);
        let (par2, c2) = project(&par, &d);
        assert!((c2 - c).abs() < 1e-10);
        for (a, b) in par.iter().zip(&par2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    #[should_panic(expected = "project contract violation")]
    fn projection_rejects_non_unit_direction() {
        let _ = project(&[1.0, 2.0], &[2.0, 0.0]);
    }

    #[test]
    fn mlp_probe_learns_language_identity() {
        let (w, _, spec) = handcrafted();
        let pairs = natural_pairs(&spec, 12, 49);
        let probes = train_mlp_probes(&w, &pairs, &SeedKey::new(50, "mlpp")).unwrap();
        let key = SeedKey::new(51, "mlpp-eval");
        let natural =
            build_stimuli(&spec, 10, Condition::NaturalTarget, &key.derived("n")).unwrap();
        let clean = build_stimuli(&spec, 10, Condition::Clean, &key.derived("c")).unwrap();
        let mid = w.config.n_layers / 2;
        for s in &natural {
            let res = probe_residuals(&w, s).unwrap();
            assert!(probes.layers[mid].p_french(&res[mid]) > 0.5);
        }
        for s in &clean {
            let res = probe_residuals(&w, s).unwrap();
            assert!(probes.layers[mid].p_french(&res[mid]) < 0.5);
        }
    }
}
