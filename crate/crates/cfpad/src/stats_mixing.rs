//! Class-guided feature-statistic mixing.
//!
//! For an activation block `x` of shape `[B, C, H, W]`, per-channel mean and
//! standard deviation are computed over the spatial dimensions, a reference
//! batch `x~` is formed by permuting samples (by default only within the
//! same class), and Beta-distributed weights interpolate the two statistic
//! sets:
//!
//! ```text
//! gamma = lam * sigma(x) + (1 - lam) * sigma(x~)
//! beta  = lam * mu(x)    + (1 - lam) * mu(x~)
//! out   = gamma * (x - mu(x)) / sigma(x) + beta
//! ```
//!
//! The layer has no trainable parameters. By default the statistics are
//! treated as constants during backpropagation (`stats_gradient_blocked`),
//! so the gradient through the layer is the per-channel scaling
//! `gamma / sigma(x)`; the full gradient is also implemented for ablation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::config::{ExperimentConfig, ShuffleMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::types::FeatureMap;

/// Stabilization constant added under the square root of the variance.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-sample, per-channel spatial mean and standard deviation.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    batch: usize,
    channels: usize,
}

impl ChannelStats {
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize) -> usize {
        b * self.channels + c
    }
}

/// Per-sample interpolation weights in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MixWeights {
    lam: Vec<f64>,
}

impl MixWeights {
    pub fn new(lam: Vec<f64>) -> Result<Self> {
        if lam.is_empty() {
            return Err(Error::InvalidArgument("mix weights must not be empty".into()));
        }
        if !lam.iter().all(|l| (0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument(
                "mix weights must all lie in [0, 1]".into(),
            ));
        }
        Ok(Self { lam })
    }

    pub fn values(&self) -> &[f64] {
        &self.lam
    }

    pub fn len(&self) -> usize {
        self.lam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lam.is_empty()
    }
}

/// A bijection on `0..B` selecting each sample's reference partner.
#[derive(Debug, Clone)]
pub struct ReferencePermutation {
    indices: Vec<usize>,
    mode: ShuffleMode,
}

impl ReferencePermutation {
    pub fn new(indices: Vec<usize>, mode: ShuffleMode) -> Result<Self> {
        let b = indices.len();
        let mut seen = vec![false; b];
        for &i in &indices {
            if i >= b || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "indices are not a permutation of 0..{b}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { indices, mode })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn mode(&self) -> ShuffleMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Check the class constraint: every sample maps to a same-label sample.
    pub fn respects_labels(&self, labels: &[u8]) -> bool {
        self.indices
            .iter()
            .enumerate()
            .all(|(i, &j)| labels[i] == labels[j])
    }
}

/// Spatial mean and `sqrt(population variance + eps)` for each (sample,
/// channel) pair.
pub fn compute_channel_stats(x: &FeatureMap, eps: f64) -> Result<ChannelStats> {
    channel_stats(x.values(), eps, true)
}

pub(crate) fn channel_stats(x: &Tensor4, eps: f64, population: bool) -> Result<ChannelStats> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let (b, c, h, w) = x.shape();
    let n = h * w;
    let divisor = if population || n == 1 { n } else { n - 1 } as f64;
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.plane(bi, ci);
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / divisor;
            let idx = bi * c + ci;
            mu[idx] = mean;
            sigma[idx] = (var + eps).sqrt();
            if !mu[idx].is_finite() || !sigma[idx].is_finite() {
                return Err(Error::NonFinite(format!(
                    "channel stats at sample {bi}, channel {ci}"
                )));
            }
        }
    }
    Ok(ChannelStats {
        mu,
        sigma,
        batch: b,
        channels: c,
    })
}

/// Build the reference permutation for the given shuffle mode.
///
/// * `class_guided` — uniform permutation within each label group; a
///   singleton class maps to itself.
/// * `random` — unconstrained uniform permutation.
/// * `cross_domain` — domains are randomly paired and samples swapped
///   across each pair; samples without a cross-domain partner map to
///   themselves. Requires at least two distinct domain tags.
pub fn make_reference_permutation<R: Rng>(
    labels: &[u8],
    mode: ShuffleMode,
    domain_tags: Option<&[u32]>,
    rng: &mut R,
) -> Result<ReferencePermutation> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let indices = match mode {
        ShuffleMode::Off => (0..b).collect(),
        ShuffleMode::Random => {
            let mut idx: Vec<usize> = (0..b).collect();
            idx.shuffle(rng);
            idx
        }
        ShuffleMode::ClassGuided => {
            let mut indices: Vec<usize> = (0..b).collect();
            for class in [0u8, 1u8] {
                let members: Vec<usize> = (0..b).filter(|&i| labels[i] == class).collect();
                let mut shuffled = members.clone();
                shuffled.shuffle(rng);
                for (pos, &i) in members.iter().enumerate() {
                    indices[i] = shuffled[pos];
                }
            }
            indices
        }
        ShuffleMode::CrossDomain => {
            let tags = domain_tags.ok_or_else(|| {
                Error::InvalidArgument("cross_domain shuffle requires domain tags".into())
            })?;
            if tags.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "domain_tags length {} does not match batch size {b}",
                    tags.len()
                )));
            }
            let mut domains: Vec<u32> = tags.to_vec();
            domains.sort_unstable();
            domains.dedup();
            if domains.len() < 2 {
                return Err(Error::InvalidArgument(
                    "cross_domain shuffle requires at least two distinct domains".into(),
                ));
            }
            domains.shuffle(rng);
            let mut indices: Vec<usize> = (0..b).collect();
            for pair in domains.chunks(2) {
                if pair.len() < 2 {
                    continue; // odd domain out: its samples self-map
                }
                let mut left: Vec<usize> = (0..b).filter(|&i| tags[i] == pair[0]).collect();
                let mut right: Vec<usize> = (0..b).filter(|&i| tags[i] == pair[1]).collect();
                left.shuffle(rng);
                right.shuffle(rng);
                for (&l, &r) in left.iter().zip(right.iter()) {
                    indices[l] = r;
                    indices[r] = l;
                }
            }
            indices
        }
    };
    ReferencePermutation::new(indices, mode)
}

/// Draw `batch` independent weights from `Beta(beta_alpha, beta_alpha)`.
pub fn sample_mix_weights<R: Rng>(
    batch: usize,
    beta_alpha: f64,
    rng: &mut R,
) -> Result<MixWeights> {
    if batch < 1 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let beta = Beta::new(beta_alpha, beta_alpha)
        .map_err(|e| Error::InvalidArgument(format!("invalid Beta alpha {beta_alpha}: {e}")))?;
    let lam: Vec<f64> = (0..batch).map(|_| beta.sample(rng).clamp(0.0, 1.0)).collect();
    MixWeights::new(lam)
}

/// Knobs of the mixing computation beyond the positional arguments.
#[derive(Debug, Clone, Copy)]
pub struct MixOptions {
    pub eps: f64,
    /// Population (`true`) or sample variance over the spatial dims.
    pub population_variance: bool,
    /// Treat mu/sigma of both x and the reference as constants in
    /// differentiation.
    pub stats_gradient_blocked: bool,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            population_variance: true,
            stats_gradient_blocked: true,
        }
    }
}

impl MixOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            eps: DEFAULT_EPS,
            population_variance: cfg.population_variance,
            stats_gradient_blocked: cfg.stats_gradient_blocked,
        }
    }
}

/// Everything the backward pass needs. Samples where `active` is false were
/// copied through unchanged (per-sample Bernoulli ablation).
#[derive(Debug, Clone)]
pub struct MixCache {
    normalized: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
    lam: Vec<f64>,
    inv_perm: Vec<usize>,
    active: Vec<bool>,
    shape: (usize, usize, usize, usize),
    var_divisor: f64,
    blocked: bool,
}

/// Apply the mixed statistics to the style-normalized input.
pub fn mix_statistics(
    x: &FeatureMap,
    perm: &ReferencePermutation,
    lam: &MixWeights,
    eps: f64,
    stats_gradient_blocked: bool,
) -> Result<FeatureMap> {
    let opts = MixOptions {
        eps,
        population_variance: true,
        stats_gradient_blocked,
    };
    Ok(mix_forward(x, perm, lam, &opts, None)?.0)
}

/// Forward pass returning the cache for [`mix_backward`].
pub fn mix_forward(
    x: &FeatureMap,
    perm: &ReferencePermutation,
    lam: &MixWeights,
    opts: &MixOptions,
    active: Option<&[bool]>,
) -> Result<(FeatureMap, MixCache)> {
    let t = x.values();
    let (b, c, h, w) = t.shape();
    if perm.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "permutation length {} does not match batch size {b}",
            perm.len()
        )));
    }
    if lam.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "mix weights length {} does not match batch size {b}",
            lam.len()
        )));
    }
    let active: Vec<bool> = match active {
        Some(a) => {
            if a.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "active mask length {} does not match batch size {b}",
                    a.len()
                )));
            }
            a.to_vec()
        }
        None => vec![true; b],
    };

    let stats = channel_stats(t, opts.eps, opts.population_variance)?;
    let n = h * w;
    let p = perm.indices();
    let lam_v = lam.values();

    let mut normalized = vec![0.0; t.len()];
    let mut gamma = vec![0.0; b * c];
    let mut out = Tensor4::zeros(b, c, h, w);
    for bi in 0..b {
        let l = lam_v[bi];
        let r = p[bi];
        for ci in 0..c {
            let idx = bi * c + ci;
            let ridx = r * c + ci;
            let g = l * stats.sigma[idx] + (1.0 - l) * stats.sigma[ridx];
            let be = l * stats.mu[idx] + (1.0 - l) * stats.mu[ridx];
            gamma[idx] = g;
            let src = t.plane(bi, ci);
            let norm = &mut normalized[idx * n..(idx + 1) * n];
            let dst = out.plane_mut(bi, ci);
            if active[bi] {
                for i in 0..n {
                    let nv = (src[i] - stats.mu[idx]) / stats.sigma[idx];
                    norm[i] = nv;
                    dst[i] = g * nv + be;
                }
            } else {
                for i in 0..n {
                    norm[i] = (src[i] - stats.mu[idx]) / stats.sigma[idx];
                }
                dst.copy_from_slice(src);
            }
        }
    }

    let mut inv_perm = vec![0usize; b];
    for (i, &j) in p.iter().enumerate() {
        inv_perm[j] = i;
    }
    let cache = MixCache {
        normalized,
        sigma: stats.sigma,
        gamma,
        lam: lam_v.to_vec(),
        inv_perm,
        active,
        shape: (b, c, h, w),
        var_divisor: if opts.population_variance || n == 1 {
            n as f64
        } else {
            (n - 1) as f64
        },
        blocked: opts.stats_gradient_blocked,
    };
    Ok((FeatureMap::new(out)?, cache))
}

/// Gradient of the loss w.r.t. the mixing input.
///
/// With blocked statistics this is `grad_out * gamma / sigma(x)` per
/// channel for active samples (pass-through for inactive ones). The
/// unblocked path adds the mean/variance terms, including those flowing to
/// the reference sample.
pub fn mix_backward(grad_out: &Tensor4, cache: &MixCache) -> Result<Tensor4> {
    let (b, c, h, w) = cache.shape;
    if grad_out.shape() != cache.shape {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} does not match cached shape {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let n = h * w;
    let nf = n as f64;
    let m = cache.var_divisor;

    if cache.blocked {
        let mut grad_in = Tensor4::zeros(b, c, h, w);
        for bi in 0..b {
            for ci in 0..c {
                let idx = bi * c + ci;
                let scale = if cache.active[bi] {
                    cache.gamma[idx] / cache.sigma[idx]
                } else {
                    1.0
                };
                let g = grad_out.plane(bi, ci);
                let dst = grad_in.plane_mut(bi, ci);
                for i in 0..n {
                    dst[i] = scale * g[i];
                }
            }
        }
        return Ok(grad_in);
    }

    // Unblocked path. Per (sample, channel): s1 = sum(g), s2 = sum(g * n).
    let mut s1 = vec![0.0; b * c];
    let mut s2 = vec![0.0; b * c];
    for bi in 0..b {
        if !cache.active[bi] {
            continue; // inactive samples contribute no statistic grads
        }
        for ci in 0..c {
            let idx = bi * c + ci;
            let g = grad_out.plane(bi, ci);
            let norm = &cache.normalized[idx * n..(idx + 1) * n];
            let mut a = 0.0;
            let mut bb = 0.0;
            for i in 0..n {
                a += g[i];
                bb += g[i] * norm[i];
            }
            s1[idx] = a;
            s2[idx] = bb;
        }
    }

    let mut grad_in = Tensor4::zeros(b, c, h, w);
    for a in 0..b {
        let r = cache.inv_perm[a]; // the sample whose reference is a
        for ci in 0..c {
            let idx = a * c + ci;
            let ridx = r * c + ci;
            let g = grad_out.plane(a, ci);
            let norm = &cache.normalized[idx * n..(idx + 1) * n];
            let dst = grad_in.plane_mut(a, ci);

            // mean / sigma paths of sample a's statistics, fed by a's own
            // mix (weight lam_a) and by the sample r referencing a
            // (weight 1 - lam_r).
            let mut mu_coeff = 0.0;
            let mut sigma_coeff = 0.0;
            if cache.active[a] {
                mu_coeff += cache.lam[a] * s1[idx];
                sigma_coeff += cache.lam[a] * s2[idx];
            }
            if cache.active[r] {
                if r == a {
                    mu_coeff += (1.0 - cache.lam[a]) * s1[idx];
                    sigma_coeff += (1.0 - cache.lam[a]) * s2[idx];
                } else {
                    mu_coeff += (1.0 - cache.lam[r]) * s1[ridx];
                    sigma_coeff += (1.0 - cache.lam[r]) * s2[ridx];
                }
            }

            if cache.active[a] {
                let scale = cache.gamma[idx] / cache.sigma[idx];
                for i in 0..n {
                    let n_path = scale * (g[i] - s1[idx] / nf - norm[i] * s2[idx] / m);
                    dst[i] = n_path + mu_coeff / nf + norm[i] * sigma_coeff / m;
                }
            } else {
                for i in 0..n {
                    dst[i] = g[i] + mu_coeff / nf + norm[i] * sigma_coeff / m;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Test hook: force the Bernoulli activation and interpolation weights.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MixOverride {
    pub force_active: bool,
    pub force_lam: Option<f64>,
}

/// The full training-time layer: per-batch (or per-sample) Bernoulli
/// activation, reference selection, weight sampling, statistic mixing.
/// Outside training (or with `shuffle_mode = off`) the input is returned
/// bit-exactly unchanged.
pub fn cgmixstyle_forward<R: Rng>(
    x: &FeatureMap,
    labels: Option<&[u8]>,
    domain_tags: Option<&[u32]>,
    cfg: &ExperimentConfig,
    rng: &mut R,
    training: bool,
) -> Result<FeatureMap> {
    Ok(cgmixstyle_forward_cached(x, labels, domain_tags, cfg, rng, training, None)?.0)
}

/// As [`cgmixstyle_forward`], returning the backward cache; `None` when the
/// layer was an identity for the whole batch.
pub fn cgmixstyle_forward_cached<R: Rng>(
    x: &FeatureMap,
    labels: Option<&[u8]>,
    domain_tags: Option<&[u32]>,
    cfg: &ExperimentConfig,
    rng: &mut R,
    training: bool,
    overrides: Option<MixOverride>,
) -> Result<(FeatureMap, Option<MixCache>)> {
    if !training || cfg.shuffle_mode == ShuffleMode::Off {
        return Ok((x.clone(), None));
    }
    let b = x.values().batch();
    let ov = overrides.unwrap_or_default();

    let active: Vec<bool> = if ov.force_active {
        vec![true; b]
    } else if cfg.per_sample_mix {
        (0..b).map(|_| rng.random_bool(cfg.mix_probability)).collect()
    } else {
        vec![rng.random_bool(cfg.mix_probability); b]
    };
    if active.iter().all(|a| !a) {
        return Ok((x.clone(), None));
    }

    let owned_labels;
    let label_slice: &[u8] = match labels {
        Some(l) => {
            if l.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "labels length {} does not match batch size {b}",
                    l.len()
                )));
            }
            l
        }
        None => {
            if cfg.shuffle_mode == ShuffleMode::ClassGuided {
                return Err(Error::InvalidArgument(
                    "class_guided mixing requires labels".into(),
                ));
            }
            owned_labels = vec![0u8; b];
            &owned_labels
        }
    };

    let perm = make_reference_permutation(label_slice, cfg.shuffle_mode, domain_tags, rng)?;
    let lam = match ov.force_lam {
        Some(l) => MixWeights::new(vec![l; b])?,
        None => sample_mix_weights(b, cfg.beta_alpha, rng)?,
    };
    let opts = MixOptions::from_config(cfg);
    let (out, cache) = mix_forward(x, &perm, &lam, &opts, Some(&active))?;
    Ok((out, Some(cache)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fm(data: Vec<f64>, b: usize, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Tensor4::from_vec(data, b, c, h, w).unwrap()).unwrap()
    }

    #[test]
    fn stats_worked_example() {
        let x = fm(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        let s = compute_channel_stats(&x, 1e-6).unwrap();
        assert!((s.mu()[0] - 2.5).abs() < 1e-12);
        assert!((s.sigma()[0] - (1.25f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_constant_channel() {
        let x = fm(vec![3.25; 6], 1, 1, 2, 3);
        let s = compute_channel_stats(&x, 1e-6).unwrap();
        assert_eq!(s.mu()[0], 3.25);
        assert!((s.sigma()[0] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn stats_degenerate_spatial_extent() {
        let x = fm(vec![7.0, -2.0], 2, 1, 1, 1);
        let s = compute_channel_stats(&x, 1e-6).unwrap();
        assert_eq!(s.mu(), &[7.0, -2.0]);
        assert!((s.sigma()[0] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn stats_require_positive_eps() {
        let x = fm(vec![1.0, 2.0], 1, 1, 1, 2);
        assert!(compute_channel_stats(&x, 0.0).is_err());
    }

    #[test]
    fn class_guided_permutation_respects_labels() {
        let labels = vec![0, 0, 1, 1];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = make_reference_permutation(&labels, ShuffleMode::ClassGuided, None, &mut rng)
                .unwrap();
            assert!(p.respects_labels(&labels));
            for (i, &j) in p.indices().iter().enumerate() {
                assert!((i < 2) == (j < 2));
            }
        }
    }

    #[test]
    fn singleton_class_maps_to_itself() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = make_reference_permutation(&[1], ShuffleMode::ClassGuided, None, &mut rng).unwrap();
        assert_eq!(p.indices(), &[0]);
        // one attack among bona fide samples: the attack self-maps
        let labels = vec![1, 0, 1, 1];
        for _ in 0..20 {
            let p = make_reference_permutation(&labels, ShuffleMode::ClassGuided, None, &mut rng)
                .unwrap();
            assert_eq!(p.indices()[1], 1);
            assert!(p.respects_labels(&labels));
        }
    }

    #[test]
    fn cross_domain_requires_two_domains() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let err = make_reference_permutation(
            &[0, 1],
            ShuffleMode::CrossDomain,
            Some(&[5, 5]),
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("two distinct domains"));
        assert!(
            make_reference_permutation(&[0, 1], ShuffleMode::CrossDomain, None, &mut rng).is_err()
        );
    }

    #[test]
    fn cross_domain_swaps_across_domains_where_feasible() {
        let labels = vec![0; 6];
        let tags = vec![0, 0, 0, 1, 1, 1];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..30 {
            let p = make_reference_permutation(
                &labels,
                ShuffleMode::CrossDomain,
                Some(&tags),
                &mut rng,
            )
            .unwrap();
            for (i, &j) in p.indices().iter().enumerate() {
                if i != j {
                    assert_ne!(tags[i], tags[j], "mapped within a domain: {:?}", p.indices());
                }
            }
        }
    }

    #[test]
    fn beta_weights_have_symmetric_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for alpha in [0.1, 1.0, 5.0] {
            let w = sample_mix_weights(100_000, alpha, &mut rng).unwrap();
            assert!(w.values().iter().all(|l| (0.0..=1.0).contains(l)));
            let mean = w.values().iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 0.5).abs() < 0.01, "alpha {alpha}: mean {mean}");
        }
    }

    #[test]
    fn large_alpha_concentrates_at_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w = sample_mix_weights(10_000, 1e6, &mut rng).unwrap();
        assert!(w.values().iter().all(|l| (l - 0.5).abs() < 0.01));
    }

    #[test]
    fn lam_one_is_forward_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = fm(data, 2, 3, 4, 4);
        let perm =
            make_reference_permutation(&[0, 1], ShuffleMode::Random, None, &mut rng).unwrap();
        let lam = MixWeights::new(vec![1.0, 1.0]).unwrap();
        let out = mix_statistics(&x, &perm, &lam, DEFAULT_EPS, true).unwrap();
        for (a, b) in out.values().data().iter().zip(x.values().data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn lam_zero_transfers_reference_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = fm(data, 2, 2, 4, 4);
        let perm = ReferencePermutation::new(vec![1, 0], ShuffleMode::Random).unwrap();
        let lam = MixWeights::new(vec![0.0, 0.0]).unwrap();
        let out = mix_statistics(&x, &perm, &lam, DEFAULT_EPS, true).unwrap();
        let sx = compute_channel_stats(&x, DEFAULT_EPS).unwrap();
        let so = compute_channel_stats(&out, DEFAULT_EPS).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                let idx = b * 2 + c;
                let ridx = (1 - b) * 2 + c;
                assert!((so.mu()[idx] - sx.mu()[ridx]).abs() < 1e-4);
                assert!((so.sigma()[idx] - sx.sigma()[ridx]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn scalar_worked_example() {
        // sample 0: values [1, -1] -> mu 0, sigma ~1; sample 1: [7, 1] ->
        // mu 4, sigma ~3. lam = 0.25 against the swapped reference gives
        // gamma 2.5, beta 3 for sample 0, so out = 2.5 x + 3.
        let x = fm(vec![1.0, -1.0, 7.0, 1.0], 2, 1, 1, 2);
        let perm = ReferencePermutation::new(vec![1, 0], ShuffleMode::Random).unwrap();
        let lam = MixWeights::new(vec![0.25, 0.25]).unwrap();
        let out = mix_statistics(&x, &perm, &lam, DEFAULT_EPS, true).unwrap();
        let got = out.values().plane(0, 0);
        assert!((got[0] - 5.5).abs() < 1e-6, "{}", got[0]);
        assert!((got[1] - 0.5).abs() < 1e-6, "{}", got[1]);
    }

    #[test]
    fn output_statistics_match_mixed_targets() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (b, c, h, w) = (
                rng.random_range(2..5),
                rng.random_range(1..4),
                rng.random_range(2..5),
                rng.random_range(2..5),
            );
            let data: Vec<f64> =
                (0..b * c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = fm(data, b, c, h, w);
            let labels: Vec<u8> = (0..b).map(|i| (i % 2) as u8).collect();
            let perm =
                make_reference_permutation(&labels, ShuffleMode::Random, None, &mut rng).unwrap();
            let lam = sample_mix_weights(b, 0.3, &mut rng).unwrap();
            let sx = compute_channel_stats(&x, DEFAULT_EPS).unwrap();
            let out = mix_statistics(&x, &perm, &lam, DEFAULT_EPS, true).unwrap();
            let so = compute_channel_stats(&out, DEFAULT_EPS).unwrap();
            for bi in 0..b {
                let l = lam.values()[bi];
                let r = perm.indices()[bi];
                for ci in 0..c {
                    let idx = bi * c + ci;
                    let ridx = r * c + ci;
                    let gamma = l * sx.sigma()[idx] + (1.0 - l) * sx.sigma()[ridx];
                    let beta = l * sx.mu()[idx] + (1.0 - l) * sx.mu()[ridx];
                    assert!((so.mu()[idx] - beta).abs() < 1e-4);
                    assert!((so.sigma()[idx] - gamma).abs() < 1e-4);
                }
            }
        }
    }

    /// Central finite differences of a weighted sum of the mixing outputs.
    fn fd_grad(
        x: &FeatureMap,
        perm: &ReferencePermutation,
        lam: &MixWeights,
        opts: &MixOptions,
        loss_weights: &[f64],
    ) -> Vec<f64> {
        let h = 1e-6;
        let mut grads = vec![0.0; x.values().len()];
        for i in 0..grads.len() {
            let eval = |delta: f64| {
                let mut data = x.values().data().to_vec();
                data[i] += delta;
                let shape = x.values().shape();
                let xp = fm(data, shape.0, shape.1, shape.2, shape.3);
                let out = mix_forward(&xp, perm, lam, opts, None).unwrap().0;
                out.values()
                    .data()
                    .iter()
                    .zip(loss_weights)
                    .map(|(o, w)| o * w)
                    .sum::<f64>()
            };
            grads[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        grads
    }

    #[test]
    fn unblocked_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for population in [true, false] {
            let (b, c, h, w) = (3, 2, 2, 3);
            let data: Vec<f64> =
                (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = fm(data, b, c, h, w);
            let perm = ReferencePermutation::new(vec![2, 0, 1], ShuffleMode::Random).unwrap();
            let lam = MixWeights::new(vec![0.3, 0.8, 0.1]).unwrap();
            let opts = MixOptions {
                eps: 1e-4,
                population_variance: population,
                stats_gradient_blocked: false,
            };
            let loss_w: Vec<f64> =
                (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = mix_forward(&x, &perm, &lam, &opts, None).unwrap();
            let g_out = Tensor4::from_vec(loss_w.clone(), b, c, h, w).unwrap();
            let analytic = mix_backward(&g_out, &cache).unwrap();
            let numeric = fd_grad(&x, &perm, &lam, &opts, &loss_w);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!(
                    (a - n).abs() < 1e-5 * (1.0 + n.abs()),
                    "population {population}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn blocked_lam_one_has_identity_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (b, c, h, w) = (2, 2, 2, 2);
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = fm(data, b, c, h, w);
        let perm = ReferencePermutation::new(vec![1, 0], ShuffleMode::Random).unwrap();
        let lam = MixWeights::new(vec![1.0, 1.0]).unwrap();
        let opts = MixOptions::default();
        let (out, cache) = mix_forward(&x, &perm, &lam, &opts, None).unwrap();
        for (o, i) in out.values().data().iter().zip(x.values().data()) {
            assert!((o - i).abs() < 1e-5);
        }
        let g: Vec<f64> = (0..x.values().len()).map(|i| 0.1 * i as f64 - 0.7).collect();
        let g_out = Tensor4::from_vec(g.clone(), b, c, h, w).unwrap();
        let back = mix_backward(&g_out, &cache).unwrap();
        for (a, e) in back.data().iter().zip(&g) {
            assert!((a - e).abs() < 1e-12, "gamma/sigma must cancel exactly at lam=1");
        }
    }

    #[test]
    fn blocked_gradient_ignores_reference_sample() {
        // With lam < 1 the forward genuinely depends on the reference
        // sample's values, but the blocked backward routes nothing to it.
        let x = fm(vec![1.0, -1.0, 7.0, 1.0], 2, 1, 1, 2);
        let perm = ReferencePermutation::new(vec![1, 0], ShuffleMode::Random).unwrap();
        let lam = MixWeights::new(vec![0.25, 1.0]).unwrap();
        let opts = MixOptions::default();
        let (_, cache) = mix_forward(&x, &perm, &lam, &opts, None).unwrap();

        // finite difference: perturb reference element x[1,0,0,0], observe
        // sample 0's first output move
        let h = 1e-5;
        let out_at = |delta: f64| {
            let mut data = x.values().data().to_vec();
            data[2] += delta;
            let xp = fm(data, 2, 1, 1, 2);
            mix_forward(&xp, &perm, &lam, &opts, None)
                .unwrap()
                .0
                .values()
                .get(0, 0, 0, 0)
        };
        let fd = (out_at(h) - out_at(-h)) / (2.0 * h);
        assert!(fd.abs() > 1e-3, "forward must depend on the reference, fd = {fd}");

        // analytic: upstream gradient only on sample 0's outputs
        let g_out = Tensor4::from_vec(vec![1.0, 1.0, 0.0, 0.0], 2, 1, 1, 2).unwrap();
        let back = mix_backward(&g_out, &cache).unwrap();
        assert_eq!(back.get(1, 0, 0, 0), 0.0);
        assert_eq!(back.get(1, 0, 0, 1), 0.0);
    }

    #[test]
    fn inference_mode_is_bitwise_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = fm(data, 2, 3, 4, 4);
        let cfg = ExperimentConfig {
            mix_probability: 1.0,
            ..Default::default()
        };
        let out = cgmixstyle_forward(&x, Some(&[0, 1]), None, &cfg, &mut rng, false).unwrap();
        assert_eq!(out.values().data(), x.values().data());
    }

    #[test]
    fn zero_probability_never_activates() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = fm(data, 2, 3, 2, 2);
        let cfg = ExperimentConfig {
            mix_probability: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            let out = cgmixstyle_forward(&x, Some(&[0, 1]), None, &cfg, &mut rng, true).unwrap();
            assert_eq!(out.values().data(), x.values().data());
        }
    }

    #[test]
    fn shuffle_mode_off_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = fm(vec![0.5; 12], 1, 3, 2, 2);
        let cfg = ExperimentConfig {
            shuffle_mode: ShuffleMode::Off,
            mix_probability: 1.0,
            ..Default::default()
        };
        let out = cgmixstyle_forward(&x, Some(&[1]), None, &cfg, &mut rng, true).unwrap();
        assert_eq!(out.values().data(), x.values().data());
    }

    #[test]
    fn class_guided_without_labels_is_an_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = fm(vec![0.5; 12], 1, 3, 2, 2);
        let cfg = ExperimentConfig {
            mix_probability: 1.0,
            ..Default::default()
        };
        let err = cgmixstyle_forward(&x, None, None, &cfg, &mut rng, true).unwrap_err();
        assert!(err.to_string().contains("labels"));
    }

    #[test]
    fn forced_lam_one_composes_to_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = fm(data, 2, 2, 3, 3);
        let cfg = ExperimentConfig {
            mix_probability: 1.0,
            ..Default::default()
        };
        let ov = MixOverride {
            force_active: true,
            force_lam: Some(1.0),
        };
        let (out, cache) =
            cgmixstyle_forward_cached(&x, Some(&[0, 1]), None, &cfg, &mut rng, true, Some(ov))
                .unwrap();
        assert!(cache.is_some());
        for (o, i) in out.values().data().iter().zip(x.values().data()) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn per_sample_activation_copies_inactive_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let data: Vec<f64> = (0..4 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = fm(data, 4, 1, 2, 2);
        let perm = ReferencePermutation::new(vec![1, 0, 3, 2], ShuffleMode::Random).unwrap();
        let lam = MixWeights::new(vec![0.2; 4]).unwrap();
        let active = vec![true, false, true, false];
        let (out, _) = mix_forward(&x, &perm, &lam, &MixOptions::default(), Some(&active)).unwrap();
        assert_eq!(out.values().sample(1), x.values().sample(1));
        assert_eq!(out.values().sample(3), x.values().sample(3));
        assert_ne!(out.values().sample(0), x.values().sample(0));
    }

    #[test]
    fn permutation_ctor_rejects_non_bijections() {
        assert!(ReferencePermutation::new(vec![0, 0, 2], ShuffleMode::Random).is_err());
        assert!(ReferencePermutation::new(vec![0, 3], ShuffleMode::Random).is_err());
    }
}
