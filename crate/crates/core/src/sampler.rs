//! Kernel trace compaction.
//!
//! Kernels are grouped by `(name, grid, block)`, heterogeneous groups are
//! split with recursive 1-D 2-means on execution time, and each group is
//! sampled with just enough kernels to bound the relative error of its
//! mean at 95% confidence. The prediction of total execution time is
//! `Y = sum(N_i * mean_i)`.

use std::io::Write;
use std::sync::Arc;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gpu::{format_header, format_kernel, GroupHeader, KernelDescriptor};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("group is empty")]
    EmptyGroup,
    #[error("2-means produced an empty half")]
    DegenerateSplit,
    #[error("group has zero mean but positive variance")]
    ZeroMeanPositiveVariance,
    #[error("sample size {m} outside 1..={n}")]
    InvalidSampleSize { m: usize, n: usize },
    #[error("writing sampled trace: {0}")]
    IoFailure(String),
    #[error("group {0} has not been sampled")]
    NotSampled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig<T> {
    pub epsilon_rel: T,
    pub cv_split_threshold: T,
    pub min_split_size: usize,
    pub rng_seed: u64,
}

impl<T: Float> Default for SamplerConfig<T> {
    fn default() -> Self {
        SamplerConfig {
            epsilon_rel: cast(0.05),
            cv_split_threshold: cast(0.2),
            min_split_size: 4,
            rng_seed: 0,
        }
    }
}

impl<T: Float> SamplerConfig<T> {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.epsilon_rel > T::zero() && self.epsilon_rel < T::one()) {
            return Err(SamplerError::InvalidConfig("epsilon must be in (0, 1)".into()));
        }
        if self.cv_split_threshold.is_nan() || self.cv_split_threshold <= T::zero() {
            return Err(SamplerError::InvalidConfig("cv_split_threshold must be > 0".into()));
        }
        if self.min_split_size < 2 {
            return Err(SamplerError::InvalidConfig("min_split_size must be >= 2".into()));
        }
        Ok(())
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("float literal fits the scalar type")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub name: Arc<str>,
    pub grid: u32,
    pub block: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample<T> {
    /// Chosen kernel ids, ascending.
    pub ids: Vec<usize>,
    pub mean_ns: T,
    /// Unbiased sample variance; zero for exhaustive or single samples.
    pub var_ns2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGroup<T> {
    pub key: GroupKey,
    /// Kernel ids (indices into the trace), ascending.
    pub members: Vec<usize>,
    /// Execution times aligned with `members`.
    pub exec_ns: Vec<T>,
    pub mean_ns: T,
    /// Population variance of `exec_ns`.
    pub var_ns2: T,
    pub sample: Option<GroupSample<T>>,
}

fn mean_var<T: Float>(values: &[T]) -> (T, T) {
    if values.is_empty() {
        return (T::zero(), T::zero());
    }
    let n: T = cast(values.len() as f64);
    let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
    let ss = values.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
    (mean, ss / n)
}

impl<T: Float> KernelGroup<T> {
    pub fn new(key: GroupKey, members: Vec<usize>, exec_ns: Vec<T>) -> Self {
        assert_eq!(members.len(), exec_ns.len());
        let (mean_ns, var_ns2) = mean_var(&exec_ns);
        KernelGroup {
            key,
            members,
            exec_ns,
            mean_ns,
            var_ns2,
            sample: None,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn std_ns(&self) -> T {
        self.var_ns2.sqrt()
    }

    /// Coefficient of variation; zero for constant groups.
    pub fn cv(&self) -> T {
        if self.var_ns2 == T::zero() {
            T::zero()
        } else if self.mean_ns == T::zero() {
            T::infinity()
        } else {
            self.std_ns() / self.mean_ns
        }
    }

    fn subset(&self, positions: &[usize]) -> Self {
        KernelGroup::new(
            self.key.clone(),
            positions.iter().map(|&i| self.members[i]).collect(),
            positions.iter().map(|&i| self.exec_ns[i]).collect(),
        )
    }
}

/// Partitions kernels by exact `(name, grid, block)`, groups in
/// first-appearance order.
pub fn group_kernels<T: Float>(kernels: &[KernelDescriptor]) -> Vec<KernelGroup<T>> {
    let mut index = std::collections::HashMap::new();
    let mut parts: Vec<(GroupKey, Vec<usize>, Vec<T>)> = Vec::new();
    for (id, k) in kernels.iter().enumerate() {
        let key = GroupKey {
            name: k.name.clone(),
            grid: k.grid_blocks,
            block: k.block_threads,
        };
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            parts.push((key, Vec::new(), Vec::new()));
            parts.len() - 1
        });
        parts[slot].1.push(id);
        parts[slot].2.push(cast(k.exec_ns as f64));
    }
    parts
        .into_iter()
        .map(|(key, members, exec)| KernelGroup::new(key, members, exec))
        .collect()
}

/// One 2-means partition of `values`. Returns `true` for points in the
/// upper cluster.
pub fn two_means<T: Float>(values: &[T]) -> Result<Vec<bool>, SamplerError> {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(l, h), &v| (l.min(v), h.max(v)));
    let (mut c0, mut c1) = (lo, hi);
    let mut upper = vec![false; values.len()];
    // 1-D Lloyd iterations keep a threshold partition, so they terminate
    // within `len` rounds; the cap only guards against NaN input.
    for _ in 0..=values.len() {
        let mut changed = false;
        for (u, &v) in upper.iter_mut().zip(values) {
            let up = (v - c1).abs() < (v - c0).abs();
            changed |= *u != up;
            *u = up;
        }
        let (mut s0, mut n0, mut s1, mut n1) = (T::zero(), 0usize, T::zero(), 0usize);
        for (&u, &v) in upper.iter().zip(values) {
            if u {
                s1 = s1 + v;
                n1 += 1;
            } else {
                s0 = s0 + v;
                n0 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            return Err(SamplerError::DegenerateSplit);
        }
        c0 = s0 / cast(n0 as f64);
        c1 = s1 / cast(n1 as f64);
        if !changed {
            break;
        }
    }
    Ok(upper)
}

/// Recursively splits a group until every part is small or homogeneous.
/// Parts are returned lower cluster first.
pub fn split_group<T: Float>(
    group: KernelGroup<T>,
    cfg: &SamplerConfig<T>,
) -> Result<Vec<KernelGroup<T>>, SamplerError> {
    if group.is_empty() {
        return Err(SamplerError::EmptyGroup);
    }
    let mut out = Vec::new();
    let mut stack = vec![group];
    while let Some(g) = stack.pop() {
        if g.len() < cfg.min_split_size || g.cv() <= cfg.cv_split_threshold {
            out.push(g);
            continue;
        }
        match two_means(&g.exec_ns) {
            Ok(upper) => {
                let (hi, lo): (Vec<usize>, Vec<usize>) = (0..g.len()).partition(|&i| upper[i]);
                stack.push(g.subset(&hi));
                stack.push(g.subset(&lo));
            }
            Err(SamplerError::DegenerateSplit) => out.push(g),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Smallest sample size bounding the relative error of the group mean by
/// `epsilon_rel` at 95% confidence, clamped to `[1, N]`.
pub fn min_samples<T: Float>(group: &KernelGroup<T>, cfg: &SamplerConfig<T>) -> Result<usize, SamplerError> {
    if group.is_empty() {
        return Err(SamplerError::EmptyGroup);
    }
    let sigma = group.std_ns();
    if sigma == T::zero() {
        return Ok(1);
    }
    if group.mean_ns <= T::zero() {
        return Err(SamplerError::ZeroMeanPositiveVariance);
    }
    Ok(min_samples_raw(sigma, group.mean_ns, cfg.epsilon_rel, group.len()))
}

/// `clamp(ceil((z*sigma / (eps*mu))^2), 1, n)` for `mu > 0`.
pub fn min_samples_raw<T: Float>(sigma: T, mu: T, eps: T, n: usize) -> usize {
    if sigma == T::zero() {
        return 1;
    }
    let r = cast::<T>(Z_95) * sigma / (eps * mu);
    let m = (r * r).ceil();
    let m = m.to_usize().unwrap_or(n);
    m.clamp(1, n.max(1))
}

/// Draws `m` distinct kernels uniformly from `group`.
pub fn sample_group<T: Float>(group: &KernelGroup<T>, m: usize, seed: u64) -> Result<GroupSample<T>, SamplerError> {
    let n = group.len();
    if m == 0 || m > n {
        return Err(SamplerError::InvalidSampleSize { m, n });
    }
    let mut positions = if m == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, m).into_vec()
    };
    positions.sort_unstable();
    let values: Vec<T> = positions.iter().map(|&p| group.exec_ns[p]).collect();
    let (mean_ns, pop_var) = mean_var(&values);
    let var_ns2 = if m == n || m == 1 {
        T::zero()
    } else {
        pop_var * cast(m as f64) / cast((m - 1) as f64)
    };
    Ok(GroupSample {
        ids: positions.iter().map(|&p| group.members[p]).collect(),
        mean_ns,
        var_ns2,
    })
}

fn group_seed(seed: u64, group_index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ (group_index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub total_ns: T,
    pub half_width_ns: T,
}

/// `Y = sum(N_i * mean_i)` with a 95% half width from the sample variances.
pub fn predict_total<T: Float>(groups: &[KernelGroup<T>]) -> Result<Prediction<T>, SamplerError> {
    let mut total = T::zero();
    let mut var = T::zero();
    for (i, g) in groups.iter().enumerate() {
        let s = g.sample.as_ref().ok_or(SamplerError::NotSampled(i))?;
        let n: T = cast(g.len() as f64);
        let m: T = cast(s.ids.len() as f64);
        total = total + n * s.mean_ns;
        var = var + n * n * s.var_ns2 / m;
    }
    Ok(Prediction {
        total_ns: total,
        half_width_ns: cast::<T>(Z_95) * var.sqrt(),
    })
}

/// Full pipeline: group, split, size and draw the samples.
pub fn sample_trace<T: Float>(
    kernels: &[KernelDescriptor],
    cfg: &SamplerConfig<T>,
) -> Result<Vec<KernelGroup<T>>, SamplerError> {
    cfg.validate()?;
    let mut groups = Vec::new();
    for g in group_kernels(kernels) {
        groups.extend(split_group(g, cfg)?);
    }
    for (i, g) in groups.iter_mut().enumerate() {
        let m = min_samples(g, cfg)?;
        g.sample = Some(sample_group(g, m, group_seed(cfg.rng_seed, i))?);
    }
    Ok(groups)
}

/// Writes the sampled kernels in original trace order, preceded by a group
/// header whenever the group changes.
pub fn emit_sampled_trace<T: Float, W: Write>(
    groups: &[KernelGroup<T>],
    kernels: &[KernelDescriptor],
    sink: &mut W,
) -> Result<usize, SamplerError> {
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let s = g.sample.as_ref().ok_or(SamplerError::NotSampled(gi))?;
        picked.extend(s.ids.iter().map(|&id| (id, gi)));
    }
    picked.sort_unstable();
    let mut current = None;
    let mut write = || -> std::io::Result<()> {
        for &(id, gi) in &picked {
            if current != Some(gi) {
                let g = &groups[gi];
                let header = GroupHeader {
                    group: gi as u64,
                    n: g.len() as u64,
                    m: g.sample.as_ref().map_or(0, |s| s.ids.len()) as u64,
                };
                writeln!(sink, "{}", format_header(&header))?;
                current = Some(gi);
            }
            writeln!(sink, "{}", format_kernel(&kernels[id]))?;
        }
        Ok(())
    };
    write().map_err(|e| SamplerError::IoFailure(e.to_string()))?;
    Ok(picked.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpu::load_trace;
    use proptest::prelude::*;

    fn kernel(name: &str, grid: u32, block: u32, exec: u64) -> KernelDescriptor {
        KernelDescriptor {
            workload: Arc::from("w"),
            kernel_id: 0,
            name: Arc::from(name),
            grid_blocks: grid,
            block_threads: block,
            exec_ns: exec,
            ios: Vec::new(),
            replicas: 1,
        }
    }

    fn group(values: &[f64]) -> KernelGroup<f64> {
        KernelGroup::new(
            GroupKey { name: Arc::from("k"), grid: 1, block: 1 },
            (0..values.len()).collect(),
            values.to_vec(),
        )
    }

    #[test]
    fn grouping_by_key() {
        let ks = vec![kernel("a", 1, 1, 5), kernel("a", 1, 1, 6), kernel("a", 2, 1, 5), kernel("b", 1, 1, 1)];
        let g = group_kernels::<f64>(&ks);
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].members, vec![0, 1]);
        assert_eq!(g[1].key.grid, 2);
        assert!(group_kernels::<f64>(&[]).is_empty());
    }

    #[test]
    fn constant_group_not_split() {
        let cfg = SamplerConfig::default();
        assert_eq!(split_group(group(&[7.0; 12]), &cfg).unwrap().len(), 1);
        assert_eq!(split_group(group(&[1.0]), &cfg).unwrap().len(), 1);
    }

    /// Minimum within-cluster sum of squares over every threshold partition
    /// of the sorted values.
    fn brute_force_best(values: &[f64]) -> (f64, usize) {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let sse = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        (1..v.len())
            .map(|cut| (sse(&v[..cut]) + sse(&v[cut..]), cut))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
    }

    #[test]
    fn bimodal_split_matches_brute_force() {
        let mut values = vec![1_000.0; 10];
        values.extend([100_000.0; 10]);
        let parts = split_group(group(&values), &SamplerConfig::default()).unwrap();
        assert_eq!(parts.len(), 2);
        let (_, cut) = brute_force_best(&values);
        assert_eq!(parts[0].len(), cut);
        assert_eq!(parts[1].len(), values.len() - cut);
        assert!(parts[0].exec_ns.iter().all(|&v| v == 1_000.0));
    }

    #[test]
    fn min_samples_examples() {
        let cfg = SamplerConfig::default();
        assert_eq!(min_samples(&group(&[5.0; 40]), &cfg).unwrap(), 1);
        assert_eq!(min_samples_raw(20_000.0, 100_000.0, 0.05, 1_000), 62);
        assert_eq!(min_samples_raw(20_000.0, 100_000.0, 0.05, 30), 30);
        assert_eq!(min_samples_raw(20_000.0f32, 100_000.0, 0.05, 1_000), 62);
        assert_eq!(
            min_samples(&group(&[-1.0, 1.0]), &cfg),
            Err(SamplerError::ZeroMeanPositiveVariance)
        );
    }

    #[test]
    fn min_samples_monotone_on_grid() {
        let sigmas = [0.0, 1.0, 10.0, 100.0, 1_000.0, 5_000.0, 20_000.0];
        let mus = [10.0, 100.0, 1_000.0, 10_000.0, 100_000.0];
        let epss = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.9];
        let n = 100_000;
        for &mu in &mus {
            for &eps in &epss {
                for w in sigmas.windows(2) {
                    assert!(min_samples_raw(w[0], mu, eps, n) <= min_samples_raw(w[1], mu, eps, n));
                }
            }
        }
        for &s in &sigmas {
            for &mu in &mus {
                for w in epss.windows(2) {
                    assert!(min_samples_raw(s, mu, w[0], n) >= min_samples_raw(s, mu, w[1], n));
                }
            }
            for &eps in &epss {
                for w in mus.windows(2) {
                    assert!(min_samples_raw(s, w[0], eps, n) >= min_samples_raw(s, w[1], eps, n));
                }
            }
        }
    }

    #[test]
    fn sampling_examples() {
        let g = group(&[2.0, 4.0, 6.0]);
        let full = sample_group(&g, 3, 1).unwrap();
        assert_eq!(full.mean_ns, g.mean_ns);
        assert_eq!(full.var_ns2, 0.0);
        let one = sample_group(&g, 1, 9).unwrap();
        assert!([2.0, 4.0, 6.0].contains(&one.mean_ns));
        let a = sample_group(&group(&(0..500).map(f64::from).collect::<Vec<_>>()), 17, 3).unwrap();
        let b = sample_group(&group(&(0..500).map(f64::from).collect::<Vec<_>>()), 17, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_group(&g, 0, 0), Err(SamplerError::InvalidSampleSize { m: 0, n: 3 }));
    }

    #[test]
    fn prediction_arithmetic() {
        let mut a = group(&[2_000.0; 100]);
        a.sample = Some(GroupSample { ids: vec![0], mean_ns: 2_000.0, var_ns2: 0.0 });
        let mut b = group(&[10_000.0; 50]);
        b.sample = Some(GroupSample { ids: vec![0], mean_ns: 10_000.0, var_ns2: 0.0 });
        let p = predict_total(&[a, b]).unwrap();
        assert_eq!(p.total_ns, 700_000.0);
        assert_eq!(p.half_width_ns, 0.0);
        assert_eq!(predict_total(&[group(&[1.0])]), Err(SamplerError::NotSampled(0)));
    }

    #[test]
    fn exhaustive_sampling_predicts_truth() {
        let ks: Vec<_> = (0..40).map(|i| kernel(if i % 3 == 0 { "x" } else { "y" }, 4, 4, 1_000 + 37 * i)).collect();
        let cfg = SamplerConfig { epsilon_rel: 1e-6, ..SamplerConfig::<f64>::default() };
        let groups = sample_trace(&ks, &cfg).unwrap();
        let p = predict_total(&groups).unwrap();
        let truth: u64 = ks.iter().map(|k| k.exec_ns).sum();
        assert!((p.total_ns - truth as f64).abs() < 1e-6);
        assert_eq!(p.half_width_ns, 0.0);
    }

    #[test]
    fn emit_weights_and_roundtrip() {
        let ks: Vec<_> = (0..1_000).map(|_| kernel("k", 8, 8, 500)).collect();
        let mut groups = group_kernels::<f64>(&ks);
        groups[0].sample = Some(sample_group(&groups[0], 10, 4).unwrap());
        let mut out = Vec::new();
        assert_eq!(emit_sampled_trace(&groups, &ks, &mut out).unwrap(), 10);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 11);
        let t = load_trace(std::io::Cursor::new(text)).unwrap();
        assert!(t.kernels.iter().all(|k| k.replicas == 100));
    }

    #[test]
    fn exhaustive_emit_equals_input_modulo_headers() {
        let ks: Vec<_> = (0..30).map(|i| kernel(["a", "b", "c"][i % 3], 2, 2, 100 + i as u64)).collect();
        let mut groups = group_kernels::<f64>(&ks);
        for g in &mut groups {
            g.sample = Some(sample_group(g, g.len(), 0).unwrap());
        }
        let mut out = Vec::new();
        emit_sampled_trace(&groups, &ks, &mut out).unwrap();
        let body: Vec<String> = String::from_utf8(out)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("{\"group\""))
            .map(str::to_owned)
            .collect();
        let expected: Vec<String> = ks.iter().map(format_kernel).collect();
        assert_eq!(body, expected);
    }

    proptest! {
        #[test]
        fn split_is_partition(values in prop::collection::vec(1u64..1_000_000, 1..60)) {
            let ks: Vec<_> = values.iter().map(|&v| kernel("k", 1, 1, v)).collect();
            let g = group_kernels::<f64>(&ks).pop().unwrap();
            let parts = split_group(g, &SamplerConfig::default()).unwrap();
            let mut all: Vec<usize> = parts.iter().flat_map(|p| p.members.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..values.len()).collect::<Vec<_>>());
            for p in &parts {
                prop_assert!(!p.is_empty());
                prop_assert_eq!(&*p.key.name, "k");
            }
        }

        #[test]
        fn two_means_reaches_fixpoint(values in prop::collection::vec(0.0f64..1e6, 2..50)) {
            prop_assume!(values.iter().any(|&v| v != values[0]));
            let upper = two_means(&values).unwrap();
            let mean = |want: bool| {
                let s: Vec<f64> = values.iter().zip(&upper).filter(|(_, &u)| u == want).map(|(&v, _)| v).collect();
                s.iter().sum::<f64>() / s.len() as f64
            };
            let (c0, c1) = (mean(false), mean(true));
            for (&v, &u) in values.iter().zip(&upper) {
                let up = (v - c1).abs() < (v - c0).abs();
                prop_assert_eq!(u, up);
            }
        }

        #[test]
        fn sample_is_subset(n in 1usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let g = group(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
            let m = ((n as f64 * frac).ceil() as usize).clamp(1, n);
            let s = sample_group(&g, m, seed).unwrap();
            prop_assert_eq!(s.ids.len(), m);
            prop_assert!(s.ids.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.ids.iter().all(|&i| i < n));
        }
    }
}
