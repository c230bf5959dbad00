//! Attention-based double compression.
//!
//! A batch of client activations `[B, n, d]` is first merged along the batch
//! axis: samples are clustered on a per-sample merge vector (by default the
//! head-averaged class-token attention of the last client block), and each
//! cluster is replaced by the mean of its members' activations and one-hot
//! labels. Each merged activation then keeps only the class token plus the
//! `k - 1` patch tokens with the highest cluster-mean attention. The server
//! receives `[T, k, d]` features and `[T, L]` soft labels.
//!
//! Both stages are linear in the activations, so the gradient the server
//! returns maps back exactly through [`unmerge_gradient`]: each member of a
//! cluster receives the cluster gradient divided by the cluster size at the
//! kept token positions, and zero elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeVector {
    /// Head-averaged class-token attention row, length `n`.
    #[default]
    ClsScore,
    /// Class-token activation, length `d`.
    ClsToken,
    /// Token-averaged activation, length `d`.
    AvgToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdcConfig {
    /// Target cluster count `T`.
    pub clusters: usize,
    /// Tokens kept per merged activation `k`, class token included.
    pub tokens: usize,
    #[serde(default)]
    pub merge_vector: MergeVector,
    #[serde(default)]
    pub kmeans: KMeansParams,
}

impl AdcConfig {
    /// Splits a target ratio evenly between the two stages:
    /// `T/B ≈ k/n ≈ sqrt(xi)`, rounded to nearest with a floor of one.
    pub fn balanced(xi: f64, batch: usize, tokens: usize) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::Config(format!("compression ratio {xi} outside (0, 1]")));
        }
        let root = xi.sqrt();
        let pick = |total: usize| ((total as f64 * root).round() as usize).clamp(1, total);
        Ok(Self {
            clusters: pick(batch),
            tokens: pick(tokens),
            merge_vector: MergeVector::ClsScore,
            kmeans: KMeansParams::default(),
        })
    }

    /// Feature ratio `(T/B) * (k/n)`.
    pub fn ratio(&self, batch: usize, tokens: usize) -> f64 {
        (self.clusters as f64 / batch as f64) * (self.tokens as f64 / tokens as f64)
    }

    pub fn validate(&self, batch: usize, tokens: usize) -> Result<()> {
        if self.clusters == 0 || self.clusters > batch {
            return Err(Error::Config(format!(
                "cluster count {} must lie in [1, {batch}]",
                self.clusters
            )));
        }
        if self.tokens == 0 || self.tokens > tokens {
            return Err(Error::Config(format!(
                "kept tokens {} must lie in [1, {tokens}]",
                self.tokens
            )));
        }
        Ok(())
    }
}

/// Client-side bookkeeping for one encoded batch. Never transmitted.
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    /// Cluster of each sample, length `B`.
    pub assignments: Vec<usize>,
    /// `[T, n]` cluster-mean class-token scores that drive token selection.
    pub centroids: Tensor,
    /// Strictly increasing kept token indices per cluster, each starting at 0.
    pub selected_tokens: Vec<Vec<usize>>,
    pub cluster_sizes: Vec<usize>,
}

impl MergePlan {
    pub fn batch(&self) -> usize {
        self.assignments.len()
    }

    pub fn clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.clusters()];
        for (i, &c) in self.assignments.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

/// Output of [`encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdcBatch {
    /// `[T, k, d]`
    pub features: Tensor,
    /// `[T, L]`
    pub soft_labels: Tensor,
}

fn expect_activations(activations: &Tensor) -> Result<(usize, usize, usize)> {
    match *activations.shape() {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::shape("adc", format!("activations must be [B, n, d], got {s:?}"))),
    }
}

/// Per-sample vector the batch is clustered on.
pub fn merge_vector(activations: &Tensor, cls_scores: &Tensor, strategy: MergeVector) -> Result<Tensor> {
    let (b, n, d) = expect_activations(activations)?;
    match strategy {
        MergeVector::ClsScore => {
            if cls_scores.shape() != [b, n] {
                return Err(Error::shape(
                    "merge_vector",
                    format!("scores {:?} for activations {:?}", cls_scores.shape(), activations.shape()),
                ));
            }
            Ok(cls_scores.clone())
        }
        MergeVector::ClsToken => {
            let data = (0..b)
                .flat_map(|i| activations.data()[i * n * d..i * n * d + d].iter().copied())
                .collect();
            Ok(Tensor::from_parts(vec![b, d], data))
        }
        MergeVector::AvgToken => {
            let mut data = vec![0.0; b * d];
            for i in 0..b {
                let dst = &mut data[i * d..(i + 1) * d];
                for t in 0..n {
                    for (x, y) in dst.iter_mut().zip(&activations.data()[(i * n + t) * d..]) {
                        *x += y;
                    }
                }
                dst.iter_mut().for_each(|x| *x /= n as f64);
            }
            Ok(Tensor::from_parts(vec![b, d], data))
        }
    }
}

/// Cluster averages of activations and one-hot labels.
pub fn merge_batch(
    activations: &Tensor,
    labels: &[usize],
    classes: usize,
    plan: &MergePlan,
) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = expect_activations(activations)?;
    if labels.len() != b || plan.batch() != b {
        return Err(Error::shape(
            "merge_batch",
            format!("{b} samples, {} labels, plan for {}", labels.len(), plan.batch()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {y} outside {classes} classes")));
    }
    let members = plan.members();
    if let Some(i) = members.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("cluster {i} of the merge plan is empty")));
    }
    let t = members.len();
    let inner = n * d;
    let mut features = vec![0.0; t * inner];
    let mut soft = vec![0.0; t * classes];
    for (c, group) in members.iter().enumerate() {
        let size = group.len() as f64;
        let dst = &mut features[c * inner..(c + 1) * inner];
        for &i in group {
            for (x, y) in dst.iter_mut().zip(&activations.data()[i * inner..(i + 1) * inner]) {
                *x += y;
            }
            soft[c * classes + labels[i]] += 1.0;
        }
        dst.iter_mut().for_each(|x| *x /= size);
        soft[c * classes..(c + 1) * classes]
            .iter_mut()
            .for_each(|y| *y /= size);
    }
    Ok((
        Tensor::from_parts(vec![t, n, d], features),
        Tensor::from_parts(vec![t, classes], soft),
    ))
}

/// Kept token indices for one importance vector: index 0 plus the `k - 1`
/// largest entries among the rest, ties to the lower index, ascending.
pub fn top_tokens(importance: &[f64], k: usize) -> Vec<usize> {
    let n = importance.len();
    let mut rest: Vec<usize> = (1..n).collect();
    // Stable sort keeps lower indices first among equal scores.
    rest.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    let mut kept: Vec<usize> = std::iter::once(0)
        .chain(rest.into_iter().take(k.saturating_sub(1)))
        .collect();
    kept.sort_unstable();
    kept
}

/// Keeps `k` tokens of each merged activation, chosen by its centroid.
pub fn select_tokens(features: &Tensor, centroids: &Tensor, k: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (t, n, _) = expect_activations(features)?;
    if centroids.shape() != [t, n] {
        return Err(Error::shape(
            "select_tokens",
            format!("centroids {:?} for features {:?}", centroids.shape(), features.shape()),
        ));
    }
    if k == 0 || k > n {
        return Err(Error::contract(format!("kept tokens {k} must lie in [1, {n}]")));
    }
    let selected: Vec<Vec<usize>> = centroids
        .data()
        .chunks_exact(n)
        .map(|c| top_tokens(c, k))
        .collect();
    Ok((gather_tokens(features, &selected), selected))
}

fn gather_tokens(features: &Tensor, selected: &[Vec<usize>]) -> Tensor {
    let (t, n, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let k = selected[0].len();
    let mut out = Vec::with_capacity(t * k * d);
    for (c, idx) in selected.iter().enumerate() {
        for &i in idx {
            out.extend_from_slice(&features.data()[(c * n + i) * d..(c * n + i + 1) * d]);
        }
    }
    Tensor::from_parts(vec![t, k, d], out)
}

/// Builds the merge plan for a batch: clusters the merge vectors and picks
/// tokens from the cluster-mean class-token scores.
pub fn plan(activations: &Tensor, cls_scores: &Tensor, config: &AdcConfig) -> Result<MergePlan> {
    let (b, n, _) = expect_activations(activations)?;
    config.validate(b, n)?;
    if cls_scores.shape() != [b, n] {
        return Err(Error::shape(
            "adc plan",
            format!("scores {:?} for activations {:?}", cls_scores.shape(), activations.shape()),
        ));
    }
    let points = merge_vector(activations, cls_scores, config.merge_vector)?;
    let clustering = kmeans(&points, config.clusters, &config.kmeans)?;
    let members = clustering.members();
    let mut centroids = vec![0.0; config.clusters * n];
    for (c, group) in members.iter().enumerate() {
        let dst = &mut centroids[c * n..(c + 1) * n];
        for &i in group {
            for (x, y) in dst.iter_mut().zip(&cls_scores.data()[i * n..(i + 1) * n]) {
                *x += y;
            }
        }
        dst.iter_mut().for_each(|x| *x /= group.len() as f64);
    }
    let centroids = Tensor::from_parts(vec![config.clusters, n], centroids);
    let selected_tokens = centroids
        .data()
        .chunks_exact(n)
        .map(|c| top_tokens(c, config.tokens))
        .collect();
    Ok(MergePlan {
        assignments: clustering.assignments,
        centroids,
        selected_tokens,
        cluster_sizes: members.iter().map(Vec::len).collect(),
    })
}

/// Full client-side compression of one batch.
pub fn encode(
    activations: &Tensor,
    cls_scores: &Tensor,
    labels: &[usize],
    classes: usize,
    config: &AdcConfig,
) -> Result<(AdcBatch, MergePlan)> {
    let plan = plan(activations, cls_scores, config)?;
    let features = apply_plan(activations, &plan)?;
    let (_, soft_labels) = merge_batch(activations, labels, classes, &plan)?;
    Ok((AdcBatch { features, soft_labels }, plan))
}

/// The linear map `merge_batch` followed by token selection, for a fixed
/// plan.
pub fn apply_plan(activations: &Tensor, plan: &MergePlan) -> Result<Tensor> {
    let (b, n, d) = expect_activations(activations)?;
    if plan.batch() != b || plan.centroids.shape()[1] != n {
        return Err(Error::shape(
            "apply_plan",
            format!("plan for [{}, {}] applied to {:?}", plan.batch(), plan.centroids.shape()[1], activations.shape()),
        ));
    }
    let members = plan.members();
    let k = plan.selected_tokens[0].len();
    let mut out = vec![0.0; plan.clusters() * k * d];
    for (c, group) in members.iter().enumerate() {
        let size = group.len() as f64;
        for (slot, &tok) in plan.selected_tokens[c].iter().enumerate() {
            let dst = &mut out[(c * k + slot) * d..(c * k + slot + 1) * d];
            for &i in group {
                for (x, y) in dst.iter_mut().zip(&activations.data()[(i * n + tok) * d..]) {
                    *x += y;
                }
            }
            dst.iter_mut().for_each(|x| *x /= size);
        }
    }
    Ok(Tensor::from_parts(vec![plan.clusters(), k, d], out))
}

/// Adjoint of [`apply_plan`]: maps a `[T, k, d]` gradient back to `[B, n, d]`.
pub fn unmerge_gradient(grad: &Tensor, plan: &MergePlan, tokens: usize) -> Result<Tensor> {
    let (t, k, d) = expect_activations(grad)?;
    if t != plan.clusters() || plan.selected_tokens.iter().any(|s| s.len() != k) {
        return Err(Error::shape(
            "unmerge_gradient",
            format!(
                "gradient {:?} for a plan with {} clusters of {} tokens",
                grad.shape(),
                plan.clusters(),
                plan.selected_tokens[0].len()
            ),
        ));
    }
    let b = plan.batch();
    let mut out = vec![0.0; b * tokens * d];
    for (i, &c) in plan.assignments.iter().enumerate() {
        let size = plan.cluster_sizes[c] as f64;
        for (slot, &tok) in plan.selected_tokens[c].iter().enumerate() {
            let src = &grad.data()[(c * k + slot) * d..(c * k + slot + 1) * d];
            let dst = &mut out[(i * tokens + tok) * d..(i * tokens + tok + 1) * d];
            for (x, y) in dst.iter_mut().zip(src) {
                *x = y / size;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, tokens, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan_from(assignments: Vec<usize>, selected: Vec<Vec<usize>>, n: usize) -> MergePlan {
        let t = selected.len();
        let mut sizes = vec![0; t];
        for &c in &assignments {
            sizes[c] += 1;
        }
        MergePlan {
            assignments,
            centroids: Tensor::full(&[t, n], 1.0 / n as f64),
            selected_tokens: selected,
            cluster_sizes: sizes,
        }
    }

    #[test]
    fn soft_labels_count_members() {
        let acts = Tensor::zeros(&[3, 2, 1]);
        let plan = plan_from(vec![0, 0, 0], vec![vec![0, 1]], 2);
        let (_, y) = merge_batch(&acts, &[2, 2, 5], 6, &plan).unwrap();
        let expected = [0.0, 0.0, 2.0 / 3.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_clusters_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acts = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let plan = plan_from(vec![0, 1, 2], vec![vec![0, 1, 2, 3]; 3], 4);
        let (f, y) = merge_batch(&acts, &[1, 0, 2], 3, &plan).unwrap();
        assert_eq!(f, acts);
        assert_eq!(y.data(), &[0., 1., 0., 1., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn pair_cluster_averages() {
        let acts = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 5.0, 4.0, -3.0]).unwrap();
        let plan = plan_from(vec![0, 0], vec![vec![0]], 1);
        let (f, _) = merge_batch(&acts, &[0, 1], 2, &plan).unwrap();
        assert_eq!(f.data(), &[3.0, 3.0, 0.0]);
    }

    #[test]
    fn merge_rejects_empty_cluster() {
        let acts = Tensor::zeros(&[2, 1, 1]);
        let mut plan = plan_from(vec![0, 0], vec![vec![0], vec![0]], 1);
        plan.cluster_sizes = vec![2, 0];
        assert!(matches!(merge_batch(&acts, &[0, 0], 1, &plan), Err(Error::Contract(_))));
    }

    #[test]
    fn token_choice_examples() {
        assert_eq!(top_tokens(&[0.5, 0.1, 0.4], 2), vec![0, 2]);
        assert_eq!(top_tokens(&[0.4, 0.3, 0.3], 2), vec![0, 1]);
        assert_eq!(top_tokens(&[0.9, 0.05, 0.05], 1), vec![0]);
        assert_eq!(top_tokens(&[0.1, 0.2, 0.3, 0.4], 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn select_all_tokens_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
        let c = Tensor::uniform(&[2, 5], 0.0, 1.0, &mut rng);
        let (kept, idx) = select_tokens(&f, &c, 5).unwrap();
        assert_eq!(kept, f);
        assert_eq!(idx, vec![vec![0, 1, 2, 3, 4]; 2]);
    }

    #[test]
    fn merge_vector_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acts = Tensor::randn(&[4, 3, 2], 1.0, &mut rng);
        let scores = Tensor::uniform(&[4, 3], 0.0, 1.0, &mut rng);
        assert_eq!(merge_vector(&acts, &scores, MergeVector::ClsScore).unwrap(), scores);
        let cls = merge_vector(&acts, &scores, MergeVector::ClsToken).unwrap();
        for b in 0..4 {
            for j in 0..2 {
                assert_eq!(cls.data()[b * 2 + j], acts.data()[b * 6 + j]);
            }
        }
        let constant = Tensor::full(&[4, 3, 2], 0.75);
        let avg = merge_vector(&constant, &scores, MergeVector::AvgToken).unwrap();
        assert!(avg.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn unmerge_scales_by_cluster_size() {
        let plan = plan_from(vec![0, 0, 1], vec![vec![0, 2], vec![0, 1]], 3);
        let g = Tensor::new(vec![2, 2, 1], vec![4.0, 6.0, 1.0, 2.0]).unwrap();
        let back = unmerge_gradient(&g, &plan, 3).unwrap();
        assert_eq!(back.data(), &[2.0, 0.0, 3.0, 2.0, 0.0, 3.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn balanced_configuration() {
        let c = AdcConfig::balanced(0.25, 32, 17).unwrap();
        assert_eq!((c.clusters, c.tokens), (16, 9));
        let c = AdcConfig::balanced(1.0, 32, 17).unwrap();
        assert_eq!((c.clusters, c.tokens), (32, 17));
        let c = AdcConfig::balanced(1e-6, 32, 17).unwrap();
        assert_eq!((c.clusters, c.tokens), (1, 1));
        assert!(AdcConfig::balanced(0.0, 32, 17).is_err());
        assert!(AdcConfig::balanced(1.5, 32, 17).is_err());
    }

    #[test]
    fn batch_128_half_clusters_half_tokens() {
        let n = 18;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let acts = Tensor::randn(&[128, n, 4], 1.0, &mut rng);
        let scores = crate::tensor::softmax_rows(&Tensor::randn(&[128, n], 1.0, &mut rng));
        let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
        let cfg = AdcConfig {
            clusters: 64,
            tokens: n / 2,
            merge_vector: MergeVector::ClsScore,
            kmeans: KMeansParams::default(),
        };
        let (batch, plan) = encode(&acts, &scores, &labels, 10, &cfg).unwrap();
        assert_eq!(batch.features.len(), 128 * n * 4 / 4);
        assert!(plan.cluster_sizes.iter().all(|&s| s > 0));
        assert_eq!(plan.cluster_sizes.iter().sum::<usize>(), 128);
    }
}
