//! Gradient-driven densification and pruning.

use rand::Rng;
use rand_distr::StandardNormal;

use super::gradients::SceneGradients;
use super::TrainingConfig;
use crate::math::{quat_normalize, quat_to_rotation, Vec3};
use crate::scene::{GaussianPrimitive, NodeKind, NodeRef, SceneGraph};

/// Children of a split Gaussian shrink by this factor.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Per-Gaussian running sums of the screen-space positional gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyAccum {
    /// Aligned with [`SceneGraph::node_refs`]: `(sum, visible count)`.
    pub nodes: Vec<(NodeRef, Vec<(f64, u32)>)>,
}

impl DensifyAccum {
    pub fn new(graph: &SceneGraph) -> Self {
        Self {
            nodes: graph
                .node_refs()
                .into_iter()
                .map(|r| (r, vec![(0.0, 0); graph.node(r).len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, grads: &SceneGradients) {
        for ((_, acc), (_, g)) in self.nodes.iter_mut().zip(&grads.nodes) {
            for (a, (s, v)) in acc.iter_mut().zip(g.screen.iter().zip(&g.visible)) {
                if *v {
                    a.0 += s;
                    a.1 += 1;
                }
            }
        }
    }

    /// Mean gradient of Gaussian `i` of node slot `k` over the steps it was visible.
    pub fn mean(&self, k: usize, i: usize) -> f64 {
        let (s, n) = self.nodes[k].1[i];
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// How one node's Gaussians were rearranged: `mapping[j]` is the old index
/// that new Gaussian `j` continues, or `None` for a newly created one.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRemap {
    pub node: NodeRef,
    pub old_len: usize,
    pub mapping: Vec<Option<usize>>,
}

/// Whether a mean accumulated gradient triggers densification.
pub fn selected_for_densification(mean_grad: f64, config: &TrainingConfig) -> bool {
    mean_grad > config.densify_grad_threshold
}

/// Whether a Gaussian is removed: too transparent or too large.
pub fn should_prune(g: &GaussianPrimitive, extent: f64, config: &TrainingConfig) -> bool {
    let max_scale = g.log_scale.max().exp();
    g.opacity() < config.prune_opacity || max_scale > config.prune_max_scale * extent
}

/// Splits large and clones small Gaussians whose mean accumulated gradient
/// exceeds the threshold, prunes transparent or oversized ones, and resets
/// the accumulators. Returns per-node index remaps for the optimizer.
pub fn densify_and_prune<R: Rng + ?Sized>(
    graph: &mut SceneGraph,
    accum: &mut DensifyAccum,
    config: &TrainingConfig,
    extent: f64,
    rng: &mut R,
) -> (DensifyStats, Vec<NodeRemap>) {
    let mut stats = DensifyStats::default();
    let mut remaps = Vec::new();
    let split_above = config.prune_scale_threshold * extent;
    for (k, r) in graph.node_refs().into_iter().enumerate() {
        let node = graph.node_mut(r);
        let old_len = node.len();
        let nonrigid = node.kind == NodeKind::NonRigid;
        let mut gaussians = Vec::with_capacity(old_len);
        let mut mapping = Vec::with_capacity(old_len);
        let mut offsets: Vec<Vec<Vec3>> = vec![Vec::with_capacity(old_len); node.offsets.len()];
        let mut push = |g: GaussianPrimitive, src: Option<usize>, parent: usize, gaussians: &mut Vec<GaussianPrimitive>| {
            gaussians.push(g);
            mapping.push(src);
            if nonrigid {
                for (f, o) in offsets.iter_mut().enumerate() {
                    o.push(node.offsets[f][parent]);
                }
            }
        };
        for (i, g) in node.gaussians.iter().enumerate() {
            if should_prune(g, extent, config) {
                stats.pruned += 1;
                continue;
            }
            let mean = accum.mean(k, i);
            if !selected_for_densification(mean, config) {
                push(g.clone(), Some(i), i, &mut gaussians);
                continue;
            }
            let scale = g.scale();
            if scale.max() > split_above {
                stats.split += 1;
                let rot = quat_to_rotation(&quat_normalize(&g.rotation));
                for _ in 0..2 {
                    let xi = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let mut child = g.clone();
                    child.position = g.position + rot * scale.component_mul(&xi);
                    child.log_scale = g.log_scale.map(|s| s - SPLIT_SCALE_DIVISOR.ln());
                    push(child, None, i, &mut gaussians);
                }
            } else {
                stats.cloned += 1;
                push(g.clone(), Some(i), i, &mut gaussians);
                push(g.clone(), None, i, &mut gaussians);
            }
        }
        node.gaussians = gaussians;
        if nonrigid {
            node.offsets = offsets;
        }
        remaps.push(NodeRemap {
            node: r,
            old_len,
            mapping,
        });
    }
    *accum = DensifyAccum::new(graph);
    (stats, remaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{logit, QUAT_IDENTITY};
    use crate::scene::{GaussianNode, Pose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prim(opacity: f64, log_scale: f64) -> GaussianPrimitive {
        GaussianPrimitive::new(Vec3::zeros(), Vec3::repeat(log_scale), QUAT_IDENTITY, logit(opacity))
    }

    fn run(prims: Vec<GaussianPrimitive>, grads: &[f64]) -> (SceneGraph, DensifyStats, Vec<NodeRemap>) {
        let mut g = SceneGraph::new(1);
        g.background = GaussianNode::background(prims);
        let mut acc = DensifyAccum::new(&g);
        for (a, v) in acc.nodes[0].1.iter_mut().zip(grads) {
            *a = (*v, 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, m) = densify_and_prune(&mut g, &mut acc, &TrainingConfig::default(), 10.0, &mut rng);
        assert!(acc.nodes[0].1.iter().all(|a| *a == (0.0, 0)));
        (g, s, m)
    }

    #[test]
    fn threshold_selects() {
        let c = TrainingConfig::default();
        assert!(selected_for_densification(4e-4, &c));
        assert!(!selected_for_densification(2e-4, &c));
    }

    #[test]
    fn small_selected_gaussian_is_cloned() {
        let (g, s, m) = run(vec![prim(0.5, (0.01f64).ln()), prim(0.5, (0.01f64).ln())], &[4e-4, 2e-4]);
        assert_eq!(s, DensifyStats { cloned: 1, split: 0, pruned: 0 });
        assert_eq!(g.background.len(), 3);
        assert_eq!(m[0].mapping, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn large_selected_gaussian_is_split() {
        let (g, s, m) = run(vec![prim(0.5, (0.5f64).ln())], &[1.0]);
        assert_eq!(s.split, 1);
        assert_eq!(m[0].mapping, vec![None, None]);
        for c in &g.background.gaussians {
            assert!((c.scale().x - 0.5 / 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_gaussian_is_pruned_regardless_of_gradient() {
        let (g, s, _) = run(vec![prim(0.001, -3.0), prim(0.5, -3.0)], &[1.0, 0.0]);
        assert_eq!(s.pruned, 1);
        assert_eq!(g.background.len(), 1);
    }

    #[test]
    fn nonrigid_children_inherit_offsets() {
        let mut g = SceneGraph::new(2);
        let mut n = GaussianNode::nonrigid("p", vec![prim(0.5, -4.0)], vec![Pose::identity(); 2]);
        n.offsets[1][0] = Vec3::new(0.0, 1.0, 0.0);
        let r = g.add_nonrigid(n).unwrap();
        let mut acc = DensifyAccum::new(&g);
        acc.nodes[1].1[0] = (1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        densify_and_prune(&mut g, &mut acc, &TrainingConfig::default(), 10.0, &mut rng);
        let node = g.node(r);
        assert_eq!(node.len(), 2);
        assert_eq!(node.offsets[1], vec![Vec3::new(0.0, 1.0, 0.0); 2]);
    }
}
