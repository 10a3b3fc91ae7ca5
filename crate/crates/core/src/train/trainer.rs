use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Optimizer;
use super::densify::{densify_and_prune, DensifyAccum, DensifyStats};
use super::gradients::{evaluate, render_view};
use super::losses::LossBreakdown;
use super::{SupervisionFrame, TrainingConfig};
use crate::buffer::psnr;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{SceneGraph, WeatherLabel};

/// Relative loss increase after densification that is worth a warning.
const DENSIFY_WARN_TOLERANCE: f64 = 0.05;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub frame: usize,
    pub weather: WeatherLabel,
    pub loss: LossBreakdown,
    pub psnr: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "step={} frame={} weather={} total={:.6e} rgb={:.6e} content={:.6e} depth={:.6e} opacity={:.6e} reg={:.6e} psnr={:.3}",
            self.step, self.frame, self.weather, l.total, l.rgb, l.content, l.depth, l.opacity, l.regularization, self.psnr
        )
    }
}

/// Stateful optimizer loop over a set of supervision frames.
pub struct Trainer {
    pub graph: SceneGraph,
    pub config: TrainingConfig,
    frames: Vec<SupervisionFrame>,
    /// View → position of its raw target in `frames`.
    raw: HashMap<usize, usize>,
    optimizer: Optimizer,
    accum: DensifyAccum,
    rng: ChaCha8Rng,
    step: usize,
    extent: f64,
    pub densify_log: Vec<(usize, DensifyStats)>,
}

impl Trainer {
    /// Validates the supervision against the graph and prepares the state.
    /// Held-out frames are ignored; frames of weathers outside
    /// `config.weathers` (when non-empty) are dropped.
    pub fn new(graph: SceneGraph, frames: &[SupervisionFrame], config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        graph.validate()?;
        let frames: Vec<SupervisionFrame> = frames
            .iter()
            .filter(|f| !f.held_out && (config.weathers.is_empty() || config.weathers.contains(&f.weather)))
            .cloned()
            .collect();
        if frames.is_empty() {
            return Err(Error::invalid("supervision", "no training frames"));
        }
        for f in &frames {
            f.validate()?;
            graph.decoder(&f.weather)?;
            if f.frame >= graph.frame_count {
                return Err(Error::Range {
                    what: "supervision frame",
                    index: f.frame,
                    len: graph.frame_count,
                });
            }
        }
        let present: BTreeSet<&WeatherLabel> = frames.iter().map(|f| &f.weather).collect();
        if let Some(w) = config.weathers.iter().find(|w| !present.contains(w)) {
            return Err(Error::invalid("supervision", format!("no frames for weather `{w}`")));
        }
        let raw = frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.weather.is_raw())
            .map(|(i, f)| (f.view, i))
            .collect();
        let extent = scene_extent(&graph, &frames);
        Ok(Self {
            optimizer: Optimizer::new(&graph, config.lr),
            accum: DensifyAccum::new(&graph),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            extent,
            densify_log: Vec::new(),
            raw,
            frames,
            graph,
            config,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn frames(&self) -> &[SupervisionFrame] {
        &self.frames
    }

    /// Runs one optimization step on a uniformly sampled frame.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.rng.random_range(0..self.frames.len());
        let frame = &self.frames[k];
        let raw = self.raw.get(&frame.view).map(|&i| &self.frames[i].image);
        let eval = evaluate(&self.graph, frame, raw, &self.config, true)?;
        let grads = eval.grads.as_ref().expect("gradients requested");
        self.accum.add(grads);
        self.optimizer.step(&mut self.graph, grads)?;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            frame: frame.frame,
            weather: frame.weather.clone(),
            loss: eval.loss,
            psnr: psnr(&eval.rgb, &frame.image)?,
        };

        if self.config.densify_at(self.step) {
            self.densify(k)?;
        }
        Ok(record)
    }

    fn densify(&mut self, k: usize) -> Result<()> {
        let frame = &self.frames[k];
        let raw = self.raw.get(&frame.view).map(|&i| &self.frames[i].image);
        let before = evaluate(&self.graph, frame, raw, &self.config, false)?.loss.total;
        let (stats, remaps) = densify_and_prune(&mut self.graph, &mut self.accum, &self.config, self.extent, &mut self.rng);
        for r in &remaps {
            let frames = self.graph.node(r.node).offsets.len();
            self.optimizer.remap_node(r.node, &r.mapping, r.old_len, frames);
        }
        let after = evaluate(&self.graph, frame, raw, &self.config, false)?.loss.total;
        log::info!(
            "step {}: densify cloned={} split={} pruned={} loss {before:.6e} -> {after:.6e}",
            self.step,
            stats.cloned,
            stats.split,
            stats.pruned
        );
        if after > before * (1.0 + DENSIFY_WARN_TOLERANCE) {
            log::warn!("step {}: densification raised the loss from {before:.6e} to {after:.6e}", self.step);
        }
        self.densify_log.push((self.step, stats));
        Ok(())
    }

    /// Runs `n` steps, handing each record to `sink`.
    pub fn run(&mut self, n: usize, mut sink: impl FnMut(&StepRecord)) -> Result<()> {
        for _ in 0..n {
            let r = self.step()?;
            sink(&r);
        }
        Ok(())
    }

    pub fn into_graph(self) -> SceneGraph {
        self.graph
    }
}

/// Trains `graph` for `config.iterations` steps and returns it with the log.
pub fn train(
    graph: SceneGraph,
    frames: &[SupervisionFrame],
    config: &TrainingConfig,
) -> Result<(SceneGraph, Vec<StepRecord>)> {
    let mut t = Trainer::new(graph, frames, config.clone())?;
    let mut log = Vec::with_capacity(config.iterations);
    t.run(config.iterations, |r| log.push(r.clone()))?;
    Ok((t.into_graph(), log))
}

/// PSNR of the graph's render of `frame` against its target.
pub fn view_psnr(graph: &SceneGraph, frame: &SupervisionFrame, parallel: bool) -> Result<f64> {
    let (rgb, _) = render_view(graph, frame, parallel)?;
    psnr(&rgb, &frame.image)
}

/// Scale used by the densification thresholds: the larger of the camera
/// spread (1.1 × largest distance from the mean center) and half the
/// diagonal of the trainable Gaussians' bounding box. Street captures move
/// the camera far less than the scene is wide, so the spread alone would
/// prune most of the scene.
pub fn scene_extent(graph: &SceneGraph, frames: &[SupervisionFrame]) -> f64 {
    let centers: Vec<Vec3> = frames.iter().map(|f| f.camera.center()).collect();
    let mut spread = 0.0;
    if !centers.is_empty() {
        let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
        spread = 1.1 * centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for r in graph.node_refs() {
        for g in &graph.node(r).gaussians {
            lo = lo.inf(&g.position);
            hi = hi.sup(&g.position);
        }
    }
    let half_diag = 0.5 * (hi - lo).norm();
    let e = if half_diag.is_finite() { spread.max(half_diag) } else { spread };
    if e > 1e-6 {
        e
    } else {
        1.0
    }
}
