//! Online photometric optimization with the keyframe maintenance schedule:
//! keyframes get `m` iterations, other frames get `n` plus one iteration
//! each for the first `m - n` keyframes of a shuffled replay list, keeping
//! the per-frame budget constant while mitigating forgetting. A post-scan
//! global phase sweeps the whole keyframe list.

use image::RgbImage;
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::gaussians::GaussianMap;
use crate::geometry::{Intrinsics, Pose};
use crate::metrics::FloatImage;
use crate::renderer::{self, Gradients, RenderOptions, RenderedFrame};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum OptimError {
    #[error("cannot optimize an empty map")]
    NoGaussians,
    #[error(transparent)]
    Render(#[from] renderer::RenderError),
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    /// Iterations for keyframes.
    pub iters_keyframe: usize,
    /// Iterations for non-keyframes.
    pub iters_non_keyframe: usize,
    /// New-Gaussian count that promotes a frame to keyframe (strict >).
    pub kf_threshold: usize,
    /// Post-scan passes over the keyframe list.
    pub global_iters: usize,
    /// Store every frame in the keyframe list regardless of threshold.
    pub all_frames_keyframes: bool,
    /// Random keyframe replay. When disabled, every frame receives the
    /// full keyframe iteration count instead (the ablation baseline).
    pub random_replay: bool,
    pub lr_position: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters_keyframe: 5,
            iters_non_keyframe: 3,
            kf_threshold: 50,
            global_iters: 10,
            all_frames_keyframes: false,
            random_replay: true,
            lr_position: 2e-4,
            lr_sh: 2.5e-3,
            lr_opacity: 5e-2,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iters_keyframe < self.iters_non_keyframe {
            return Err(format!(
                "iters_keyframe ({}) must be >= iters_non_keyframe ({})",
                self.iters_keyframe, self.iters_non_keyframe
            ));
        }
        Ok(())
    }
}

/// The retained payload of a keyframe: enough to replay its photometric
/// loss later (depth is not needed for optimization).
#[derive(Debug, Clone)]
pub struct OptTarget {
    pub frame_index: usize,
    pub rgb: RgbImage,
    pub pose: Pose,
}

impl OptTarget {
    pub fn from_frame(frame: &crate::dataset::Frame) -> Self {
        Self {
            frame_index: frame.index,
            rgb: frame.rgb.clone(),
            pose: frame.pose,
        }
    }
}

/// Frames retained for replay, with the counts that promoted them.
#[derive(Debug, Clone, Default)]
pub struct KeyframeList {
    entries: Vec<Keyframe>,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub target: OptTarget,
    pub new_gaussians: usize,
    pub insertion_index: usize,
}

impl KeyframeList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Keyframe] {
        &self.entries
    }

    fn push(&mut self, target: OptTarget, new_gaussians: usize) {
        debug_assert!(
            !self.entries.iter().any(|e| e.target.frame_index == target.frame_index),
            "frame already retained"
        );
        let insertion_index = self.entries.len();
        self.entries.push(Keyframe {
            target,
            new_gaussians,
            insertion_index,
        });
    }
}

/// One loss measurement, for the CSV trace.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossSample {
    pub frame_index: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Online,
    Replay,
    Global,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Online => write!(f, "online"),
            Phase::Replay => write!(f, "replay"),
            Phase::Global => write!(f, "global"),
        }
    }
}

/// Outcome of processing one frame through the schedule.
#[derive(Debug, Clone)]
pub struct FrameReport {
    pub frame_index: usize,
    pub is_keyframe: bool,
    pub iterations_on_frame: usize,
    pub replay_iterations: usize,
    pub final_loss: Option<f64>,
    pub samples: Vec<LossSample>,
}

/// Mean L1 loss and its gradient image (vector-Jacobian seed).
pub fn l1_loss(rendered: &RenderedFrame, target: &FloatImage) -> (f64, Vec<Vector3<f64>>) {
    let mut grad = Vec::new();
    let loss = l1_loss_into(rendered, target, &mut grad);
    (loss, grad)
}

/// [`l1_loss`] writing the gradient into a reusable buffer.
pub fn l1_loss_into(
    rendered: &RenderedFrame,
    target: &FloatImage,
    grad: &mut Vec<Vector3<f64>>,
) -> f64 {
    debug_assert_eq!(rendered.color.len(), target.data.len());
    let n = (rendered.color.len() * 3) as f64;
    let mut loss = 0.0;
    grad.clear();
    grad.reserve(rendered.color.len());
    for (c, t) in rendered.color.iter().zip(&target.data) {
        let diff = c - t;
        loss += diff.x.abs() + diff.y.abs() + diff.z.abs();
        grad.push(Vector3::new(
            diff.x.signum() / n,
            diff.y.signum() / n,
            diff.z.signum() / n,
        ));
    }
    loss / n
}

/// One Adam update over every parameter group, followed by quaternion
/// renormalization and scale clamping.
pub fn adam_step(map: &mut GaussianMap, grads: &Gradients, config: &OptimConfig) {
    map.step_count += 1;
    let t = map.step_count as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let b1 = config.beta1;
    let b2 = config.beta2;
    let eps = config.epsilon;
    let coeff_count = map.coeff_count();

    // Split borrows: moments buffers are updated alongside the parameters.
    let mut moments = std::mem::take(&mut map.moments);
    {
        let gaussians = map.gaussians_mut();
        let update = |theta: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (gi, gaussian) in gaussians.iter_mut().enumerate() {
            for axis in 0..3 {
                update(
                    &mut gaussian.position[axis],
                    grads.position[gi][axis],
                    &mut moments.m_position[gi][axis],
                    &mut moments.v_position[gi][axis],
                    config.lr_position,
                );
                update(
                    &mut gaussian.log_scale[axis],
                    grads.log_scale[gi][axis],
                    &mut moments.m_log_scale[gi][axis],
                    &mut moments.v_log_scale[gi][axis],
                    config.lr_log_scale,
                );
            }
            for ci in 0..4 {
                update(
                    &mut gaussian.rotation[ci],
                    grads.rotation[gi][ci],
                    &mut moments.m_rotation[gi][ci],
                    &mut moments.v_rotation[gi][ci],
                    config.lr_rotation,
                );
            }
            update(
                &mut gaussian.opacity_logit,
                grads.opacity_logit[gi],
                &mut moments.m_opacity[gi],
                &mut moments.v_opacity[gi],
                config.lr_opacity,
            );
            for k in 0..coeff_count {
                let idx = gi * coeff_count + k;
                for ch in 0..3 {
                    update(
                        &mut gaussian.sh[k][ch],
                        grads.sh[idx][ch],
                        &mut moments.m_sh[idx][ch],
                        &mut moments.v_sh[idx][ch],
                        config.lr_sh,
                    );
                }
            }
            gaussian.reproject_parameters();
        }
    }
    map.moments = moments;
}

/// Run `iterations` optimization rounds of a map against one target frame.
/// With zero iterations the map is untouched and the current loss is
/// returned.
pub fn step(
    map: &mut GaussianMap,
    target: &OptTarget,
    k: &Intrinsics,
    render_options: &RenderOptions,
    config: &OptimConfig,
    iterations: usize,
) -> Result<f64, OptimError> {
    let trace = step_traced(map, target, k, render_options, config, iterations)?;
    Ok(*trace.last().expect("step_traced yields at least one loss"))
}

/// Like [`step`] but returns the loss of every iteration (a single current
/// loss when `iterations` is zero).
pub fn step_traced(
    map: &mut GaussianMap,
    target: &OptTarget,
    k: &Intrinsics,
    render_options: &RenderOptions,
    config: &OptimConfig,
    iterations: usize,
) -> Result<Vec<f64>, OptimError> {
    if map.is_empty() {
        return Err(OptimError::NoGaussians);
    }
    let target_image = FloatImage::from_rgb8(&target.rgb);
    if iterations == 0 {
        let rendered = renderer::render(map, &target.pose, k, render_options);
        return Ok(vec![l1_loss(&rendered, &target_image).0]);
    }
    let mut losses = Vec::with_capacity(iterations);
    let mut grad_image = Vec::new();
    for _ in 0..iterations {
        let (rendered, state) =
            renderer::render_with_state(map, &target.pose, k, render_options);
        losses.push(l1_loss_into(&rendered, &target_image, &mut grad_image));
        let grads = renderer::render_backward(map, &target.pose, k, &grad_image, &state)?;
        adam_step(map, &grads, config);
    }
    Ok(losses)
}

/// Schedule state across a run: the keyframe list and the replay RNG.
pub struct OnlineOptimizer {
    pub config: OptimConfig,
    pub render_options: RenderOptions,
    intrinsics: Intrinsics,
    keyframes: KeyframeList,
    rng: StdRng,
}

impl OnlineOptimizer {
    pub fn new(config: OptimConfig, render_options: RenderOptions, k: Intrinsics) -> Self {
        let rng = StdRng::seed_from_u64(config.seed);
        Self {
            config,
            render_options,
            intrinsics: k,
            keyframes: KeyframeList::default(),
            rng,
        }
    }

    pub fn keyframes(&self) -> &KeyframeList {
        &self.keyframes
    }

    /// Apply the m/n schedule to one frame whose initialization produced
    /// `new_gaussians` splats.
    pub fn process_frame(
        &mut self,
        map: &mut GaussianMap,
        target: OptTarget,
        new_gaussians: usize,
    ) -> Result<FrameReport, OptimError> {
        let frame_index = target.frame_index;
        let is_keyframe = new_gaussians > self.config.kf_threshold;
        let m = self.config.iters_keyframe;
        let n = self.config.iters_non_keyframe;

        let mut report = FrameReport {
            frame_index,
            is_keyframe,
            iterations_on_frame: 0,
            replay_iterations: 0,
            final_loss: None,
            samples: Vec::new(),
        };
        if map.is_empty() {
            // Nothing to optimize yet (e.g. a frame with no valid depth at
            // the very start); the list still tracks keyframes.
            if is_keyframe || self.config.all_frames_keyframes {
                self.keyframes.push(target, new_gaussians);
            }
            return Ok(report);
        }

        if is_keyframe {
            let loss = self.run_iterations(map, &target, m, Phase::Online, &mut report)?;
            report.iterations_on_frame = m;
            report.final_loss = loss;
            self.keyframes.push(target, new_gaussians);
        } else if !self.config.random_replay {
            // Ablation mode: the full budget goes to the current frame.
            let loss = self.run_iterations(map, &target, m, Phase::Online, &mut report)?;
            report.iterations_on_frame = m;
            report.final_loss = loss;
            if self.config.all_frames_keyframes {
                self.keyframes.push(target, new_gaussians);
            }
        } else {
            let loss = self.run_iterations(map, &target, n, Phase::Online, &mut report)?;
            report.iterations_on_frame = n;
            report.final_loss = loss;
            if self.config.all_frames_keyframes {
                self.keyframes.push(target, new_gaussians);
            }
            // Reserve the remaining budget for random keyframes: the first
            // (m - n) of the shuffled list get one iteration each.
            let replay_budget = m.saturating_sub(n);
            let mut order: Vec<usize> = (0..self.keyframes.len()).collect();
            order.shuffle(&mut self.rng);
            for &kf_idx in order.iter().take(replay_budget) {
                let kf_target = self.keyframes.entries[kf_idx].target.clone();
                self.run_iterations(map, &kf_target, 1, Phase::Replay, &mut report)?;
                report.replay_iterations += 1;
            }
        }
        Ok(report)
    }

    fn run_iterations(
        &mut self,
        map: &mut GaussianMap,
        target: &OptTarget,
        iterations: usize,
        phase: Phase,
        report: &mut FrameReport,
    ) -> Result<Option<f64>, OptimError> {
        if iterations == 0 {
            return Ok(None);
        }
        let losses = step_traced(
            map,
            target,
            &self.intrinsics,
            &self.render_options,
            &self.config,
            iterations,
        )?;
        for (it, loss) in losses.iter().enumerate() {
            report.samples.push(LossSample {
                frame_index: target.frame_index,
                phase,
                iteration: it,
                loss: *loss,
            });
        }
        Ok(losses.last().copied())
    }

    /// Post-scan optimization: each pass shuffles the keyframe list and runs
    /// one iteration per keyframe. Returns the mean loss of every pass.
    pub fn global_optimize(
        &mut self,
        map: &mut GaussianMap,
        iterations: usize,
    ) -> Result<(Vec<f64>, Vec<LossSample>), OptimError> {
        let mut pass_means = Vec::with_capacity(iterations);
        let mut samples = Vec::new();
        if map.is_empty() || self.keyframes.is_empty() {
            return Ok((pass_means, samples));
        }
        for pass in 0..iterations {
            let mut order: Vec<usize> = (0..self.keyframes.len()).collect();
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for &kf_idx in &order {
                let target = self.keyframes.entries[kf_idx].target.clone();
                let loss = step(
                    map,
                    &target,
                    &self.intrinsics,
                    &self.render_options,
                    &self.config,
                    1,
                )?;
                samples.push(LossSample {
                    frame_index: target.frame_index,
                    phase: Phase::Global,
                    iteration: pass,
                    loss,
                });
                total += loss;
            }
            pass_means.push(total / self.keyframes.len() as f64);
        }
        Ok((pass_means, samples))
    }

    /// Mean current loss over the keyframe list, without touching the map.
    pub fn mean_keyframe_loss(&self, map: &GaussianMap) -> Result<f64, OptimError> {
        if map.is_empty() || self.keyframes.is_empty() {
            return Err(OptimError::NoGaussians);
        }
        let mut total = 0.0;
        for kf in &self.keyframes.entries {
            let rendered =
                renderer::render(map, &kf.target.pose, &self.intrinsics, &self.render_options);
            let target = FloatImage::from_rgb8(&kf.target.rgb);
            total += l1_loss(&rendered, &target).0;
        }
        Ok(total / self.keyframes.len() as f64)
    }
}
