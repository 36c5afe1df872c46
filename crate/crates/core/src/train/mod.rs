//! Optimisation loop: deform, rasterize, compare, step, densify.

pub mod checkpoint;
pub mod densify;
pub mod reanimate;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, LrSchedule, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::{Dataset, Split};
use crate::deform::{DeformationConfig, DeformationField, Deformed, FrameDrive, GaussianVars, PriorCache, PriorMode, SceneBox};
use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::losses::{self, LossTerms, LossVars, LossWeights};
use crate::mesh::{KdTree, MorphableMesh};
use crate::raster::op::{rasterize, RasterOp};
use crate::scene::{logit, to_f32_grid, Camera, GaussianCloud, SourceTag};

pub use densify::{densify_and_prune, DensifyReport};
pub use reanimate::{reanimate, CameraRef, DriveEntry};

/// ParamIds of the Gaussian tensors start here; field tensors start at 0.
pub const GAUSS_PARAM_BASE: usize = 1 << 20;
pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_GRAY: f64 = 0.5;

/// Gaussian tensor names and widths, in checkpoint order.
pub const GAUSS_TENSORS: [(&str, usize); 5] =
    [("positions", 3), ("rotations", 4), ("log_scales", 3), ("opacity_logits", 1), ("colors", 3)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGroups {
    pub position: LrSchedule,
    pub network: LrSchedule,
    pub opacity: LrSchedule,
    pub scale: LrSchedule,
    pub rotation: LrSchedule,
    pub color: LrSchedule,
}

impl Default for LrGroups {
    fn default() -> Self {
        LrGroups {
            position: LrSchedule { lr_start: 7e-4, lr_end: 8e-6, decay_steps: 20_000 },
            network: LrSchedule { lr_start: 5e-4, lr_end: 1e-5, decay_steps: 40_000 },
            opacity: LrSchedule::constant(0.05),
            scale: LrSchedule::constant(5e-3),
            rotation: LrSchedule::constant(1e-3),
            color: LrSchedule::constant(2.5e-3),
        }
    }
}

impl LrGroups {
    fn for_gauss(&self, name: &str) -> &LrSchedule {
        match name {
            "positions" => &self.position,
            "rotations" => &self.rotation,
            "log_scales" => &self.scale,
            "opacity_logits" => &self.opacity,
            _ => &self.color,
        }
    }

    pub fn at(&self, step: u64) -> BTreeMap<String, f64> {
        [
            ("position", &self.position),
            ("network", &self.network),
            ("opacity", &self.opacity),
            ("scale", &self.scale),
            ("rotation", &self.rotation),
            ("color", &self.color),
        ]
        .iter()
        .map(|(n, s)| (n.to_string(), s.lr_at(step)))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub densify_until: u64,
    pub densify_interval: u64,
    pub densify_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub split_scale_fraction: f64,
    /// Densification stops adding Gaussians beyond this count.
    pub max_gaussians: usize,
    pub seed: u64,
    pub prior_mode: PriorMode,
    pub loss_weights: LossWeights,
    pub lr: LrGroups,
    pub mlp_hidden: usize,
    pub triplane_resolution: usize,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5_000,
            densify_until: 1_250,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity_threshold: 5e-3,
            split_scale_fraction: 0.01,
            max_gaussians: 2_500,
            seed: 0,
            prior_mode: PriorMode::Learnable,
            loss_weights: LossWeights::default(),
            lr: LrGroups::default(),
            mlp_hidden: 64,
            triplane_resolution: 64,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.densify_until > self.iterations {
            return Err(Error::Argument(format!(
                "densify_until ({}) must not exceed iterations ({})",
                self.densify_until, self.iterations
            )));
        }
        if self.densify_interval == 0 {
            return Err(Error::Argument("densify_interval must be positive".into()));
        }
        self.loss_weights.validate()
    }
}

/// Everything needed to render a rig state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    /// Prior data for each Gaussian, fixed at creation.
    pub cache: PriorCache,
}

impl Model {
    pub fn gauss_params(&self) -> ParamStore {
        let c = &self.cloud;
        let mut s = ParamStore::new(GAUSS_PARAM_BASE);
        s.insert("positions", Tensor::from_rows(&c.positions));
        s.insert("rotations", Tensor::from_rows(&c.rotations));
        s.insert("log_scales", Tensor::from_rows(&c.log_scales));
        s.insert("opacity_logits", Tensor { rows: c.len(), cols: 1, data: c.opacity_logits.clone() });
        s.insert("colors", Tensor::from_rows(&c.colors));
        s
    }

    fn store_gauss_params(&mut self, s: &ParamStore) -> Result<()> {
        let c = &mut self.cloud;
        c.positions = s.require("positions")?.to_rows();
        c.rotations = s.require("rotations")?.to_rows();
        c.log_scales = s.require("log_scales")?.to_rows();
        c.opacity_logits = s.require("opacity_logits")?.data.clone();
        c.colors = s.require("colors")?.to_rows();
        Ok(())
    }

    /// Records the full forward pass and returns the image variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        gauss: &ParamStore,
        mesh: &MorphableMesh,
        drive: &FrameDrive,
        camera: &Camera,
    ) -> Result<(Var, Deformed)> {
        let positions = gauss.bind(tape, "positions")?;
        let raw_rot = gauss.bind(tape, "rotations")?;
        let rotations = tape.quat_normalize(raw_rot)?;
        let log_scales = gauss.bind(tape, "log_scales")?;
        let logits = gauss.bind(tape, "opacity_logits")?;
        let opacity = tape.sigmoid(logits);
        let colors = gauss.bind(tape, "colors")?;
        let d = self.field.deform(tape, mesh, GaussianVars { positions, rotations, log_scales }, &self.cache, drive)?;
        let image = rasterize(tape, camera, [d.positions, d.rotations, d.log_scales, opacity, colors])?;
        Ok((image, d))
    }

    /// Renders one rig state. `frame` selects a per-frame code; `None` means T = 0.
    pub fn render(
        &self,
        mesh: &MorphableMesh,
        gamma_exp: &[f64],
        gamma_pose: [f64; 4],
        frame: Option<usize>,
        camera: &Camera,
    ) -> Result<Image> {
        if gamma_exp.len() != mesh.expression_count() {
            return Err(Error::Argument(format!(
                "expression vector has {} entries, the rig expects {}",
                gamma_exp.len(),
                mesh.expression_count()
            )));
        }
        let drive = FrameDrive::new(mesh, gamma_exp, gamma_pose, frame)?;
        let mut tape = Tape::new();
        let (img, _) = self.forward(&mut tape, &self.gauss_params(), mesh, &drive, camera)?;
        Image::from_data(camera.width, camera.height, tape.value(img).data.clone())
    }
}

/// Initial Gaussians: one per canonical vertex, then one per background point.
pub fn init_scene(dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let mesh = &dataset.mesh;
    let bg = &dataset.init_points;
    let mut points: Vec<[f64; 3]> = mesh.vertices_can().to_vec();
    points.extend_from_slice(&bg.positions);
    if points.len() < 4 {
        return Err(Error::Init(format!("need at least 4 initial points, got {}", points.len())));
    }
    let tree = KdTree::new(points.clone());
    let mut cloud = GaussianCloud::default();
    let nv = mesh.vertex_count();
    for (i, p) in points.iter().enumerate() {
        let r = tree.knn(p, 4);
        // skip the query point itself
        let d = r.distances.iter().skip(1).sum::<f64>() / (r.distances.len() - 1).max(1) as f64;
        let s = d.max(1e-7).ln();
        let (color, tag) = if i < nv {
            ([INIT_GRAY; 3], SourceTag::MeshSeeded)
        } else {
            let c = bg.colors.get(i - nv).copied().unwrap_or([INIT_GRAY; 3]);
            (c, SourceTag::Background)
        };
        cloud.push(*p, [1.0, 0.0, 0.0, 0.0], [s; 3], logit(INIT_OPACITY), color, tag);
    }
    cloud.quantize_f32();
    let scene_box = SceneBox::around(&points);
    let mut dcfg = DeformationConfig::for_mesh(mesh, config.prior_mode);
    dcfg.mlp_hidden = config.mlp_hidden;
    dcfg.triplane_resolution = config.triplane_resolution;
    dcfg.validate(mesh.vertex_count())?;
    let mut field = DeformationField::new(
        dcfg.clone(),
        scene_box,
        mesh.expression_count(),
        dataset.split(Split::Train),
        config.seed,
    )?;
    for (_, t) in field.params.iter_mut() {
        t.data.iter_mut().for_each(|v| *v = to_f32_grid(*v));
    }
    let cache = PriorCache::build(mesh, &dcfg, &cloud.positions)?;
    Ok(Model { cloud, field, cache })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub frame: usize,
    pub lr: BTreeMap<String, f64>,
    pub loss: LossTerms,
    pub total: f64,
    pub gaussians: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub frame: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub densify: Option<DensifyReport>,
}

/// Per-Gaussian screen-space gradient statistics for densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        GradStats { accum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed iterations.
    pub iteration: u64,
    pub stats: GradStats,
    pub scene_extent: f64,
    pub dataset_fingerprint: String,
    /// Camera table of the training dataset, kept for rendering from checkpoints.
    pub cameras: Vec<Camera>,
    vertex_cache: PriorCache,
    train_frames: Vec<usize>,
}

impl TrainState {
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = init_scene(dataset, &config)?;
        TrainState::from_model(dataset, config, model, Adam::new(), 0)
    }

    pub fn from_model(dataset: &Dataset, config: TrainConfig, model: Model, adam: Adam, iteration: u64) -> Result<Self> {
        let vertex_cache = PriorCache::build(&dataset.mesh, &model.field.config, dataset.mesh.vertices_can())?;
        let he = model.field.scene_box.half_extent;
        let scene_extent = 2.0 * (he[0] * he[0] + he[1] * he[1] + he[2] * he[2]).sqrt();
        let n = model.cloud.len();
        let train_frames = model.field.train_frames.clone();
        Ok(TrainState {
            config,
            model,
            adam,
            iteration,
            stats: GradStats::new(n),
            scene_extent,
            dataset_fingerprint: dataset.fingerprint().to_string(),
            cameras: dataset.manifest.cameras.clone(),
            vertex_cache,
            train_frames,
        })
    }

    /// Frame used at iteration `it`: uniform over the training split, seeded
    /// by `(seed, it)`.
    pub fn frame_for_iteration(&self, it: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ it.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.train_frames[rng.gen_range(0..self.train_frames.len())]
    }

    /// Loss terms and the gradient of the weighted total for one frame.
    pub fn evaluate_frame(&self, dataset: &Dataset, frame: usize) -> Result<(LossTerms, f64, Tape, Var, Var)> {
        let rec = dataset.frame(frame)?;
        let mesh = &dataset.mesh;
        let drive = FrameDrive::new(mesh, &rec.gamma_exp, rec.gamma_pose, Some(frame))?;
        let gauss = self.model.gauss_params();
        let mut tape = Tape::new();
        let (img, d) = self.model.forward(&mut tape, &gauss, mesh, &drive, &rec.camera)?;
        let l1 = losses::l1(&mut tape, img, &rec.image)?;
        let dssim = losses::dssim(&mut tape, img, &rec.image)?;
        let vdef = self.model.field.vertex_displacement(&mut tape, mesh, &self.vertex_cache, &drive, d.t)?;
        let flame = losses::flame_match(&mut tape, vdef, &drive.delta_v)?;
        let far = self.model.cache.far_rows();
        let (gdef, grot, gscale) = losses::far_field(&mut tape, d.def, d.r_star, d.s_raw, &far)?;
        let eta = match d.eta {
            Some(e) => losses::mean_sq_norm(&mut tape, e),
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let t = match d.t {
            Some(t) => losses::mean_sq_norm(&mut tape, t),
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let vars = LossVars { terms: [l1, dssim, flame, gdef, eta, t, grot, gscale] };
        let total_var = losses::weighted_sum(&mut tape, &vars, &self.config.loss_weights)?;
        let terms = losses::read_terms(&tape, &vars);
        let total = losses::total_loss(&terms, &self.config.loss_weights).map_err(|e| {
            Error::Training(format!("iteration {}: {e}; breakdown {}", self.iteration + 1, breakdown_json(&terms)))
        })?;
        Ok((terms, total, tape, total_var, img))
    }

    /// One forward/backward/update on the frame chosen for the next iteration.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepOutcome> {
        let frame = self.frame_for_iteration(self.iteration);
        self.train_step(dataset, frame)
    }

    /// One forward/backward/update on `frame`, followed by densification
    /// when the iteration count calls for it.
    pub fn train_step(&mut self, dataset: &Dataset, frame: usize) -> Result<StepOutcome> {
        if self.train_frames.binary_search(&frame).is_err() {
            return Err(Error::Argument(format!("frame {frame} is not in the training split")));
        }
        let it = self.iteration;
        let (terms, total, tape, total_var, img) = self.evaluate_frame(dataset, frame)?;
        let grads = tape.backward(total_var)?.params();

        if let Some(op) = tape.custom_op(img).and_then(|o| o.as_any().downcast_ref::<RasterOp>()) {
            let norms = op.mean2d_grad_norms();
            for s in op.splats() {
                let i = s.source_index;
                self.stats.accum[i] += norms[i];
                self.stats.count[i] += 1;
            }
        }

        let lr = &self.config.lr;
        let net_lr = lr.network.lr_at(it);
        let field = &mut self.model.field;
        let ids: Vec<ParamId> = field.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            if let Some(g) = grads.get(&id) {
                let name = format!("field.{}", field.params.name_of(id));
                let t = field.params.by_id_mut(id);
                self.adam.step(&name, &mut t.data, &g.data, net_lr);
                t.data.iter_mut().for_each(|v| *v = to_f32_grid(*v));
            }
        }
        let mut gauss = self.model.gauss_params();
        let ids: Vec<ParamId> = gauss.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            if let Some(g) = grads.get(&id) {
                let name = gauss.name_of(id).to_string();
                let rate = lr.for_gauss(&name).lr_at(it);
                let t = gauss.by_id_mut(id);
                self.adam.step(&format!("gauss.{name}"), &mut t.data, &g.data, rate);
            }
        }
        self.model.store_gauss_params(&gauss)?;
        let c = &mut self.model.cloud;
        c.renormalize_rotations();
        for col in &mut c.colors {
            col.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        c.quantize_f32();

        self.iteration += 1;
        let cfg = &self.config;
        let densify = if self.iteration <= cfg.densify_until && self.iteration % cfg.densify_interval == 0 {
            Some(densify_and_prune(self, &dataset.mesh)?)
        } else {
            None
        };
        Ok(StepOutcome { frame, terms, total, densify })
    }

    /// Runs to `config.iterations`, writing a JSON line every `log_interval`
    /// iterations (and at the first and last).
    pub fn run(&mut self, dataset: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Vec<LogEntry>> {
        let mut entries = Vec::new();
        while self.iteration < self.config.iterations {
            let out = self.step(dataset)?;
            let it = self.iteration;
            let every = self.config.log_interval.max(1);
            if it == 1 || it % every == 0 || it == self.config.iterations {
                let e = LogEntry {
                    iteration: it,
                    frame: out.frame,
                    lr: self.config.lr.at(it - 1),
                    loss: out.terms,
                    total: out.total,
                    gaussians: self.model.cloud.len(),
                };
                if let Some(w) = log.as_deref_mut() {
                    let line = serde_json::to_string(&e).map_err(|e| Error::Training(e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
                }
                log::info!("iter {it} loss {:.6} gaussians {}", out.total, e.gaussians);
                entries.push(e);
            }
        }
        Ok(entries)
    }
}

fn breakdown_json(t: &LossTerms) -> String {
    serde_json::to_string(t).unwrap_or_default()
}
