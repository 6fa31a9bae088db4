use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{photometric_loss, plan_density, regularizers, Adam, DensityState, Model, TrainConfig};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::fields::Aabb;
use crate::io::{Block, Checkpoint, Scene};
use crate::metrics::{morans_i, psnr, ssim, MoranReport, NeighborGraph};
use crate::raster::{render_op, RasterConfig};
use crate::scene::{Splat, SplatSet};

/// Loss values of one optimization step, taken before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub dssim: Option<f64>,
    pub mask: Option<f64>,
    pub norm: Option<f64>,
    pub moran: Option<f64>,
    pub splats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iteration: usize,
    pub splats: usize,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub train_ssim: Option<f64>,
    pub test_ssim: Option<f64>,
    pub moran: Option<MoranReport>,
    pub train_views: Vec<ViewMetrics>,
    pub test_views: Vec<ViewMetrics>,
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub dssim: Option<f64>,
    pub mask: Option<f64>,
    pub norm: Option<f64>,
    pub moran_loss: Option<f64>,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub train_ssim: Option<f64>,
    pub test_ssim: Option<f64>,
    pub moran_color: Option<f64>,
    pub moran_opacity: Option<f64>,
    pub moran_covariance: Option<f64>,
    pub splats: usize,
}

impl LogRow {
    pub fn new(step: &StepStats, eval: &EvalReport) -> Self {
        let group = |f: fn(&MoranReport) -> Option<f64>| eval.moran.as_ref().and_then(f);
        LogRow {
            iteration: step.iteration,
            loss: step.loss,
            l1: step.l1,
            dssim: step.dssim,
            mask: step.mask,
            norm: step.norm,
            moran_loss: step.moran,
            train_psnr: eval.train_psnr,
            test_psnr: eval.test_psnr,
            train_ssim: eval.train_ssim,
            test_ssim: eval.test_ssim,
            moran_color: group(|m| m.groups.color.score),
            moran_opacity: group(|m| m.groups.opacity.score),
            moran_covariance: group(|m| m.groups.covariance.score),
            splats: eval.splats,
        }
    }
}

struct Forward {
    total: Var,
    stats: StepStats,
    position_vars: Vec<Var>,
}

struct Pass {
    stats: StepStats,
    store: ParamStore,
    position_grads: Vec<Vec<f64>>,
}

/// Owns all mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub model: Model,
    pub adam: Adam,
    pub density: DensityState,
    pub iteration: usize,
    pub aabb: Aabb,
    pub time_steps: Option<usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Trainer {
    pub fn new(config: TrainConfig, scene: &Scene) -> crate::Result<Self> {
        config.validate()?;
        let time_steps = scene.time_steps();
        match (config.mode.is_dynamic(), time_steps) {
            (true, None) => return Err(crate::Error::Config(format!("{} needs a timed scene", config.mode.name()))),
            (false, Some(_)) => {
                return Err(crate::Error::Config(format!("{} needs a static scene", config.mode.name())));
            }
            _ => {}
        }
        if scene.train_indices().is_empty() {
            return Err(crate::Error::Data("scene has no training views".into()));
        }
        let init = scene.init.as_ref().ok_or_else(|| crate::Error::Data("scene has no initial point cloud".into()))?;
        let aabb = match scene.aabb() {
            Some(b) => b,
            None => Aabb::from_points(&init.positions().concat(), 0.1)?,
        };
        Self::build(config, init, aabb, time_steps)
    }

    fn build(config: TrainConfig, init: &SplatSet, aabb: Aabb, time_steps: Option<usize>) -> crate::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &config, init, aabb, time_steps, &mut rng)?;
        let adam = Adam::new(config.adam, &store);
        let density = DensityState::new(init.len());
        Ok(Trainer { config, store, model, adam, density, iteration: 0, aabb, time_steps })
    }

    pub fn raster(&self, scene: &Scene) -> RasterConfig {
        RasterConfig { background: self.config.background.unwrap_or(scene.background()), ..self.config.raster }
    }

    pub fn splat_count(&self) -> usize {
        self.model.splat_count(&self.store)
    }

    /// RNG stream of one iteration: batch choice and clone offsets.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration as u64 + 1);
        rng
    }

    /// Render, loss, backward and Adam update over one batch of views.
    /// On a non-finite loss or gradient the state is left untouched.
    pub fn step(&mut self, scene: &Scene) -> crate::Result<StepStats> {
        let mut rng = self.step_rng();
        self.maybe_densify(&mut rng)?;
        let train = scene.train_indices();
        if train.is_empty() {
            return Err(crate::Error::Data("scene has no training views".into()));
        }
        let n = self.config.batch_size().min(train.len());
        let batch: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), n).into_iter().map(|i| train[i]).collect();
        let pass = self.forward_backward(scene, &batch)?;
        let mut adam = self.adam.clone();
        let mut store = pass.store;
        adam.update(&mut store, self.model.learning_rates(&self.config, self.iteration))?;
        self.model.project(&mut store);
        self.store = store;
        self.adam = adam;
        for g in &pass.position_grads {
            self.density.accumulate(g);
        }
        self.iteration += 1;
        Ok(pass.stats)
    }

    /// Loss over `batch` and a copy of the parameters carrying its gradient.
    pub fn gradients(&self, scene: &Scene, batch: &[usize]) -> crate::Result<(StepStats, ParamStore)> {
        let pass = self.forward_backward(scene, batch)?;
        Ok((pass.stats, pass.store))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, scene: &Scene, batch: &[usize]) -> crate::Result<f64> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, scene, batch)?;
        Ok(tape.scalar(f.total))
    }

    fn forward(&self, tape: &mut Tape, scene: &Scene, batch: &[usize]) -> crate::Result<Forward> {
        if batch.is_empty() {
            return Err(crate::Error::Data("empty batch".into()));
        }
        let raster = self.raster(scene);
        let w = self.config.weights();
        let mut stage = self.model.begin(tape, &self.store);
        let mut photo: Option<Var> = None;
        let mut sums = [0.0; 3];
        let mut position_vars: Vec<Var> = Vec::new();
        let mut first = None;
        for &i in batch {
            let cam = &scene.cameras[i];
            let c = cam.center();
            let vars = self.model.splats(tape, &self.store, &mut stage, scene.times[i], [c.x, c.y, c.z]);
            let image = render_op(tape, vars.render_vars(), cam, &raster)?;
            let t = photometric_loss(tape, image, &scene.frames[i], &w)?;
            sums[0] += t.l1.unwrap_or(0.0);
            sums[1] += t.dssim.unwrap_or(0.0);
            sums[2] += t.mask.unwrap_or(0.0);
            photo = Some(match photo {
                Some(p) => tape.add(p, t.total),
                None => t.total,
            });
            if !position_vars.contains(&vars.positions) {
                position_vars.push(vars.positions);
            }
            first.get_or_insert(vars);
        }
        let (Some(first), Some(photo)) = (first, photo) else { unreachable!("batch is non-empty") };
        let n = batch.len() as f64;
        let mut total = tape.scale(photo, 1.0 / n);
        let graph = if w.moran > 0.0 {
            Some(NeighborGraph::build(tape.value(first.positions).data(), w.moran_neighbors)?)
        } else {
            None
        };
        let groups = [first.colors, first.opacities, first.covariances];
        let reg = regularizers(tape, first.canonical, &groups, graph.as_ref(), &w)?;
        if let Some(r) = &reg {
            total = tape.add(total, r.total);
        }
        let k = self.splat_count();
        let stats = StepStats {
            iteration: self.iteration,
            loss: tape.scalar(total),
            l1: sums[0] / n,
            dssim: (w.ssim > 0.0).then_some(sums[1] / n),
            mask: (w.mask > 0.0).then_some(sums[2] / n),
            norm: reg.and_then(|r| r.norm),
            moran: reg.and_then(|r| r.moran),
            splats: k,
        };
        Ok(Forward { total, stats, position_vars })
    }

    fn forward_backward(&self, scene: &Scene, batch: &[usize]) -> crate::Result<Pass> {
        let mut tape = Tape::new();
        let Forward { total, stats, position_vars } = self.forward(&mut tape, scene, batch)?;
        if !stats.loss.is_finite() {
            return Err(crate::Error::Numerical(format!("non-finite loss at iteration {}", self.iteration)));
        }
        let grads = tape.backward(total)?;
        let mut store = self.store.clone();
        store.zero_grad();
        grads.accumulate_into(&mut store);
        let k = stats.splats;
        let position_grads = position_vars.into_iter().map(|v| grads.get_or_zero(v, 3 * k)).collect();
        Ok(Pass { stats, store, position_grads })
    }

    /// Prune and clone at the start of every `interval`-th step, so that
    /// evaluations and checkpoints never see a freshly cloned set.
    fn maybe_densify(&mut self, rng: &mut ChaCha8Rng) -> crate::Result<()> {
        let d = self.config.density;
        let due = self.iteration > 0 && self.iteration % d.interval == 0 && self.density.last_action != self.iteration;
        if !d.enabled || !due || (d.stop > 0 && self.iteration > d.stop) {
            return Ok(());
        }
        let (opacities, scales, quats) = self.model.density_inputs(&self.store)?;
        let plan = plan_density(&opacities, &scales, &quats, &self.density, &d, rng);
        if !plan.is_identity(opacities.len()) {
            log::info!(
                "iteration {}: pruned {}, cloned {}, {} splats",
                self.iteration,
                plan.pruned,
                plan.clones.len(),
                plan.len()
            );
            self.model.apply_density(&mut self.store, &mut self.adam, &plan);
        }
        let k = self.splat_count();
        self.density.reset(k, self.iteration);
        Ok(())
    }

    /// PSNR and SSIM on every train and test view plus Moran's I of the baked splats.
    pub fn evaluate(&self, scene: &Scene) -> crate::Result<EvalReport> {
        let raster = self.raster(scene);
        let metrics = |idx: &[usize]| -> crate::Result<Vec<ViewMetrics>> {
            let views: Vec<_> = idx.iter().map(|&i| (&scene.cameras[i], scene.times[i])).collect();
            let outs = self.model.render_many(&self.store, &views, &raster)?;
            idx.iter()
                .zip(outs)
                .map(|(&i, out)| {
                    let f = out.to_frame();
                    Ok(ViewMetrics { index: i, psnr: psnr(&f, &scene.frames[i])?, ssim: ssim(&f, &scene.frames[i]).ok() })
                })
                .collect()
        };
        let train_views = metrics(&scene.train_indices())?;
        let test_views = metrics(&scene.test_indices())?;
        let time = self.time_steps.map(|_| 0.0);
        let baked = self.model.bake(&self.store, time)?;
        let moran = morans_i(&baked.attributes.view(), self.config.loss.moran_neighbors, false).ok();
        let ssim_mean = |v: &[ViewMetrics]| {
            let s: Option<Vec<f64>> = v.iter().map(|m| m.ssim).collect();
            s.and_then(|s| mean(s.into_iter()))
        };
        Ok(EvalReport {
            iteration: self.iteration,
            splats: self.splat_count(),
            train_psnr: mean(train_views.iter().map(|m| m.psnr)).unwrap_or(f64::NAN),
            test_psnr: mean(test_views.iter().map(|m| m.psnr)),
            train_ssim: ssim_mean(&train_views),
            test_ssim: ssim_mean(&test_views),
            moran,
            train_views,
            test_views,
        })
    }

    /// Runs until `config.iterations`, evaluating every `eval_interval` steps
    /// and after the last one. Each evaluated step is passed to `on_row`.
    pub fn train(
        &mut self,
        scene: &Scene,
        mut on_row: impl FnMut(&LogRow) -> crate::Result<()>,
    ) -> crate::Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.config.iterations {
            let stats = self.step(scene)?;
            let done = self.iteration;
            let every = self.config.eval_interval;
            if done == self.config.iterations || (every > 0 && done % every == 0) {
                let eval = self.evaluate(scene)?;
                let row = LogRow::new(&stats, &eval);
                on_row(&row)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }

    /// Plain splats; field colors use view direction +z.
    pub fn bake(&self, time: Option<f64>) -> crate::Result<Vec<Splat>> {
        Ok(self.model.bake(&self.store, time)?.splats)
    }

    pub fn to_checkpoint(&self) -> crate::Result<Checkpoint> {
        let mut blocks = Vec::new();
        for (id, p) in self.store.iter() {
            blocks.push(Block { name: format!("param/{}", p.name), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() });
            if p.learnable {
                let shape = vec![p.value.len()];
                blocks.push(Block { name: format!("adam_m/{}", p.name), shape: shape.clone(), data: self.adam.m[id.index()].clone() });
                blocks.push(Block { name: format!("adam_v/{}", p.name), shape, data: self.adam.v[id.index()].clone() });
            }
        }
        let k = self.density.len();
        blocks.push(Block { name: "density/grad_sum".into(), shape: vec![k], data: self.density.grad_sum.clone() });
        blocks.push(Block { name: "density/count".into(), shape: vec![k], data: self.density.count.clone() });
        let config = serde_json::to_value(&self.config).map_err(|e| crate::Error::Data(format!("config echo: {e}")))?;
        let meta = serde_json::json!({
            "adam_step": self.adam.step,
            "density_last_action": self.density.last_action,
            "aabb": self.aabb,
            "time_steps": self.time_steps,
        });
        Ok(Checkpoint { iteration: self.iteration, config, meta, blocks })
    }

    /// Restores every piece of state; training continues bit-exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> crate::Result<Self> {
        let data = |m: String| crate::Error::Data(format!("checkpoint: {m}"));
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| data(e.to_string()))?;
        config.validate()?;
        let aabb: Aabb = serde_json::from_value(ckpt.meta["aabb"].clone()).map_err(|e| data(e.to_string()))?;
        let time_steps: Option<usize> =
            serde_json::from_value(ckpt.meta["time_steps"].clone()).map_err(|e| data(e.to_string()))?;
        let placeholder = Splat {
            position: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [0.5; 3],
        };
        let mut t = Self::build(config, &SplatSet::new(vec![placeholder])?, aabb, time_steps)?;
        let block = |name: String| ckpt.block(&name).ok_or_else(|| data(format!("missing block {name}")));
        let ids: Vec<_> = t.store.ids().collect();
        for id in ids {
            let name = t.store.get(id).name.clone();
            let b = block(format!("param/{name}"))?;
            let expected = t.store.value(id).shape().to_vec();
            let per_splat = t.model.splat_blocks().iter().any(|(s, _)| *s == id);
            if !per_splat && b.shape != expected {
                return Err(data(format!("{name} has shape {:?}, expected {expected:?}", b.shape)));
            }
            t.store.set_value(id, crate::autodiff::Tensor::new(b.shape.clone(), b.data.clone()));
            if t.store.get(id).learnable {
                let (m, v) = (block(format!("adam_m/{name}"))?, block(format!("adam_v/{name}"))?);
                if m.data.len() != b.data.len() || v.data.len() != b.data.len() {
                    return Err(data(format!("optimizer state for {name} does not match")));
                }
                t.adam.m[id.index()] = m.data.clone();
                t.adam.v[id.index()] = v.data.clone();
            } else {
                t.adam.reset_block(id, b.data.len());
            }
        }
        t.adam.step = ckpt.meta["adam_step"].as_u64().ok_or_else(|| data("missing adam_step".into()))?;
        t.density.grad_sum = block("density/grad_sum".into())?.data.clone();
        t.density.count = block("density/count".into())?.data.clone();
        t.density.last_action = ckpt.meta["density_last_action"].as_u64().unwrap_or(0) as usize;
        if t.density.len() != t.splat_count() {
            return Err(data("density state does not match the splat count".into()));
        }
        t.iteration = ckpt.iteration;
        Ok(t)
    }
}
