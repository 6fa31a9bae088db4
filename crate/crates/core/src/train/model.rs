use rand_chacha::ChaCha8Rng;

use super::{Adam, DensityPlan, TrainConfig};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::fields::{view_direction_op, Aabb, FieldBundle, GeometryVars};
use crate::flow::FlowField;
use crate::raster::{covariance_op, render, OwnedAttributes, RasterConfig, RenderOutput, RenderVars};
use crate::scene::{Camera, Splat, SplatSet};

/// Directly optimized splat attributes, one row per splat.
#[derive(Clone, Debug)]
pub struct FreeModel {
    pub positions: ParamId,
    pub log_scales: ParamId,
    /// Unnormalized `(w, x, y, z)` quaternions.
    pub rotations: ParamId,
    pub opacity_logits: ParamId,
    pub colors: ParamId,
}

/// Latent points whose attributes are predicted by neural fields.
#[derive(Clone, Debug)]
pub struct FieldModel {
    /// `[K, 3]`, moved only by density control.
    pub latent: ParamId,
    pub bundle: FieldBundle,
    pub flow: Option<FlowField>,
}

#[derive(Clone, Debug)]
pub enum Model {
    Free(FreeModel),
    Fields(FieldModel),
}

/// Constrained splat attributes for one view on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    /// Rendered centers `[K, 3]`.
    pub positions: Var,
    pub covariances: Var,
    pub colors: Var,
    pub opacities: Var,
    /// Centers before any time warp (the splat-norm argument).
    pub canonical: Var,
    pub scales: Var,
    pub rotations: Var,
}

impl SplatVars {
    pub fn render_vars(&self) -> RenderVars {
        RenderVars { positions: self.positions, covariances: self.covariances, colors: self.colors, opacities: self.opacities }
    }
}

#[derive(Clone, Copy, Debug)]
struct TimeVars {
    canonical: Var,
    positions: Var,
    geometry: GeometryVars,
    covariances: Var,
}

/// View-independent tape state shared by all views of one step.
pub struct Stage {
    free: Option<SplatVars>,
    features: Option<Var>,
    latent: Option<Var>,
    cache: Vec<(Option<u64>, TimeVars)>,
}

/// Plain splats evaluated from a model.
#[derive(Clone, Debug)]
pub struct Baked {
    pub splats: Vec<Splat>,
    pub attributes: OwnedAttributes,
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(1e-12, 1.0 - 1e-12);
    (a / (1.0 - a)).ln()
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        cfg: &TrainConfig,
        init: &SplatSet,
        aabb: Aabb,
        time_steps: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> crate::Result<Self> {
        let k = init.len();
        let rows = |f: &dyn Fn(&Splat) -> Vec<f64>, cols: usize| {
            Tensor::new([k, cols], init.splats().iter().flat_map(f).collect())
        };
        if cfg.mode.is_free() {
            return Ok(Model::Free(FreeModel {
                positions: store.add("splat.position", rows(&|s| s.position.to_vec(), 3), true),
                log_scales: store.add("splat.log_scale", rows(&|s| s.log_scale.to_vec(), 3), true),
                rotations: store.add("splat.rotation", rows(&|s| s.rotation.to_vec(), 4), true),
                opacity_logits: store.add("splat.opacity_logit", rows(&|s| vec![s.opacity_logit], 1), true),
                colors: store.add("splat.color", rows(&|s| s.color.to_vec(), 3), true),
            }));
        }
        let latent = store.add("latent.position", rows(&|s| s.position.to_vec(), 3), false);
        let field_cfg = cfg.field_config(time_steps);
        let bundle = FieldBundle::new(store, &field_cfg, aabb, rng)?;
        let flow = if cfg.mode.is_dynamic() {
            let steps = time_steps.ok_or_else(|| crate::Error::Config("dynamic mode needs a timed scene".into()))?;
            Some(FlowField::new(store, &cfg.flow_config(), field_cfg.feature_dim, steps, rng)?)
        } else {
            None
        };
        Ok(Model::Fields(FieldModel { latent, bundle, flow }))
    }

    /// Parameter blocks that hold one row per splat, with their widths.
    pub fn splat_blocks(&self) -> Vec<(ParamId, usize)> {
        match self {
            Model::Free(f) => {
                vec![(f.positions, 3), (f.log_scales, 3), (f.rotations, 4), (f.opacity_logits, 1), (f.colors, 3)]
            }
            Model::Fields(f) => vec![(f.latent, 3)],
        }
    }

    pub fn splat_count(&self, store: &ParamStore) -> usize {
        store.value(self.splat_blocks()[0].0).rows()
    }

    pub fn begin(&self, tape: &mut Tape, store: &ParamStore) -> Stage {
        match self {
            Model::Free(f) => {
                let positions = tape.param(store, f.positions);
                let ls = tape.param(store, f.log_scales);
                let scales = tape.exp(ls);
                let q = tape.param(store, f.rotations);
                let rotations = tape.normalize_rows(q);
                let covariances = covariance_op(tape, scales, rotations);
                let ol = tape.param(store, f.opacity_logits);
                let opacities = tape.sigmoid(ol);
                let colors = tape.param(store, f.colors);
                let vars = SplatVars { positions, covariances, colors, opacities, canonical: positions, scales, rotations };
                Stage { free: Some(vars), features: None, latent: None, cache: Vec::new() }
            }
            Model::Fields(f) => {
                let latent = tape.param(store, f.latent);
                let features = f.bundle.features(tape, store, latent);
                Stage { free: None, features: Some(features), latent: Some(latent), cache: Vec::new() }
            }
        }
    }

    /// Splat attributes seen from `eye` at `time`.
    pub fn splats(&self, tape: &mut Tape, store: &ParamStore, stage: &mut Stage, time: Option<f64>, eye: [f64; 3]) -> SplatVars {
        let f = match self {
            Model::Free(_) => return stage.free.expect("free stage"),
            Model::Fields(f) => f,
        };
        let (latent, features) = (stage.latent.expect("field stage"), stage.features.expect("field stage"));
        let time = if f.flow.is_some() { Some(time.unwrap_or(0.0)) } else { None };
        let key = time.map(f64::to_bits);
        let tv = match stage.cache.iter().find(|(k, _)| *k == key) {
            Some((_, tv)) => *tv,
            None => {
                let canonical = f.bundle.deform(tape, store, latent, features, time);
                let geometry = f.bundle.geometry(tape, store, canonical, features, time);
                let covariances = covariance_op(tape, geometry.scales, geometry.rotations);
                let positions = match (&f.flow, time) {
                    (Some(flow), Some(t)) => flow.warp(tape, store, canonical, features, t),
                    _ => canonical,
                };
                let tv = TimeVars { canonical, positions, geometry, covariances };
                stage.cache.push((key, tv));
                tv
            }
        };
        let dirs = view_direction_op(tape, tv.positions, eye);
        let colors = f.bundle.colors(tape, store, tv.geometry.color_hidden, dirs, time);
        SplatVars {
            positions: tv.positions,
            covariances: tv.covariances,
            colors,
            opacities: tv.geometry.opacities,
            canonical: tv.canonical,
            scales: tv.geometry.scales,
            rotations: tv.geometry.rotations,
        }
    }

    /// Evaluates plain splats. Field colors use the fixed view direction +z.
    pub fn bake(&self, store: &ParamStore, time: Option<f64>) -> crate::Result<Baked> {
        let mut tape = Tape::new();
        let mut stage = self.begin(&mut tape, store);
        let vars = match self {
            Model::Free(_) => stage.free.expect("free stage"),
            Model::Fields(f) => {
                let k = self.splat_count(store);
                // An eye far down -z gives direction +z for every splat.
                let mut v = self.splats(&mut tape, store, &mut stage, time, [0.0, 0.0, -1e9]);
                let dirs = tape.constant(Tensor::new([k, 3], (0..k).flat_map(|_| [0.0, 0.0, 1.0]).collect()));
                let t = if f.flow.is_some() { Some(time.unwrap_or(0.0)) } else { None };
                v.colors = f.bundle.colors(&mut tape, store, self.color_hidden(&stage, t), dirs, t);
                v
            }
        };
        let get = |v: Var| tape.value(v).data().to_vec();
        let attributes = OwnedAttributes {
            positions: get(vars.positions),
            covariances: get(vars.covariances),
            colors: get(vars.colors),
            opacities: get(vars.opacities),
        };
        let splats = match self {
            Model::Free(f) => {
                let raw = |id: ParamId| store.value(id).data().to_vec();
                let (p, s, q, o, c) =
                    (raw(f.positions), raw(f.log_scales), raw(f.rotations), raw(f.opacity_logits), raw(f.colors));
                (0..o.len())
                    .map(|k| Splat {
                        position: [p[3 * k], p[3 * k + 1], p[3 * k + 2]],
                        log_scale: [s[3 * k], s[3 * k + 1], s[3 * k + 2]],
                        rotation: [q[4 * k], q[4 * k + 1], q[4 * k + 2], q[4 * k + 3]],
                        opacity_logit: o[k],
                        color: [c[3 * k], c[3 * k + 1], c[3 * k + 2]],
                    })
                    .collect()
            }
            Model::Fields(_) => {
                let (s, q) = (get(vars.scales), get(vars.rotations));
                let a = &attributes;
                (0..a.opacities.len())
                    .map(|k| Splat {
                        position: [a.positions[3 * k], a.positions[3 * k + 1], a.positions[3 * k + 2]],
                        log_scale: [s[3 * k].ln(), s[3 * k + 1].ln(), s[3 * k + 2].ln()],
                        rotation: [q[4 * k], q[4 * k + 1], q[4 * k + 2], q[4 * k + 3]],
                        opacity_logit: logit(a.opacities[k]),
                        color: [a.colors[3 * k], a.colors[3 * k + 1], a.colors[3 * k + 2]],
                    })
                    .collect()
            }
        };
        Ok(Baked { splats, attributes })
    }

    fn color_hidden(&self, stage: &Stage, time: Option<f64>) -> Var {
        let key = time.map(f64::to_bits);
        stage.cache.iter().find(|(k, _)| *k == key).expect("time evaluated").1.geometry.color_hidden
    }

    /// Renders one camera without recording gradients.
    pub fn render(
        &self,
        store: &ParamStore,
        cam: &Camera,
        time: Option<f64>,
        cfg: &RasterConfig,
    ) -> crate::Result<RenderOutput> {
        Ok(self.render_many(store, &[(cam, time)], cfg)?.remove(0))
    }

    /// Renders several views, sharing the view-independent evaluation.
    pub fn render_many(
        &self,
        store: &ParamStore,
        views: &[(&Camera, Option<f64>)],
        cfg: &RasterConfig,
    ) -> crate::Result<Vec<RenderOutput>> {
        let mut tape = Tape::new();
        let mut stage = self.begin(&mut tape, store);
        let mut out = Vec::with_capacity(views.len());
        for (cam, time) in views {
            let c = cam.center();
            let v = self.splats(&mut tape, store, &mut stage, *time, [c.x, c.y, c.z]);
            let attrs = crate::raster::SplatAttributes {
                positions: tape.value(v.positions).data(),
                covariances: tape.value(v.covariances).data(),
                colors: tape.value(v.colors).data(),
                opacities: tape.value(v.opacities).data(),
            };
            out.push(render(&attrs, cam, cfg)?);
        }
        Ok(out)
    }

    /// Opacities, scales and unit quaternions that drive density decisions.
    pub fn density_inputs(&self, store: &ParamStore) -> crate::Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let time = match self {
            Model::Fields(f) if f.flow.is_some() => Some(0.0),
            _ => None,
        };
        let mut tape = Tape::new();
        let mut stage = self.begin(&mut tape, store);
        let v = self.splats(&mut tape, store, &mut stage, time, [0.0, 0.0, -1e9]);
        let get = |v: Var| tape.value(v).data().to_vec();
        Ok((get(v.opacities), get(v.scales), get(v.rotations)))
    }

    /// Applies a density plan to every per-splat block and its optimizer rows.
    pub fn apply_density(&self, store: &mut ParamStore, adam: &mut Adam, plan: &DensityPlan) {
        let rows = plan.optimizer_rows();
        for (i, (id, cols)) in self.splat_blocks().into_iter().enumerate() {
            let old = store.value(id).data().to_vec();
            let data = if i == 0 { plan.gather_positions(&old) } else { plan.gather(&old, cols) };
            store.set_value(id, Tensor::new([plan.len(), cols], data));
            adam.remap_rows(id, cols, &rows);
        }
    }

    /// Keeps free colors inside `[0, 1]` after an update.
    pub fn project(&self, store: &mut ParamStore) {
        if let Model::Free(f) = self {
            let p = store.get_mut(f.colors);
            p.value.data_mut().iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        }
    }

    /// Step size for each parameter block at `iteration`.
    pub fn learning_rates(&self, cfg: &TrainConfig, iteration: usize) -> impl Fn(ParamId) -> f64 + '_ {
        let base = cfg.schedule.lr_at(iteration);
        let decay = base / cfg.schedule.start;
        let rates = cfg.free_lr;
        move |id| match self {
            Model::Free(f) => {
                if id == f.positions {
                    rates.position * decay
                } else if id == f.log_scales {
                    rates.log_scale
                } else if id == f.rotations {
                    rates.rotation
                } else if id == f.opacity_logits {
                    rates.opacity
                } else {
                    rates.color
                }
            }
            Model::Fields(_) => base,
        }
    }
}
