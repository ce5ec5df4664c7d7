use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{gaf_forward_var, gaf_layout, init_gaf, GafConfig, Named, ViewVars};
use super::image::{backbone_layout, backbone_vars, check_strides, image_tensor, init_backbone, pyramid_var, FeaturePyramid, LevelVar};
use super::voxel::{encoder_layout, encoder_vars, init_encoder, sparse_encode, voxelize, SparseVoxelGrid};
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Vec3, QUAT_IDENTITY};
use crate::scene::{Camera, GridSpec, Image};
use crate::splat::{GaussianSet, GaussianVars, QUAT_EPS};

/// Everything the network sees about one scene besides the Gaussians.
#[derive(Clone, Debug)]
pub struct SceneInput {
    /// Raw per-voxel embeddings of the completed cloud.
    pub voxels: SparseVoxelGrid,
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
}

impl SceneInput {
    pub fn new(points: &[Vec3], intensity: &[f64], grid: &GridSpec, images: Vec<Image>, cameras: Vec<Camera>, cfg: &GafConfig) -> Result<Self> {
        if images.len() != cameras.len() {
            return Err(Error::shape("scene_input", format!("{} images for {} cameras", images.len(), cameras.len())));
        }
        for (img, cam) in images.iter().zip(&cameras) {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::shape("scene_input", "image size differs from its camera".to_string()));
            }
            check_strides(&cfg.strides, img.width, img.height)?;
        }
        let voxels = voxelize(points, intensity, grid, cfg.max_points_per_voxel, cfg.d_pc)?;
        Ok(Self { voxels, images, cameras })
    }
}

/// Voxel encoder, image backbone and fusion head with their parameters.
#[derive(Clone, Debug)]
pub struct OccNet {
    pub config: GafConfig,
    pub num_classes: usize,
    pub params: ParamSet,
}

impl OccNet {
    pub fn new(config: GafConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder(&mut params, config.d_pc, &mut rng)?;
        init_backbone(&mut params, &config.strides, config.d, &mut rng)?;
        init_gaf(&mut params, &config, num_classes, &mut rng)?;
        Ok(Self { config, num_classes, params })
    }

    pub fn layout(config: &GafConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = encoder_layout(config.d_pc);
        out.extend(backbone_layout(&config.strides, config.d));
        out.extend(gaf_layout(config, num_classes));
        out
    }

    /// Adopt checkpointed parameters after checking names and shapes.
    pub fn from_params(config: GafConfig, num_classes: usize, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config, num_classes);
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Input(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(Error::Input(format!("checkpoint lacks parameter {name}"))),
            }
        }
        let mut own = ParamSet::new();
        for (name, _) in layout {
            own.insert(name.clone(), params.get(&name).expect("checked").clone())?;
        }
        Ok(Self { config, num_classes, params: own })
    }

    /// Refined Gaussians on `tape`. `bound` must come from binding
    /// `self.params` on the same tape.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, scene: &SceneInput, g: GaussianVars) -> Result<GaussianVars> {
        let c = tape.shape(g.sem).get(1).copied();
        if c != Some(self.num_classes) {
            return Err(Error::shape("occnet", format!("Gaussian logits {:?} for {} classes", tape.shape(g.sem), self.num_classes)));
        }
        let enc = encoder_vars(&self.params, bound)?;
        let x = tape.constant(scene.voxels.features.clone());
        let f = sparse_encode(tape, &scene.voxels, x, &enc)?;
        let bw = backbone_vars(&self.params, bound, self.config.levels())?;
        let mut pyramids: Vec<Vec<LevelVar>> = Vec::with_capacity(scene.images.len());
        for img in &scene.images {
            let iv = tape.constant(image_tensor(img));
            pyramids.push(pyramid_var(tape, iv, img.width, img.height, &self.config.strides, &bw)?);
        }
        let views: Vec<ViewVars> = scene.cameras.iter().zip(&pyramids).map(|(camera, levels)| ViewVars { camera, levels }).collect();
        let named = Named { set: &self.params, bound };
        gaf_forward_var(tape, &self.config, &named, g, f, &scene.voxels.index, &views)
    }

    /// Value-level refinement of `gset`.
    pub fn refine(&self, scene: &SceneInput, gset: &GaussianSet) -> Result<GaussianSet> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let g = constant_gaussians(&mut tape, gset);
        let out = self.forward(&mut tape, &bound, scene, g)?;
        gaussians_from_vars(&tape, out)
    }
}

/// Put a Gaussian set on the tape as constants.
pub fn constant_gaussians(tape: &mut Tape, gset: &GaussianSet) -> GaussianVars {
    let p = gset.to_params();
    let b = p.bind_constant(tape);
    GaussianVars { mu: b.var(0), rot: b.var(1), log_scale: b.var(2), sem: b.var(3) }
}

/// Read refined attributes back; quaternions are normalized with an identity
/// fallback.
pub fn gaussians_from_vars(tape: &Tape, g: GaussianVars) -> Result<GaussianSet> {
    let (mu, rot, ls, sem) = (tape.value(g.mu), tape.value(g.rot), tape.value(g.log_scale), tape.value(g.sem));
    let all = [mu, rot, ls, sem];
    if all.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric("refined Gaussian attributes are not finite".into()));
    }
    let n = mu.shape()[0];
    let c = sem.shape()[1];
    let v3 = |t: &Tensor, i: usize| [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]];
    let mut out = GaussianSet::empty(c);
    for i in 0..n {
        let q: [f64; 4] = rot.data()[4 * i..4 * i + 4].try_into().expect("4 values");
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.mu.push(v3(mu, i));
        out.rot.push(if qn < QUAT_EPS { QUAT_IDENTITY } else { q.map(|v| v / qn) });
        out.scale.push(v3(ls, i).map(f64::exp));
        out.sem.extend_from_slice(&sem.data()[i * c..(i + 1) * c]);
    }
    Ok(out)
}

/// Fusion-only refinement from precomputed voxel features and pyramids.
pub fn gaf_forward(
    gset: &GaussianSet,
    voxels: &SparseVoxelGrid,
    pyramids: &[FeaturePyramid],
    cameras: &[Camera],
    params: &ParamSet,
    cfg: &GafConfig,
) -> Result<GaussianSet> {
    if pyramids.len() != cameras.len() {
        return Err(Error::shape("gaf_forward", format!("{} pyramids for {} cameras", pyramids.len(), cameras.len())));
    }
    if voxels.dim() != cfg.d_pc {
        return Err(Error::shape("gaf_forward", format!("voxel features of width {} vs d_pc {}", voxels.dim(), cfg.d_pc)));
    }
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let mut levels = Vec::with_capacity(pyramids.len());
    for p in pyramids {
        p.validate()?;
        let strides: Vec<usize> = p.levels.iter().map(|l| l.2).collect();
        if strides != cfg.strides || p.levels.iter().any(|l| l.3.last_dim() != cfg.d) {
            return Err(Error::shape("gaf_forward", format!("pyramid strides {strides:?} or width differ from the configuration")));
        }
        let lv: Vec<LevelVar> = p.levels.iter().map(|(h, w, s, t)| LevelVar { map: tape.constant(t.clone()), h: *h, w: *w, stride: *s }).collect();
        levels.push(lv);
    }
    let views: Vec<ViewVars> = cameras.iter().zip(&levels).map(|(camera, levels)| ViewVars { camera, levels }).collect();
    let f = tape.constant(voxels.features.clone());
    let g = constant_gaussians(&mut tape, gset);
    let named = Named { set: params, bound: &bound };
    let out = gaf_forward_var(&mut tape, cfg, &named, g, f, &voxels.index, &views)?;
    gaussians_from_vars(&tape, out)
}
