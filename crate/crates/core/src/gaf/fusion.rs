use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image::LevelVar;
use super::ops::{anchor_geometry_feature, bilinear_sample, project_var, VoxelIndex};
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::Camera;
use crate::splat::GaussianVars;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GafConfig {
    /// Voxel descriptor width.
    pub d_pc: usize,
    /// Image feature width.
    pub d: usize,
    pub strides: Vec<usize>,
    /// Sampling offsets per view and level.
    pub n_off: usize,
    /// Sampling radius per level, in feature-map pixels.
    pub radii: Vec<f64>,
    /// Spatial-weight bandwidth relative to the radius.
    pub kappa: f64,
    /// Codewords per level.
    pub codewords: usize,
    /// Voxel context radius relative to the mean Gaussian scale.
    pub k_geo: f64,
    /// Distance fall-off of the voxel kernel, per meter.
    pub gamma: f64,
    /// Bound on the center update in meters; `None` leaves it unbounded.
    pub delta_max: Option<f64>,
    pub s_min: f64,
    pub iterations: usize,
    /// Learned sampling offsets; off means a fixed grid.
    pub ggs_enabled: bool,
    /// Codeword resampling; off feeds raw tokens to attention.
    pub gvr_enabled: bool,
    pub max_points_per_voxel: usize,
    pub offset_hidden: usize,
    pub ffn_hidden: usize,
    /// Scale produced by the update head at initialization.
    pub init_scale: f64,
}

impl Default for GafConfig {
    fn default() -> Self {
        Self {
            d_pc: 32,
            d: 32,
            strides: vec![4, 8, 16, 32],
            n_off: 9,
            radii: vec![1.0; 4],
            kappa: 1.0,
            codewords: 32,
            k_geo: 1.5,
            gamma: 3.0,
            delta_max: Some(2.0),
            s_min: 0.05,
            iterations: 1,
            ggs_enabled: true,
            gvr_enabled: true,
            max_points_per_voxel: 10,
            offset_hidden: 32,
            ffn_hidden: 128,
            init_scale: 0.4,
        }
    }
}

impl GafConfig {
    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.strides.is_empty() || self.radii.len() != self.strides.len() {
            return bad(format!("need one radius per pyramid level, got {} radii for {} strides", self.radii.len(), self.strides.len()));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || !(self.kappa > 0.0) {
            return bad("sampling radii and kappa must be > 0".into());
        }
        if self.n_off == 0 || self.codewords == 0 || self.d == 0 || self.offset_hidden == 0 || self.ffn_hidden == 0 {
            return bad("n_off, codewords, d and hidden widths must be >= 1".into());
        }
        if self.d_pc < super::voxel::PSI_DIM {
            return bad(format!("d_pc must be >= {}", super::voxel::PSI_DIM));
        }
        if !(self.k_geo > 0.0) || !(self.gamma >= 0.0) || !(self.s_min > 0.0) || !(self.init_scale > self.s_min) {
            return bad("need k_geo > 0, gamma >= 0, s_min > 0 and init_scale > s_min".into());
        }
        if self.delta_max.is_some_and(|d| !(d > 0.0)) {
            return bad("delta_max must be > 0 when set".into());
        }
        if self.iterations == 0 || self.max_points_per_voxel == 0 {
            return bad("iterations and points per voxel must be >= 1".into());
        }
        Ok(())
    }
}

/// Fixed sampling pattern: a square grid over `[-0.5, 0.5]^2`, row-major,
/// truncated to `n` points.
pub fn offset_grid(n: usize) -> Vec<[f64; 2]> {
    let g = (n as f64).sqrt().ceil() as usize;
    let coord = |k: usize| if g == 1 { 0.0 } else { -0.5 + k as f64 / (g - 1) as f64 };
    (0..g).flat_map(|y| (0..g).map(move |x| [coord(x), coord(y)])).take(n).collect()
}

/// Raw update-head outputs before the class logits: center, scale, rotation.
pub const UPDATE_GEOMETRY: usize = 10;

pub fn gaf_layout(cfg: &GafConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let (dp, d, m, l) = (cfg.d_pc, cfg.d, cfg.codewords, cfg.levels());
    let mut out = vec![
        ("gaf.offset.l1.w".to_string(), vec![dp, cfg.offset_hidden]),
        ("gaf.offset.l1.b".to_string(), vec![cfg.offset_hidden]),
        ("gaf.offset.l2.w".to_string(), vec![cfg.offset_hidden, 2 * cfg.n_off]),
        ("gaf.offset.l2.b".to_string(), vec![2 * cfg.n_off]),
        ("gaf.codebook".to_string(), vec![m, d]),
        ("gaf.Wa".to_string(), vec![d, m]),
        ("gaf.Ua".to_string(), vec![dp, m]),
        ("gaf.ba".to_string(), vec![m]),
        ("gaf.Wz".to_string(), vec![d, d]),
        ("gaf.film.w".to_string(), vec![dp, 2 * d]),
        ("gaf.film.b".to_string(), vec![2 * d]),
        ("gaf.Wq".to_string(), vec![dp, d]),
    ];
    for k in 1..=l {
        out.push((format!("gaf.Wk.{k}"), vec![d, d]));
        out.push((format!("gaf.Wv.{k}"), vec![d, d]));
    }
    out.push(("gaf.lambda".to_string(), vec![l]));
    out.push(("gaf.ffn.l1.w".to_string(), vec![dp + d, cfg.ffn_hidden]));
    out.push(("gaf.ffn.l1.b".to_string(), vec![cfg.ffn_hidden]));
    out.push(("gaf.ffn.l2.w".to_string(), vec![cfg.ffn_hidden, UPDATE_GEOMETRY + num_classes]));
    out.push(("gaf.ffn.l2.b".to_string(), vec![UPDATE_GEOMETRY + num_classes]));
    out
}

/// Inverse of softplus for positive arguments.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn init_gaf(params: &mut ParamSet, cfg: &GafConfig, num_classes: usize, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let grid = offset_grid(cfg.n_off);
    for (name, shape) in gaf_layout(cfg, num_classes) {
        let n: usize = shape.iter().product();
        let mut normal = |sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        let fan = shape[0] as f64;
        let data = match name.as_str() {
            "gaf.offset.l2.w" | "gaf.film.w" | "gaf.film.b" | "gaf.lambda" | "gaf.ba" => vec![0.0; n],
            "gaf.offset.l2.b" => grid.iter().flat_map(|p| p.map(f64::atanh)).collect(),
            "gaf.codebook" => normal(0.5),
            "gaf.ffn.l1.w" => normal((2.0 / fan).sqrt()),
            "gaf.ffn.l2.w" => normal(0.1 / fan.sqrt()),
            "gaf.ffn.l2.b" => {
                let mut b = vec![0.0; n];
                let s = softplus_inv(cfg.init_scale - cfg.s_min);
                b[3..6].fill(s);
                b[6] = 1.0;
                b
            }
            _ if shape.len() == 1 => vec![0.0; n],
            _ => normal(1.0 / fan.sqrt()),
        };
        params.insert(name, Tensor::from_parts(shape, data))?;
    }
    Ok(())
}

/// Parameter lookup by name on a tape.
pub struct Named<'a> {
    pub set: &'a ParamSet,
    pub bound: &'a BoundParams,
}

impl Named<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.set.index_of(name).map(|i| self.bound.var(i)).ok_or_else(|| Error::Input(format!("missing parameter {name}")))
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    tape.add(z, b)
}

/// Per-view inputs to the image branch.
pub struct ViewVars<'a> {
    pub camera: &'a Camera,
    pub levels: &'a [LevelVar],
}

/// Tokens of one pyramid level gathered over all views.
pub struct LevelTokens {
    /// `[N, T, d]`
    pub x: Var,
    /// `[N, T]`, log spatial weight of each token
    pub log_w: Var,
    /// `[N, T]`, 1 where the token comes from a view that sees the anchor
    pub mask: Tensor,
}

/// Sampling offsets `[N, n_off, 2]` in `(-1, 1)`.
pub fn guided_offsets(tape: &mut Tape, cfg: &GafConfig, p: &Named, f_pc: Var) -> Result<Var> {
    let n = tape.shape(f_pc)[0];
    if !cfg.ggs_enabled {
        let g: Vec<f64> = offset_grid(cfg.n_off).into_iter().flatten().collect();
        let g = tape.constant(Tensor::from_parts(vec![1, cfg.n_off, 2], g));
        return tape.expand(g, &[n, cfg.n_off, 2]);
    }
    let h = dense(tape, f_pc, p.get("gaf.offset.l1.w")?, p.get("gaf.offset.l1.b")?)?;
    let h = tape.gelu(h);
    let raw = dense(tape, h, p.get("gaf.offset.l2.w")?, p.get("gaf.offset.l2.b")?)?;
    let t = tape.tanh(raw);
    tape.reshape(t, &[n, cfg.n_off, 2])
}

fn clamp_xy(tape: &mut Tape, loc: Var, w: usize, h: usize) -> Result<Var> {
    let x = tape.slice(loc, 2, 0, 1)?;
    let y = tape.slice(loc, 2, 1, 1)?;
    let x = tape.clamp(x, 0.5, w as f64 - 0.5);
    let y = tape.clamp(y, 0.5, h as f64 - 0.5);
    tape.concat(&[x, y], 2)
}

/// Sampling locations on one level: `pix / s + R * offsets`, clamped to the
/// map. `pix: [N, 2]`, `offsets: [N, n_off, 2]`. Returns the locations and
/// the unclamped-free reference `pix / s`, both `[N, n_off, 2]`.
pub fn sample_locations(tape: &mut Tape, pix: Var, offsets: Var, level: &LevelVar, radius: f64) -> Result<(Var, Var)> {
    let s = tape.shape(offsets).to_vec();
    let base = tape.scale(pix, 1.0 / level.stride as f64);
    let base = tape.reshape(base, &[s[0], 1, 2])?;
    let base = tape.expand(base, &s)?;
    let step = tape.scale(offsets, radius);
    let loc = tape.add(base, step)?;
    Ok((clamp_xy(tape, loc, level.w, level.h)?, base))
}

/// Bilinear tokens for every view of one level.
pub fn level_tokens(
    tape: &mut Tape,
    cfg: &GafConfig,
    level: usize,
    views: &[ViewVars],
    pix: &[(Var, Vec<bool>)],
    offsets: Var,
) -> Result<LevelTokens> {
    let n = tape.shape(offsets)[0];
    let r = cfg.radii[level];
    let sigma = cfg.kappa * r;
    let (mut xs, mut ws, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (view, (pv, vis)) in views.iter().zip(pix) {
        let lv = &view.levels[level];
        let d = tape.shape(lv.map)[1];
        let (loc, base) = sample_locations(tape, *pv, offsets, lv, r)?;
        let flat = tape.reshape(loc, &[n * cfg.n_off, 2])?;
        let tok = bilinear_sample(tape, lv.map, lv.h, lv.w, flat)?;
        xs.push(tape.reshape(tok, &[n, cfg.n_off, d])?);
        let diff = tape.sub(loc, base)?;
        let sq = tape.mul(diff, diff)?;
        let sq = tape.sum_axis(sq, 2)?;
        ws.push(tape.scale(sq, -0.5 / (sigma * sigma)));
        mask.push(vis);
    }
    let x = tape.concat(&xs, 1)?;
    let log_w = tape.concat(&ws, 1)?;
    let t = views.len() * cfg.n_off;
    let mut m = vec![0.0; n * t];
    for (v, vis) in mask.iter().enumerate() {
        for i in 0..n {
            if vis[i] {
                m[i * t + v * cfg.n_off..i * t + (v + 1) * cfg.n_off].fill(1.0);
            }
        }
    }
    Ok(LevelTokens { x, log_w, mask: Tensor::from_parts(vec![n, t], m) })
}

/// Codeword resampling. Returns slots `[N, M, d]`, the assignment `[N, T, M]`
/// and the log slot weights `[N, M]`.
pub fn geo_vlad(tape: &mut Tape, p: &Named, tokens: &LevelTokens, f_pc: Var) -> Result<(Var, Var, Var)> {
    let s = tape.shape(tokens.x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let code = p.get("gaf.codebook")?;
    let m = tape.shape(code)[0];
    let xf = tape.reshape(tokens.x, &[n * t, d])?;
    let a = tape.matmul(xf, p.get("gaf.Wa")?)?;
    let a = tape.reshape(a, &[n, t, m])?;
    let u = dense(tape, f_pc, p.get("gaf.Ua")?, p.get("gaf.ba")?)?;
    let u = tape.reshape(u, &[n, 1, m])?;
    let u = tape.expand(u, &[n, t, m])?;
    let logits = tape.add(a, u)?;
    let alpha = tape.softmax(logits);
    // token weights, zero for tokens from views that miss the anchor
    let mask = tape.constant(tokens.mask.clone());
    let w = tape.exp(tokens.log_w);
    let w = tape.mul(w, mask)?;
    let w3 = tape.reshape(w, &[n, t, 1])?;
    let w3 = tape.expand(w3, &[n, t, m])?;
    let aw = tape.mul(alpha, w3)?;
    let r = tape.bmm(aw, tokens.x, true, false)?;
    let mass = tape.sum_axis(aw, 1)?;
    let mass3 = tape.reshape(mass, &[n, m, 1])?;
    let mass3 = tape.expand(mass3, &[n, m, d])?;
    let shift = tape.mul(mass3, code)?;
    let r = tape.sub(r, shift)?;
    let zn = tape.l2_normalize(r);
    let zn = tape.reshape(zn, &[n * m, d])?;
    let z = tape.matmul(zn, p.get("gaf.Wz")?)?;
    let z = tape.reshape(z, &[n, m, d])?;
    // slot weight: alpha-weighted mean of visible token weights
    let m3 = tape.reshape(mask, &[n, t, 1])?;
    let m3 = tape.expand(m3, &[n, t, m])?;
    let am = tape.mul(alpha, m3)?;
    let denom = tape.sum_axis(am, 1)?;
    let blind: Vec<f64> = tokens.mask.data().chunks(t).flat_map(|r| {
        let v = if r.iter().any(|&x| x > 0.0) { 0.0 } else { 1.0 };
        std::iter::repeat_n(v, m)
    }).collect();
    let blind = tape.constant(Tensor::from_parts(vec![n, m], blind));
    let num = tape.add(mass, blind)?;
    let den = tape.add(denom, blind)?;
    let ln = tape.log(num);
    let ld = tape.log(den);
    let log_w = tape.sub(ln, ld)?;
    Ok((z, alpha, log_w))
}

/// Masked raw tokens as attention slots, for the resampler ablation.
pub fn raw_slots(tape: &mut Tape, tokens: &LevelTokens) -> Result<(Var, Var)> {
    const MASKED: f64 = -1e4;
    let mask = tape.constant(tokens.mask.clone());
    let lw = tape.mul(tokens.log_w, mask)?;
    let off = tape.constant(tokens.mask.map(|m| (1.0 - m) * MASKED));
    let lw = tape.add(lw, off)?;
    Ok((tokens.x, lw))
}

/// `(1 + gamma) * z + beta` with `(gamma, beta)` from a linear map of `f_pc`.
pub fn film(tape: &mut Tape, p: &Named, z: Var, f_pc: Var) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let (n, m, d) = (s[0], s[1], s[2]);
    let gb = dense(tape, f_pc, p.get("gaf.film.w")?, p.get("gaf.film.b")?)?;
    let g = tape.slice(gb, 1, 0, d)?;
    let g = tape.offset(g, 1.0);
    let b = tape.slice(gb, 1, d, d)?;
    let g = tape.reshape(g, &[n, 1, d])?;
    let g = tape.expand(g, &[n, m, d])?;
    let b = tape.reshape(b, &[n, 1, d])?;
    let b = tape.expand(b, &[n, m, d])?;
    let gz = tape.mul(g, z)?;
    tape.add(gz, b)
}

/// Single-query attention over slots `[N, M, d]` with additive log weights
/// `[N, M]`; returns `[N, d]`.
pub fn level_attention(tape: &mut Tape, p: &Named, level: usize, slots: Var, log_w: Var, f_pc: Var) -> Result<Var> {
    let s = tape.shape(slots).to_vec();
    let (n, m, d) = (s[0], s[1], s[2]);
    let q = tape.matmul(f_pc, p.get("gaf.Wq")?)?;
    let q = tape.reshape(q, &[n, 1, d])?;
    let flat = tape.reshape(slots, &[n * m, d])?;
    let k = tape.matmul(flat, p.get(&format!("gaf.Wk.{}", level + 1))?)?;
    let k = tape.reshape(k, &[n, m, d])?;
    let v = tape.matmul(flat, p.get(&format!("gaf.Wv.{}", level + 1))?)?;
    let v = tape.reshape(v, &[n, m, d])?;
    let sc = tape.bmm(q, k, false, true)?;
    let sc = tape.scale(sc, 1.0 / (d as f64).sqrt());
    let bias = tape.reshape(log_w, &[n, 1, m])?;
    let sc = tape.add(sc, bias)?;
    let att = tape.softmax(sc);
    let a = tape.bmm(att, v, false, false)?;
    tape.reshape(a, &[n, d])
}

/// `sum_l softmax(lambda)_l * a_l`, zeroed for anchors no view sees.
pub fn fuse_levels(tape: &mut Tape, p: &Named, per_level: &[Var], seen: &[bool]) -> Result<Var> {
    let s = tape.shape(per_level[0]).to_vec();
    let lam = p.get("gaf.lambda")?;
    let lam = tape.softmax(lam);
    let mut acc: Option<Var> = None;
    for (l, &a) in per_level.iter().enumerate() {
        let w = tape.slice(lam, 0, l, 1)?;
        let w = tape.expand(w, &s)?;
        let term = tape.mul(a, w)?;
        acc = Some(match acc {
            None => term,
            Some(x) => tape.add(x, term)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Config("no pyramid levels".into()))?;
    let gate: Vec<f64> = seen.iter().flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, s[1])).collect();
    let gate = tape.constant(Tensor::from_parts(s, gate));
    tape.mul(acc, gate)
}

/// FFN decode of `[f_pc; f_img]` into refined Gaussian attributes.
pub fn update_gaussian(tape: &mut Tape, cfg: &GafConfig, p: &Named, mu: Var, f_pc: Var, f_img: Var) -> Result<GaussianVars> {
    let x = tape.concat(&[f_pc, f_img], 1)?;
    let h = dense(tape, x, p.get("gaf.ffn.l1.w")?, p.get("gaf.ffn.l1.b")?)?;
    let h = tape.gelu(h);
    let raw = dense(tape, h, p.get("gaf.ffn.l2.w")?, p.get("gaf.ffn.l2.b")?)?;
    decode_update(tape, cfg, mu, raw)
}

/// Raw head output `[N, 10 + C]` to Gaussian attributes.
pub fn decode_update(tape: &mut Tape, cfg: &GafConfig, mu: Var, raw: Var) -> Result<GaussianVars> {
    let width = tape.shape(raw)[1];
    if width <= UPDATE_GEOMETRY {
        return Err(Error::shape("update_gaussian", format!("head width {width}")));
    }
    let dmu = tape.slice(raw, 1, 0, 3)?;
    let dmu = match cfg.delta_max {
        Some(dm) => {
            let t = tape.tanh(dmu);
            tape.scale(t, dm)
        }
        None => dmu,
    };
    let new_mu = tape.add(mu, dmu)?;
    let s = tape.slice(raw, 1, 3, 3)?;
    let s = tape.softplus(s);
    let s = tape.offset(s, cfg.s_min);
    let log_scale = tape.log(s);
    let rot = tape.slice(raw, 1, 6, 4)?;
    let sem = tape.slice(raw, 1, UPDATE_GEOMETRY, width - UPDATE_GEOMETRY)?;
    Ok(GaussianVars { mu: new_mu, rot, log_scale, sem })
}

/// One or more refinement passes over all anchors. `voxel_features` holds the
/// encoded voxel rows of `index`.
pub fn gaf_forward_var(
    tape: &mut Tape,
    cfg: &GafConfig,
    p: &Named,
    g: GaussianVars,
    voxel_features: Var,
    index: &VoxelIndex,
    views: &[ViewVars],
) -> Result<GaussianVars> {
    cfg.validate()?;
    if views.iter().any(|v| v.levels.len() != cfg.levels()) {
        return Err(Error::shape("gaf_forward", format!("views must carry {} pyramid levels", cfg.levels())));
    }
    if tape.shape(voxel_features) != [index.coords.len(), cfg.d_pc] {
        return Err(Error::shape("gaf_forward", format!("voxel features {:?} vs d_pc {}", tape.shape(voxel_features), cfg.d_pc)));
    }
    let mut g = g;
    for _ in 0..cfg.iterations {
        let n = tape.shape(g.mu)[0];
        let radius: Vec<f64> = tape.value(g.log_scale).data().chunks(3).map(|s| cfg.k_geo * s.iter().map(|v| v.exp()).sum::<f64>() / 3.0).collect();
        let f_pc = anchor_geometry_feature(tape, g.mu, voxel_features, index, &radius, cfg.gamma)?;
        let f_img = if views.is_empty() {
            tape.constant(Tensor::zeros(&[n, cfg.d]))
        } else {
            let offsets = guided_offsets(tape, cfg, p, f_pc)?;
            let pix: Vec<(Var, Vec<bool>)> = views.iter().map(|v| project_var(tape, g.mu, v.camera)).collect::<Result<_>>()?;
            let seen: Vec<bool> = (0..n).map(|i| pix.iter().any(|(_, vis)| vis[i])).collect();
            let mut per_level = Vec::with_capacity(cfg.levels());
            for l in 0..cfg.levels() {
                let tokens = level_tokens(tape, cfg, l, views, &pix, offsets)?;
                let (slots, log_w) = if cfg.gvr_enabled {
                    let (z, _, lw) = geo_vlad(tape, p, &tokens, f_pc)?;
                    (z, lw)
                } else {
                    raw_slots(tape, &tokens)?
                };
                let slots = film(tape, p, slots, f_pc)?;
                per_level.push(level_attention(tape, p, l, slots, log_w, f_pc)?);
            }
            fuse_levels(tape, p, &per_level, &seen)?
        };
        g = update_gaussian(tape, cfg, p, g.mu, f_pc, f_img)?;
    }
    Ok(g)
}
