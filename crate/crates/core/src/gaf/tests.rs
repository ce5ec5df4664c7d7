//! Composition oracles and invariances of the fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::{gradcheck_many, BoundParams, GradCheckOptions, ParamSet, Tape, Tensor, Var};
use crate::geometry::{Pose, Vec3};
use crate::scene::{Camera, GridSpec, Image};
use crate::splat::GaussianVars;

fn camera(width: usize, height: usize, focal: f64) -> Camera {
    Camera {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        extrinsics: Pose::identity(),
        width,
        height,
    }
}

fn tiny_config() -> GafConfig {
    GafConfig {
        d_pc: 6,
        d: 4,
        strides: vec![4],
        n_off: 1,
        radii: vec![0.3],
        kappa: 1.0,
        codewords: 1,
        k_geo: 1.5,
        gamma: 3.0,
        delta_max: Some(2.0),
        s_min: 0.05,
        iterations: 1,
        ggs_enabled: true,
        gvr_enabled: true,
        max_points_per_voxel: 10,
        offset_hidden: 5,
        ffn_hidden: 7,
        init_scale: 0.4,
    }
}

fn random_tensor(shape: &[usize], sd: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Fusion parameters with every entry perturbed so no term vanishes.
fn noisy_params(cfg: &GafConfig, c: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_gaf(&mut p, cfg, c, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, StandardNormal>(StandardNormal);
        }
    }
    p
}

struct Fixture {
    index: VoxelIndex,
    features: Tensor,
    maps: Vec<(usize, usize, usize, Tensor)>,
    cameras: Vec<Camera>,
}

fn tiny_fixture(cfg: &GafConfig, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new([-1.0, -1.0, 1.0], 0.5, [4, 4, 4]).unwrap();
    let coords = vec![[1, 1, 2], [2, 1, 1], [2, 1, 2], [3, 3, 3]];
    let features = random_tensor(&[coords.len(), cfg.d_pc], 1.0, &mut rng);
    let s = cfg.strides[0];
    let (h, w) = (8 / s, 8 / s);
    Fixture {
        index: VoxelIndex::new(spec, coords),
        features,
        maps: vec![(h, w, s, random_tensor(&[h * w, cfg.d], 1.0, &mut rng))],
        cameras: vec![camera(8, 8, 4.0)],
    }
}

struct Attrs {
    mu: Vec<f64>,
    rot: Vec<f64>,
    log_scale: Vec<f64>,
    sem: Vec<f64>,
}

fn run_fusion(cfg: &GafConfig, params: &ParamSet, fx: &Fixture, mu: &[Vec3], log_scale: &[Vec3], c: usize) -> Attrs {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let n = mu.len();
    let g = GaussianVars {
        mu: tape.constant(Tensor::from_parts(vec![n, 3], mu.iter().flatten().copied().collect())),
        rot: tape.constant(Tensor::zeros(&[n, 4])),
        log_scale: tape.constant(Tensor::from_parts(vec![n, 3], log_scale.iter().flatten().copied().collect())),
        sem: tape.constant(Tensor::zeros(&[n, c])),
    };
    let levels: Vec<Vec<LevelVar>> = fx
        .cameras
        .iter()
        .map(|_| fx.maps.iter().map(|(h, w, s, t)| LevelVar { map: tape.constant(t.clone()), h: *h, w: *w, stride: *s }).collect())
        .collect();
    let views: Vec<ViewVars> = fx.cameras.iter().zip(&levels).map(|(camera, levels)| ViewVars { camera, levels }).collect();
    let f = tape.constant(fx.features.clone());
    let named = Named { set: params, bound: &bound };
    let out = gaf_forward_var(&mut tape, cfg, &named, g, f, &fx.index, &views).unwrap();
    let val = |v: Var| tape.value(v).data().to_vec();
    Attrs { mu: val(out.mu), rot: val(out.rot), log_scale: val(out.log_scale), sem: val(out.sem) }
}

// Plain f64 reference pieces, written independently of the tape ops.

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    (0..m).map(|j| (0..k).map(|i| x[i] * w.data()[i * m + j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[j])).collect()
}

fn layer(p: &ParamSet, x: &[f64], w: &str, b: &str) -> Vec<f64> {
    affine(x, p.get(w).unwrap(), Some(p.get(b).unwrap()))
}

fn sample(map: &Tensor, h: usize, w: usize, loc: [f64; 2]) -> Vec<f64> {
    let d = map.shape()[1];
    let gx = (loc[0] - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (loc[1] - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
    let at = |x: usize, y: usize, c: usize| map.data()[(y * w + x) * d + c];
    (0..d)
        .map(|c| {
            (1.0 - ty) * ((1.0 - tx) * at(x0, y0, c) + tx * at(x1, y0, c)) + ty * ((1.0 - tx) * at(x0, y1, c) + tx * at(x1, y1, c))
        })
        .collect()
}

/// Hand-composed forward pass for one anchor, one view, one level, one
/// offset and one codeword.
fn oracle(cfg: &GafConfig, p: &ParamSet, fx: &Fixture, mu: Vec3, log_scale: Vec3) -> Attrs {
    let d = cfg.d;
    // voxel descriptor
    let radius = cfg.k_geo * log_scale.iter().map(|v| v.exp()).sum::<f64>() / 3.0;
    let mut f_pc = vec![0.0; cfg.d_pc];
    let mut total = 0.0;
    for (row, c) in fx.index.coords.iter().enumerate() {
        let ctr = fx.index.spec.center(*c);
        let dist = (0..3).map(|a| (ctr[a] - mu[a]).powi(2)).sum::<f64>().sqrt();
        if dist <= radius {
            let w = (-cfg.gamma * dist).exp();
            total += w;
            for k in 0..cfg.d_pc {
                f_pc[k] += w * fx.features.data()[row * cfg.d_pc + k];
            }
        }
    }
    assert!(total > 0.0, "fixture must give the anchor a neighborhood");
    f_pc.iter_mut().for_each(|v| *v /= total);
    // projection and sampling
    let cam = &fx.cameras[0];
    let pix = [cam.fx * mu[0] / mu[2] + cam.cx, cam.fy * mu[1] / mu[2] + cam.cy];
    let (h, w, s, map) = &fx.maps[0];
    let base = [pix[0] / *s as f64, pix[1] / *s as f64];
    let off = if cfg.ggs_enabled {
        let hid: Vec<f64> = layer(p, &f_pc, "gaf.offset.l1.w", "gaf.offset.l1.b").into_iter().map(gelu).collect();
        let raw = layer(p, &hid, "gaf.offset.l2.w", "gaf.offset.l2.b");
        [raw[0].tanh(), raw[1].tanh()]
    } else {
        [0.0, 0.0]
    };
    let r = cfg.radii[0];
    let loc = [base[0] + r * off[0], base[1] + r * off[1]];
    assert!(loc.iter().all(|v| (0.5..=1.5).contains(v)), "fixture keeps the sample off the border");
    let x = sample(map, *h, *w, loc);
    let sigma = cfg.kappa * r;
    let weight = (-((r * off[0]).powi(2) + (r * off[1]).powi(2)) / (2.0 * sigma * sigma)).exp();
    let slot: Vec<f64> = if cfg.gvr_enabled {
        let code = p.get("gaf.codebook").unwrap().data();
        let res: Vec<f64> = (0..d).map(|k| weight * (x[k] - code[k])).collect();
        let norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = res.iter().map(|v| v / norm).collect();
        affine(&unit, p.get("gaf.Wz").unwrap(), None)
    } else {
        x
    };
    let gb = layer(p, &f_pc, "gaf.film.w", "gaf.film.b");
    let modulated: Vec<f64> = (0..d).map(|k| (1.0 + gb[k]) * slot[k] + gb[d + k]).collect();
    // a single slot takes all the attention and the single level all the
    // level weight
    let f_img = affine(&modulated, p.get("gaf.Wv.1").unwrap(), None);
    let mut joint = f_pc.clone();
    joint.extend(f_img);
    let hid: Vec<f64> = layer(p, &joint, "gaf.ffn.l1.w", "gaf.ffn.l1.b").into_iter().map(gelu).collect();
    let raw = layer(p, &hid, "gaf.ffn.l2.w", "gaf.ffn.l2.b");
    let dm = cfg.delta_max.unwrap();
    Attrs {
        mu: (0..3).map(|a| mu[a] + dm * raw[a].tanh()).collect(),
        log_scale: (3..6).map(|a| (raw[a].max(0.0) + (-raw[a].abs()).exp().ln_1p() + cfg.s_min).ln()).collect(),
        rot: raw[6..10].to_vec(),
        sem: raw[10..].to_vec(),
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}: {a:?} vs {b:?}");
    }
}

fn assert_attrs(a: &Attrs, b: &Attrs, tol: f64) {
    assert_close(&a.mu, &b.mu, tol, "mu");
    assert_close(&a.log_scale, &b.log_scale, tol, "log_scale");
    assert_close(&a.rot, &b.rot, tol, "rot");
    assert_close(&a.sem, &b.sem, tol, "sem");
}

#[test]
fn single_anchor_matches_hand_composition() {
    let mu = [0.1, -0.2, 2.0];
    let ls = [0.4f64.ln(); 3];
    for (ggs, gvr) in [(true, true), (false, true), (true, false), (false, false)] {
        let cfg = GafConfig { ggs_enabled: ggs, gvr_enabled: gvr, ..tiny_config() };
        let p = noisy_params(&cfg, 3, 7);
        let fx = tiny_fixture(&cfg, 3);
        let got = run_fusion(&cfg, &p, &fx, &[mu], &[ls], 3);
        assert_attrs(&got, &oracle(&cfg, &p, &fx, mu, ls), 1e-12);
    }
}

#[test]
fn zero_head_keeps_centers() {
    let cfg = tiny_config();
    let mut p = noisy_params(&cfg, 3, 1);
    for name in ["gaf.ffn.l2.w", "gaf.ffn.l2.b"] {
        let i = p.index_of(name).unwrap();
        p.tensors_mut()[i].data_mut().fill(0.0);
    }
    let mut fx = tiny_fixture(&cfg, 2);
    fx.maps[0].3.data_mut().fill(0.0);
    let mu = [[0.1, -0.2, 2.0], [0.3, 0.1, 1.8], [5.0, 5.0, -3.0]];
    let got = run_fusion(&cfg, &p, &fx, &mu, &[[0.0; 3]; 3], 3);
    assert_eq!(got.mu, mu.iter().flatten().copied().collect::<Vec<_>>());
    let ls = (2f64.ln() + cfg.s_min).ln();
    assert!(got.log_scale.iter().all(|v| (v - ls).abs() < 1e-15));
    assert!(got.sem.iter().chain(&got.rot).all(|v| *v == 0.0));
}

#[test]
fn init_head_starts_near_init_scale_with_identity_rotation() {
    let cfg = tiny_config();
    let mut p = ParamSet::new();
    init_gaf(&mut p, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = p.get("gaf.ffn.l2.b").unwrap().data();
    let s = b[3].max(0.0) + (-b[3].abs()).exp().ln_1p() + cfg.s_min;
    assert!((s - cfg.init_scale).abs() < 1e-12);
    assert_eq!(&b[6..10], &[1.0, 0.0, 0.0, 0.0]);
    assert!(b[..3].iter().chain(&b[10..]).all(|v| *v == 0.0));
}

#[test]
fn guided_sampling_matches_fixed_grid_at_init() {
    let cfg = GafConfig { n_off: 9, radii: vec![0.4], codewords: 3, ..tiny_config() };
    let mut p = ParamSet::new();
    init_gaf(&mut p, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let fx = tiny_fixture(&cfg, 4);
    let mu = [[0.1, -0.2, 2.0], [-0.3, 0.2, 2.2]];
    let ls = [[0.4f64.ln(); 3]; 2];
    let on = run_fusion(&cfg, &p, &fx, &mu, &ls, 3);
    let off = run_fusion(&GafConfig { ggs_enabled: false, ..cfg.clone() }, &p, &fx, &mu, &ls, 3);
    assert_attrs(&on, &off, 1e-12);
}

#[test]
fn anchors_are_permutation_equivariant() {
    let cfg = GafConfig { strides: vec![2, 4], radii: vec![0.5, 0.5], n_off: 4, codewords: 3, ..tiny_config() };
    let p = noisy_params(&cfg, 3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut fx = tiny_fixture(&cfg, 5);
    fx.maps = cfg.strides.iter().map(|&s| (8 / s, 8 / s, s, random_tensor(&[64 / (s * s), cfg.d], 1.0, &mut rng))).collect();
    fx.cameras.push(Camera { cx: 3.0, extrinsics: Pose::from_translation([0.2, 0.0, 0.1]), ..camera(8, 8, 5.0) });
    let mu: Vec<Vec3> = (0..6).map(|_| [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.6..2.4)]).collect();
    let ls: Vec<Vec3> = (0..6).map(|_| [rng.random_range(-1.2..-0.6); 3]).collect();
    let perm = [3, 0, 5, 1, 4, 2];
    let a = run_fusion(&cfg, &p, &fx, &mu, &ls, 3);
    let b = run_fusion(&cfg, &p, &fx, &perm.map(|i| mu[i]), &perm.map(|i| ls[i]), 3);
    let rows = |v: &[f64], w: usize| -> Vec<f64> { perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect() };
    assert_close(&b.mu, &rows(&a.mu, 3), 1e-12, "mu");
    assert_close(&b.log_scale, &rows(&a.log_scale, 3), 1e-12, "log_scale");
    assert_close(&b.rot, &rows(&a.rot, 4), 1e-12, "rot");
    assert_close(&b.sem, &rows(&a.sem, 3), 1e-12, "sem");
}

#[test]
fn default_layout_gives_144_tokens_per_anchor() {
    let cfg = GafConfig { d: 3, ..GafConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = ParamSet::new();
    init_gaf(&mut p, &cfg, 4, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind_constant(&mut tape);
    let named = Named { set: &p, bound: &bound };
    let cams: Vec<Camera> = (0..4).map(|_| camera(64, 64, 32.0)).collect();
    let levels: Vec<Vec<LevelVar>> = cams
        .iter()
        .map(|_| {
            cfg.strides
                .iter()
                .map(|&s| {
                    let (h, w) = (64 / s, 64 / s);
                    LevelVar { map: tape.constant(random_tensor(&[h * w, 3], 1.0, &mut rng)), h, w, stride: s }
                })
                .collect()
        })
        .collect();
    let views: Vec<ViewVars> = cams.iter().zip(&levels).map(|(camera, levels)| ViewVars { camera, levels }).collect();
    let f_pc = tape.constant(random_tensor(&[2, cfg.d_pc], 1.0, &mut rng));
    let mu = tape.constant(Tensor::from_parts(vec![2, 3], vec![0.0, 0.0, 2.0, 0.5, -0.5, 3.0]));
    let offsets = guided_offsets(&mut tape, &cfg, &named, f_pc).unwrap();
    let pix: Vec<_> = views.iter().map(|v| project_var(&mut tape, mu, v.camera).unwrap()).collect();
    let mut total = 0;
    for l in 0..cfg.levels() {
        let t = level_tokens(&mut tape, &cfg, l, &views, &pix, offsets).unwrap();
        assert_eq!(tape.shape(t.x), &[2, 36, 3]);
        assert_eq!(t.mask.data().iter().sum::<f64>(), 72.0);
        total += tape.shape(t.x)[1];
    }
    assert_eq!(total, 144);
}

fn tokens_on_tape(tape: &mut Tape, n: usize, t: usize, d: usize, mask: Vec<f64>, rng: &mut ChaCha8Rng) -> LevelTokens {
    LevelTokens {
        x: tape.constant(random_tensor(&[n, t, d], 1.0, rng)),
        log_w: tape.constant(Tensor::from_parts(vec![n, t], (0..n * t).map(|_| -rng.random_range(0.0..2.0)).collect())),
        mask: Tensor::from_parts(vec![n, t], mask),
    }
}

#[test]
fn resampler_assignment_rows_are_distributions() {
    let cfg = GafConfig { codewords: 5, ..tiny_config() };
    let p = noisy_params(&cfg, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let bound = p.bind_constant(&mut tape);
    let named = Named { set: &p, bound: &bound };
    let tokens = tokens_on_tape(&mut tape, 3, 6, cfg.d, vec![1.0; 18], &mut rng);
    let f_pc = tape.constant(random_tensor(&[3, cfg.d_pc], 1.0, &mut rng));
    let (z, alpha, log_w) = geo_vlad(&mut tape, &named, &tokens, f_pc).unwrap();
    assert_eq!(tape.shape(z), &[3, 5, cfg.d]);
    assert_eq!(tape.shape(log_w), &[3, 5]);
    for row in tape.value(alpha).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|a| *a > 0.0));
    }
    // slot weights are convex combinations of token weights
    let lw = tape.value(tokens.log_w).data().to_vec();
    for (i, row) in tape.value(log_w).data().chunks(5).enumerate() {
        let lo = lw[i * 6..(i + 1) * 6].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(row.iter().all(|v| *v >= lo - 1e-12 && *v <= 1e-12));
    }
}

#[test]
fn single_codeword_has_closed_form() {
    let cfg = tiny_config();
    let p = noisy_params(&cfg, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let bound = p.bind_constant(&mut tape);
    let named = Named { set: &p, bound: &bound };
    let (t, d) = (4, cfg.d);
    // second view misses the anchor: its two tokens are masked
    let tokens = tokens_on_tape(&mut tape, 1, t, d, vec![1.0, 1.0, 0.0, 0.0], &mut rng);
    let f_pc = tape.constant(random_tensor(&[1, cfg.d_pc], 1.0, &mut rng));
    let (z, alpha, log_w) = geo_vlad(&mut tape, &named, &tokens, f_pc).unwrap();
    assert!(tape.value(alpha).data().iter().all(|a| *a == 1.0));
    let x = tape.value(tokens.x).data().to_vec();
    let w: Vec<f64> = tape.value(tokens.log_w).data().iter().map(|v| v.exp()).collect();
    let code = p.get("gaf.codebook").unwrap().data();
    let res: Vec<f64> = (0..d).map(|k| (0..2).map(|j| w[j] * (x[j * d + k] - code[k])).sum()).collect();
    let norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = res.iter().map(|v| v / norm).collect();
    assert_close(tape.value(z).data(), &affine(&unit, p.get("gaf.Wz").unwrap(), None), 1e-12, "slot");
    let want = ((w[0] + w[1]) / 2.0).ln();
    assert!((tape.value(log_w).data()[0] - want).abs() < 1e-12);
}

#[test]
fn film_identity_and_doubling() {
    let cfg = tiny_config();
    let mut p = ParamSet::new();
    init_gaf(&mut p, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zt = random_tensor(&[2, 3, cfg.d], 1.0, &mut rng);
    let ft = random_tensor(&[2, cfg.d_pc], 1.0, &mut rng);
    let eval = |p: &ParamSet| {
        let mut tape = Tape::new();
        let bound = p.bind_constant(&mut tape);
        let named = Named { set: p, bound: &bound };
        let z = tape.constant(zt.clone());
        let f = tape.constant(ft.clone());
        let out = film(&mut tape, &named, z, f).unwrap();
        tape.value(out).data().to_vec()
    };
    assert_eq!(eval(&p), zt.data());
    let i = p.index_of("gaf.film.b").unwrap();
    p.tensors_mut()[i].data_mut()[..cfg.d].fill(1.0);
    let doubled: Vec<f64> = zt.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(eval(&p), doubled);
}

#[test]
fn attention_follows_slot_weights_when_keys_agree() {
    let d = 3;
    let mut p = ParamSet::new();
    let eye = Tensor::from_parts(vec![d, d], (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect());
    p.insert("gaf.Wq", Tensor::from_parts(vec![2, d], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7])).unwrap();
    p.insert("gaf.Wk.1", Tensor::zeros(&[d, d])).unwrap();
    p.insert("gaf.Wv.1", eye).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind_constant(&mut tape);
    let named = Named { set: &p, bound: &bound };
    let slots = tape.constant(Tensor::from_parts(vec![1, 2, d], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
    let lw = tape.constant(Tensor::from_parts(vec![1, 2], vec![0.75f64.ln(), 0.25f64.ln()]));
    let f = tape.constant(Tensor::from_parts(vec![1, 2], vec![0.4, -0.9]));
    let a = level_attention(&mut tape, &named, 0, slots, lw, f).unwrap();
    assert_close(tape.value(a).data(), &[0.5, 1.5, 3.5], 1e-14, "attention");
}

#[test]
fn unseen_anchors_get_no_image_feature() {
    let mut p = ParamSet::new();
    p.insert("gaf.lambda", Tensor::from_parts(vec![2], vec![0.3, -0.3])).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind_constant(&mut tape);
    let named = Named { set: &p, bound: &bound };
    let a = tape.constant(Tensor::from_parts(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(Tensor::from_parts(vec![2, 2], vec![-1.0, 0.0, 1.0, 1.0]));
    let out = fuse_levels(&mut tape, &named, &[a, b], &[true, false]).unwrap();
    let w0 = 1.0 / (1.0 + (-0.6f64).exp());
    let want = [w0 - (1.0 - w0), 2.0 * w0, 0.0, 0.0];
    assert_close(tape.value(out).data(), &want, 1e-14, "fused");
}

#[test]
fn decoded_update_is_bounded() {
    let cfg = tiny_config();
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::from_parts(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]));
    let zero = tape.constant(Tensor::zeros(&[2, 13]));
    let g = decode_update(&mut tape, &cfg, mu, zero).unwrap();
    assert_eq!(tape.value(g.mu), tape.value(mu));
    let big = tape.constant(Tensor::from_parts(vec![2, 13], (0..26).map(|i| if i % 2 == 0 { 1e6 } else { -1e6 }).collect()));
    let g = decode_update(&mut tape, &cfg, mu, big).unwrap();
    for (a, b) in tape.value(g.mu).data().iter().zip(tape.value(mu).data()) {
        assert!((a - b).abs() <= 2.0 + 1e-12);
    }
    let smin = cfg.s_min.ln();
    assert!(tape.value(g.log_scale).data().iter().all(|v| *v >= smin - 1e-12));
    let unbounded = GafConfig { delta_max: None, ..cfg };
    let g = decode_update(&mut tape, &unbounded, mu, big).unwrap();
    assert_eq!(tape.value(g.mu).data()[0], 1.0 + 1e6);
    assert!(decode_update(&mut tape, &unbounded, mu, mu).is_err());
}

#[test]
fn end_to_end_gradients() {
    let cfg = GafConfig {
        d_pc: 6,
        d: 4,
        strides: vec![2, 4],
        n_off: 2,
        radii: vec![0.7, 0.7],
        codewords: 2,
        offset_hidden: 4,
        ffn_hidden: 5,
        ..GafConfig::default()
    };
    let c = 3;
    let mut net = OccNet::new(cfg.clone(), c, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.sample::<f64, StandardNormal>(StandardNormal);
        }
    }
    let spec = GridSpec::new([-1.0, -1.0, 1.0], 0.5, [4, 4, 4]).unwrap();
    let pts: Vec<Vec3> = (0..40).map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(1.2..2.8)]).collect();
    let inten: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Image { width: 8, height: 8, pixels: (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
    let scene = SceneInput::new(&pts, &inten, &spec, vec![img], vec![camera(8, 8, 5.0)], &cfg).unwrap();
    let mu = Tensor::from_parts(vec![4, 3], vec![0.1, -0.2, 2.0, -0.3, 0.25, 1.7, 0.35, 0.05, 2.3, -0.1, -0.35, 2.1]);
    let rot = random_tensor(&[4, 4], 1.0, &mut rng);
    let ls = Tensor::from_parts(vec![4, 3], (0..12).map(|_| rng.random_range(-1.4..-0.9)).collect());
    let sem = random_tensor(&[4, c], 1.0, &mut rng);
    let weights: Vec<Tensor> = [3, 4, 3, c].iter().map(|&w| random_tensor(&[4, w], 1.0, &mut rng)).collect();
    let k = net.params.len();
    let mut points: Vec<Tensor> = net.params.tensors().to_vec();
    points.extend([mu, rot, ls, sem]);
    let rep = gradcheck_many(
        |tape, v| {
            let bound = BoundParams::from_vars(v[..k].to_vec());
            let g = GaussianVars { mu: v[k], rot: v[k + 1], log_scale: v[k + 2], sem: v[k + 3] };
            let out = net.forward(tape, &bound, &scene, g)?;
            let mut acc = None;
            for (x, w) in [out.mu, out.rot, out.log_scale, out.sem].into_iter().zip(&weights) {
                let w = tape.constant(w.clone());
                let term = tape.mul(x, w)?;
                let term = tape.sum(term);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.unwrap())
        },
        &points,
        &GradCheckOptions { max_per_input: Some(12), ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(rep.max_error() < 1e-5, "{rep:?}");
    // centers, scales and the encoder all receive signal
    assert!(rep.checked.iter().all(|n| *n > 0));
}
