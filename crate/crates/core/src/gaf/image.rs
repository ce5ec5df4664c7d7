use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ops::gather_rows;
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::Image;

/// One feature level of one view, `[h * w, d]` row-major.
#[derive(Clone, Copy, Debug)]
pub struct LevelVar {
    pub map: Var,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Value-level multi-scale features of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `(h, w, stride, [h * w, d])` per level, strides increasing.
    pub levels: Vec<(usize, usize, usize, Tensor)>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("feature pyramid has no levels".into()));
        }
        let d = self.levels[0].3.last_dim();
        for (k, (h, w, s, t)) in self.levels.iter().enumerate() {
            if t.shape() != [h * w, d] {
                return Err(Error::shape("feature_pyramid", format!("level {k}: {:?} for {h}x{w}x{d}", t.shape())));
            }
            if k > 0 && *s <= self.levels[k - 1].2 {
                return Err(Error::Config("pyramid strides must increase strictly".into()));
            }
        }
        Ok(())
    }
}

/// Checks that each stride divides the next and the last divides the image.
pub fn check_strides(strides: &[usize], width: usize, height: usize) -> Result<()> {
    if strides.is_empty() || strides[0] == 0 {
        return Err(Error::Config("need at least one positive pyramid stride".into()));
    }
    for p in strides.windows(2) {
        if p[1] <= p[0] || p[1] % p[0] != 0 {
            return Err(Error::Config(format!("strides must increase and divide each other, got {strides:?}")));
        }
    }
    let last = *strides.last().expect("nonempty");
    if width % last != 0 || height % last != 0 {
        return Err(Error::Config(format!("image {width}x{height} is not divisible by stride {last}")));
    }
    Ok(())
}

fn patch_fan_in(strides: &[usize], level: usize, d: usize) -> usize {
    if level == 0 {
        strides[0] * strides[0] * 3
    } else {
        let r = strides[level] / strides[level - 1];
        r * r * d
    }
}

pub fn backbone_layout(strides: &[usize], d: usize) -> Vec<(String, Vec<usize>)> {
    (0..strides.len())
        .flat_map(|l| {
            [(format!("img.l{}.w", l + 1), vec![patch_fan_in(strides, l, d), d]), (format!("img.l{}.b", l + 1), vec![d])]
        })
        .collect()
}

pub fn init_backbone(params: &mut ParamSet, strides: &[usize], d: usize, rng: &mut impl Rng) -> Result<()> {
    for (name, shape) in backbone_layout(strides, d) {
        let n: usize = shape.iter().product();
        let t = if shape.len() == 2 {
            let sd = (2.0 / shape[0] as f64).sqrt();
            Tensor::from_parts(shape, (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t)?;
    }
    Ok(())
}

/// `[h * w, 3]` with colors shifted to zero mean.
pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_parts(vec![img.width * img.height, 3], img.pixels.iter().flat_map(|p| p.map(|c| c - 0.5)).collect())
}

/// Row indices grouping non-overlapping `r x r` blocks of an `h x w` map,
/// block-major.
fn block_index(h: usize, w: usize, r: usize) -> Vec<usize> {
    let (bh, bw) = (h / r, w / r);
    let mut out = Vec::with_capacity(h * w);
    for by in 0..bh {
        for bx in 0..bw {
            for y in 0..r {
                for x in 0..r {
                    out.push((by * r + y) * w + bx * r + x);
                }
            }
        }
    }
    out
}

/// Strided patch convolutions: level 1 embeds `s1 x s1` pixel patches, each
/// later level merges `r x r` blocks of the previous one. GELU after each.
pub fn pyramid_var(tape: &mut Tape, image: Var, width: usize, height: usize, strides: &[usize], w: &[Var]) -> Result<Vec<LevelVar>> {
    check_strides(strides, width, height)?;
    if w.len() != 2 * strides.len() {
        return Err(Error::shape("pyramid", format!("{} weight tensors for {} levels", w.len(), strides.len())));
    }
    let mut out: Vec<LevelVar> = Vec::with_capacity(strides.len());
    let (mut src, mut h, mut wd, mut prev) = (image, height, width, 1);
    for (l, &s) in strides.iter().enumerate() {
        let r = s / prev;
        let ch = tape.shape(src)[1];
        let idx = Arc::new(block_index(h, wd, r));
        let g = gather_rows(tape, src, idx)?;
        let (nh, nw) = (h / r, wd / r);
        let g = tape.reshape(g, &[nh * nw, r * r * ch])?;
        let z = tape.matmul(g, w[2 * l])?;
        let z = tape.add(z, w[2 * l + 1])?;
        let f = tape.gelu(z);
        out.push(LevelVar { map: f, h: nh, w: nw, stride: s });
        (src, h, wd, prev) = (f, nh, nw, s);
    }
    Ok(out)
}

pub(crate) fn backbone_vars(params: &ParamSet, bound: &BoundParams, levels: usize) -> Result<Vec<Var>> {
    (1..=levels)
        .flat_map(|l| [format!("img.l{l}.w"), format!("img.l{l}.b")])
        .map(|name| params.index_of(&name).map(|i| bound.var(i)).ok_or_else(|| Error::Input(format!("missing parameter {name}"))))
        .collect()
}

/// Value-level pyramid of one image.
pub fn extract_pyramid(img: &Image, params: &ParamSet, strides: &[usize]) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let w = backbone_vars(params, &bound, strides.len())?;
    let x = tape.constant(image_tensor(img));
    let levels = pyramid_var(&mut tape, x, img.width, img.height, strides, &w)?;
    Ok(FeaturePyramid { levels: levels.iter().map(|l| (l.h, l.w, l.stride, tape.value(l.map).clone())).collect() })
}
