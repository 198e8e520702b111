//! Band estimation: sound propagation of a feature-space region through the
//! prediction head by interval bound propagation (IBP).
//!
//! An affine layer maps a box with center `c` and radius `r` to center
//! `W c + b` and radius `|W| r`; ReLU clamps both endpoints at zero. Every
//! affine step is widened by a bound on its floating-point rounding error and
//! the endpoints are pushed outward by one ulp, so the returned box contains
//! the exact real image, not just the rounded one.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::OutputBand;
use crate::error::{check_dim, Error, Result};
use crate::feature::{FeatureBand, FeatureNorm};
use crate::nn::{Dense, HeadWorkspace, SplitModel};

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperbox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidConfig("box bounds must be finite with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(p: &[f64]) -> Self {
        Self {
            lo: p.to_vec(),
            hi: p.to_vec(),
        }
    }

    /// `[c - r, c + r]` in every coordinate.
    pub fn around(center: &[f64], radius: f64) -> Self {
        Self {
            lo: center.iter().map(|c| c - radius).collect(),
            hi: center.iter().map(|c| c + radius).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h - l).collect()
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.dim() as f64
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn encloses(&self, other: &Hyperbox) -> bool {
        self.dim() == other.dim()
            && self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }

    pub fn into_band(self) -> OutputBand {
        OutputBand { lo: self.lo, hi: self.hi }
    }
}

/// Smallest box containing the feature ball. Exact for `Linf`; for `L2` the
/// box strictly contains the ball whenever the radius is positive and the
/// dimension exceeds one, which the returned flag reports.
pub fn ball_to_box(band: &FeatureBand) -> (Hyperbox, bool) {
    let strict = band.norm == FeatureNorm::L2 && band.radius > 0.0 && band.center.len() > 1;
    (Hyperbox::around(&band.center, band.radius), strict)
}

#[inline]
fn gamma(n: usize) -> f64 {
    let u = f64::EPSILON * 0.5;
    let nu = (n + 2) as f64 * u;
    nu / (1.0 - nu)
}

/// Center/radius image of an affine layer with a rounding-error allowance.
/// `radius_term(i)` is the radius of output `i` in exact arithmetic and
/// `abs_center_term(i)` is `sum_j |w_ij c_j|`.
fn affine_bounds(layer: &Dense, center: &[f64], radius_term: impl Fn(usize) -> f64, abs_center_term: impl Fn(usize) -> f64) -> Hyperbox {
    let g = gamma(layer.in_dim + 1);
    let mut lo = Vec::with_capacity(layer.out_dim);
    let mut hi = Vec::with_capacity(layer.out_dim);
    for i in 0..layer.out_dim {
        let c = crate::nn::dot(layer.row(i), center) + layer.bias[i];
        let r = radius_term(i);
        let slack = g * (abs_center_term(i) + layer.bias[i].abs() + r);
        let r = r * (1.0 + g) + slack;
        lo.push((c - r).next_down());
        hi.push((c + r).next_up());
    }
    Hyperbox { lo, hi }
}

fn box_affine(layer: &Dense, input: &Hyperbox) -> Hyperbox {
    let center: Vec<f64> = input.lo.iter().zip(&input.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let radius: Vec<f64> = input
        .lo
        .iter()
        .zip(&input.hi)
        .zip(&center)
        .map(|((l, h), c)| {
            let r = (h - c).max(c - l).max(0.0);
            if r > 0.0 {
                r.next_up()
            } else {
                r
            }
        })
        .collect();
    affine_bounds(
        layer,
        &center,
        |i| layer.row(i).iter().zip(&radius).map(|(w, r)| w.abs() * r).sum(),
        |i| layer.row(i).iter().zip(&center).map(|(w, c)| (w * c).abs()).sum(),
    )
}

fn relu_box(b: &mut Hyperbox) {
    b.lo.iter_mut().for_each(|v| *v = v.max(0.0));
    b.hi.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn propagate_rest(model: &SplitModel, mut cur: Hyperbox, start: usize) -> Hyperbox {
    if model.head_has_relu(start) {
        relu_box(&mut cur);
    }
    for (j, layer) in model.head_layers().iter().enumerate().skip(start + 1) {
        cur = box_affine(layer, &cur);
        if model.head_has_relu(j) {
            relu_box(&mut cur);
        }
    }
    cur
}

/// Output box containing `g(v)` for every `v` in `input_box`.
pub fn ibp_propagate(model: &SplitModel, input_box: &Hyperbox) -> Result<Hyperbox> {
    check_dim("IBP input box", model.feature_dim(), input_box.dim())?;
    let first = &model.head_layers()[0];
    let cur = box_affine(first, input_box);
    Ok(propagate_rest(model, cur, 0))
}

/// Output box for a feature ball. The first head layer is bounded exactly
/// per coordinate through the dual norm of each weight row (`l1` rows for an
/// `Linf` ball, `l2` rows for an `L2` ball); later layers use IBP. For `Linf`
/// this coincides with `ibp_propagate(ball_to_box(band))`.
pub fn propagate_ball(model: &SplitModel, band: &FeatureBand) -> Result<Hyperbox> {
    let cur = first_layer_bounds(model, band)?;
    Ok(propagate_rest(model, cur, 0))
}

/// Exact (up to rounding) bounds on the first head layer's pre-activation
/// over the ball.
fn first_layer_bounds(model: &SplitModel, band: &FeatureBand) -> Result<Hyperbox> {
    check_dim("feature ball center", model.feature_dim(), band.center.len())?;
    if !(band.radius >= 0.0) || !band.radius.is_finite() {
        return Err(Error::InvalidConfig(format!("feature ball radius {} must be finite and nonnegative", band.radius)));
    }
    let first = &model.head_layers()[0];
    Ok(affine_bounds(
        first,
        &band.center,
        |i| band.radius * dual_norm(first.row(i), band.norm),
        |i| first.row(i).iter().zip(&band.center).map(|(w, c)| (w * c).abs()).sum(),
    ))
}

fn dual_norm(row: &[f64], norm: FeatureNorm) -> f64 {
    match norm {
        FeatureNorm::Linf => row.iter().map(|w| w.abs()).sum(),
        FeatureNorm::L2 => row.iter().map(|w| w * w).sum::<f64>().sqrt(),
    }
}

/// How band estimation bounds the head's image of a feature ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    /// Interval bound propagation after an exact first layer.
    Ibp,
    /// Backward linear relaxation of every ReLU, intersected with the IBP box.
    #[default]
    Crown,
}

/// Sound output box for the feature ball under `method`.
pub fn estimate_box(model: &SplitModel, band: &FeatureBand, method: BoundMethod) -> Result<Hyperbox> {
    match method {
        BoundMethod::Ibp => propagate_ball(model, band),
        BoundMethod::Crown => crown_propagate_ball(model, band),
    }
}

/// Output box from backward linear bound propagation.
///
/// Each unstable ReLU with pre-activation bounds `[l, u]` is sandwiched
/// between `relu(z) >= s z` (`s` is 1 when `u > -l`, else 0) and the chord
/// `relu(z) <= u (z - l) / (u - l)`. The resulting linear function of the
/// feature is maximized over the ball through the dual norm. Intermediate
/// pre-activation bounds come from the same pass and are intersected with
/// IBP, so the result is never looser than [`propagate_ball`].
pub fn crown_propagate_ball(model: &SplitModel, band: &FeatureBand) -> Result<Hyperbox> {
    let layers = model.head_layers();
    // pre[j]: bounds on the pre-activation of head layer j.
    let mut pre: Vec<Hyperbox> = vec![first_layer_bounds(model, band)?];
    for m in 1..layers.len() {
        let mut ibp_in = pre[m - 1].clone();
        if model.head_has_relu(m - 1) {
            relu_box(&mut ibp_in);
        }
        let ibp = box_affine(&layers[m], &ibp_in);
        let lo = backward_bound(model, band, m, &pre, false);
        let hi = backward_bound(model, band, m, &pre, true);
        pre.push(Hyperbox {
            lo: ibp.lo.iter().zip(&lo).map(|(a, b)| a.max(*b)).collect(),
            hi: ibp.hi.iter().zip(&hi).map(|(a, b)| a.min(*b)).collect(),
        });
    }
    let mut out = pre.pop().expect("head has layers");
    if model.head_has_relu(layers.len() - 1) {
        relu_box(&mut out);
    }
    Ok(out)
}

/// Upper (or lower) linear bound on every pre-activation of head layer `m`
/// given bounds `pre[0..m]`, maximized (or minimized) over the ball.
fn backward_bound(model: &SplitModel, band: &FeatureBand, m: usize, pre: &[Hyperbox], upper: bool) -> Vec<f64> {
    let layers = model.head_layers();
    let target = &layers[m];
    let rows = target.out_dim;
    // Lambda is rows x width, stored row-major; `mag` mirrors it with absolute
    // values to size the rounding allowance.
    let mut lam = target.weights.clone();
    let mut mag: Vec<f64> = lam.iter().map(|w| w.abs()).collect();
    let mut cst: Vec<f64> = target.bias.clone();
    let mut cst_mag: Vec<f64> = cst.iter().map(|b| b.abs()).collect();
    let mut ops = target.in_dim + 1;
    for j in (0..m).rev() {
        let layer = &layers[j];
        let width = layer.out_dim;
        let bounds = &pre[j];
        let has_relu = model.head_has_relu(j);
        for i in 0..rows {
            let row = &mut lam[i * width..(i + 1) * width];
            let mrow = &mut mag[i * width..(i + 1) * width];
            for k in 0..width {
                if !has_relu {
                    continue;
                }
                let (l, u) = (bounds.lo[k], bounds.hi[k]);
                let lambda = row[k];
                let (slope, intercept) = if u <= 0.0 {
                    (0.0, 0.0)
                } else if l >= 0.0 {
                    (1.0, 0.0)
                } else {
                    // Maximizing with a positive weight (or minimizing with a
                    // negative one) needs the chord; otherwise the lower line.
                    if (lambda >= 0.0) == upper {
                        let s = u / (u - l);
                        (s, -s * l)
                    } else {
                        (if u > -l { 1.0 } else { 0.0 }, 0.0)
                    }
                };
                cst[i] += lambda * intercept;
                cst_mag[i] += (lambda * intercept).abs();
                row[k] = lambda * slope;
                mrow[k] *= slope;
            }
        }
        // Pull back through the affine layer: Lambda <- Lambda W, cst += Lambda b.
        let in_dim = layer.in_dim;
        let mut next = vec![0.0; rows * in_dim];
        let mut next_mag = vec![0.0; rows * in_dim];
        for i in 0..rows {
            for k in 0..width {
                let a = lam[i * width + k];
                let am = mag[i * width + k];
                if am == 0.0 {
                    continue;
                }
                cst[i] += a * layer.bias[k];
                cst_mag[i] += am * layer.bias[k].abs();
                let w = layer.row(k);
                let out = &mut next[i * in_dim..(i + 1) * in_dim];
                let out_mag = &mut next_mag[i * in_dim..(i + 1) * in_dim];
                for t in 0..in_dim {
                    out[t] += a * w[t];
                    out_mag[t] += am * w[t].abs();
                }
            }
        }
        lam = next;
        mag = next_mag;
        ops += width + 2;
    }
    let d = band.center.len();
    let g = gamma(ops + d + 2);
    (0..rows)
        .map(|i| {
            let row = &lam[i * d..(i + 1) * d];
            let mrow = &mag[i * d..(i + 1) * d];
            let lin = crate::nn::dot(row, &band.center);
            let spread = band.radius * dual_norm(row, band.norm);
            let size = mrow.iter().zip(&band.center).map(|(a, c)| a * c.abs()).sum::<f64>()
                + band.radius * dual_norm(mrow, band.norm)
                + cst_mag[i];
            let slack = g * size * 2.0;
            if upper {
                (lin + cst[i] + spread * (1.0 + g) + slack).next_up()
            } else {
                (lin + cst[i] - spread * (1.0 + g) - slack).next_down()
            }
        })
        .collect()
}

/// Draws a point uniformly from the feature ball into `out`.
pub fn sample_ball<R: rand::Rng>(band: &FeatureBand, rng: &mut R, out: &mut [f64]) {
    let d = band.center.len();
    match band.norm {
        FeatureNorm::Linf => {
            let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
            for (o, c) in out.iter_mut().zip(&band.center) {
                *o = c + band.radius * unit.sample(rng);
            }
        }
        FeatureNorm::L2 => {
            let mut norm2 = 0.0;
            for o in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *o = z;
                norm2 += z * z;
            }
            let u: f64 = Uniform::new(0.0, 1.0).expect("valid range").sample(rng);
            let scale = band.radius * u.powf(1.0 / d as f64) / norm2.sqrt().max(f64::MIN_POSITIVE);
            for (o, c) in out.iter_mut().zip(&band.center) {
                *o = c + scale * *o;
            }
        }
    }
}

/// Componentwise min/max of `g` over `n` uniform draws from the ball; an
/// inner approximation of the exact image box.
pub fn sample_inner_box(model: &SplitModel, band: &FeatureBand, n: usize, seed: u64) -> Result<Hyperbox> {
    check_dim("feature ball center", model.feature_dim(), band.center.len())?;
    if n == 0 {
        return Err(Error::Empty("inner-box sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = HeadWorkspace::new(model);
    let mut v = vec![0.0; band.center.len()];
    let k = model.output_dim();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for _ in 0..n {
        sample_ball(band, &mut rng, &mut v);
        let out = ws.forward(model, &v);
        for j in 0..k {
            lo[j] = lo[j].min(out[j]);
            hi[j] = hi[j].max(out[j]);
        }
    }
    Ok(Hyperbox { lo, hi })
}

/// Componentwise min/max of `g` at points reached by projected gradient
/// steps inside the ball, starting from its center. Every value is attained
/// by some feature in the ball, so the box is an inner approximation.
pub fn attack_inner_box(model: &SplitModel, band: &FeatureBand, steps: usize) -> Result<Hyperbox> {
    check_dim("feature ball center", model.feature_dim(), band.center.len())?;
    let mut ws = HeadWorkspace::new(model);
    let center = &band.center;
    let base = ws.forward(model, center).to_vec();
    let (mut lo, mut hi) = (base.clone(), base);
    if band.radius == 0.0 {
        return Ok(Hyperbox { lo, hi });
    }
    let step = band.radius / 4.0;
    let mut grad = vec![0.0; center.len()];
    let mut v = vec![0.0; center.len()];
    for k in 0..model.output_dim() {
        for dir in [-1.0, 1.0] {
            v.copy_from_slice(center);
            for _ in 0..steps {
                let value = ws.output_grad(model, &v, k, &mut grad);
                update_extremes(&mut lo[k], &mut hi[k], value);
                match band.norm {
                    FeatureNorm::Linf => {
                        for ((vi, g), c) in v.iter_mut().zip(&grad).zip(center) {
                            *vi = (*vi + dir * step * g.signum()).clamp(c - band.radius, c + band.radius);
                        }
                    }
                    FeatureNorm::L2 => {
                        let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                        if gn == 0.0 {
                            break;
                        }
                        v.iter_mut().zip(&grad).for_each(|(vi, g)| *vi += dir * step * g / gn);
                        let dist = v.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
                        if dist > band.radius {
                            let shrink = band.radius / dist;
                            v.iter_mut().zip(center).for_each(|(a, c)| *a = c + (*a - c) * shrink);
                        }
                    }
                }
            }
            let value = ws.forward(model, &v)[k];
            update_extremes(&mut lo[k], &mut hi[k], value);
        }
    }
    Ok(Hyperbox { lo, hi })
}

fn update_extremes(lo: &mut f64, hi: &mut f64, value: f64) {
    *lo = lo.min(value);
    *hi = hi.max(value);
}

/// `mean width(inner) / mean width(outer)`, or 1 when the outer box is a point.
pub fn tightness_ratio(inner: &Hyperbox, outer: &Hyperbox) -> f64 {
    let o = outer.mean_width();
    if o > 0.0 {
        inner.mean_width() / o
    } else {
        1.0
    }
}
