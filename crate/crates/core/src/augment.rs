//! Input-space augmentations and view-pair construction.
//!
//! All augmentations take a `B x T x c` batch and a strength `p` in
//! `[0, 0.95]`; `p == 0` returns the input unchanged.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{gaussian, gaussian_vec};
use crate::space::Strategy;

/// Two augmented views of one batch. `view1[:, align1..align1+common_len]`
/// and `view2[:, align2..align2+common_len]` cover the same input span.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub align1: usize,
    pub align2: usize,
    pub common_len: usize,
}

impl ViewPair {
    pub fn common1(&self) -> Tensor {
        self.view1.narrow(1, self.align1, self.common_len).expect("alignment within view")
    }

    pub fn common2(&self) -> Tensor {
        self.view2.narrow(1, self.align2, self.common_len).expect("alignment within view")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Resize,
    Rescale,
    Jitter,
    PointMask,
    FreqMask,
    Crop,
}

use Augmentation::*;

/// Application order for each order id (1-based).
pub fn order(id: u8) -> Result<[Augmentation; 6]> {
    Ok(match id {
        1 => [Resize, Rescale, FreqMask, Jitter, PointMask, Crop],
        2 => [Resize, Rescale, FreqMask, Jitter, Crop, PointMask],
        3 => [Resize, Rescale, FreqMask, Crop, Jitter, PointMask],
        4 => [Resize, Rescale, Crop, FreqMask, Jitter, PointMask],
        5 => [Resize, Crop, Rescale, FreqMask, Jitter, PointMask],
        _ => return Err(Error::Parameter(format!("augmentation order {id} not in 1..=5"))),
    })
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=0.95).contains(&p) {
        return Err(Error::Parameter(format!("augmentation strength {p} outside [0, 0.95]")));
    }
    Ok(())
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!("expected B x T x c, got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// Linear interpolation with aligned end points.
fn interpolate(src: &[f64], len: usize) -> Vec<f64> {
    let n = src.len();
    if len == 1 || n == 1 {
        return vec![src[0]; len];
    }
    let step = (n - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            src[lo] * (1.0 - frac) + src[hi] * frac
        })
        .collect()
}

/// Time-warp each instance by a length factor `1 + n`, with `n` already
/// drawn: resample to `max(2, round(T(1+n)))` steps and back to `T`.
pub fn resize_with(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let (b, t, c) = dims(x)?;
    if t < 2 {
        return Err(Error::Data(format!("resize needs T >= 2, got {t}")));
    }
    let mut out = x.clone();
    for bi in 0..b {
        let n = factors[bi].clamp(-0.5, 0.5);
        let len = ((t as f64 * (1.0 + n)).round() as usize).max(2);
        for ci in 0..c {
            let series: Vec<f64> = (0..t).map(|ti| x.at(&[bi, ti, ci])).collect();
            let back = interpolate(&interpolate(&series, len), t);
            for (ti, v) in back.into_iter().enumerate() {
                out.set(&[bi, ti, ci], v);
            }
        }
    }
    Ok(out)
}

pub fn resize<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    let (b, t, _) = dims(x)?;
    if t < 2 {
        return Err(Error::Data(format!("resize needs T >= 2, got {t}")));
    }
    if p == 0.0 {
        return Ok(x.clone());
    }
    let factors = gaussian_vec(rng, p, b);
    resize_with(x, &factors)
}

/// Multiply each instance by `1 + n_b`.
pub fn rescale_with(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let (b, _, _) = dims(x)?;
    let mut out = x.clone();
    let per = x.len() / b.max(1);
    for (bi, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate().take(b) {
        let s = 1.0 + factors[bi];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn rescale<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    let (b, _, _) = dims(x)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    let factors = gaussian_vec(rng, p, b);
    rescale_with(x, &factors)
}

/// Elementwise additive Gaussian noise with standard deviation `p`.
pub fn jitter<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    dims(x)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += gaussian(rng, p);
    }
    Ok(out)
}

/// Zero whole timesteps (all channels) with probability `p`.
pub fn point_mask<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    let (b, t, c) = dims(x)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for row in 0..b * t {
        if rng.random::<f64>() < p {
            data[row * c..(row + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Zero the given one-sided spectrum bins of every (instance, channel)
/// series; `bins[b * c + ch]` lists the bins for that series.
pub fn freq_mask_with(x: &Tensor, bins: &[Vec<usize>]) -> Result<Tensor> {
    let (b, t, c) = dims(x)?;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(t);
    let inv = planner.plan_fft_inverse(t);
    let mut out = x.clone();
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for bi in 0..b {
        for ci in 0..c {
            let masked = &bins[bi * c + ci];
            if masked.is_empty() {
                continue;
            }
            for (ti, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(x.at(&[bi, ti, ci]), 0.0);
            }
            fwd.process(&mut buf);
            for &k in masked {
                buf[k] = Complex::new(0.0, 0.0);
                if k != 0 && t - k != k {
                    buf[t - k] = Complex::new(0.0, 0.0);
                }
            }
            inv.process(&mut buf);
            for (ti, z) in buf.iter().enumerate() {
                out.set(&[bi, ti, ci], z.re / t as f64);
            }
        }
    }
    Ok(out)
}

/// Zero a uniformly random `floor(p * (T/2 + 1))` subset of one-sided
/// frequency bins, independently per instance and channel.
pub fn freq_mask<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    let (b, t, c) = dims(x)?;
    if p == 0.0 {
        return Ok(x.clone());
    }
    let nbins = t / 2 + 1;
    let k = (p * nbins as f64).floor() as usize;
    let bins: Vec<Vec<usize>> = (0..b * c)
        .map(|_| rand::seq::index::sample(rng, nbins, k).into_vec())
        .collect();
    freq_mask_with(x, &bins)
}

/// Crop indices `t1 <= t2 < t1' <= t2'` with overlap `t1' - t2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub t1: usize,
    pub t2: usize,
    pub t1_end: usize,
    pub t2_end: usize,
}

pub fn sample_crop<R: Rng + ?Sized>(t: usize, p: f64, rng: &mut R) -> CropWindow {
    let overlap = ((p * t as f64).round() as usize).clamp(1, t);
    let t2 = rng.random_range(0..=t - overlap);
    let t1 = rng.random_range(0..=t2);
    let t1_end = t2 + overlap;
    let t2_end = rng.random_range(t1_end..=t);
    CropWindow { t1, t2, t1_end, t2_end }
}

/// Two overlapping sub-sequences sharing `round(p T)` steps.
pub fn random_crop<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<ViewPair> {
    check_p(p)?;
    if p == 0.0 {
        return Err(Error::Parameter("crop strength 0 means cropping is disabled".into()));
    }
    let (_, t, _) = dims(x)?;
    if t == 0 {
        return Err(Error::Data("cannot crop an empty series".into()));
    }
    let w = sample_crop(t, p, rng);
    Ok(ViewPair {
        view1: x.narrow(1, w.t1, w.t1_end - w.t1)?,
        view2: x.narrow(1, w.t2, w.t2_end - w.t2)?,
        align1: w.t2 - w.t1,
        align2: 0,
        common_len: w.t1_end - w.t2,
    })
}

fn apply<R: Rng + ?Sized>(a: Augmentation, x: &Tensor, s: &Strategy, rng: &mut R) -> Result<Tensor> {
    match a {
        Resize => resize(x, s.resize_p, rng),
        Rescale => rescale(x, s.rescale_p, rng),
        Jitter => jitter(x, s.jitter_p, rng),
        PointMask => point_mask(x, s.point_mask_p, rng),
        FreqMask => freq_mask(x, s.freq_mask_p, rng),
        Crop => unreachable!("crop is applied by make_view_pair"),
    }
}

fn enabled(a: Augmentation, s: &Strategy) -> bool {
    let p = match a {
        Resize => s.resize_p,
        Rescale => s.rescale_p,
        Jitter => s.jitter_p,
        PointMask => s.point_mask_p,
        FreqMask => s.freq_mask_p,
        Crop => s.crop_p,
    };
    p > 0.0
}

/// Apply the strategy's enabled augmentations in its order. Augmentations
/// before the crop act once on the shared input; the crop defines the pair;
/// later augmentations are drawn independently per view. Without cropping
/// each view gets its own draws over the full length.
pub fn make_view_pair<R: Rng + ?Sized>(x: &Tensor, strategy: &Strategy, rng: &mut R) -> Result<ViewPair> {
    let (_, t, _) = dims(x)?;
    let seq = order(strategy.aug_order)?;
    if strategy.crop_p == 0.0 {
        let mut views = [x.clone(), x.clone()];
        for v in &mut views {
            for &a in seq.iter().filter(|&&a| a != Crop && enabled(a, strategy)) {
                *v = apply(a, v, strategy, rng)?;
            }
        }
        let [view1, view2] = views;
        return Ok(ViewPair { view1, view2, align1: 0, align2: 0, common_len: t });
    }
    let split = seq.iter().position(|&a| a == Crop).expect("every order contains crop");
    let mut shared = x.clone();
    for &a in seq[..split].iter().filter(|&&a| enabled(a, strategy)) {
        shared = apply(a, &shared, strategy, rng)?;
    }
    let mut pair = random_crop(&shared, strategy.crop_p, rng)?;
    for &a in seq[split + 1..].iter().filter(|&&a| enabled(a, strategy)) {
        pair.view1 = apply(a, &pair.view1, strategy, rng)?;
    }
    for &a in seq[split + 1..].iter().filter(|&&a| enabled(a, strategy)) {
        pair.view2 = apply(a, &pair.view2, strategy, rng)?;
    }
    Ok(pair)
}
