//! Image-quality metrics, a Fréchet distance over pluggable features and the
//! collision probe.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::error::{Result, VdtError};
use crate::training::AdamW;
use crate::VideoClip;

/// Value reported by [`psnr`] for identical inputs, in dB.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VdtError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(VdtError::InvalidInput("empty clip".into()));
    }
    Ok(())
}

/// Normalised Gaussian window of odd size `n`.
fn gaussian_window(n: usize, sigma: f64) -> Array2<f64> {
    let c = (n / 2) as f64;
    let w = Array2::from_shape_fn((n, n), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let total = w.sum();
    w / total
}

/// Window-weighted sums over every valid placement.
fn filter_valid(img: &Array2<f64>, win: &Array2<f64>) -> Array2<f64> {
    let n = win.nrows();
    let (h, w) = img.dim();
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| {
        (&img.slice(s![i..i + n, j..j + n]) * win).sum()
    })
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, win: &Array2<f64>) -> f64 {
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let mu_a = filter_valid(a, win);
    let mu_b = filter_valid(b, win);
    let aa = filter_valid(&(a * a), win);
    let bb = filter_valid(&(b * b), win);
    let ab = filter_valid(&(a * b), win);
    let mut total = 0.0;
    for ((((ma, mb), saa), sbb), sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
/// frames and channels. Frames smaller than the window use the largest odd
/// window that fits.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_shapes(a, b)?;
    let (f, h, w, c) = a.dim();
    let side = h.min(w);
    let n = SSIM_WINDOW.min(if side % 2 == 1 { side } else { side - 1 });
    let win = gaussian_window(n, SSIM_SIGMA);
    let mut total = 0.0;
    for fi in 0..f {
        for ch in 0..c {
            let pa = a.slice(s![fi, .., .., ch]).to_owned();
            let pb = b.slice(s![fi, .., .., ch]).to_owned();
            total += ssim_plane(&pa, &pb, &win);
        }
    }
    Ok(total / (f * c) as f64)
}

/// `10 log10(1 / MSE)` for signals in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn moments(feats: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let x = DMatrix::from_fn(n, dim, |i, j| feats[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` over sample means and
/// unbiased covariances. The trace of the cross term is computed as
/// `tr sqrt(R S_b R)` with `R = sqrt(S_a)`, which keeps everything symmetric.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.len() < 2 || feats_b.len() < 2 {
        return Err(VdtError::InvalidInput(
            "need at least two samples per side".into(),
        ));
    }
    let dim = feats_a[0].len();
    if dim == 0 || feats_a.iter().chain(feats_b).any(|f| f.len() != dim) {
        return Err(VdtError::ShapeMismatch {
            expected: vec![dim],
            got: feats_a
                .iter()
                .chain(feats_b)
                .map(Vec::len)
                .filter(|&l| l != dim)
                .take(1)
                .collect(),
        });
    }
    let (ma, ca) = moments(feats_a, dim);
    let (mb, cb) = moments(feats_b, dim);
    let root_a = psd_sqrt(&ca);
    let inner = &root_a * &cb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Average-pool each frame by `factor` and flatten frames in time order.
pub fn pooled_features(clip: &VideoClip, factor: usize) -> Result<Vec<f64>> {
    let (_, h, w, _) = clip.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(VdtError::Indivisible {
            dim: "frame size",
            value: h,
            divisor: factor,
        });
    }
    let pooled = crate::data::Tokenizer::Pool { factor }.encode(clip)?;
    Ok(pooled.iter().copied().collect())
}

/// Default features for the toy Fréchet distance: 4x4-pooled frames.
pub fn toy_features(clip: &VideoClip) -> Result<Vec<f64>> {
    pooled_features(clip, 4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    /// Spatial average-pooling factor before flattening.
    pub pool: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            lr: 3e-3,
            pool: 2,
            train_fraction: 0.6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Held-out examples.
    pub n_test: usize,
    /// Standard error of a chance-level (p = 0.5) accuracy on `n_test`.
    pub chance_se: f64,
}

impl ProbeResult {
    /// Whether accuracy exceeds 0.5 by more than `k` chance standard errors.
    pub fn beats_chance(&self, k: f64) -> bool {
        self.accuracy > 0.5 + k * self.chance_se
    }
}

/// Train a two-layer perceptron on pooled `(observed ++ future)` frames to
/// predict the collision label, and report held-out accuracy. The classes are
/// balanced by dropping surplus examples of the majority class first, so
/// chance accuracy is 0.5.
pub fn collision_probe(
    observed: &[VideoClip],
    future: &[VideoClip],
    labels: &[bool],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if observed.len() != future.len() || observed.len() != labels.len() {
        return Err(VdtError::InvalidInput(format!(
            "{} observed clips, {} futures, {} labels",
            observed.len(),
            future.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let per_class = pos.len().min(neg.len());
    if per_class < 2 {
        return Err(VdtError::InvalidInput(
            "both labels need at least two examples".into(),
        ));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut idx: Vec<usize> = pos[..per_class]
        .iter()
        .chain(&neg[..per_class])
        .copied()
        .collect();
    idx.shuffle(&mut rng);

    let mut rows = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut f = pooled_features(&observed[i], cfg.pool)?;
        f.extend(pooled_features(&future[i], cfg.pool)?);
        rows.push(f);
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(VdtError::InvalidInput("clips differ in shape".into()));
    }
    let n_train =
        ((idx.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, idx.len() - 1);
    let x = Mat::from_shape_fn((idx.len(), dim), |(r, c)| rows[r][c]);
    // standardise with training statistics
    let train = x.slice(s![..n_train, ..]);
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let std = train.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-6));
    let x = (&x - &mean) / &std;
    let y: Vec<f64> = idx
        .iter()
        .map(|&i| f64::from(u8::from(labels[i])))
        .collect();

    let init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        use rand::Rng;
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
    };
    let mut params = vec![
        init(dim, cfg.hidden, &mut rng),
        Mat::zeros((1, cfg.hidden)),
        init(cfg.hidden, 1, &mut rng),
        Mat::zeros((1, 1)),
    ];
    let logits = |tape: &mut Tape, params: &[Mat], xs: Mat, track: bool| {
        let vars: Vec<_> = params
            .iter()
            .map(|p| {
                if track {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let xv = tape.constant(xs);
        let h = tape.linear(xv, vars[0], vars[1]);
        let h = tape.gelu(h);
        (tape.linear(h, vars[2], vars[3]), vars)
    };
    let x_train = x.slice(s![..n_train, ..]).to_owned();
    let y_train = y[..n_train].to_vec();
    let mut opt = AdamW::new(cfg.lr, 1e-2, params.len());
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let (z, vars) = logits(&mut tape, &params, x_train.clone(), true);
        let loss = tape.bce_with_logits(z, y_train.clone());
        let mut g = tape.backward(loss);
        let grads: Vec<Option<Mat>> = vars.iter().map(|&v| g.take(v)).collect();
        opt.step_mats(&mut params, &grads);
    }
    let mut tape = Tape::new();
    let (z, _) = logits(
        &mut tape,
        &params,
        x.slice(s![n_train.., ..]).to_owned(),
        false,
    );
    let n_test = idx.len() - n_train;
    let correct = tape
        .value(z)
        .iter()
        .zip(&y[n_train..])
        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / n_test as f64,
        n_test,
        chance_se: 0.5 / (n_test as f64).sqrt(),
    })
}

/// Deterministically permuted labels, for the chance-level control.
pub fn shuffled_labels(labels: &[bool], seed: u64) -> Vec<bool> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_clip: Vec<ClipMetrics>,
    pub ssim: f64,
    pub psnr: f64,
    /// Fréchet distance over toy features; not comparable to FVD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_toy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    /// Probe accuracy when fed ground-truth futures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_upper_bound: Option<f64>,
}

impl MetricReport {
    /// Per-clip SSIM and PSNR of `preds` against `truths`, their means, and
    /// the toy Fréchet distance when there are at least two clips.
    pub fn compare(preds: &[VideoClip], truths: &[VideoClip]) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(VdtError::InvalidInput(format!(
                "{} predictions for {} references",
                preds.len(),
                truths.len()
            )));
        }
        let per_clip = preds
            .iter()
            .zip(truths)
            .map(|(p, t)| {
                Ok(ClipMetrics {
                    ssim: ssim(p, t)?,
                    psnr: psnr(p, t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_clip.len() as f64;
        let fd_toy = if preds.len() >= 2
            && preds[0].dim().1.is_multiple_of(4)
            && preds[0].dim().2.is_multiple_of(4)
        {
            let fa = preds.iter().map(toy_features).collect::<Result<Vec<_>>>()?;
            let fb = truths
                .iter()
                .map(toy_features)
                .collect::<Result<Vec<_>>>()?;
            Some(frechet_distance(&fa, &fb)?)
        } else {
            None
        };
        Ok(Self {
            ssim: per_clip.iter().map(|m| m.ssim).sum::<f64>() / n,
            psnr: per_clip.iter().map(|m| m.psnr).sum::<f64>() / n,
            per_clip,
            fd_toy,
            probe_accuracy: None,
            probe_upper_bound: None,
        })
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("clips".to_string(), self.per_clip.len().to_string()),
            ("ssim".to_string(), format!("{:.4}", self.ssim)),
            ("psnr_db".to_string(), format!("{:.3}", self.psnr)),
        ];
        if let Some(v) = self.fd_toy {
            rows.push(("fd_toy".into(), format!("{v:.4}")));
        }
        if let Some(v) = self.probe_accuracy {
            rows.push(("probe_accuracy".into(), format!("{v:.4}")));
        }
        if let Some(v) = self.probe_upper_bound {
            rows.push(("probe_upper_bound".into(), format!("{v:.4}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<width$}  {v:>10}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn noise_clip(seed: u64, shape: (usize, usize, usize, usize)) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::from_shape_simple_fn(shape, || rng.random_range(0.0..1.0))
    }

    fn smooth_clip() -> VideoClip {
        VideoClip::from_shape_fn((2, 16, 16, 3), |(f, y, x, c)| {
            0.5 + 0.4 * ((x as f64 * 0.4 + f as f64).sin() * (y as f64 * 0.3 + c as f64).cos())
        })
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = smooth_clip();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = noise_clip(1, x.dim());
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-9);
        assert!(ssim(&x, &noise_clip(1, (2, 16, 8, 3))).is_err());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let zeros = VideoClip::zeros((1, 16, 16, 3));
        let ones = VideoClip::ones((1, 16, 16, 3));
        let c1: f64 = 1e-4;
        // variances vanish: ((0 + c1)(0 + c2)) / ((0 + 1 + c1)(0 + c2))
        let expect = c1 / (1.0 + c1);
        assert!((ssim(&zeros, &ones).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_falls_as_noise_grows() {
        let x = smooth_clip();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let z = VideoClip::from_shape_simple_fn(x.dim(), || normal.sample(&mut rng));
        let scores: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|e| ssim(&x, &(&x + &(&z * *e))).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn ssim_small_frames_shrink_window() {
        let x = noise_clip(3, (1, 8, 8, 1));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_values() {
        let x = noise_clip(4, (2, 8, 8, 3)).mapv(|v| v * 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        assert!((psnr(&x, &x.mapv(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-6);
        assert!((psnr(&x, &x.mapv(|v| v + 0.5)).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for off in [0.01, 0.02, 0.05, 0.1, 0.3] {
            let p = psnr(&x, &x.mapv(|v| v + off)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    fn gaussian_samples(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, sigma).unwrap();
        (0..n).map(|_| vec![d.sample(&mut rng)]).collect()
    }

    #[test]
    fn frechet_identity_symmetry_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
        assert!(frechet_distance(&a[..1], &b).is_err());
        assert!(frechet_distance(&a, &[vec![0.0; 5], vec![1.0; 5]]).is_err());
        // rank-deficient covariance (fewer samples than dims)
        assert!(frechet_distance(&a[..3], &b[..4]).unwrap() >= 0.0);
    }

    #[test]
    fn frechet_matches_1d_closed_form() {
        // (mu_a - mu_b)^2 + (s_a - s_b)^2 = 1 + 0.25
        let mut errs = Vec::new();
        for n in [100, 10_000, 200_000] {
            let a = gaussian_samples(n, 0.0, 1.0, 6);
            let b = gaussian_samples(n, 1.0, 1.5, 7);
            errs.push((frechet_distance(&a, &b).unwrap() - 1.25).abs());
        }
        assert!(errs[2] < 0.02, "{errs:?}");
        assert!(errs[2] < errs[0]);
    }

    #[test]
    fn report_aggregates_and_formats() {
        let a = vec![smooth_clip(), noise_clip(8, (2, 16, 16, 3))];
        let b = vec![smooth_clip(), noise_clip(9, (2, 16, 16, 3))];
        let r = MetricReport::compare(&a, &b).unwrap();
        assert_eq!(r.per_clip.len(), 2);
        assert!((r.ssim - (r.per_clip[0].ssim + r.per_clip[1].ssim) / 2.0).abs() < 1e-15);
        assert_eq!(r.per_clip[0].psnr, PSNR_CAP);
        assert!(r.fd_toy.is_some());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("fd_toy"));
        assert!(r.to_table().contains("ssim"));
        assert!(MetricReport::compare(&a, &b[..1]).is_err());
    }

    #[test]
    fn probe_learns_a_visible_label_and_not_a_shuffled_one() {
        // label = whether the top-left quadrant is bright
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut obs = Vec::new();
        let mut fut = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..300 {
            let bright = rng.random_bool(0.5);
            let mut clip =
                VideoClip::from_shape_simple_fn((1, 8, 8, 3), || rng.random_range(0.0..0.5));
            if bright {
                clip.slice_mut(s![.., ..4, ..4, ..])
                    .mapv_inplace(|v| v + 0.5);
            }
            obs.push(VideoClip::from_shape_simple_fn((1, 8, 8, 3), || {
                rng.random_range(0.0..1.0)
            }));
            fut.push(clip);
            labels.push(bright);
        }
        let cfg = ProbeConfig::default();
        let r = collision_probe(&obs, &fut, &labels, &cfg).unwrap();
        assert!(r.beats_chance(3.0), "{r:?}");
        assert!((0.0..=1.0).contains(&r.accuracy));
        let shuffled = collision_probe(&obs, &fut, &shuffled_labels(&labels, 11), &cfg).unwrap();
        assert!(
            (shuffled.accuracy - 0.5).abs() <= 3.0 * shuffled.chance_se,
            "{shuffled:?}"
        );
        assert!(collision_probe(&obs, &fut, &labels[..10], &cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ssim_symmetric_and_bounded(seed in 0u64..500, h in 3usize..14, w in 3usize..14) {
                let a = noise_clip(seed, (2, h, w, 3));
                let b = noise_clip(seed + 1, (2, h, w, 3));
                let ab = ssim(&a, &b).unwrap();
                let ba = ssim(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }

            #[test]
            fn frechet_non_negative(seed in 0u64..500, shift in -1.0f64..1.0, dim in 1usize..5) {
                let a = noise_clip(seed, (12, 1, dim, 1));
                let b = noise_clip(seed + 9, (9, 1, dim, 1)).mapv(|v| v * 0.5 + shift);
                let rows = |x: &VideoClip| x.outer_iter().map(|f| f.iter().copied().collect()).collect::<Vec<Vec<f64>>>();
                prop_assert!(frechet_distance(&rows(&a), &rows(&b)).unwrap() >= 0.0);
            }

            #[test]
            fn psnr_falls_as_error_grows(seed in 0u64..500, k in 1.01f64..3.0) {
                let x = noise_clip(seed, (1, 6, 6, 3)).mapv(|v| 0.25 + 0.5 * v);
                let d = noise_clip(seed + 3, (1, 6, 6, 3)).mapv(|v| (v - 0.5) * 0.1);
                let near = &x + &d;
                let far = &x + &(&d * k);
                prop_assert!(psnr(&far, &x).unwrap() < psnr(&near, &x).unwrap());
            }
        }
    }
}
