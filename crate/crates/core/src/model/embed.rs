//! Patch tokenisation and the fixed sinusoidal tables.

use ndarray::{s, Array3, Axis};

use crate::autograd::Mat;
use crate::error::{Result, VdtError};
use crate::LatentClip;

const MAX_PERIOD: f64 = 10_000.0;

/// Patch tokens of a clip, `(frames, tokens_per_frame, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array3<f64>,
    pub patches_h: usize,
    pub patches_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Array3<f64>, patches_h: usize, patches_w: usize) -> Result<Self> {
        if tokens.shape()[1] != patches_h * patches_w {
            return Err(VdtError::ShapeMismatch {
                expected: vec![tokens.shape()[0], patches_h * patches_w, tokens.shape()[2]],
                got: tokens.shape().to_vec(),
            });
        }
        Ok(Self {
            tokens,
            patches_h,
            patches_w,
        })
    }

    /// Wrap a frame-major `(frames * P, width)` row matrix.
    pub fn from_rows(rows: Mat, patches_h: usize, patches_w: usize) -> Result<Self> {
        let p = patches_h * patches_w;
        let (n, d) = rows.dim();
        if p == 0 || n % p != 0 {
            return Err(VdtError::Indivisible {
                dim: "token rows",
                value: n,
                divisor: p,
            });
        }
        let tokens = rows
            .into_shape_with_order((n / p, p, d))
            .expect("contiguous row matrix");
        Self::new(tokens, patches_h, patches_w)
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// `(row, col)` of token `p` within its frame.
    pub fn spatial_index(&self, p: usize) -> (usize, usize) {
        (p / self.patches_w, p % self.patches_w)
    }

    /// Frame-major row matrix `(frames * P, width)`.
    pub fn to_rows(&self) -> Mat {
        let (f, p, d) = self.tokens.dim();
        self.tokens
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((f * p, d))
            .expect("standard layout")
    }
}

/// Split each frame into non-overlapping `n x n` patches flattened in
/// `(dy, dx, channel)` order. Rows are frame-major, patches row-major.
pub fn patchify(x: &LatentClip, n: usize) -> Result<TokenGrid> {
    let (f, h, w, c) = x.dim();
    if n == 0 || h % n != 0 {
        return Err(VdtError::Indivisible {
            dim: "latent height",
            value: h,
            divisor: n,
        });
    }
    if w % n != 0 {
        return Err(VdtError::Indivisible {
            dim: "latent width",
            value: w,
            divisor: n,
        });
    }
    let (ph, pw) = (h / n, w / n);
    let mut tokens = Array3::zeros((f, ph * pw, n * n * c));
    for fi in 0..f {
        for r in 0..ph {
            for col in 0..pw {
                let patch = x.slice(s![fi, r * n..(r + 1) * n, col * n..(col + 1) * n, ..]);
                let mut dst = tokens.slice_mut(s![fi, r * pw + col, ..]);
                for (d, v) in dst.iter_mut().zip(patch.iter()) {
                    *d = *v;
                }
            }
        }
    }
    TokenGrid::new(tokens, ph, pw)
}

/// Inverse of [`patchify`] for tokens of width `n * n * c`.
pub fn unpatchify(grid: &TokenGrid, n: usize, c: usize) -> Result<LatentClip> {
    if grid.width() != n * n * c {
        return Err(VdtError::ShapeMismatch {
            expected: vec![grid.frames(), grid.tokens_per_frame(), n * n * c],
            got: grid.tokens.shape().to_vec(),
        });
    }
    let (ph, pw) = (grid.patches_h, grid.patches_w);
    let mut out = LatentClip::zeros((grid.frames(), ph * n, pw * n, c));
    for fi in 0..grid.frames() {
        for p in 0..grid.tokens_per_frame() {
            let (r, col) = grid.spatial_index(p);
            let src = grid.tokens.slice(s![fi, p, ..]);
            let mut dst = out.slice_mut(s![fi, r * n..(r + 1) * n, col * n..(col + 1) * n, ..]);
            for (d, v) in dst.iter_mut().zip(src.iter()) {
                *d = *v;
            }
        }
    }
    Ok(out)
}

/// Interleaved sinusoidal encoding `(sin(pos w_0), cos(pos w_0), ...)` with
/// `w_i = 10000^(-2i/d)`.
pub fn sincos_1d(pos: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let omega = MAX_PERIOD.powf(-2.0 * i as f64 / d as f64);
        out[2 * i] = (pos * omega).sin();
        out[2 * i + 1] = (pos * omega).cos();
    }
    out
}

/// Fixed spatial `(P, d)` and temporal `(frames, d)` tables. The spatial
/// entry of patch `(r, c)` is the row code in the first half of the width and
/// the column code in the second half.
pub fn positional_embeddings(
    frames: usize,
    patches_h: usize,
    patches_w: usize,
    d: usize,
) -> Result<(Mat, Mat)> {
    if !d.is_multiple_of(2) {
        return Err(VdtError::OddWidth(d));
    }
    if !d.is_multiple_of(4) {
        return Err(VdtError::Indivisible {
            dim: "embedding width",
            value: d,
            divisor: 4,
        });
    }
    let half = d / 2;
    let mut spatial = Mat::zeros((patches_h * patches_w, d));
    for r in 0..patches_h {
        for c in 0..patches_w {
            let mut row = spatial.row_mut(r * patches_w + c);
            for (i, v) in sincos_1d(r as f64, half)
                .into_iter()
                .chain(sincos_1d(c as f64, half))
                .enumerate()
            {
                row[i] = v;
            }
        }
    }
    Ok((spatial, temporal_table(0, frames, d)?))
}

/// Temporal rows for absolute frame indices `offset..offset + frames`.
pub fn temporal_table(offset: usize, frames: usize, d: usize) -> Result<Mat> {
    if !d.is_multiple_of(2) {
        return Err(VdtError::OddWidth(d));
    }
    let mut out = Mat::zeros((frames, d));
    for (f, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (i, v) in sincos_1d((offset + f) as f64, d).into_iter().enumerate() {
            row[i] = v;
        }
    }
    Ok(out)
}

/// Sum of spatial and temporal codes for `frames` consecutive frames starting
/// at absolute index `offset`, frame-major.
pub fn token_positions(
    offset: usize,
    frames: usize,
    patches_h: usize,
    patches_w: usize,
    d: usize,
) -> Result<Mat> {
    let (spatial, _) = positional_embeddings(0, patches_h, patches_w, d)?;
    let temporal = temporal_table(offset, frames, d)?;
    let p = spatial.nrows();
    let mut out = Mat::zeros((frames * p, d));
    for f in 0..frames {
        let mut block = out.slice_mut(s![f * p..(f + 1) * p, ..]);
        block.assign(&spatial);
        block += &temporal.row(f);
    }
    Ok(out)
}

/// Sinusoidal basis of a diffusion timestep, as a `1 x d` row.
pub fn timestep_basis(t: usize, d: usize) -> Mat {
    Mat::from_shape_vec((1, d), sincos_1d(t as f64, d)).expect("row shape")
}
