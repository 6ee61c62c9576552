//! The location-prediction task: Gaussian label distributions, the scoring
//! architectures, non-learning baselines, training, and prediction.

mod models;
mod train;

pub use models::{real_scale_projection_len, real_scale_text_kernel_len, SdrModel, SdrModelKind};
pub use train::{
    default_sdr_lr, eval_baseline, eval_sdr, train_sdr, EpochStats, FeatureSource, SdrEvalOutcome,
    SdrPredictor, SdrPredictorConfig, SdrTrainConfig, TrainHistory,
};

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::graph::NodeId;
use crate::tensor::{Tape, TensorResult};
use crate::text::TokenSeq;

#[derive(Debug, Error)]
pub enum SdrError {
    #[error("feature map: data length {len} does not match {c}x{h}x{w}")]
    BadFeatureLength {
        len: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("feature map dimensions must be positive")]
    EmptyFeatureMap,
    #[error("feature file: {0}")]
    FeatureFile(String),
    #[error("target ({x}, {y}) maps outside the {h}x{w} feature grid at scale {scale}")]
    TargetOutsideGrid {
        x: f64,
        y: f64,
        h: usize,
        w: usize,
        scale: f64,
    },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("average baseline requires a non-empty training set")]
    EmptyTrainingSet,
    #[error("distribution length {len} does not match {h}x{w}")]
    BadDistribution { len: usize, h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
}

/// Magic bytes opening a feature-map file.
pub const FMAP_MAGIC: &[u8; 4] = b"TDFM";

/// Dense `C×H×W` feature grid standing in for pretrained-CNN panorama
/// features. Stored as f32 (the on-disk payload precision) and widened to
/// f64 when placed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<FeatureMap, SdrError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(SdrError::EmptyFeatureMap);
        }
        if data.len() != channels * height * width {
            return Err(SdrError::BadFeatureLength {
                len: data.len(),
                c: channels,
                h: height,
                w: width,
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<FeatureMap, SdrError> {
        FeatureMap::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] += v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Places the features on a tape as a constant.
    pub fn to_tensor(&self, tape: &Tape) -> TensorResult {
        tape.constant(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Mean over the channel dimension, row-major `H×W`.
    pub fn channel_mean(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f64; hw];
        for c in 0..self.channels {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot += self.data[c * hw + i] as f64;
            }
        }
        let denom = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= denom);
        out
    }

    /// Writes the `TDFM` container: magic, u32 C/H/W, then f32
    /// little-endian channel-major payload.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FMAP_MAGIC)?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<FeatureMap, SdrError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| SdrError::FeatureFile(format!("read failed: {e}")))?;
        if bytes.len() < 16 || &bytes[..4] != FMAP_MAGIC {
            return Err(SdrError::FeatureFile("bad magic (expected TDFM)".into()));
        }
        let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(4), dim(8), dim(12));
        let expected = 16 + c * h * w * 4;
        if bytes.len() != expected {
            return Err(SdrError::FeatureFile(format!(
                "payload is {} bytes, expected {} for {c}x{h}x{w}",
                bytes.len() - 16,
                expected - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        FeatureMap::new(c, h, w, data)
    }
}

/// One location-prediction example: a description, the panorama it is
/// about, and the annotated image-pixel target.
#[derive(Debug, Clone)]
pub struct SdrExample {
    pub sentence_id: u64,
    pub pano: NodeId,
    pub tokens: TokenSeq,
    pub target_x: f64,
    pub target_y: f64,
}

/// Gaussian-smoothed label distribution over a feature grid.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    probs: Vec<f64>,
    height: usize,
    width: usize,
    peak: (usize, usize),
}

impl TargetDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `(col, row)` of the maximal cell; equals the mapped target cell.
    pub fn peak(&self) -> (usize, usize) {
        self.peak
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Maps an image-pixel coordinate to its feature-grid cell.
pub fn image_to_grid(x: f64, y: f64, scale: f64) -> (i64, i64) {
    ((x / scale).floor() as i64, (y / scale).floor() as i64)
}

/// Builds the training label: an isotropic Gaussian (in grid-cell units)
/// centered on the mapped target cell, evaluated at every cell and
/// renormalized to sum to one.
pub fn gaussian_target(
    target_x: f64,
    target_y: f64,
    grid_h: usize,
    grid_w: usize,
    scale: f64,
    sigma: f64,
) -> Result<TargetDistribution, SdrError> {
    if sigma <= 0.0 {
        return Err(SdrError::BadSigma(sigma));
    }
    if scale <= 0.0 {
        return Err(SdrError::BadScale(scale));
    }
    let (gx, gy) = image_to_grid(target_x, target_y, scale);
    if gx < 0 || gy < 0 || gx as usize >= grid_w || gy as usize >= grid_h {
        return Err(SdrError::TargetOutsideGrid {
            x: target_x,
            y: target_y,
            h: grid_h,
            w: grid_w,
            scale,
        });
    }
    let (gx, gy) = (gx as usize, gy as usize);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut probs = Vec::with_capacity(grid_h * grid_w);
    let mut total = 0.0;
    for row in 0..grid_h {
        for col in 0..grid_w {
            let dy = row as f64 - gy as f64;
            let dx = col as f64 - gx as f64;
            let p = (-(dx * dx + dy * dy) * inv).exp();
            probs.push(p);
            total += p;
        }
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(TargetDistribution {
        probs,
        height: grid_h,
        width: grid_w,
        peak: (gx, gy),
    })
}

/// Mode of a grid distribution mapped back to image pixels: the argmax cell
/// (row-major first occurrence on ties) at its cell center.
pub fn predict_location(
    probs: &[f64],
    grid_h: usize,
    grid_w: usize,
    scale: f64,
) -> Result<(f64, f64), SdrError> {
    if probs.len() != grid_h * grid_w {
        return Err(SdrError::BadDistribution {
            len: probs.len(),
            h: grid_h,
            w: grid_w,
        });
    }
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let row = best / grid_w;
    let col = best % grid_w;
    Ok(((col as f64 + 0.5) * scale, (row as f64 + 0.5) * scale))
}

/// Argmax cell `(col, row)` of a grid distribution, row-major tie-break.
pub fn argmax_cell(probs: &[f64], grid_w: usize) -> (usize, usize) {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best % grid_w, best / grid_w)
}

/// The non-learning prediction policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointBaseline {
    Random,
    Center,
    Average,
}

impl PointBaseline {
    /// Predicts an image-pixel location. `Random` draws a uniform pixel,
    /// `Center` returns the floor midpoint, `Average` returns the mean of
    /// the training targets rounded to the nearest pixel.
    pub fn predict(
        self,
        image_w: usize,
        image_h: usize,
        train_targets: &[(f64, f64)],
        rng: &mut impl Rng,
    ) -> Result<(f64, f64), SdrError> {
        match self {
            PointBaseline::Random => Ok((
                rng.gen_range(0..image_w) as f64,
                rng.gen_range(0..image_h) as f64,
            )),
            PointBaseline::Center => Ok(((image_w / 2) as f64, (image_h / 2) as f64)),
            PointBaseline::Average => {
                if train_targets.is_empty() {
                    return Err(SdrError::EmptyTrainingSet);
                }
                let n = train_targets.len() as f64;
                let sx: f64 = train_targets.iter().map(|t| t.0).sum();
                let sy: f64 = train_targets.iter().map(|t| t.1).sum();
                Ok(((sx / n).round(), (sy / n).round()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_target_sums_to_one_and_peaks_at_cell() {
        let t = gaussian_target(100.0, 50.0, 16, 32, 8.0, 3.0).unwrap();
        let sum: f64 = t.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(t.peak(), (12, 6)); // floor(100/8), floor(50/8)
        let (col, row) = argmax_cell(t.probs(), 32);
        assert_eq!((col, row), t.peak());
    }

    #[test]
    fn gaussian_target_is_isotropic() {
        let t = gaussian_target(64.0, 64.0, 16, 32, 8.0, 2.0).unwrap();
        let (gx, gy) = t.peak();
        // Cells one step away in each direction carry equal probability.
        let p = |col: usize, row: usize| t.probs()[row * 32 + col];
        let up = p(gx, gy - 1);
        let down = p(gx, gy + 1);
        let left = p(gx - 1, gy);
        let right = p(gx + 1, gy);
        assert!((up - down).abs() < 1e-12);
        assert!((left - right).abs() < 1e-12);
        assert!((up - left).abs() < 1e-12);
    }

    #[test]
    fn gaussian_target_rejects_outside_image() {
        assert!(matches!(
            gaussian_target(300.0, 10.0, 16, 32, 8.0, 3.0),
            Err(SdrError::TargetOutsideGrid { .. })
        ));
    }

    #[test]
    fn predict_location_maps_cell_centers() {
        // One-hot at cell (col 29, row 12) with scale 8: center offset +4.
        let mut probs = vec![0.0; 16 * 32];
        probs[12 * 32 + 29] = 1.0;
        let (x, y) = predict_location(&probs, 16, 32, 8.0).unwrap();
        assert_eq!((x, y), (236.0, 100.0));
    }

    #[test]
    fn predict_location_uniform_ties_to_first_cell() {
        let probs = vec![1.0 / 512.0; 512];
        let (x, y) = predict_location(&probs, 16, 32, 8.0).unwrap();
        assert_eq!((x, y), (4.0, 4.0));
    }

    #[test]
    fn center_baseline_floors_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PointBaseline::Center
            .predict(464, 100, &[], &mut rng)
            .unwrap();
        assert_eq!(p, (232.0, 50.0));
    }

    #[test]
    fn average_baseline_means_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PointBaseline::Average
            .predict(464, 100, &[(10.0, 10.0), (30.0, 20.0)], &mut rng)
            .unwrap();
        assert_eq!(p, (20.0, 15.0));
        assert!(PointBaseline::Average
            .predict(464, 100, &[], &mut rng)
            .is_err());
    }

    #[test]
    fn random_baseline_covers_the_grid() {
        // Coarse uniformity check: chi-square over a 4x4 bucketing.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (64usize, 32usize);
        let mut buckets = [0usize; 16];
        let draws = 4000;
        for _ in 0..draws {
            let (x, y) = PointBaseline::Random.predict(w, h, &[], &mut rng).unwrap();
            let bx = (x as usize * 4) / w;
            let by = (y as usize * 4) / h;
            buckets[by * 4 + bx] += 1;
        }
        let expected = draws as f64 / 16.0;
        let chi2: f64 = buckets
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        // 15 degrees of freedom; 99.9th percentile is ~37.7.
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn fmap_round_trip() {
        let mut fm = FeatureMap::zeros(2, 3, 4).unwrap();
        fm.set(1, 2, 3, 1.5);
        fm.set(0, 0, 0, -0.25);
        let mut bytes = Vec::new();
        fm.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"TDFM");
        let back = FeatureMap::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn fmap_rejects_corrupt_input() {
        assert!(FeatureMap::read_from(&mut &b"XXXX"[..]).is_err());
        let mut fm_bytes = Vec::new();
        FeatureMap::zeros(1, 2, 2).unwrap().write_to(&mut fm_bytes).unwrap();
        fm_bytes.truncate(fm_bytes.len() - 1);
        assert!(FeatureMap::read_from(&mut fm_bytes.as_slice()).is_err());
    }

    #[test]
    fn channel_mean_reduces_channels() {
        let mut fm = FeatureMap::zeros(2, 1, 2).unwrap();
        fm.set(0, 0, 0, 1.0);
        fm.set(1, 0, 0, 3.0);
        fm.set(0, 0, 1, 2.0);
        fm.set(1, 0, 1, 2.0);
        assert_eq!(fm.channel_mean(), vec![2.0, 2.0]);
    }
}
