//! Image metrics and held-out evaluation reports.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::deform::PriorMode;
use crate::error::{Error, Result};
use crate::imgbuf::{Image, Mask};
use crate::losses::{self, SSIM_WINDOW};
use crate::train::Model;

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if (mask.width, mask.height) != (img.width, img.height) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Argument("mask selects no pixels".into()));
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all channels of the selected pixels, capped at 100 dB.
pub fn psnr(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<f64> {
    pred.same_shape(gt)?;
    let (mut sum, mut count) = (0.0, 0usize);
    if let Some(m) = mask {
        check_mask(pred, m)?;
    }
    for (p, (a, b)) in pred.data.chunks_exact(3).zip(gt.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m.data[p]) {
            continue;
        }
        sum += (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum::<f64>();
        count += 3;
    }
    if count == 0 {
        return Err(Error::Argument("cannot compute PSNR of an empty image".into()));
    }
    let mse = sum / count as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM averaged over the windows whose centre pixel is selected. Falls back
/// to every window when the mask covers none of the window centres.
pub fn ssim(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<f64> {
    let Some(m) = mask else {
        return losses::ssim(pred, gt);
    };
    check_mask(pred, m)?;
    let map = losses::ssim_map(pred, gt)?;
    let ow = pred.width + 1 - SSIM_WINDOW;
    let half = SSIM_WINDOW / 2;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, s) in map.iter().enumerate() {
        let (x, y) = (i % ow + half, i / ow + half);
        if m.data[y * m.width + x] {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(map.iter().sum::<f64>() / map.len() as f64);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// 1 or 2 for the held-out settings, absent for the training split.
    pub setting: Option<u8>,
    pub prior_mode: PriorMode,
    pub iteration: u64,
    pub frames: Vec<FrameMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: f64,
    pub ssim_masked: f64,
    /// Reserved for perceptual metrics computed by external tools.
    pub lpips: Option<f64>,
    pub dists: Option<f64>,
}

impl EvalReport {
    pub fn from_frames(split: Split, prior_mode: PriorMode, iteration: u64, frames: Vec<FrameMetrics>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Argument(format!("{split} split has no frames to evaluate")));
        }
        let n = frames.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            split,
            setting: match split {
                Split::Train => None,
                Split::Setting1 => Some(1),
                Split::Setting2 => Some(2),
            },
            prior_mode,
            iteration,
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            psnr_masked: mean(|m| m.psnr_masked),
            ssim_masked: mean(|m| m.ssim_masked),
            frames,
            lpips: None,
            dists: None,
        })
    }

    /// The aggregate PSNR selected by `masked`.
    pub fn headline_psnr(&self, masked: bool) -> f64 {
        if masked {
            self.psnr_masked
        } else {
            self.psnr
        }
    }
}

/// Metrics for one dataset frame. Training frames use their per-frame code;
/// held-out frames are rendered with T = 0.
pub fn evaluate_frame(model: &Model, dataset: &Dataset, frame: usize) -> Result<FrameMetrics> {
    let rec = dataset.frame(frame)?;
    let code = model.field.train_frames.binary_search(&frame).ok().map(|_| frame);
    let img = model.render(&dataset.mesh, &rec.gamma_exp, rec.gamma_pose, code, &rec.camera)?;
    let mask = &dataset.masks[frame];
    Ok(FrameMetrics {
        frame,
        psnr: psnr(&img, &rec.image, None)?,
        ssim: ssim(&img, &rec.image, None)?,
        psnr_masked: psnr(&img, &rec.image, Some(mask))?,
        ssim_masked: ssim(&img, &rec.image, Some(mask))?,
    })
}

/// Evaluates every frame of `split`, spreading frames over the available cores.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, iteration: u64) -> Result<EvalReport> {
    let frames = dataset.split(split);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(frames.len()).max(1);
    let chunk = frames.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<FrameMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> = frames
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&f| evaluate_frame(model, dataset, f)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("evaluation worker panicked".into())))).collect()
    });
    let mut all = Vec::with_capacity(frames.len());
    for r in results {
        all.extend(r?);
    }
    EvalReport::from_frames(split, model.field.mode(), iteration, all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(w: usize, h: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = noisy(16, 16, 1);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn mse_of_one_hundredth_is_20_db() {
        let a = Image::filled(12, 12, [0.5; 3]);
        let b = Image::filled(12, 12, [0.6; 3]);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn random_pair_matches_direct_formula() {
        let a = noisy(13, 7, 2);
        let b = noisy(13, 7, 3);
        let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
        let direct = -10.0 * mse.log10();
        assert!((psnr(&a, &b, None).unwrap() - direct).abs() < 1e-12);
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let a = noisy(20, 16, 4);
        let b = noisy(20, 16, 5);
        let m = Mask::full(20, 16);
        assert_eq!(psnr(&a, &b, Some(&m)).unwrap(), psnr(&a, &b, None).unwrap());
        let full = ssim(&a, &b, None).unwrap();
        assert!((ssim(&a, &b, Some(&m)).unwrap() - full).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, None).unwrap(), ssim(&b, &a, None).unwrap());
    }

    #[test]
    fn mask_restricts_pixels() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let mut b = a.clone();
        b.set_pixel(0, 0, [1.0; 3]);
        let mut m = Mask::full(4, 4);
        m.data[0] = false;
        assert_eq!(psnr(&a, &b, Some(&m)).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn empty_mask_and_shape_mismatch_are_errors() {
        let a = noisy(12, 12, 6);
        let m = Mask { width: 12, height: 12, data: vec![false; 144] };
        assert_eq!(psnr(&a, &a, Some(&m)).unwrap_err().kind(), "argument");
        let b = noisy(12, 11, 7);
        assert_eq!(psnr(&a, &b, None).unwrap_err().kind(), "shape");
    }

    #[test]
    fn aggregate_is_the_mean() {
        let f = |i, p| FrameMetrics { frame: i, psnr: p, ssim: 0.5, psnr_masked: p + 1.0, ssim_masked: 0.25 };
        let r = EvalReport::from_frames(Split::Setting1, PriorMode::Fixed, 7, vec![f(0, 20.0), f(1, 30.0)]).unwrap();
        assert_eq!(r.psnr, 25.0);
        assert_eq!(r.psnr_masked, 26.0);
        assert_eq!(r.setting, Some(1));
        let js = serde_json::to_value(&r).unwrap();
        assert!(js.get("lpips").is_some() && js.get("dists").is_some());
        assert_eq!(js["prior_mode"], "fixed");
    }
}
