//! Structured Token Augmentation: variance-gated Gaussian perturbation
//! of raw image patches before embedding.
//!
//! Each patch with population variance below the threshold `tau` is
//! perturbed by `alpha * eps` with `eps ~ N(0, sigma^2)` drawn i.i.d.
//! per pixel element; patches at or above the threshold are left
//! bitwise untouched. Perturbed values are clamped back to [0, 1] so
//! the patch-grid invariant survives augmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitError};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Hyperparameters of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaConfig {
    /// Perturbation scale; 0 disables the mechanism exactly.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Variance threshold in squared pixel units of the [0,1] scale.
    /// `tau <= 0` masks nothing because variances are nonnegative.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Noise standard deviation.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Apply only while training (the default); inference stays
    /// deterministic unless this is switched off.
    #[serde(default = "default_train_only")]
    pub train_only: bool,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.1
}
fn default_sigma() -> f64 {
    0.1
}
fn default_train_only() -> bool {
    true
}

/// The high-threshold ablation setting.
pub const TAU_HIGH: f64 = 0.3;
/// The low-threshold ablation setting.
pub const TAU_LOW: f64 = 0.1;

impl Default for StaConfig {
    fn default() -> Self {
        StaConfig { alpha: 0.1, tau: 0.1, sigma: 0.1, train_only: true }
    }
}

impl StaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(VitError::Parse {
                key: "sta.alpha".into(),
                reason: format!("must be nonnegative, got {}", self.alpha),
            });
        }
        if self.sigma < 0.0 {
            return Err(VitError::Parse {
                key: "sta.sigma".into(),
                reason: format!("must be nonnegative, got {}", self.sigma),
            });
        }
        Ok(())
    }
}

/// Row-major grid of flattened image patches with pixel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// [N×P] where P = patch_h * patch_w * channels.
    pub patches: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(patches: Tensor, grid_h: usize, grid_w: usize) -> Result<PatchGrid> {
        let (n, p) = patches.dims2()?;
        if n != grid_h * grid_w {
            return Err(VitError::ShapeMismatch {
                op: "patch_grid",
                detail: format!("{n} patches vs grid {grid_h}x{grid_w}"),
            });
        }
        if p == 0 {
            return Err(VitError::EmptyPatch);
        }
        if let Some(v) = patches.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VitError::OutOfRange {
                what: format!("patch pixel {v} outside [0,1]"),
            });
        }
        Ok(PatchGrid { patches, grid_h, grid_w })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.dims2().expect("patches are 2-D").1
    }
}

/// Population variance (divide by P) over all pixels and channels of
/// each patch, computed with Welford's single-pass update.
pub fn patch_variance(grid: &PatchGrid) -> Result<Tensor> {
    let (n, p) = grid.patches.dims2()?;
    if p == 0 {
        return Err(VitError::EmptyPatch);
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = grid.patches.row(i);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (j + 1) as f64;
            m2 += delta * (x - mean);
        }
        out[i] = m2 / p as f64;
    }
    Tensor::from_vec(vec![n], out)
}

/// Binary mask: 1 where variance is strictly below `tau`, else 0.
pub fn sta_mask(variances: &Tensor, tau: f64) -> Tensor {
    variances.map(|v| if v < tau { 1.0 } else { 0.0 })
}

/// Applies the augmentation. Noise is drawn from `rng` only for masked
/// patches, in patch-index order, one Gaussian per pixel element —
/// replaying the same stream state reproduces `eps` exactly. When
/// `training` is false and the config is train-only, the input is
/// returned bitwise unchanged and the stream is not consumed.
pub fn sta_augment(
    grid: &PatchGrid,
    cfg: &StaConfig,
    rng: &mut RngStream,
    training: bool,
) -> Result<PatchGrid> {
    if cfg.train_only && !training {
        return Ok(grid.clone());
    }
    let (n, p) = grid.patches.dims2()?;
    let variances = patch_variance(grid)?;
    let mask = sta_mask(&variances, cfg.tau);
    let mut data = grid.patches.data().to_vec();
    for i in 0..n {
        if mask.data()[i] == 0.0 {
            continue;
        }
        for j in 0..p {
            let eps = rng.next_gaussian(cfg.sigma);
            let v = data[i * p + j] + cfg.alpha * eps;
            data[i * p + j] = v.clamp(0.0, 1.0);
        }
    }
    Ok(PatchGrid {
        patches: Tensor::from_vec(vec![n, p], data)?,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from_rows(rows: &[Vec<f64>]) -> PatchGrid {
        let n = rows.len();
        PatchGrid::new(Tensor::from_rows(rows).unwrap(), 1, n).unwrap()
    }

    #[test]
    fn variance_of_constant_patch_is_zero() {
        let g = grid_from_rows(&[vec![0.5, 0.5, 0.5, 0.5]]);
        let v = patch_variance(&g).unwrap();
        assert_eq!(v.data()[0], 0.0);
    }

    #[test]
    fn variance_hand_computed() {
        let g = grid_from_rows(&[vec![0.0, 1.0, 0.0, 1.0]]);
        let v = patch_variance(&g).unwrap();
        assert!((v.data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = RngStream::new(21);
        // 16x16x3 patch.
        let p = 16 * 16 * 3;
        let data: Vec<f64> = (0..p).map(|_| rng.next_uniform()).collect();
        let g = PatchGrid::new(Tensor::from_vec(vec![1, p], data.clone()).unwrap(), 1, 1).unwrap();
        let got = patch_variance(&g).unwrap().data()[0];
        // Independent two-pass oracle.
        let mean: f64 = data.iter().sum::<f64>() / p as f64;
        let expect: f64 = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / p as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn mask_uses_strict_inequality() {
        let v = Tensor::from_vec(vec![2], vec![0.05, 0.1]).unwrap();
        let m = sta_mask(&v, 0.1);
        assert_eq!(m.data(), &[1.0, 0.0]);
    }

    #[test]
    fn mask_matches_elementwise_oracle() {
        let mut rng = RngStream::new(22);
        for _ in 0..100 {
            let n = 1 + (rng.next_below(32) as usize);
            let tau = rng.uniform_in(-0.1, 0.4);
            let vals: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 0.3)).collect();
            let v = Tensor::from_vec(vec![n], vals.clone()).unwrap();
            let m = sta_mask(&v, tau);
            for (got, x) in m.data().iter().zip(&vals) {
                let want = if *x < tau { 1.0 } else { 0.0 };
                assert_eq!(*got, want);
            }
        }
    }

    #[test]
    fn tau_nonpositive_masks_nothing() {
        let v = Tensor::from_vec(vec![3], vec![0.0, 0.01, 0.2]).unwrap();
        assert!(sta_mask(&v, 0.0).data().iter().all(|&m| m == 0.0));
        assert!(sta_mask(&v, -1.0).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn alpha_zero_is_bitwise_identity() {
        let g = grid_from_rows(&[vec![0.2, 0.2, 0.2], vec![0.9, 0.1, 0.5]]);
        let cfg = StaConfig { alpha: 0.0, ..StaConfig::default() };
        let mut rng = RngStream::new(3);
        let out = sta_augment(&g, &cfg, &mut rng, true).unwrap();
        assert!(out.patches.bitwise_eq(&g.patches));
    }

    #[test]
    fn high_variance_patches_bitwise_unchanged() {
        // Both patches have variance 0.25 >= tau.
        let g = grid_from_rows(&[vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0, 0.0]]);
        let cfg = StaConfig { tau: 0.1, ..StaConfig::default() };
        let mut rng = RngStream::new(4);
        let out = sta_augment(&g, &cfg, &mut rng, true).unwrap();
        assert!(out.patches.bitwise_eq(&g.patches));
    }

    #[test]
    fn train_only_skips_inference() {
        let g = grid_from_rows(&[vec![0.5, 0.5]]);
        let cfg = StaConfig::default();
        let mut rng = RngStream::new(5);
        let before = rng.state();
        let out = sta_augment(&g, &cfg, &mut rng, false).unwrap();
        assert!(out.patches.bitwise_eq(&g.patches));
        assert_eq!(rng.state(), before);

        let relaxed = StaConfig { train_only: false, ..cfg };
        let out = sta_augment(&g, &relaxed, &mut rng, false).unwrap();
        assert!(!out.patches.bitwise_eq(&g.patches));
    }

    #[test]
    fn perturbation_matches_replayed_noise() {
        // (output - input) must equal alpha * M * eps with eps replayed
        // from the same stream state, before clamping.
        let g = grid_from_rows(&[
            vec![0.5, 0.5, 0.5, 0.5],  // variance 0 -> masked
            vec![0.0, 1.0, 0.0, 1.0],  // variance 0.25 -> untouched
            vec![0.49, 0.5, 0.51, 0.5], // tiny variance -> masked
        ]);
        let cfg = StaConfig { alpha: 0.05, sigma: 0.02, tau: 0.1, train_only: true };
        let rng0 = RngStream::new(77);

        let mut rng = rng0;
        let out = sta_augment(&g, &cfg, &mut rng, true).unwrap();

        // Replay: same derivations, same order, masked patches only.
        let variances = patch_variance(&g).unwrap();
        let mask = sta_mask(&variances, cfg.tau);
        let mut replay = rng0;
        let p = g.patch_dim();
        for i in 0..g.num_patches() {
            if mask.data()[i] == 0.0 {
                for j in 0..p {
                    assert_eq!(out.patches.at2(i, j), g.patches.at2(i, j));
                }
                continue;
            }
            for j in 0..p {
                let eps = replay.next_gaussian(cfg.sigma);
                let expect = (g.patches.at2(i, j) + cfg.alpha * eps).clamp(0.0, 1.0);
                assert_eq!(out.patches.at2(i, j).to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn masked_perturbation_magnitude_matches_folded_normal() {
        // Mean |delta| over many draws approaches alpha*sigma*sqrt(2/pi).
        let n_samples = 1_000_000usize;
        let cfg = StaConfig { alpha: 0.1, sigma: 0.1, tau: 0.5, train_only: true };
        let g = PatchGrid::new(
            Tensor::from_vec(vec![1, n_samples], vec![0.5; n_samples]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let mut rng = RngStream::new(99);
        let out = sta_augment(&g, &cfg, &mut rng, true).unwrap();
        let mean_abs: f64 = out
            .patches
            .data()
            .iter()
            .zip(g.patches.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n_samples as f64;
        let expect = cfg.alpha * cfg.sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_abs - expect).abs() / expect < 0.02,
            "mean |delta| {mean_abs} vs expected {expect}"
        );
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let t = Tensor::from_rows(&[vec![0.5, 1.5]]).unwrap();
        assert!(matches!(PatchGrid::new(t, 1, 1), Err(VitError::OutOfRange { .. })));
    }
}
