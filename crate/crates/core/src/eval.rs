//! Image and geometry metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GaussianSet, Image, LidarCloud};
use crate::spatial::KdTree;

/// Peak signal-to-noise ratio in dB for images in [0,1]; `+∞` for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("PSNR inputs differ in shape".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean SSIM, sharing the loss implementation.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    crate::losses::ssim(a, b)
}

/// Which nearest-neighbor direction [`lidar_rmse`] measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseDirection {
    /// Each Gaussian center to its nearest LiDAR point.
    #[default]
    GaussianToLidar,
    /// Each LiDAR point to its nearest Gaussian center.
    LidarToGaussian,
}

/// Root-mean-square nearest-neighbor distance between Gaussian centers and
/// the LiDAR cloud, in meters.
pub fn lidar_rmse(set: &GaussianSet, cloud: &LidarCloud, direction: RmseDirection) -> Result<f64> {
    if set.is_empty() || cloud.is_empty() {
        return Err(Error::InvalidInput("LiDAR RMSE needs Gaussians and LiDAR points".into()));
    }
    let sum: f64 = match direction {
        RmseDirection::GaussianToLidar => set
            .gaussians
            .iter()
            .map(|g| cloud.nearest(&g.position).map_or(0.0, |(_, d)| d * d))
            .sum::<f64>(),
        RmseDirection::LidarToGaussian => {
            let centers: Vec<_> = set.gaussians.iter().map(|g| g.position).collect();
            let tree = KdTree::build(&centers)?;
            cloud
                .points
                .iter()
                .map(|p| tree.nearest(&centers, p).1.powi(2))
                .sum::<f64>()
        }
    };
    let n = match direction {
        RmseDirection::GaussianToLidar => set.len(),
        RmseDirection::LidarToGaussian => cloud.len(),
    };
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute depth error over pixels valid in both maps; `None` when no
/// pixel qualifies.
pub fn depth_mae(rendered: &[f64], rendered_valid: &[bool], truth: &[f64], truth_valid: &[bool]) -> Result<Option<f64>> {
    if rendered.len() != truth.len() || rendered_valid.len() != truth.len() || truth_valid.len() != truth.len() {
        return Err(Error::ShapeMismatch("depth maps differ in size".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..truth.len() {
        if rendered_valid[p] && truth_valid[p] {
            sum += (rendered[p] - truth[p]).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Per-view metrics as written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    /// `+∞` for identical images, serialized as `"inf"`.
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    #[serde(with = "inf_as_string")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_mae: Option<f64>,
    pub lidar_rmse: f64,
    pub lidar_rmse_reverse: f64,
    pub gaussian_count: usize,
}

/// JSON has no infinity; PSNR of identical images is written as `"inf"`.
mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected value '{t}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::Vector3;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rmse_single_gaussian() {
        let cloud = LidarCloud::new(vec![Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0)], None).unwrap();
        let set = GaussianSet::new(0, vec![Gaussian::isotropic(Vector3::new(0.0, 2.0, 0.0), 0.1, 0.5, [0.5; 3])]);
        assert!((lidar_rmse(&set, &cloud, RmseDirection::GaussianToLidar).unwrap() - 2.0).abs() < 1e-12);
        let rev = lidar_rmse(&set, &cloud, RmseDirection::LidarToGaussian).unwrap();
        assert!((rev - ((4.0 + 104.0) / 2.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_infinity() {
        let v = ViewMetrics {
            view: 0,
            psnr: f64::INFINITY,
            ssim: 1.0,
            depth_mae: None,
        };
        let text = serde_json::to_string(&v).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ViewMetrics>(&text).unwrap(), v);
    }

    #[test]
    fn depth_mae_masks() {
        let m = depth_mae(&[1.0, 2.0, 9.0], &[true, true, false], &[1.5, 1.0, 0.0], &[true, true, true]).unwrap();
        assert_eq!(m, Some(0.75));
    }
}
