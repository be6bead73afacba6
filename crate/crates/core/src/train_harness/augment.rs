//! Structural stand-in for reconstruction-augmented inputs: every sample gets
//! a tiny rendered face patch (depth, shaded color and albedo; 7 channels of
//! 4×4) appended to its input vector. Each class owns a tilted plane and a
//! color; samples see it under a small random yaw.

use nalgebra::Vector3;
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::depth_renderer::{
    intrinsics_from_fov, make_canvas, scene_pivot, shade, warp_image, DepthMap, LightingParams, Pose, RgbImage,
    DEFAULT_RADIUS,
};
use crate::error::{Error, Result};

use super::data::Dataset;

pub const PATCH: usize = 4;
pub const CHANNELS: usize = 7;
pub const EXTRA_DIMS: usize = PATCH * PATCH * CHANNELS;

const PLANE_DEPTH: f64 = 5.0;
const MAX_YAW_DEG: f64 = 15.0;
const CHANNEL_SCALE: f64 = 0.25;

/// Returns `dataset` with `EXTRA_DIMS` rendered columns appended to `x`.
pub fn augment_with_renders(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let classes = dataset.directions.nrows();
    let k = intrinsics_from_fov(PATCH, PATCH, 40.0)?;
    let light = LightingParams::new(0.5, 0.5, 0.2, -0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = Uniform::new(-0.3, 0.3).map_err(|e| Error::Domain(e.to_string()))?;
    let color = Uniform::new(0.1, 0.9).map_err(|e| Error::Domain(e.to_string()))?;
    let yaw = Normal::new(0.0, 5f64.to_radians()).map_err(|e| Error::Domain(e.to_string()))?;

    let mut scenes = Vec::with_capacity(classes);
    for _ in 0..classes {
        let (sx, sy) = (slope.sample(&mut rng), slope.sample(&mut rng));
        let depth = DepthMap::new(Array2::from_shape_fn((PATCH, PATCH), |(r, c)| {
            PLANE_DEPTH + sx * c as f64 + sy * r as f64
        }))?;
        let rgb = [color.sample(&mut rng), color.sample(&mut rng), color.sample(&mut rng)];
        let albedo = RgbImage::new(ndarray::Array3::from_shape_fn((PATCH, PATCH, 3), |(_, _, ch)| rgb[ch]))?;
        let shaded = shade(&depth, &albedo, &light, &k)?;
        let pivot = scene_pivot(&depth, &k).ok_or(Error::Mask)?;
        scenes.push((depth, albedo, shaded, pivot));
    }
    let extremes: Vec<Pose> = scenes
        .iter()
        .flat_map(|s| {
            [-MAX_YAW_DEG, MAX_YAW_DEG]
                .map(|a| Pose::from_axis_angle(Vector3::y(), a.to_radians(), s.3).expect("unit axis"))
        })
        .collect();
    let depths: Vec<DepthMap> = scenes.iter().flat_map(|s| [s.0.clone(), s.0.clone()]).collect();
    let canvas = make_canvas(&depths, &extremes, &k, DEFAULT_RADIUS)?;

    let mut extra = Array2::zeros((dataset.len(), EXTRA_DIMS));
    for (i, &label) in dataset.labels.iter().enumerate() {
        let (depth, albedo, shaded, pivot) = &scenes[label];
        let a: f64 = yaw.sample(&mut rng);
        let a = a.clamp(-MAX_YAW_DEG.to_radians(), MAX_YAW_DEG.to_radians());
        let pose = Pose::from_axis_angle(Vector3::y(), a, *pivot)?;
        let out = warp_image(shaded, depth, &pose, &k, &canvas, DEFAULT_RADIUS)?;
        let mut v = Vec::with_capacity(EXTRA_DIMS);
        for ((r, c), &ok) in out.depth.valid().indexed_iter() {
            v.push(if ok {
                out.depth.values()[(r, c)] - PLANE_DEPTH
            } else {
                0.0
            });
        }
        v.extend(out.image.data.iter().copied());
        v.extend(albedo.data.iter().copied());
        extra.row_mut(i).assign(&(Array1::from(v) * CHANNEL_SCALE));
    }
    let x = concatenate(Axis(1), &[dataset.x.view(), extra.view()]).map_err(|e| Error::Value(e.to_string()))?;
    Ok(Dataset { x, ..dataset.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train_harness::data::{generate_dataset, SyntheticSpec};

    #[test]
    fn appends_seven_channel_patches() {
        let spec = SyntheticSpec {
            classes: 3,
            input_dim: 8,
            samples_per_class: 5,
            noise_angle_std: 0.1,
            quality_log_mean: 0.0,
            quality_log_std: 0.1,
            seed: 2,
        };
        let ds = generate_dataset(&spec).unwrap();
        let aug = augment_with_renders(&ds, 9).unwrap();
        assert_eq!(aug.x.ncols(), 8 + EXTRA_DIMS);
        assert_eq!(aug.x.slice(ndarray::s![.., ..8]), ds.x);
        assert!(aug.x.iter().all(|v| v.is_finite()));
        assert_eq!(aug, augment_with_renders(&ds, 9).unwrap());
    }
}
