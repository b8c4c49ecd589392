//! Procedural road scenes.
//!
//! Scenes are built in the ground-level vehicle frame and stored in the
//! sensor frame. Ground returns thin out with the square of the distance and
//! are modulated by patches of denser or missing returns, so how visible a
//! spoofed cluster is depends on where it lands.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{load_pointcloud, CloudFormat, Point, PointCloud, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    EmptyRoad,
    SyntheticTraffic,
    /// Sensor-frame cloud read from disk; format from the extension.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub background: Background,
    /// Ground returns per m² at `reference_range`.
    pub ground_density: f64,
    pub reference_range: f64,
    /// No ground returns closer than this, meters.
    pub blind_radius: f64,
    /// Ground is generated out to this distance, meters.
    pub ground_extent: f64,
    pub ground_noise: f64,
    /// Number of density patches near the lane.
    pub patches: usize,
    /// Patch radius range, meters.
    pub patch_radius: (f64, f64),
    /// Low clutter objects off the lane.
    pub clutter: usize,
    pub parked_vehicles: usize,
    pub lead_vehicle: bool,
    /// Background point jitter between frames, meters.
    pub frame_jitter: f64,
    /// Drift of moving vehicles relative to the ego vehicle, m/s.
    pub vehicle_speed: f64,
    /// Frame period, seconds.
    pub frame_period: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            background: Background::SyntheticTraffic,
            ground_density: 55.0,
            reference_range: 5.0,
            blind_radius: 2.5,
            ground_extent: 40.0,
            ground_noise: 0.02,
            patches: 16,
            patch_radius: (0.4, 1.2),
            clutter: 6,
            parked_vehicles: 3,
            lead_vehicle: true,
            frame_jitter: 0.02,
            vehicle_speed: 1.0,
            frame_period: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn empty_road() -> Self {
        Self { background: Background::EmptyRoad, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.ground_density, self.reference_range, self.ground_extent, self.frame_period];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Validation("scene densities, ranges and periods must be positive".into()));
        }
        if !(self.patch_radius.0 > 0.0 && self.patch_radius.0 < self.patch_radius.1) {
            return Err(Error::Validation("patch radius range must be positive and ordered".into()));
        }
        if self.blind_radius < 0.0 || self.ground_noise < 0.0 || self.frame_jitter < 0.0 {
            return Err(Error::Validation("scene noise terms must be non-negative".into()));
        }
        Ok(())
    }
}

/// Points of one rigid object; `moving` objects drift between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub points: Vec<Point>,
    pub moving: bool,
}

/// A generated scene in the vehicle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub static_points: Vec<Point>,
    pub objects: Vec<SceneObject>,
    pub sensor_pose: Pose,
    config: SceneConfig,
}

#[derive(Debug, Clone, Copy)]
struct Patch {
    x: f64,
    y: f64,
    radius: f64,
    factor: f64,
}

impl Scene {
    pub fn generate(config: &SceneConfig, seed: u64, sensor_pose: Pose) -> Result<Scene> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut static_points = Vec::new();
        let mut objects = Vec::new();
        match &config.background {
            Background::File(path) => {
                let cloud = load_pointcloud(path, CloudFormat::from_path(path))?;
                static_points = cloud.transform(&sensor_pose).into_points();
            }
            Background::EmptyRoad | Background::SyntheticTraffic => {
                ground(config, &mut rng, &mut static_points);
                for _ in 0..config.clutter {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let (x, y) = (rng.random_range(-15.0..30.0), side * rng.random_range(3.0..8.0));
                    let h = rng.random_range(0.1..0.4);
                    objects.push(SceneObject { points: blob(&mut rng, x, y, 0.6, 0.6, h, 25), moving: false });
                }
                if config.background == Background::SyntheticTraffic {
                    for _ in 0..config.parked_vehicles {
                        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        let (x, y) = (rng.random_range(-20.0..30.0), side * rng.random_range(3.5..6.0));
                        objects.push(SceneObject { points: vehicle(&mut rng, x, y), moving: false });
                    }
                    if config.lead_vehicle {
                        let x = rng.random_range(16.0..30.0);
                        let y = rng.random_range(-0.5..0.5);
                        objects.push(SceneObject { points: vehicle(&mut rng, x, y), moving: true });
                    }
                }
            }
        }
        Ok(Scene { seed, static_points, objects, sensor_pose, config: config.clone() })
    }

    /// Frame 0 in the sensor frame.
    pub fn cloud(&self) -> PointCloud {
        self.frame(0)
    }

    /// Frame `offset` after the first: background jittered, moving objects drifted.
    pub fn frame(&self, offset: usize) -> PointCloud {
        let back = self.sensor_pose.inverse();
        let mut pts: Vec<Point> =
            Vec::with_capacity(self.static_points.len() + self.objects.iter().map(|o| o.points.len()).sum::<usize>());
        pts.extend_from_slice(&self.static_points);
        for o in &self.objects {
            let dx = if o.moving { self.config.vehicle_speed * self.config.frame_period * offset as f64 } else { 0.0 };
            pts.extend(o.points.iter().map(|p| Point::new(p.w_x + dx, p.w_y, p.w_z, p.intensity)));
        }
        if offset > 0 && self.config.frame_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (offset as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let noise = Normal::new(0.0, self.config.frame_jitter).expect("valid sigma");
            for p in &mut pts {
                p.w_x += noise.sample(&mut rng);
                p.w_y += noise.sample(&mut rng);
                p.w_z += noise.sample(&mut rng);
            }
        }
        PointCloud::new(pts).expect("generated points are finite").transform(&back)
    }

    /// The scene as seen after the ego vehicle drove `distance` meters forward.
    pub fn advanced(&self, distance: f64) -> Scene {
        let shift = |p: &Point| Point::new(p.w_x - distance, p.w_y, p.w_z, p.intensity);
        let mut moved = self.clone();
        // Ground and lane stay put relative to the ego vehicle; objects pass by.
        for o in &mut moved.objects {
            if !o.moving {
                o.points = o.points.iter().map(shift).collect();
            }
        }
        moved
    }
}

fn ground(config: &SceneConfig, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
    let patches: Vec<Patch> = (0..config.patches)
        .map(|_| Patch {
            x: rng.random_range(2.5..10.0),
            y: rng.random_range(-3.0..3.0),
            radius: rng.random_range(config.patch_radius.0..config.patch_radius.1),
            factor: if rng.random_bool(0.5) { rng.random_range(1.8..3.0) } else { rng.random_range(0.0..0.3) },
        })
        .collect();
    let noise = Normal::new(0.0, config.ground_noise.max(1e-12)).expect("valid sigma");
    let tile = 0.5;
    let cells = (config.ground_extent / tile).ceil() as i64;
    for i in -cells..cells {
        for j in -cells..cells {
            let (x0, y0) = (i as f64 * tile, j as f64 * tile);
            let (cx, cy) = (x0 + 0.5 * tile, y0 + 0.5 * tile);
            let r = cx.hypot(cy);
            if r < config.blind_radius || r > config.ground_extent {
                continue;
            }
            let mut density = config.ground_density * (config.reference_range / r).powi(2);
            for p in &patches {
                if (cx - p.x).hypot(cy - p.y) < p.radius {
                    density *= p.factor;
                }
            }
            let mean = density * tile * tile;
            if mean <= 0.0 {
                continue;
            }
            let n = Poisson::new(mean).expect("positive mean").sample(rng) as usize;
            for _ in 0..n {
                let x = x0 + rng.random_range(0.0..tile);
                let y = y0 + rng.random_range(0.0..tile);
                if x.hypot(y) < config.blind_radius {
                    continue;
                }
                out.push(Point::new(x, y, noise.sample(rng), rng.random_range(0.05..0.3)));
            }
        }
    }
}

/// Points spread through a box standing on the ground.
fn blob(rng: &mut ChaCha8Rng, x: f64, y: f64, length: f64, width: f64, height: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                x + rng.random_range(-0.5..0.5) * length,
                y + rng.random_range(-0.5..0.5) * width,
                rng.random_range(0.0..height),
                rng.random_range(0.1..0.6),
            )
        })
        .collect()
}

/// A 4 × 1.8 × 1.5 m vehicle; return count falls off with distance.
fn vehicle(rng: &mut ChaCha8Rng, x: f64, y: f64) -> Vec<Point> {
    let r = x.hypot(y).max(3.0);
    let n = (100_000.0 / (r * r)).clamp(60.0, 3000.0) as usize;
    blob(rng, x, y, 4.0, 1.8, 1.5, n)
}

/// Points of a box-shaped blob; used to build detectable test objects.
pub fn box_blob(seed: u64, center: (f64, f64), size: (f64, f64, f64), n: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blob(&mut rng, center.0, center.1, size.0, size.1, size.2, n)
}
