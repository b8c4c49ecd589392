//! Quick built-in consistency checks, run by `advlidar selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::advgen::{bilinear_sample, merge, transform_features, AttackObjective, AttackTarget, TransformParams};
use crate::detector::{Detector, SurrogateDetector};
use crate::pointcloud::{Point, PointCloud};
use crate::postprocess::{connected_components, Connectivity};
use crate::preprocess::{extract_features, Channel, GridGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(x.0..x.1),
                rng.random_range(y.0..y.1),
                rng.random_range(z.0..z.1),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    PointCloud::new(pts).expect("finite points")
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = random_cloud(&mut rng, 400, (2.0, 8.0), (-3.0, 3.0), (0.0, 0.3));
    let t = random_cloud(&mut rng, 60, (4.0, 6.0), (-0.5, 0.5), (0.5, 2.0));
    let merged = merge(&extract_features(&x, 60.0), &extract_features(&t, 60.0));
    let direct = extract_features(&x.append(&t), 60.0);
    let worst = match &merged {
        Ok(m) => {
            [Channel::Count, Channel::MaxHeight, Channel::MeanHeight, Channel::MeanIntensity, Channel::MaxIntensity]
                .iter()
                .flat_map(|&ch| m.channel(ch).iter().zip(direct.channel(ch)).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max)
        }
        Err(_) => f64::INFINITY,
    };
    out.push(check("merge equals joint extraction", worst <= 1e-9, format!("max deviation {worst:.3e}")));

    let plane = [1.0, 2.0, 3.0, 4.0];
    let mid = bilinear_sample(&plane, 2, 2, 0.5, 0.5);
    out.push(check("bilinear midpoint", (mid - 2.5).abs() < 1e-12, format!("{mid}")));

    let tg = extract_features(&t, 60.0);
    let shift = TransformParams::new(0.0, 3.0 * tg.geometry().cell_size, 1.0);
    let moved = transform_features(&tg, &shift).map(|g| g.total(Channel::Count)).unwrap_or(f64::NAN);
    out.push(check("transform keeps count mass", (moved - tg.total(Channel::Count)).abs() < 1e-9, format!("{moved}")));

    let mask: Vec<bool> = (0..32 * 32).map(|_| rng.random_bool(0.4)).collect();
    let four = connected_components(&mask, 32, 32, Connectivity::Four);
    let eight = connected_components(&mask, 32, 32, Connectivity::Eight);
    let covered: usize = four.iter().map(Vec::len).sum();
    out.push(check(
        "components partition the mask",
        covered == mask.iter().filter(|&&m| m).count() && eight.len() <= four.len(),
        format!("{} / {} components", four.len(), eight.len()),
    ));

    let det = SurrogateDetector::default();
    let empty = det
        .scores(&crate::preprocess::FeatureGrid::empty(GridGeometry::full(60.0).window(0, 7, 0, 7).expect("window")));
    let bias_ok =
        empty.map(|s| s.objectness.iter().all(|&o| (o - 1.0 / (1.0 + 6f64.exp())).abs() < 1e-15)).unwrap_or(false);
    out.push(check("empty grid scores logistic(bias)", bias_ok, ""));

    let xg = extract_features(&x, 60.0);
    let target = AttackTarget::default();
    let grad = AttackObjective::new(&xg, &tg, &det, &target).and_then(|o| o.gradient(&TransformParams::identity()));
    out.push(check(
        "objective gradient is finite",
        grad.as_ref().is_ok_and(|g| g.iter().all(|v| v.is_finite())),
        format!("{grad:?}"),
    ));
    out
}
