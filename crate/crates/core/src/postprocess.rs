//! Obstacle construction: threshold clustering, positiveness filtering and
//! bounding boxes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionGrid, Detector};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::preprocess::{extract_features, GridGeometry, Preprocessor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn neighbors(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub objectness_threshold: f64,
    pub positiveness_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { objectness_threshold: 0.5, positiveness_threshold: 0.1, connectivity: Connectivity::Eight }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("objectness", self.objectness_threshold), ("positiveness", self.positiveness_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Validation(format!("{name} threshold {v} is outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Connected set of above-threshold cells, as sorted lattice `(u, v)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub cells: Vec<(usize, usize)>,
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of `mask` (row-major, `rows × cols`), each as
/// sorted local `(row, col)` pairs, ordered by (min row, min col).
pub fn connected_components(
    mask: &[bool],
    rows: usize,
    cols: usize,
    connectivity: Connectivity,
) -> Vec<Vec<(usize, usize)>> {
    let mut sets = DisjointSets::new(mask.len());
    for i in 0..rows {
        for j in 0..cols {
            if !mask[i * cols + j] {
                continue;
            }
            // Earlier neighbours in scan order are enough to join everything.
            for &(di, dj) in connectivity.neighbors().iter().filter(|&&(di, dj)| di < 0 || (di == 0 && dj < 0)) {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                if ii >= 0 && jj >= 0 && (jj as usize) < cols && mask[ii as usize * cols + jj as usize] {
                    sets.union(i * cols + j, ii as usize * cols + jj as usize);
                }
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for k in (0..mask.len()).filter(|&k| mask[k]) {
        by_root.entry(sets.find(k)).or_default().push((k / cols, k % cols));
    }
    let mut comps: Vec<Vec<(usize, usize)>> = by_root.into_values().collect();
    comps.sort_by_key(|c| {
        let min_u = c.iter().map(|p| p.0).min().unwrap_or(0);
        let min_v = c.iter().map(|p| p.1).min().unwrap_or(0);
        (min_u, min_v, c[0])
    });
    comps
}

/// Connected components over cells with objectness above the threshold.
pub fn cluster(dgrid: &DetectionGrid, cfg: &PerceptionConfig) -> Vec<Cluster> {
    let g = dgrid.geometry;
    let mask: Vec<bool> = dgrid.objectness.iter().map(|&o| o > cfg.objectness_threshold).collect();
    connected_components(&mask, g.rows, g.cols, cfg.connectivity)
        .into_iter()
        .map(|cells| Cluster { cells: cells.into_iter().map(|(r, c)| (g.u0 + r, g.v0 + c)).collect() })
        .collect()
}

fn local_index(g: &GridGeometry, (u, v): (usize, usize)) -> usize {
    (u - g.u0) * g.cols + (v - g.v0)
}

fn mean_over(values: &[f64], g: &GridGeometry, cells: &[(usize, usize)]) -> f64 {
    cells.iter().map(|&c| values[local_index(g, c)]).sum::<f64>() / cells.len() as f64
}

/// Keeps clusters whose mean positiveness strictly exceeds the threshold.
pub fn filter_positiveness(clusters: Vec<Cluster>, dgrid: &DetectionGrid, cfg: &PerceptionConfig) -> Vec<Cluster> {
    clusters
        .into_iter()
        .filter(|c| mean_over(&dgrid.positiveness, &dgrid.geometry, &c.cells) > cfg.positiveness_threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Vehicle,
    Background,
}

/// Axis-aligned box in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_x: f64,
    pub center_y: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cells: Vec<(usize, usize)>,
    pub point_count: usize,
    pub avg_positiveness: f64,
    pub bbox: BoundingBox,
    pub label: Label,
}

impl Obstacle {
    /// Distance of the box center from the sensor axis origin, bird's-eye.
    pub fn center_distance(&self) -> f64 {
        self.bbox.center_x.hypot(self.bbox.center_y)
    }

    pub fn shares_cells_with(&self, other: &Obstacle) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.cells.len() && j < other.cells.len() {
            match self.cells[i].cmp(&other.cells[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// Boxes the points of `cloud` that fall in each cluster's cells.
pub fn build_boxes(clusters: &[Cluster], dgrid: &DetectionGrid, cloud: &PointCloud) -> Vec<Obstacle> {
    let g = dgrid.geometry;
    let mut owner = vec![usize::MAX; g.cells()];
    for (k, c) in clusters.iter().enumerate() {
        for &cell in &c.cells {
            owner[local_index(&g, cell)] = k;
        }
    }
    let empty = [f64::INFINITY, f64::NEG_INFINITY];
    let mut extents = vec![[empty; 3]; clusters.len()];
    let mut counts = vec![0usize; clusters.len()];
    for p in cloud {
        let Some((u, v)) = g.locate(p.w_x, p.w_y) else { continue };
        if !g.contains_lattice(u as i64, v as i64) {
            continue;
        }
        let k = owner[local_index(&g, (u, v))];
        if k == usize::MAX {
            continue;
        }
        counts[k] += 1;
        for (ext, val) in extents[k].iter_mut().zip([p.w_x, p.w_y, p.w_z]) {
            ext[0] = ext[0].min(val);
            ext[1] = ext[1].max(val);
        }
    }
    clusters
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let bbox = if counts[k] == 0 {
                let n = c.cells.len() as f64;
                let (sx, sy) = c.cells.iter().fold((0.0, 0.0), |(sx, sy), &(u, v)| {
                    let (x, y) = g.cell_center(u, v);
                    (sx + x, sy + y)
                });
                BoundingBox { center_x: sx / n, center_y: sy / n, length: 0.0, width: 0.0, height: 0.0 }
            } else {
                let [ex, ey, ez] = extents[k];
                BoundingBox {
                    center_x: 0.5 * (ex[0] + ex[1]),
                    center_y: 0.5 * (ey[0] + ey[1]),
                    length: ex[1] - ex[0],
                    width: ey[1] - ey[0],
                    height: ez[1] - ez[0],
                }
            };
            let vehicle = mean_over(&dgrid.class_vehicle, &g, &c.cells);
            let background = mean_over(&dgrid.class_background, &g, &c.cells);
            Obstacle {
                cells: c.cells.clone(),
                point_count: counts[k],
                avg_positiveness: mean_over(&dgrid.positiveness, &g, &c.cells),
                bbox,
                label: if vehicle >= background { Label::Vehicle } else { Label::Background },
            }
        })
        .collect()
}

/// Full pipeline: pre-processing, detection, clustering, filtering, boxes.
pub fn perceive<D: Detector + ?Sized>(
    cloud: &PointCloud,
    cfg: &PerceptionConfig,
    pre: &Preprocessor,
    detector: &D,
) -> Result<Vec<Obstacle>> {
    cfg.validate()?;
    let filtered = pre.filtered(cloud)?;
    let grid = extract_features(&filtered, pre.range());
    let dgrid = detector.detect(&grid)?;
    let clusters = filter_positiveness(cluster(&dgrid, cfg), &dgrid, cfg);
    Ok(build_boxes(&clusters, &dgrid, &filtered))
}

/// One JSON object per obstacle per line.
pub fn write_report<W: Write>(obstacles: &[Obstacle], mut out: W) -> Result<()> {
    for o in obstacles {
        serde_json::to_writer(&mut out, o).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Point;
    use crate::preprocess::GridGeometry;
    use crate::SurrogateDetector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn geometry(rows: usize, cols: usize) -> GridGeometry {
        GridGeometry::full(60.0).window(100, 100 + rows as i64 - 1, 100, 100 + cols as i64 - 1).unwrap()
    }

    fn grid_with(rows: usize, cols: usize, on: &[(usize, usize)], pos: f64) -> DetectionGrid {
        let mut d = DetectionGrid::uniform(geometry(rows, cols), 0.1, pos);
        for &(r, c) in on {
            d.objectness[r * cols + c] = 0.9;
            d.class_vehicle[r * cols + c] = 0.9;
            d.class_background[r * cols + c] = 0.1;
        }
        d
    }

    fn flood_fill(mask: &[bool], rows: usize, cols: usize, conn: Connectivity) -> Vec<Vec<(usize, usize)>> {
        let mut seen = vec![false; mask.len()];
        let mut out = Vec::new();
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(k) = queue.pop_front() {
                let (i, j) = (k / cols, k % cols);
                comp.push((i, j));
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        if (di == 0 && dj == 0) || (conn == Connectivity::Four && di != 0 && dj != 0) {
                            continue;
                        }
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii < 0 || jj < 0 || ii >= rows as isize || jj >= cols as isize {
                            continue;
                        }
                        let kk = ii as usize * cols + jj as usize;
                        if mask[kk] && !seen[kk] {
                            seen[kk] = true;
                            queue.push_back(kk);
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort_by_key(|c| (c.iter().map(|p| p.0).min(), c.iter().map(|p| p.1).min(), c[0]));
        out
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let d = DetectionGrid::uniform(geometry(8, 8), 0.5, 0.9);
        assert!(cluster(&d, &PerceptionConfig::default()).is_empty());
    }

    #[test]
    fn diagonal_adjacency_depends_on_connectivity() {
        let d = grid_with(4, 4, &[(1, 1), (2, 2)], 0.9);
        let four = PerceptionConfig { connectivity: Connectivity::Four, ..Default::default() };
        assert_eq!(cluster(&d, &four).len(), 2);
        let eight = cluster(&d, &PerceptionConfig::default());
        assert_eq!(eight, vec![Cluster { cells: vec![(101, 101), (102, 102)] }]);
    }

    #[test]
    fn matches_flood_fill_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let density = rng.random_range(0.2..0.7);
            let mask: Vec<bool> = (0..32 * 32).map(|_| rng.random_bool(density)).collect();
            for conn in [Connectivity::Four, Connectivity::Eight] {
                assert_eq!(connected_components(&mask, 32, 32, conn), flood_fill(&mask, 32, 32, conn));
            }
        }
    }

    #[test]
    fn positiveness_filter_is_strict() {
        let cfg = PerceptionConfig::default();
        for (pos, kept) in [(0.05, 0), (0.9, 1), (0.1, 0)] {
            let d = grid_with(4, 4, &[(1, 1), (1, 2)], pos);
            assert_eq!(filter_positiveness(cluster(&d, &cfg), &d, &cfg).len(), kept, "positiveness {pos}");
        }
    }

    #[test]
    fn box_heights_and_degenerate_boxes() {
        let d = grid_with(4, 4, &[(1, 1)], 0.9);
        let (x, y) = d.geometry.cell_center(101, 101);
        let cloud = PointCloud::new(vec![Point::new(x, y, 0.2, 0.1), Point::new(x + 0.01, y, 1.4, 0.1)]).unwrap();
        let clusters = cluster(&d, &PerceptionConfig::default());
        let obs = build_boxes(&clusters, &d, &cloud);
        assert_eq!(obs.len(), 1);
        assert!((obs[0].bbox.height - 1.2).abs() < 1e-12);
        assert_eq!(obs[0].point_count, 2);
        assert_eq!(obs[0].label, Label::Vehicle);

        let empty = build_boxes(&clusters, &d, &PointCloud::empty());
        assert_eq!(empty[0].point_count, 0);
        assert_eq!((empty[0].bbox.center_x, empty[0].bbox.center_y), (x, y));
        assert_eq!(empty[0].bbox.length, 0.0);
    }

    #[test]
    fn empty_cloud_perceives_nothing() {
        let det = SurrogateDetector::default();
        let obs = perceive(&PointCloud::empty(), &PerceptionConfig::default(), &Preprocessor::default(), &det).unwrap();
        assert!(obs.is_empty());
    }

    #[test]
    fn report_is_one_line_per_obstacle() {
        let d = grid_with(6, 6, &[(0, 0), (4, 4)], 0.9);
        let obs = build_boxes(&cluster(&d, &PerceptionConfig::default()), &d, &PointCloud::empty());
        let mut buf = Vec::new();
        write_report(&obs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: Obstacle = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, obs[0]);
    }

    #[test]
    fn config_validation() {
        assert!(PerceptionConfig::default().validate().is_ok());
        assert!(PerceptionConfig { objectness_threshold: 1.0, ..Default::default() }.validate().is_err());
    }
}
