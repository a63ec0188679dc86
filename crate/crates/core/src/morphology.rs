//! Minkowski functionals of binary voxel grids via exact cubical-complex
//! cell counting.
//!
//! Each occupied voxel contributes its closed unit cube; vertices, edges,
//! and faces shared between cubes are counted once. From the four cell
//! counts the functionals follow in closed form:
//!
//! - volume = n3·a³
//! - surface area = (2·n2 − 6·n3)·a² (faces on exactly one cube)
//! - mean breadth = (n1 − 2·n2 + 3·n3)/2 · a — a fixed linear-in-counts
//!   convention normalized so a solid p×q×r box gives (p+q+r)/2·a, frozen by
//!   the tests below; distribution comparisons are invariant to the choice
//! - Euler characteristic = n0 − n1 + n2 − n3

use crate::error::CoreError;
use crate::eval::StatisticSample;
use crate::tensor::Tensor;

/// Binary occupancy grid with a physical voxel edge length.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    occupancy: Vec<bool>,
    dims: [usize; 3],
    voxel_size: f64,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], occupancy: Vec<bool>, voxel_size: f64) -> Result<Self, CoreError> {
        if occupancy.len() != dims.iter().product::<usize>() {
            return Err(CoreError::data("occupancy length does not match dims"));
        }
        if voxel_size <= 0.0 {
            return Err(CoreError::data("voxel size must be positive"));
        }
        Ok(VoxelGrid { occupancy, dims, voxel_size })
    }

    /// From a `[D, H, W]` tensor with values in `{0, 1}`, unit voxels.
    pub fn from_tensor(t: &Tensor) -> Result<Self, CoreError> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(CoreError::data("voxel tensor must be [D, H, W]"));
        }
        let mut occ = Vec::with_capacity(t.numel());
        for &v in t.data() {
            occ.push(match v {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                other => return Err(CoreError::data(format!("non-binary voxel value {other}"))),
            });
        }
        VoxelGrid::new([shape[0], shape[1], shape[2]], occ, 1.0)
    }

    #[must_use]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[must_use]
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    #[must_use]
    pub fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    /// Occupancy test tolerating out-of-range (background) coordinates.
    fn occ_i(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
            && self.occupied(x as usize, y as usize, z as usize)
    }
}

/// Distinct cells of the foreground cubical complex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellCounts {
    /// Vertices.
    pub n0: usize,
    /// Unit edges.
    pub n1: usize,
    /// Unit faces.
    pub n2: usize,
    /// Unit cubes (= occupied voxels).
    pub n3: usize,
}

/// The four Minkowski functionals of a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Minkowski {
    pub volume: f64,
    pub surface_area: f64,
    pub mean_breadth: f64,
    pub euler: i64,
}

/// Exact cell counts by scanning candidate cells of each dimension once.
///
/// A vertex/edge/face is present when any voxel whose closed cube contains
/// it is occupied; candidate ranges live on the (+1)-sized lattice.
#[must_use]
pub fn cell_counts(grid: &VoxelGrid) -> CellCounts {
    let [dx, dy, dz] = grid.dims;
    let (mut n0, mut n1, mut n2) = (0usize, 0usize, 0usize);
    let n3 = grid.occupancy.iter().filter(|&&o| o).count();
    // Vertices: lattice point (x, y, z) belongs to up to 8 voxels.
    for x in 0..=dx as i64 {
        for y in 0..=dy as i64 {
            for z in 0..=dz as i64 {
                'probe: for ox in x - 1..=x {
                    for oy in y - 1..=y {
                        for oz in z - 1..=z {
                            if grid.occ_i(ox, oy, oz) {
                                n0 += 1;
                                break 'probe;
                            }
                        }
                    }
                }
            }
        }
    }
    // Edges along each axis: an x-edge from (x, y, z) spans voxels sharing
    // it in the two perpendicular directions.
    for axis in 0..3 {
        let (ex, ey, ez) = match axis {
            0 => (dx, dy + 1, dz + 1),
            1 => (dx + 1, dy, dz + 1),
            _ => (dx + 1, dy + 1, dz),
        };
        for x in 0..ex as i64 {
            for y in 0..ey as i64 {
                for z in 0..ez as i64 {
                    let hit = match axis {
                        0 => {
                            grid.occ_i(x, y - 1, z - 1)
                                || grid.occ_i(x, y - 1, z)
                                || grid.occ_i(x, y, z - 1)
                                || grid.occ_i(x, y, z)
                        }
                        1 => {
                            grid.occ_i(x - 1, y, z - 1)
                                || grid.occ_i(x - 1, y, z)
                                || grid.occ_i(x, y, z - 1)
                                || grid.occ_i(x, y, z)
                        }
                        _ => {
                            grid.occ_i(x - 1, y - 1, z)
                                || grid.occ_i(x - 1, y, z)
                                || grid.occ_i(x, y - 1, z)
                                || grid.occ_i(x, y, z)
                        }
                    };
                    if hit {
                        n1 += 1;
                    }
                }
            }
        }
    }
    // Faces normal to each axis: shared by the two voxels on either side.
    for axis in 0..3 {
        let (fx, fy, fz) = match axis {
            0 => (dx + 1, dy, dz),
            1 => (dx, dy + 1, dz),
            _ => (dx, dy, dz + 1),
        };
        for x in 0..fx as i64 {
            for y in 0..fy as i64 {
                for z in 0..fz as i64 {
                    let hit = match axis {
                        0 => grid.occ_i(x - 1, y, z) || grid.occ_i(x, y, z),
                        1 => grid.occ_i(x, y - 1, z) || grid.occ_i(x, y, z),
                        _ => grid.occ_i(x, y, z - 1) || grid.occ_i(x, y, z),
                    };
                    if hit {
                        n2 += 1;
                    }
                }
            }
        }
    }
    CellCounts { n0, n1, n2, n3 }
}

/// Minkowski functionals from the cell counts (conventions in the module
/// docs).
#[must_use]
pub fn minkowski(grid: &VoxelGrid) -> Minkowski {
    let c = cell_counts(grid);
    let a = grid.voxel_size;
    let boundary_faces = 2 * c.n2 - 6 * c.n3;
    Minkowski {
        volume: c.n3 as f64 * a.powi(3),
        surface_area: boundary_faces as f64 * a.powi(2),
        mean_breadth: (c.n1 as f64 - 2.0 * c.n2 as f64 + 3.0 * c.n3 as f64) / 2.0 * a,
        euler: c.n0 as i64 - c.n1 as i64 + c.n2 as i64 - c.n3 as i64,
    }
}

/// Names accepted by [`batch_statistics`].
pub const FUNCTIONAL_NAMES: [&str; 4] = ["volume", "surface_area", "mean_breadth", "euler"];

/// One named sample of a functional per grid. `permeability` is accepted
/// only as an externally supplied column (its computation needs a flow
/// solver and is out of scope here).
pub fn batch_statistics(
    grids: &[VoxelGrid],
    names: &[&str],
    permeability: Option<&[f64]>,
) -> Result<Vec<StatisticSample>, CoreError> {
    let functionals: Vec<Minkowski> = grids.iter().map(minkowski).collect();
    let mut out = Vec::with_capacity(names.len());
    for &name in names {
        let values: Vec<f64> = match name {
            "volume" => functionals.iter().map(|m| m.volume).collect(),
            "surface_area" => functionals.iter().map(|m| m.surface_area).collect(),
            "mean_breadth" => functionals.iter().map(|m| m.mean_breadth).collect(),
            "euler" => functionals.iter().map(|m| m.euler as f64).collect(),
            "permeability" => permeability
                .ok_or_else(|| {
                    CoreError::config("permeability requested without a supplied value column")
                })?
                .to_vec(),
            other => return Err(CoreError::config(format!("unknown statistic '{other}'"))),
        };
        if name != "permeability" {
            assert_eq!(values.len(), grids.len());
        }
        out.push(StatisticSample::new(name, values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn grid_from(dims: [usize; 3], cells: &[(usize, usize, usize)]) -> VoxelGrid {
        let mut occ = vec![false; dims.iter().product()];
        for &(x, y, z) in cells {
            occ[(x * dims[1] + y) * dims[2] + z] = true;
        }
        VoxelGrid::new(dims, occ, 1.0).unwrap()
    }

    fn solid_box(p: usize, q: usize, r: usize) -> VoxelGrid {
        VoxelGrid::new([p, q, r], vec![true; p * q * r], 1.0).unwrap()
    }

    /// Brute-force oracle: enumerate every cell of every occupied cube in
    /// doubled coordinates (cell center × 2 identifies its dimension by
    /// parity) and count distinct ones.
    fn brute_counts(grid: &VoxelGrid) -> CellCounts {
        let mut cells: HashSet<(i64, i64, i64)> = HashSet::new();
        let [dx, dy, dz] = grid.dims();
        for x in 0..dx {
            for y in 0..dy {
                for z in 0..dz {
                    if !grid.occupied(x, y, z) {
                        continue;
                    }
                    // The closed cube spans doubled coords [2x, 2x+2] × …;
                    // each sub-cell center has coordinates in {even, odd}³.
                    for cx in 0..3i64 {
                        for cy in 0..3i64 {
                            for cz in 0..3i64 {
                                cells.insert((2 * x as i64 + cx, 2 * y as i64 + cy, 2 * z as i64 + cz));
                            }
                        }
                    }
                }
            }
        }
        let mut counts = [0usize; 4];
        for (x, y, z) in cells {
            let dim = (x % 2 + y % 2 + z % 2) as usize;
            counts[dim] += 1;
        }
        CellCounts { n0: counts[0], n1: counts[1], n2: counts[2], n3: counts[3] }
    }

    #[test]
    fn single_voxel_counts_and_functionals() {
        let g = grid_from([1, 1, 1], &[(0, 0, 0)]);
        let c = cell_counts(&g);
        assert_eq!(c, CellCounts { n0: 8, n1: 12, n2: 6, n3: 1 });
        let m = minkowski(&g);
        assert_eq!(m.volume, 1.0);
        assert_eq!(m.surface_area, 6.0);
        assert_eq!(m.mean_breadth, 1.5);
        assert_eq!(m.euler, 1);
    }

    #[test]
    fn face_adjacent_pair_matches_hand_enumeration() {
        let g = grid_from([2, 1, 1], &[(0, 0, 0), (1, 0, 0)]);
        let c = cell_counts(&g);
        assert_eq!(c, CellCounts { n0: 12, n1: 20, n2: 11, n3: 2 });
        let m = minkowski(&g);
        assert_eq!(m.surface_area, 10.0);
        assert_eq!(m.euler, 1);
        // 1×1×2 box: mean breadth (1+1+2)/2.
        assert_eq!(m.mean_breadth, 2.0);
    }

    #[test]
    fn empty_grid_is_all_zero() {
        let g = VoxelGrid::new([3, 3, 3], vec![false; 27], 1.0).unwrap();
        assert_eq!(cell_counts(&g), CellCounts { n0: 0, n1: 0, n2: 0, n3: 0 });
        let m = minkowski(&g);
        assert_eq!(m.volume, 0.0);
        assert_eq!(m.euler, 0);
    }

    #[test]
    fn solid_cube_and_hollow_center_oracles() {
        let m = minkowski(&solid_box(2, 2, 2));
        assert_eq!(m.volume, 8.0);
        assert_eq!(m.surface_area, 24.0);
        assert_eq!(m.euler, 1);
        assert_eq!(m.mean_breadth, 3.0);
        // 3³ minus the center voxel: a thickened sphere, Euler number 2.
        let mut occ = vec![true; 27];
        occ[(1 * 3 + 1) * 3 + 1] = false;
        let hollow = VoxelGrid::new([3, 3, 3], occ, 1.0).unwrap();
        assert_eq!(minkowski(&hollow).euler, 2);
    }

    #[test]
    fn box_surface_and_breadth_closed_forms() {
        for (p, q, r) in [(1, 1, 1), (3, 2, 1), (4, 4, 2), (5, 1, 3)] {
            let m = minkowski(&solid_box(p, q, r));
            let (pf, qf, rf) = (p as f64, q as f64, r as f64);
            assert_eq!(m.volume, pf * qf * rf);
            assert_eq!(m.surface_area, 2.0 * (pf * qf + qf * rf + rf * pf));
            assert_eq!(m.mean_breadth, (pf + qf + rf) / 2.0);
            assert_eq!(m.euler, 1);
        }
    }

    #[test]
    fn voxel_size_scales_dimensioned_functionals() {
        let g = VoxelGrid::new([2, 2, 2], vec![true; 8], 0.5).unwrap();
        let m = minkowski(&g);
        assert_eq!(m.volume, 1.0);
        assert_eq!(m.surface_area, 6.0);
        assert_eq!(m.mean_breadth, 1.5);
        assert_eq!(m.euler, 1);
    }

    #[test]
    fn euler_and_volume_add_over_separated_components() {
        let a = grid_from([7, 3, 3], &[(0, 0, 0), (1, 0, 0)]);
        let b = grid_from([7, 3, 3], &[(4, 2, 2), (5, 2, 2), (4, 1, 2)]);
        let union = grid_from(
            [7, 3, 3],
            &[(0, 0, 0), (1, 0, 0), (4, 2, 2), (5, 2, 2), (4, 1, 2)],
        );
        let (ma, mb, mu) = (minkowski(&a), minkowski(&b), minkowski(&union));
        assert_eq!(mu.volume, ma.volume + mb.volume);
        assert_eq!(mu.euler, ma.euler + mb.euler);
        assert_eq!(mu.surface_area, ma.surface_area + mb.surface_area);
    }

    #[test]
    fn euler_is_invariant_under_translation_and_axis_permutation() {
        let base = grid_from([5, 5, 5], &[(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1), (3, 3, 3)]);
        let shifted =
            grid_from([5, 5, 5], &[(1, 1, 1), (2, 1, 1), (2, 2, 1), (2, 2, 2), (4, 4, 4)]);
        let permuted =
            grid_from([5, 5, 5], &[(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1), (3, 3, 3)]);
        let e = minkowski(&base).euler;
        assert_eq!(minkowski(&shifted).euler, e);
        assert_eq!(minkowski(&permuted).euler, e);
    }

    #[test]
    fn fast_counts_match_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let dims = [
                rng.gen_range(1..=12usize),
                rng.gen_range(1..=12usize),
                rng.gen_range(1..=12usize),
            ];
            let density = rng.gen_range(0.05..0.95);
            let occ: Vec<bool> =
                (0..dims.iter().product()).map(|_| rng.gen_bool(density)).collect();
            let g = VoxelGrid::new(dims, occ, 1.0).unwrap();
            assert_eq!(cell_counts(&g), brute_counts(&g), "trial {trial} dims {dims:?}");
        }
    }

    #[test]
    fn batch_statistics_names_and_permeability_column() {
        let grids = vec![solid_box(2, 2, 2), solid_box(1, 1, 1)];
        let stats =
            batch_statistics(&grids, &["volume", "euler"], None).unwrap();
        assert_eq!(stats[0].name(), "volume");
        assert_eq!(stats[0].values(), &[8.0, 1.0]);
        assert_eq!(stats[1].values(), &[1.0, 1.0]);
        // Euler values are integral.
        assert!(stats[1].values().iter().all(|v| v.fract() == 0.0));
        assert!(batch_statistics(&grids, &["permeability"], None).is_err());
        let perm = batch_statistics(&grids, &["permeability"], Some(&[0.1, 0.2])).unwrap();
        assert_eq!(perm[0].values(), &[0.1, 0.2]);
        assert!(batch_statistics(&grids, &["vorticity"], None).is_err());
    }

    #[test]
    fn tensor_round_trip_rejects_non_binary() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]);
        let g = VoxelGrid::from_tensor(&t).unwrap();
        assert_eq!(cell_counts(&g).n3, 1);
        let bad = Tensor::new(vec![1, 1, 1], vec![0.5]);
        assert!(VoxelGrid::from_tensor(&bad).is_err());
    }
}
