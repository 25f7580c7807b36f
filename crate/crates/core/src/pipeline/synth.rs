//! Seeded synthetic scenes: a ground plane, vegetation clumps and
//! box-shaped objects with known boxes and instance ids.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::heads::Box3D;
use crate::refine::{point_in_box, PanopticLabel};
use crate::voxelizer::{Point, PointCloud};

pub const GROUND_Z: f64 = -1.8;
pub const SCENE_HALF_EXTENT: f64 = 14.0;
pub const PAST_SWEEP_FRACTION: f64 = 0.1;
pub const PAST_SWEEP_DT: f64 = -0.1;
pub const GROUND_CLASS: u32 = 0;
pub const VEGETATION_CLASS: u32 = 1;

/// Nominal `(l, w, h)` per thing class.
const TEMPLATES: [[f64; 3]; 3] = [[4.5, 1.9, 1.6], [0.8, 0.8, 1.8], [1.8, 0.7, 1.7]];

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: PanopticLabel,
    /// Generating boxes; box `k` owns instance id `k + 1`.
    pub boxes: Vec<Box3D>,
}

fn footprint_radius(b: &Box3D) -> f64 {
    0.5 * (b.dims[0] * b.dims[0] + b.dims[1] * b.dims[1]).sqrt()
}

/// `thing_classes[t]` is the global class of thing index `t`; objects cycle
/// through the thing indices. Objects that cannot be placed without overlap
/// are dropped.
pub fn synth_scene(seed: u64, n_objects: usize, n_points: usize, thing_classes: &[usize]) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<Box3D> = Vec::new();
    for k in 0..n_objects {
        if thing_classes.is_empty() {
            break;
        }
        let t = k % thing_classes.len();
        let tpl = TEMPLATES[t % TEMPLATES.len()];
        let dims = tpl.map(|d| d * rng.gen_range(0.9..1.1));
        for _ in 0..100 {
            let lim = SCENE_HALF_EXTENT - 3.0;
            let cand = Box3D {
                center: [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim), GROUND_Z + 0.05 + dims[2] / 2.0],
                dims,
                yaw: PI - rng.gen_range(0.0..2.0 * PI),
                class_id: t,
                score: 1.0,
            };
            let clear = boxes.iter().all(|b| {
                let d = ((b.center[0] - cand.center[0]).powi(2) + (b.center[1] - cand.center[1]).powi(2)).sqrt();
                d > footprint_radius(b) + footprint_radius(&cand) + 0.5
            });
            if clear {
                boxes.push(cand);
                break;
            }
        }
    }

    let n_thing = if boxes.is_empty() { 0 } else { n_points * 2 / 5 };
    let n_veg = n_points * 3 / 20;
    let n_ground = n_points - n_thing - n_veg;
    let mut points = Vec::with_capacity(n_points);
    let mut semantic = Vec::with_capacity(n_points);
    let mut instance = Vec::with_capacity(n_points);
    let inside_any = |p: [f64; 3], boxes: &[Box3D]| boxes.iter().any(|b| point_in_box(p, b));

    for _ in 0..n_ground {
        let e = SCENE_HALF_EXTENT + 1.5;
        let p = [rng.gen_range(-e..e), rng.gen_range(-e..e), GROUND_Z + rng.gen_range(-0.03..0.03)];
        points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.0..1.0), 0.0));
        semantic.push(GROUND_CLASS);
        instance.push(0);
    }

    let clumps: Vec<[f64; 2]> = (0..3)
        .map(|_| [rng.gen_range(-SCENE_HALF_EXTENT..SCENE_HALF_EXTENT), rng.gen_range(-SCENE_HALF_EXTENT..SCENE_HALF_EXTENT)])
        .collect();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_veg && attempts < n_veg * 50 {
        attempts += 1;
        let c = clumps[placed % clumps.len()];
        let p = [c[0] + rng.gen_range(-1.5..1.5), c[1] + rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.0)];
        if inside_any(p, &boxes) {
            continue;
        }
        points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.0..1.0), 0.0));
        semantic.push(VEGETATION_CLASS);
        instance.push(0);
        placed += 1;
    }
    for _ in placed..n_veg {
        points.push(Point::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), GROUND_Z, 0.0, 0.0));
        semantic.push(GROUND_CLASS);
        instance.push(0);
    }

    for i in 0..n_thing {
        let k = i % boxes.len();
        let b = &boxes[k];
        let local = b.dims.map(|d| rng.gen_range(-0.49 * d..0.49 * d));
        let (s, c) = b.yaw.sin_cos();
        let p = [
            b.center[0] + c * local[0] - s * local[1],
            b.center[1] + s * local[0] + c * local[1],
            b.center[2] + local[2],
        ];
        points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.0..1.0), 0.0));
        semantic.push(thing_classes[b.class_id] as u32);
        instance.push(k as u32 + 1);
    }

    for p in &mut points {
        if rng.gen_bool(PAST_SWEEP_FRACTION) {
            p.dt = PAST_SWEEP_DT;
        }
    }
    Scene { cloud: PointCloud::new(points), labels: PanopticLabel { semantic, instance }, boxes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::point_in_box_bruteforce;

    const THINGS: [usize; 3] = [2, 3, 4];

    #[test]
    fn deterministic() {
        assert_eq!(synth_scene(7, 5, 2000, &THINGS), synth_scene(7, 5, 2000, &THINGS));
        assert_ne!(synth_scene(7, 5, 2000, &THINGS).cloud, synth_scene(8, 5, 2000, &THINGS).cloud);
    }

    #[test]
    fn no_objects_is_stuff_only() {
        let s = synth_scene(1, 0, 1000, &THINGS);
        assert!(s.boxes.is_empty());
        assert!(s.labels.semantic.iter().all(|&c| c < 2));
        assert!(s.labels.instance.iter().all(|&i| i == 0));
    }

    #[test]
    fn thing_points_lie_in_their_box() {
        let s = synth_scene(3, 6, 5000, &THINGS);
        assert!(!s.boxes.is_empty());
        for (i, p) in s.cloud.points.iter().enumerate() {
            let inst = s.labels.instance[i];
            if inst > 0 {
                let b = &s.boxes[inst as usize - 1];
                assert!(point_in_box_bruteforce(p.xyz(), b.center, b.dims, b.yaw));
                assert_eq!(s.labels.semantic[i] as usize, THINGS[b.class_id]);
            } else {
                assert!(s.boxes.iter().all(|b| !point_in_box_bruteforce(p.xyz(), b.center, b.dims, b.yaw)));
            }
        }
    }

    #[test]
    fn point_count_and_past_sweep() {
        let s = synth_scene(4, 4, 3000, &THINGS);
        assert_eq!(s.cloud.len(), 3000);
        let past = s.cloud.points.iter().filter(|p| !p.is_current()).count();
        assert!(past > 150 && past < 450, "{past}");
    }
}
