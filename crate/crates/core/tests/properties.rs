use proptest::prelude::*;

use tsdfpp::geometry::{RigidTransform, Vec3};
use tsdfpp::mapping::{fuse_sample, update_object_pose, IntegrationConfig};
use tsdfpp::voxel::{GlobalMap, GridIndex, GridParams, MapMode, ObjectId, TsdfVoxel};

fn observed(map: &GlobalMap, id: ObjectId) -> Vec<(i64, i64, i64, u64, u64)> {
    let mut cells: Vec<_> = map.objects()[&id]
        .grid()
        .iter()
        .filter(|(_, t)| t.is_observed())
        .map(|(g, t)| (g.x, g.y, g.z, t.distance.to_bits(), t.weight.to_bits()))
        .collect();
    cells.sort_unstable();
    cells
}

proptest! {
    #[test]
    fn fused_distance_stays_in_band(
        samples in prop::collection::vec(-0.3f64..0.3, 1..60),
        max_weight in 1.0f64..20.0,
        dropoff in prop::option::of(0.0f64..0.09),
    ) {
        let params = GridParams::default();
        let mut cfg = IntegrationConfig::new(&params);
        cfg.max_weight = max_weight;
        cfg.dropoff_start = dropoff;
        let mut v = TsdfVoxel::default();
        let mut last_weight = 0.0;
        for d in samples {
            let d = d.clamp(-params.truncation_distance, params.truncation_distance);
            fuse_sample(&mut v, d, &cfg);
            prop_assert!(v.distance.abs() <= params.truncation_distance);
            prop_assert!(v.weight >= last_weight && v.weight <= max_weight);
            last_weight = v.weight;
        }
    }

    #[test]
    fn fused_value_is_the_running_mean(samples in prop::collection::vec(-0.1f64..0.1, 1..40)) {
        let cfg = IntegrationConfig::new(&GridParams::default());
        let mut v = TsdfVoxel::default();
        for &d in &samples {
            fuse_sample(&mut v, d, &cfg);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        prop_assert!((v.distance - mean).abs() < 1e-12);
        prop_assert_eq!(v.weight, samples.len() as f64);
    }

    #[test]
    fn lattice_shift_and_back_is_exact(
        cells in prop::collection::btree_map((-6i64..6, -6i64..6, -6i64..6), (-0.1f64..0.1, 1.0f64..50.0), 1..80),
        steps in (-20i64..20, -20i64..20, -20i64..20),
    ) {
        let params = GridParams::new(0.01, 8, 0.1).unwrap();
        let mut map = GlobalMap::new(params, MapMode::TsdfPlusPlus);
        let id = map.allocate_object(true);
        for (&(x, y, z), &(d, w)) in &cells {
            let g = GridIndex::new(x, y, z);
            map.assign_layer(&g, id).unwrap();
            map.object_mut(id).unwrap().set_voxel(&g, TsdfVoxel::new(d, w)).unwrap();
        }
        let before = observed(&map, id);
        let shift = Vec3::new(steps.0 as f64, steps.1 as f64, steps.2 as f64) * params.voxel_size;
        update_object_pose(&mut map, id, &RigidTransform::from_translation(shift)).unwrap();
        let moved = observed(&map, id);
        prop_assert_eq!(moved.len(), before.len());
        for (a, b) in before.iter().zip(&moved) {
            prop_assert_eq!((a.0 + steps.0, a.1 + steps.1, a.2 + steps.2, a.3, a.4), *b);
        }
        update_object_pose(&mut map, id, &RigidTransform::from_translation(-shift)).unwrap();
        prop_assert_eq!(observed(&map, id), before);
        prop_assert!(map.check_invariants().is_ok());
    }
}
