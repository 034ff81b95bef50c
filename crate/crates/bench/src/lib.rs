//! Seeded fixtures shared by the comparison benchmarks.
//!
//! Worlds use the same perturbation settings as the acceptance runtime
//! check (descriptor noise 0.5, jitter 1, 20 % outliers), so relative costs
//! here carry over to the full-size measurement.

use vpr_core::hdc::{attach_holistic, hdc_init};
use vpr_core::retrieval::Database;
use vpr_core::synthetic::{gen_world, World, WorldConfig};
use vpr_core::ImageFeatureSet;

pub const SEED: u64 = 7;
pub const HDC_DIM: usize = 4096;

pub fn world(db_size: usize, query_size: usize, features: usize, d_loc: usize) -> World {
    gen_world(&WorldConfig {
        seed: SEED,
        db_size,
        query_size,
        features_per_image: features,
        d_loc,
        descriptor_noise: 0.5,
        position_jitter: 1.0,
        outlier_fraction: 0.2,
    })
    .expect("valid world config")
}

/// Adds HDC holistic descriptors (default grid) to both stores.
pub fn with_holistic(mut world: World) -> World {
    let d_loc = world.db[0].d_loc();
    let cb = hdc_init(0, HDC_DIM, 5, 9, d_loc).expect("valid HDC config");
    attach_holistic(&cb, &mut world.db).expect("aggregation");
    attach_holistic(&cb, &mut world.queries).expect("aggregation");
    world
}

/// Two images of the same place: query 0 and its source database image.
pub fn matching_pair(world: &World) -> (&ImageFeatureSet, &ImageFeatureSet) {
    (&world.db[world.sources[0]], &world.queries[0])
}

/// Two unrelated images: query 0 and a database image it was not drawn from.
pub fn unrelated_pair(world: &World) -> (&ImageFeatureSet, &ImageFeatureSet) {
    let other = (world.sources[0] + 1) % world.db.len();
    (&world.db[other], &world.queries[0])
}

/// A prepared database with holistic descriptors.
pub fn database(world: &World) -> Database {
    Database::new(world.db.clone()).expect("consistent store")
}
