//! Fixtures shared by the benchmarks.

use camm::basis::{expand_by_location, moran_eigenvectors, BlockKind, EffectBlock, MoranOptions};
use camm::simulate::{generate_svc_data, stream_rng, SimulationConfig};
use nalgebra::DMatrix;

/// Spatial intercept plus one SVC block on `sites` locations.
pub struct Problem {
    pub x: DMatrix<f64>,
    pub blocks: Vec<EffectBlock>,
    pub y: Vec<f64>,
}

pub fn svc_problem(n: usize, sites: usize, vectors: usize) -> Problem {
    let cfg = SimulationConfig {
        n,
        g: 0.5,
        h: 0.25,
        n_locations: Some(sites),
        ..Default::default()
    };
    let s = generate_svc_data(&cfg, &mut stream_rng(99, n as u64, 0));
    let ids = s.data.location_ids.clone().expect("location ids");
    let coords = s.data.coords.as_ref().expect("coords");
    let mut site_xy = vec![[0.0; 2]; sites];
    let mut labels = vec![String::new(); sites];
    for (i, id) in ids.iter().enumerate() {
        let k: usize = id[1..].parse().expect("site label");
        site_xy[k] = coords[i];
        labels[k] = id.clone();
    }
    let sb = moran_eigenvectors(&site_xy, MoranOptions::default())
        .and_then(|b| b.with_location_ids(labels))
        .expect("basis")
        .truncated(vectors);
    let e = expand_by_location(&sb, &ids).expect("expand");
    let ones = vec![1.0; n];
    let blocks = vec![
        EffectBlock::new(BlockKind::SpatialIntercept, e.clone(), Some((0, &ones)), Some(&sb.eigenvalues))
            .expect("block"),
        EffectBlock::new(BlockKind::SpatialVc, e, Some((1, &s.data.covariates[0])), Some(&sb.eigenvalues))
            .expect("block"),
    ];
    Problem {
        x: s.data.design(),
        blocks,
        y: s.data.y,
    }
}
