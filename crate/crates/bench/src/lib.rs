//! Shared fixtures for the benchmarks.

use uadseg::volume::zscore_normalize;
use uadseg::{generate_phantom, MultimodalVolume, PhantomSpec};

/// A normalised tumour phantom and a stand-in reconstruction in which the
/// tumour has been replaced by healthy-looking tissue.
pub fn tumour_case(seed: u64) -> (MultimodalVolume, MultimodalVolume) {
    let spec = PhantomSpec::tumor(seed);
    let tumour = generate_phantom(&spec).expect("tumour phantom");
    let healthy = generate_phantom(&PhantomSpec {
        tumor_present: false,
        tumor_count: 0,
        ..spec
    })
    .expect("healthy phantom");
    (zscore_normalize(&tumour.volume).0, zscore_normalize(&healthy.volume).0)
}
