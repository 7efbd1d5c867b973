//! Shared fixtures for the benchmarks in `benches/`.

use ssda_core::coremath::seeded_rng;
use ssda_core::experiment::benchmark_split;
use ssda_core::network::Architecture;
use ssda_core::{NetworkParams, SsdaSplit};

/// Default benchmark split for seed 0 and a freshly initialized default network.
pub fn fixture() -> (SsdaSplit, NetworkParams) {
    let split = benchmark_split(0, 3).expect("default benchmark split");
    let arch = Architecture::for_problem(split.input_dim(), split.num_classes());
    let params = NetworkParams::init(&arch, &mut seeded_rng(0).substream("init")).expect("default architecture");
    (split, params)
}
