//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use mmfl_core::data::{generate_synthetic, partition, roster_21, Heterogeneity, PartitionPlan, SyntheticSpec};
use mmfl_core::{ArchRegistry, InstitutionDataset};

/// The 21-institution roster on iid desk-scale synthetic data.
pub fn institutions(seed: u64) -> Vec<InstitutionDataset> {
    let ds = generate_synthetic(&SyntheticSpec::tcga_like(3, 2, seed).expect("valid spec")).expect("generates");
    let plan = PartitionPlan {
        institutions: roster_21(),
        heterogeneity: Heterogeneity::Iid,
        category_fractions: BTreeMap::new(),
        points_per_institution: 50,
        val_fraction: 0.2,
        seed,
    };
    partition(&ds, &plan).expect("feasible")
}

pub fn registry() -> ArchRegistry {
    ArchRegistry::desk()
}
