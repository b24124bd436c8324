//! Energy accounting, temporal similarity and corruption robustness.

mod energy;
mod robustness;
mod similarity;

pub use energy::{
    energy_ann, energy_ann_with, energy_normalized, energy_report, energy_snn, firing_rates, flops, flops_conv,
    flops_fc, write_energy_csv, EnergyReport, LayerEnergy, Platform, E_AC, E_MAC,
};
pub use robustness::{
    cell_seed, corruption_error, model_classifier, robustness_eval, robustness_eval_with, write_robustness_csv,
    RobustnessRow, RobustnessTable,
};
pub use similarity::{
    similarity_from_records, temporal_similarity, temporal_similarity_maps, write_similarity_csv,
    write_similarity_gnuplot, SimilarityMatrix,
};
