//! Labeled datasets, class-conditioned indices, label-distribution profiles and
//! the synthetic two-domain generator.

mod csv_io;
mod dataset;
mod generate;
mod profile;

pub use csv_io::{load_dataset, save_dataset};
pub use dataset::{ClassIndex, Dataset, DataError, Domain, HiddenLabels};
pub use generate::{generate_domain_pair, DomainPair, GeneratorManifest, Layout, PairSpec, ShiftSpec};
pub use profile::{make_profile, LabelProfile, ProfileKind};
