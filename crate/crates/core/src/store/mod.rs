//! Activation dumps, their manifest, and joined dataset views.

mod actv;
mod manifest;
mod view;

pub use actv::{
    open_activation_path, read_activation_file, write_activation_file, write_activation_path,
    ActivationFileHeader, ActivationReader, ActivationRecord, ACTV_HEADER_LEN, ACTV_MAGIC,
    ACTV_VERSION,
};
pub use manifest::{Manifest, ManifestEntry, Preamble, Split, PREAMBLE_ID};
pub use view::{join, DatasetView, Filter, FilterField, JoinReport, Sample};
