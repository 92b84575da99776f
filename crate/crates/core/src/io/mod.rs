//! File formats and the synthetic rig generator.

pub mod formats;
pub mod mesh_io;
pub mod rigfile;
pub mod synth;

pub use formats::{load_corrective_dataset, load_inputs, load_scan_target, save_corrective_dataset, save_inputs, save_scan_target};
pub use mesh_io::{load_mesh, load_points, save_mesh, save_points};
pub use rigfile::{load_rig, rig_from_bytes, rig_to_bytes, save_rig};
pub use synth::{generate_synthetic_rig, SyntheticRigSpec};
