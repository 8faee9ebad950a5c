pub mod io;
pub mod split;
pub mod synth;

pub use io::{DiskDataset, SampleSource, ScoredBox};
pub use split::{
    build_split, read_manifest, write_manifest, ManifestEntry, SplitManifest, SplitSetting,
};
pub use synth::{generate_scene, Annotations, BoxAnnotation, Sample, SceneSpec};
