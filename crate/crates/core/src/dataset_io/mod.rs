//! Dataset files, the synthetic generator, run configuration and manifests.

mod config;
mod manifest;
mod preprocess;
mod records;
mod synth;

pub use self::config::{DedupMode, RunConfig};
pub use self::manifest::{manifest_text, read_manifest, write_manifest, MANIFEST_FILE};
pub use self::preprocess::{Preprocess, WorkingSample};
pub use self::records::{
    find_image, load_dataset, load_split, save_unified, train_count, unified_csv, write_dataset, CsvSource, DatasetRecord, LoadedDataset,
    Rejection, IMAGE_DIR, IMAGE_EXTENSIONS, TEST_CSV, TRAIN_CSV,
};
pub use self::synth::{generate_one, generate_synthetic, sample_id, SynthConfig, SynthSample};
pub use crate::autodiff::{load_checkpoint, save_checkpoint};

impl RunConfig {
    pub fn preprocess(&self) -> Preprocess {
        Preprocess { working: crate::geometry::ImageSize::square(self.working_size), clahe: self.clahe_params(), priors: self.priors() }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            width: self.synth_width,
            height: self.synth_height,
            disc_radius_min: self.synth_disc_min,
            disc_radius_max: self.synth_disc_max,
            offset_mean: self.synth_offset_mean,
            offset_std: self.synth_offset_std,
            angle_std_deg: self.synth_angle_std_deg,
            strokes: self.synth_strokes,
            noise: self.synth_noise,
            texture: self.synth_texture,
            seed: self.seed,
        }
    }
}
