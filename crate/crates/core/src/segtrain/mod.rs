//! Supervised segmentation training for both heads, the shared schedule,
//! and the four training schemes.

pub(crate) mod fit;
mod schedule;
mod scheme;
mod seg;

pub use fit::{EpochRecord, LossCurve, TrainOutcome};
pub use schedule::{LrPolicy, TrainSchedule};
pub use seg::{init_unet_seg, train_seg_from, train_stardist, train_unet_seg, SegLossConfig};
pub use scheme::{run_scheme, RunManifest, Scheme, SchemeConfig, SchemeOptions, SchemeRun};
