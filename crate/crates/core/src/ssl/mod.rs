//! Momentum-contrast pretraining: encoders, heads, loss, schedules and the
//! training loop.

pub mod encoder;
pub mod heads;
pub mod loss;
pub mod moco;
pub mod pretrain;
pub mod schedule;

pub use encoder::{Capacity, Encoder, EncoderConfig};
pub use loss::{contrastive_loss, contrastive_loss_value};
pub use moco::{ema_update, load_backbone, Branch, MoCoConfig, MoCoState};
pub use pretrain::{pretrain, PretrainOutcome, PretrainSetup, TraceRow};
pub use schedule::{momentum_schedule, tau_schedule, TauRule};
