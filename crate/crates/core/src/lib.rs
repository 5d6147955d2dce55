//! logoid: one-shot open-set logo identification.
//!
//! The crate trains a fused textual-visual logo encoder with a batch-wise
//! supervised contrastive objective and evaluates one-shot identification of
//! unseen brands against reference galleries of up to 100K entries.
//!
//! Pipeline in one paragraph: a manifest of cropped logos is split open-set at
//! the brand level ([`dataio`]); each training batch is expanded into two
//! distorted views ([`augment`]); a visual backbone and a frozen textual
//! encoder produce per-view features that are concatenated, projected to 512
//! dimensions and row-normalized ([`encoder`]); the contrastive loss pulls
//! same-brand rows together across and within views, normalizing each positive
//! pair over the batch negatives only ([`loss`]); SGD with momentum drives the
//! loop ([`train`]). At inference the pre-projection concatenated feature is
//! ranked against a gallery of one reference embedding per brand by exact
//! cosine search ([`gallery`]), optionally behind a class-agnostic detector
//! ([`detect`]). [`eval`] implements verification ROC/AUC, cropped and
//! end-to-end Top-k identification, the gallery-scale sweep and a text-only
//! edit-distance baseline. [`harvest`] builds large one-logo-per-brand
//! reference manifests from Wikidata.

pub mod augment;
pub mod config;
pub mod dataio;
pub mod detect;
pub mod encoder;
pub mod eval;
pub mod gallery;
pub mod harvest;
pub mod imgtensor;
pub mod loss;
pub mod nn;
pub mod synth;
pub mod train;

pub use dataio::{BrandId, Bbox, DatasetManifest, LogoRecord, Split};
pub use encoder::{Embedder, EmbeddingPair, FeatureBatch};
pub use gallery::{Gallery, RankingResult};
pub use loss::{LossConfig, PositiveMask};
