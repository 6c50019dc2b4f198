//! Corpus ingestion, tiling, augmentation and synthetic domain generation.

pub mod augment;
pub mod corpus;
pub mod pnm;
pub mod synth;
pub mod tile;

pub use augment::{flip_columns, hflip, random_resized_crop, resize_bilinear, CropRecord};
pub use corpus::{load_corpora, load_corpus, Corpus, CorpusHeader, CorpusManifest, ManifestRecord, Split};
pub use pnm::{decode_ppm, encode_ppm, quantize, read_pgm, read_ppm, write_pgm, write_ppm, GrayImage};
pub use synth::{gen_synthetic_domain, render_sample, DomainKind, DomainSpec, Placement, RotationPolicy, ShapeKind};
pub use tile::{tile_image, tile_offsets, Tile};
