//! Synthetic repeated-pattern benchmark: scene generation with exact ground
//! truth, edgeless label crops, and the evaluation metrics.

mod annotation;
mod edgeless;
mod eval;
mod scene;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use annotation::{
    load_dataset, read_json, save_dataset, write_json, PatternAnnotation, PredictionSet, Sample,
    SampleAnnotation,
};
pub use edgeless::{edgeless_transform, EdgelessMode};
pub use eval::{
    evaluate, interpolated_ap, iou_thresholds, prediction_set, EvalReport, QueryReport,
};
pub use scene::{
    generate, render_scene, Element, GenSpec, Instance, Lattice, Motif, MotifFamily, Scene, Shape,
    MIN_BOX_FRACTION,
};

use crate::error::{arg_err, Result, TmrError};
use crate::numerics::{Grid3, Real};

/// Mixes `index` into `base` (splitmix64 finalizer) for independent
/// per-sample streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named dataset recipes; each sample draws its own layout from its seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// One disc or ring pattern on a square or hex lattice, 256x256.
    LatticeEasy,
    /// Ordered element pairs, their reflections and an unrelated pair.
    Bigram,
    /// Any family and lattice, one to three patterns.
    Mixed,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Self::LatticeEasy, Self::Bigram, Self::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Self::LatticeEasy => "lattice-easy",
            Self::Bigram => "bigram",
            Self::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| TmrError::Argument(format!("unknown preset {s:?}")))
    }

    pub fn spec(self, seed: u64) -> GenSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Self::LatticeEasy => GenSpec {
                seed,
                width: 256,
                height: 256,
                lattice: if rng.gen_bool(0.5) {
                    Lattice::Square
                } else {
                    Lattice::Hex
                },
                jitter: 0.08,
                motif: if rng.gen_bool(0.5) {
                    MotifFamily::Disc
                } else {
                    MotifFamily::Ring
                },
                motif_size: [0.09, 0.16],
                scale_var: 0.05,
                color_var: 0.05,
                spacing: [1.3, 1.9],
                distractor_density: 0.3,
                patterns: 1,
                min_instances: 4,
                max_instances: 20,
                exemplars: 3,
                lattice_dims: None,
            },
            Self::Bigram => GenSpec {
                seed,
                width: 160,
                height: 160,
                lattice: Lattice::Square,
                jitter: 0.05,
                motif: MotifFamily::Bigram,
                motif_size: [0.08, 0.11],
                scale_var: 0.0,
                color_var: 0.04,
                spacing: [1.4, 1.7],
                distractor_density: 0.0,
                patterns: 3,
                min_instances: 9,
                max_instances: 18,
                exemplars: 3,
                lattice_dims: None,
            },
            Self::Mixed => {
                let lattices = [
                    Lattice::Square,
                    Lattice::Hex,
                    Lattice::FriezeRow,
                    Lattice::Scattered,
                ];
                let families = [
                    MotifFamily::Disc,
                    MotifFamily::Ring,
                    MotifFamily::Bigram,
                    MotifFamily::Texture,
                ];
                GenSpec {
                    seed,
                    width: 256,
                    height: 256,
                    lattice: lattices[rng.gen_range(0..4)],
                    jitter: rng.gen_range(0.0..0.2),
                    motif: families[rng.gen_range(0..4)],
                    motif_size: [0.07, 0.14],
                    scale_var: 0.1,
                    color_var: 0.08,
                    spacing: [1.2, 1.8],
                    distractor_density: 0.5,
                    patterns: rng.gen_range(1..=3),
                    min_instances: 4,
                    max_instances: 24,
                    exemplars: 3,
                    lattice_dims: None,
                }
            }
        }
    }
}

const MAX_ATTEMPTS: u64 = 16;

/// `n` samples named `00000.png`, `00001.png`, ...; a sample whose random
/// layout is infeasible is redrawn from a derived seed.
pub fn generate_dataset(preset: Preset, seed: u64, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let mut last_err = None;
            for attempt in 0..MAX_ATTEMPTS {
                let s = derive_seed(derive_seed(seed, i as u64), attempt);
                match generate(&preset.spec(s)) {
                    Ok((image, mut annotation)) => {
                        annotation.image = format!("{i:05}.png");
                        return Ok(Sample { image, annotation });
                    }
                    Err(e @ TmrError::Generation(_)) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap_or_else(|| TmrError::Generation("no attempt made".into())))
        })
        .collect()
}

/// RGB pixels scaled to `[-1, 1]`.
pub fn image_to_grid<T: Real>(img: &RgbImage) -> Grid3<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img
        .as_raw()
        .iter()
        .map(|&v| T::lit(f64::from(v) / 127.5 - 1.0))
        .collect();
    Grid3::from_vec(h, w, 3, values).expect("rgb buffer matches its dimensions")
}

/// Train and test splits from one base seed.
pub fn generate_splits(
    preset: Preset,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_train == 0 && n_test == 0 {
        return arg_err("requested an empty dataset");
    }
    Ok((
        generate_dataset(preset, derive_seed(seed, 0x7472_6169_6e), n_train)?,
        generate_dataset(preset, derive_seed(seed, 0x7465_7374), n_test)?,
    ))
}
