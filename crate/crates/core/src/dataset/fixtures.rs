//! Small synthetic corpora for tests, demos and smoke runs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::triplet::{KnowledgeTriplet, Relation};
use crate::error::{Error, Result};
use crate::image::{save_raw, Image};

#[derive(Debug, Clone, Copy)]
pub struct Scene {
    pub image: &'static str,
    pub caption: &'static str,
    pub relation: Relation,
    pub head: &'static str,
    pub tail: &'static str,
}

impl Scene {
    pub fn triplet(&self) -> KnowledgeTriplet {
        KnowledgeTriplet::new(self.head, self.relation, self.tail).expect("fixture triplet")
    }
}

const fn scene(image: &'static str, caption: &'static str, relation: Relation, head: &'static str, tail: &'static str) -> Scene {
    Scene {
        image,
        caption,
        relation,
        head,
        tail,
    }
}

/// Eight overhead scenes, each grounded in exactly one triplet.
pub const REMOTE_SENSING: [Scene; 8] = [
    scene("court.raw", "a basketball court surrounded by trees", Relation::UsedFor, "basketball court", "playing games"),
    scene("river.raw", "a river flows past green farmland", Relation::HasProperty, "river", "dangerous to traverse"),
    scene("houses.raw", "many mobile houses line a narrow street", Relation::AtLocation, "mobile houses", "street"),
    scene("airport.raw", "an airplane parked near the terminal", Relation::CapableOf, "airplane", "flying"),
    scene("bridge.raw", "a long bridge crosses the blue lake", Relation::UsedFor, "bridge", "crossing water"),
    scene("harbor.raw", "several boats are docked in the harbor", Relation::PartOf, "harbor", "coastal city"),
    scene("stadium.raw", "a stadium next to a large parking lot", Relation::UsedFor, "parking lot", "storing cars"),
    scene("church.raw", "a white church among residential buildings", Relation::AtLocation, "church", "town center"),
];

/// Triplets that overlap the scene captions on a shorter concept, used to
/// exercise ranking, plus some that match nothing.
pub const DISTRACTORS: [(Relation, &str, &str); 4] = [
    (Relation::UsedFor, "court", "tennis"),
    (Relation::CapableOf, "dog", "barking"),
    (Relation::PartOf, "wheel", "car"),
    (Relation::HasProperty, "desert", "dry"),
];

/// Deterministic image for scene `index`: a base colour, oriented stripes
/// and a bright block, all varying with the index.
pub fn synthetic_image(index: usize, size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let freq = 1.0 + rng.random::<f64>() * 3.0;
    let bx = rng.random_range(0..size.max(2) / 2);
    let by = rng.random_range(0..size.max(2) / 2);
    let side = (size / 3).max(1);
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
        let phase = (u * angle.cos() + v * angle.sin()) * freq * std::f64::consts::TAU;
        let mut value = 0.6 * base[c] + 0.3 * (0.5 + 0.5 * phase.sin());
        if (bx..bx + side).contains(&x) && (by..by + side).contains(&y) {
            value = 1.0 - 0.5 * base[c];
        }
        value.clamp(0.0, 1.0)
    })
}

pub fn captions_tsv(scenes: &[Scene]) -> String {
    scenes.iter().map(|s| format!("{}\t{}\n", s.image, s.caption)).collect()
}

pub fn triplets_tsv(scenes: &[Scene]) -> String {
    let mut out: String = scenes
        .iter()
        .map(|s| format!("{}\t{}\t{}\n", s.relation, s.head.replace(' ', "_"), s.tail.replace(' ', "_")))
        .collect();
    for (r, h, t) in DISTRACTORS {
        out.push_str(&format!("{r}\t{h}\t{t}\n"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub captions: PathBuf,
    pub triplets: PathBuf,
}

/// Writes raw images, `captions.tsv` and `triplets.tsv` into `dir`.
pub fn write_fixture(dir: &Path, scenes: &[Scene], size: usize, seed: u64) -> Result<FixturePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        save_raw(&synthetic_image(i, size, seed), &dir.join(s.image))?;
    }
    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        captions: dir.join("captions.tsv"),
        triplets: dir.join("triplets.tsv"),
    };
    for (path, body) in [(&paths.captions, captions_tsv(scenes)), (&paths.triplets, triplets_tsv(scenes))] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}
