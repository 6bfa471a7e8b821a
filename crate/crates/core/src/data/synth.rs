use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    io_err, sample_scene, simulate_lidar, write_labels, DataError, DatasetManifest, Difficulty, DomainSpec, Label,
    ManifestEntry, ObjectClass, Sample, ScenePrior, SceneSpec,
};
use crate::gridmap::{compose_gridmap_multi, write_gridmap, GridSpec, PointCloud};
use crate::losses::DomainTag;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub prior: ScenePrior,
    pub sensor: DomainSpec,
    pub domain: DomainTag,
    pub split: String,
}

/// Synthetic difficulty band from range to the ego origin and the number of
/// returns inside the footprint.
pub fn difficulty_of(range: f64, points: usize) -> Option<Difficulty> {
    if range < 15.0 && points >= 30 {
        Some(Difficulty::Easy)
    } else if range < 25.0 && points >= 10 {
        Some(Difficulty::Moderate)
    } else if points >= 1 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

fn labels_for(scene: &SceneSpec, clouds: &[PointCloud]) -> Vec<Label> {
    let mut labels = Vec::new();
    for obj in &scene.objects {
        let Some(class) = obj.class else { continue };
        let b = obj.footprint;
        let points = clouds
            .iter()
            .flat_map(|c| &c.points)
            .filter(|p| b.contains(p.x, p.y))
            .count();
        let difficulty = difficulty_of(b.x.hypot(b.y), points);
        // objects without a single return cannot be detected; they become
        // don't-care regions
        labels.push(Label {
            class: if difficulty.is_some() { class } else { ObjectClass::DontCare },
            bbox: b,
            difficulty,
        });
    }
    labels
}

/// Deterministic sample `index` of a synthetic dataset.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<(Sample, SceneSpec), DataError> {
    cfg.sensor.validate().map_err(DataError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut prior = cfg.prior.clone();
    prior.half_extent = prior.half_extent.min(cfg.grid.half_extent());
    let scene = sample_scene(&prior, &mut rng);
    let clouds = simulate_lidar(&scene, &cfg.sensor, &mut rng);
    let map = compose_gridmap_multi(&clouds, cfg.grid)?;
    let labels = labels_for(&scene, &clouds);
    Ok((Sample::new(map, labels, cfg.domain), scene))
}

/// Writes `cfg.n` samples under `out/<split>/` and the manifest
/// `out/<split>.tsv`.
pub fn synth_dataset(out: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, DataError> {
    if cfg.n == 0 {
        return Err(DataError::Config("dataset size must be positive".into()));
    }
    let dir = out.join(&cfg.split);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let entries = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let (sample, _) = synth_sample(cfg, i)?;
            let gm = PathBuf::from(&cfg.split).join(format!("{i:06}.gmap"));
            let lb = PathBuf::from(&cfg.split).join(format!("{i:06}.txt"));
            write_gridmap(&out.join(&gm), &sample.gridmap)?;
            write_labels(&out.join(&lb), sample.labels())?;
            Ok(ManifestEntry {
                gridmap: gm,
                labels: lb,
                domain: cfg.domain,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        split: cfg.split.clone(),
        entries,
    };
    manifest.write(&out.join(format!("{}.tsv", cfg.split)))?;
    Ok(manifest)
}
