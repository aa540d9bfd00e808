use std::path::{Path, PathBuf};

use tmr_core::backbone::BackboneMode;
use tmr_core::synthbench::{generate_dataset, save_dataset, Preset, Sample};
use tmr_core::trainer::{TrainConfig, Trainer};

pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 2,
        batch_size: 2,
        lr: 1e-3,
        ..Default::default()
    };
    cfg.model.backbone.mode = BackboneMode::Tiny { widths: vec![4, 8] };
    cfg.model.backbone.projection_out = 8;
    cfg.model.head_hidden = Some(8);
    cfg
}

/// Dataset directory plus a briefly trained checkpoint.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub samples: Vec<Sample>,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(Preset::LatticeEasy, 5, 2).unwrap();
        save_dataset(&dir.path().join("data"), &samples).unwrap();
        let mut t = Trainer::<f32>::new(small_config()).unwrap();
        t.run(&samples, None, None).unwrap();
        t.save(dir.path().join("model.tmrc")).unwrap();
        Self { dir, samples }
    }

    pub fn model(&self) -> PathBuf {
        self.dir.path().join("model.tmrc")
    }

    pub fn image(&self) -> PathBuf {
        self.path("data").join(&self.samples[0].annotation.image)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[allow(dead_code)]
pub fn exemplar_arg(s: &Sample) -> String {
    let b = s.annotation.patterns[0].exemplars[0];
    format!("{},{},{},{}", b.cx, b.cy, b.w, b.h)
}

#[allow(dead_code)]
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.strip_prefix(root).unwrap().to_path_buf(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}
