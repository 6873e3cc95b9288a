#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embshift::io::{write_manifest, write_wav};
use embshift::model::{AudioClip, DatasetManifest, LabelTargets, Labels, ManifestClip};

/// Labelled toy dataset on disk: even clips are white noise, odd clips a
/// 440 Hz tone over a little noise. Returns the manifest path.
pub fn write_dataset(dir: &Path, n: usize, fs: u32, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = fs as usize;
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let amp = rng.random_range(0.1..0.4);
        let samples: Vec<f64> = (0..len)
            .map(|k| {
                let noise = rng.random_range(-1.0..1.0);
                if i % 2 == 0 {
                    amp * noise
                } else {
                    let t = k as f64 / fs as f64;
                    amp * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.01 * noise
                }
            })
            .collect();
        let clip = AudioClip::new(format!("clip{i:03}"), samples, fs).unwrap();
        let path = dir.join(format!("{}.wav", clip.id()));
        write_wav(&clip, &path).unwrap();
        entries.push(ManifestClip {
            id: clip.id().to_string(),
            path: PathBuf::from(format!("{}.wav", clip.id())),
        });
        labels.push(i % 2);
    }
    let labels = Labels {
        classes: vec!["noise".into(), "tone".into()],
        targets: LabelTargets::Single(labels),
    };
    let manifest = DatasetManifest::new(entries, Some(labels), None).unwrap();
    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path).unwrap();
    path
}
