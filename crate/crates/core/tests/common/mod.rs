#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::OnceLock;

use ace_core::config::{Settings, SettingsSource};
use ace_core::diffusion::{train_denoiser, EpsDenoiser};
use ace_core::zoo::{synthetic, train_classifier, Dataset, PatchClassifier};

/// Trained models on the builtin benchmark, shared by every test in a
/// binary and cached on disk across binaries.
pub struct Desk {
    pub settings: Settings,
    pub data: Dataset,
    pub classifier: PatchClassifier,
    pub denoiser: EpsDenoiser,
}

fn fixture_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ace-fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn key(parts: &impl serde::Serialize) -> String {
    let mut h = DefaultHasher::new();
    serde_json::to_string(parts).unwrap().hash(&mut h);
    format!("{:016x}", h.finish())
}

pub fn desk_settings() -> Settings {
    SettingsSource { preset: Some("desk".into()), ..Default::default() }.resolve().unwrap()
}

pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let settings = desk_settings();
        let data = synthetic::generate(&settings.dataset).unwrap();
        let dir = fixture_dir();
        let cpath = dir.join(format!("classifier-{}.ckpt", key(&(&settings.dataset, &settings.classifier))));
        let classifier = match PatchClassifier::load(&cpath) {
            Ok(c) => c,
            Err(_) => {
                let c = train_classifier(&data, &settings.classifier).unwrap();
                c.save(&cpath).unwrap();
                c
            }
        };
        let dpath = dir.join(format!("denoiser-{}.ckpt", key(&(&settings.dataset, &settings.denoiser))));
        let denoiser = match EpsDenoiser::load(&dpath) {
            Ok(d) => d,
            Err(_) => {
                let (train, _) = data.split("train").unwrap();
                let (d, _) = train_denoiser(&train, &settings.denoiser).unwrap();
                d.save(&dpath).unwrap();
                d
            }
        };
        Desk { settings, data, classifier, denoiser }
    })
}
