#![allow(dead_code)]

use std::sync::OnceLock;

use evidex::classifier::{train_classifier, Architecture, ClassifierModel, TrainConfig};
use evidex::synth::{self, SynthImage};

pub struct Fixture {
    pub model: ClassifierModel,
    pub test: Vec<SynthImage>,
    pub accuracy: f64,
}

/// The default classifier (default corpus and training config), trained once per test binary.
pub fn trained() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (train, test) = synth::split(synth::generate_corpus(250, 64, 42).unwrap());
        let (model, report) =
            train_classifier(Architecture::default(), &train, &test, &TrainConfig::default()).unwrap();
        Fixture {
            model,
            test,
            accuracy: report.test_accuracy.unwrap(),
        }
    })
}

/// Held-out images the fixture model labels correctly, for each class in turn.
pub fn correct_images(n: usize) -> Vec<&'static SynthImage> {
    let f = trained();
    f.test
        .iter()
        .filter(|img| f.model.predict(&img.batch()).unwrap().0 == img.label)
        .take(n)
        .collect()
}
