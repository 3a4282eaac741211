//! Synthetic streams for the simulated backends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GoldAnswer, GoldKind, Sample};
use crate::error::{Error, Result};

const CLASS_NAMES: [&str; 24] = [
    "stop",
    "yield",
    "no entry",
    "speed limit 30",
    "speed limit 50",
    "speed limit 80",
    "roundabout",
    "pedestrian crossing",
    "children crossing",
    "bicycle lane",
    "slippery road",
    "road works",
    "keep right",
    "keep left",
    "no overtaking",
    "priority road",
    "wild animals",
    "falling rocks",
    "double curve",
    "bumpy road",
    "ahead only",
    "turn left",
    "turn right",
    "end of restrictions",
];

const LABEL_QUESTION: &str = "What is the traffic sign?";
const CAPTION_QUESTION: &str = "Describe the image.";

fn d_classes() -> usize {
    10
}
fn d_stream() -> usize {
    500
}
fn d_support() -> usize {
    400
}
fn d_validation() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Task name used in image references.
    pub task: String,
    pub kind: GoldKind,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_stream")]
    pub stream: usize,
    #[serde(default = "d_support")]
    pub support: usize,
    #[serde(default = "d_validation")]
    pub validation: usize,
    /// Offer all class names as options on label samples.
    #[serde(default)]
    pub with_options: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn labels(task: impl Into<String>, seed: u64) -> Self {
        Self {
            task: task.into(),
            kind: GoldKind::Label,
            classes: d_classes(),
            stream: d_stream(),
            support: d_support(),
            validation: d_validation(),
            with_options: false,
            seed,
        }
    }

    pub fn captions(task: impl Into<String>, seed: u64) -> Self {
        Self {
            kind: GoldKind::Caption,
            ..Self::labels(task, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthData {
    pub stream: Vec<Sample>,
    pub support: Vec<Sample>,
    pub validation: Vec<Sample>,
}

fn slug(name: &str) -> String {
    name.replace(' ', "-")
}

fn captions_for(name: &str) -> Vec<String> {
    vec![
        format!("a {name} sign beside the road"),
        format!("a road sign showing {name}"),
        format!("the {name} sign on a pole"),
    ]
}

/// Samples with uniformly drawn classes. Image references have the form
/// `sim://{task}/{class}/{split}-{i}` so the simulator can recover the class.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    if spec.classes < 2 || spec.classes > CLASS_NAMES.len() {
        return Err(Error::InvalidConfig(format!(
            "classes must be in 2..={}",
            CLASS_NAMES.len()
        )));
    }
    if spec.task.is_empty() || spec.task.contains('/') {
        return Err(Error::InvalidConfig("task must be a non-empty name without '/'".into()));
    }
    let names = &CLASS_NAMES[..spec.classes];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let class = names[rng.random_range(0..names.len())];
                let image = format!("sim://{}/{}/{name}-{i}", spec.task, slug(class));
                let id = format!("{}-{name}-{i}", spec.task);
                match spec.kind {
                    GoldKind::Label => {
                        let s = Sample::new(id, image, LABEL_QUESTION).with_gold(GoldAnswer::label(class));
                        if spec.with_options {
                            s.with_options(names.iter().map(|n| n.to_string()).collect())
                        } else {
                            s
                        }
                    }
                    GoldKind::Caption => {
                        Sample::new(id, image, CAPTION_QUESTION).with_gold(GoldAnswer::captions(captions_for(class)))
                    }
                }
            })
            .collect()
    };
    Ok(SynthData {
        stream: split("stream", spec.stream),
        support: split("support", spec.support),
        validation: split("val", spec.validation),
    })
}
