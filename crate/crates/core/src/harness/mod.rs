//! Synthetic scenes, the training and evaluation loop, run configuration,
//! file formats and checkpoints.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod io;
pub mod scene;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{RunConfig, TrainerConfig};
pub use scene::{generate_scene, SyntheticScene};
pub use train::{ablate_k, ablation_csv, depth_image_metrics, evaluate, train, train_from, AblationRow, EvalMetrics, RunReport};

/// JSON has no infinity; infinite values are written as the strings
/// `"inf"` / `"-inf"` and read back from either form.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}
