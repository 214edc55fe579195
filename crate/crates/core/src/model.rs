//! Versioned JSON container for a trained model: the task it was trained
//! for, the network config, the normalization ranges, and every weight.
//!
//! Layout (`version` 1):
//!
//! ```json
//! {
//!   "format": "procaudit-model",
//!   "version": 1,
//!   "task": "binary",
//!   "config": { "input_dim": 8, "hidden_dim": 512, "dropout_ratio": 0.2,
//!               "output_classes": 2, "activation": "relu", "seed": 0 },
//!   "normalization": { "min": [8 reals], "max": [8 reals] },
//!   "layers": [
//!     { "name": "hidden1", "rows": 8,   "cols": 512, "weights": [...], "bias": [...] },
//!     { "name": "hidden2", "rows": 512, "cols": 512, "weights": [...], "bias": [...] },
//!     { "name": "output",  "rows": 512, "cols": 2,   "weights": [...], "bias": [...] }
//!   ]
//! }
//! ```
//!
//! Weights are row-major `(fan_in × fan_out)`. Reals are written in shortest
//! round-trip form, so save/load is bit-exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{LabelMode, ProcurementRecord};
use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};
use crate::mlp::{Dense, NetworkConfig, NetworkParameters, PredictionVector};
use crate::normalize::NormalizationStats;

pub const MODEL_FORMAT: &str = "procaudit-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub task: LabelMode,
    pub params: NetworkParameters,
    pub stats: NormalizationStats,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    name: String,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    task: LabelMode,
    config: NetworkConfig,
    normalization: NormalizationStats,
    layers: Vec<LayerFile>,
}

const LAYER_NAMES: [&str; 3] = ["hidden1", "hidden2", "output"];

impl Model {
    pub fn new(task: LabelMode, params: NetworkParameters, stats: NormalizationStats) -> Self {
        Model {
            task,
            params,
            stats,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    /// Fails unless the model predicts exactly `classes` classes.
    pub fn expect_classes(&self, classes: usize) -> Result<()> {
        if self.num_classes() != classes {
            return Err(Error::Usage(format!(
                "model predicts {} classes but {classes} were expected",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn predict_record(&self, record: &ProcurementRecord) -> Result<PredictionVector> {
        self.params
            .predict(&self.stats.transform_features(&record.features()))
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<()> {
        let layers = [&self.params.hidden1, &self.params.hidden2, &self.params.output]
            .into_iter()
            .zip(LAYER_NAMES)
            .map(|(l, name)| LayerFile {
                name: name.to_string(),
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                weights: l.weights.as_slice().to_vec(),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            task: self.task,
            config: self.params.config().clone(),
            normalization: self.stats.clone(),
            layers,
        };
        serde_json::to_writer(sink, &file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_reader(source).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file: format `{}`", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                file.version
            )));
        }
        if file.layers.len() != 3 {
            return Err(Error::Format(format!("expected 3 layers, found {}", file.layers.len())));
        }
        let mut dense = Vec::with_capacity(3);
        for (layer, name) in file.layers.into_iter().zip(LAYER_NAMES) {
            if layer.name != name {
                return Err(Error::Format(format!("expected layer `{name}`, found `{}`", layer.name)));
            }
            let weights = Matrix::from_vec(layer.rows, layer.cols, layer.weights)
                .map_err(|e| Error::Format(format!("layer {name}: {e}")))?;
            dense.push(Dense {
                weights,
                bias: Vector::new(layer.bias),
            });
        }
        let output = dense.pop().unwrap();
        let hidden2 = dense.pop().unwrap();
        let hidden1 = dense.pop().unwrap();
        let params = NetworkParameters::from_layers(file.config, hidden1, hidden2, output)
            .map_err(|e| Error::Format(e.to_string()))?;
        let classes = params.num_classes();
        if file.task == LabelMode::Binary && classes != 2 {
            return Err(Error::Format(format!("binary model with {classes} outputs")));
        }
        Ok(Model {
            task: file.task,
            params,
            stats: file.normalization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(classes: usize) -> Model {
        let cfg = NetworkConfig {
            hidden_dim: 6,
            output_classes: classes,
            activation: Activation::Relu,
            seed: 42,
            ..NetworkConfig::default()
        };
        let stats = NormalizationStats {
            min: [0.0, 1.0, 1.0, 1.0, 0.5, 1.0, 0.5, 1.0],
            max: [1e6, 40.0, 20.0, 50.0, 440.0, 1000.0, 1.3e5, 200.0],
        };
        let task = if classes == 2 { LabelMode::Binary } else { LabelMode::Multiclass };
        Model::new(task, NetworkParameters::init(&cfg).unwrap(), stats)
    }

    fn saved(m: &Model) -> String {
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let m = model(2);
        let back = Model::load(saved(&m).as_bytes()).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let r = ProcurementRecord {
                psn: rng.gen_range(0..1_000_000),
                pgn: rng.gen_range(1..=40),
                pon: rng.gen_range(1..=20),
                mgn: rng.gen_range(1..=50),
                np: rng.gen_range(1.0..400.0),
                pa: rng.gen_range(1.0..900.0),
                ptp: rng.gen_range(1.0..1e5),
                ft: 0,
                ssn: rng.gen_range(1..=200),
            };
            assert_eq!(m.predict_record(&r).unwrap(), back.predict_record(&r).unwrap());
        }
        // bit-stable: saving the loaded model reproduces the same bytes
        assert_eq!(saved(&back), saved(&m));
    }

    #[test]
    fn tampered_shape_rejected() {
        let text = saved(&model(2)).replacen("\"rows\":8", "\"rows\":9", 1);
        assert!(matches!(Model::load(text.as_bytes()), Err(Error::Format(_))));
        let text = saved(&model(2)).replacen("\"hidden_dim\":6", "\"hidden_dim\":7", 1);
        assert!(matches!(Model::load(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let text = saved(&model(2)).replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(Model::load(text.as_bytes()), Err(Error::Format(_))));
        assert!(matches!(Model::load(&b"{}"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn class_contract() {
        let m = model(2);
        assert!(m.expect_classes(2).is_ok());
        assert!(matches!(m.expect_classes(5), Err(Error::Usage(_))));
    }
}
