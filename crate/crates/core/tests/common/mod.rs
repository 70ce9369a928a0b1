#![allow(dead_code)]

pub mod oracle;

use infnet::data::{generate_synthetic, SyntheticData, SyntheticSpec};
use infnet::features::{DataSchema, FeatureSchema};
use infnet::model::{Ablation, InfNet, ModelConfig};

pub fn tiny_data_schema() -> DataSchema {
    DataSchema {
        cards: vec![6, 6, 8],
        lens: vec![4, 3],
        vocabs: vec![10, 10],
        tasks: 2,
    }
}

pub fn tiny_schema(d: usize) -> FeatureSchema {
    FeatureSchema::new(tiny_data_schema(), d)
}

pub fn tiny_model(d: usize, blocks: usize, mode: Ablation, seed: u64) -> InfNet<f64> {
    let cfg = ModelConfig {
        blocks,
        ablation: mode,
        ..ModelConfig::default()
    };
    InfNet::new(tiny_schema(d), cfg, seed).unwrap()
}

pub fn tiny_data(noise: f64, n: [usize; 3], seed: u64) -> SyntheticData {
    let spec = SyntheticSpec {
        noise_rate: noise,
        examples: n,
        users: 20,
        ..SyntheticSpec::new(tiny_data_schema())
    };
    generate_synthetic(&spec, seed).unwrap()
}
