use std::time::Instant;

use mainet::arpm::ArpmConfig;
use mainet::backbone::BackboneConfig;
use mainet::data::{gen_synthetic, Modality, SynthConfig};
use mainet::model::{FeatureFusion, Model, ModelConfig};
use mainet::train::{evaluate, split_dataset, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let map: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let fusion = match args.get(4).map(String::as_str) {
        Some("none") => FeatureFusion::None,
        Some("concat") => FeatureFusion::Concat,
        _ => FeatureFusion::Arpm,
    };
    let mods: Vec<Modality> = args.get(5).map_or("iaw", |s| s.as_str()).chars().map(|c| match c { 'i' => Modality::Image, 'a' => Modality::Audio, _ => Modality::Wave }).collect();
    let t0 = Instant::now();
    let data = gen_synthetic(&SynthConfig { n_samples: n, map_size: map, seed: 1, ..SynthConfig::default() }).unwrap();
    println!("gen {:?}", t0.elapsed());
    let cfg = ModelConfig {
        modalities: mods,
        fusion,
        backbone: BackboneConfig {
            stage_channels: [4, 8, 16, 32],
            large_kernel: 5,
            dilated_branches: vec![(5, 1), (3, 2)],
            blocks_per_stage: 1,
            se_reduction: 4,
            mlp_ratio: 2,
        },
        arpm: ArpmConfig { d_model: 32, heads: 4, tokens: 4 },
        wave_embed_dim: map,
        er_raw_init: 2.0,
    };
    let mut model = Model::new(cfg, 1).unwrap();
    println!("params {}", model.num_params());
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let tc = TrainConfig { epochs, seed: 1, split: [0.6, 0.2, 0.2], ..TrainConfig::default() };
    let split = split_dataset(&labels, &tc.split, 1).unwrap();
    let t0 = Instant::now();
    train(&mut model, &data, &split, &tc, None, false, &mut |r| println!("{:?} {:?}", r, t0.elapsed())).unwrap();
    let ev = evaluate(&model, &data, &split.test).unwrap();
    println!("test acc {:.2} total {:?}", ev.metrics.accuracy, t0.elapsed());
}
