// Training dynamics probe for the full-scale acceptance configuration.
use matis_core::inference::{select, InferenceConfig, Strategy};
use matis_core::matching::MatchWeights;
use matis_core::metrics::{evaluate, FramePredictions};
use matis_core::model::train::{train_toy, TrainConfig};
use matis_core::model::{ToyModel, ToyModelConfig};
use matis_core::synth::{gen_frame, SynthConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let frames: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);

    let scfg = SynthConfig::default();
    let dataset: Vec<_> = (0..frames as u64).map(|s| gen_frame(&scfg, s).unwrap()).collect();
    let held: Vec<_> = (10_000..10_060u64).map(|s| gen_frame(&scfg, s).unwrap()).collect();

    let mcfg = ToyModelConfig {
        num_queries: 20,
        embed_dim: 32,
        decoder_layers: 2,
        pixel_layers: 2,
        num_classes: 7,
        grid_h: 16,
        grid_w: 16,
        patch: 4,
        seed: 11,
    };
    let mut model = ToyModel::new(mcfg).unwrap();
    let weights = MatchWeights::default();
    let infer = InferenceConfig::new(Strategy::Composed {
        ks: scfg.default_ks(),
        taus: vec![0.5; 7],
    });

    let t0 = Instant::now();
    for round in 0..epochs {
        let tc = TrainConfig { epochs: 1, batch_size: 8, seed: 100 + round as u64, ..Default::default() };
        let report = train_toy(&mut model, &dataset, &tc, &weights).unwrap();
        let loss = report.epoch_losses[0];
        // Held-out evaluation.
        let mut preds = Vec::new();
        let mut anns = Vec::new();
        for (image, ann) in &held {
            let (set, _) = model.forward(&ann.frame, image).unwrap();
            let regions = select(&set, &infer).unwrap();
            preds.push(FramePredictions::from_selected(ann.frame.clone(), regions));
            anns.push(ann.clone());
        }
        let report = evaluate(&preds, &anns, 7).unwrap();
        println!(
            "epoch {:>2}  loss {:.4}  held mIoU {:.4} IoU {:.4} mcIoU {:.4}  [{:.0}s]",
            round + 1, loss, report.miou, report.iou, report.mciou, t0.elapsed().as_secs_f64()
        );
    }
}
