// End-to-end probe of the temporal benchmark: frozen baseline + temporal
// head on ambiguous videos.
use matis_core::inference::{select, InferenceConfig, Strategy};
use matis_core::matching::MatchWeights;
use matis_core::metrics::{evaluate, FramePredictions};
use matis_core::model::train::{train_toy, TrainConfig};
use matis_core::model::{ToyModel, ToyModelConfig};
use matis_core::synth::{gen_video, SynthConfig};
use matis_core::temporal::*;
use matis_core::inference::calibrate_per_class_thresholds;
use matis_core::mask::class_union;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let base_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let n_train_videos: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);

    let scfg = SynthConfig { video_len: 12, ..SynthConfig::default() };
    let train_videos: Vec<_> = (0..n_train_videos).map(|s| gen_video(&scfg, s).unwrap()).collect();
    let test_videos: Vec<_> = (100..110u64).map(|s| gen_video(&scfg, s).unwrap()).collect();
    println!("[{:.0}s] videos generated", t0.elapsed().as_secs_f64());

    // Baseline training on the video frames.
    let mcfg = ToyModelConfig {
        num_queries: 20, embed_dim: 32, decoder_layers: 2, pixel_layers: 2,
        num_classes: 7, grid_h: 16, grid_w: 16, patch: 4, seed: 21,
    };
    let mut baseline = ToyModel::new(mcfg).unwrap();
    let weights = MatchWeights::default();
    let frames: Vec<_> = train_videos.iter().flat_map(|v| v.frames.iter().cloned()).collect();
    let tc = TrainConfig { epochs: base_epochs, batch_size: 8, seed: 7, ..Default::default() };
    let report = train_toy(&mut baseline, &frames, &tc, &weights).unwrap();
    println!("[{:.0}s] baseline trained, last loss {:.3}", t0.elapsed().as_secs_f64(), report.epoch_losses.last().unwrap());

    // Calibrate per-class thresholds on the training videos.
    let all_cfg = InferenceConfig::new(Strategy::AllMasks);
    let mut calib = Vec::new();
    for video in &train_videos {
        for (image, ann) in video.frames.iter().step_by(4) {
            let (set, _) = baseline.forward(&ann.frame, image).unwrap();
            let regions = select(&set, &all_cfg).unwrap();
            let gt = class_union(&ann.instances).unwrap();
            calib.push((regions, gt));
        }
    }
    let grid: Vec<f64> = (1..19).map(|i| i as f64 * 0.05).collect();
    let taus = calibrate_per_class_thresholds(&calib, 7, &grid);
    println!("[{:.0}s] calibrated taus {:?}", t0.elapsed().as_secs_f64(), taus);
    let infer = InferenceConfig::new(Strategy::Composed { ks: scfg.default_ks(), taus });

    // Frame-baseline metrics on test videos.
    let mut base_preds = Vec::new();
    let mut anns = Vec::new();
    for video in &test_videos {
        for (image, ann) in &video.frames {
            let (set, _) = baseline.forward(&ann.frame, image).unwrap();
            let regions = select(&set, &infer).unwrap();
            base_preds.push(FramePredictions::from_selected(ann.frame.clone(), regions));
            anns.push(ann.clone());
        }
    }
    let base_report = evaluate(&base_preds, &anns, 7).unwrap();
    println!("[{:.0}s] frame baseline: mIoU {:.4} IoU {:.4} mcIoU {:.4}",
        t0.elapsed().as_secs_f64(), base_report.miou, base_report.iou, base_report.mciou);

    // Temporal records.
    let train_records = build_keyframe_records(&train_videos, &baseline, &infer, &weights).unwrap();
    let test_records = build_keyframe_records(&test_videos, &baseline, &infer, &weights).unwrap();
    println!("[{:.0}s] records built ({} train)", t0.elapsed().as_secs_f64(), train_records.len());

    let mut tcfg_base = TemporalConfig::new(32);
    tcfg_base.window = 8;
    tcfg_base.pool_h = 8;
    tcfg_base.pool_w = 8;
    tcfg_base.d_t = 24;
    let train_feats: Vec<VideoFeatures> = train_videos.iter().map(|v| pool_video(v, &tcfg_base)).collect();
    let test_feats: Vec<VideoFeatures> = test_videos.iter().map(|v| pool_video(v, &tcfg_base)).collect();

    // Grid over (time_mlp, presence) x 3 seeds, plus W=2.
    for (label, time_mlp, presence, window) in [
        ("off-off W8", false, false, 8usize),
        ("on-off  W8", true, false, 8),
        ("off-on  W8", false, true, 8),
        ("on-on   W8", true, true, 8),
        ("on-on   W2", true, true, 2),
    ] {
        let mut mcious = Vec::new();
        let mut mious = Vec::new();
        for seed in [0u64, 1, 2] {
            let mut tcfg = tcfg_base.clone();
            tcfg.time_mlp = time_mlp;
            tcfg.presence = presence;
            tcfg.lambda_presence = if presence { 1.0 } else { 0.0 };
            tcfg.window = window;
            tcfg.seed = seed;
            let mut model = TemporalModel::new(tcfg, 7).unwrap();
            let tc = TrainConfig { epochs: 30, batch_size: 8, lr: 2e-3, weight_decay: 1e-3, seed: 40 + seed, ..Default::default() };
            let trep = train_temporal(&mut model, &train_records, &train_feats, &tc).unwrap();
            if seed == 0 {
                let acc = |records: &[KeyframeRecord], feats: &[VideoFeatures]| {
                    let mut hit = 0usize; let mut total = 0usize;
                    for r in records {
                        if r.regions.is_empty() { continue; }
                        let w = model.window_features(&feats[r.video], r.t);
                        let probs = model.classify(&w, &r.seg).unwrap();
                        for (i, &label) in r.labels.iter().enumerate() {
                            let row = probs.row(i);
                            let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                            hit += (pred == label) as usize; total += 1;
                        }
                    }
                    hit as f64 / total.max(1) as f64
                };
                println!("    loss {:.3}->{:.3} train acc {:.3} test acc {:.3}",
                    trep.epoch_losses[0], trep.epoch_losses.last().unwrap(),
                    acc(&train_records, &train_feats), acc(&test_records, &test_feats));
            }
            let mut preds = Vec::new();
            for record in &test_records {
                preds.push(relabel_keyframe(&model, record, &test_feats[record.video]).unwrap());
            }
            let report = evaluate(&preds, &anns, 7).unwrap();
            mcious.push(report.mciou);
            mious.push(report.miou);
        }
        let mean_mciou = mcious.iter().sum::<f64>() / 3.0;
        let mean_miou = mious.iter().sum::<f64>() / 3.0;
        println!("[{:.0}s] {label}: mcIoU mean {:.4} {:?} mIoU {:.4}",
            t0.elapsed().as_secs_f64(), mean_mciou, mcious.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>(), mean_miou);
    }
    println!("baseline mcIoU for reference: {:.4}", base_report.mciou);
}
