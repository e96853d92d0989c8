//! Artifacts written by one stage are read back by the next without loss.

use canids::can::{read_capture_from, write_capture, Label, ParseMode};
use canids::cqmlp::{CqmlpModel, Mode};
use canids::dataflow::{streamline, ThresholdPipeline};
use canids::feature::{build_blocks, read_blocks, split_dataset, write_blocks, DEFAULT_RATIOS};
use canids::sim::Scenario;
use canids::training::{predict, train_qat, TrainConfig};

#[test]
fn capture_blocks_model_pipeline() {
    let frames = Scenario::bursty(Label::SpoofRpm, 4.0, 1.0, 21).generate().unwrap();
    let mut text = Vec::new();
    write_capture(&mut text, &frames).unwrap();
    let reread = read_capture_from(text.as_slice(), std::path::Path::new("mem"), Label::SpoofRpm, ParseMode::Strict).unwrap();
    assert_eq!(reread.frames, frames);

    let blocks = build_blocks(&reread.frames, 4, 4);
    let mut bin = Vec::new();
    write_blocks(&mut bin, 4, &blocks).unwrap();
    let (window, back) = read_blocks(bin.as_slice()).unwrap();
    assert_eq!((window, &back), (4, &blocks));

    let split = split_dataset(back, DEFAULT_RATIOS, 21).unwrap();
    let config = TrainConfig {
        epochs: 3,
        bits: 3,
        dims: vec![40, 24, 12, 4],
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let model = train_qat(&config, &split).unwrap().model;
    let model = CqmlpModel::from_text(&model.to_text()).unwrap();
    let pipeline = ThresholdPipeline::from_text(&streamline(&model).unwrap().to_text()).unwrap();

    let reference = predict(&model, &split.test, Mode::FakeQuant).unwrap();
    let integer: Vec<usize> = split.test.iter().map(|b| pipeline.run_int(b).class).collect();
    assert_eq!(integer, reference);
}
