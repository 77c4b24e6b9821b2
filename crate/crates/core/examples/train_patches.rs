//! Trains the desk-sized U-Net on patches of one synthetic scene, saves a
//! checkpoint and segments the full scene with it.
//!
//! cargo run --release --example train_patches -- [epochs]

use virotem::evalmetrics::MaskTally;
use virotem::nnet::{read_checkpoint, write_checkpoint, TrainHyper, UNetConfig};
use virotem::synthgen::{generate_scene, SceneSpec};
use virotem::training::{infer_full_image, make_patch_dataset, train, AugmentConfig};

fn main() -> virotem::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(10);
    let (img, truth) = generate_scene(&SceneSpec { seed: 7, ..SceneSpec::default() })?;
    let dataset = make_patch_dataset([(&img, &truth.mask)], 64)?;
    let hyper = TrainHyper { epochs, ..TrainHyper::default() };

    let run = train(&dataset, UNetConfig::desk(), &hyper, &AugmentConfig::default(), 1, &mut |e| {
        println!("epoch {:>3}  loss {:.4}  pixel accuracy {:.4}", e.epoch, e.mean_loss, e.accuracy)
    })?;
    if run.early_90 {
        println!("accuracy passed 0.9 within the first five epochs");
    }

    write_checkpoint(&run.model, "desk.ckpt")?;
    let model = read_checkpoint("desk.ckpt")?;
    let pred = infer_full_image(&model, &img)?;
    let t = MaskTally::of(&pred, &truth.mask)?;
    println!("full-scene Dice {:.3}, IoU {:.3}", t.dice(), t.iou());
    Ok(())
}
