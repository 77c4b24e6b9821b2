//! Turns a noisy segmentation into particle instances and scores them
//! against the truth circles.

use virotem::evalmetrics::{evaluate_image, reports_to_csv, Level};
use virotem::postdetect::{detect_instances, PostParams};
use virotem::rng::DetRng;
use virotem::synthgen::{generate_scene, SceneSpec};

fn main() -> virotem::Result<()> {
    let (_, truth) = generate_scene(&SceneSpec { seed: 5, ..SceneSpec::default() })?;

    // stand-in for a network output: the truth mask with 3% of pixels flipped
    let mut pred = truth.mask.clone();
    let mut rng = DetRng::new(9);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if rng.bernoulli(0.03) {
                let v = pred.get(x, y) == 0;
                pred.set(x, y, v);
            }
        }
    }

    let instances = detect_instances(&pred, &PostParams::default())?;
    let (matches, report) = evaluate_image(&instances, &truth.intact_circles, &pred, &truth.mask)?;
    for m in &matches.matches {
        println!("instance {} -> truth {}: overlap {:.2} ({:?})", m.instance, m.gt, m.fraction, m.category);
    }
    let l = report.level(Level::L75);
    println!("TP75 level: precision {:.3} recall {:.3} F {:.3}", l.precision, l.recall, l.f_value);
    print!("{}", reports_to_csv(&[("scene_5".into(), report)])?);
    Ok(())
}
