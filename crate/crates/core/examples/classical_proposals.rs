//! Runs the Hough-based candidate proposer on one synthetic scene and
//! reports how each stage narrows the candidates.
//!
//! cargo run --release --example classical_proposals -- [seed]

use virotem::classical::{propose_stages, ProposalParams};
use virotem::postdetect::burn_overlay;
use virotem::raster::write_rgb_png;
use virotem::synthgen::{generate_scene, SceneSpec};

fn main() -> virotem::Result<()> {
    let seed = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(3);
    let (img, truth) = generate_scene(&SceneSpec { seed, ..SceneSpec::default() })?;
    let stages = propose_stages(&img, &ProposalParams::default())?;

    println!("bright-area mask covers {} px", stages.bright.count());
    println!("hough peaks: {}, after halo filter: {}", stages.hough.len(), stages.candidates.len());
    let hits = truth
        .intact_circles
        .iter()
        .filter(|t| stages.candidates.iter().any(|c| (c.cx - t.cx).hypot(c.cy - t.cy) <= 2.0))
        .count();
    println!("{hits} of {} intact particles found within 2 px", truth.intact_circles.len());

    let circles: Vec<_> = stages.candidates.iter().map(|c| c.circle()).collect();
    write_rgb_png(&burn_overlay(&img, &circles, [255, 0, 0]), "proposals.png")?;
    println!("overlay written to proposals.png");
    Ok(())
}
