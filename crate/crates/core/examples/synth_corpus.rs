//! Writes a small synthetic corpus and prints what each scene contains.
//!
//! cargo run --release --example synth_corpus -- [out_dir] [n]

use virotem::synthgen::{generate_corpus, load_corpus, SceneSpec};

fn main() -> virotem::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth_corpus".into());
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(5);

    generate_corpus(&SceneSpec::default(), n, 2024, &out)?;
    for (i, item) in load_corpus(&out)?.iter().enumerate() {
        let fg = item.mask.count() as f64 / (item.mask.width() * item.mask.height()) as f64;
        println!("image {i}: {} intact particles, {:.1}% foreground", item.circles.len(), fg * 100.0);
    }
    println!("corpus written to {out}");
    Ok(())
}
