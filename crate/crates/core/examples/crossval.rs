//! k-fold cross-validation of the desk U-Net on a synthetic corpus.
//!
//! cargo run --release --example crossval -- [n_images] [epochs]
//!
//! The defaults finish in a few minutes; 50 images and 30 epochs is the
//! full-size run.

use virotem::evalmetrics::reports_to_csv;
use virotem::synthgen::{generate_corpus_in_memory, CorpusItem, SceneSpec};
use virotem::training::{run_crossval, CrossvalConfig, CrossvalEvent};

fn main() -> virotem::Result<()> {
    let mut args = std::env::args().skip(1).map(|v| v.parse::<usize>().ok());
    let n = args.next().flatten().unwrap_or(10);
    let epochs = args.next().flatten().unwrap_or(3);

    let corpus: Vec<CorpusItem> = generate_corpus_in_memory(&SceneSpec::default(), n, 2024)?
        .into_iter()
        .map(|(image, t)| CorpusItem { image, mask: t.mask, circles: t.intact_circles })
        .collect();
    let mut cv = CrossvalConfig::default();
    cv.hyper.epochs = epochs;

    let report = run_crossval(&corpus, &cv, &mut |e| match e {
        CrossvalEvent::FoldStart { fold, train_patches } => println!("fold {fold}: {train_patches} training patches"),
        CrossvalEvent::Epoch { fold, stats } => println!("  fold {fold} epoch {} loss {:.4}", stats.epoch, stats.mean_loss),
        CrossvalEvent::FoldDone { fold, report } => println!("  fold {fold} Dice {:.3}", report.dice),
    })?;
    print!("{}", reports_to_csv(&report.rows())?);
    Ok(())
}
