//! Trains the language-conditioned encoder-decoder model on a synthetic
//! world and prints the per-epoch learning curve, then compares it against
//! the non-learning baselines and the text-blind variant on the dev split.
//!
//! ```bash
//! cargo run --release --example train_sdr
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streetnav::metrics::{grid_radius, sdr_accuracy, sdr_consistency, sdr_mean_distance};
use streetnav::sdr::{
    default_sdr_lr, eval_baseline, eval_sdr, train_sdr, PointBaseline, SdrModelKind,
    SdrPredictor, SdrPredictorConfig, SdrTrainConfig,
};
use streetnav::tensor::ParamStore;
use streetnav::world::{SyntheticConfig, SyntheticWorld};

fn main() -> anyhow::Result<()> {
    let world = SyntheticWorld::generate(SyntheticConfig {
        seed: 7,
        ..SyntheticConfig::default()
    })?;
    println!(
        "world: {} nodes, {} edges, {} train / {} dev location examples",
        world.graph.node_count(),
        world.graph.edge_count(),
        world.sdr_train.len(),
        world.sdr_dev.len()
    );

    let kind = SdrModelKind::LingUnet;
    let pcfg = SdrPredictorConfig {
        kind,
        vocab_size: world.vocab().len(),
        channels: world.config.feature_channels,
        embed_dim: 48,
        text_hidden: 48,
        levels: 2,
        mlp_hidden: 128,
        init_bound: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let predictor = SdrPredictor::init(&mut store, &pcfg, &mut rng)?;
    println!("model: {} ({} parameters)", kind.label(), store.total_params());

    let tcfg = SdrTrainConfig {
        lr: default_sdr_lr(kind),
        sigma: 1.25,
        scale: world.scale(),
        patience: 10,
        max_epochs: 60,
        embed_dropout: 0.5,
        early_stop_radius_px: 8.0,
        seed: 1,
    };
    let val_n = (world.sdr_train.len() as f64 * 0.07).ceil() as usize;
    let (train, val) = world.sdr_train.split_at(world.sdr_train.len() - val_n);
    println!(
        "training on {} examples, early stopping on {} held out (accuracy within {} px)",
        train.len(),
        val.len(),
        tcfg.early_stop_radius_px
    );

    let (best, history) = train_sdr(&predictor, store, train, val, &world, &tcfg)?;
    for e in &history.epochs {
        println!(
            "epoch {:>3}  train KL {:>7.4}  val acc {:>6.3}",
            e.epoch, e.train_loss, e.val_metric
        );
    }
    println!(
        "best epoch {} with validation accuracy {:.3}",
        history.best_epoch, history.best_metric
    );

    let scale = world.scale();
    let one_cell = scale; // one grid cell, in image pixels
    let outcome = eval_sdr(&predictor, &best, &world.sdr_dev, &world, scale)?;
    println!("\ndev split ({} examples):", world.sdr_dev.len());
    for radius in [one_cell, 40.0, 80.0, 120.0] {
        println!(
            "  accuracy@{radius:>5.1}px {:.3}   consistency {:.3}",
            sdr_accuracy(&outcome.grid, grid_radius(radius, scale)),
            sdr_consistency(&outcome.grid, grid_radius(radius, scale)),
        );
    }
    println!(
        "  mean distance {:.1} px",
        sdr_mean_distance(&outcome.image)
    );

    // Non-learning baselines for scale.
    let (image_w, image_h) = world.image_dims();
    let targets: Vec<(f64, f64)> = world
        .sdr_train
        .iter()
        .map(|e| (e.target_x, e.target_y))
        .collect();
    println!("\nbaselines (accuracy within one cell):");
    for baseline in [
        PointBaseline::Random,
        PointBaseline::Center,
        PointBaseline::Average,
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let outcome = eval_baseline(
            baseline,
            &world.sdr_dev,
            image_w,
            image_h,
            &targets,
            scale,
            &mut rng,
        )?;
        println!(
            "  {:?}: {:.3}",
            baseline,
            sdr_accuracy(&outcome.grid, 1.0)
        );
    }
    Ok(())
}
