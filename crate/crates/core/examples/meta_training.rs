//! Pre-training and MAML on a small generated dataset, then few-shot
//! adaptation to a kernel class the model has never seen.
//!
//! cargo run --release --example meta_training

use graphtune::harness::dataset::{gen_dataset, DatasetParams};
use graphtune::meta::{dataset_loss, fine_tune, meta_train, pretrain, MetaConfig};
use graphtune::rng::seeded;

fn main() -> graphtune::Result<()> {
    let params = DatasetParams { num_classes: 12, samples_per_class: 40, ..DatasetParams::default() };
    let train = gen_dataset(&params, &mut seeded(0))?.samples(None)?;
    let unseen = gen_dataset(&DatasetParams { num_classes: 1, ..params.clone() }, &mut seeded(99))?.samples(None)?;
    println!("{} training samples, {} from an unseen class", train.len(), unseen.len());

    let cfg = MetaConfig { pretrain_epochs: 5, outer_steps: 300, ..MetaConfig::default() };
    let pre = pretrain(&train, &cfg, &mut seeded(1))?;
    println!("pre-trained: train mse {:.3}", dataset_loss(&pre, &train)?);

    let mut log = Vec::new();
    let (meta, history) = meta_train(&pre, &train, &cfg, &mut seeded(2), Some(&mut log))?;
    for h in history.iter().step_by(75) {
        println!("meta step {:>3}  support {:.3}  query {:.3}", h.step, h.support_loss, h.query_loss);
    }

    let (support, query) = unseen.split_at(5);
    let adapted = fine_tune(&meta, support, cfg.alpha, 20)?;
    println!(
        "unseen class query mse: before {:.3}, after 5-shot fine-tune {:.3}",
        dataset_loss(&meta, query)?,
        dataset_loss(&adapted, query)?
    );
    Ok(())
}
