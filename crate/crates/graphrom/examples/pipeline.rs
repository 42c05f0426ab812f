//! End-to-end drive: synthetic DOE -> mesh -> pooling levels -> short fit
//! -> evaluation, printing the headline metrics.

use graphrom::aero::{moment_reference, AeroReference};
use graphrom::coarsen::RetentionProfile;
use graphrom::dataset::{lhs_sample, split, Doe, Manifest, SplitLabel, SplitSpec, SyntheticCase};
use graphrom::gcn::AdamConfig;
use graphrom::hpo::GeometryCache;
use graphrom::model::{Model, ModelConfig};
use graphrom::mwls::MwlsParams;
use graphrom::training::{evaluate, fit, MomentPenalty, TrainConfig, TrainContext};

fn main() -> graphrom::Result<()> {
    let doe = Doe { n_samples: 12, ..Doe::default() };
    let case = SyntheticCase { nx: 18, ny: 14, ..SyntheticCase::default() };
    let points = lhs_sample(&doe)?;
    let splits = split(doe.n_samples, &SplitSpec::Counts([8, 2, 2]), doe.seed)?;
    let manifest = Manifest::new(doe, case.clone(), &points, &splits)?;

    let mesh = case.build_mesh()?;
    let train = manifest.samples(SplitLabel::Train)?;
    let val = manifest.samples(SplitLabel::Val)?;
    let test = manifest.samples(SplitLabel::Test)?;
    println!(
        "mesh: {} nodes, {} cells; samples: {} train / {} val / {} test",
        mesh.n_nodes(),
        mesh.n_cells(),
        train.len(),
        val.len(),
        test.len()
    );

    let point = moment_reference(&mesh, 0.25, case.chord, 0.0)?;
    let reference =
        AeroReference { chord: case.chord, area: mesh.total_area(), moment_point: point, alpha_deg: 0.0 };
    let ctx = TrainContext::new(&mesh, reference, &train)?;

    let cache = GeometryCache::build(
        &mesh,
        &train,
        &[0.5],
        &RetentionProfile::default(),
        &MwlsParams::default(),
        0,
    )?;
    let geometry = cache.get(0.5).expect("ratio cached").clone();
    println!(
        "levels: {} -> {} -> {} nodes",
        geometry.n_fine(),
        geometry.n_mid(),
        geometry.n_coarse()
    );

    let config = ModelConfig {
        encoder_blocks: vec![vec![48], vec![48, 48], vec![48]],
        reduced_block: vec![48],
        ratios: [0.5, 0.5],
    };
    let mut model = Model::build(config, geometry, 1)?;
    let train_config = TrainConfig {
        epochs: 40,
        adam: AdamConfig { lr0: 0.005, decay_interval: 100, ..AdamConfig::default() },
        batch_size: 1,
        lambda: 0.01,
        penalty: MomentPenalty::AbsoluteError,
        seed: 2,
    };
    let result = fit(&mut model, &ctx, &train, &val, &train_config)?;
    let first = result.history.epochs.first().expect("history").train_loss;
    let last = result.history.epochs.last().expect("history").train_loss;
    println!(
        "fit: {} epochs, train loss {first:.3e} -> {last:.3e}, best val {:.3e} at epoch {}",
        result.history.epochs.len(),
        result.best_val_loss,
        result.best_epoch
    );
    assert!(last < first, "training made no progress");

    let evaluation = evaluate(&model, &ctx, &test)?;
    println!(
        "test: Cp MAPE {:.2}% | mean CL/CD/CMy errors {:.2}% / {:.2}% / {:.2}%",
        evaluation.mean_mape_percent[0],
        evaluation.mean_coefficient_error_percent[0],
        evaluation.mean_coefficient_error_percent[1],
        evaluation.mean_coefficient_error_percent[2]
    );
    Ok(())
}
