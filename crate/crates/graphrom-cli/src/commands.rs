//! Subcommand implementations: each one loads its inputs, runs the library
//! pipeline stage, writes artifacts plus a configuration echo into the
//! output directory, and prints a short summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use graphrom::aero::{moment_reference, AeroReference};
use graphrom::checkpoint::{LevelsCheckpoint, ModelCheckpoint};
use graphrom::coarsen::build_level;
use graphrom::dataset::{lhs_sample, split, Manifest, SplitLabel};
use graphrom::graph::build_graph;
use graphrom::gradient::aggregate_gradient_magnitude;
use graphrom::hpo::{optimize, save_trials_jsonl, trial_objective, GeometryCache, TrialSetup};
use graphrom::mesh::{FieldSet, SurfaceMesh};
use graphrom::model::{Model, ModelConfig, ModelGeometry};
use graphrom::training::{evaluate, fit, Evaluation, FlowSample, TrainContext};

use crate::config::{seed_offsets, AeroSection, RunConfig};
use crate::CliError;

/// Field-file channel names, in head order.
const FIELD_NAMES: [&str; 4] = ["cp", "cfx", "cfy", "cfz"];

fn mesh_file(data_dir: &Path) -> PathBuf {
    data_dir.join("mesh.txt")
}

fn manifest_file(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.json")
}

fn field_file(data_dir: &Path, index: usize) -> PathBuf {
    data_dir.join(format!("fields_{index:03}.txt"))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(data_dir: &Path) -> Result<(SurfaceMesh, Manifest), CliError> {
    let mesh = SurfaceMesh::load(mesh_file(data_dir))?;
    let manifest = Manifest::load_json(manifest_file(data_dir))?;
    Ok((mesh, manifest))
}

/// Samples of one split read back from the generated field files, so every
/// downstream stage consumes exactly what `gen` wrote.
fn load_split_samples(
    data_dir: &Path,
    manifest: &Manifest,
    label: SplitLabel,
    n_nodes: usize,
) -> Result<Vec<FlowSample>, CliError> {
    let manifest_path = manifest_file(data_dir);
    let mut samples = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == label) {
        let path = field_file(data_dir, entry.index);
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "field file {} for design point {} is missing; regenerate the dataset \
                 described by {} with `graphrom gen`",
                path.display(),
                entry.index,
                manifest_path.display(),
            )));
        }
        let fields = FieldSet::load(&path)?;
        if !fields.names().iter().map(String::as_str).eq(FIELD_NAMES) {
            return Err(CliError::Usage(format!(
                "{} carries fields {:?}, expected {FIELD_NAMES:?}; regenerate the dataset \
                 described by {}",
                path.display(),
                fields.names(),
                manifest_path.display(),
            )));
        }
        if fields.n_nodes() != n_nodes {
            return Err(CliError::Usage(format!(
                "{} has {} rows for a {}-node mesh; regenerate the dataset described by {}",
                path.display(),
                fields.n_nodes(),
                n_nodes,
                manifest_path.display(),
            )));
        }
        samples.push(FlowSample {
            aoa: entry.aoa,
            mach: entry.mach,
            targets: fields.values().clone(),
        });
    }
    Ok(samples)
}

/// Reference quantities at zero incidence; chord comes from the case the
/// dataset was generated with, not from the current `[case]` section, so a
/// drifted configuration cannot skew the metrics.
fn base_reference(
    mesh: &SurfaceMesh,
    manifest: &Manifest,
    aero: &AeroSection,
) -> Result<AeroReference, CliError> {
    let chord = manifest.case.chord;
    let point = moment_reference(mesh, aero.moment_fraction, chord, aero.span_y)
        .map_err(|e| CliError::Usage(format!("[aero] {e}")))?;
    Ok(AeroReference {
        chord,
        area: mesh.total_area(),
        moment_point: point,
        alpha_deg: 0.0,
    })
}

/// Levels checkpoint plus the pooling geometry reconstructed from it.
fn load_geometry(
    mesh: &SurfaceMesh,
    levels_path: &Path,
) -> Result<(LevelsCheckpoint, Arc<ModelGeometry>), CliError> {
    let checkpoint = LevelsCheckpoint::load(levels_path)?;
    let graph = build_graph(mesh)?;
    let geometry = ModelGeometry::new(&graph, &checkpoint.levels)?;
    Ok((checkpoint, Arc::new(geometry)))
}

fn print_evaluation(evaluation: &Evaluation) {
    for (c, name) in FIELD_NAMES.iter().enumerate() {
        println!(
            "{name}: MAPE {:.3}%  MAE {:.3e}",
            evaluation.mean_mape_percent[c], evaluation.mean_mae[c]
        );
    }
    let [cl, cd, cmy] = evaluation.mean_coefficient_error_percent;
    println!("coefficient errors: CL {cl:.3}%  CD {cd:.3}%  CMy {cmy:.3}%");
}

pub fn gen(config: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let case = config.case.to_case()?;
    let doe = config.doe.to_doe(config.seed + seed_offsets::DOE)?;
    let spec = config.doe.split_spec()?;
    let data_dir = &config.paths.data_dir;
    ensure_dir(data_dir)?;

    let mesh = case.build_mesh()?;
    mesh.save(mesh_file(data_dir))?;
    let points = lhs_sample(&doe)?;
    let splits = split(doe.n_samples, &spec, config.seed + seed_offsets::SPLIT)?;
    let manifest = Manifest::new(doe, case.clone(), &points, &splits)?;
    manifest.save_json(manifest_file(data_dir))?;
    let names: Vec<String> = FIELD_NAMES.map(String::from).to_vec();
    for entry in &manifest.entries {
        let sample = case.sample(entry.aoa, entry.mach)?;
        let fields = FieldSet::new(names.clone(), sample.targets)?;
        fields.save(field_file(data_dir, entry.index))?;
    }
    config.echo(data_dir, "gen")?;

    println!(
        "mesh: {} nodes, {} cells",
        mesh.n_nodes(),
        mesh.n_cells()
    );
    println!(
        "samples: {} (train/val/test = {}/{}/{})",
        manifest.entries.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    println!(
        "wrote dataset to {} in {:.1} s",
        data_dir.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn levels(config: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let data_dir = &config.paths.data_dir;
    let (mesh, manifest) = load_dataset(data_dir)?;
    let train = load_split_samples(data_dir, &manifest, SplitLabel::Train, mesh.n_nodes())?;
    if train.is_empty() {
        return Err(CliError::Usage(format!(
            "{} labels no samples as train; levels need training-split gradients",
            manifest_file(data_dir).display()
        )));
    }

    let graph = build_graph(&mesh)?;
    let fields: Vec<Vec<f64>> = train
        .iter()
        .flat_map(|s| (0..s.targets.ncols()).map(|c| s.targets.column(c).to_vec()))
        .collect();
    let aggregate = aggregate_gradient_magnitude(&graph, mesh.nodes(), &fields)?;
    let profile = config.coarsening.profile();
    let mwls = config.mwls.params();
    let seed = config.seed + seed_offsets::LEVELS;
    let ratios = config.coarsening.ratios;
    let level1 = build_level(mesh.nodes(), &aggregate, ratios[0], &profile, seed, &mwls)?;
    let mid_coords = level1.coarse_coords(mesh.nodes());
    let mid_aggregate: Vec<f64> = level1.selected.iter().map(|&i| aggregate[i]).collect();
    let level2 = build_level(&mid_coords, &mid_aggregate, ratios[1], &profile, seed + 1, &mwls)?;
    let checkpoint =
        LevelsCheckpoint::new(ratios, seed, profile, mwls, [level1, level2], mesh.nodes())?;

    ensure_dir(&config.paths.out_dir)?;
    let path = config.paths.levels_file();
    checkpoint.save(&path)?;
    config.echo(&config.paths.out_dir, "levels")?;

    let d = &checkpoint.diagnostics;
    println!(
        "levels: {} -> {} -> {} nodes",
        d.level_sizes[0], d.level_sizes[1], d.level_sizes[2]
    );
    println!(
        "coarse-graph non-zeros: mid {}, coarse {}",
        d.graph_nnz[0], d.graph_nnz[1]
    );
    for (name, (q, l, c)) in ["down1", "up1", "down2", "up2"]
        .iter()
        .zip(d.fallback_counts)
    {
        println!("{name} rows by basis (quadratic/linear/constant): {q}/{l}/{c}");
    }
    println!("affine round-trip error: {:.3e}", d.affine_round_trip_error);
    println!(
        "wrote {} in {:.1} s",
        path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(config: &RunConfig, epochs_override: Option<usize>) -> Result<(), CliError> {
    let started = Instant::now();
    let data_dir = &config.paths.data_dir;
    let (mesh, manifest) = load_dataset(data_dir)?;
    let train = load_split_samples(data_dir, &manifest, SplitLabel::Train, mesh.n_nodes())?;
    let val = load_split_samples(data_dir, &manifest, SplitLabel::Val, mesh.n_nodes())?;
    let levels_path = config.paths.levels_file();
    let (levels, geometry) = load_geometry(&mesh, &levels_path)?;

    let model_config = ModelConfig {
        encoder_blocks: config.model.encoder_blocks.clone(),
        reduced_block: config.model.reduced_block.clone(),
        ratios: levels.ratios,
    };
    let reference = base_reference(&mesh, &manifest, &config.aero)?;
    let ctx = TrainContext::new(&mesh, reference, &train)?;
    let epochs = epochs_override.unwrap_or(config.training.epochs);
    let train_config = config
        .training
        .to_train_config(epochs, config.seed + seed_offsets::TRAIN_SHUFFLE)?;
    let mut model = Model::build(model_config, geometry, config.seed + seed_offsets::MODEL_INIT)?;
    let result = fit(&mut model, &ctx, &train, &val, &train_config)?;

    ensure_dir(&config.paths.out_dir)?;
    let model_path = config.paths.model_file();
    ModelCheckpoint::from_model(&model, &ctx.scalers, levels_path.display().to_string())
        .save(&model_path)?;
    result.history.save_csv(config.paths.out_dir.join("history.csv"))?;
    let metrics = evaluate(&model, &ctx, &train)?;
    metrics.save_json(config.paths.out_dir.join("metrics_train.json"))?;
    config.echo(&config.paths.out_dir, "train")?;

    let last = result.history.epochs.last().expect("at least one epoch");
    println!("epochs: {epochs}  final train loss: {:.4e}", last.train_loss);
    println!(
        "best validation loss {:.4e} at epoch {}",
        result.best_val_loss, result.best_epoch
    );
    println!("training-split metrics of the saved model:");
    print_evaluation(&metrics);
    println!(
        "wrote {} in {:.1} s",
        model_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn hpo(config: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let data_dir = &config.paths.data_dir;
    let (mesh, manifest) = load_dataset(data_dir)?;
    let train = load_split_samples(data_dir, &manifest, SplitLabel::Train, mesh.n_nodes())?;
    let val = load_split_samples(data_dir, &manifest, SplitLabel::Val, mesh.n_nodes())?;
    if val.is_empty() {
        return Err(CliError::Usage(format!(
            "{} labels no samples as val; the search ranks trials by validation error",
            manifest_file(data_dir).display()
        )));
    }

    let space = config.hpo.space()?;
    let opt_config = config.hpo.optimize_config(config.seed + seed_offsets::HPO)?;
    let profile = config.coarsening.profile();
    let mwls = config.mwls.params();
    let cache = GeometryCache::build(
        &mesh,
        &train,
        &space.ratios,
        &profile,
        &mwls,
        config.seed + seed_offsets::LEVELS,
    )?;
    let reference = base_reference(&mesh, &manifest, &config.aero)?;
    let ctx = TrainContext::new(&mesh, reference, &train)?;
    let train_config = config
        .training
        .to_train_config(config.hpo.epochs, config.seed + seed_offsets::TRAIN_SHUFFLE)?;
    let setup = TrialSetup {
        ctx: &ctx,
        geometries: &cache,
        train: &train,
        val: &val,
        train_config,
        model_seed: config.seed + seed_offsets::MODEL_INIT,
    };
    let result = optimize(|a| trial_objective(&setup, a), &space, &opt_config)?;

    ensure_dir(&config.paths.out_dir)?;
    save_trials_jsonl(config.paths.out_dir.join("trials.jsonl"), &result.trials)?;
    let best_model = result.best.to_model_config()?;
    let mut best_run = config.clone();
    best_run.model.encoder_blocks = best_model.encoder_blocks.clone();
    best_run.model.reduced_block = best_model.reduced_block.clone();
    best_run.coarsening.ratios = best_model.ratios;
    let text = toml::to_string_pretty(&best_run)
        .map_err(|e| CliError::Usage(format!("best config: {e}")))?;
    let best_path = config.paths.out_dir.join("best_config.toml");
    std::fs::write(&best_path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", best_path.display())))?;
    config.echo(&config.paths.out_dir, "hpo")?;

    let failures = result
        .trials
        .iter()
        .filter(|t| t.error.is_some())
        .count();
    println!("trials: {} ({failures} failed)", result.trials.len());
    println!(
        "best objective {:.4e} at trial {}",
        result.best_objective, result.best_index
    );
    println!(
        "best architecture: ratio {:.4}, encoder {:?}, reduced {:?}",
        result.best.ratio, best_model.encoder_blocks, best_model.reduced_block
    );
    println!(
        "wrote {} in {:.1} s",
        best_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn predict(config: &RunConfig, label: SplitLabel, split_name: &str) -> Result<(), CliError> {
    let data_dir = &config.paths.data_dir;
    let (mesh, manifest) = load_dataset(data_dir)?;
    let (_, geometry) = load_geometry(&mesh, &config.paths.levels_file())?;
    let (model, scalers) = ModelCheckpoint::load(config.paths.model_file())?.into_model(geometry)?;

    ensure_dir(&config.paths.out_dir)?;
    let names: Vec<String> = FIELD_NAMES.map(String::from).to_vec();
    let mut count = 0usize;
    for entry in manifest.entries.iter().filter(|e| e.split == label) {
        let features = scalers.input_features(&mesh, entry.aoa, entry.mach);
        let pred_norm = model.predict(&features.view())?;
        let pred_phys = scalers.denormalize_targets(&pred_norm.view());
        let fields = FieldSet::new(names.clone(), pred_phys)?;
        fields.save(config.paths.out_dir.join(format!("pred_{:03}.txt", entry.index)))?;
        count += 1;
    }
    config.echo(&config.paths.out_dir, "predict")?;
    println!(
        "wrote {count} prediction files for the {split_name} split to {}",
        config.paths.out_dir.display()
    );
    Ok(())
}

pub fn eval(config: &RunConfig, label: SplitLabel, split_name: &str) -> Result<(), CliError> {
    let data_dir = &config.paths.data_dir;
    let (mesh, manifest) = load_dataset(data_dir)?;
    let samples = load_split_samples(data_dir, &manifest, label, mesh.n_nodes())?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!(
            "{} labels no samples as {split_name}",
            manifest_file(data_dir).display()
        )));
    }
    let (_, geometry) = load_geometry(&mesh, &config.paths.levels_file())?;
    let (model, scalers) = ModelCheckpoint::load(config.paths.model_file())?.into_model(geometry)?;
    let reference = base_reference(&mesh, &manifest, &config.aero)?;
    let ctx = TrainContext::from_scalers(&mesh, reference, scalers)?;
    let evaluation = evaluate(&model, &ctx, &samples)?;

    ensure_dir(&config.paths.out_dir)?;
    let path = config.paths.out_dir.join(format!("metrics_{split_name}.json"));
    evaluation.save_json(&path)?;
    config.echo(&config.paths.out_dir, "eval")?;

    println!("{split_name} split, {} samples:", samples.len());
    print_evaluation(&evaluation);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn mesh_info(path: &Path) -> Result<(), CliError> {
    let mesh = SurfaceMesh::load(path)?;
    let graph = build_graph(&mesh)?;
    let counts: Vec<usize> = (0..mesh.n_nodes())
        .map(|i| graph.neighbors(i).count())
        .collect();
    let min = counts.iter().min().expect("non-empty mesh");
    let max = counts.iter().max().expect("non-empty mesh");
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    println!("nodes: {}", mesh.n_nodes());
    println!("cells: {}", mesh.n_cells());
    println!("total area: {:.6}", mesh.total_area());
    println!("mean edge length: {:.6}", graph.mean_edge_length());
    println!("adjacency non-zeros: {}", graph.nnz());
    println!("neighbors per node: min {min}, mean {mean:.2}, max {max}");
    Ok(())
}
