//! One function per pipeline stage. Each reads its inputs from the artifact
//! directory, writes its outputs there and returns a summary record.

use std::fs;
use std::path::Path;
use std::time::Instant;

use bvae_ood::bvae::{train as train_model, TrainedModel};
use bvae_ood::dataset::{read_dataset, write_dataset, LABELS_FILE};
use bvae_ood::hpo::{search as run_search, ExploredList};
use bvae_ood::monitor::{
    calibrate as calibration_scores, evaluate as score_flags, ground_truth, read_trace, write_trace, Channel,
    EvalScene, Metrics, Monitor, TrainingDomain, DETECTOR_CHANNEL,
};
use bvae_ood::rng::derive_seed;
use bvae_ood::scenegen::{generate_scene, parse_spec, split_dataset, Split};
use bvae_ood::{
    build_partitions, compute_mig, select_latents, DetectorProfile, Feature, LatentSelection, PartitionSet, Scene,
};
use log::info;
use serde_json::{json, Value};

use crate::artifacts::{create, load_profile, open, read_split, require, save_profile, write_split, Artifacts};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

// Seed stream tags for the stages that draw randomness of their own.
const TRAIN_DATA_STREAM: u64 = 1;
const TEST_DATA_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

fn generate_from(spec_path: &Path, seed: u64, dir: &Path) -> CliResult<Vec<Scene>> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let scenes = parse_spec(&text)?
        .iter()
        .map(|s| generate_scene(s, seed))
        .collect::<Result<Vec<_>, _>>()?;
    write_dataset(dir, &scenes)?;
    Ok(scenes)
}

fn dataset_record(dir: &Path, scenes: &[Scene]) -> Value {
    json!({
        "dir": dir.display().to_string(),
        "scenes": scenes.len(),
        "frames": scenes.iter().map(Scene::len).sum::<usize>(),
    })
}

/// Renders a single scene file straight into the output directory.
pub fn generate_spec(art: &Artifacts, config: &PipelineConfig, spec: &Path) -> CliResult<Value> {
    let scenes = generate_from(spec, config.seed, &art.root)?;
    Ok(json!({ "dataset": dataset_record(&art.root, &scenes) }))
}

/// Renders the configured training and test suites.
pub fn generate(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let train_dir = art.train_data();
    let test_dir = art.test_data();
    let train = generate_from(
        &config.data.train_spec,
        derive_seed(config.seed, &[TRAIN_DATA_STREAM]),
        &train_dir,
    )?;
    let test = generate_from(
        &config.data.test_spec,
        derive_seed(config.seed, &[TEST_DATA_STREAM]),
        &test_dir,
    )?;
    Ok(json!({
        "train": dataset_record(&train_dir, &train),
        "test": dataset_record(&test_dir, &test),
    }))
}

fn read_data(dir: &Path) -> CliResult<Vec<Scene>> {
    require(&dir.join(LABELS_FILE), "generate")?;
    Ok(read_dataset(dir)?)
}

/// Training scenes with their split and partitions, as most stages need them.
struct TrainingSet {
    scenes: Vec<Scene>,
    split: Split,
    /// Scenes restricted to their proper-training frames.
    train_scenes: Vec<Scene>,
}

impl TrainingSet {
    fn load(art: &Artifacts) -> CliResult<Self> {
        let scenes = read_data(&art.train_data())?;
        let split = read_split(&art.split(), &scenes)?;
        let train_scenes = split.train_scenes(&scenes);
        Ok(Self {
            scenes,
            split,
            train_scenes,
        })
    }

    fn partitions(&self, art: &Artifacts) -> CliResult<PartitionSet> {
        Ok(PartitionSet::read_csv(
            open(&art.partitions(), "partition")?,
            &self.train_scenes,
        )?)
    }
}

pub fn partition(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let scenes = read_data(&art.train_data())?;
    let split = split_dataset(
        &scenes,
        config.data.split_ratio,
        derive_seed(config.seed, &[SPLIT_STREAM]),
    )?;
    write_split(&art.split(), &split, &scenes)?;
    let partitions = build_partitions(&split.train_scenes(&scenes))?;
    let path = art.partitions();
    partitions.write_csv(create(&path)?)?;
    for p in &partitions.partitions {
        info!("partition {} ({}): {}", p.id, p.feature, p.scenes.join(", "));
    }
    Ok(json!({
        "train_frames": split.train.len(),
        "calibration_frames": split.calibration.len(),
        "partitions": partitions.partitions.iter().map(|p| json!({
            "id": p.id,
            "feature": p.feature,
            "scenes": p.scenes,
            "variance": p.variance,
        })).collect::<Vec<_>>(),
    }))
}

pub fn search(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let set = TrainingSet::load(art)?;
    let partitions = set.partitions(art)?;
    let frames = set.split.train_frames(&set.scenes);
    let space = config.search_space()?;
    let mig_params = config.mig_params();
    let outcome = run_search(&space, &config.search_config(), |n, beta| {
        let model = train_model(&config.vae_config(n, beta, config.search.epochs), &frames)?;
        let mig = compute_mig(&model, &set.train_scenes, &partitions, &mig_params)?;
        info!("trial n = {n}, beta = {beta}: MIG {mig:.4}");
        Ok(mig)
    })?;
    let path = art.trials();
    outcome.explored.write_csv(create(&path)?)?;
    Ok(json!({
        "mode": config.search.mode,
        "trials": outcome.explored.len(),
        "best_n": outcome.best_n,
        "best_beta": outcome.best_beta,
        "best_mig": outcome.best_mig,
    }))
}

pub fn train(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let set = TrainingSet::load(art)?;
    let trials_path = art.trials();
    let (n, beta, source) = if trials_path.exists() {
        let explored = ExploredList::read_csv(open(&trials_path, "search")?)?;
        let best = explored
            .best()
            .ok_or_else(|| CliError::artifact(&trials_path, "no successful trial"))?;
        (best.n, best.beta, "search")
    } else {
        (config.model.n, config.model.beta, "config")
    };
    info!("training n = {n}, beta = {beta} (from {source})");
    let model = train_model(
        &config.vae_config(n, beta, config.model.epochs),
        &set.split.train_frames(&set.scenes),
    )?;
    model.save(&art.model())?;

    let log_path = art.training_log();
    let mut w = csv::Writer::from_writer(create(&log_path)?);
    w.write_record(["epoch", "lr", "loss"])?;
    for r in &model.history {
        w.write_record([r.epoch.to_string(), r.lr.to_string(), r.loss.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&log_path, e))?;

    let last = model.history.last().map(|r| r.loss);
    Ok(json!({
        "n": n,
        "beta": beta,
        "source": source,
        "epochs": model.history.len(),
        "stopped_early": model.stopped_early(),
        "final_loss": last,
    }))
}

fn load_model(art: &Artifacts) -> CliResult<TrainedModel> {
    let path = art.model();
    require(&path, "train")?;
    Ok(TrainedModel::load(&path)?)
}

pub fn map(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let model = load_model(art)?;
    let set = TrainingSet::load(art)?;
    let partitions = set.partitions(art)?;
    let selection = select_latents(
        &model,
        &set.train_scenes,
        &partitions,
        config.mapping.m,
        config.mapping.reasoner_size,
    )?;
    let path = art.selection();
    selection.write_csv(create(&path)?)?;
    Ok(selection_record(&selection))
}

fn selection_record(selection: &LatentSelection) -> Value {
    json!({
        "detector": selection.detector,
        "reasoners": selection.reasoners.iter().map(|(f, l)| json!({ "feature": f, "latents": l })).collect::<Vec<_>>(),
    })
}

pub fn calibrate(art: &Artifacts, config: &PipelineConfig) -> CliResult<Value> {
    let model = load_model(art)?;
    let set = TrainingSet::load(art)?;
    let partitions = set.partitions(art)?;
    let selection = LatentSelection::read_csv(
        open(&art.selection(), "map")?,
        &partitions,
        config.mapping.reasoner_size,
    )?;
    let frames = set.split.calibration_frames(&set.scenes);
    let channel = |latents: &[usize], cusum| -> CliResult<Channel> {
        Ok(Channel {
            scores: calibration_scores(&model, latents, &frames)?,
            latents: latents.to_vec(),
            cusum,
        })
    };
    let profile = DetectorProfile {
        window: config.monitor.window,
        detector: channel(&selection.detector, config.detector_cusum())?,
        reasoners: selection
            .reasoners
            .iter()
            .map(|(f, l)| Ok((*f, channel(l, config.reasoner_cusum())?)))
            .collect::<CliResult<_>>()?,
        cp_omega: config.monitor.change_point_omega,
        cp_tau: config.monitor.change_point_tau,
    };
    profile.validate()?;
    save_profile(art, &profile)?;
    let cp = profile.change_point()?;
    Ok(json!({
        "calibration_frames": frames.len(),
        "window": profile.window,
        "change_point": { "omega": cp.omega, "tau": cp.tau },
        "selection": selection_record(&selection),
    }))
}

pub fn detect(art: &Artifacts, data: Option<&Path>) -> CliResult<Value> {
    let model = load_model(art)?;
    let profile = load_profile(art)?;
    let dir = data.map_or_else(|| art.test_data(), Path::to_path_buf);
    let scenes = read_data(&dir)?;
    let monitor = Monitor::new(&model, profile)?;
    let mut records = Vec::new();
    let start = Instant::now();
    let mut frames = 0;
    for scene in &scenes {
        let outputs = monitor.run(&scene.frames)?;
        frames += outputs.len();
        let path = art.trace(&scene.name);
        write_trace(&outputs, create(&path)?)?;
        let first = outputs.iter().position(|o| o.detector.flag);
        info!("{}: first detector flag at {first:?}", scene.name);
        records.push(json!({
            "scene": scene.name,
            "frames": outputs.len(),
            "detector_flags": outputs.iter().filter(|o| o.detector.flag).count(),
            "first_flag": first,
        }));
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(json!({
        "scenes": records,
        "ms_per_frame": if frames > 0 { 1e3 * seconds / frames as f64 } else { 0.0 },
    }))
}

/// Scores the traces of every test scene against label ground truth.
pub fn evaluate(art: &Artifacts) -> CliResult<(Metrics, Value)> {
    let train = read_data(&art.train_data())?;
    let test = read_data(&art.test_data())?;
    let domain = TrainingDomain::from_scenes(&train)?;
    let mut scenes = Vec::with_capacity(test.len());
    for scene in &test {
        let path = art.trace(&scene.name);
        let channels = read_trace(open(&path, "detect")?)?;
        let mut detector = None;
        let mut reasoners = Vec::new();
        for (name, flags) in channels {
            if name == DETECTOR_CHANNEL {
                detector = Some(flags);
            } else if let Some(f) = Feature::from_name(&name) {
                reasoners.push((f, flags));
            }
        }
        let detector = detector.ok_or_else(|| CliError::artifact(&path, "no detector channel"))?;
        scenes.push(EvalScene {
            name: scene.name.clone(),
            detector,
            reasoners,
            truth: ground_truth(&scene.labels, &domain),
        });
    }
    let metrics = score_flags(&scenes)?;
    let path = art.metrics();
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &metrics)?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::io(&path, e))?;
    let record = json!({
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "min_sensitivity": metrics.min_sensitivity,
        "mean_latency": metrics.mean_latency,
        "attribution": metrics.scenes.iter().filter_map(|s| {
            s.attribution_correct().map(|ok| json!({ "scene": s.name, "correct": ok }))
        }).collect::<Vec<_>>(),
    });
    Ok((metrics, record))
}
