//! Pipeline stages. Each one reads the outputs of its upstream stages from the
//! work directory, writes into its own directory and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mobiforge_core::embedding::{
    adapt_new_city, embed_examples, reconstruction_accuracy, train_autoencoder, SpatialModel,
};
use mobiforge_core::evaluation::{epr_generate_from, evaluate, Evaluation};
use mobiforge_core::generator::{
    generate_batch, generator_examples, train_generator, ConditionSource, GenerationManifest,
    GenerationRequest, Generator, Models, PlanSource,
};
use mobiforge_core::geo::{
    aggregate_semantics, build_partition_with, load_city_map, read_pois_csv, read_seeds_csv,
    save_city_map, write_pois_csv, CityMap,
};
use mobiforge_core::planner::{
    default_instruction, planner_examples, train_neural_backend, NeuralPlanner, PlannerBackend,
    RemotePlanner, RoleProfile,
};
use mobiforge_core::privacy::{
    membership_inference_attack, uniqueness_test, utility_probe, Attacker, LogisticAttacker,
    MlpAttacker,
};
use mobiforge_core::trajectory::{
    load_trajectories_checked, save_trajectories, split_dataset, synth_city, DatasetSplit,
    Trajectory,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{AttackerKind, ConditionKind, DataSource, PlannerBackendKind, RunConfig};
use crate::error::{CliError, Context};
use crate::manifest::{hash_file, hash_tree, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Partition,
    SynthData,
    Ingest,
    TrainPlanner,
    TrainEmbed,
    AdaptCity,
    TrainGen,
    Generate,
    Evaluate,
    Audit,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::SynthData => "synth-data",
            Stage::Ingest => "ingest",
            Stage::TrainPlanner => "train-planner",
            Stage::TrainEmbed => "train-embed",
            Stage::AdaptCity => "adapt-city",
            Stage::TrainGen => "train-gen",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Audit => "audit",
        }
    }

    /// Output directory under the work directory. Both data sources share one.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::SynthData | Stage::Ingest => "data",
            Stage::TrainPlanner => "planner",
            Stage::TrainEmbed => "embed",
            Stage::AdaptCity => "adapt",
            Stage::TrainGen => "gen",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Audit => "audit",
        }
    }

    pub fn dependencies(self, cfg: &RunConfig) -> Vec<Stage> {
        let data = data_stage(cfg);
        match self {
            Stage::Partition | Stage::SynthData => vec![],
            Stage::Ingest => vec![Stage::Partition],
            Stage::TrainPlanner | Stage::TrainEmbed => vec![data],
            Stage::AdaptCity => vec![Stage::TrainEmbed],
            Stage::TrainGen => vec![data, Stage::TrainPlanner, Stage::TrainEmbed],
            Stage::Generate => vec![
                data,
                Stage::TrainPlanner,
                Stage::TrainEmbed,
                Stage::TrainGen,
            ],
            Stage::Evaluate | Stage::Audit => vec![data, Stage::Generate],
        }
    }

    /// Config fields (JSON pointers) whose values this stage reads directly.
    /// Upstream settings reach a stage through its input hashes.
    fn config_fields(self) -> &'static [&'static str] {
        match self {
            Stage::Partition => &["/city/city_id", "/city/metric", "/data"],
            Stage::SynthData => &["/city", "/slotting", "/seeds/synth", "/seeds/split"],
            Stage::Ingest => &["/data", "/seeds/split"],
            Stage::TrainPlanner => &[
                "/planner/backend",
                "/planner/train",
                "/planner/remote",
                "/slotting",
                "/seeds/planner",
            ],
            Stage::TrainEmbed => &["/embedding/encoder", "/embedding/train", "/seeds/embed"],
            Stage::AdaptCity => &["/embedding/adapt", "/slotting", "/seeds/adapt"],
            Stage::TrainGen => &[
                "/generator/model",
                "/generator/train",
                "/generator/conditions",
                "/planner/backend",
                "/planner/remote",
                "/planner/dataset_tag",
                "/slotting",
                "/seeds/generator",
            ],
            Stage::Generate => &[
                "/generator/conditions",
                "/generator/anchor_start",
                "/generator/samples_per_anchor",
                "/planner/backend",
                "/planner/remote",
                "/planner/dataset_tag",
                "/planner/k",
                "/slotting",
                "/seeds/sample",
            ],
            Stage::Evaluate => &["/evaluation", "/generator/samples_per_anchor", "/seeds/epr"],
            Stage::Audit => &["/privacy", "/slotting", "/seeds/audit"],
        }
    }
}

/// The stage that fills `data/` under this config.
pub fn data_stage(cfg: &RunConfig) -> Stage {
    match cfg.data.source {
        DataSource::Synth => Stage::SynthData,
        DataSource::Csv => Stage::Ingest,
    }
}

/// Everything `e2e` runs, in order.
pub fn e2e_stages(cfg: &RunConfig) -> Vec<Stage> {
    let mut out = match cfg.data.source {
        DataSource::Synth => vec![Stage::SynthData],
        DataSource::Csv => vec![Stage::Partition, Stage::Ingest],
    };
    out.extend([Stage::TrainPlanner, Stage::TrainEmbed]);
    if cfg.embedding.adapt.is_configured() {
        out.push(Stage::AdaptCity);
    }
    out.extend([
        Stage::TrainGen,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Audit,
    ]);
    out
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
    pub force: bool,
    pub jobs: usize,
    tree: serde_json::Value,
}

impl Ctx {
    pub fn new(cfg: RunConfig, force: bool, jobs: usize) -> Self {
        Self {
            tree: serde_json::to_value(&cfg).expect("config serializes"),
            workdir: cfg.paths.workdir.clone(),
            cfg,
            force,
            jobs: jobs.max(1),
        }
    }

    /// Hash of the config fields `stage` reads.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for field in stage.config_fields() {
            let v = self.tree.pointer(field).expect("config field exists");
            h.update(field.as_bytes());
            h.update(b"=");
            h.update(v.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.workdir.join(stage.dir())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Files outside the work directory that a stage reads.
fn external_inputs(ctx: &Ctx, stage: Stage) -> Vec<PathBuf> {
    let d = &ctx.cfg.data;
    let a = &ctx.cfg.embedding.adapt;
    let v: Vec<&Option<PathBuf>> = match stage {
        Stage::Partition => vec![&d.seeds, &d.pois],
        Stage::Ingest => vec![&d.trajectories, &d.roles],
        Stage::AdaptCity => vec![&a.map, &a.trajectories],
        _ => vec![],
    };
    v.into_iter().flatten().cloned().collect()
}

/// Hash identifying everything an output depends on: the stage's own config
/// fields and the content of every input file.
fn provenance_hash(stage_hash: &str, inputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(stage_hash.as_bytes());
    for (k, v) in inputs {
        h.update(format!("\n{k}={v}").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs one stage unless its manifest shows identical config and inputs.
pub fn run_stage(ctx: &Ctx, stage: Stage) -> Result<Outcome, CliError> {
    // Walk dependencies nearest-first so that a missing stage is reported
    // closest to the one requested.
    let deps = stage.dependencies(&ctx.cfg);
    let mut inputs = BTreeMap::new();
    for &dep in deps.iter().rev() {
        let dep_dir = ctx.stage_dir(dep);
        let missing = |detail: String| CliError::Dependency {
            stage: stage.name().into(),
            needs: dep.name().into(),
            detail,
        };
        let m = Manifest::read(&dep_dir)?
            .filter(|m| m.stage == dep.name())
            .ok_or_else(|| {
                missing(format!(
                    "no `{}` manifest in {}; run `{}` first",
                    dep.name(),
                    dep_dir.display(),
                    dep.name()
                ))
            })?;
        if m.config_hash != ctx.stage_hash(dep) {
            return Err(missing(
                "its outputs were built with different settings; re-run it".into(),
            ));
        }
        let changed = m.changed_outputs(&ctx.workdir);
        if !changed.is_empty() {
            return Err(missing(format!(
                "outputs changed since it ran: {}",
                changed.join(", ")
            )));
        }
        inputs.extend(m.outputs);
    }
    for path in external_inputs(ctx, stage) {
        let h = hash_file(&path)
            .map_err(|e| CliError::runtime(&format!("input {}", path.display()), e))?;
        inputs.insert(format!("external:{}", path.display()), h);
    }

    let stage_hash = ctx.stage_hash(stage);
    let dir = ctx.stage_dir(stage);
    if !ctx.force {
        if let Some(m) = Manifest::read(&dir)? {
            let fresh = m.stage == stage.name()
                && m.config_hash == stage_hash
                && m.input_hashes == inputs
                && !m.outputs.is_empty()
                && m.changed_outputs(&ctx.workdir).is_empty();
            if fresh {
                log::info!("{}: up to date", stage.name());
                return Ok(Outcome::UpToDate);
            }
        }
    }

    let io = |e: std::io::Error| CliError::runtime(&dir.display().to_string(), e);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(io)?;
    }
    std::fs::create_dir_all(&dir).map_err(io)?;
    let provenance = provenance_hash(&stage_hash, &inputs);
    let started = Instant::now();
    let seed = match stage {
        Stage::Partition => partition(ctx, &dir)?,
        Stage::SynthData => synth_data(ctx, &dir)?,
        Stage::Ingest => ingest(ctx, &dir)?,
        Stage::TrainPlanner => train_planner(ctx, &dir)?,
        Stage::TrainEmbed => train_embed(ctx, &dir)?,
        Stage::AdaptCity => adapt_city(ctx, &dir)?,
        Stage::TrainGen => train_gen(ctx, &dir)?,
        Stage::Generate => generate(ctx, &dir, &provenance)?,
        Stage::Evaluate => evaluate_stage(ctx, &dir, &provenance)?,
        Stage::Audit => audit(ctx, &dir)?,
    };
    let manifest = Manifest {
        stage: stage.name().into(),
        config_hash: stage_hash,
        seed,
        input_hashes: inputs,
        outputs: hash_tree(&ctx.workdir, &dir)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    manifest.write(&dir)?;
    log::info!("{}: done in {:.1}s", stage.name(), manifest.wall_time_s);
    Ok(Outcome::Ran)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).ctx("serializing")? + "\n";
    std::fs::write(path, text).ctx(&path.display().to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).ctx(&path.display().to_string())?;
    serde_json::from_str(&text).ctx(&path.display().to_string())
}

/// Split datasets, the city map and agent roles as written by the data stage.
pub struct Data {
    pub map: CityMap,
    pub maps: BTreeMap<String, CityMap>,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub roles: BTreeMap<String, String>,
}

impl Data {
    pub fn load(workdir: &Path) -> Result<Self, CliError> {
        let dir = workdir.join("data");
        let map = load_city_map(&dir.join("city.json")).ctx("loading city map")?;
        let maps = BTreeMap::from([(map.city_id.clone(), map.clone())]);
        let part = |name: &str| {
            load_trajectories_checked(&dir.join(format!("{name}.csv")), &maps)
                .ctx(&format!("loading {name} split"))
        };
        Ok(Self {
            train: part("train")?,
            val: part("val")?,
            test: part("test")?,
            roles: read_json(&dir.join("roles.json"))?,
            map,
            maps,
        })
    }

    fn role_profiles(&self, dataset_tag: &str) -> Result<BTreeMap<String, RoleProfile>, CliError> {
        let instruction = default_instruction(dataset_tag);
        self.roles
            .iter()
            .map(|(agent, role)| {
                Ok((
                    agent.clone(),
                    RoleProfile::new(role, instruction).ctx("role profile")?,
                ))
            })
            .collect()
    }
}

fn write_data(
    dir: &Path,
    map: &CityMap,
    split: &DatasetSplit,
    roles: &BTreeMap<String, String>,
) -> Result<(), CliError> {
    save_city_map(&dir.join("city.json"), map).ctx("writing city map")?;
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        save_trajectories(&dir.join(format!("{name}.csv")), part)
            .ctx(&format!("writing {name} split"))?;
    }
    write_json(&dir.join("roles.json"), roles)
}

fn partition(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let seeds_path = cfg
        .data
        .seeds
        .as_ref()
        .ok_or_else(|| CliError::Config("data.seeds is required for `partition`".into()))?;
    let seeds = read_seeds_csv(seeds_path).ctx("reading seeds")?;
    let mut map = build_partition_with(&cfg.city.city_id, &seeds, cfg.city.metric)
        .ctx("building partition")?;
    if let Some(p) = &cfg.data.pois {
        map = aggregate_semantics(&read_pois_csv(p).ctx("reading POIs")?, &map);
    }
    save_city_map(&dir.join("city.json"), &map).ctx("writing city map")?;
    println!("partition: {} regions", map.num_regions());
    Ok(0)
}

fn synth_data(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let sc = ctx.cfg.synth_config();
    let city = synth_city(&sc).ctx("synthesizing city")?;
    let split = split_dataset(&city.trajectories, ctx.cfg.seeds.split).ctx("splitting")?;
    write_data(dir, &city.map, &split, &city.roles)?;
    write_pois_csv(&dir.join("pois.csv"), &city.pois).ctx("writing POIs")?;
    println!(
        "synth-data: {} regions, {} train / {} val / {} test trajectories",
        city.map.num_regions(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(sc.seed)
}

fn ingest(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let map = load_city_map(&ctx.stage_dir(Stage::Partition).join("city.json"))
        .ctx("loading partition")?;
    let maps = BTreeMap::from([(map.city_id.clone(), map.clone())]);
    let path = cfg
        .data
        .trajectories
        .as_ref()
        .ok_or_else(|| CliError::Config("data.trajectories is required for `ingest`".into()))?;
    let trajs = load_trajectories_checked(path, &maps).ctx("reading trajectories")?;
    let roles: BTreeMap<String, String> = match &cfg.data.roles {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let split = split_dataset(&trajs, cfg.seeds.split).ctx("splitting")?;
    write_data(dir, &map, &split, &roles)?;
    println!("ingest: {} trajectories", trajs.len());
    Ok(cfg.seeds.split)
}

/// The configured planner backend, loaded from a trained checkpoint or
/// pointed at the remote service.
pub enum PlannerHandle {
    Neural(NeuralPlanner),
    Remote(RemotePlanner),
}

impl PlannerHandle {
    pub fn load(ctx: &Ctx) -> Result<Self, CliError> {
        let spd = ctx.cfg.slotting()?.slots_per_day();
        match ctx.cfg.planner.backend {
            PlannerBackendKind::Neural => {
                let stem = ctx.stage_dir(Stage::TrainPlanner).join("model");
                Ok(Self::Neural(
                    NeuralPlanner::load(&stem).ctx("loading planner")?,
                ))
            }
            PlannerBackendKind::Remote => Ok(Self::Remote(
                RemotePlanner::new(ctx.cfg.planner.remote.clone(), spd).ctx("remote planner")?,
            )),
        }
    }

    pub fn backend(&self) -> &dyn PlannerBackend {
        match self {
            Self::Neural(p) => p,
            Self::Remote(p) => p,
        }
    }
}

fn train_planner(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let slotting = cfg.slotting()?;
    match cfg.planner.backend {
        PlannerBackendKind::Neural => {
            let data = Data::load(&ctx.workdir)?;
            let examples = planner_examples(&data.train, &data.maps, &data.roles, slotting)
                .ctx("planner examples")?;
            let (planner, report) =
                train_neural_backend(&examples, slotting, &cfg.planner.train, cfg.seeds.planner)
                    .ctx("training planner")?;
            planner.save(&dir.join("model")).ctx("saving planner")?;
            write_json(&dir.join("report.json"), &report)?;
            println!(
                "train-planner: {} examples, final epoch loss {:.4}",
                examples.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        PlannerBackendKind::Remote => {
            let remote = &cfg.planner.remote;
            RemotePlanner::new(remote.clone(), slotting.slots_per_day()).ctx("remote planner")?;
            write_json(
                &dir.join("remote.json"),
                &serde_json::json!({ "endpoint": remote.endpoint() }),
            )?;
            println!(
                "train-planner: using remote backend at {}",
                remote.endpoint()
            );
        }
    }
    Ok(cfg.seeds.planner)
}

#[derive(Serialize)]
struct EmbedReport {
    val_accuracy: f64,
    train: mobiforge_core::train::TrainReport,
}

fn train_embed(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let data = Data::load(&ctx.workdir)?;
    let examples = embed_examples(&data.train, &data.maps).ctx("embedding examples")?;
    let (model, report) = train_autoencoder(
        &examples,
        &data.maps,
        &cfg.embedding.encoder,
        &cfg.embedding.train,
        cfg.seeds.embed,
    )
    .ctx("training spatial embedding")?;
    let val = embed_examples(&data.val, &data.maps).ctx("embedding examples")?;
    let val_accuracy = reconstruction_accuracy(&model, &val).ctx("reconstruction accuracy")?;
    model
        .save(&dir.join("model"))
        .ctx("saving spatial embedding")?;
    write_json(
        &dir.join("report.json"),
        &EmbedReport {
            val_accuracy,
            train: report,
        },
    )?;
    println!("train-embed: validation reconstruction accuracy {val_accuracy:.4}");
    Ok(cfg.seeds.embed)
}

#[derive(Serialize)]
struct AdaptReport {
    city: String,
    used: usize,
    holdout: usize,
    holdout_accuracy: Option<f64>,
    chance: f64,
    train: mobiforge_core::train::TrainReport,
}

fn adapt_city(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let a = &cfg.embedding.adapt;
    let mut model = SpatialModel::load(&ctx.stage_dir(Stage::TrainEmbed).join("model"))
        .ctx("loading spatial embedding")?;
    let (map, mut trajs) = match (&a.city, &a.map, &a.trajectories) {
        (Some(recipe), _, _) => {
            let mut recipe = recipe.clone();
            recipe.slot_minutes = cfg.slotting.slot_minutes;
            let city = synth_city(&recipe).ctx("synthesizing adaptation city")?;
            (city.map, city.trajectories)
        }
        (None, Some(map), Some(trajs)) => {
            let map = load_city_map(map).ctx("loading adaptation map")?;
            let maps = BTreeMap::from([(map.city_id.clone(), map.clone())]);
            let trajs =
                load_trajectories_checked(trajs, &maps).ctx("loading adaptation trajectories")?;
            (map, trajs)
        }
        _ => {
            return Err(CliError::Config(
                "embedding.adapt needs `city` or `map` + `trajectories` for `adapt-city`".into(),
            ))
        }
    };
    let maps = BTreeMap::from([(map.city_id.clone(), map.clone())]);
    trajs.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds.adapt));
    let n_hold = (a.holdout * trajs.len() as f64).round() as usize;
    let (hold, pool) = trajs.split_at(n_hold);
    let pool_ex = embed_examples(pool, &maps).ctx("adaptation examples")?;
    let adaptation = adapt_new_city(&model, &pool_ex, &map, &a.train, cfg.seeds.adapt)
        .ctx("adapting decoder")?;
    model
        .insert_decoder(adaptation.decoder)
        .ctx("installing decoder")?;
    let holdout_accuracy = if hold.is_empty() {
        None
    } else {
        Some(
            reconstruction_accuracy(
                &model,
                &embed_examples(hold, &maps).ctx("holdout examples")?,
            )
            .ctx("holdout accuracy")?,
        )
    };
    model.save(&dir.join("model")).ctx("saving adapted model")?;
    save_city_map(&dir.join("city.json"), &map).ctx("writing city map")?;
    let report = AdaptReport {
        city: map.city_id.clone(),
        used: adaptation.used,
        holdout: hold.len(),
        holdout_accuracy,
        chance: 1.0 / map.num_regions() as f64,
        train: adaptation.report,
    };
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "adapt-city: {} trajectories used, holdout accuracy {} (chance {:.4})",
        report.used,
        holdout_accuracy.map_or("n/a".to_string(), |x| format!("{x:.4}")),
        report.chance
    );
    Ok(cfg.seeds.adapt)
}

fn train_gen(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let slotting = cfg.slotting()?;
    let data = Data::load(&ctx.workdir)?;
    let planner = PlannerHandle::load(ctx)?;
    let embedding = SpatialModel::load(&ctx.stage_dir(Stage::TrainEmbed).join("model"))
        .ctx("loading spatial embedding")?;
    let roles = data.role_profiles(&cfg.planner.dataset_tag)?;
    let source = match cfg.generator.conditions {
        ConditionKind::Planner => ConditionSource::Planner {
            backend: planner.backend(),
            roles: &roles,
            dataset_tag: &cfg.planner.dataset_tag,
        },
        ConditionKind::Teacher => ConditionSource::Teacher,
        ConditionKind::Uniform => ConditionSource::Uniform,
    };
    let examples = generator_examples(&data.train, &data.maps, &embedding, slotting, source)
        .ctx("generator examples")?;
    let (generator, report) = train_generator(
        &examples,
        &cfg.generator.model,
        &cfg.generator.train,
        cfg.seeds.generator,
    )
    .ctx("training generator")?;
    generator.save(&dir.join("model")).ctx("saving generator")?;
    write_json(&dir.join("report.json"), &report)?;
    println!("train-gen: {} examples", examples.len());
    Ok(cfg.seeds.generator)
}

/// One request per test anchor and sample, keeping the agent's role.
pub fn requests(
    test: &[Trajectory],
    roles: &BTreeMap<String, RoleProfile>,
    per_anchor: usize,
) -> Vec<GenerationRequest> {
    test.iter()
        .flat_map(|t| {
            (0..per_anchor).map(move |i| GenerationRequest {
                agent_id: if per_anchor == 1 {
                    t.agent_id.clone()
                } else {
                    format!("{}~{i}", t.agent_id)
                },
                start_region: t.stays[0].region_id,
                start_time: t.stays[0].timestamp,
                role: roles.get(&t.agent_id).cloned(),
            })
        })
        .collect()
}

fn generate(ctx: &Ctx, dir: &Path, provenance: &str) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let data = Data::load(&ctx.workdir)?;
    let planner = PlannerHandle::load(ctx)?;
    let embedding = SpatialModel::load(&ctx.stage_dir(Stage::TrainEmbed).join("model"))
        .ctx("loading spatial embedding")?;
    let generator =
        Generator::load(&ctx.stage_dir(Stage::TrainGen).join("model")).ctx("loading generator")?;
    let plan_source = match cfg.generator.conditions {
        ConditionKind::Uniform => PlanSource::Uniform,
        ConditionKind::Planner | ConditionKind::Teacher => PlanSource::Planner,
    };
    let models = Models {
        planner: planner.backend(),
        embedding: &embedding,
        generator: &generator,
        slotting: cfg.slotting()?,
        k: cfg.planner.k,
        plan_source,
        dataset_tag: &cfg.planner.dataset_tag,
        jobs: ctx.jobs,
        anchor_start: cfg.generator.anchor_start,
    };
    let reqs = requests(
        &data.test,
        &data.role_profiles(&cfg.planner.dataset_tag)?,
        cfg.generator.samples_per_anchor,
    );
    let out = generate_batch(&reqs, &data.map, &models, cfg.seeds.sample).ctx("generating")?;
    save_trajectories(&dir.join("generated.csv"), &out).ctx("writing generated trajectories")?;
    let provenance = GenerationManifest {
        seed: cfg.seeds.sample,
        config_hash: provenance.to_string(),
        planner_backend: models.planner.id(),
        city: data.map.city_id.clone(),
        count: out.len(),
        plan_source,
    };
    write_json(&dir.join("generation.json"), &provenance)?;
    println!("generate: {} trajectories", out.len());
    Ok(cfg.seeds.sample)
}

fn load_generated(ctx: &Ctx, data: &Data) -> Result<Vec<Trajectory>, CliError> {
    load_trajectories_checked(
        &ctx.stage_dir(Stage::Generate).join("generated.csv"),
        &data.maps,
    )
    .ctx("loading generated trajectories")
}

fn summarize(label: &str, ev: &Evaluation) {
    let r = &ev.report;
    println!(
        "{label}: distance {:.4}  radius {:.4}  locnum {:.4}  g-rank {:.4}  r-rank {:.4} ({} origins)  cpc {:.4}",
        r.distance_jsd, r.radius_jsd, r.locnum_jsd, r.grank_jsd, r.rrank_jsd, r.rrank_origins, r.cpc
    );
}

fn evaluate_stage(ctx: &Ctx, dir: &Path, provenance: &str) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let data = Data::load(&ctx.workdir)?;
    let generated = load_generated(ctx, &data)?;
    let metrics = &cfg.evaluation.metrics;
    let ev = evaluate(&data.test, &generated, &data.map, metrics, provenance).ctx("evaluating")?;
    ev.write_to(dir).ctx("writing evaluation")?;
    summarize("evaluate", &ev);
    if cfg.evaluation.epr_baseline {
        let anchors: Vec<_> = data
            .test
            .iter()
            .flat_map(|t| {
                std::iter::repeat_n(
                    (t.stays[0].region_id, t.stays[0].timestamp),
                    cfg.generator.samples_per_anchor,
                )
            })
            .collect();
        let epr = epr_generate_from(&data.map, &anchors, &cfg.evaluation.epr, cfg.seeds.epr);
        let epr_dir = dir.join("epr");
        let ev = evaluate(&data.test, &epr, &data.map, metrics, provenance)
            .ctx("evaluating EPR baseline")?;
        ev.write_to(&epr_dir).ctx("writing EPR evaluation")?;
        save_trajectories(&epr_dir.join("generated.csv"), &epr).ctx("writing EPR trajectories")?;
        summarize("evaluate (EPR baseline)", &ev);
    }
    Ok(cfg.seeds.epr)
}

fn audit(ctx: &Ctx, dir: &Path) -> Result<u64, CliError> {
    let cfg = &ctx.cfg;
    let p = &cfg.privacy;
    let seed = cfg.seeds.audit;
    let slotting = cfg.slotting()?;
    let data = Data::load(&ctx.workdir)?;
    let generated = load_generated(ctx, &data)?;

    let sim = uniqueness_test(&generated, &data.train, ctx.jobs).ctx("uniqueness test")?;
    sim.write_json(&dir.join("similarity.json"))
        .ctx("writing similarity report")?;

    // Members are a training sample as large as the held-out set.
    let mut members = data.train.clone();
    members.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    members.truncate(data.test.len());
    let mut attacker: Box<dyn Attacker> = match p.attacker {
        AttackerKind::Logistic => Box::new(LogisticAttacker::new(p.logistic.clone())),
        AttackerKind::Mlp => {
            let mut mlp = p.mlp.clone();
            mlp.seed = seed ^ 1;
            Box::new(MlpAttacker::new(mlp))
        }
    };
    let mut mia = p.mia.clone();
    mia.seed = seed;
    mia.jobs = ctx.jobs;
    let attack = membership_inference_attack(
        &members,
        &data.test,
        &generated,
        &data.map,
        slotting,
        attacker.as_mut(),
        &mia,
    )
    .ctx("membership inference")?;
    write_json(&dir.join("mia.json"), &attack)?;

    let mut probe = p.probe.clone();
    probe.seed = seed ^ 2;
    let utility = utility_probe(
        &data.train,
        &generated,
        &data.test,
        &p.mix_ratios,
        data.map.num_regions(),
        slotting,
        &probe,
    )
    .ctx("utility probe")?;
    write_json(&dir.join("utility.json"), &utility)?;

    println!(
        "audit: top-1 similarity {:.4}, alarm fraction {:.4}, MIA balanced accuracy {:.4} ({})",
        sim.mean_top1, sim.alarm_fraction, attack.success_rate, attack.classifier
    );
    for u in &utility {
        println!(
            "audit: utility at mix ratio {} -> accuracy {:.4}",
            u.ratio, u.accuracy
        );
    }
    Ok(seed)
}
