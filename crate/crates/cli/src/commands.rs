use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use sketchlift_client::{ApiError, Client, ClientError, PlanRequest, RunStatus, TrainRequest};
use sketchlift_core::geometry::CalibrationFile;
use sketchlift_core::instruction::{parse_instruction, validate_scene_bundle, Diagnostic, SceneBundle};
use sketchlift_core::lifting::{lift_trajectory_pair, LiftingConfig, PixelTrajectory};
use sketchlift_core::models::{Backends, LiveBackend, LiveConfig, ModelBackend, Recorder, ScriptedScenario};
use sketchlift_core::pipeline::{
    decode_rgb, export_plan, import_plan, run_pipeline, trace_to_jsonl, InputError, PipelineConfig, PipelineError,
    PipelineInput, PipelineOutput, StageError,
};
use sketchlift_core::rl::{
    build_demo_dataset, curve_from_csv, plot::plot_success_curves, report_artifacts, DemoDataset, ReachExperiment,
};

use crate::{Cli, Command, PipelineArgs, ScenarioCommand};

const WAIT_PLAN: Duration = Duration::from_secs(600);
const WAIT_TRAIN: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl CliError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), message: message.into(), stage: None }
    }

    fn validation(message: impl Into<String>) -> Self {
        CliError::new("validation", message)
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self.code.as_str() {
            "validation" => 3,
            "transport" => 4,
            "scenario-incomplete" => 5,
            "model-response" => 6,
            "numerical" => 7,
            "io" => 8,
            "training" => 9,
            "not-found" => 10,
            "conflict" => 11,
            _ => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError { code: e.source.class().as_str().into(), message: e.source.to_string(), stage: Some(e.stage.as_str().into()) }
    }
}

impl From<InputError> for CliError {
    fn from(e: InputError) -> Self {
        match e {
            InputError::Io { .. } => CliError::new("io", e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError { code: e.code, message: e.message, stage: e.stage }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { error, .. } => error.into(),
            ClientError::Transport(_) | ClientError::Timeout { .. } => CliError::new("transport", e.to_string()),
            ClientError::Decode(_) => CliError::new("internal", e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn pipeline_config(args: &PipelineArgs) -> CliResult<PipelineConfig> {
    let mut config = match &args.config {
        Some(p) => parse_json::<PipelineConfig>(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    config.validate().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(config)
}

fn load_scenario(path: &Path) -> CliResult<ScriptedScenario> {
    ScriptedScenario::from_json(&read(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn live_backend() -> CliResult<Arc<dyn ModelBackend>> {
    let config = LiveConfig::from_env().ok_or_else(|| CliError::validation("CI_LIVE_URL is not set"))?;
    let live = LiveBackend::new(config).map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Arc::new(live))
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("internal", e.to_string()))
}

fn write_plan_outputs(out: &PipelineOutput, plan_path: &Path, trace_path: Option<&Path>) -> CliResult<()> {
    write(plan_path, &export_plan(&out.plan))?;
    if let Some(t) = trace_path {
        write(t, trace_to_jsonl(&out.trace).as_bytes())?;
    }
    println!("wrote {} ({} steps, backend {})", plan_path.display(), out.plan.horizon(), out.plan.provenance.backend);
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let server = cli.server;
    match cli.command {
        Command::Plan { pipeline, scenario, out, trace } => match server {
            Some(url) => plan_remote(&url, &pipeline, scenario.as_deref(), &out, trace.as_deref()),
            None => {
                let input = PipelineInput::load(&pipeline.instruction, &pipeline.scene)?;
                let config = pipeline_config(&pipeline)?;
                let backends = match &scenario {
                    Some(p) => Backends::scripted(load_scenario(p)?),
                    None => Backends::single(live_backend()?),
                };
                let output = run_pipeline(&input, &config, &backends)?;
                write_plan_outputs(&output, &out, trace.as_deref())
            }
        },
        Command::Lift { xi1, xi2, calib, config, seed, out } => lift(&xi1, &xi2, &calib, config.as_deref(), seed, &out),
        Command::Train { demo, from_plan, rollouts, config, seed, out } => {
            let exp = match &config {
                Some(p) => parse_json::<ReachExperiment>(p)?,
                None => ReachExperiment::default(),
            };
            let demo = match (&demo, &from_plan) {
                (Some(p), _) => DemoDataset::from_jsonl(&read(p)?).map_err(|e| CliError::validation(e.to_string()))?,
                (None, Some(p)) => {
                    let plan = import_plan(&read(p)?).map_err(|e| CliError::validation(e.0))?;
                    build_demo_dataset(&plan.distribution, &exp.env, rollouts, seed)
                        .map_err(|e| CliError::validation(e.to_string()))?
                }
                (None, None) => return Err(CliError::validation("give --demo or --from-plan")),
            };
            match server {
                Some(url) => train_remote(&url, &exp, &demo, seed, &out),
                None => {
                    let report = exp.train_on_demo(&demo, seed).map_err(|e| CliError::new("training", e.to_string()))?;
                    for (name, bytes) in report_artifacts(&report, "td3+bc") {
                        write(&out.join(name), &bytes)?;
                    }
                    write(&out.join("demo.jsonl"), &demo.to_jsonl())?;
                    println!(
                        "wrote {} (best success {:.2}, final {:.2})",
                        out.display(),
                        report.best_success(),
                        report.final_success()
                    );
                    Ok(())
                }
            }
        }
        Command::Plot { curves, width, height, out } => {
            let mut series = Vec::new();
            for spec in &curves {
                let (label, path) = spec.split_once('=').unwrap_or(("curve", spec.as_str()));
                let text = String::from_utf8(read(Path::new(path))?).map_err(|e| CliError::validation(e.to_string()))?;
                series.push((label.to_string(), curve_from_csv(&text).map_err(|e| CliError::validation(e.to_string()))?));
            }
            let img = plot_success_curves(&series, width, height);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            img.save(&out).map_err(|e| CliError::io(&out, e))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Scenario(ScenarioCommand::Record { pipeline, name, out, plan_out }) => {
            let input = PipelineInput::load(&pipeline.instruction, &pipeline.scene)?;
            let config = pipeline_config(&pipeline)?;
            let recorder = Recorder::new();
            let backends = Backends::single(Arc::new(recorder.wrap(live_backend()?)));
            let result = run_pipeline(&input, &config, &backends);
            let scenario = recorder.scenario(name);
            write(&out, &scenario.to_json())?;
            println!("wrote {} ({} exchanges)", out.display(), scenario.responses.len());
            let output = result?;
            if let Some(p) = plan_out {
                write_plan_outputs(&output, &p, None)?;
            }
            Ok(())
        }
        Command::Scenario(ScenarioCommand::Replay { pipeline, scenario, out }) => {
            let input = PipelineInput::load(&pipeline.instruction, &pipeline.scene)?;
            let config = pipeline_config(&pipeline)?;
            let output = run_pipeline(&input, &config, &Backends::scripted(load_scenario(&scenario)?))?;
            write_plan_outputs(&output, &out, None)
        }
        Command::Validate { scene, instruction, min_baseline_deg } => {
            validate(scene.as_deref(), instruction.as_deref(), min_baseline_deg)
        }
        Command::Serve { port, host, data } => {
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| CliError::validation(format!("address: {e}")))?;
            let state = sketchlift_service::AppState::open(&data).map_err(|e| CliError::io(&data, e))?;
            runtime()?
                .block_on(sketchlift_service::serve(addr, state))
                .map_err(|e| CliError::new("io", e.to_string()))
        }
    }
}

fn lift(xi1: &Path, xi2: &Path, calib: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let xi1: PixelTrajectory = parse_json(xi1)?;
    let xi2: PixelTrajectory = parse_json(xi2)?;
    let calib = CalibrationFile::from_json(&read(calib)?).map_err(|e| CliError::validation(e.to_string()))?;
    let mut config = match config {
        Some(p) => parse_json::<LiftingConfig>(p)?,
        None => LiftingConfig::default(),
    };
    if let Some(s) = seed {
        config.rng_seed = s;
    }
    let view = |id: &str| calib.view(id).ok_or_else(|| CliError::validation(format!("view {id} not in calibration")));
    let views = (view(&xi1.view_id)?, view(&xi2.view_id)?);
    let dist = lift_trajectory_pair(&xi1, &xi2, views, &config).map_err(|e| {
        let e = StageError::Lifting(e);
        CliError::new(e.class().as_str(), e.to_string())
    })?;
    write(out, &dist.to_json())?;
    println!("wrote {} ({} waypoints)", out.display(), dist.horizon());
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    diagnostics: &'a [Diagnostic],
}

fn validate(scene: Option<&Path>, instruction: Option<&Path>, min_baseline_deg: f64) -> CliResult<()> {
    let mut diags = Vec::new();
    let mut bundle = None;
    if let Some(path) = scene {
        match SceneBundle::from_json(&read(path)?) {
            Ok(b) => {
                diags.extend(validate_scene_bundle(&b, min_baseline_deg));
                let base = path.parent().unwrap_or(Path::new("."));
                for (v, p) in b.views.iter().zip(b.image_paths(base)) {
                    match std::fs::read(&p).map_err(|e| e.to_string()).and_then(|b| decode_rgb(&b).map_err(|e| e.to_string())) {
                        Ok(img) => {
                            let k = &v.calibration.intrinsics;
                            if img.dimensions() != (k.width, k.height) {
                                diags.push(Diagnostic::new(
                                    "image-size",
                                    format!("view {}: image is {}x{}, calibration says {}x{}", v.id, img.width(), img.height(), k.width, k.height),
                                ));
                            }
                        }
                        Err(e) => diags.push(Diagnostic::new("image", format!("view {}: {}: {e}", v.id, p.display()))),
                    }
                }
                bundle = Some(b);
            }
            Err(e) => diags.push(Diagnostic::new("parse", e.to_string())),
        }
    }
    if let Some(path) = instruction {
        match parse_instruction(&read(path)?) {
            Ok(instr) => {
                let size = bundle
                    .as_ref()
                    .and_then(|b| b.views.iter().find(|v| v.id == instr.image_ref))
                    .map(|v| (v.calibration.intrinsics.width, v.calibration.intrinsics.height));
                if let Some((w, h)) = size {
                    if let Err(e) = instr.validate_bounds(w, h) {
                        diags.push(Diagnostic::new("bounds", e.to_string()));
                    }
                }
            }
            Err(e) => diags.push(Diagnostic::new("instruction", e.to_string())),
        }
    }
    println!("{}", serde_json::to_string_pretty(&Report { diagnostics: &diags }).unwrap());
    if diags.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{} diagnostic(s)", diags.len())))
    }
}

fn plan_remote(url: &str, args: &PipelineArgs, scenario: Option<&Path>, out: &Path, trace: Option<&Path>) -> CliResult<()> {
    let scene = SceneBundle::from_json(&read(&args.scene)?).map_err(|e| CliError::validation(e.to_string()))?;
    let base = args.scene.parent().unwrap_or(Path::new("."));
    let images = scene
        .views
        .iter()
        .zip(scene.image_paths(base))
        .map(|(v, p)| Ok((v.id.clone(), read(&p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let calibration = CalibrationFile { views: scene.cameras() }.to_json();
    let instruction_bytes = read(&args.instruction)?;
    let instruction = parse_instruction(&instruction_bytes).map_err(|e| CliError::validation(e.to_string()))?;
    let instruction_image = match scene.views.iter().any(|v| v.id == instruction.image_ref) {
        true => None,
        false => Some(read(&args.instruction.parent().unwrap_or(Path::new(".")).join(&instruction.image_ref))?),
    };
    let config = pipeline_config(args)?;
    let scenario = scenario.map(|p| Ok::<_, CliError>((load_scenario(p)?.name, read(p)?))).transpose()?;

    runtime()?.block_on(async {
        let client = Client::new(url)?;
        let scene_id = client.upload_scene(calibration, images).await?.scene_id;
        let instruction_id =
            client.post_instruction(&instruction_bytes, Some(&scene_id), instruction_image.as_deref()).await?.instruction_id;
        let backend = match scenario {
            Some((name, bytes)) => {
                client.put_scenario(&name, bytes).await?;
                format!("scripted:{name}")
            }
            None => "live".to_string(),
        };
        let request = PlanRequest {
            instruction_id,
            scene_id,
            config: Some(serde_json::to_value(&config).unwrap()),
            backend,
        };
        let created = client.create_plan(&request).await?;
        let view = client.wait_plan(&created.plan_id, WAIT_PLAN).await?;
        if view.status == RunStatus::Failed {
            return Err(view.error.map(CliError::from).unwrap_or_else(|| CliError::new("internal", "plan failed")));
        }
        write(out, &client.plan_file(&created.plan_id).await?)?;
        if let Some(t) = trace {
            write(t, &client.trace_file(&created.plan_id).await?)?;
        }
        println!("wrote {} (plan {} via {url})", out.display(), created.plan_id);
        Ok(())
    })
}

fn train_remote(url: &str, exp: &ReachExperiment, demo: &DemoDataset, seed: u64, out: &PathBuf) -> CliResult<()> {
    let request = TrainRequest {
        demo_jsonl: Some(String::from_utf8(demo.to_jsonl()).expect("jsonl is utf-8")),
        from_plan: None,
        rollouts: None,
        config: Some(serde_json::to_value(exp).unwrap()),
        seed,
    };
    runtime()?.block_on(async {
        let client = Client::new(url)?;
        let created = client.create_training(&request).await?;
        let view = client.wait_training(&created.train_id, WAIT_TRAIN).await?;
        if view.status == RunStatus::Failed {
            return Err(view.error.map(CliError::from).unwrap_or_else(|| CliError::new("training", "training failed")));
        }
        for name in &view.artifacts {
            write(&out.join(name), &client.training_artifact(&created.train_id, name).await?)?;
        }
        println!("wrote {} (training {} via {url})", out.display(), created.train_id);
        Ok(())
    })
}
