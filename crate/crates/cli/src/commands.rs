//! Subcommand bodies. Each writes only inside its output directory.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use dlstm_core::allreduce::{
    local_tcp_mesh, memory_mesh, mesh_allreduce, partition, MeshEndpoint, Transport,
};
use dlstm_core::data::{generate_hmm_dataset, make_lattices, save_dataset, UtteranceSource};
use dlstm_core::model::{deserialize, serialize};
use dlstm_core::smbr::load_lattices;
use dlstm_core::train::{
    distill, evaluate, layerwise_train, save_checkpoint, transfer_smbr, Checkpoint,
    LayerwiseConfig, TrainOutput, TransferConfig,
};
use dlstm_core::{Dataset, ModelLayout, ModelParams, TrainConfig};
use log::info;
use serde::Serialize;

use crate::config::{usage, BenchSection, ManifestInfo, RunConfig, TransportKind};

pub struct RunCtx {
    pub out: PathBuf,
    pub command: &'static str,
}

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_manifest(ctx: &RunCtx, cfg: &RunConfig, seed: u64) -> anyhow::Result<()> {
    let mut m = cfg.clone();
    m.manifest = Some(ManifestInfo {
        command: ctx.command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
    });
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(ctx.out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn save_model(path: &Path, model: &ModelParams) -> anyhow::Result<()> {
    std::fs::write(path, serialize(model)).with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> anyhow::Result<ModelParams> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Writes `final.model`, `ema.model` (the final model when EMA is off),
/// `final.ckpt` and `metrics.csv`.
fn write_training_outputs(out: &Path, run: &TrainOutput, metrics: &dlstm_core::Metrics) -> anyhow::Result<()> {
    save_model(&out.join("final.model"), &run.model)?;
    save_model(&out.join("ema.model"), run.ema.as_ref().unwrap_or(&run.model))?;
    save_checkpoint(
        &out.join("final.ckpt"),
        &Checkpoint {
            model: run.model.clone(),
            bmuf: run.bmuf.clone(),
            ma: Some(run.ma_state.clone()),
            ema: run.ema_state.clone(),
        },
    )?;
    metrics.write_csv(&out.join("metrics.csv"))?;
    Ok(())
}

fn check(cfg: &TrainConfig) -> anyhow::Result<()> {
    cfg.validate().map_err(|e| usage(format!("train.{e}")))
}

pub fn gen_data(ctx: &RunCtx, cfg: RunConfig) -> anyhow::Result<()> {
    let seed;
    if let Some(hmm) = &cfg.hmm {
        hmm.validate().map_err(|e| usage(e.to_string()))?;
        seed = hmm.seed;
        let data = generate_hmm_dataset(hmm)?;
        prepare_out(&ctx.out)?;
        save_dataset(&ctx.out.join("data.jsonl"), &data)?;
        info!("wrote {} utterances", data.utterances.len());
    } else {
        let task = cfg.task();
        task.validate().map_err(|e| usage(e.to_string()))?;
        seed = task.data_seed;
        let (train, valid) = task.generate()?;
        prepare_out(&ctx.out)?;
        save_dataset(&ctx.out.join("train.jsonl"), &train)?;
        save_dataset(&ctx.out.join("valid.jsonl"), &valid)?;
        info!("wrote {} train and {} valid utterances", train.len(), valid.len());
    }
    write_manifest(ctx, &cfg, seed)
}

pub fn train(ctx: &RunCtx, mut cfg: RunConfig) -> anyhow::Result<()> {
    let (train, valid) = cfg.datasets()?;
    let tc = cfg.train_config(&train, &valid)?;
    check(&tc)?;
    cfg.train = Some(tc.clone());
    prepare_out(&ctx.out)?;
    let run = dlstm_core::train::train_parallel(&tc, &train, &valid)?;
    write_training_outputs(&ctx.out, &run, &run.metrics)?;
    write_manifest(ctx, &cfg, tc.seed)
}

pub fn layerwise(ctx: &RunCtx, mut cfg: RunConfig) -> anyhow::Result<()> {
    let (train, valid) = cfg.datasets()?;
    let tc = cfg.train_config(&train, &valid)?;
    let section = cfg.layerwise.clone().unwrap_or_default();
    let lw = LayerwiseConfig {
        train: tc.clone(),
        max_layers: section.max_layers,
        stage_loss: section.stage_loss,
        teacher: section.teacher.clone(),
        subset_fraction: section.subset_fraction,
    };
    lw.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train = Some(tc.clone());
    cfg.layerwise = Some(section);
    prepare_out(&ctx.out)?;
    let out = layerwise_train(&lw, &train, &valid)?;
    for stage in &out.stages {
        save_model(&ctx.out.join(format!("stage{}.model", stage.layers)), &stage.output.model)?;
    }
    let last = &out.stages.last().expect("at least one stage").output;
    write_training_outputs(&ctx.out, last, &out.metrics)?;
    write_manifest(ctx, &cfg, tc.seed)
}

pub fn distill_cmd(ctx: &RunCtx, mut cfg: RunConfig) -> anyhow::Result<()> {
    let mut section = cfg.distill.clone().unwrap_or_default();
    let teacher_path = section
        .teacher
        .clone()
        .ok_or_else(|| usage("distill.teacher is required (or pass --teacher)"))?;
    let teacher = load_model(&teacher_path)?;
    let (train, valid) = cfg.datasets()?;
    let t = teacher.layout();
    let layers = section
        .student_layers
        .clone()
        .unwrap_or_else(|| vec![t.top_hidden(); 2]);
    let student = ModelLayout::new(t.input_dim(), layers.clone(), t.num_classes())
        .map_err(|e| usage(format!("distill.student_layers: {e}")))?;
    section.student_layers = Some(layers);
    let mut tc = cfg.train_config(&train, &valid)?;
    tc.layout = student.clone();
    check(&tc)?;
    cfg.train = Some(tc.clone());
    cfg.distill = Some(section);
    prepare_out(&ctx.out)?;
    let run = distill(&teacher, &student, &train, &valid, &tc)?;
    write_training_outputs(&ctx.out, &run, &run.metrics)?;
    write_manifest(ctx, &cfg, tc.seed)
}

pub fn transfer(ctx: &RunCtx, mut cfg: RunConfig) -> anyhow::Result<()> {
    let section = cfg.transfer.clone().unwrap_or_default();
    let base_path = section
        .base
        .clone()
        .ok_or_else(|| usage("transfer.base is required (or pass --base)"))?;
    let base = load_model(&base_path)?;
    let (train, valid) = cfg.datasets()?;
    let mut tc = cfg.train_config(&train, &valid)?;
    tc.layout = base.layout().clone();
    let tcfg = TransferConfig {
        train: tc.clone(),
        subset_fraction: section.subset_fraction,
        lr_scale: section.lr_scale,
        smbr: section.smbr,
    };
    tcfg.validate().map_err(|e| usage(format!("transfer: {e}")))?;
    let lattices = match &section.lattices {
        Some(p) => load_lattices(p).with_context(|| format!("reading {}", p.display()))?,
        None => make_lattices(
            &train,
            base.layout().num_classes(),
            Some((&base, &tc.clip)),
            section.alternatives,
            tc.seed,
        )
        .map_err(|e| usage(format!("transfer.alternatives: {e}")))?,
    };
    cfg.train = Some(tc.clone());
    cfg.transfer = Some(section);
    prepare_out(&ctx.out)?;
    let run = transfer_smbr(&base, &train, &lattices, &valid, &tcfg)?;
    write_training_outputs(&ctx.out, &run, &run.metrics)?;
    write_manifest(ctx, &cfg, tc.seed)
}

#[derive(Serialize)]
struct EvalJson {
    model: PathBuf,
    utterances: usize,
    frames: usize,
    errors: usize,
    fer: f64,
    ce_loss: f64,
    us_per_frame: f64,
}

pub fn eval(ctx: &RunCtx, cfg: RunConfig) -> anyhow::Result<()> {
    let section = cfg.eval.clone().unwrap_or_default();
    let path = section
        .model
        .clone()
        .ok_or_else(|| usage("eval.model is required (or pass --model)"))?;
    let model = load_model(&path)?;
    let (_, valid) = cfg.datasets()?;
    let clip = cfg.train.as_ref().map(|t| t.clip).unwrap_or_default();
    check_dims(&model, &valid)?;
    prepare_out(&ctx.out)?;
    let r = evaluate(&model, &valid, &clip)?;
    let report = EvalJson {
        model: path,
        utterances: valid.len(),
        frames: r.frames,
        errors: r.errors,
        fer: r.fer,
        ce_loss: r.ce_loss,
        us_per_frame: r.us_per_frame,
    };
    println!("fer {:.6} ce {:.6} us/frame {:.3}", r.fer, r.ce_loss, r.us_per_frame);
    std::fs::write(ctx.out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_manifest(ctx, &cfg, 0)
}

fn check_dims(model: &ModelParams, data: &Dataset) -> anyhow::Result<()> {
    if let Some(d) = data.feature_dim() {
        if d != model.layout().input_dim() {
            bail!(usage(format!(
                "model expects {} inputs but data has {d} (check `stack`)",
                model.layout().input_dim()
            )));
        }
    }
    Ok(())
}

pub fn allreduce_bench(ctx: &RunCtx, cfg: RunConfig) -> anyhow::Result<()> {
    let b = cfg.allreduce_bench.clone().unwrap_or_default();
    if b.workers.is_empty() || b.workers.contains(&0) {
        bail!(usage("allreduce_bench.workers: need positive worker counts"));
    }
    if b.len == 0 || b.rounds == 0 {
        bail!(usage("allreduce_bench.len and allreduce_bench.rounds must be positive"));
    }
    if let Some(&n) = b.workers.iter().find(|&&n| n > b.len) {
        bail!(usage(format!("allreduce_bench.len: {} values cannot be split over {n} workers", b.len)));
    }
    prepare_out(&ctx.out)?;
    let mut csv = String::from("workers,len,rounds,messages,payload_bytes,ms_per_round\n");
    for &n in &b.workers {
        let (messages, bytes, ms) = bench_one(&b, n)?;
        info!("N={n}: {ms:.3} ms/round");
        println!("workers {n} ms/round {ms:.3}");
        csv.push_str(&format!("{n},{},{},{messages},{bytes},{ms:.3}\n", b.len, b.rounds));
    }
    std::fs::write(ctx.out.join("bench.csv"), csv)?;
    write_manifest(ctx, &cfg, 0)
}

fn bench_one(b: &BenchSection, n: usize) -> anyhow::Result<(u64, u64, f64)> {
    let timeout = Duration::from_secs(30);
    match b.transport {
        TransportKind::Memory => run_mesh(b, memory_mesh(n, timeout)),
        TransportKind::Tcp => run_mesh(b, local_tcp_mesh(n, timeout)?),
    }
}

fn run_mesh<T: Transport>(b: &BenchSection, mesh: Vec<T>) -> anyhow::Result<(u64, u64, f64)> {
    let n = mesh.len();
    let part = partition(b.len, n)?;
    let start = Instant::now();
    let results: Vec<dlstm_core::Result<(u64, u64)>> = thread::scope(|s| {
        let handles: Vec<_> = mesh
            .into_iter()
            .enumerate()
            .map(|(me, t)| {
                let part = &part;
                s.spawn(move || {
                    let local: Vec<f64> = (0..b.len).map(|i| ((i + 7 * me) as f64).sin()).collect();
                    let mut ep = MeshEndpoint::new(t);
                    for _ in 0..b.rounds {
                        mesh_allreduce(&local, me, part, &mut ep)?;
                    }
                    let st = ep.stats();
                    Ok((st.messages, st.payload_bytes))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let elapsed = start.elapsed().as_secs_f64() * 1e3 / b.rounds as f64;
    let mut total = (0, 0);
    for r in results {
        let (m, by) = r?;
        total.0 += m;
        total.1 += by;
    }
    Ok((total.0, total.1, elapsed))
}
