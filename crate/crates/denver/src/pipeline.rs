//! Pipeline orchestration: one function per CLI subcommand, each reading its
//! predecessor's artifacts from the output directory and writing its own
//! plus a manifest (config snapshot, seed, sha-256 artifact hashes, wall
//! time). A lock file keeps two commands from sharing an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{DenverError, Result};
use crate::imaging_io::{
    load_binary_mask, load_clip, load_gray_image, read_flo, save_binary_mask, save_gray_image,
    write_flo, write_float_array,
};
use crate::metrics::{evaluate_sequence, MetricReport};
use crate::optical_flow::estimate_flows;
use crate::stage1::fit_background;
use crate::stage2::{loss_trace_csv, run_stage2};
use crate::synth::{generate_video, write_sample};
use crate::types::{FlowSequence, MaskKind, MaskSequence, VideoClip};
use crate::vessel_prior::make_prior_masks;

struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(".denver.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DenverError::Input(
                format!(
                    "output dir is locked by another run (remove {} if stale)",
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn write_manifest(
    cfg: &RunConfig,
    stage: &str,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let mut hashes = serde_json::Map::new();
    for a in artifacts {
        let rel = a
            .strip_prefix(&cfg.output_dir)
            .unwrap_or(a)
            .to_string_lossy()
            .to_string();
        hashes.insert(rel, serde_json::Value::String(sha256_hex(a)?));
    }
    let manifest = serde_json::json!({
        "stage": stage,
        "seed": cfg.seed,
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "config": cfg,
        "artifacts": hashes,
    });
    fs::write(
        cfg.output_dir.join(format!("manifest_{}.json", stage)),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn require_stage(cfg: &RunConfig, stage: &str) -> Result<()> {
    let p = cfg.output_dir.join(format!("manifest_{}.json", stage));
    if !p.is_file() {
        return Err(DenverError::StageOrder(format!(
            "stage '{}' has not run in {} (missing {})",
            stage,
            cfg.output_dir.display(),
            p.display()
        )));
    }
    Ok(())
}

fn frames_dir(cfg: &RunConfig) -> PathBuf {
    match &cfg.input_dir {
        Some(d) => d.clone(),
        None => cfg.output_dir.join("synth/frames"),
    }
}

fn load_input_clip(cfg: &RunConfig) -> Result<VideoClip> {
    let dir = frames_dir(cfg);
    if !dir.is_dir() {
        return Err(DenverError::StageOrder(format!(
            "no input frames at {} (run `synth` first or set input_dir)",
            dir.display()
        )));
    }
    load_clip(&dir)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png" || e == "flo").unwrap_or(false))
        .collect();
    v.sort();
    Ok(v)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let _lock = Lock::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    let sample = generate_video(&cfg.synth)?;
    let dir = cfg.output_dir.join("synth");
    write_sample(&dir, &sample, &cfg.synth)?;
    let mut artifacts = png_files(&dir.join("frames"))?;
    artifacts.extend(png_files(&dir.join("gt_masks"))?);
    artifacts.extend(png_files(&dir.join("gt_flows"))?);
    write_manifest(cfg, "synth", &artifacts, started)?;
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let _lock = Lock::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    let clip = load_input_clip(cfg)?;
    let priors = make_prior_masks(&clip, &cfg.vesselness, &cfg.prior)?;
    let flows = estimate_flows(&clip, &cfg.flow)?;
    let pdir = cfg.output_dir.join("preprocess/priors");
    let fdir = cfg.output_dir.join("preprocess/flows");
    fs::create_dir_all(&pdir)?;
    fs::create_dir_all(&fdir)?;
    let mut artifacts = Vec::new();
    for (i, m) in priors.masks.iter().enumerate() {
        let p = pdir.join(format!("{:05}.png", i));
        save_binary_mask(m, &p)?;
        artifacts.push(p);
    }
    for (i, f) in flows.flows.iter().enumerate() {
        let p = fdir.join(format!("flow_{:05}.flo", i));
        write_flo(f, &p)?;
        artifacts.push(p);
    }
    write_manifest(cfg, "preprocess", &artifacts, started)?;
    Ok(())
}

pub fn cmd_stage1(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    require_stage(cfg, "preprocess")?;
    let _lock = Lock::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    let clip = load_input_clip(cfg)?;
    let result = fit_background(&clip, &cfg.stage1)?;
    let dir = cfg.output_dir.join("stage1");
    let ckpt = dir.join("checkpoint");
    fs::create_dir_all(&ckpt)?;
    let mut artifacts = Vec::new();
    for (i, bg) in result.bg_frames.iter().enumerate() {
        let p = dir.join(format!("bg_{:05}.png", i));
        save_gray_image(bg, &p)?;
        artifacts.push(p);
    }
    for (i, tensor) in result.model.store.tensors.iter().enumerate() {
        let p = ckpt.join(format!("param_{:03}.dnvf", i));
        let data: Vec<f32> = tensor.iter().map(|v| *v as f32).collect();
        write_float_array(&data, tensor.shape(), &p)?;
        artifacts.push(p);
    }
    fs::write(
        ckpt.join("params.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "names": result.model.store.names,
            "seed": cfg.stage1.seed,
            "config": cfg.stage1,
        }))?,
    )?;
    let mut csv = String::from("step,recons,smooth,limit,total\n");
    for (step, v) in &result.loss_trace {
        csv += &format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            step, v.recons, v.smooth, v.limit, v.total
        );
    }
    fs::write(dir.join("loss_trace.csv"), csv)?;
    artifacts.push(ckpt.join("params.json"));
    artifacts.push(dir.join("loss_trace.csv"));
    write_manifest(cfg, "stage1", &artifacts, started)?;
    Ok(())
}

fn load_stage2_inputs(
    cfg: &RunConfig,
    clip: &VideoClip,
) -> Result<(MaskSequence, FlowSequence, Vec<Array2<f32>>)> {
    let t_len = clip.len();
    let mut priors = Vec::with_capacity(t_len);
    let mut bg = Vec::with_capacity(t_len);
    for i in 0..t_len {
        priors.push(load_binary_mask(
            &cfg.output_dir.join(format!("preprocess/priors/{:05}.png", i)),
        )?);
        bg.push(load_gray_image(
            &cfg.output_dir.join(format!("stage1/bg_{:05}.png", i)),
        )?);
    }
    let mut flows = Vec::with_capacity(t_len - 1);
    for i in 0..t_len - 1 {
        flows.push(read_flo(
            &cfg.output_dir
                .join(format!("preprocess/flows/flow_{:05}.flo", i)),
        )?);
    }
    Ok((
        MaskSequence::new(priors, MaskKind::Binary)?,
        FlowSequence::for_clip(flows)?,
        bg,
    ))
}

pub fn cmd_stage2(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    require_stage(cfg, "preprocess")?;
    require_stage(cfg, "stage1")?;
    let _lock = Lock::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    let clip = load_input_clip(cfg)?;
    let (priors, guidance, bg) = load_stage2_inputs(cfg, &clip)?;
    let result = run_stage2(&clip, &priors, &guidance, &bg, &cfg.stage2)?;
    let dir = cfg.output_dir.join("stage2");
    let mut artifacts = Vec::new();
    for sub in ["masks_bin", "masks_soft", "flows"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for t in 0..clip.len() {
        let pb = dir.join(format!("masks_bin/{:05}.png", t));
        save_binary_mask(&result.binary_masks.masks[t], &pb)?;
        let ps = dir.join(format!("masks_soft/{:05}.png", t));
        save_gray_image(&result.soft_masks.masks[t], &ps)?;
        let pf = dir.join(format!("flows/fg_{:05}.flo", t));
        write_flo(&result.layer_flows.foreground[t], &pf)?;
        let pg = dir.join(format!("flows/bg_{:05}.flo", t));
        write_flo(&result.layer_flows.background[t], &pg)?;
        artifacts.extend([pb, ps, pf, pg]);
    }
    let pcf = dir.join("canonical_fg.png");
    save_gray_image(&result.canonical_fg, &pcf)?;
    fs::write(dir.join("loss_trace.csv"), loss_trace_csv(&result.loss_trace))?;
    artifacts.push(pcf);
    artifacts.push(dir.join("loss_trace.csv"));
    write_manifest(cfg, "stage2", &artifacts, started)?;
    Ok(())
}

fn load_mask_dir(dir: &Path, t_len: usize, pattern: &str) -> Result<Vec<Array2<f32>>> {
    (0..t_len)
        .map(|i| load_binary_mask(&dir.join(format!("{}{:05}.png", pattern, i))))
        .collect()
}

/// Evaluate stage-2 masks (and the prior masks, for reference) against the
/// synth ground truth. Returns (final report, prior report).
pub fn cmd_eval(cfg: &RunConfig) -> Result<(MetricReport, MetricReport)> {
    cfg.validate()?;
    require_stage(cfg, "stage2")?;
    let _lock = Lock::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    let clip = load_input_clip(cfg)?;
    let t_len = clip.len();
    let gt_dir = cfg.output_dir.join("synth/gt_masks");
    if !gt_dir.is_dir() {
        return Err(DenverError::Input(format!(
            "no ground-truth masks at {} (eval needs a synth run)",
            gt_dir.display()
        )));
    }
    let gts = load_mask_dir(&gt_dir, t_len, "")?;
    let finals = load_mask_dir(&cfg.output_dir.join("stage2/masks_bin"), t_len, "")?;
    let priors = load_mask_dir(&cfg.output_dir.join("preprocess/priors"), t_len, "")?;
    let annotated: Vec<usize> = (0..t_len).collect();
    let final_report = evaluate_sequence(&finals, &gts, &annotated, cfg.metric_tau)?;
    let prior_report = evaluate_sequence(&priors, &gts, &annotated, cfg.metric_tau)?;
    let dir = cfg.output_dir.join("eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("final_report.csv"), final_report.to_csv())?;
    fs::write(dir.join("prior_report.csv"), prior_report.to_csv())?;
    let table = format!(
        "final masks vs GT\n{}\nprior masks vs GT\n{}",
        final_report.to_table(),
        prior_report.to_table()
    );
    fs::write(dir.join("report.txt"), &table)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "final_mean_dice": final_report.mean.dice,
            "prior_mean_dice": prior_report.mean.dice,
            "final_mean_cldice": final_report.mean.cl_dice,
            "final_mean_nsd": final_report.mean.nsd,
        }))?,
    )?;
    let artifacts = vec![
        dir.join("final_report.csv"),
        dir.join("prior_report.csv"),
        dir.join("report.txt"),
        dir.join("summary.json"),
    ];
    write_manifest(cfg, "eval", &artifacts, started)?;
    Ok((final_report, prior_report))
}

/// Chain all stages; eval runs only when ground truth exists (synth input).
pub fn cmd_run_all(cfg: &RunConfig) -> Result<Option<(MetricReport, MetricReport)>> {
    if cfg.input_dir.is_none() {
        cmd_synth(cfg)?;
    }
    cmd_preprocess(cfg)?;
    cmd_stage1(cfg)?;
    cmd_stage2(cfg)?;
    if cfg.input_dir.is_none() {
        Ok(Some(cmd_eval(cfg)?))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.output_dir = out.to_path_buf();
        cfg.seed = 11;
        cfg.synth.size = 32;
        cfg.synth.frames = 3;
        cfg.synth.max_depth = 2;
        cfg.stage1.steps = 25;
        cfg.stage1.hidden = 12;
        cfg.stage1.depth = 2;
        cfg.stage1.batch_pixels = 128;
        cfg.stage2.warmup_steps = 6;
        cfg.stage2.total_steps = 16;
        cfg.stage2.enable_parallel_at = 6;
        cfg.stage2.enable_warp_at = 9;
        cfg.stage2.enable_rec_at = 12;
        cfg.stage2.unet_base = 4;
        cfg.stage2.fg_latent_channels = 8;
        cfg.stage2.bspline_spatial = 4;
        cfg.flow.pyramid_levels = 2;
        cfg.flow.hs_iters = 20;
        cfg.propagate_seed();
        cfg
    }

    #[test]
    fn stage_order_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        assert!(matches!(
            cmd_stage2(&cfg),
            Err(DenverError::StageOrder(_))
        ));
        assert!(matches!(cmd_stage1(&cfg), Err(DenverError::StageOrder(_))));
        assert!(matches!(cmd_eval(&cfg), Err(DenverError::StageOrder(_))));
        // preprocess without frames
        assert!(matches!(
            cmd_preprocess(&cfg),
            Err(DenverError::StageOrder(_))
        ));
    }

    #[test]
    fn lock_excludes_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let _held = Lock::acquire(dir.path()).unwrap();
        assert!(cmd_synth(&cfg).is_err());
        drop(_held);
        assert!(cmd_synth(&cfg).is_ok());
    }

    #[test]
    fn run_all_produces_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("a"));
        let (final_a, prior_a) = cmd_run_all(&cfg).unwrap().unwrap();
        for p in [
            "synth/frames/00000.png",
            "preprocess/priors/00000.png",
            "preprocess/flows/flow_00000.flo",
            "stage1/bg_00000.png",
            "stage2/masks_bin/00002.png",
            "stage2/canonical_fg.png",
            "stage2/loss_trace.csv",
            "eval/final_report.csv",
            "eval/summary.json",
            "manifest_stage2.json",
        ] {
            assert!(cfg.output_dir.join(p).is_file(), "missing artifact {}", p);
        }
        // lock released after completion
        assert!(!cfg.output_dir.join(".denver.lock").exists());
        let cfg_b = tiny_cfg(&dir.path().join("b"));
        let (final_b, prior_b) = cmd_run_all(&cfg_b).unwrap().unwrap();
        assert_eq!(final_a.mean.dice.to_bits(), final_b.mean.dice.to_bits());
        assert_eq!(prior_a.mean.dice.to_bits(), prior_b.mean.dice.to_bits());
        // manifests record matching artifact hashes across the two runs
        let ha: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(cfg.output_dir.join("manifest_stage2.json")).unwrap(),
        )
        .unwrap();
        let hb: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(cfg_b.output_dir.join("manifest_stage2.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(ha["artifacts"], hb["artifacts"]);
    }
}
