use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use isfuse::ate::{run_ate_suite, AteReport, Quality};
use isfuse::data::{chroma_reinject, load_gray, load_image_pair, save_gray_png, save_rgb_png, Dataset};
use isfuse::interventions::{InterventionMask, InterventionSet};
use isfuse::metrics::{evaluate_fused, evaluate_model, MetricReport, ReportMeta};
use isfuse::rng::derive_seed;
use isfuse::train::{self, Checkpoint};
use isfuse::{Error, Result};
use serde_json::json;

use crate::run_config::RunConfig;

pub const RUN_CONFIG: &str = "run_config.txt";

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stores the resolved config next to a single output file.
fn persist_beside(cfg: &RunConfig, output: &Path) -> Result<()> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.txt");
    write_text(Path::new(&name), &cfg.to_string())
}

/// Writes `text` to `output` when set, otherwise to stdout.
fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.output {
        Some(path) => {
            write_text(path, text)?;
            persist_beside(cfg, path)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn now() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = required(&cfg.train.data, "data")?;
    let train_set = Dataset::load_dir(data)?;
    // A distinct loader object even when both point at the same directory.
    let val_set = Dataset::load_dir(cfg.train.val_data.as_deref().unwrap_or(data))?;
    fs::create_dir_all(&cfg.train.out_dir).map_err(|e| io_err(&cfg.train.out_dir, e))?;
    write_text(&cfg.train.out_dir.join(RUN_CONFIG), &cfg.to_string())?;
    let out = train::train(cfg.train.clone(), &train_set, &val_set)?;
    println!("steps: {}", out.steps);
    println!("best checkpoint: {} (validation PSNR {:.3} dB)", out.best.display(), out.best_val_psnr);
    println!("last checkpoint: {}", out.last.display());
    Ok(())
}

pub fn fuse(cfg: &RunConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let vi = required(&cfg.vi, "vi")?;
    let ir = required(&cfg.ir, "ir")?;
    let output = required(&cfg.output, "out")?;
    let net = Checkpoint::load(ckpt)?.model()?;
    let pair = load_image_pair("input", vi, ir)?;
    let lc = pair.luma_chroma();
    let fused = net.fuse(&lc.luma, &pair.infrared)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    if cfg.color {
        save_rgb_png(output, &chroma_reinject(&fused, &lc.chroma)?)?;
    } else {
        save_gray_png(output, &fused)?;
    }
    persist_beside(cfg, output)?;
    println!("{}", output.display());
    Ok(())
}

fn render_metrics(cfg: &RunConfig, report: &MetricReport) -> String {
    if cfg.json {
        report.to_json() + "\n"
    } else {
        report.to_csv()
    }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let data = required(&cfg.train.data, "data")?;
    let dataset = Dataset::load_dir(data)?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("no image pairs found in {}", data.display())));
    }
    let report = match (&cfg.fused_dir, &cfg.checkpoint) {
        (Some(dir), _) => {
            let items = dataset
                .iter()
                .map(|p| {
                    let f = load_gray(&dir.join(format!("{}.png", p.id)))?;
                    Ok((p.id.clone(), f, p.visible_luma(), p.infrared.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let meta = ReportMeta {
                dataset: dataset.name().to_string(),
                checkpoint: None,
                timestamp: Some(now()),
            };
            evaluate_fused(&items, meta)?
        }
        (None, Some(ckpt)) => {
            let net = Checkpoint::load(ckpt)?.model()?;
            let mut r = evaluate_model(&net, &dataset, Some(ckpt.display().to_string()))?;
            r.meta.timestamp = Some(now());
            r
        }
        (None, None) => {
            return Err(Error::Config("eval needs --checkpoint or --fused-dir".into()));
        }
    };
    emit(cfg, &render_metrics(cfg, &report))
}

fn filter_metric(mut report: AteReport, metric: &str) -> AteReport {
    let keep = match metric {
        "psnr" => Some(Quality::Psnr),
        "cc" => Some(Quality::Cc),
        _ => None,
    };
    if let Some(q) = keep {
        report.rows.retain(|r| r.metric == q);
        report.sanity.retain(|r| r.metric == q);
        report.baseline.retain(|(m, _)| *m == q);
    }
    report
}

pub fn ate(cfg: &RunConfig) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.train.data, "data")?;
    let dataset = Dataset::load_dir(data)?;
    let net = Checkpoint::load(ckpt)?.model()?;
    let report = run_ate_suite(&net, &dataset, &cfg.seed_list(), &cfg.train.mask_config())?;
    if let Some(chart) = &cfg.chart {
        if let Some(parent) = chart.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        report.save_chart(chart)?;
    }
    let report = filter_metric(report, &cfg.metric);
    let text = if cfg.json {
        report.to_json() + "\n"
    } else {
        report.to_csv()
    };
    emit(cfg, &text)
}

fn mask_png(path: &Path, m: &InterventionMask) -> Result<()> {
    save_gray_png(path, &m.keep_tensor::<f32>())
}

pub fn masks_demo(cfg: &RunConfig) -> Result<()> {
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("masks_demo"));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let masks = cfg.train.mask_config();
    masks.validate()?;
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let seed = derive_seed(cfg.train.seed, i as u64, 0);
        let set = InterventionSet::from_seed(cfg.height, cfg.width, &masks, seed)?;
        mask_png(&out.join(format!("sample_{i:03}_comp_vi.png")), &set.comp_vi)?;
        mask_png(&out.join(format!("sample_{i:03}_comp_ir.png")), &set.comp_ir)?;
        mask_png(&out.join(format!("sample_{i:03}_random.png")), &set.random_shared)?;
        samples.push(json!({
            "index": i,
            "seed": seed,
            "comp_vi_blocks": set.comp_vi.blocks.len(),
            "comp_ir_blocks": set.comp_ir.blocks.len(),
            "random_blocks": set.random_shared.blocks.len(),
            "comp_vi_occluded": set.comp_vi.occluded_fraction(),
            "comp_ir_occluded": set.comp_ir.occluded_fraction(),
            "random_occluded": set.random_shared.occluded_fraction(),
            "complementary_disjoint": set.is_disjoint(),
        }));
    }
    let stats = json!({
        "height": cfg.height,
        "width": cfg.width,
        "block_size": masks.block_size,
        "count_range": [masks.min_blocks, masks.max_blocks],
        "samples": samples,
    });
    let text = serde_json::to_string_pretty(&stats).expect("json value serializes") + "\n";
    write_text(&out.join("stats.json"), &text)?;
    write_text(&out.join(RUN_CONFIG), &cfg.to_string())?;
    print!("{text}");
    Ok(())
}
