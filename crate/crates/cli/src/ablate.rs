//! Ablation runner: train + evaluate one configuration per grid cell and emit
//! a markdown/CSV table of the reports.

use crate::config::Config;
use crate::evaluator::{self, EvalReport};
use crate::trainer;
use fewshot_core::episodes::{self, Split, SplitManifest};
use fewshot_core::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Grid file: one cell per line, `label | key=value key=value ...`.
pub fn parse_grid(text: &str) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, rest) = line.split_once('|').ok_or_else(|| {
            Error::Config(format!("grid line {}: expected 'label | key=value ...'", lineno + 1))
        })?;
        let mut overrides = Vec::new();
        for tok in rest.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                Error::Config(format!("grid line {}: bad override '{tok}'", lineno + 1))
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        cells.push(AblationCell { label: label.trim().to_string(), overrides })
    }
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(cells)
}

/// Stream-fusion grid: fixed-weight rows from single streams up to the best
/// fixed combination (app,corrC,corrD,mi) = 4,2,1,2, plus the learned row.
pub fn default_grid() -> Vec<AblationCell> {
    let fixed = |label: &str, streams: &str, weights: &str| AblationCell {
        label: label.to_string(),
        overrides: vec![
            ("weights.mode".into(), "fixed".into()),
            ("streams.enabled".into(), streams.into()),
            ("weights.fixed".into(), weights.into()),
        ],
    };
    vec![
        fixed("app-only", "app", "1,0,0,0"),
        fixed("fixed-1-1-0-0", "app,corrC", "1,1,0,0"),
        fixed("fixed-2-1-0-0", "app,corrC", "2,1,0,0"),
        fixed("fixed-2-1-1-0", "app,corrC,corrD", "2,1,1,0"),
        fixed("fixed-4-2-1-0", "app,corrC,corrD", "4,2,1,0"),
        fixed("best-fixed-4-2-1-2", "app,corrC,corrD,mi", "4,2,1,2"),
        fixed("fixed-4-2-1-4", "app,corrC,corrD,mi", "4,2,1,4"),
        AblationCell {
            label: "learned-weights".into(),
            overrides: vec![
                ("weights.mode".into(), "learned".into()),
                ("streams.enabled".into(), "app,corrC,corrD,mi".into()),
            ],
        },
    ]
}

pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
}

pub fn run_ablation<S: fewshot_core::Scalar>(
    base: &Config,
    cells: &[AblationCell],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = SplitManifest::load(&base.manifest_path())?;
    let mut test_ds = episodes::load_dataset(
        &base.dataset_root,
        &manifest,
        Split::Test,
        base.image_size,
        base.channels,
    )?;
    if base.augment_rotations {
        test_ds = episodes::augment_rotations(&test_ds)?;
    }

    let mut rows = Vec::new();
    for cell in cells {
        let cfg = base.with_overrides(&cell.overrides)?;
        let cell_dir = out_dir.join(&cell.label);
        let artifacts = trainer::train::<S>(&cfg, &cell_dir, None)?;
        let data = crate::checkpoint::load(&artifacts.checkpoint)?;
        let (ckpt_cfg, model, _) = trainer::load_model::<S>(&data)?;
        let report = evaluator::evaluate(&model, &test_ds, &ckpt_cfg, cfg.seed, cfg.eval_episodes)?;
        println!(
            "[ablate] {:<22} acc {:.4} +- {:.4}",
            cell.label, report.mean_acc, report.ci95
        );
        rows.push(AblationRow { label: cell.label.clone(), report });
    }
    write_tables(out_dir, &rows)?;
    Ok(rows)
}

fn write_tables(out_dir: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut md = String::from("| configuration | accuracy | 95% CI | episodes |\n|---|---|---|---|\n");
    let mut csv = String::from("configuration,accuracy,ci95,episodes\n");
    for r in rows {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {} |\n",
            r.label, r.report.mean_acc, r.report.ci95, r.report.episodes
        ));
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.label, r.report.mean_acc, r.report.ci95, r.report.episodes
        ));
    }
    let mut f = std::fs::File::create(out_dir.join("ablation.md"))?;
    f.write_all(md.as_bytes())?;
    let mut f = std::fs::File::create(out_dir.join("ablation.csv"))?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}
