//! The three ablation tables as one command: augmentation toggles, loss
//! variants and bottleneck kinds, one trained model and one CSV row each.

use std::fs;

use vffc_core::evalkit::format_psnr;
use vffc_core::network::BottleneckKind;
use vffc_core::pipeline::config::TrainConfig;
use vffc_core::pipeline::loss::LossMode;

use crate::commands::{load_sets, resolve_config, train_into};
use crate::manifest::{self, Manifest};
use crate::{DataArgs, Failure};

pub const HEADER: &str = "table,row,dihedral,random_crop,channel_dropout,loss,ink_weight,bottleneck,f_beta,pfm,psnr";

pub struct Row {
    pub table: usize,
    pub label: &'static str,
    pub apply: fn(&mut TrainConfig),
}

/// Rows of each table, applied on top of the full method (every
/// augmentation on, Dice + WBCE with weight 1, vFFC bottleneck).
pub fn rows() -> Vec<Row> {
    vec![
        Row { table: 1, label: "no-augmentation", apply: |c| (c.dihedral, c.random_crop, c.channel_dropout) = (false, false, false) },
        Row { table: 1, label: "dihedral", apply: |c| (c.dihedral, c.random_crop, c.channel_dropout) = (true, false, false) },
        Row { table: 1, label: "dihedral+randcrop", apply: |c| (c.dihedral, c.random_crop, c.channel_dropout) = (true, true, false) },
        Row { table: 1, label: "dihedral+randcrop+chdrop", apply: |_| {} },
        Row { table: 2, label: "dice", apply: |c| c.loss.mode = LossMode::Dice },
        Row { table: 2, label: "wbce-w1", apply: |c| (c.loss.mode, c.loss.ink_weight) = (LossMode::Wbce, 1.0) },
        Row { table: 2, label: "wbce+dice-w5", apply: |c| c.loss.ink_weight = 5.0 },
        Row { table: 2, label: "wbce+dice-w2", apply: |c| c.loss.ink_weight = 2.0 },
        Row { table: 2, label: "wbce+dice-w1", apply: |c| c.loss.ink_weight = 1.0 },
        Row { table: 3, label: "none", apply: |c| c.network.bottleneck = BottleneckKind::None },
        Row { table: 3, label: "stffc", apply: |c| c.network.bottleneck = BottleneckKind::Stffc },
        Row { table: 3, label: "conv3d", apply: |c| c.network.bottleneck = BottleneckKind::Conv3d },
        Row { table: 3, label: "vffc", apply: |c| c.network.bottleneck = BottleneckKind::Vffc },
    ]
}

/// The full method on top of whatever the config file sets for the rest.
fn full_method(base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    c.dihedral = true;
    c.random_crop = true;
    c.channel_dropout = true;
    c.loss.mode = LossMode::DiceWbce;
    c.loss.ink_weight = 1.0;
    c.network.bottleneck = BottleneckKind::Vffc;
    c
}

pub fn run(args: &DataArgs, tables: &str) -> Result<(), Failure> {
    let mut manifest = Manifest::start("ablate");
    let wanted: Vec<usize> = tables
        .split(',')
        .map(|t| t.trim().parse().ok().filter(|t| (1..=3).contains(t)))
        .collect::<Option<_>>()
        .ok_or_else(|| Failure::Usage(format!("--tables must list 1, 2 or 3, got `{tables}`")))?;
    let base = full_method(&resolve_config(args)?);
    let (tr, va) = load_sets(args)?;
    let mut csv = vec![HEADER.to_string()];
    for (i, row) in rows().iter().enumerate().filter(|(_, r)| wanted.contains(&r.table)) {
        let mut cfg = base.clone();
        (row.apply)(&mut cfg);
        let dir = args.out.join(format!("row{i:02}-t{}-{}", row.table, row.label));
        let (_, m) = train_into(&cfg, &tr, &va, &dir, false)?;
        let line = format!(
            "{},{},{},{},{},{},{:?},{},{:.6},{:.6},{}",
            row.table,
            row.label,
            cfg.dihedral,
            cfg.random_crop,
            cfg.channel_dropout,
            cfg.loss.mode,
            cfg.loss.ink_weight,
            cfg.network.bottleneck,
            m.f_beta,
            m.pfm,
            format_psnr(m.psnr)
        );
        println!("{line}");
        csv.push(line);
    }
    let path = args.out.join("ablation.csv");
    fs::write(&path, csv.join("\n") + "\n")?;
    manifest
        .set("tables", tables)
        .set("seed", base.seed)
        .config(&base.to_text())
        .output(&path);
    manifest.write(&manifest::in_dir(&args.out))?;
    Ok(())
}
