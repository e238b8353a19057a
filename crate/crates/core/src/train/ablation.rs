//! Ablation grids: cartesian products of toggles, each cell trained with
//! several seeds.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{evaluate_samples, train_on, RunConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::interaction::AttentionKind;
use crate::model::ModelConfig;
use crate::reconstruction::MaskStrategy;

pub const SEEDS_PER_CELL: usize = 3;

/// One varied dimension of the grid and its levels.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Cvr,
    Clr,
    CclCondition,
    CvrCondition,
    ClrCondition,
    /// all three condition toggles together
    Conditions,
    Mask,
    Attention,
    AlphaV(Vec<f64>),
    AlphaT(Vec<f64>),
    ReconLayers(Vec<usize>),
    /// full model plus one-factor variants, see [`Variant`]
    Variant,
}

/// One-factor departures from the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoCvr,
    NoClr,
    NoConditions,
    RandomMask,
    SelfAttention,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCvr,
        Variant::NoClr,
        Variant::NoConditions,
        Variant::RandomMask,
        Variant::SelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCvr => "no_cvr",
            Variant::NoClr => "no_clr",
            Variant::NoConditions => "no_conditions",
            Variant::RandomMask => "random_mask",
            Variant::SelfAttention => "self_attention",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoCvr => c.use_cvr = false,
            Variant::NoClr => c.use_clr = false,
            Variant::NoConditions => set_conditions(&mut c, false),
            Variant::RandomMask => c.mask_strategy = MaskStrategy::Random,
            Variant::SelfAttention => c.attention = AttentionKind::SelfAttention,
        }
        c
    }
}

fn set_conditions(c: &mut RunConfig, on: bool) {
    c.use_ccl_condition = on;
    c.use_cvr_condition = on;
    c.use_clr_condition = on;
}

fn parse_list<T: std::str::FromStr>(name: &str, values: &str) -> Result<Vec<T>> {
    let out: Option<Vec<T>> = values.split('/').map(|v| v.trim().parse().ok()).collect();
    match out {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!("cannot parse levels {values:?} of axis {name}"))),
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    /// `cvr`, `clr`, `ccl_condition`, `cvr_condition`, `clr_condition`,
    /// `conditions`, `mask`, `attention`, `variant`, or a valued axis such
    /// as `alpha_v:0.1/0.3/0.5`, `alpha_t:…`, `recon_layers:1/2/3`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = match s.split_once(':') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (s.trim(), None),
        };
        Ok(match (name, values) {
            ("cvr", None) => Axis::Cvr,
            ("clr", None) => Axis::Clr,
            ("ccl_condition", None) => Axis::CclCondition,
            ("cvr_condition", None) => Axis::CvrCondition,
            ("clr_condition", None) => Axis::ClrCondition,
            ("conditions", None) => Axis::Conditions,
            ("mask", None) => Axis::Mask,
            ("attention", None) => Axis::Attention,
            ("variant", None) => Axis::Variant,
            ("alpha_v", Some(v)) => Axis::AlphaV(parse_list(name, v)?),
            ("alpha_t", Some(v)) => Axis::AlphaT(parse_list(name, v)?),
            ("recon_layers", Some(v)) => Axis::ReconLayers(parse_list(name, v)?),
            _ => return Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        })
    }
}

/// Parse a comma-separated axis list.
pub fn parse_axes(spec: &str) -> Result<Vec<Axis>> {
    spec.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

type Level = (String, Box<dyn Fn(&mut RunConfig)>);

fn toggle(name: &'static str, set: fn(&mut RunConfig, bool)) -> Vec<Level> {
    [true, false]
        .into_iter()
        .map(|on| {
            let label = format!("{name}={}", if on { "on" } else { "off" });
            (label, Box::new(move |c: &mut RunConfig| set(c, on)) as Box<dyn Fn(&mut RunConfig)>)
        })
        .collect()
}

fn levels(axis: &Axis) -> Vec<Level> {
    match axis {
        Axis::Cvr => toggle("cvr", |c, on| c.use_cvr = on),
        Axis::Clr => toggle("clr", |c, on| c.use_clr = on),
        Axis::CclCondition => toggle("ccl_condition", |c, on| c.use_ccl_condition = on),
        Axis::CvrCondition => toggle("cvr_condition", |c, on| c.use_cvr_condition = on),
        Axis::ClrCondition => toggle("clr_condition", |c, on| c.use_clr_condition = on),
        Axis::Conditions => toggle("conditions", set_conditions),
        Axis::Mask => [MaskStrategy::Weighted, MaskStrategy::Random]
            .into_iter()
            .map(|m| {
                let label = format!("mask={}", if m == MaskStrategy::Weighted { "weighted" } else { "random" });
                (label, Box::new(move |c: &mut RunConfig| c.mask_strategy = m) as _)
            })
            .collect(),
        Axis::Attention => [AttentionKind::Cross, AttentionKind::SelfAttention]
            .into_iter()
            .map(|a| {
                let label = format!("attention={}", if a == AttentionKind::Cross { "cross" } else { "self" });
                (label, Box::new(move |c: &mut RunConfig| c.attention = a) as _)
            })
            .collect(),
        Axis::AlphaV(v) => v
            .iter()
            .map(|&a| (format!("alpha_v={a}"), Box::new(move |c: &mut RunConfig| c.alpha_v = a) as _))
            .collect(),
        Axis::AlphaT(v) => v
            .iter()
            .map(|&a| (format!("alpha_t={a}"), Box::new(move |c: &mut RunConfig| c.alpha_t = a) as _))
            .collect(),
        Axis::ReconLayers(v) => v
            .iter()
            .map(|&k| (format!("recon_layers={k}"), Box::new(move |c: &mut RunConfig| c.recon_layers = k) as _))
            .collect(),
        Axis::Variant => Variant::ALL
            .into_iter()
            .map(|v| {
                (
                    format!("variant={}", v.name()),
                    Box::new(move |c: &mut RunConfig| *c = v.apply(c)) as _,
                )
            })
            .collect(),
    }
}

/// A labelled configuration of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

/// Cartesian product of the axes' levels applied to `base`, first axis
/// varying slowest.
pub fn grid(base: &RunConfig, axes: &[Axis]) -> Result<Vec<Cell>> {
    let mut cells = vec![Cell {
        label: String::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let lv = levels(axis);
        cells = cells
            .iter()
            .flat_map(|cell| {
                lv.iter().map(move |(label, set)| {
                    let mut config = cell.config.clone();
                    set(&mut config);
                    let label = if cell.label.is_empty() {
                        label.clone()
                    } else {
                        format!("{} {label}", cell.label)
                    };
                    Cell { label, config }
                })
            })
            .collect();
    }
    for c in &cells {
        c.config.validate()?;
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_miou: f64,
    pub val_dice: f64,
    pub test_miou: f64,
    pub test_dice: f64,
    pub seconds: f64,
}

/// Data for a grid run.
pub struct Splits<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

/// Train every cell with `seeds` consecutive master seeds starting at the
/// base seed; one row per cell × seed, scored with the best-val checkpoint.
pub fn run_cells(model: &ModelConfig, cells: &[Cell], seeds: usize, data: &Splits) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds);
    for cell in cells {
        for k in 0..seeds as u64 {
            let mut cfg = cell.config.clone();
            cfg.master_seed = cell.config.master_seed.wrapping_add(k);
            let summary = train_on(model, &cfg, data.train, data.val, None)?;
            let val = evaluate_samples(&summary.best, data.val)?;
            let test = evaluate_samples(&summary.best, data.test)?;
            log::info!("{} seed {}: test mIoU {:.4}", cell.label, cfg.master_seed, test.miou);
            rows.push(AblationRow {
                cell: cell.label.clone(),
                seed: cfg.master_seed,
                best_epoch: summary.best_epoch,
                val_miou: val.miou,
                val_dice: val.dice,
                test_miou: test.miou,
                test_dice: test.dice,
                seconds: summary.seconds,
            });
        }
    }
    Ok(rows)
}

/// [`grid`] followed by [`run_cells`] with three seeds per cell.
pub fn run_ablation_grid(
    model: &ModelConfig,
    base: &RunConfig,
    axes: &[Axis],
    data: &Splits,
) -> Result<Vec<AblationRow>> {
    run_cells(model, &grid(base, axes)?, SEEDS_PER_CELL, data)
}

pub fn write_rows<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_rows(rows: &[AblationRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(rows, f)
}
