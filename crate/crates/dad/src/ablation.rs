//! Ablation grids: named tables of config variants, each trained with the
//! same budget and evaluated on one test set.
//!
//! ```toml
//! profile = "desk"
//! tables = ["table4", "table7"]      # presets, see `preset`
//! train_dir = "synthetic/train"
//! test_dir = "synthetic/test"
//! output = "ablation.csv"
//!
//! [base]                             # run-config keys shared by every variant
//! optim.epochs = 2
//!
//! [[variant]]                        # extra hand-written rows
//! table = "custom"
//! name = "wide"
//! set = ["model.branch_channels=64"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dad_core::train::{self, Sample};
use serde::Deserialize;
use toml::Table;

use crate::config::{merge, parse_override, Profile, RunConfig};
use crate::dataset::load_dataset;
use crate::error::{io_err, Error, Result};
use crate::run::{train_on, TrainOptions};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub tables: Vec<String>,
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub base: Table,
    #[serde(default, rename = "variant")]
    pub variants: Vec<VariantSpec>,
}

fn default_profile() -> String {
    "desk".into()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub table: String,
    pub name: String,
    #[serde(default)]
    pub set: Vec<String>,
}

impl VariantSpec {
    fn new(table: &str, name: &str, set: &[&str]) -> Self {
        Self {
            table: table.into(),
            name: name.into(),
            set: set.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Layer partitions compared in the partition table.
pub const PARTITIONS: [&str; 11] = [
    "2+5", "3+5", "4+5", "5", "1+2+5", "1+3+5", "1+4+5", "1+2+4+5", "1+2+3+5", "1+3+4+5", "1+5",
];

/// The variants of a preset table.
pub fn preset(table: &str) -> Result<Vec<VariantSpec>> {
    let v = VariantSpec::new;
    Ok(match table {
        "table3" => vec![
            v(table, "fem", &["model.fem_variant=fem"]),
            v(table, "fem_no_dilation", &["model.fem_variant=fem_no_dilation"]),
            v(table, "dilated_pyramid", &["model.fem_variant=dilated_pyramid"]),
        ],
        "table4" => PARTITIONS
            .iter()
            .map(|p| {
                let mut spec = VariantSpec::new(table, p, &[]);
                spec.set.push(format!("model.partition=\"{p}\""));
                if *p == "5" {
                    spec.set.push("model.allow_single_stage_a=true".into());
                }
                spec
            })
            .collect(),
        "table5" => vec![
            v(table, "bottom_up", &["model.fusion=bottom_up"]),
            v(table, "top_down", &["model.fusion=top_down"]),
            v(table, "middle_fem_after_concat", &["model.fusion=middle", "model.mff_fem_per_branch=false"]),
            v(table, "middle", &["model.fusion=middle", "model.mff_fem_per_branch=true"]),
        ],
        "table6" => vec![
            v(table, "without_dgm", &["model.use_dgm=false"]),
            v(table, "with_dgm", &["model.use_dgm=true"]),
        ],
        "table7" => vec![
            v(table, "f_only", &["model.dem_mode=f_only"]),
            v(table, "b_only", &["model.dem_mode=b_only"]),
            v(table, "f_minus_b", &["model.dem_mode=f_minus_b"]),
        ],
        "table8" => vec![
            v(table, "repeats_1", &["model.dae_repeats=1"]),
            v(table, "repeats_2", &["model.dae_repeats=2"]),
            v(table, "repeats_3", &["model.dae_repeats=3"]),
        ],
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation table {table:?}, expected table3 to table8"
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    pub status: Status,
    /// Aggregate metrics in `MetricRecord::values` order.
    pub metrics: Option<[f64; 8]>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "table", "variant", "status", "e_phi", "mae", "s_alpha", "f_w_beta", "dice", "iou", "f1", "acc",
    "final_loss", "seconds", "reason",
];

impl GridFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut grid: GridFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        grid.train_dir = base.join(&grid.train_dir);
        grid.test_dir = base.join(&grid.test_dir);
        grid.output = grid.output.map(|p| base.join(p));
        Ok(grid)
    }

    /// Every variant grouped by table, in file order.
    pub fn variants(&self) -> Result<Vec<VariantSpec>> {
        let mut out = Vec::new();
        for t in &self.tables {
            out.extend(preset(t)?);
        }
        out.extend(self.variants.iter().cloned());
        Ok(out)
    }

    fn resolve(&self, spec: &VariantSpec) -> Result<RunConfig> {
        let profile: Profile = self.profile.parse()?;
        let mut table = RunConfig::defaults(profile).to_table()?;
        merge(&mut table, self.base.clone());
        for s in &spec.set {
            merge(&mut table, parse_override(s)?);
        }
        RunConfig::from_table(table)
    }
}

/// Run every variant and write the CSV. Invalid or failing variants become
/// FAILED rows; duplicates within a table are dropped with a warning, and
/// identical configurations across tables reuse the first result.
pub fn run_grid(grid: &GridFile) -> Result<(Vec<AblationRow>, PathBuf)> {
    let specs = grid.variants()?;
    let mut data: BTreeMap<usize, (Vec<Sample>, Vec<Sample>)> = BTreeMap::new();
    let mut cache: Vec<(RunConfig, AblationRow)> = Vec::new();
    let mut seen: Vec<(String, RunConfig)> = Vec::new();
    let mut rows = Vec::new();
    let mut output = None;

    for spec in &specs {
        let cfg = match grid.resolve(spec) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("{}/{}: {e}", spec.table, spec.name);
                rows.push(failed(spec, e.to_string(), 0.0));
                continue;
            }
        };
        output.get_or_insert_with(|| grid.output.clone().unwrap_or_else(|| cfg.output_dir.join("ablation.csv")));
        if let Some((_, _)) = seen.iter().find(|(t, c)| *t == spec.table && *c == cfg) {
            log::warn!("{}/{}: duplicate of an earlier variant in this table, skipped", spec.table, spec.name);
            continue;
        }
        seen.push((spec.table.clone(), cfg.clone()));
        if let Some((_, row)) = cache.iter().find(|(c, _)| *c == cfg) {
            log::info!("{}/{}: same configuration as {}/{}, reusing", spec.table, spec.name, row.table, row.variant);
            rows.push(AblationRow {
                table: spec.table.clone(),
                variant: spec.name.clone(),
                ..row.clone()
            });
            continue;
        }
        let size = cfg.data.image_size;
        if !data.contains_key(&size) {
            let train_set = load_dataset(&grid.train_dir, size)?.samples;
            let test_set = load_dataset(&grid.test_dir, size)?.samples;
            data.insert(size, (train_set, test_set));
        }
        let (train_set, test_set) = &data[&size];
        log::info!("{}/{}: training", spec.table, spec.name);
        let row = run_variant(spec, &cfg, train_set, test_set);
        if let Status::Failed(reason) = &row.status {
            log::warn!("{}/{}: FAILED: {reason}", spec.table, spec.name);
        }
        cache.push((cfg, row.clone()));
        rows.push(row);
    }
    let output = output.unwrap_or_else(|| grid.output.clone().unwrap_or_else(|| PathBuf::from("ablation.csv")));
    write_rows(&rows, &output)?;
    Ok((rows, output))
}

fn failed(spec: &VariantSpec, reason: String, seconds: f64) -> AblationRow {
    AblationRow {
        table: spec.table.clone(),
        variant: spec.name.clone(),
        status: Status::Failed(reason),
        metrics: None,
        final_loss: None,
        seconds,
    }
}

fn run_variant(spec: &VariantSpec, cfg: &RunConfig, train_set: &[Sample], test_set: &[Sample]) -> AblationRow {
    let start = Instant::now();
    let opts = TrainOptions {
        resume: None,
        no_artifacts: true,
    };
    let result = train_on(cfg, train_set, &opts).and_then(|out| {
        let report = train::evaluate(&out.net, test_set)?;
        Ok((report, out.epochs.last().map(|e| e.mean_loss)))
    });
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((report, final_loss)) => AblationRow {
            table: spec.table.clone(),
            variant: spec.name.clone(),
            status: Status::Ok,
            metrics: Some(report.aggregate.values()),
            final_loss,
            seconds,
        },
        Err(e) => failed(spec, e.to_string(), seconds),
    }
}

pub fn write_rows(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let m = r.metrics;
        let at = |i: usize| num(m.map(|m| m[i]));
        let (status, reason) = match &r.status {
            Status::Ok => ("OK", String::new()),
            Status::Failed(why) => ("FAILED", why.clone()),
        };
        w.write_record([
            r.table.clone(),
            r.variant.clone(),
            status.into(),
            at(1),
            at(3),
            at(0),
            at(2),
            at(4),
            at(5),
            at(6),
            at(7),
            num(r.final_loss),
            format!("{:.2}", r.seconds),
            reason,
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_the_expected_sizes() {
        let sizes: Vec<usize> = ["table3", "table4", "table5", "table6", "table7", "table8"]
            .iter()
            .map(|t| preset(t).unwrap().len())
            .collect();
        assert_eq!(sizes, [3, 11, 4, 2, 3, 3]);
        assert!(preset("table9").is_err());
    }

    #[test]
    fn every_preset_resolves_on_the_synthetic_backbone() {
        let grid = GridFile {
            profile: "desk".into(),
            tables: ["table3", "table4", "table5", "table6", "table7", "table8"].map(String::from).to_vec(),
            train_dir: "x".into(),
            test_dir: "y".into(),
            output: None,
            base: Table::new(),
            variants: Vec::new(),
        };
        for spec in grid.variants().unwrap() {
            grid.resolve(&spec).unwrap_or_else(|e| panic!("{}/{}: {e}", spec.table, spec.name));
        }
    }
}
