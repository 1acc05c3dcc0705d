//! Component ablations: one network variant per row, trained under a shared
//! recipe, with parameter and FLOP deltas against the full model.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::net::{count_flops, NetConfig};
use crate::nn::Activation;
use crate::train::{train_on, Evaluation};

/// Row keys accepted by [`row_config`], with descriptions.
pub const ROWS: &[(&str, &str)] = &[
    ("a", "w/o nonlinear activation"),
    ("b", "w/o value nonlinear transformation adjustment"),
    ("c", "w/o intra attention aggregation"),
    ("d", "w/o progressive heads"),
    ("e", "w/o intra residual connections"),
    ("f", "full model"),
    ("stacked", "three stacked single attentions"),
    ("att1", "single attention"),
    ("att2", "two continuous attentions"),
    ("noscale", "w/o spatial scaling"),
    ("relu", "ReLU activation"),
    ("leaky_relu", "LeakyReLU activation"),
    ("silu", "SiLU activation"),
];

/// The letter rows of the component table.
pub const TABLE_ROWS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

pub fn row_label(key: &str) -> Result<&'static str> {
    ROWS.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, l)| *l)
        .ok_or_else(|| Error::Config(format!("unknown ablation row {key:?}; known: {}", row_keys())))
}

fn row_keys() -> String {
    ROWS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

/// `base` with the toggle of row `key` applied.
pub fn row_config(base: &NetConfig, key: &str) -> Result<NetConfig> {
    row_label(key)?;
    let mut cfg = base.clone();
    let b = &mut cfg.csattn;
    match key {
        "a" => b.use_nonlinear_activation = false,
        "b" => b.use_value_nta = false,
        "c" => b.use_aggregation = false,
        "d" => b.progressive_heads = false,
        "e" => b.intra_residual = false,
        "stacked" => b.baseline_stacked = true,
        "att1" => b.attention_count = 1,
        "att2" => b.attention_count = 2,
        "noscale" => b.use_spatial_scaling = false,
        "relu" => b.activation = Activation::Relu,
        "leaky_relu" => b.activation = Activation::LeakyRelu,
        "silu" => b.activation = Activation::Silu,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits a comma-separated row list; `all` expands to the letter rows plus
/// the stacked baseline.
pub fn parse_rows(list: &str) -> Result<Vec<String>> {
    let mut rows = Vec::new();
    for key in list.split(',').map(str::trim).filter(|k| !k.is_empty()) {
        if key == "all" {
            rows.extend(TABLE_ROWS.iter().chain(&["stacked"]).map(|k| k.to_string()));
        } else {
            row_label(key)?;
            rows.push(key.to_string());
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no ablation rows given".into()));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowCost {
    pub key: String,
    pub label: &'static str,
    pub params: usize,
    pub flops: u64,
    /// Relative to the full model.
    pub params_delta: i64,
    pub flops_delta: i64,
}

/// Parameter and FLOP counts of each row at `h × w`, with deltas to row "f".
pub fn cost_table(base: &NetConfig, rows: &[String], h: usize, w: usize) -> Result<Vec<RowCost>> {
    let full = count_flops(&row_config(base, "f")?, h, w)?;
    rows.iter()
        .map(|key| {
            let r = count_flops(&row_config(base, key)?, h, w)?;
            Ok(RowCost {
                key: key.clone(),
                label: row_label(key)?,
                params: r.params,
                flops: r.flops,
                params_delta: r.params as i64 - full.params as i64,
                flops_delta: r.flops as i64 - full.flops as i64,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RowResult {
    pub cost: RowCost,
    pub eval: Evaluation,
    /// Loss of the last optimisation step.
    pub last_step_loss: f64,
    pub seconds: f64,
}

pub const SUMMARY_HEADER: &str =
    "row,label,params,params_delta,flops,flops_delta,final_loss,psnr,ssim,mae,last_step_loss,seconds";

pub fn summary_csv(results: &[RowResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let c = &r.cost;
        let m = &r.eval.metrics;
        let _ = writeln!(
            out,
            "{},\"{}\",{},{},{},{},{},{},{},{},{},{:.1}",
            c.key,
            c.label,
            c.params,
            c.params_delta,
            c.flops,
            c.flops_delta,
            r.eval.loss,
            m.psnr,
            m.ssim,
            m.mae,
            r.last_step_loss,
            r.seconds
        );
    }
    out
}

/// Trains every row on `data` with the recipe of `cfg`. When `out_dir` is
/// given, row `k` logs to `out_dir/k/` and a `summary.csv` is written.
pub fn run(cfg: &TrainConfig, data: &PairDataset, rows: &[String], out_dir: Option<&Path>) -> Result<Vec<RowResult>> {
    let costs = cost_table(&cfg.net, rows, cfg.patch, cfg.patch)?;
    let mut results = Vec::with_capacity(rows.len());
    for cost in costs {
        let mut row_cfg = cfg.clone();
        row_cfg.net = row_config(&cfg.net, &cost.key)?;
        row_cfg.output_dir = out_dir.map(|d| d.join(&cost.key));
        log::info!("ablation row {} ({})", cost.key, cost.label);
        let out = train_on(&row_cfg, data)?;
        results.push(RowResult {
            cost,
            eval: out.eval,
            last_step_loss: out.logs.last().map_or(f64::NAN, |l| l.loss),
            seconds: out.seconds,
        });
    }
    if let Some(d) = out_dir {
        let path = d.join("summary.csv");
        std::fs::write(&path, summary_csv(&results)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}
