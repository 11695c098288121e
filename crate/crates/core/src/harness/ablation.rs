use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::RunConfig;
use super::train::{load_splits, predict, train, Predictions};
use crate::data::Preloaded;
use crate::error::{Error, Result};
use crate::model::FusionVariant;

/// Which table a variant belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Fusion,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub group: Group,
    pub name: &'static str,
    pub fusion: FusionVariant,
    pub integrate: bool,
    pub energy_loss: bool,
    /// Rank the reference results assign (1 = lowest RMSE).
    pub reference_rank: usize,
    pub reference_rmse: f64,
}

const fn fusion(name: &'static str, fusion: FusionVariant, rank: usize, rmse: f64) -> Variant {
    Variant {
        group: Group::Fusion,
        name,
        fusion,
        integrate: true,
        energy_loss: true,
        reference_rank: rank,
        reference_rmse: rmse,
    }
}

const fn decoder(name: &'static str, integrate: bool, energy_loss: bool, rank: usize, rmse: f64) -> Variant {
    Variant {
        group: Group::Decoder,
        name,
        fusion: FusionVariant::Ecfm,
        integrate,
        energy_loss,
        reference_rank: rank,
        reference_rmse: rmse,
    }
}

/// The nine table cells with their reference results.
pub const VARIANTS: [Variant; 9] = [
    fusion("ecfm", FusionVariant::Ecfm, 1, 0.0801),
    fusion("additive_attention", FusionVariant::AdditiveAttention, 2, 0.2986),
    fusion("add", FusionVariant::Add, 3, 0.3499),
    fusion("frames_only", FusionVariant::FramesOnly, 4, 0.4609),
    fusion("events_only", FusionVariant::EventsOnly, 5, 0.5102),
    decoder("integrate+energy", true, true, 1, 0.0801),
    decoder("energy", false, true, 2, 0.0898),
    decoder("integrate", true, false, 3, 0.0909),
    decoder("neither", false, false, 4, 0.1016),
];

impl Variant {
    fn key(&self) -> (FusionVariant, bool, bool) {
        (self.fusion, self.integrate, self.energy_loss)
    }

    fn run_name(&self) -> String {
        format!(
            "{}_{}_{}",
            self.fusion.name(),
            if self.integrate { "int" } else { "last" },
            if self.energy_loss { "energy" } else { "l1" }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    /// Rank by mean RMSE within its group (1 = lowest).
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, group: Group, name: &str) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant.group == group && r.variant.name == name)
    }

    fn mean(&self, group: Group, name: &str) -> f64 {
        self.get(group, name).map_or(f64::NAN, |r| r.mean_rmse)
    }

    /// ECFM < additive attention < add < the better single modality.
    pub fn fusion_ordering_holds(&self) -> bool {
        let g = Group::Fusion;
        let single = self.mean(g, "frames_only").min(self.mean(g, "events_only"));
        self.mean(g, "ecfm") < self.mean(g, "additive_attention")
            && self.mean(g, "additive_attention") < self.mean(g, "add")
            && self.mean(g, "add") < single
    }

    /// The cell with both integration and the energy loss has the lowest
    /// mean RMSE of the decoder table.
    pub fn decoder_best_holds(&self) -> bool {
        let best = self.mean(Group::Decoder, "integrate+energy");
        self.results
            .iter()
            .filter(|r| r.variant.group == Group::Decoder && r.variant.name != "integrate+energy")
            .all(|r| best < r.mean_rmse)
    }

    /// `group,variant,fusion,integrate,energy_loss,seed,rmse,mae,rank,reference_rank,reference_rmse`
    /// with one row per run and one `mean` row per variant.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "group",
            "variant",
            "fusion",
            "integrate",
            "energy_loss",
            "seed",
            "rmse",
            "mae",
            "rank",
            "reference_rank",
            "reference_rmse",
        ])
        .expect("in-memory csv");
        for r in &self.results {
            let v = &r.variant;
            let group = match v.group {
                Group::Fusion => "fusion",
                Group::Decoder => "decoder",
            };
            let reference = v.reference_rmse.to_string();
            let mut row = |seed: String, rmse: f64, mae: f64, rank: String, reference_rank: String, reference: String| {
                w.write_record([
                    group.to_string(),
                    v.name.to_string(),
                    v.fusion.name().to_string(),
                    v.integrate.to_string(),
                    v.energy_loss.to_string(),
                    seed,
                    rmse.to_string(),
                    mae.to_string(),
                    rank,
                    reference_rank,
                    reference,
                ])
                .expect("in-memory csv");
            };
            for run in &r.runs {
                row(run.seed.to_string(), run.rmse, run.mae, String::new(), String::new(), String::new());
            }
            row("mean".into(), r.mean_rmse, r.mean_mae, r.rank.to_string(), v.reference_rank.to_string(), reference);
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

fn rank_groups(results: &mut [VariantResult]) {
    for group in [Group::Fusion, Group::Decoder] {
        let mut members: Vec<usize> = (0..results.len()).filter(|&i| results[i].variant.group == group).collect();
        members.sort_by(|&a, &b| results[a].mean_rmse.total_cmp(&results[b].mean_rmse));
        for (pos, &i) in members.iter().enumerate() {
            results[i].rank = pos + 1;
        }
    }
}

/// Trains every distinct configuration of [`VARIANTS`] once per seed on the
/// shared splits. Runs differ only in the fusion and decoder flags: data
/// order, epoch count and the initial values of shared parameters follow
/// the seed alone.
pub fn run_ablation(cfg: &RunConfig, train_set: &Preloaded, val_set: &Preloaded, out_dir: &Path) -> Result<(AblationReport, Vec<(String, Predictions)>)> {
    cfg.validate()?;
    let mut distinct: Vec<Variant> = Vec::new();
    for v in VARIANTS {
        if !distinct.iter().any(|d| d.key() == v.key()) {
            distinct.push(v);
        }
    }
    let mut finished: Vec<((FusionVariant, bool, bool), Vec<RunResult>)> = Vec::new();
    let mut traces = Vec::new();
    for v in &distinct {
        let mut runs = Vec::new();
        for &seed in &cfg.ablation_seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.fusion = v.fusion;
            run_cfg.integrate = v.integrate;
            run_cfg.energy_loss = v.energy_loss;
            let dir = out_dir.join("runs").join(format!("{}_s{seed}", v.run_name()));
            let mut outcome = train(&run_cfg, train_set, val_set, &dir)?;
            let preds = predict(&mut outcome.best, val_set)?;
            let (rmse, mae) = preds.metrics()?;
            if seed == cfg.ablation_seeds[0] {
                traces.push((v.run_name(), preds));
            }
            runs.push(RunResult {
                seed,
                rmse,
                mae,
                best_epoch: outcome.best_epoch,
            });
        }
        finished.push((v.key(), runs));
    }
    let mut results: Vec<VariantResult> = VARIANTS
        .iter()
        .map(|v| {
            let runs = finished.iter().find(|(k, _)| *k == v.key()).expect("every key trained").1.clone();
            let n = runs.len() as f64;
            VariantResult {
                variant: *v,
                mean_rmse: runs.iter().map(|r| r.rmse).sum::<f64>() / n,
                mean_mae: runs.iter().map(|r| r.mae).sum::<f64>() / n,
                runs,
                rank: 0,
            }
        })
        .collect();
    rank_groups(&mut results);
    Ok((AblationReport { results }, traces))
}

/// Predicted against true steering over the validation samples, one
/// polyline per trace plus the ground truth.
pub fn traces_svg(traces: &[(String, Predictions)], limit: usize) -> Result<String> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("no traces to plot".into()))?;
    let n = first.1.y.len().min(limit);
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples to plot".into()));
    }
    let (w, h, pad) = (900.0, 360.0, 40.0);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h / 2.0 - (h / 2.0 - pad) * v.clamp(-1.0, 1.0);
    let line = |values: &[f64]| {
        values[..n]
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#, h + 20.0 * (traces.len() as f64 + 1.0));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r##"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="#ccc"/>"##, h / 2.0, w - pad);
    let _ = writeln!(s, r#"<text x="{pad}" y="20">steering (normalized) over validation samples</text>"#);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="2" points="{}"/>"#, line(&first.1.y));
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" fill="black">ground truth</text>"#, h + 14.0);
    for (k, (name, p)) in traces.iter().enumerate() {
        if p.y_hat.len() < n {
            return Err(Error::InvalidArgument(format!("trace {name} has {} points, need {n}", p.y_hat.len())));
        }
        let c = colors[k % colors.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1" points="{}"/>"#, line(&p.y_hat));
        let _ = writeln!(s, r#"<text x="{pad}" y="{}" fill="{c}">{name}</text>"#, h + 14.0 + 20.0 * (k as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Runs the sweep on the configured data and writes `ablation.csv` and
/// `traces.svg` into the output directory.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let (train_set, val_set) = load_splits(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (report, traces) = run_ablation(cfg, &train_set, &val_set, &cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("ablation.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = cfg.out_dir.join("traces.svg");
    fs::write(&svg_path, traces_svg(&traces, 200)?).map_err(|e| Error::io(&svg_path, e))?;
    Ok(report)
}
