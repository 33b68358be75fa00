//! Ablation harness: trains and evaluates the five component
//! configurations in a fixed order and renders the comparison table.
//!
//! A row that fails to train or evaluate is marked and the remaining
//! rows still run. Published scores ride along as a quoted reference
//! column, never as something this code claims to reproduce.

use crate::data::DatasetHandle;
use crate::error::Result;
use crate::metrics::{evaluate, REFERENCE_NOTE};
use crate::model::{init_model, ModelDescription};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy)]
pub struct AblationVariant {
    pub label: &'static str,
    pub enable_cif: bool,
    pub enable_ab: bool,
    pub enable_ftb: bool,
    /// Published mIoU / Dice percentages for this component mix.
    pub reference_miou_pct: f64,
    pub reference_dice_pct: f64,
}

pub const ABLATION_VARIANTS: [AblationVariant; 5] = [
    AblationVariant {
        label: "No.1",
        enable_cif: false,
        enable_ab: false,
        enable_ftb: false,
        reference_miou_pct: 50.4,
        reference_dice_pct: 54.7,
    },
    AblationVariant {
        label: "No.2",
        enable_cif: true,
        enable_ab: false,
        enable_ftb: false,
        reference_miou_pct: 58.1,
        reference_dice_pct: 61.3,
    },
    AblationVariant {
        label: "No.3",
        enable_cif: true,
        enable_ab: true,
        enable_ftb: false,
        reference_miou_pct: 68.5,
        reference_dice_pct: 73.8,
    },
    AblationVariant {
        label: "No.4",
        enable_cif: true,
        enable_ab: false,
        enable_ftb: true,
        reference_miou_pct: 69.7,
        reference_dice_pct: 74.1,
    },
    AblationVariant {
        label: "Ours",
        enable_cif: true,
        enable_ab: true,
        enable_ftb: true,
        reference_miou_pct: 80.8,
        reference_dice_pct: 86.2,
    },
];

impl AblationVariant {
    pub fn components(&self) -> String {
        let mut parts = vec!["backbone"];
        if self.enable_cif {
            parts.push("cif");
        }
        if self.enable_ab {
            parts.push("ab");
        }
        if self.enable_ftb {
            parts.push("ftb");
        }
        parts.join("+")
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        config.model =
            config
                .model
                .with_toggles(self.enable_cif, self.enable_ab, self.enable_ftb);
        config
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub label: String,
    pub components: String,
    pub enable_cif: bool,
    pub enable_ab: bool,
    pub enable_ftb: bool,
    pub architecture: ModelDescription,
    pub miou_pct: Option<f64>,
    pub dice_pct: Option<f64>,
    pub error: Option<String>,
    pub reference_miou_pct: f64,
    pub reference_dice_pct: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationReport {
    pub base_config: TrainConfig,
    pub threshold: f64,
    pub reference_note: String,
    pub rows: Vec<AblationRow>,
}

fn run_row(
    variant: &AblationVariant,
    base: &TrainConfig,
    train_data: &DatasetHandle,
    test_data: &DatasetHandle,
    threshold: f64,
) -> Result<(f64, f64)> {
    let config = variant.apply(base);
    let result = train::<f32>(&config, train_data, None)?;
    let report = evaluate(&result.checkpoint, test_data, threshold)?;
    Ok((
        100.0 * report.aggregate.miou,
        100.0 * report.aggregate.dice,
    ))
}

/// Train and score all five variants. Per-row failures land in the
/// row's `error` field; the report itself always comes back.
pub fn run_ablation(
    base: &TrainConfig,
    train_data: &DatasetHandle,
    test_data: &DatasetHandle,
    threshold: f64,
    mut progress: impl FnMut(&str),
) -> AblationReport {
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for variant in &ABLATION_VARIANTS {
        progress(variant.label);
        let config = variant.apply(base);
        // describe the architecture even if training later fails
        let architecture = match init_model::<f32>(&config.model, config.seed) {
            Ok((store, net)) => net.describe(&store),
            Err(e) => {
                rows.push(AblationRow {
                    label: variant.label.to_string(),
                    components: variant.components(),
                    enable_cif: variant.enable_cif,
                    enable_ab: variant.enable_ab,
                    enable_ftb: variant.enable_ftb,
                    architecture: ModelDescription {
                        enable_cif: variant.enable_cif,
                        enable_ab: variant.enable_ab,
                        enable_ftb: variant.enable_ftb,
                        params_by_component: Default::default(),
                        total_params: 0,
                    },
                    miou_pct: None,
                    dice_pct: None,
                    error: Some(e.to_string()),
                    reference_miou_pct: variant.reference_miou_pct,
                    reference_dice_pct: variant.reference_dice_pct,
                });
                continue;
            }
        };
        let (miou_pct, dice_pct, error) =
            match run_row(variant, base, train_data, test_data, threshold) {
                Ok((m, d)) => (Some(m), Some(d), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
        rows.push(AblationRow {
            label: variant.label.to_string(),
            components: variant.components(),
            enable_cif: variant.enable_cif,
            enable_ab: variant.enable_ab,
            enable_ftb: variant.enable_ftb,
            architecture,
            miou_pct,
            dice_pct,
            error,
            reference_miou_pct: variant.reference_miou_pct,
            reference_dice_pct: variant.reference_dice_pct,
        });
    }
    AblationReport {
        base_config: base.clone(),
        threshold,
        reference_note: REFERENCE_NOTE.to_string(),
        rows,
    }
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let headers = ["Row", "Components", "mIoU\u{2191}", "Dice\u{2191}", "Ref mIoU", "Ref Dice"];
        let fmt_score = |v: Option<f64>, err: &Option<String>| match v {
            Some(x) => format!("{x:.1}"),
            None => match err {
                Some(_) => "failed".to_string(),
                None => "-".to_string(),
            },
        };
        let mut cells: Vec<[String; 6]> = Vec::new();
        for r in &self.rows {
            cells.push([
                r.label.clone(),
                r.components.clone(),
                fmt_score(r.miou_pct, &r.error),
                fmt_score(r.dice_pct, &r.error),
                format!("{:.1}", r.reference_miou_pct),
                format!("{:.1}", r.reference_dice_pct),
            ]);
        }
        let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (i, c) in row.iter().enumerate() {
                widths[i] = widths[i].max(c.chars().count());
            }
        }
        let mut out = String::new();
        let pad = |s: &str, w: usize| {
            let fill = w - s.chars().count();
            format!("{s}{}", " ".repeat(fill))
        };
        out.push_str(
            &headers
                .iter()
                .enumerate()
                .map(|(i, h)| pad(h, widths[i]))
                .collect::<Vec<_>>()
                .join("  "),
        );
        out.push('\n');
        for row in &cells {
            out.push_str(
                &row.iter()
                    .enumerate()
                    .map(|(i, c)| pad(c, widths[i]))
                    .collect::<Vec<_>>()
                    .join("  "),
            );
            out.push('\n');
        }
        out.push_str(&format!("reference columns: {}\n", self.reference_note));
        for r in &self.rows {
            if let Some(e) = &r.error {
                out.push_str(&format!("{} failed: {e}\n", r.label));
            }
        }
        out
    }
}
