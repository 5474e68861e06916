//! Threshold sweeps: rerun pseudo-label generation over a grid of delta or
//! objectness values and chart label quality as CSV plus an SVG line chart.

use crate::config::PipelineConfig;
use crate::manifest::Workspace;
use crate::stages;
use anyhow::{bail, Result};
use p3ovd::pseudolabel::{
    generate_pseudo_labels, Connectivity, PseudoLabelRecord, ScoreNormalization,
};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Delta,
    Objectness,
}

impl std::str::FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepParam::Delta),
            "objectness" => Ok(SweepParam::Objectness),
            _ => bail!("unknown sweep parameter '{s}' (expected delta|objectness)"),
        }
    }
}

pub struct SweepRow {
    pub value: f64,
    pub map_novel: f64,
    pub n_labels: usize,
}

/// Run the sweep; returns the rows and the paths of the emitted CSV and SVG.
pub fn run_sweep(
    cfg: &PipelineConfig,
    ws: &Workspace,
    tag: &str,
    param: SweepParam,
    values: &[f64],
) -> Result<(Vec<SweepRow>, PathBuf, PathBuf)> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    ws.ensure_dirs()?;
    let encoder = stages::load_encoder(ws)?;
    let bundle = stages::load_prompts(ws, tag)?;
    let train = stages::load_train(ws)?;
    let (rpn, _) = stages::load_or_train_rpn(cfg, ws)?;

    let vlm = bundle.vlm(&encoder);
    let categories = &train.categories;
    let keys = vlm.key_embeddings(categories)?;
    let plain = vlm.value_embeddings(categories)?;
    let normalization = if encoder.normalize {
        ScoreNormalization::MinMax
    } else {
        ScoreNormalization::None
    };

    // score maps and proposals are threshold-independent: compute once
    let mut score_maps = Vec::with_capacity(train.scenes.len());
    for scene in &train.scenes {
        score_maps.push(vlm.score_map_with(&scene.image, &keys, &plain)?);
    }
    let proposals = if cfg.label.oracle_proposals {
        let sealed = stages::load_train_sealed(ws)?;
        sealed
            .scenes
            .iter()
            .map(|scene| {
                let (h, w, _) = scene.image.pixels.dim();
                p3ovd::pseudolabel::rpn::oracle_proposals(
                    &scene.annotation.boxes,
                    (w as u32, h as u32),
                    cfg.label.oracle_jitter,
                    cfg.seed,
                    scene.image.id,
                )
            })
            .collect::<Vec<_>>()
    } else {
        train
            .scenes
            .iter()
            .map(|scene| {
                p3ovd::pseudolabel::rpn::rpn_propose(
                    &rpn,
                    &scene.image,
                    cfg.rpn.max_proposals,
                    cfg.rpn.nms_iou,
                )
            })
            .collect()
    };

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut thresholds = cfg.label.thresholds;
        match param {
            SweepParam::Delta => thresholds.delta = value,
            SweepParam::Objectness => thresholds.objectness_min = value,
        }
        thresholds.validate()?;

        let mut records = Vec::with_capacity(train.scenes.len());
        let mut n_labels = 0usize;
        for (scene, (s, props)) in train
            .scenes
            .iter()
            .zip(score_maps.iter().zip(&proposals))
        {
            let labels = generate_pseudo_labels(
                s,
                scene.image.id,
                props,
                &thresholds,
                categories,
                encoder.stride(),
                normalization,
                Connectivity::Four,
            )?;
            n_labels += labels.len();
            records.push(PseudoLabelRecord::from_labels(
                scene.image.id,
                &labels,
                thresholds,
                normalization,
            ));
        }
        let quality = stages::pseudo_label_quality(ws, &records)?;
        rows.push(SweepRow {
            value,
            map_novel: quality.map_novel,
            n_labels,
        });
    }

    let name = match param {
        SweepParam::Delta => "delta",
        SweepParam::Objectness => "objectness",
    };
    let csv_path = ws.sweep_dir().join(format!("sweep_{name}_{tag}.csv"));
    let mut csv = String::from("value,map_novel,n_labels\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{}\n", row.value, row.map_novel, row.n_labels));
    }
    std::fs::write(&csv_path, csv)?;

    let svg_path = ws.sweep_dir().join(format!("sweep_{name}_{tag}.svg"));
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, r.map_novel)).collect();
    let svg = line_chart_svg(
        &format!("pseudo-label novel mAP vs {name}"),
        name,
        "mAP@0.5",
        &points,
    );
    std::fs::write(&svg_path, svg)?;
    Ok((rows, csv_path, svg_path))
}

/// Minimal standalone SVG line chart.
pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 50.0, 60.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (y0, mut y1) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = 1.0;
    }
    y1 *= 1.05;

    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut path = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        path.push_str(&format!(
            "{}{:.2},{:.2} ",
            if i == 0 { "M" } else { "L" },
            px(x),
            py(y)
        ));
    }
    let mut markers = String::new();
    for &(x, y) in points {
        markers.push_str(&format!(
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#c0392b"/>"##,
            px(x),
            py(y)
        ));
    }
    let mut ticks = String::new();
    for k in 0..=4 {
        let tx = x0 + (x1 - x0) * k as f64 / 4.0;
        let ty = y0 + (y1 - y0) * k as f64 / 4.0;
        ticks.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.3}</text>"#,
            px(tx),
            mt + ph + 18.0,
            tx
        ));
        ticks.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.3}</text>"#,
            ml - 6.0,
            py(ty) + 4.0,
            ty
        ));
    }
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{tx}" y="28" font-size="15" text-anchor="middle" font-family="sans-serif">{title}</text>
<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>
<path d="{path}" fill="none" stroke="#2c3e50" stroke-width="2"/>
{markers}
{ticks}
<text x="{tx}" y="{xl_y}" font-size="12" text-anchor="middle">{xlabel}</text>
<text x="16" y="{yl_y}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {yl_y})">{ylabel}</text>
</svg>
"##,
        tx = ml + pw / 2.0,
        xl_y = h - 16.0,
        yl_y = mt + ph / 2.0,
    )
}
