use std::fs;

use anyhow::{Context, Result};

use crate::svg::{line_chart, Axis, Chart};
use crate::{PlotArgs, PlotKind, Usage};

/// Smallest FPIR drawn on the log axis when the data offer no positive value.
const FPIR_FLOOR: f64 = 1e-4;

fn parse_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Usage("empty CSV".into()))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Usage(format!("line {}: non-numeric value in {l:?}", i + 2)))?;
            if row.len() != header.len() {
                return Err(Usage(format!("line {}: expected {} columns", i + 2, header.len())));
            }
            Ok(row)
        })
        .collect::<std::result::Result<Vec<_>, Usage>>()?;
    Ok((header, rows))
}

pub fn render(text: &str, kind: PlotKind, title: Option<&str>) -> Result<String> {
    let (header, rows) = parse_rows(text)?;
    let kind = match kind {
        PlotKind::Auto if header == ["rank", "recall"] => PlotKind::Cmc,
        PlotKind::Auto if header == ["threshold", "fpir", "fnir"] => PlotKind::Det,
        PlotKind::Auto => {
            return Err(Usage(format!("unrecognized CSV header {header:?}; pass --kind cmc or --kind det")).into())
        }
        k => k,
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Usage(format!("CSV lacks a {name} column")))
    };
    if rows.is_empty() {
        return Err(Usage("CSV has no data rows".into()).into());
    }
    let chart = match kind {
        PlotKind::Cmc => {
            let (r, v) = (col("rank")?, col("recall")?);
            let points: Vec<(f64, f64)> = rows.iter().map(|row| (row[r], row[v])).collect();
            let max_rank = points.iter().map(|p| p.0).fold(1.0, f64::max);
            Chart {
                title: title.unwrap_or("CMC").to_string(),
                x_label: "rank".into(),
                y_label: "recall".into(),
                x_axis: Axis::Linear { min: 1.0, max: max_rank.max(2.0) },
                y_axis: Axis::Linear { min: 0.0, max: 1.0 },
                points,
            }
        }
        _ => {
            let (fp, fn_) = (col("fpir")?, col("fnir")?);
            let floor = rows
                .iter()
                .map(|row| row[fp])
                .filter(|&v| v > 0.0)
                .fold(f64::INFINITY, f64::min);
            let floor = if floor.is_finite() { floor / 10.0 } else { FPIR_FLOOR };
            Chart {
                title: title.unwrap_or("DET").to_string(),
                x_label: "FPIR".into(),
                y_label: "FNIR".into(),
                x_axis: Axis::Log10 { min: floor, max: 1.0 },
                y_axis: Axis::Linear { min: 0.0, max: 1.0 },
                points: rows.iter().map(|row| (row[fp].max(floor), row[fn_])).collect(),
            }
        }
    };
    Ok(line_chart(&chart))
}

pub fn run(a: PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let svg = render(&text, a.kind, a.title.as_deref())?;
    fs::write(&a.output, svg).with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote {}", a.output.display());
    Ok(())
}
