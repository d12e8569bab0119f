//! SVG figures drawn from the CSV tables.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

/// One labelled polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(format!("plot: {e}"))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x0, x1) = padded(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = padded(ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Square grid with `grid[row][col]` in `[0, 1]`, rows along the y axis.
pub fn heatmap(path: &Path, title: &str, x_label: &str, y_label: &str, grid: &[Vec<f64>]) -> Result<()> {
    let n = grid.len();
    let root = SVGBackend::new(path, (560, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .x_labels(n + 1)
        .y_labels(n + 1)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(grid.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, &v)| {
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
                Rectangle::new([(c, r), (c + 1, r + 1)], RGBColor(shade, shade, 255).filled())
            })
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(grid.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, &v)| {
                Text::new(format!("{v:.2}"), (c, r + 1), ("sans-serif", 11).into_font().color(&BLACK))
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Header and rows of a plain comma-separated file (no quoting).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty table", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::Format(format!("{}: ragged row {bad:?}", path.display())));
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("table lacks column {name}")))
}

fn number(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("not a number: {s}")))
}

/// `y` against `x`, one series per distinct value of `group` (or a single
/// series when `group` is `None`), in first-seen order.
pub fn series_from_csv(csv: &Path, x: &str, y: &str, group: Option<&str>) -> Result<Vec<Series>> {
    let (header, rows) = read_csv(csv)?;
    let (xi, yi) = (column(&header, x)?, column(&header, y)?);
    let gi = group.map(|g| column(&header, g)).transpose()?;
    let mut out: Vec<Series> = Vec::new();
    for row in &rows {
        let label = gi.map_or_else(|| y.to_string(), |g| row[g].clone());
        let point = (number(&row[xi])?, number(&row[yi])?);
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                label,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

/// Square grid from a `b1,b2,value` table.
pub fn grid_from_csv(csv: &Path) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_csv(csv)?;
    let (r, c) = (column(&header, "b1")?, column(&header, "b2")?);
    let n = (rows.len() as f64).sqrt().round() as usize;
    if n * n != rows.len() {
        return Err(Error::Format(format!("{} rows do not form a square grid", rows.len())));
    }
    let mut grid = vec![vec![f64::NAN; n]; n];
    for row in &rows {
        let (i, j) = (number(&row[r])? as usize, number(&row[c])? as usize);
        if i >= n || j >= n {
            return Err(Error::Format(format!("cell ({i}, {j}) outside a {n}x{n} grid")));
        }
        grid[i][j] = number(&row[2])?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_render_from_tables() {
        let dir = std::env::temp_dir().join(format!("qnet-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let sweep = dir.join("sweep.csv");
        std::fs::write(&sweep, "policy,delta_t,drop_rate\njsq,1,0.05\njsq,2,0.1\nrandom,1,0.12\nrandom,2,0.13\n").unwrap();
        let series = series_from_csv(&sweep, "delta_t", "drop_rate", Some("policy")).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[1].points, vec![(1.0, 0.12), (2.0, 0.13)]);
        line_chart(&dir.join("sweep.svg"), "t", "x", "y", &series).unwrap();

        let heat = dir.join("heat.csv");
        let mut text = String::from("b1,b2,p_queue2\n");
        for i in 0..3 {
            for j in 0..3 {
                text.push_str(&format!("{i},{j},{}\n", (i + j) as f64 / 4.0));
            }
        }
        std::fs::write(&heat, text).unwrap();
        let grid = grid_from_csv(&heat).unwrap();
        assert_eq!(grid[2][1], 0.75);
        heatmap(&dir.join("heat.svg"), "h", "b2", "b1", &grid).unwrap();
        let svg = std::fs::read_to_string(dir.join("heat.svg")).unwrap();
        assert!(svg.contains("<svg"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
