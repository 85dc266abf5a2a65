//! Minimal static plot emission (PNG via the image crate, SVG by hand).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Png,
    Svg,
}

impl std::str::FromStr for PlotFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(PlotFormat::Png),
            "svg" => Ok(PlotFormat::Svg),
            other => Err(Error::Config(format!("unknown plot format {other}"))),
        }
    }
}

impl PlotFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            PlotFormat::Png => "png",
            PlotFormat::Svg => "svg",
        }
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Three-stop blue -> green -> yellow colormap over [0, 1].
fn colormap(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t) as u8;
    if v < 0.5 {
        let t = v * 2.0;
        (lerp(35.0, 32.0, t), lerp(23.0, 144.0, t), lerp(107.0, 140.0, t))
    } else {
        let t = (v - 0.5) * 2.0;
        (lerp(32.0, 253.0, t), lerp(144.0, 231.0, t), lerp(140.0, 37.0, t))
    }
}

/// Renders a matrix as a cell heatmap scaled to [vmin, vmax].
pub fn heatmap_plot(
    path: &Path,
    values: &[Vec<f64>],
    vmin: f64,
    vmax: f64,
    format: PlotFormat,
) -> Result<()> {
    if values.is_empty() || values[0].is_empty() {
        return Err(Error::Config("heatmap needs a non-empty matrix".into()));
    }
    let rows = values.len();
    let cols = values[0].len();
    let scale = (512 / cols.max(rows)).clamp(4, 32);
    let norm = |v: f64| {
        if vmax > vmin {
            (v - vmin) / (vmax - vmin)
        } else {
            0.5
        }
    };
    match format {
        PlotFormat::Png => {
            let mut img = image::RgbImage::new((cols * scale) as u32, (rows * scale) as u32);
            for (r, row) in values.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let (rr, gg, bb) = colormap(norm(*v));
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(
                                (c * scale + dx) as u32,
                                (r * scale + dy) as u32,
                                image::Rgb([rr, gg, bb]),
                            );
                        }
                    }
                }
            }
            img.save(path).map_err(|e| Error::Format(e.to_string()))?;
        }
        PlotFormat::Svg => {
            let mut svg = String::new();
            svg.push_str(&format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
                cols * scale,
                rows * scale
            ));
            for (r, row) in values.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let (rr, gg, bb) = colormap(norm(*v));
                    svg.push_str(&format!(
                        "<rect x=\"{}\" y=\"{}\" width=\"{scale}\" height=\"{scale}\" fill=\"rgb({rr},{gg},{bb})\"/>\n",
                        c * scale,
                        r * scale
                    ));
                }
            }
            svg.push_str("</svg>\n");
            std::fs::write(path, svg)?;
        }
    }
    Ok(())
}

/// Renders one or more line series on shared axes.
pub fn line_plot(path: &Path, series: &[Series], format: PlotFormat) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("line plot needs at least one point".into()));
    }
    let (w, h) = (640usize, 400usize);
    let margin = 40.0;
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for (x, y) in &s.points {
            xmin = xmin.min(*x);
            xmax = xmax.max(*x);
            ymin = ymin.min(*y);
            ymax = ymax.max(*y);
        }
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let to_px = |x: f64, y: f64| {
        let px = margin + (x - xmin) / (xmax - xmin) * (w as f64 - 2.0 * margin);
        let py = h as f64 - margin - (y - ymin) / (ymax - ymin) * (h as f64 - 2.0 * margin);
        (px, py)
    };
    let palette = [(220u8, 60u8, 40u8), (40, 90, 200), (30, 150, 60), (150, 60, 180)];
    match format {
        PlotFormat::Svg => {
            let mut svg = String::new();
            svg.push_str(&format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" style=\"background:white\">\n"
            ));
            svg.push_str(&format!(
                "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
                w as f64 - 2.0 * margin,
                h as f64 - 2.0 * margin
            ));
            for (i, s) in series.iter().enumerate() {
                let (r, g, b) = palette[i % palette.len()];
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .map(|(x, y)| {
                        let (px, py) = to_px(*x, *y);
                        format!("{px:.1},{py:.1}")
                    })
                    .collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"rgb({r},{g},{b})\" stroke-width=\"1.5\"/>\n",
                    pts.join(" ")
                ));
                svg.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" fill=\"rgb({r},{g},{b})\" font-size=\"12\">{}</text>\n",
                    margin + 6.0,
                    margin + 14.0 * (i + 1) as f64,
                    s.label
                ));
            }
            svg.push_str("</svg>\n");
            std::fs::write(path, svg)?;
        }
        PlotFormat::Png => {
            let mut img = image::RgbImage::from_pixel(
                w as u32,
                h as u32,
                image::Rgb([255, 255, 255]),
            );
            let mut draw_line = |x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]| {
                let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
                for i in 0..=steps {
                    let t = i as f64 / steps as f64;
                    let x = (x0 + (x1 - x0) * t).round() as i64;
                    let y = (y0 + (y1 - y0) * t).round() as i64;
                    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                        img.put_pixel(x as u32, y as u32, image::Rgb(color));
                    }
                }
            };
            // Axis box.
            let (x0, y0) = (margin, margin);
            let (x1, y1) = (w as f64 - margin, h as f64 - margin);
            draw_line(x0, y0, x1, y0, [0, 0, 0]);
            draw_line(x0, y1, x1, y1, [0, 0, 0]);
            draw_line(x0, y0, x0, y1, [0, 0, 0]);
            draw_line(x1, y0, x1, y1, [0, 0, 0]);
            for (i, s) in series.iter().enumerate() {
                let (r, g, b) = palette[i % palette.len()];
                for pair in s.points.windows(2) {
                    let (px0, py0) = to_px(pair[0].0, pair[0].1);
                    let (px1, py1) = to_px(pair[1].0, pair[1].1);
                    draw_line(px0, py0, px1, py1, [r, g, b]);
                }
            }
            img.save(path).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emits_heatmaps_and_curves_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![vec![0.0, 0.5, 1.0], vec![1.0, 0.2, 0.7]];
        for fmt in [PlotFormat::Png, PlotFormat::Svg] {
            let p = dir.path().join(format!("hm.{}", fmt.extension()));
            heatmap_plot(&p, &values, 0.0, 1.0, fmt).unwrap();
            assert!(p.metadata().unwrap().len() > 0);

            let series = vec![Series {
                label: "loss".into(),
                points: (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
            }];
            let p = dir.path().join(format!("curve.{}", fmt.extension()));
            line_plot(&p, &series, fmt).unwrap();
            assert!(p.metadata().unwrap().len() > 0);
        }
    }

    #[test]
    fn parses_format_names() {
        assert_eq!("png".parse::<PlotFormat>().unwrap(), PlotFormat::Png);
        assert_eq!("svg".parse::<PlotFormat>().unwrap(), PlotFormat::Svg);
        assert!("gif".parse::<PlotFormat>().is_err());
    }
}
