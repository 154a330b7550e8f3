//! Layout-sensitive linearization of line spans.
//!
//! Lines are grouped into rows by vertical center, placed on a character grid
//! whose column width comes from the page's average character density, and
//! vertical gaps between rows become blank lines. The output uses only the
//! normalized line texts plus spaces and newlines.

use serde::{Deserialize, Serialize};

use crate::geometry::{round_half_up, ImageDims};
use crate::span::GroundedSpan;
use crate::textnorm::normalize;

/// Grid constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Text2dConfig {
    /// Lines whose centers differ by at most this many median line heights
    /// share a row.
    pub row_merge_factor: f64,
    /// One blank line per this many median line heights of center gap.
    pub blank_line_factor: f64,
    pub max_blank_lines: usize,
    /// Characters per pixel when no line carries text.
    pub default_density: f64,
    pub default_line_height: f64,
}

impl Default for Text2dConfig {
    fn default() -> Self {
        Self {
            row_merge_factor: 0.5,
            blank_line_factor: 1.5,
            max_blank_lines: 3,
            default_density: 0.125,
            default_line_height: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub median_line_height: f64,
    /// Characters per pixel of box width.
    pub char_density: f64,
    pub chars_per_row: usize,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

pub fn estimate_layout_with(lines: &[GroundedSpan], dims: ImageDims, config: &Text2dConfig) -> LayoutStats {
    let mut heights: Vec<f64> = lines.iter().map(|l| l.bbox.height() as f64).collect();
    let median_line_height = median(&mut heights).unwrap_or(config.default_line_height);
    let (mut chars, mut width) = (0usize, 0i64);
    for line in lines {
        let n = normalize(&line.text).chars().count();
        if n > 0 {
            chars += n;
            width += line.bbox.width();
        }
    }
    let char_density = if chars > 0 {
        chars as f64 / width as f64
    } else {
        config.default_density
    };
    let chars_per_row = ((f64::from(dims.width) * char_density).ceil() as usize).max(1);
    LayoutStats {
        median_line_height,
        char_density,
        chars_per_row,
    }
}

pub fn estimate_layout(lines: &[GroundedSpan], dims: ImageDims) -> LayoutStats {
    estimate_layout_with(lines, dims, &Text2dConfig::default())
}

/// Group line indices into rows, top to bottom; each row is sorted left to
/// right by `x1`, ties by input index.
pub fn group_rows(lines: &[GroundedSpan], stats: &LayoutStats, config: &Text2dConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by(|&a, &b| {
        lines[a]
            .bbox
            .center_y()
            .total_cmp(&lines[b].bbox.center_y())
            .then(a.cmp(&b))
    });
    let tol = config.row_merge_factor * stats.median_line_height;
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut anchor = f64::NEG_INFINITY;
    for idx in order {
        let c = lines[idx].bbox.center_y();
        match rows.last_mut() {
            Some(row) if c - anchor <= tol => row.push(idx),
            _ => {
                anchor = c;
                rows.push(vec![idx]);
            }
        }
    }
    for row in &mut rows {
        row.sort_by_key(|&i| (lines[i].bbox.x1(), i));
    }
    rows
}

/// Indices of `lines` in 2D reading order.
pub fn order_lines_2d_with(lines: &[GroundedSpan], stats: &LayoutStats, config: &Text2dConfig) -> Vec<usize> {
    group_rows(lines, stats, config).into_iter().flatten().collect()
}

pub fn order_lines_2d(lines: &[GroundedSpan], stats: &LayoutStats) -> Vec<usize> {
    order_lines_2d_with(lines, stats, &Text2dConfig::default())
}

fn row_center(lines: &[GroundedSpan], row: &[usize]) -> f64 {
    row.iter().map(|&i| lines[i].bbox.center_y()).sum::<f64>() / row.len() as f64
}

pub fn render_text2d_with(lines: &[GroundedSpan], dims: ImageDims, config: &Text2dConfig) -> String {
    let texts: Vec<String> = lines.iter().map(|l| normalize(&l.text)).collect();
    let stats = estimate_layout_with(lines, dims, config);
    let rows = group_rows(lines, &stats, config);

    let mut out: Vec<String> = Vec::new();
    let mut prev_center: Option<f64> = None;
    for row in &rows {
        let visible: Vec<usize> = row.iter().copied().filter(|&i| !texts[i].is_empty()).collect();
        if visible.is_empty() {
            continue;
        }
        let center = row_center(lines, row);
        if let Some(prev) = prev_center {
            let step = config.blank_line_factor * stats.median_line_height;
            let blanks = ((center - prev) / step).floor().max(0.0) as usize;
            for _ in 0..blanks.min(config.max_blank_lines) {
                out.push(String::new());
            }
        }
        prev_center = Some(center);

        let mut line = String::new();
        let mut cursor = 0usize;
        for (k, &i) in visible.iter().enumerate() {
            let want = round_half_up(lines[i].bbox.x1() as f64 * stats.char_density).max(0.0) as usize;
            let min_col = if k == 0 { 0 } else { cursor + 1 };
            let col = want.max(min_col);
            line.extend(std::iter::repeat_n(' ', col - cursor));
            line.push_str(&texts[i]);
            cursor = col + texts[i].chars().count();
        }
        out.push(line.trim_end_matches(' ').to_string());
    }
    while out.last().is_some_and(|r| r.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

/// Render line spans as a text2d string with the default grid constants.
pub fn render_text2d(lines: &[GroundedSpan], dims: ImageDims) -> String {
    render_text2d_with(lines, dims, &Text2dConfig::default())
}
