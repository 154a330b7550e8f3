//! Seeded synthetic pages: one or two columns of non-overlapping lines with
//! random words, grouped into paragraphs, with word boxes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{BBox, ImageDims};
use crate::span::GroundedSpan;
use crate::taskgen::{derive_seed, PageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub min_lines: usize,
    pub max_lines: usize,
    pub two_column_prob: f64,
    /// Chance that a line starts a new paragraph.
    pub paragraph_break_prob: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            min_lines: 3,
            max_lines: 24,
            two_column_prob: 0.35,
            paragraph_break_prob: 0.25,
        }
    }
}

const GLYPHS: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's', 't', 'u', 'v', 'w',
    'x', 'y', 'z', 'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T',
    'U', 'V', 'W', 'X', 'Y', 'Z', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '.', ',', ':', '-', '$', '%', 'é',
    'ß',
];

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..=8);
    (0..len).map(|_| *GLYPHS.choose(rng).expect("glyphs")).collect()
}

struct Column {
    x: i64,
    width: i64,
}

fn make_line(rng: &mut ChaCha8Rng, col: &Column, y: i64, cw: i64, lh: i64) -> (GroundedSpan, Vec<GroundedSpan>) {
    let indent = rng.gen_range(0..=3) * cw;
    let room = ((col.width - indent) / cw).max(1) as usize;
    let target = rng.gen_range(1..=6);
    let mut words: Vec<String> = Vec::new();
    let mut used = 0usize;
    for _ in 0..target {
        let mut w = random_word(rng);
        let sep = usize::from(!words.is_empty());
        let avail = room.saturating_sub(used + sep);
        if avail == 0 {
            break;
        }
        if w.chars().count() > avail {
            w = w.chars().take(avail).collect();
        }
        used += sep + w.chars().count();
        words.push(w);
    }
    let x1 = col.x + indent;
    let mut word_spans = Vec::with_capacity(words.len());
    let mut offset = 0i64;
    for w in &words {
        let n = w.chars().count() as i64;
        let b = BBox::new(x1 + offset * cw, y, x1 + (offset + n) * cw, y + lh).expect("positive word box");
        word_spans.push(GroundedSpan::new(w.clone(), b));
        offset += n + 1;
    }
    let text = words.join(" ");
    let b = BBox::new(x1, y, x1 + used as i64 * cw, y + lh).expect("positive line box");
    (GroundedSpan::new(text, b), word_spans)
}

fn hull(spans: &[GroundedSpan]) -> BBox {
    spans[1..].iter().fold(spans[0].bbox, |acc, s| acc.union_hull(&s.bbox))
}

/// One synthetic page. Lines never overlap; paragraphs are runs of
/// consecutive lines within a column.
pub fn synth_page(id: &str, seed: u64, config: &FixtureConfig) -> PageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width: u32 = rng.gen_range(400..=1200);
    let height: u32 = rng.gen_range(300..=1400);
    let dims = ImageDims::new(width, height).expect("positive dims");
    let cw: i64 = rng.gen_range(5..=10);
    let lh: i64 = rng.gen_range(10..=20);
    let margin = rng.gen_range(10..=40);
    let two = rng.gen_bool(config.two_column_prob);
    let usable = i64::from(width) - 2 * margin;
    let columns: Vec<Column> = if two {
        let gutter = 3 * cw;
        let w = (usable - gutter) / 2;
        vec![
            Column { x: margin, width: w },
            Column {
                x: margin + w + gutter,
                width: w,
            },
        ]
    } else {
        vec![Column {
            x: margin,
            width: usable,
        }]
    };
    let n_lines = rng.gen_range(config.min_lines..=config.max_lines.max(config.min_lines));
    let bottom = i64::from(height) - margin;

    let mut lines = Vec::new();
    let mut words = Vec::new();
    let mut paragraphs = Vec::new();
    let per_col = n_lines.div_ceil(columns.len());
    for col in &columns {
        let mut y = margin + rng.gen_range(0..=lh);
        let mut current: Vec<GroundedSpan> = Vec::new();
        for _ in 0..per_col {
            if lines.len() == n_lines || y + lh > bottom {
                break;
            }
            if !current.is_empty() && rng.gen_bool(config.paragraph_break_prob) {
                paragraphs.push(paragraph(&current));
                current.clear();
                y += lh;
                if y + lh > bottom {
                    break;
                }
            }
            let (line, ws) = make_line(&mut rng, col, y, cw, lh);
            current.push(line.clone());
            lines.push(line);
            words.extend(ws);
            y += lh + rng.gen_range(2..=lh / 2 + 2);
        }
        if !current.is_empty() {
            paragraphs.push(paragraph(&current));
        }
    }
    PageRecord {
        id: id.to_string(),
        dims,
        lines,
        paragraphs: Some(paragraphs),
        words: Some(words),
        dataset: Some(
            if two {
                "synthetic_two_column"
            } else {
                "synthetic_one_column"
            }
            .to_string(),
        ),
    }
}

fn paragraph(lines: &[GroundedSpan]) -> GroundedSpan {
    let text = lines.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join(" ");
    GroundedSpan::new(text, hull(lines))
}

pub fn page_id(index: usize) -> String {
    format!("synth-{index:06}")
}

/// `n` pages; page `i` depends only on `(seed, i)`.
pub fn synth_corpus(seed: u64, n: usize, config: &FixtureConfig, exec: Execution) -> Vec<PageRecord> {
    let ids: Vec<String> = (0..n).map(page_id).collect();
    exec.map(&ids, |id| synth_page(id, derive_seed(seed, id), config))
}
