//! Deterministic synthetic tables: random grids with merged cells, rendered
//! as bordered cells with shaded headers and text-like bars.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{parse_tree, NodeKind, TableNode, TableTree, TokenSeq, MAX_SPAN};
use crate::imageio::save_png;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    /// Chance that a free cell starts a merged region.
    pub span_prob: f64,
    pub max_span: u8,
    /// Rows placed in `<thead>`; 0 emits rows without section wrappers.
    pub header_rows: usize,
    pub height: usize,
    pub width: usize,
    pub header_shading: bool,
    pub content_bars: bool,
    /// Share of generated samples labeled `val`.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_rows: 2,
            max_rows: 6,
            min_cols: 2,
            max_cols: 5,
            span_prob: 0.08,
            max_span: MAX_SPAN,
            header_rows: 1,
            height: 64,
            width: 64,
            header_shading: true,
            content_bars: true,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.span_prob) {
            return bad("span_prob must lie in [0, 1]");
        }
        if self.min_rows == 0 || self.min_cols == 0 || self.min_rows > self.max_rows || self.min_cols > self.max_cols {
            return bad("row and column ranges must be non-empty and start at 1 or more");
        }
        if !(2..=MAX_SPAN).contains(&self.max_span) {
            return bad("max_span must lie in 2..=10");
        }
        if self.header_rows >= self.min_rows {
            return bad("header_rows must leave at least one body row");
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1]");
        }
        if self.height == 0 || self.width == 0 {
            return bad("resolution must be positive");
        }
        Ok(())
    }

    pub fn validate_for_patch(&self, patch: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::IndivisibleImage { height: self.height, width: self.width, patch });
        }
        Ok(())
    }
}

/// Random table tree and its framed token sequence.
pub fn generate_table(config: &SynthConfig, rng: &mut impl Rng) -> (TableTree, TokenSeq) {
    let rows = rng.gen_range(config.min_rows..=config.max_rows);
    let cols = rng.gen_range(config.min_cols..=config.max_cols);
    let header = config.header_rows.min(rows - 1);
    let mut occupied = vec![vec![false; cols]; rows];
    let mut tr_nodes = Vec::with_capacity(rows);
    for r in 0..rows {
        let section_end = if r < header { header } else { rows };
        let mut cells = Vec::new();
        let mut c = 0;
        while c < cols {
            if occupied[r][c] {
                c += 1;
                continue;
            }
            let free_run = (c..cols).take_while(|&x| !occupied[r][x]).count();
            let rmax = (section_end - r).min(config.max_span as usize);
            let cmax = free_run.min(config.max_span as usize);
            let (mut rs, mut cs) = (1, 1);
            if (rmax > 1 || cmax > 1) && rng.gen_bool(config.span_prob) {
                if rmax > 1 && rng.gen_bool(0.5) {
                    rs = rng.gen_range(2..=rmax);
                }
                if cmax > 1 && rng.gen_bool(0.5) {
                    cs = rng.gen_range(2..=cmax);
                }
                if rs == 1 && cs == 1 {
                    if cmax > 1 && (rmax == 1 || rng.gen_bool(0.5)) {
                        cs = rng.gen_range(2..=cmax);
                    } else {
                        rs = rng.gen_range(2..=rmax);
                    }
                }
            }
            for row in occupied.iter_mut().skip(r).take(rs) {
                row[c..c + cs].iter_mut().for_each(|o| *o = true);
            }
            cells.push(TableNode::td_span(rs as u8, cs as u8));
            c += cs;
        }
        tr_nodes.push(TableNode::with_children(NodeKind::Tr, cells));
    }
    let children = if header == 0 {
        tr_nodes
    } else {
        let body = tr_nodes.split_off(header);
        vec![
            TableNode::with_children(NodeKind::Thead, tr_nodes),
            TableNode::with_children(NodeKind::Tbody, body),
        ]
    };
    let tree = TableTree::new(children);
    let tokens = TokenSeq::frame(&tree.to_tokens());
    (tree, tokens)
}

/// A cell placed on the row/column grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBox {
    pub row: usize,
    pub col: usize,
    pub rowspan: usize,
    pub colspan: usize,
    pub header: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellBox>,
}

/// Places cells with the usual HTML rule: each cell takes the first column
/// not already covered by a rowspan from above.
pub fn layout(tree: &TableTree) -> GridLayout {
    let mut rows: Vec<(&TableNode, bool)> = Vec::new();
    fn collect<'a>(n: &'a TableNode, header: bool, out: &mut Vec<(&'a TableNode, bool)>) {
        match n.kind {
            NodeKind::Tr => out.push((n, header)),
            NodeKind::Td => {}
            _ => {
                let h = header || n.kind == NodeKind::Thead;
                n.children.iter().for_each(|c| collect(c, h, out));
            }
        }
    }
    collect(&tree.root, false, &mut rows);
    let mut covered: Vec<Vec<bool>> = Vec::new();
    let mut cells = Vec::new();
    let mut width = 0;
    for (r, (tr, header)) in rows.iter().enumerate() {
        let mut c = 0;
        for td in &tr.children {
            let (_, rs, cs) = td.label();
            let (rs, cs) = (rs as usize, cs as usize);
            while covered.get(r).is_some_and(|row| row.get(c).copied().unwrap_or(false)) {
                c += 1;
            }
            for y in r..r + rs {
                if covered.len() <= y {
                    covered.push(Vec::new());
                }
                let row = &mut covered[y];
                if row.len() < c + cs {
                    row.resize(c + cs, false);
                }
                row[c..c + cs].iter_mut().for_each(|o| *o = true);
            }
            cells.push(CellBox { row: r, col: c, rowspan: rs, colspan: cs, header: *header });
            c += cs;
            width = width.max(c);
        }
    }
    let height = cells.iter().map(|b| b.row + b.rowspan).max().unwrap_or(0).max(rows.len());
    GridLayout { rows: height, cols: width, cells }
}

const MARGIN: usize = 1;
const MIN_CELL: usize = 4;

fn fnv(values: &[usize]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &v in values {
        for b in (v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Rasterizes a table tree to an `[H, W, 3]` image with values in `[0, 1]`.
pub fn render(tree: &TableTree, config: &SynthConfig) -> Result<Tensor<f32>> {
    let (h, w) = (config.height, config.width);
    let grid = layout(tree);
    let mut img = Tensor::full([h, w, 3], 1.0f32);
    if grid.rows == 0 || grid.cols == 0 {
        return Ok(img);
    }
    let span_y = h.saturating_sub(2 * MARGIN + 1);
    let span_x = w.saturating_sub(2 * MARGIN + 1);
    if span_y / grid.rows < MIN_CELL || span_x / grid.cols < MIN_CELL {
        return Err(Error::GridOverflow { rows: grid.rows, cols: grid.cols, height: h, width: w });
    }
    let ey = |i: usize| MARGIN + i * span_y / grid.rows;
    let ex = |j: usize| MARGIN + j * span_x / grid.cols;
    let put = |img: &mut Tensor<f32>, y: usize, x: usize, rgb: [f32; 3]| {
        let o = (y * w + x) * 3;
        img.data_mut()[o..o + 3].copy_from_slice(&rgb);
    };
    for (k, cell) in grid.cells.iter().enumerate() {
        let (y0, y1) = (ey(cell.row), ey(cell.row + cell.rowspan));
        let (x0, x1) = (ex(cell.col), ex(cell.col + cell.colspan));
        if cell.header && config.header_shading {
            for y in y0 + 1..y1 {
                for x in x0 + 1..x1 {
                    put(&mut img, y, x, [0.78, 0.84, 0.94]);
                }
            }
        }
        if config.content_bars {
            let hash = fnv(&[k, cell.row, cell.col, cell.rowspan, cell.colspan]);
            let inner = x1 - x0 - 1;
            let len = (inner * (3 + (hash % 6) as usize) / 10).max(1);
            let start = x0 + 1 + (inner - len) / 2;
            let mid = (y0 + y1) / 2;
            let shade = if cell.header { 0.15 } else { 0.35 };
            for x in start..start + len {
                put(&mut img, mid, x, [shade; 3]);
            }
        }
        for x in x0..=x1 {
            put(&mut img, y0, x, [0.0; 3]);
            put(&mut img, y1, x, [0.0; 3]);
        }
        for y in y0..=y1 {
            put(&mut img, y, x0, [0.0; 3]);
            put(&mut img, y, x1, [0.0; 3]);
        }
    }
    Ok(img)
}

/// Per-sample generator seed, independent of generation order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv(&[seed as usize, index, 0x7ab1e]))
}

/// Generates one sample, redrawing (with a fresh derived seed) if the grid
/// does not fit the resolution.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<(TableTree, TokenSeq, Tensor<f32>)> {
    for attempt in 0..64 {
        let mut rng = sample_rng(config.seed, index.wrapping_add(attempt << 48));
        let (tree, tokens) = generate_table(config, &mut rng);
        match render(&tree, config) {
            Ok(img) => return Ok((tree, tokens, img)),
            Err(Error::GridOverflow { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let (tree, _) = generate_table(config, &mut sample_rng(config.seed, index));
    let g = layout(&tree);
    Err(Error::GridOverflow { rows: g.rows, cols: g.cols, height: config.height, width: config.width })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureTokens {
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HtmlAnnotation {
    pub structure: StructureTokens,
}

/// One line of `labels.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRecord {
    pub filename: String,
    pub split: Split,
    pub html: HtmlAnnotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub simple: usize,
    pub complex: usize,
}

/// Writes `images/*.png` and `labels.jsonl` under `dir`. A seeded subset of
/// `val_fraction · n` samples forms the validation split.
pub fn build_dataset(dir: &Path, n: usize, config: &SynthConfig) -> Result<DatasetSummary> {
    config.validate()?;
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5b17));
    let mut is_val = vec![false; n];
    for &i in order.iter().take((n as f64 * config.val_fraction).round() as usize) {
        is_val[i] = true;
    }
    let labels_path = dir.join("labels.jsonl");
    let mut out = String::new();
    let mut summary = DatasetSummary { total: n, train: 0, val: 0, simple: 0, complex: 0 };
    for i in 0..n {
        let (tree, tokens, img) = generate_sample(config, i)?;
        let filename = format!("{i:06}.png");
        save_png(&img, &images.join(&filename))?;
        let split = if is_val[i] { Split::Val } else { Split::Train };
        match split {
            Split::Train => summary.train += 1,
            Split::Val => summary.val += 1,
        }
        match crate::grammar::classify(&tree) {
            crate::grammar::TableClass::Simple => summary.simple += 1,
            crate::grammar::TableClass::Complex => summary.complex += 1,
        }
        let record = LabelRecord {
            filename,
            split,
            html: HtmlAnnotation { structure: StructureTokens { tokens: TokenSeq::unframed(tokens.body()).to_strings() } },
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    let mut f = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&labels_path, e))?;
    Ok(summary)
}

/// Round-trip check used by tests and the `synth` command.
pub fn tokens_match_tree(tree: &TableTree, tokens: &TokenSeq) -> bool {
    parse_tree(tokens).is_ok_and(|t| &t == tree)
}
