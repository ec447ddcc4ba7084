//! DRAM geometry, vulnerable-cell templates and the double-sided hammering
//! flip rule.
//!
//! Banks and channels are flattened into one linear array of rows; only row
//! adjacency matters for the leak. A row holds `pages_per_row` pages laid side
//! by side, so bit `k` of page slot `s` sits at row bit offset
//! `s * bits_per_page + k`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramGeometry {
    pub rows_total: usize,
    pub pages_per_row: usize,
    pub page_size_bytes: usize,
}

impl Default for DramGeometry {
    fn default() -> Self {
        DramGeometry {
            rows_total: 16384,
            pages_per_row: 2,
            page_size_bytes: 4096,
        }
    }
}

impl DramGeometry {
    pub fn new(rows_total: usize, pages_per_row: usize, page_size_bytes: usize) -> Result<Self> {
        let g = DramGeometry {
            rows_total,
            pages_per_row,
            page_size_bytes,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pages_per_row == 0 {
            return Err(Error::Parameter("pages_per_row must be at least 1".into()));
        }
        if !self.page_size_bytes.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "page_size_bytes must be a power of two, got {}",
                self.page_size_bytes
            )));
        }
        Ok(())
    }

    pub fn bits_per_page(&self) -> usize {
        self.page_size_bytes * 8
    }

    pub fn bits_per_row(&self) -> usize {
        self.pages_per_row * self.bits_per_page()
    }

    pub fn frames(&self) -> usize {
        self.rows_total * self.pages_per_row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

impl FlipDirection {
    /// Value the cell must hold before hammering for a flip to be possible.
    pub fn preset(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }
}

impl fmt::Display for FlipDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipDirection::ZeroToOne => "0to1",
            FlipDirection::OneToZero => "1to0",
        })
    }
}

impl FromStr for FlipDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "0to1" => Ok(FlipDirection::ZeroToOne),
            "1to0" => Ok(FlipDirection::OneToZero),
            other => Err(format!("unknown flip direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VulnCell {
    pub row: usize,
    pub bit_offset: usize,
    pub direction: FlipDirection,
}

/// The set of vulnerable cells of one simulated module. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateMap {
    geometry: DramGeometry,
    seed: u64,
    cells: BTreeMap<(usize, usize), FlipDirection>,
}

const TEMPLATE_MAGIC: &str = "rowleak-template v1";

impl TemplateMap {
    /// Builds a template from explicit cells. Later duplicates of the same
    /// `(row, bit_offset)` are rejected.
    pub fn from_cells(
        geometry: DramGeometry,
        seed: u64,
        cells: impl IntoIterator<Item = VulnCell>,
    ) -> Result<Self> {
        geometry.validate()?;
        let mut map = BTreeMap::new();
        for c in cells {
            if c.row >= geometry.rows_total || c.bit_offset >= geometry.bits_per_row() {
                return Err(Error::Geometry(format!(
                    "cell ({}, {}) outside {} rows x {} bits",
                    c.row,
                    c.bit_offset,
                    geometry.rows_total,
                    geometry.bits_per_row()
                )));
            }
            if map.insert((c.row, c.bit_offset), c.direction).is_some() {
                return Err(Error::Parameter(format!(
                    "duplicate cell at row {} offset {}",
                    c.row, c.bit_offset
                )));
            }
        }
        Ok(TemplateMap {
            geometry,
            seed,
            cells: map,
        })
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn direction_at(&self, row: usize, bit_offset: usize) -> Option<FlipDirection> {
        self.cells.get(&(row, bit_offset)).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = VulnCell> + '_ {
        self.cells.iter().map(|(&(row, bit_offset), &direction)| VulnCell {
            row,
            bit_offset,
            direction,
        })
    }

    pub fn cells_in_row(&self, row: usize) -> impl Iterator<Item = VulnCell> + '_ {
        self.cells
            .range((row, 0)..(row + 1, 0))
            .map(|(&(row, bit_offset), &direction)| VulnCell {
                row,
                bit_offset,
                direction,
            })
    }

    /// Cells of one page frame, as `(bit offset within the page, direction)`.
    pub fn cells_in_page(
        &self,
        row: usize,
        slot: usize,
    ) -> impl Iterator<Item = (usize, FlipDirection)> + '_ {
        let bpp = self.geometry.bits_per_page();
        let lo = slot * bpp;
        self.cells
            .range((row, lo)..(row, lo + bpp))
            .map(move |(&(_, off), &d)| (off - lo, d))
    }

    /// Fraction of page frames that hold at least one vulnerable cell.
    pub fn vulnerable_page_fraction(&self) -> f64 {
        let bpp = self.geometry.bits_per_page();
        let mut pages: Vec<(usize, usize)> =
            self.cells.keys().map(|&(r, off)| (r, off / bpp)).collect();
        pages.dedup();
        pages.len() as f64 / self.geometry.frames() as f64
    }

    /// Fraction of all DRAM bits that are vulnerable.
    pub fn cell_rate(&self) -> f64 {
        self.cells.len() as f64 / (self.geometry.frames() * self.geometry.bits_per_page()) as f64
    }

    pub fn to_text(&self) -> String {
        let g = &self.geometry;
        let mut s = String::with_capacity(32 + self.cells.len() * 16);
        s.push_str(TEMPLATE_MAGIC);
        s.push('\n');
        s.push_str(&format!(
            "geometry {} {} {}\n",
            g.rows_total, g.pages_per_row, g.page_size_bytes
        ));
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("cells {}\n", self.cells.len()));
        for c in self.cells() {
            s.push_str(&format!("{} {} {}\n", c.row, c.bit_offset, c.direction));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::format(0, format!("missing {what}")))
        };

        let (n, magic) = next("header")?;
        if magic != TEMPLATE_MAGIC {
            return Err(Error::format(n, format!("expected `{TEMPLATE_MAGIC}`")));
        }
        let (n, geo) = next("geometry line")?;
        let nums = keyed_numbers(n, geo, "geometry", 3)?;
        let geometry = DramGeometry::new(nums[0] as usize, nums[1] as usize, nums[2] as usize)
            .map_err(|e| Error::format(n, e.to_string()))?;
        let (n, seed_line) = next("seed line")?;
        let seed = keyed_numbers(n, seed_line, "seed", 1)?[0];
        let (n, count_line) = next("cell count")?;
        let count = keyed_numbers(n, count_line, "cells", 1)?[0] as usize;

        let mut cells = Vec::with_capacity(count);
        for (n, line) in lines {
            let mut parts = line.split(' ');
            let (Some(r), Some(o), Some(d), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::format(n, "expected `row bit_offset direction`"));
            };
            let row = r.parse().map_err(|_| Error::format(n, "bad row"))?;
            let bit_offset = o.parse().map_err(|_| Error::format(n, "bad bit offset"))?;
            let direction = d.parse().map_err(|e: String| Error::format(n, e))?;
            cells.push(VulnCell {
                row,
                bit_offset,
                direction,
            });
        }
        if cells.len() != count {
            return Err(Error::format(
                0,
                format!("header announces {count} cells, found {}", cells.len()),
            ));
        }
        TemplateMap::from_cells(geometry, seed, cells)
    }
}

fn keyed_numbers(line_no: usize, line: &str, key: &str, n: usize) -> Result<Vec<u64>> {
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::format(line_no, format!("expected `{key}` line")));
    }
    let nums: Vec<u64> = parts
        .map(|p| p.parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(line_no, format!("bad number in `{key}` line")))?;
    if nums.len() != n {
        return Err(Error::format(
            line_no,
            format!("`{key}` takes {n} value(s)"),
        ));
    }
    Ok(nums)
}

/// Two-level template: each page frame is vulnerable with probability
/// `frac_vuln_pages`; a vulnerable page receives Poisson-many cells at distinct
/// uniform offsets, each with a fair-coin direction.
///
/// A mean at or above the page's bit count saturates the page: every offset
/// becomes vulnerable.
pub fn generate_template(
    geometry: DramGeometry,
    frac_vuln_pages: f64,
    mean_cells_per_vuln_page: f64,
    seed: u64,
) -> Result<TemplateMap> {
    geometry.validate()?;
    if !(0.0..=1.0).contains(&frac_vuln_pages) {
        return Err(Error::Parameter(format!(
            "frac_vuln_pages must lie in [0, 1], got {frac_vuln_pages}"
        )));
    }
    if !(mean_cells_per_vuln_page > 0.0) || !mean_cells_per_vuln_page.is_finite() {
        return Err(Error::Parameter(format!(
            "mean_cells_per_vuln_page must be positive, got {mean_cells_per_vuln_page}"
        )));
    }

    let bpp = geometry.bits_per_page();
    let saturated = mean_cells_per_vuln_page >= bpp as f64;
    let poisson = Poisson::new(mean_cells_per_vuln_page)
        .map_err(|e| Error::Parameter(format!("poisson mean: {e}")))?;
    let mut rng = seeds::rng(seed);
    let mut cells = BTreeMap::new();

    for row in 0..geometry.rows_total {
        for slot in 0..geometry.pages_per_row {
            if !rng.random_bool(frac_vuln_pages) {
                continue;
            }
            let count = if saturated {
                bpp
            } else {
                (poisson.sample(&mut rng) as usize).min(bpp)
            };
            let base = slot * bpp;
            let mut offsets = index::sample(&mut rng, bpp, count).into_vec();
            offsets.sort_unstable();
            for off in offsets {
                let dir = if rng.random_bool(0.5) {
                    FlipDirection::ZeroToOne
                } else {
                    FlipDirection::OneToZero
                };
                cells.insert((row, base + off), dir);
            }
        }
    }

    Ok(TemplateMap {
        geometry,
        seed,
        cells,
    })
}

/// Contents of one DRAM row, stored MSB-first within each byte so that row bit
/// offset `8 * b + i` is bit `7 - i` of byte `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowBits {
    bytes: Vec<u8>,
}

impl RowBits {
    pub fn zeros(geometry: &DramGeometry) -> Self {
        RowBits {
            bytes: vec![0; geometry.pages_per_row * geometry.page_size_bytes],
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        RowBits { bytes }
    }

    pub fn len(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn get(&self, offset: usize) -> bool {
        self.bytes[offset / 8] & (0x80 >> (offset % 8)) != 0
    }

    pub fn set(&mut self, offset: usize, value: bool) {
        let mask = 0x80 >> (offset % 8);
        if value {
            self.bytes[offset / 8] |= mask;
        } else {
            self.bytes[offset / 8] &= !mask;
        }
    }

    /// Copies a page's bytes into page slot `slot`.
    pub fn write_page(&mut self, slot: usize, page: &[u8]) {
        let start = slot * page.len();
        self.bytes[start..start + page.len()].copy_from_slice(page);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Double-sided hammering of `row`, whose neighbours hold `upper` and `lower`.
///
/// A `ZeroToOne` cell flips iff the target bit is 0 and both neighbour bits at
/// the same offset are 1; `OneToZero` is the mirror image. Each eligible flip is
/// independently suppressed with probability `miss_prob`; the RNG is only
/// consulted when `miss_prob > 0`. Returns the flipped offsets in ascending
/// order and applies the flips to `target`.
pub fn hammer<R: Rng + ?Sized>(
    target: &mut RowBits,
    upper: &RowBits,
    lower: &RowBits,
    row: usize,
    template: &TemplateMap,
    miss_prob: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let expected = template.geometry().bits_per_row();
    for (name, bits) in [("target", &*target), ("upper", upper), ("lower", lower)] {
        if bits.len() != expected {
            return Err(Error::Geometry(format!(
                "{name} row has {} bits, geometry expects {expected}",
                bits.len()
            )));
        }
    }
    if !(0.0..1.0).contains(&miss_prob) {
        return Err(Error::Parameter(format!(
            "miss_prob must lie in [0, 1), got {miss_prob}"
        )));
    }

    let mut flipped = Vec::new();
    for cell in template.cells_in_row(row) {
        let k = cell.bit_offset;
        let t = target.get(k);
        let (u, l) = (upper.get(k), lower.get(k));
        let eligible = match cell.direction {
            FlipDirection::ZeroToOne => !t && u && l,
            FlipDirection::OneToZero => t && !u && !l,
        };
        if eligible && (miss_prob == 0.0 || !rng.random_bool(miss_prob)) {
            target.set(k, !t);
            flipped.push(k);
        }
    }
    Ok(flipped)
}
