//! Multi-round weight leakage through hammering.
//!
//! A round exhausts memory, releases planned frames so that the victim's next
//! inference swaps its weight pages into aggressor rows, hammers the target
//! rows between each victim page and an attacker-controlled row, and reads the
//! victim bits off the observed flips.
//!
//! Target rows are laid out as follows, where `V` is the victim-held
//! aggressor, `T` the target and `A` the attacker-held aggressor:
//!
//! ```text
//!   row t-1  V . . .      or   A . . .
//!   row t    T . . .           T . . .
//!   row t+1  A . . .           V . . .
//! ```
//!
//! Two adjacent target rows may each serve as the other's attacker aggressor.
//! A row holding victim pages always keeps at least one attacker page so it
//! can be activated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::bitprofile::{filter_prefix, WeightLeakMask};
use crate::dram_sim::{hammer, DramGeometry, FlipDirection, RowBits, TemplateMap};
use crate::error::{Error, Result};
use crate::memsys::{MemorySystem, Owner, PageKind, PhysPageId, VictimPageTag};
use crate::seeds;
use crate::victim_runtime::{
    run_inference_trace, Anchor, InferenceTrace, PackedModel, QuantizedModel, TraceConfig,
    WeightAddressMap, WeightBit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Strategy {
    /// Any frame that lines a vulnerable cell up with an unknown bit.
    #[serde(rename = "allbits")]
    AllBits,
    /// Only frames that line a cell up with an unknown sign bit.
    #[serde(rename = "msb")]
    MsbPriority,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::AllBits => "allbits",
            Strategy::MsbPriority => "msb",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "allbits" => Ok(Strategy::AllBits),
            "msb" => Ok(Strategy::MsbPriority),
            other => Err(format!("unknown strategy `{other}` (expected allbits|msb)")),
        }
    }
}

/// Simulated wall-clock cost of one round, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostModel {
    pub t_exhaust: f64,
    pub t_release: f64,
    pub t_inference: f64,
    pub t_per_hammered_row: f64,
}

impl CostModel {
    pub fn for_strategy(strategy: Strategy) -> Self {
        let t_per_hammered_row = match strategy {
            Strategy::MsbPriority => 239.0 / 11_000.0,
            Strategy::AllBits => 375.0 / 17_000.0,
        };
        CostModel {
            t_exhaust: 12.0,
            t_release: 21.0,
            t_inference: 1.0,
            t_per_hammered_row,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t_exhaust,
            self.t_release,
            self.t_inference,
            self.t_per_hammered_row,
        ];
        if all.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Parameter("cost model terms must be non-negative".into()));
        }
        Ok(())
    }

    pub fn round_seconds(&self, rows_hammered: usize) -> f64 {
        self.t_exhaust
            + self.t_release
            + self.t_inference
            + self.t_per_hammered_row * rows_hammered as f64
    }
}

/// What the attacker knows about each victim weight bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakLedger {
    dims: Vec<(usize, usize)>,
    starts: Vec<usize>,
    masks: Vec<WeightLeakMask>,
    rounds: Vec<[u32; 8]>,
}

impl LeakLedger {
    pub fn new(dims: &[(usize, usize)]) -> Self {
        let mut starts = Vec::with_capacity(dims.len());
        let mut n = 0;
        for &(r, c) in dims {
            starts.push(n);
            n += r * c;
        }
        LeakLedger {
            dims: dims.to_vec(),
            starts,
            masks: vec![WeightLeakMask::default(); n],
            rounds: vec![[0; 8]; n],
        }
    }

    pub fn for_map(map: &WeightAddressMap) -> Self {
        let dims: Vec<_> = (0..map.num_layers()).map(|l| map.layer_dims(l)).collect();
        LeakLedger::new(&dims)
    }

    /// Every bit of every weight known, as if leaked in round 0.
    pub fn fully_known(model: &QuantizedModel) -> Self {
        let dims: Vec<_> = model.layers.iter().map(|l| (l.rows, l.cols)).collect();
        let mut ledger = LeakLedger::new(&dims);
        for (l, layer) in model.layers.iter().enumerate() {
            for (i, &code) in layer.codes.iter().enumerate() {
                ledger.masks[ledger.starts[l] + i] = WeightLeakMask::full(code);
            }
        }
        ledger
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        self.dims[layer]
    }

    pub fn num_weights(&self) -> usize {
        self.masks.len()
    }

    fn slot(&self, layer: usize, row: usize, col: usize) -> usize {
        self.starts[layer] + row * self.dims[layer].1 + col
    }

    pub fn mask(&self, layer: usize, row: usize, col: usize) -> WeightLeakMask {
        self.masks[self.slot(layer, row, col)]
    }

    pub fn known(&self, bit: WeightBit) -> Option<bool> {
        let m = self.mask(bit.layer, bit.row, bit.col);
        let b = 1u8 << bit.bit;
        (m.known & b != 0).then_some(m.values & b != 0)
    }

    pub fn round_of_discovery(&self, bit: WeightBit) -> Option<u32> {
        self.known(bit)?;
        Some(self.rounds[self.slot(bit.layer, bit.row, bit.col)][bit.bit as usize])
    }

    /// Records an observation. Returns whether the bit was new; a disagreement
    /// with an earlier observation is an integrity fault.
    pub fn record(&mut self, bit: WeightBit, value: bool, round: u32) -> Result<bool> {
        if bit.layer >= self.dims.len()
            || bit.row >= self.dims[bit.layer].0
            || bit.col >= self.dims[bit.layer].1
            || bit.bit > 7
        {
            return Err(Error::Index(format!("{bit:?}")));
        }
        let i = self.slot(bit.layer, bit.row, bit.col);
        let b = 1u8 << bit.bit;
        let m = &mut self.masks[i];
        if m.known & b != 0 {
            if (m.values & b != 0) != value {
                return Err(Error::Integrity(format!(
                    "bit {} of weight ({}, {}, {}) leaked as {} after {}",
                    bit.bit,
                    bit.layer,
                    bit.row,
                    bit.col,
                    value as u8,
                    (m.values & b != 0) as u8
                )));
            }
            return Ok(false);
        }
        m.known |= b;
        if value {
            m.values |= b;
        }
        self.rounds[i][bit.bit as usize] = round;
        Ok(true)
    }

    /// Fraction of weights whose known prefix has at least `k` bits.
    pub fn prefix_fraction(&self, k: u8) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        let n = self.masks.iter().filter(|m| filter_prefix(**m) >= k).count();
        n as f64 / self.masks.len() as f64
    }

    pub fn known_bits(&self) -> usize {
        self.masks.iter().map(|m| m.known.count_ones() as usize).sum()
    }

    /// Checks every known bit against the victim's true codes.
    pub fn verify_against(&self, model: &QuantizedModel) -> Result<()> {
        for (l, layer) in model.layers.iter().enumerate() {
            for (i, &code) in layer.codes.iter().enumerate() {
                let m = self.masks[self.starts[l] + i];
                if (m.values ^ code as u8) & m.known != 0 {
                    return Err(Error::Integrity(format!(
                        "weight ({l}, {}, {}) known bits {:08b}/{:08b} disagree with code {:08b}",
                        i / layer.cols,
                        i % layer.cols,
                        m.known,
                        m.values,
                        code as u8
                    )));
                }
            }
        }
        Ok(())
    }

    /// `layer,row,col,bit,value,round` for every known bit.
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer,row,col,bit,value,round\n");
        for (l, &(rows, cols)) in self.dims.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    let i = self.slot(l, r, c);
                    let m = self.masks[i];
                    for bit in (0..8u8).rev() {
                        let b = 1u8 << bit;
                        if m.known & b != 0 {
                            let _ = writeln!(
                                s,
                                "{l},{r},{c},{bit},{},{}",
                                (m.values & b != 0) as u8,
                                self.rounds[i][bit as usize]
                            );
                        }
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, dims: &[(usize, usize)]) -> Result<Self> {
        let mut ledger = LeakLedger::new(dims);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "layer,row,col,bit,value,round")) => {}
            _ => return Err(Error::format(1, "missing ledger header")),
        }
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<u64> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(n, "expected six integers"))?;
            let [layer, row, col, bit, value, round] = f[..] else {
                return Err(Error::format(n, "expected six fields"));
            };
            if value > 1 || bit > 7 {
                return Err(Error::format(n, "bit must be 0..7 and value 0|1"));
            }
            let wb = WeightBit {
                layer: layer as usize,
                row: row as usize,
                col: col as usize,
                bit: bit as u8,
            };
            ledger
                .record(wb, value == 1, round as u32)
                .map_err(|e| Error::format(n, e.to_string()))?;
        }
        Ok(ledger)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RecoveryPoint {
    pub round: usize,
    pub msb: f64,
    /// `msb_plus[k - 1]`: fraction with the sign bit and the next `k` bits.
    pub msb_plus: [f64; 7],
    pub full: f64,
    pub seconds: f64,
    pub rows_hammered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct RecoveryCurve {
    pub points: Vec<RecoveryPoint>,
}

impl RecoveryCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,msb,msb1,msb2,msb3,msb4,msb5,msb6,msb7,full,seconds\n");
        for p in &self.points {
            let _ = write!(s, "{},{:.6}", p.round, p.msb);
            for f in p.msb_plus {
                let _ = write!(s, ",{f:.6}");
            }
            let _ = writeln!(s, ",{:.6},{:.3}", p.full, p.seconds);
        }
        s
    }

    pub fn last(&self) -> Option<&RecoveryPoint> {
        self.points.last()
    }

    /// MSB fraction reached by simulated time `seconds` (step function).
    pub fn msb_at_seconds(&self, seconds: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.seconds <= seconds)
            .last()
            .map_or(0.0, |p| p.msb)
    }

    /// First round at which the MSB fraction reaches `threshold`.
    pub fn rounds_to_msb(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.msb >= threshold).map(|p| p.round)
    }
}

/// One target row hammered between a victim page and an attacker row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetPlan {
    pub target_row: usize,
    pub slot: usize,
    pub victim_aggressor_row: usize,
    pub attacker_aggressor_row: usize,
    pub victim_page: usize,
    /// In-page offsets of the target page's vulnerable cells that line up
    /// with real weight bits of `victim_page`.
    pub cell_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleaseBatch {
    pub anchor: Anchor,
    pub pattern: Vec<PageKind>,
    pub leakable: Vec<PhysPageId>,
    pub filler: Vec<PhysPageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub targets: Vec<TargetPlan>,
    /// Planned frame for every weight page.
    pub placements: BTreeMap<usize, PhysPageId>,
    pub batches: Vec<ReleaseBatch>,
    pub strategy: Strategy,
}

impl RoundPlan {
    /// Frames in the order they are released across all anchor batches.
    pub fn release_order(&self) -> Vec<PhysPageId> {
        let mut order = Vec::new();
        for b in &self.batches {
            let mut leak = b.leakable.iter();
            let mut fill = b.filler.iter();
            let predicted: Vec<_> = b
                .pattern
                .iter()
                .map(|k| match k {
                    PageKind::Secret => *leak.next().unwrap(),
                    PageKind::NonSecret => *fill.next().unwrap(),
                })
                .collect();
            order.extend(predicted.into_iter().rev());
        }
        order
    }

    pub fn rows_hammered(&self) -> usize {
        self.targets
            .iter()
            .map(|t| t.target_row)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub rows_hammered: usize,
    pub new_bits: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub rounds: usize,
    pub strategy: Strategy,
    pub cost_model: CostModel,
    pub seed: u64,
}

/// For each in-page bit offset, the frames whose page has a vulnerable cell
/// there (CSR layout).
#[derive(Debug, Clone)]
struct CellIndex {
    starts: Vec<u32>,
    frames: Vec<PhysPageId>,
}

impl CellIndex {
    fn build(template: &TemplateMap) -> Self {
        let g = template.geometry();
        let bpp = g.bits_per_page();
        let mut counts = vec![0u32; bpp + 1];
        for c in template.cells() {
            counts[c.bit_offset % bpp + 1] += 1;
        }
        for i in 1..=bpp {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut frames = vec![PhysPageId::new(0, 0); template.len()];
        for c in template.cells() {
            let o = c.bit_offset % bpp;
            frames[fill[o] as usize] = PhysPageId::new(c.row, c.bit_offset / bpp);
            fill[o] += 1;
        }
        CellIndex {
            starts: counts,
            frames,
        }
    }

    fn frames_at(&self, offset: usize) -> &[PhysPageId] {
        &self.frames[self.starts[offset] as usize..self.starts[offset + 1] as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowRole {
    Victim,
    Target { victim_row: usize, attacker_row: usize },
    Attacker,
    TargetAndAttacker { victim_row: usize, attacker_row: usize },
}

#[derive(Default)]
struct Layout {
    roles: BTreeMap<usize, RowRole>,
    victim_slots: BTreeMap<usize, Vec<usize>>,
}

impl Layout {
    fn is_victim_row(&self, row: usize) -> bool {
        matches!(self.roles.get(&row), Some(RowRole::Victim))
    }

    fn can_host_victim(&self, row: usize, slot: usize, pages_per_row: usize) -> bool {
        match self.roles.get(&row) {
            None => pages_per_row >= 2,
            Some(RowRole::Victim) => {
                let used = &self.victim_slots[&row];
                used.len() + 1 < pages_per_row && !used.contains(&slot)
            }
            Some(_) => false,
        }
    }

    fn target_compatible(&self, target: usize, victim_row: usize, attacker_row: usize) -> bool {
        let ok_target = match self.roles.get(&target) {
            None | Some(RowRole::Attacker) => true,
            Some(RowRole::Target {
                victim_row: v,
                attacker_row: a,
            })
            | Some(RowRole::TargetAndAttacker {
                victim_row: v,
                attacker_row: a,
            }) => *v == victim_row && *a == attacker_row,
            Some(RowRole::Victim) => false,
        };
        ok_target && !self.is_victim_row(attacker_row)
    }

    fn place(&mut self, target: usize, slot: usize, victim_row: usize, attacker_row: usize) {
        self.roles.insert(victim_row, RowRole::Victim);
        self.victim_slots.entry(victim_row).or_default().push(slot);
        self.mark_target(target, victim_row, attacker_row);
        let role = match self.roles.get(&attacker_row) {
            Some(RowRole::Target {
                victim_row,
                attacker_row,
            }) => RowRole::TargetAndAttacker {
                victim_row: *victim_row,
                attacker_row: *attacker_row,
            },
            Some(other) => *other,
            None => RowRole::Attacker,
        };
        self.roles.insert(attacker_row, role);
    }

    fn mark_target(&mut self, target: usize, victim_row: usize, attacker_row: usize) {
        let role = match self.roles.get(&target) {
            Some(RowRole::Attacker) | Some(RowRole::TargetAndAttacker { .. }) => {
                RowRole::TargetAndAttacker {
                    victim_row,
                    attacker_row,
                }
            }
            _ => RowRole::Target {
                victim_row,
                attacker_row,
            },
        };
        self.roles.insert(target, role);
    }

    fn is_target(&self, row: usize) -> bool {
        matches!(
            self.roles.get(&row),
            Some(RowRole::Target { .. }) | Some(RowRole::TargetAndAttacker { .. })
        )
    }
}

/// A victim, a DRAM module and the memory system, wired for repeated rounds.
#[derive(Debug, Clone)]
pub struct AttackSim {
    template: TemplateMap,
    index: CellIndex,
    memory: MemorySystem,
    packed: PackedModel,
    trace_config: TraceConfig,
    miss_prob: f64,
}

impl AttackSim {
    /// Loads the victim's weight pages into the lowest free frames.
    pub fn new(
        template: TemplateMap,
        packed: PackedModel,
        pageset_capacity: usize,
        trace_config: TraceConfig,
        miss_prob: f64,
    ) -> Result<Self> {
        let geometry = *template.geometry();
        if packed.map.page_size() != geometry.page_size_bytes {
            return Err(Error::Geometry(format!(
                "victim packed into {}-byte pages, DRAM pages are {} bytes",
                packed.map.page_size(),
                geometry.page_size_bytes
            )));
        }
        if !(0.0..1.0).contains(&miss_prob) {
            return Err(Error::Parameter(format!("miss_prob must lie in [0, 1), got {miss_prob}")));
        }
        let mut memory = MemorySystem::new(geometry, pageset_capacity);
        let tags: Vec<_> = (0..packed.pages.len()).map(VictimPageTag::secret).collect();
        let frames = memory.allocate_for_victim(&tags)?;
        for (frame, page) in frames.iter().zip(&packed.pages) {
            memory.write_victim_page(*frame, page)?;
        }
        Ok(AttackSim {
            index: CellIndex::build(&template),
            template,
            memory,
            packed,
            trace_config,
            miss_prob,
        })
    }

    pub fn memory(&self) -> &MemorySystem {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut MemorySystem {
        &mut self.memory
    }

    pub fn template(&self) -> &TemplateMap {
        &self.template
    }

    pub fn map(&self) -> &WeightAddressMap {
        &self.packed.map
    }

    fn geometry(&self) -> &DramGeometry {
        self.template.geometry()
    }

    /// Unknown in-page bit offsets of `page` worth targeting.
    fn wanted_offsets(&self, page: usize, ledger: &LeakLedger, strategy: Strategy) -> Vec<usize> {
        let map = &self.packed.map;
        let bits: &[u8] = match strategy {
            Strategy::MsbPriority => &[7],
            Strategy::AllBits => &[7, 6, 5, 4, 3, 2, 1, 0],
        };
        let mut out = Vec::new();
        for byte in map.real_bytes(page) {
            let (l, r, c) = map.inverse(page, byte).expect("real byte");
            let m = ledger.mask(l, r, c);
            for &b in bits {
                if m.known & (1 << b) == 0 {
                    out.push(byte * 8 + (7 - b as usize));
                }
            }
        }
        out
    }

    /// Aligned offsets of target frame `(row, slot)` that hit real bytes of `page`.
    fn aligned_cells(&self, row: usize, slot: usize, page: usize) -> Vec<usize> {
        let map = &self.packed.map;
        self.template
            .cells_in_page(row, slot)
            .filter(|(o, _)| map.inverse(page, o / 8).is_some())
            .map(|(o, _)| o)
            .collect()
    }

    fn informative(&self, row: usize, slot: usize, wanted: &BTreeSet<usize>) -> bool {
        self.template
            .cells_in_page(row, slot)
            .any(|(o, _)| wanted.contains(&o))
    }

    /// Plans one round, or returns `None` when no frame can reveal a wanted
    /// bit any more.
    pub fn plan_round<R: Rng + ?Sized>(
        &self,
        ledger: &LeakLedger,
        strategy: Strategy,
        rng: &mut R,
    ) -> Result<Option<RoundPlan>> {
        let g = *self.geometry();
        let num_pages = self.packed.pages.len();

        let mut wanted: Vec<BTreeSet<usize>> = Vec::with_capacity(num_pages);
        let mut candidates: Vec<BTreeSet<PhysPageId>> = Vec::with_capacity(num_pages);
        for page in 0..num_pages {
            let offsets = self.wanted_offsets(page, ledger, strategy);
            let mut frames = BTreeSet::new();
            for &o in &offsets {
                for f in self.index.frames_at(o) {
                    if f.row >= 1 && f.row + 1 < g.rows_total {
                        frames.insert(*f);
                    }
                }
            }
            wanted.push(offsets.into_iter().collect());
            candidates.push(frames);
        }
        if candidates.iter().all(BTreeSet::is_empty) {
            return Ok(None);
        }
        let hot_rows: BTreeSet<usize> = candidates.iter().flatten().map(|f| f.row).collect();

        let mut order: Vec<usize> = (0..num_pages).collect();
        order.shuffle(rng);

        let mut layout = Layout::default();
        let mut targets = Vec::new();
        let mut placements = BTreeMap::new();
        for page in order {
            let mut valid = Vec::new();
            for f in &candidates[page] {
                for (victim_row, attacker_row) in [(f.row - 1, f.row + 1), (f.row + 1, f.row - 1)] {
                    if layout.can_host_victim(victim_row, f.slot, g.pages_per_row)
                        && layout.target_compatible(f.row, victim_row, attacker_row)
                    {
                        valid.push((*f, victim_row, attacker_row));
                    }
                }
            }
            let preferred: Vec<_> = valid
                .iter()
                .filter(|(_, v, _)| !hot_rows.contains(v))
                .copied()
                .collect();
            let pool = if preferred.is_empty() { &valid } else { &preferred };
            let Some(&(frame, victim_row, attacker_row)) = pool.choose(rng) else {
                continue;
            };

            layout.place(frame.row, frame.slot, victim_row, attacker_row);
            placements.insert(page, PhysPageId::new(victim_row, frame.slot));
            targets.push(TargetPlan {
                target_row: frame.row,
                slot: frame.slot,
                victim_aggressor_row: victim_row,
                attacker_aggressor_row: attacker_row,
                victim_page: page,
                cell_offsets: self.aligned_cells(frame.row, frame.slot, page),
            });

            // the victim row's other neighbour may be worth hammering too
            let other = 2 * victim_row as isize - frame.row as isize;
            let beyond = 2 * other - victim_row as isize;
            if other >= 0 && beyond >= 0 && (beyond as usize) < g.rows_total {
                let (other, beyond) = (other as usize, beyond as usize);
                if self.informative(other, frame.slot, &wanted[page])
                    && layout.target_compatible(other, victim_row, beyond)
                {
                    layout.mark_target(other, victim_row, beyond);
                    layout.place_attacker(beyond);
                    targets.push(TargetPlan {
                        target_row: other,
                        slot: frame.slot,
                        victim_aggressor_row: victim_row,
                        attacker_aggressor_row: beyond,
                        victim_page: page,
                        cell_offsets: self.aligned_cells(other, frame.slot, page),
                    });
                }
            }
        }

        let trace = run_inference_trace(&self.packed.map, &self.memory, self.trace_config)?;
        let needed_fillers = trace
            .events
            .iter()
            .flat_map(|e| &e.page_accesses)
            .filter(|t| t.kind == PageKind::NonSecret || !placements.contains_key(&t.logical_index))
            .count();
        let mut fillers = self.filler_frames(&layout, needed_fillers)?.into_iter();

        let mut batches = Vec::new();
        for event in &trace.events {
            if event.page_accesses.is_empty() {
                continue;
            }
            let mut leakable = Vec::new();
            let mut filler = Vec::new();
            for tag in &event.page_accesses {
                match (tag.kind, placements.get(&tag.logical_index)) {
                    (PageKind::Secret, Some(f)) => leakable.push(*f),
                    (PageKind::Secret, None) => {
                        let f = fillers.next().expect("sized above");
                        placements.insert(tag.logical_index, f);
                        leakable.push(f);
                    }
                    (PageKind::NonSecret, _) => filler.push(fillers.next().expect("sized above")),
                }
            }
            batches.push(ReleaseBatch {
                anchor: event.anchor,
                pattern: InferenceTrace::pattern(event),
                leakable,
                filler,
            });
        }

        targets.sort_by_key(|t| (t.target_row, t.slot));
        Ok(Some(RoundPlan {
            targets,
            placements,
            batches,
            strategy,
        }))
    }

    /// Frames far from every planned row: not in any role and not next to a
    /// target row. Taken from the top of memory downwards.
    fn filler_frames(&self, layout: &Layout, n: usize) -> Result<Vec<PhysPageId>> {
        let g = self.geometry();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        for row in (0..g.rows_total).rev() {
            let near_target = layout.is_target(row)
                || (row > 0 && layout.is_target(row - 1))
                || layout.is_target(row + 1);
            if layout.roles.contains_key(&row) || near_target {
                continue;
            }
            for slot in 0..g.pages_per_row {
                out.push(PhysPageId::new(row, slot));
                if out.len() == n {
                    return Ok(out);
                }
            }
        }
        Err(Error::Plan(format!("not enough filler frames for {n} pages")))
    }

    /// Row content as it physically is: the attacker's intended bits, with any
    /// slot actually holding a victim page replaced by that page.
    fn physical_row(&self, row: usize, mut intended: RowBits) -> RowBits {
        for slot in 0..self.geometry().pages_per_row {
            let id = PhysPageId::new(row, slot);
            if let Ok(Owner::Victim(_)) = self.memory.owner(id) {
                if let Some(page) = self.memory.page_content(id) {
                    intended.write_page(slot, page);
                }
            }
        }
        intended
    }

    /// Runs one planned round and folds the observations into `ledger`.
    pub fn execute_round<R: Rng + ?Sized>(
        &mut self,
        plan: &RoundPlan,
        round: usize,
        ledger: &mut LeakLedger,
        cost: &CostModel,
        rng: &mut R,
    ) -> Result<RoundStats> {
        let g = *self.geometry();
        let bpp = g.bits_per_page();

        self.memory.exhaust_memory();
        let trace = run_inference_trace(&self.packed.map, &self.memory, self.trace_config)?;
        let mut predicted: BTreeMap<usize, PhysPageId> = BTreeMap::new();
        let mut batches = plan.batches.iter();
        for event in &trace.events {
            if event.page_accesses.is_empty() {
                continue;
            }
            let batch = batches
                .next()
                .filter(|b| b.anchor == event.anchor)
                .ok_or_else(|| Error::Plan(format!("no release batch for {}", event.anchor)))?;
            let frames = self.memory.batched_massage(
                &event.anchor.to_string(),
                &batch.pattern,
                &batch.leakable,
                &batch.filler,
            )?;
            for (tag, f) in event.page_accesses.iter().zip(&frames) {
                if tag.kind == PageKind::Secret {
                    predicted.insert(tag.logical_index, *f);
                }
            }
            self.memory.allocate_for_victim(&event.page_accesses)?;
        }

        let mut by_row: BTreeMap<usize, Vec<&TargetPlan>> = BTreeMap::new();
        for t in &plan.targets {
            by_row.entry(t.target_row).or_default().push(t);
        }

        let mut new_bits = 0;
        for (&row, group) in &by_row {
            let (victim_row, attacker_row) = (group[0].victim_aggressor_row, group[0].attacker_aggressor_row);
            let mut target = RowBits::zeros(&g);
            let mut attacker = RowBits::zeros(&g);
            for cell in self.template.cells_in_row(row) {
                target.set(cell.bit_offset, cell.direction.preset());
                attacker.set(cell.bit_offset, !cell.direction.preset());
            }
            let mut target = self.physical_row(row, target);
            let attacker = self.physical_row(attacker_row, attacker);
            let victim = self.physical_row(victim_row, RowBits::zeros(&g));
            let (upper, lower) = if victim_row < row {
                (&victim, &attacker)
            } else {
                (&attacker, &victim)
            };
            let flipped: BTreeSet<usize> =
                hammer(&mut target, upper, lower, row, &self.template, self.miss_prob, rng)?
                    .into_iter()
                    .collect();

            for t in group {
                if predicted.get(&t.victim_page) != Some(&PhysPageId::new(victim_row, t.slot)) {
                    return Err(Error::Plan(format!(
                        "victim page {} not massaged into row {victim_row}",
                        t.victim_page
                    )));
                }
                for (o, dir) in self.template.cells_in_page(row, t.slot) {
                    let Some(wb) = self.packed.map.inverse_bit(t.victim_page, o) else {
                        continue;
                    };
                    let flip = flipped.contains(&(t.slot * bpp + o));
                    if !flip && self.miss_prob > 0.0 {
                        continue;
                    }
                    let value = match dir {
                        FlipDirection::ZeroToOne => flip,
                        FlipDirection::OneToZero => !flip,
                    };
                    if ledger.record(wb, value, round as u32)? {
                        new_bits += 1;
                    }
                }
            }
        }

        let rows_hammered = by_row.len();
        Ok(RoundStats {
            round,
            rows_hammered,
            new_bits,
            seconds: cost.round_seconds(rows_hammered),
        })
    }

    /// Up to `config.rounds` rounds, stopping early once nothing informative
    /// remains. `on_round` sees the ledger after every completed round.
    pub fn run_attack_with(
        &mut self,
        config: &AttackConfig,
        ledger: &mut LeakLedger,
        mut on_round: impl FnMut(&RecoveryPoint, &LeakLedger),
    ) -> Result<RecoveryCurve> {
        config.cost_model.validate()?;
        let mut rng = seeds::rng(config.seed);
        let mut curve = RecoveryCurve::default();
        let mut seconds = 0.0;
        for round in 1..=config.rounds {
            let Some(plan) = self.plan_round(ledger, config.strategy, &mut rng)? else {
                break;
            };
            let stats = self.execute_round(&plan, round, ledger, &config.cost_model, &mut rng)?;
            seconds += stats.seconds;
            let point = recovery_point(ledger, round, seconds, stats.rows_hammered);
            on_round(&point, ledger);
            curve.points.push(point);
        }
        Ok(curve)
    }

    pub fn run_attack(&mut self, config: &AttackConfig) -> Result<(LeakLedger, RecoveryCurve)> {
        let mut ledger = LeakLedger::for_map(&self.packed.map);
        let curve = self.run_attack_with(config, &mut ledger, |_, _| {})?;
        Ok((ledger, curve))
    }
}

impl Layout {
    fn place_attacker(&mut self, row: usize) {
        let role = match self.roles.get(&row) {
            Some(RowRole::Target {
                victim_row,
                attacker_row,
            }) => RowRole::TargetAndAttacker {
                victim_row: *victim_row,
                attacker_row: *attacker_row,
            },
            Some(other) => *other,
            None => RowRole::Attacker,
        };
        self.roles.insert(row, role);
    }
}

pub fn recovery_point(ledger: &LeakLedger, round: usize, seconds: f64, rows_hammered: usize) -> RecoveryPoint {
    let mut msb_plus = [0.0; 7];
    for (k, f) in msb_plus.iter_mut().enumerate() {
        *f = ledger.prefix_fraction(k as u8 + 2);
    }
    RecoveryPoint {
        round,
        msb: ledger.prefix_fraction(1),
        msb_plus,
        full: ledger.prefix_fraction(8),
        seconds,
        rows_hammered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram_sim::VulnCell;
    use crate::victim_runtime::{ChunkShape, QuantizedLayer};

    fn tiny_model() -> QuantizedModel {
        // 4x2 with 4x2 chunks and 8-byte pages: exactly one page
        QuantizedModel {
            layers: vec![QuantizedLayer::new(4, 2, vec![5, -3, 100, -128, 0, 77, -1, 64], 0.1).unwrap()],
            biases: vec![vec![0.0; 2]],
            seed: 1,
        }
    }

    fn tiny_sim(cells: Vec<VulnCell>) -> AttackSim {
        let g = DramGeometry::new(16, 2, 8).unwrap();
        let template = TemplateMap::from_cells(g, 0, cells).unwrap();
        let packed = PackedModel::build(&tiny_model(), ChunkShape { rows: 4, cols: 2 }, 8).unwrap();
        AttackSim::new(template, packed, 8, TraceConfig::default(), 0.0).unwrap()
    }

    fn cell(row: usize, bit_offset: usize, direction: FlipDirection) -> VulnCell {
        VulnCell {
            row,
            bit_offset,
            direction,
        }
    }

    #[test]
    fn ledger_rejects_contradiction() {
        let mut l = LeakLedger::new(&[(1, 1)]);
        let b = WeightBit {
            layer: 0,
            row: 0,
            col: 0,
            bit: 7,
        };
        assert!(l.record(b, true, 1).unwrap());
        assert!(!l.record(b, true, 2).unwrap());
        assert_eq!(l.round_of_discovery(b), Some(1));
        assert!(matches!(l.record(b, false, 3), Err(Error::Integrity(_))));
    }

    #[test]
    fn ledger_text_round_trip() {
        let m = tiny_model();
        let full = LeakLedger::fully_known(&m);
        let text = full.to_text();
        let back = LeakLedger::from_text(&text, &[(4, 2)]).unwrap();
        assert_eq!(back, full);
        back.verify_against(&m).unwrap();
    }

    #[test]
    fn msb_one_with_zero_to_one_cell_leaks_one() {
        let map = tiny_sim(vec![]).packed.map.clone();
        let (page, off) = map.locate_bit(0, 3, 0, 7).unwrap(); // code -1 -> MSB 1
        assert_eq!(page, 0);
        let mut sim = tiny_sim(vec![cell(5, off, FlipDirection::ZeroToOne)]);
        let mut ledger = LeakLedger::for_map(sim.map());
        let mut rng = seeds::rng(0);
        let plan = sim
            .plan_round(&ledger, Strategy::MsbPriority, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(plan.targets.len(), 1);
        assert_eq!(plan.targets[0].target_row, 5);
        let cost = CostModel::for_strategy(Strategy::MsbPriority);
        sim.execute_round(&plan, 1, &mut ledger, &cost, &mut rng).unwrap();
        let wb = WeightBit {
            layer: 0,
            row: 3,
            col: 0,
            bit: 7,
        };
        assert_eq!(ledger.known(wb), Some(true));
    }

    #[test]
    fn msb_zero_with_zero_to_one_cell_leaks_zero() {
        let map = tiny_sim(vec![]).packed.map.clone();
        let (_, off) = map.locate_bit(0, 0, 0, 7).unwrap(); // code 5 -> MSB 0
        let mut sim = tiny_sim(vec![cell(7, off, FlipDirection::ZeroToOne)]);
        let (ledger, curve) = sim
            .run_attack(&AttackConfig {
                rounds: 3,
                strategy: Strategy::MsbPriority,
                cost_model: CostModel::for_strategy(Strategy::MsbPriority),
                seed: 4,
            })
            .unwrap();
        let wb = WeightBit {
            layer: 0,
            row: 0,
            col: 0,
            bit: 7,
        };
        assert_eq!(ledger.known(wb), Some(false));
        // converged after the single informative round
        assert_eq!(curve.points.len(), 1);
    }

    #[test]
    fn one_to_zero_cell_flips_when_victim_bit_is_zero() {
        let map = tiny_sim(vec![]).packed.map.clone();
        let (_, off) = map.locate_bit(0, 0, 0, 7).unwrap(); // MSB 0
        let mut sim = tiny_sim(vec![cell(9, off, FlipDirection::OneToZero)]);
        let (ledger, _) = sim
            .run_attack(&AttackConfig {
                rounds: 1,
                strategy: Strategy::AllBits,
                cost_model: CostModel::for_strategy(Strategy::AllBits),
                seed: 0,
            })
            .unwrap();
        assert_eq!(
            ledger.known(WeightBit {
                layer: 0,
                row: 0,
                col: 0,
                bit: 7
            }),
            Some(false)
        );
    }

    #[test]
    fn adjacent_target_rows_serve_as_each_others_aggressor() {
        let model = QuantizedModel {
            layers: vec![QuantizedLayer::new(8, 2, (0..16i8).map(|i| i * 8 - 60).collect(), 0.1).unwrap()],
            biases: vec![vec![0.0; 2]],
            seed: 1,
        };
        let packed = PackedModel::build(&model, ChunkShape { rows: 4, cols: 2 }, 8).unwrap();
        let (p0, o0) = packed.map.locate_bit(0, 1, 0, 7).unwrap();
        let (p1, o1) = packed.map.locate_bit(0, 5, 1, 7).unwrap();
        assert_eq!((p0, p1), (0, 1));
        let g = DramGeometry::new(16, 2, 8).unwrap();
        let template = TemplateMap::from_cells(
            g,
            0,
            [cell(5, o0, FlipDirection::ZeroToOne), cell(6, o1, FlipDirection::OneToZero)],
        )
        .unwrap();
        let mut sim = AttackSim::new(template, packed, 8, TraceConfig::default(), 0.0).unwrap();
        let mut ledger = LeakLedger::for_map(sim.map());
        let mut rng = seeds::rng(2);
        let plan = sim.plan_round(&ledger, Strategy::MsbPriority, &mut rng).unwrap().unwrap();
        let rows: Vec<_> = plan
            .targets
            .iter()
            .map(|t| (t.target_row, t.victim_aggressor_row, t.attacker_aggressor_row))
            .collect();
        assert_eq!(rows, vec![(5, 4, 6), (6, 7, 5)]);
        let cost = CostModel::for_strategy(Strategy::MsbPriority);
        sim.execute_round(&plan, 1, &mut ledger, &cost, &mut rng).unwrap();
        ledger.verify_against(&model).unwrap();
        assert_eq!(ledger.known_bits(), 2);
    }

    #[test]
    fn fully_known_ledger_converges_immediately() {
        let mut sim = tiny_sim(vec![cell(5, 0, FlipDirection::ZeroToOne)]);
        let ledger = LeakLedger::fully_known(&tiny_model());
        assert!(sim
            .plan_round(&ledger, Strategy::AllBits, &mut seeds::rng(0))
            .unwrap()
            .is_none());
        let (ledger, curve) = sim
            .run_attack(&AttackConfig {
                rounds: 0,
                strategy: Strategy::AllBits,
                cost_model: CostModel::for_strategy(Strategy::AllBits),
                seed: 0,
            })
            .unwrap();
        assert_eq!(ledger.known_bits(), 0);
        assert!(curve.points.is_empty());
    }

    #[test]
    fn cost_matches_closed_form() {
        let c = CostModel::for_strategy(Strategy::MsbPriority);
        assert!((c.round_seconds(11_000) - (12.0 + 21.0 + 1.0 + 239.0)).abs() < 1e-9);
        let c = CostModel::for_strategy(Strategy::AllBits);
        assert!((c.round_seconds(17_000) - (12.0 + 21.0 + 1.0 + 375.0)).abs() < 1e-9);
    }

    #[test]
    fn curve_csv_header() {
        let curve = RecoveryCurve::default();
        assert_eq!(
            curve.to_csv(),
            "round,msb,msb1,msb2,msb3,msb4,msb5,msb6,msb7,full,seconds\n"
        );
    }
}
