//! Physical page pool with swap, per-CPU pageset and victim relocation.
//!
//! One simulated core: the attacker and the victim share a single pageset.
//! Free frames live either on the pageset stack or in the global free pool;
//! allocation prefers the pageset top and falls back to the lowest free frame
//! id in the global pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::dram_sim::DramGeometry;
use crate::error::{Error, Result};

pub const DEFAULT_PAGESET_CAPACITY: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PhysPageId {
    pub row: usize,
    pub slot: usize,
}

impl PhysPageId {
    pub fn new(row: usize, slot: usize) -> Self {
        PhysPageId { row, slot }
    }
}

impl std::fmt::Display for PhysPageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.row, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PageKind {
    Secret,
    NonSecret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct VictimPageTag {
    pub logical_index: usize,
    pub kind: PageKind,
}

impl VictimPageTag {
    pub fn secret(logical_index: usize) -> Self {
        VictimPageTag {
            logical_index,
            kind: PageKind::Secret,
        }
    }

    pub fn non_secret(logical_index: usize) -> Self {
        VictimPageTag {
            logical_index,
            kind: PageKind::NonSecret,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Free,
    Attacker,
    Victim(VictimPageTag),
    Other,
}

/// Bounded LIFO cache of recently freed frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcpPageset {
    stack: Vec<PhysPageId>,
    capacity: usize,
}

impl PcpPageset {
    pub fn new(capacity: usize) -> Self {
        PcpPageset {
            stack: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    /// Bottom-to-top view of the stack.
    pub fn entries(&self) -> &[PhysPageId] {
        &self.stack
    }

    /// Pushes `id`. On overflow the incoming entry and the oldest half of the
    /// stack are returned for the global pool instead.
    pub fn push(&mut self, id: PhysPageId) -> Vec<PhysPageId> {
        if self.stack.len() < self.capacity {
            self.stack.push(id);
            return Vec::new();
        }
        let half = (self.capacity / 2).max(1).min(self.stack.len());
        let mut spilled: Vec<PhysPageId> = self.stack.drain(..half).collect();
        spilled.push(id);
        spilled
    }

    pub fn pop(&mut self) -> Option<PhysPageId> {
        self.stack.pop()
    }

    fn clear(&mut self) {
        self.stack.clear();
    }
}

impl Default for PcpPageset {
    fn default() -> Self {
        PcpPageset::new(DEFAULT_PAGESET_CAPACITY)
    }
}

/// Page-count breakdown of one anchored access burst: `leading` non-secret
/// pages before the first secret page, `secret` pages, and `interleaved`
/// non-secret pages after the first secret page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MassagePlan {
    pub leading: usize,
    pub secret: usize,
    pub interleaved: usize,
}

impl MassagePlan {
    pub fn from_pattern(pattern: &[PageKind]) -> Self {
        let first_secret = pattern
            .iter()
            .position(|k| *k == PageKind::Secret)
            .unwrap_or(pattern.len());
        let secret = pattern.iter().filter(|k| **k == PageKind::Secret).count();
        MassagePlan {
            leading: first_secret,
            secret,
            interleaved: pattern.len() - first_secret - secret,
        }
    }

    pub fn total(&self) -> usize {
        self.leading + self.secret + self.interleaved
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogEvent {
    pub tick: u64,
    pub op: &'static str,
    pub args: serde_json::Value,
    pub placements: Vec<PhysPageId>,
}

impl LogEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log events serialize")
    }
}

/// The simulated physical memory: frame ownership, victim page contents,
/// swap space and the shared pageset.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    geometry: DramGeometry,
    owners: Vec<Owner>,
    global_free: BTreeSet<PhysPageId>,
    pageset: PcpPageset,
    contents: HashMap<PhysPageId, Vec<u8>>,
    resident: BTreeMap<usize, PhysPageId>,
    swap: BTreeMap<usize, Vec<u8>>,
    tick: u64,
    log: Option<Vec<LogEvent>>,
}

impl MemorySystem {
    /// All frames start Free in the global pool.
    pub fn new(geometry: DramGeometry, pageset_capacity: usize) -> Self {
        let frames = geometry.frames();
        let global_free = (0..geometry.rows_total)
            .flat_map(|r| (0..geometry.pages_per_row).map(move |s| PhysPageId::new(r, s)))
            .collect();
        MemorySystem {
            geometry,
            owners: vec![Owner::Free; frames],
            global_free,
            pageset: PcpPageset::new(pageset_capacity),
            contents: HashMap::new(),
            resident: BTreeMap::new(),
            swap: BTreeMap::new(),
            tick: 0,
            log: None,
        }
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log(&self) -> &[LogEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn pageset(&self) -> &PcpPageset {
        &self.pageset
    }

    fn index(&self, id: PhysPageId) -> Result<usize> {
        if id.row >= self.geometry.rows_total || id.slot >= self.geometry.pages_per_row {
            return Err(Error::Index(format!("frame {id} outside geometry")));
        }
        Ok(id.row * self.geometry.pages_per_row + id.slot)
    }

    fn id_of(&self, index: usize) -> PhysPageId {
        PhysPageId::new(
            index / self.geometry.pages_per_row,
            index % self.geometry.pages_per_row,
        )
    }

    pub fn owner(&self, id: PhysPageId) -> Result<Owner> {
        Ok(self.owners[self.index(id)?])
    }

    pub fn frames(&self) -> impl Iterator<Item = (PhysPageId, Owner)> + '_ {
        self.owners
            .iter()
            .enumerate()
            .map(|(i, o)| (self.id_of(i), *o))
    }

    /// Marks a Free frame as owned by some other process.
    pub fn reserve_other(&mut self, id: PhysPageId) -> Result<()> {
        let i = self.index(id)?;
        if self.owners[i] != Owner::Free || !self.global_free.remove(&id) {
            return Err(Error::Ownership(format!("{id} (not in the global free pool)")));
        }
        self.owners[i] = Owner::Other;
        Ok(())
    }

    /// Where a victim page currently lives, if resident.
    pub fn resident_frame(&self, logical_index: usize) -> Option<PhysPageId> {
        self.resident.get(&logical_index).copied()
    }

    pub fn page_content(&self, id: PhysPageId) -> Option<&[u8]> {
        self.contents.get(&id).map(Vec::as_slice)
    }

    pub fn swap_content(&self, logical_index: usize) -> Option<&[u8]> {
        self.swap.get(&logical_index).map(Vec::as_slice)
    }

    pub fn swap_len(&self) -> usize {
        self.swap.len()
    }

    /// Overwrites the content of a victim-owned frame.
    pub fn write_victim_page(&mut self, id: PhysPageId, bytes: &[u8]) -> Result<()> {
        let i = self.index(id)?;
        if !matches!(self.owners[i], Owner::Victim(_)) {
            return Err(Error::Ownership(format!("{id} (not victim-owned)")));
        }
        if bytes.len() != self.geometry.page_size_bytes {
            return Err(Error::Geometry(format!(
                "page content of {} bytes, page size is {}",
                bytes.len(),
                self.geometry.page_size_bytes
            )));
        }
        self.contents.insert(id, bytes.to_vec());
        Ok(())
    }

    fn record(&mut self, op: &'static str, args: serde_json::Value, placements: Vec<PhysPageId>) {
        self.tick += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(LogEvent {
                tick: self.tick,
                op,
                args,
                placements,
            });
        }
    }

    /// Grabs every Free frame and evicts every victim frame to swap. Returns
    /// the frames the attacker holds afterwards, in id order.
    pub fn exhaust_memory(&mut self) -> Vec<PhysPageId> {
        self.pageset.clear();
        self.global_free.clear();
        let mut evicted = 0usize;
        for i in 0..self.owners.len() {
            match self.owners[i] {
                Owner::Free => self.owners[i] = Owner::Attacker,
                Owner::Victim(tag) => {
                    let id = self.id_of(i);
                    let page = self
                        .contents
                        .remove(&id)
                        .unwrap_or_else(|| vec![0; self.geometry.page_size_bytes]);
                    self.swap.insert(tag.logical_index, page);
                    self.resident.remove(&tag.logical_index);
                    self.owners[i] = Owner::Attacker;
                    evicted += 1;
                }
                Owner::Attacker | Owner::Other => {}
            }
        }
        let held: Vec<PhysPageId> = self
            .owners
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Owner::Attacker)
            .map(|(i, _)| self.id_of(i))
            .collect();
        self.record(
            "exhaust_memory",
            serde_json::json!({ "evicted": evicted }),
            Vec::new(),
        );
        held
    }

    /// Frees attacker frames in the given order, pushing each onto the pageset.
    pub fn release_pages(&mut self, ordered_ids: &[PhysPageId]) -> Result<()> {
        for &id in ordered_ids {
            let i = self.index(id)?;
            if self.owners[i] != Owner::Attacker {
                return Err(Error::Ownership(id.to_string()));
            }
        }
        for &id in ordered_ids {
            let i = self.index(id)?;
            self.owners[i] = Owner::Free;
            for spilled in self.pageset.push(id) {
                self.global_free.insert(spilled);
            }
        }
        self.record(
            "release_pages",
            serde_json::json!({ "ids": ordered_ids }),
            Vec::new(),
        );
        Ok(())
    }

    fn take_free_frame(&mut self) -> Option<PhysPageId> {
        self.pageset.pop().or_else(|| self.global_free.pop_first())
    }

    /// Allocates one frame per tag, pageset first, and swaps in any saved
    /// content. Returns placements in allocation order.
    pub fn allocate_for_victim(&mut self, kinds: &[VictimPageTag]) -> Result<Vec<PhysPageId>> {
        let mut placed = Vec::with_capacity(kinds.len());
        for tag in kinds {
            if self.resident.contains_key(&tag.logical_index) {
                return Err(Error::Parameter(format!(
                    "victim page {} is already resident",
                    tag.logical_index
                )));
            }
            let id = self.take_free_frame().ok_or(Error::OutOfMemory)?;
            let i = self.index(id)?;
            self.owners[i] = Owner::Victim(*tag);
            let page = self
                .swap
                .remove(&tag.logical_index)
                .unwrap_or_else(|| vec![0; self.geometry.page_size_bytes]);
            self.contents.insert(id, page);
            self.resident.insert(tag.logical_index, id);
            placed.push(id);
        }
        self.record(
            "allocate_for_victim",
            serde_json::json!({ "tags": kinds }),
            placed.clone(),
        );
        Ok(placed)
    }

    /// On an anchor event, releases the frames for the next access burst so
    /// that LIFO replay of `pattern` puts the i-th secret page on
    /// `leakable_ids[i]` and every non-secret page on the next filler frame.
    /// Returns the predicted placement of every access in `pattern`.
    pub fn batched_massage(
        &mut self,
        anchor: &str,
        pattern: &[PageKind],
        leakable_ids: &[PhysPageId],
        filler_ids: &[PhysPageId],
    ) -> Result<Vec<PhysPageId>> {
        let plan = MassagePlan::from_pattern(pattern);
        if plan.total() > self.pageset.capacity() {
            return Err(Error::Plan(format!(
                "burst of {} pages exceeds pageset capacity {}; split across more anchors",
                plan.total(),
                self.pageset.capacity()
            )));
        }
        if leakable_ids.len() < plan.secret {
            return Err(Error::Plan(format!(
                "{} secret pages but only {} leakable frames",
                plan.secret,
                leakable_ids.len()
            )));
        }
        if filler_ids.len() < plan.leading + plan.interleaved {
            return Err(Error::Plan(format!(
                "{} non-secret pages but only {} filler frames",
                plan.leading + plan.interleaved,
                filler_ids.len()
            )));
        }

        let mut leak = leakable_ids.iter();
        let mut fill = filler_ids.iter();
        let predicted: Vec<PhysPageId> = pattern
            .iter()
            .map(|k| match k {
                PageKind::Secret => *leak.next().expect("checked above"),
                PageKind::NonSecret => *fill.next().expect("checked above"),
            })
            .collect();
        let order: Vec<PhysPageId> = predicted.iter().rev().copied().collect();
        self.release_pages(&order)?;
        self.record(
            "batched_massage",
            serde_json::json!({ "anchor": anchor, "plan": plan }),
            predicted.clone(),
        );
        Ok(predicted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(rows: usize) -> DramGeometry {
        DramGeometry::new(rows, 2, 64).unwrap()
    }

    fn ids(n: usize) -> Vec<PhysPageId> {
        (0..n).map(|i| PhysPageId::new(i / 2, i % 2)).collect()
    }

    #[test]
    fn exhaust_takes_everything_and_swaps_victims() {
        let mut m = MemorySystem::new(geo(4), 8);
        let tags: Vec<_> = (0..3).map(VictimPageTag::secret).collect();
        let placed = m.allocate_for_victim(&tags).unwrap();
        m.write_victim_page(placed[1], &[7; 64]).unwrap();
        let held = m.exhaust_memory();
        assert_eq!(held.len(), 8);
        assert_eq!(m.swap_len(), 3);
        assert_eq!(m.swap_content(1).unwrap(), &[7u8; 64][..]);
        assert!(m.frames().all(|(_, o)| o == Owner::Attacker));
        assert_eq!(m.exhaust_memory(), held);
    }

    #[test]
    fn exhaust_on_empty_pool() {
        let mut m = MemorySystem::new(geo(0), 8);
        assert!(m.exhaust_memory().is_empty());
    }

    #[test]
    fn release_then_allocate_reverses_order() {
        let mut m = MemorySystem::new(geo(4), 8);
        m.exhaust_memory();
        let order = ids(3);
        m.release_pages(&order).unwrap();
        let tags: Vec<_> = (0..3).map(VictimPageTag::secret).collect();
        let placed = m.allocate_for_victim(&tags).unwrap();
        assert_eq!(placed, vec![order[2], order[1], order[0]]);
    }

    #[test]
    fn releasing_unowned_page_fails() {
        let mut m = MemorySystem::new(geo(4), 8);
        let err = m.release_pages(&[PhysPageId::new(0, 0)]);
        assert!(matches!(err, Err(Error::Ownership(_))));
    }

    #[test]
    fn fallback_uses_lowest_free_frame() {
        let mut m = MemorySystem::new(geo(4), 8);
        m.reserve_other(PhysPageId::new(0, 0)).unwrap();
        let placed = m.allocate_for_victim(&[VictimPageTag::secret(0)]).unwrap();
        assert_eq!(placed, vec![PhysPageId::new(0, 1)]);
        assert!(m.allocate_for_victim(&[]).unwrap().is_empty());
    }

    #[test]
    fn out_of_memory_when_nothing_free() {
        let mut m = MemorySystem::new(geo(1), 8);
        m.exhaust_memory();
        assert!(matches!(
            m.allocate_for_victim(&[VictimPageTag::secret(0)]),
            Err(Error::OutOfMemory)
        ));
    }

    #[test]
    fn overflow_spills_incoming_and_oldest_half() {
        let mut p = PcpPageset::new(4);
        let all = ids(5);
        for id in &all[..4] {
            assert!(p.push(*id).is_empty());
        }
        let spilled = p.push(all[4]);
        assert_eq!(spilled, vec![all[0], all[1], all[4]]);
        assert_eq!(p.entries(), &all[2..4]);
    }

    #[test]
    fn massage_places_secrets_on_leakable_frames() {
        let mut m = MemorySystem::new(geo(8), 8);
        m.exhaust_memory();
        let x = PhysPageId::new(3, 0);
        let y = PhysPageId::new(5, 1);
        let pattern = [PageKind::Secret, PageKind::Secret];
        let predicted = m.batched_massage("L0", &pattern, &[x, y], &[]).unwrap();
        assert_eq!(predicted, vec![x, y]);
        // released in reverse access order, so Y goes in first
        assert_eq!(m.pageset().entries(), &[y, x]);
        let placed = m
            .allocate_for_victim(&[VictimPageTag::secret(0), VictimPageTag::secret(1)])
            .unwrap();
        assert_eq!(placed, predicted);
    }

    #[test]
    fn massage_with_no_secrets_uses_only_fillers() {
        let mut m = MemorySystem::new(geo(8), 8);
        m.exhaust_memory();
        let f = PhysPageId::new(7, 0);
        let predicted = m
            .batched_massage("L0", &[PageKind::NonSecret], &[PhysPageId::new(1, 0)], &[f])
            .unwrap();
        assert_eq!(predicted, vec![f]);
        assert_eq!(m.owner(PhysPageId::new(1, 0)).unwrap(), Owner::Attacker);
    }

    #[test]
    fn massage_errors() {
        let mut m = MemorySystem::new(geo(8), 2);
        m.exhaust_memory();
        let pattern = [PageKind::Secret; 3];
        let many = ids(3);
        assert!(matches!(
            m.batched_massage("L0", &pattern, &many, &[]),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            m.batched_massage("L0", &pattern[..2], &many[..1], &[]),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn plan_breakdown_from_pattern() {
        use PageKind::*;
        let p = MassagePlan::from_pattern(&[NonSecret, Secret, NonSecret, Secret]);
        assert_eq!(
            p,
            MassagePlan {
                leading: 1,
                secret: 2,
                interleaved: 1
            }
        );
    }

    #[test]
    fn log_lines_have_stable_field_order() {
        let mut m = MemorySystem::new(geo(2), 8);
        m.enable_log();
        m.exhaust_memory();
        m.release_pages(&[PhysPageId::new(1, 1)]).unwrap();
        m.allocate_for_victim(&[VictimPageTag::secret(0)]).unwrap();
        let lines: Vec<String> = m.log().iter().map(LogEvent::to_line).collect();
        assert_eq!(
            lines[1],
            r#"{"tick":2,"op":"release_pages","args":{"ids":[{"row":1,"slot":1}]},"placements":[]}"#
        );
        assert!(lines[2].starts_with(r#"{"tick":3,"op":"allocate_for_victim","args":{"tags":"#));
        assert!(lines[2].ends_with(r#""placements":[{"row":1,"slot":1}]}"#));
    }
}
