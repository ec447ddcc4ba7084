//! The victim: an int8-quantized dense network, its packed in-memory weight
//! layout, and the page-access trace of one inference.
//!
//! Weight matrices are stored `in_features x out_features` (the GEMM `B`
//! operand). Packing tiles the matrix into `chunk_rows x chunk_cols` chunks in
//! row-major chunk order and writes each chunk column by column; ragged edges
//! are zero-padded to the full chunk. Each layer's packed buffer starts on a
//! fresh page.

use crate::error::{Error, Result};
use crate::memsys::{MemorySystem, PageKind, VictimPageTag};

/// Signed two's-complement weight codes with a per-layer dequantization step.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl QuantizedLayer {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, scale: f64) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} codes for a {rows}x{cols} matrix",
                codes.len()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
        }
        Ok(QuantizedLayer {
            rows,
            cols,
            codes,
            scale,
        })
    }

    /// Symmetric per-layer quantization with `scale = max|w| / 127`.
    pub fn quantize(rows: usize, cols: usize, weights: &[f64]) -> Result<Self> {
        let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
        let codes = weights
            .iter()
            .map(|w| (w / scale).round().clamp(-128.0, 127.0) as i8)
            .collect();
        QuantizedLayer::new(rows, cols, codes, scale)
    }

    pub fn code(&self, row: usize, col: usize) -> i8 {
        self.codes[row * self.cols + col]
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.scale).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChunkShape {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ChunkShape {
    fn default() -> Self {
        ChunkShape { rows: 512, cols: 8 }
    }
}

/// Packs `layer` and returns the buffer plus the byte offset of every weight
/// (row-major order).
pub fn pack_layer(layer: &QuantizedLayer, chunk: ChunkShape) -> Result<(Vec<u8>, Vec<usize>)> {
    if chunk.rows == 0 || chunk.cols == 0 {
        return Err(Error::Parameter("chunk dimensions must be at least 1".into()));
    }
    if layer.rows == 0 || layer.cols == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let row_blocks = layer.rows.div_ceil(chunk.rows);
    let col_blocks = layer.cols.div_ceil(chunk.cols);
    let chunk_bytes = chunk.rows * chunk.cols;
    let mut bytes = vec![0u8; row_blocks * col_blocks * chunk_bytes];
    let mut offsets = vec![0usize; layer.rows * layer.cols];

    let mut pos = 0;
    for rb in 0..row_blocks {
        for cb in 0..col_blocks {
            for c in 0..chunk.cols {
                for r in 0..chunk.rows {
                    let (row, col) = (rb * chunk.rows + r, cb * chunk.cols + c);
                    if row < layer.rows && col < layer.cols {
                        bytes[pos] = layer.code(row, col) as u8;
                        offsets[row * layer.cols + col] = pos;
                    }
                    pos += 1;
                }
            }
        }
    }
    Ok((bytes, offsets))
}

/// Inverse of [`pack_layer`] on real (non-pad) positions.
pub fn unpack_layer(bytes: &[u8], rows: usize, cols: usize, chunk: ChunkShape) -> Result<Vec<i8>> {
    let probe = QuantizedLayer {
        rows,
        cols,
        codes: vec![0; rows * cols],
        scale: 1.0,
    };
    let (expected, offsets) = pack_layer(&probe, chunk)?;
    if bytes.len() != expected.len() {
        return Err(Error::Shape(format!(
            "packed buffer of {} bytes, expected {}",
            bytes.len(),
            expected.len()
        )));
    }
    Ok(offsets.iter().map(|&o| bytes[o] as i8).collect())
}

/// Logical position of one weight bit. `bit` 7 is the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightBit {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub bit: u8,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    rows: usize,
    cols: usize,
    first_page: usize,
    pages: usize,
    offsets: Vec<usize>,
}

const PAD: u32 = u32::MAX;

/// Bijection between weight coordinates and `(logical page, byte in page)`.
#[derive(Debug, Clone)]
pub struct WeightAddressMap {
    page_size: usize,
    layers: Vec<LayerLayout>,
    /// Per logical page and byte: index into `owners`, or `PAD`.
    inverse: Vec<u32>,
    owners: Vec<(u32, u32, u32)>,
}

impl WeightAddressMap {
    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_pages(&self) -> usize {
        self.inverse.len() / self.page_size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        (self.layers[layer].rows, self.layers[layer].cols)
    }

    /// Logical pages holding `layer`'s weights.
    pub fn layer_pages(&self, layer: usize) -> std::ops::Range<usize> {
        let l = &self.layers[layer];
        l.first_page..l.first_page + l.pages
    }

    pub fn forward(&self, layer: usize, row: usize, col: usize) -> Result<(usize, usize)> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Index(format!("layer {layer}")))?;
        if row >= l.rows || col >= l.cols {
            return Err(Error::Index(format!(
                "({row}, {col}) outside {}x{} layer {layer}",
                l.rows, l.cols
            )));
        }
        let off = l.offsets[row * l.cols + col];
        Ok((l.first_page + off / self.page_size, off % self.page_size))
    }

    pub fn inverse(&self, page: usize, byte: usize) -> Option<(usize, usize, usize)> {
        if byte >= self.page_size {
            return None;
        }
        let slot = *self.inverse.get(page * self.page_size + byte)?;
        (slot != PAD).then(|| {
            let (l, r, c) = self.owners[slot as usize];
            (l as usize, r as usize, c as usize)
        })
    }

    /// Page and in-page bit offset of one weight bit. The sign bit of each
    /// byte sits in the byte's first bit slot.
    pub fn locate_bit(&self, layer: usize, row: usize, col: usize, bit: u8) -> Result<(usize, usize)> {
        if bit > 7 {
            return Err(Error::Index(format!("bit index {bit}")));
        }
        let (page, byte) = self.forward(layer, row, col)?;
        Ok((page, byte * 8 + (7 - bit as usize)))
    }

    pub fn inverse_bit(&self, page: usize, bit_offset: usize) -> Option<WeightBit> {
        let (layer, row, col) = self.inverse(page, bit_offset / 8)?;
        Some(WeightBit {
            layer,
            row,
            col,
            bit: 7 - (bit_offset % 8) as u8,
        })
    }

    /// Real weight bytes in `page`, as in-page byte offsets.
    pub fn real_bytes(&self, page: usize) -> impl Iterator<Item = usize> + '_ {
        let base = page * self.page_size;
        self.inverse[base..base + self.page_size]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != PAD)
            .map(|(b, _)| b)
    }
}

/// A quantized model with its packed page images.
#[derive(Debug, Clone)]
pub struct PackedModel {
    pub map: WeightAddressMap,
    pub pages: Vec<Vec<u8>>,
    pub chunk: ChunkShape,
}

impl PackedModel {
    pub fn build(model: &QuantizedModel, chunk: ChunkShape, page_size: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(Error::Parameter("page size must be positive".into()));
        }
        let mut layouts = Vec::with_capacity(model.layers.len());
        let mut pages: Vec<Vec<u8>> = Vec::new();
        let mut owners = Vec::new();
        let mut inverse = Vec::new();

        for (li, layer) in model.layers.iter().enumerate() {
            let (bytes, offsets) = pack_layer(layer, chunk)?;
            let n_pages = bytes.len().div_ceil(page_size);
            let first_page = pages.len();
            for p in 0..n_pages {
                let mut page = vec![0u8; page_size];
                let start = p * page_size;
                let end = (start + page_size).min(bytes.len());
                page[..end - start].copy_from_slice(&bytes[start..end]);
                pages.push(page);
            }
            let mut inv = vec![PAD; n_pages * page_size];
            for r in 0..layer.rows {
                for c in 0..layer.cols {
                    inv[offsets[r * layer.cols + c]] = owners.len() as u32;
                    owners.push((li as u32, r as u32, c as u32));
                }
            }
            inverse.extend(inv);
            layouts.push(LayerLayout {
                rows: layer.rows,
                cols: layer.cols,
                first_page,
                pages: n_pages,
                offsets,
            });
        }

        Ok(PackedModel {
            map: WeightAddressMap {
                page_size,
                layers: layouts,
                inverse,
                owners,
            },
            pages,
            chunk,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    InferStart,
    LayerStart(usize),
    KernelCreate(usize),
}

impl std::fmt::Display for Anchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Anchor::InferStart => f.write_str("infer_start"),
            Anchor::LayerStart(l) => write!(f, "layer_start({l})"),
            Anchor::KernelCreate(l) => write!(f, "kernel_create({l})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub anchor: Anchor,
    pub page_accesses: Vec<VictimPageTag>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceTrace {
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TraceConfig {
    /// Non-secret page accesses (activations, temporaries) issued before each
    /// weight page.
    pub non_secret_between: usize,
}

impl InferenceTrace {
    /// Access pattern of an event as page kinds, for massage planning.
    pub fn pattern(event: &TraceEvent) -> Vec<PageKind> {
        event.page_accesses.iter().map(|t| t.kind).collect()
    }
}

/// Emits the anchored page-access trace of one inference. Every weight page
/// must be resident or in swap.
pub fn run_inference_trace(
    map: &WeightAddressMap,
    memory: &MemorySystem,
    config: TraceConfig,
) -> Result<InferenceTrace> {
    for page in 0..map.num_pages() {
        if memory.resident_frame(page).is_none() && memory.swap_content(page).is_none() {
            return Err(Error::Placement);
        }
    }
    let mut next_scratch = map.num_pages();
    let mut events = vec![TraceEvent {
        anchor: Anchor::InferStart,
        page_accesses: Vec::new(),
    }];
    for layer in 0..map.num_layers() {
        events.push(TraceEvent {
            anchor: Anchor::LayerStart(layer),
            page_accesses: Vec::new(),
        });
        let mut accesses = Vec::new();
        for page in map.layer_pages(layer) {
            for _ in 0..config.non_secret_between {
                accesses.push(VictimPageTag::non_secret(next_scratch));
                next_scratch += 1;
            }
            accesses.push(VictimPageTag::secret(page));
        }
        events.push(TraceEvent {
            anchor: Anchor::KernelCreate(layer),
            page_accesses: accesses,
        });
    }
    Ok(InferenceTrace { events })
}

/// Victim weights plus float biases, as stored in the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
    /// One bias vector of length `cols` per layer.
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

const MODEL_MAGIC: &[u8; 4] = b"RLQM";
const MODEL_VERSION: u32 = 1;

impl QuantizedModel {
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.codes.len()).sum()
    }

    /// Little-endian: magic, version, seed, layer count, per-layer
    /// `(rows, cols, scale)`, then each layer's codes, then each layer's biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.rows as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols as u32).to_le_bytes());
            out.extend_from_slice(&l.scale.to_le_bytes());
        }
        for l in &self.layers {
            out.extend(l.codes.iter().map(|&c| c as u8));
        }
        for b in &self.biases {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::format(0, "not a model file"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format(0, format!("unsupported model version {version}")));
        }
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            dims.push((r.u32()? as usize, r.u32()? as usize, r.f64()?));
        }
        let mut layers = Vec::with_capacity(n);
        for &(rows, cols, scale) in &dims {
            let codes = r.take(rows * cols)?.iter().map(|&b| b as i8).collect();
            layers.push(QuantizedLayer::new(rows, cols, codes, scale)?);
        }
        let mut biases = Vec::with_capacity(n);
        for &(_, cols, _) in &dims {
            biases.push((0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(0, "trailing bytes after model"));
        }
        Ok(QuantizedModel {
            layers,
            biases,
            seed,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(0, "truncated model file"))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram_sim::DramGeometry;

    fn layer(rows: usize, cols: usize) -> QuantizedLayer {
        let codes = (0..rows * cols).map(|i| (i as i32 - 60) as i8).collect();
        QuantizedLayer::new(rows, cols, codes, 0.5).unwrap()
    }

    #[test]
    fn four_by_two_chunk_is_column_major() {
        let l = layer(4, 2);
        let (bytes, _) = pack_layer(&l, ChunkShape { rows: 4, cols: 2 }).unwrap();
        let expected: Vec<u8> = [(0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (1, 1), (2, 1), (3, 1)]
            .iter()
            .map(|&(r, c)| l.code(r, c) as u8)
            .collect();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn five_by_three_pads_to_four_chunks() {
        let l = layer(5, 3);
        let chunk = ChunkShape { rows: 4, cols: 2 };
        let (bytes, offsets) = pack_layer(&l, chunk).unwrap();
        assert_eq!(bytes.len(), 32);
        for r in 0..5 {
            for c in 0..3 {
                // chunk index, then column-major inside the chunk
                let oracle = ((r / 4) * 2 + c / 2) * 8 + (c % 2) * 4 + r % 4;
                assert_eq!(offsets[r * 3 + c], oracle);
                assert_eq!(bytes[oracle], l.code(r, c) as u8);
            }
        }
        assert_eq!(unpack_layer(&bytes, 5, 3, chunk).unwrap(), l.codes);
    }

    #[test]
    fn single_weight_packs_to_offset_zero() {
        let l = layer(1, 1);
        for chunk in [ChunkShape { rows: 1, cols: 1 }, ChunkShape::default()] {
            let (bytes, offsets) = pack_layer(&l, chunk).unwrap();
            assert_eq!(bytes[0], l.codes[0] as u8);
            assert_eq!(offsets, vec![0]);
        }
        let (bytes, _) = pack_layer(&l, ChunkShape { rows: 1, cols: 1 }).unwrap();
        assert_eq!(bytes.len(), 1);
    }

    #[test]
    fn empty_matrix_and_bad_chunk() {
        let empty = QuantizedLayer::new(0, 3, vec![], 1.0).unwrap();
        assert_eq!(pack_layer(&empty, ChunkShape::default()).unwrap().0, Vec::<u8>::new());
        assert!(pack_layer(&layer(2, 2), ChunkShape { rows: 0, cols: 2 }).is_err());
    }

    #[test]
    fn quantize_uses_symmetric_scale() {
        let q = QuantizedLayer::quantize(1, 3, &[1.27, -0.635, 0.0]).unwrap();
        assert!((q.scale - 0.01).abs() < 1e-12);
        assert_eq!(q.codes, vec![127, -64, 0]);
    }

    fn model(dims: &[(usize, usize)]) -> QuantizedModel {
        QuantizedModel {
            layers: dims.iter().map(|&(r, c)| layer(r, c)).collect(),
            biases: dims.iter().map(|&(_, c)| vec![0.25; c]).collect(),
            seed: 3,
        }
    }

    #[test]
    fn page_boundary_and_msb_position() {
        // 512x16 with 512x8 chunks: two 4 KiB chunks, the second starts page 1
        let m = model(&[(512, 16)]);
        let packed = PackedModel::build(&m, ChunkShape::default(), 4096).unwrap();
        assert_eq!(packed.pages.len(), 2);
        assert_eq!(packed.map.locate_bit(0, 0, 0, 7).unwrap(), (0, 0));
        assert_eq!(packed.map.forward(0, 0, 8).unwrap(), (1, 0));
        for bit in 0..8u8 {
            assert_eq!(
                packed.map.locate_bit(0, 0, 8, bit).unwrap(),
                (1, 7 - bit as usize)
            );
        }
        assert!(packed.map.locate_bit(0, 512, 0, 0).is_err());
        assert!(packed.map.locate_bit(0, 0, 0, 8).is_err());
    }

    #[test]
    fn layers_start_on_fresh_pages() {
        let m = model(&[(3, 3), (3, 2)]);
        let packed = PackedModel::build(&m, ChunkShape { rows: 4, cols: 2 }, 64).unwrap();
        assert_eq!(packed.map.layer_pages(0), 0..1);
        assert_eq!(packed.map.layer_pages(1), 1..2);
        assert_eq!(packed.map.inverse(1, 0), Some((1, 0, 0)));
        assert_eq!(packed.map.inverse(0, 3), None); // pad slot
    }

    #[test]
    fn trace_without_scratch_pages() {
        let m = model(&[(2, 2), (2, 2)]);
        let packed = PackedModel::build(&m, ChunkShape { rows: 2, cols: 2 }, 64).unwrap();
        let mut mem = MemorySystem::new(DramGeometry::new(8, 2, 64).unwrap(), 16);
        assert!(matches!(
            run_inference_trace(&packed.map, &mem, TraceConfig::default()),
            Err(Error::Placement)
        ));
        let tags: Vec<_> = (0..2).map(VictimPageTag::secret).collect();
        mem.allocate_for_victim(&tags).unwrap();
        let t = run_inference_trace(&packed.map, &mem, TraceConfig::default()).unwrap();
        let anchors: Vec<Anchor> = t.events.iter().map(|e| e.anchor).collect();
        assert_eq!(
            anchors,
            vec![
                Anchor::InferStart,
                Anchor::LayerStart(0),
                Anchor::KernelCreate(0),
                Anchor::LayerStart(1),
                Anchor::KernelCreate(1)
            ]
        );
        assert_eq!(t.events[2].page_accesses, vec![VictimPageTag::secret(0)]);
        assert_eq!(t.events[4].page_accesses, vec![VictimPageTag::secret(1)]);
        let again = run_inference_trace(&packed.map, &mem, TraceConfig::default()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn scratch_page_precedes_each_weight_page() {
        let m = model(&[(2, 4)]);
        let packed = PackedModel::build(&m, ChunkShape { rows: 2, cols: 2 }, 4).unwrap();
        let mut mem = MemorySystem::new(DramGeometry::new(8, 2, 4).unwrap(), 16);
        let tags: Vec<_> = (0..2).map(VictimPageTag::secret).collect();
        mem.allocate_for_victim(&tags).unwrap();
        let t = run_inference_trace(&packed.map, &mem, TraceConfig { non_secret_between: 1 }).unwrap();
        assert_eq!(
            InferenceTrace::pattern(&t.events[2]),
            vec![PageKind::NonSecret, PageKind::Secret, PageKind::NonSecret, PageKind::Secret]
        );
    }

    #[test]
    fn model_file_round_trip() {
        let m = model(&[(3, 5), (5, 2)]);
        let bytes = m.to_bytes();
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(QuantizedModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
